//! JSON and SVG serializers for scenes and tables.

use std::fmt::Write;
use std::str::FromStr;

use serde::Serialize;

use super::scene::SrocScene;
use super::tables::{ForestData, TreeCounts, TreeNode};
use super::weights::WeightTable;
use super::OutputError;
use crate::models::CorrelationResidual;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Json,
    Svg,
}

impl FromStr for OutputFormat {
    type Err = OutputError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(OutputFormat::Json),
            "svg" => Ok(OutputFormat::Svg),
            other => Err(OutputError::UnsupportedFormat(other.to_string())),
        }
    }
}

/// Anything that can be written out.
#[derive(Debug, Clone, Copy, Serialize)]
#[serde(untagged)]
pub enum Renderable<'a> {
    Scene(&'a SrocScene),
    Forest(&'a ForestData),
    Tree(&'a TreeCounts),
    Weights(&'a WeightTable),
    Residuals(&'a [CorrelationResidual]),
}

pub fn render(obj: Renderable<'_>, format: OutputFormat) -> Result<String, OutputError> {
    match format {
        OutputFormat::Json => serde_json::to_string_pretty(&obj).map_err(|e| OutputError::BadInput(e.to_string())),
        OutputFormat::Svg => Ok(match obj {
            Renderable::Scene(s) => scene_svg(s),
            Renderable::Forest(f) => forest_svg(f),
            Renderable::Tree(t) => tree_svg(t),
            Renderable::Weights(w) => weights_svg(w),
            Renderable::Residuals(r) => residuals_svg(r),
        }),
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn open(w: f64, h: f64) -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" \
         viewBox=\"0 0 {w} {h}\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\">\n\
         <rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" fill=\"#ffffff\"/>\n"
    )
}

const PAD: f64 = 100.0;
const SPAN: f64 = 800.0;

fn px(x: f64) -> f64 {
    PAD + SPAN * x
}

fn py(y: f64) -> f64 {
    PAD + SPAN * (1.0 - y)
}

fn path(points: &[[f64; 2]], closed: bool) -> String {
    let mut d = String::new();
    for (i, p) in points.iter().enumerate() {
        let _ = write!(d, "{}{:.2},{:.2} ", if i == 0 { "M" } else { "L" }, px(p[0]), py(p[1]));
    }
    if closed {
        d.push('Z');
    }
    d.trim_end().to_string()
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn scene_svg(s: &SrocScene) -> String {
    let mut out = open(1000.0, 1000.0);
    out.push_str(&format!(
        "<line x1=\"{a}\" y1=\"{b}\" x2=\"{b}\" y2=\"{b}\" stroke=\"#000\"/>\n<line x1=\"{a}\" y1=\"{a}\" x2=\"{a}\" y2=\"{b}\" stroke=\"#000\"/>\n",
        a = px(0.0),
        b = py(0.0)
    ));
    for i in 0..=5 {
        let t = i as f64 / 5.0;
        let _ = write!(
            out,
            "<line x1=\"{x:.2}\" y1=\"{y0:.2}\" x2=\"{x:.2}\" y2=\"{y1:.2}\" stroke=\"#000\"/>\
             <text x=\"{x:.2}\" y=\"{ty:.2}\" font-size=\"20\" text-anchor=\"middle\">{t:.1}</text>\n\
             <line x1=\"{x0:.2}\" y1=\"{y:.2}\" x2=\"{x1:.2}\" y2=\"{y:.2}\" stroke=\"#000\"/>\
             <text x=\"{tx:.2}\" y=\"{yy:.2}\" font-size=\"20\" text-anchor=\"end\">{t:.1}</text>\n",
            x = px(t),
            y0 = py(0.0),
            y1 = py(0.0) + 10.0,
            ty = py(0.0) + 35.0,
            x0 = px(0.0) - 10.0,
            x1 = px(0.0),
            y = py(t),
            tx = px(0.0) - 15.0,
            yy = py(t) + 7.0,
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"500\" y=\"970\" font-size=\"26\" text-anchor=\"middle\">{}</text>",
        esc(&s.x_label)
    );
    let _ = writeln!(
        out,
        "<text x=\"30\" y=\"500\" font-size=\"26\" text-anchor=\"middle\" transform=\"rotate(-90 30 500)\">{}</text>",
        esc(&s.y_label)
    );
    for (i, r) in s.regions.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if let Some(p) = &r.prediction {
            let _ = writeln!(
                out,
                "<path class=\"prediction\" d=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-dasharray=\"8 6\"/>",
                path(p, true)
            );
        }
        let _ = writeln!(
            out,
            "<path class=\"credible\" d=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
            path(&r.credible, true)
        );
        if let Some(c) = &r.curve {
            let pts: Vec<String> = c.iter().map(|p| format!("{:.2},{:.2}", px(p[0]), py(p[1]))).collect();
            let _ = writeln!(
                out,
                "<polyline class=\"curve\" points=\"{}\" fill=\"none\" stroke=\"{color}\"/>",
                pts.join(" ")
            );
        }
        let (x, y) = (px(r.summary[0]), py(r.summary[1]));
        let _ = writeln!(
            out,
            "<rect class=\"summary\" x=\"{:.2}\" y=\"{:.2}\" width=\"14\" height=\"14\" fill=\"{color}\"><title>{}</title></rect>",
            x - 7.0,
            y - 7.0,
            esc(&r.label)
        );
    }
    let groups: Vec<&str> = s.regions.iter().map(|r| r.label.as_str()).collect();
    for p in &s.points {
        let base = p.group.as_deref().and_then(|g| groups.iter().position(|l| *l == g)).unwrap_or(0);
        let (fill, dash) = match &p.quadas {
            Some(q) => (q.color.clone(), dash_of(&q.stroke)),
            None => (PALETTE[base % PALETTE.len()].to_string(), ""),
        };
        let _ = writeln!(
            out,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"{:.2}\" fill=\"{fill}\" fill-opacity=\"0.6\" stroke=\"#000\"{dash} data-study=\"{}\"><title>{}: Se {:.3}, Sp {:.3}</title></circle>",
            px(p.x),
            py(p.y),
            4.0 + 14.0 * p.size.sqrt(),
            esc(&p.study_id),
            esc(&p.study_id),
            p.se,
            p.sp
        );
    }
    for (i, l) in s.legend.iter().enumerate() {
        let y = 120.0 + 28.0 * i as f64;
        let _ = writeln!(
            out,
            "<rect x=\"620\" y=\"{:.2}\" width=\"18\" height=\"18\" fill=\"{}\" stroke=\"#000\"{}/><text x=\"646\" y=\"{:.2}\" font-size=\"18\">{}</text>",
            y,
            l.color,
            dash_of(&l.stroke),
            y + 15.0,
            esc(&l.label)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn dash_of(stroke: &str) -> &'static str {
    match stroke {
        "dashed" => " stroke-dasharray=\"6 3\"",
        "dotted" => " stroke-dasharray=\"2 2\"",
        _ => "",
    }
}

/// Horizontal interval panels: one row per item, `panels` give
/// `(title, x offset, [(lower, estimate, upper)])` on a `[lo, hi]` axis.
fn interval_rows(out: &mut String, labels: &[String], panels: &[(&str, f64, Vec<(f64, f64, f64)>)], lo: f64, hi: f64) {
    let width = 280.0;
    let map = |off: f64, v: f64| off + width * ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    for (title, off, rows) in panels {
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"40\" font-size=\"20\" text-anchor=\"middle\">{}</text>",
            off + width / 2.0,
            esc(title)
        );
        let bottom = 70.0 + 30.0 * labels.len() as f64;
        let _ = writeln!(
            out,
            "<line x1=\"{off:.2}\" y1=\"{bottom:.2}\" x2=\"{:.2}\" y2=\"{bottom:.2}\" stroke=\"#000\"/>",
            off + width
        );
        for t in [lo, 0.5 * (lo + hi), hi] {
            let _ = writeln!(
                out,
                "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"14\" text-anchor=\"middle\">{t:.2}</text>",
                map(*off, t),
                bottom + 20.0
            );
        }
        for (i, (l, m, u)) in rows.iter().enumerate() {
            let y = 70.0 + 30.0 * i as f64;
            let _ = writeln!(
                out,
                "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#000\"/><rect x=\"{:.2}\" y=\"{:.2}\" width=\"8\" height=\"8\" fill=\"#1f77b4\"/>",
                map(*off, *l),
                map(*off, *u),
                map(*off, *m) - 4.0,
                y - 4.0
            );
        }
    }
    for (i, l) in labels.iter().enumerate() {
        let _ = writeln!(out, "<text x=\"20\" y=\"{:.2}\" font-size=\"16\">{}</text>", 75.0 + 30.0 * i as f64, esc(l));
    }
}

fn forest_svg(f: &ForestData) -> String {
    let h = 130.0 + 30.0 * f.rows.len() as f64;
    let mut out = open(1000.0, h);
    let labels: Vec<String> = f.rows.iter().map(|r| format!("{} ({})", r.accuracy.study_id, r.year)).collect();
    let se = f.rows.iter().map(|r| (r.accuracy.se_ci.0, r.accuracy.se_hat, r.accuracy.se_ci.1)).collect();
    let sp = f.rows.iter().map(|r| (r.accuracy.sp_ci.0, r.accuracy.sp_hat, r.accuracy.sp_ci.1)).collect();
    interval_rows(&mut out, &labels, &[("Sensitivity", 320.0, se), ("Specificity", 660.0, sp)], 0.0, 1.0);
    out.push_str("</svg>\n");
    out
}

fn residuals_svg(r: &[CorrelationResidual]) -> String {
    let h = 130.0 + 30.0 * r.len() as f64;
    let mut out = open(1000.0, h);
    let labels: Vec<String> = r.iter().map(|x| x.study_id.clone()).collect();
    let rows: Vec<(f64, f64, f64)> = r.iter().map(|x| (x.residual.lower, x.residual.median, x.residual.upper)).collect();
    let bound = rows.iter().flat_map(|(a, _, c)| [a.abs(), c.abs()]).fold(0.1f64, f64::max);
    let zero = 360.0 + 140.0;
    let _ = writeln!(
        out,
        "<line x1=\"{zero:.2}\" y1=\"55\" x2=\"{zero:.2}\" y2=\"{:.2}\" stroke=\"#888\" stroke-dasharray=\"4 4\"/>",
        h - 60.0
    );
    interval_rows(&mut out, &labels, &[("Correlation residual", 360.0, rows)], -bound, bound);
    out.push_str("</svg>\n");
    out
}

fn weights_svg(w: &WeightTable) -> String {
    let h = 100.0 + 30.0 * w.rows.len() as f64;
    let mut out = open(1000.0, h);
    let max = w.rows.iter().flat_map(|r| [r.weight_se, r.weight_sp]).fold(1.0f64, f64::max);
    let _ = writeln!(out, "<text x=\"420\" y=\"40\" font-size=\"20\">Sensitivity weight (%)</text>");
    let _ = writeln!(out, "<text x=\"720\" y=\"40\" font-size=\"20\">Specificity weight (%)</text>");
    for (i, r) in w.rows.iter().enumerate() {
        let y = 70.0 + 30.0 * i as f64;
        let _ = writeln!(
            out,
            "<text x=\"20\" y=\"{:.2}\" font-size=\"16\">{}</text>\
             <rect x=\"420\" y=\"{:.2}\" width=\"{:.2}\" height=\"16\" fill=\"#1f77b4\"/><text x=\"{:.2}\" y=\"{:.2}\" font-size=\"14\">{:.1}</text>\
             <rect x=\"720\" y=\"{:.2}\" width=\"{:.2}\" height=\"16\" fill=\"#d62728\"/><text x=\"{:.2}\" y=\"{:.2}\" font-size=\"14\">{:.1}</text>",
            y + 5.0,
            esc(&r.study_id),
            y - 8.0,
            220.0 * r.weight_se / max,
            425.0 + 220.0 * r.weight_se / max,
            y + 5.0,
            r.weight_se,
            y - 8.0,
            220.0 * r.weight_sp / max,
            725.0 + 220.0 * r.weight_sp / max,
            y + 5.0,
            r.weight_sp
        );
    }
    out.push_str("</svg>\n");
    out
}

fn tree_svg(t: &TreeCounts) -> String {
    let mut out = open(1000.0, 600.0);
    fn node(out: &mut String, n: &TreeNode, x: f64, y: f64) {
        let _ = writeln!(
            out,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"180\" height=\"60\" rx=\"8\" fill=\"#f0f0f0\" stroke=\"#000\"/>\
             <text x=\"{x:.2}\" y=\"{:.2}\" font-size=\"18\" text-anchor=\"middle\">{}</text>\
             <text x=\"{x:.2}\" y=\"{:.2}\" font-size=\"18\" text-anchor=\"middle\">{}</text>",
            x - 90.0,
            y - 30.0,
            y - 5.0,
            esc(&n.label),
            y + 20.0,
            n.count.round()
        );
    }
    let xs = [[500.0].as_slice(), &[260.0, 740.0], &[130.0, 390.0, 610.0, 870.0]];
    node(&mut out, &t.root, 500.0, 80.0);
    for (i, c) in t.root.children.iter().enumerate() {
        let x = xs[1][i];
        let _ = writeln!(out, "<line x1=\"500\" y1=\"110\" x2=\"{x:.2}\" y2=\"250\" stroke=\"#000\"/>");
        node(&mut out, c, x, 280.0);
        for (j, g) in c.children.iter().enumerate() {
            let gx = xs[2][2 * i + j];
            let _ = writeln!(out, "<line x1=\"{x:.2}\" y1=\"310\" x2=\"{gx:.2}\" y2=\"450\" stroke=\"#000\"/>");
            node(&mut out, g, gx, 480.0);
        }
    }
    out.push_str("</svg>\n");
    out
}
