//! Forest-plot rows, prevalence trees and the HSROC parameter record.

use serde::{Deserialize, Serialize};

use super::OutputError;
use crate::data::{study_accuracy, Dataset, StudyAccuracy};
use crate::fit::FitResult;
use crate::models::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForestOrder {
    #[default]
    Input,
    ByYear,
    BySe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestRow {
    #[serde(flatten)]
    pub accuracy: StudyAccuracy,
    pub year: i32,
    pub author: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestData {
    pub order: ForestOrder,
    pub rows: Vec<ForestRow>,
}

/// Per-study accuracies in display order; ties keep input order.
pub fn forest_data(d: &Dataset, order: ForestOrder) -> Result<ForestData, OutputError> {
    let mut rows: Vec<ForestRow> = d
        .studies()
        .iter()
        .map(|s| Ok(ForestRow { accuracy: study_accuracy(s)?, year: s.year, author: s.author.clone() }))
        .collect::<Result<_, OutputError>>()?;
    match order {
        ForestOrder::Input => {}
        ForestOrder::ByYear => rows.sort_by_key(|r| r.year),
        ForestOrder::BySe => rows.sort_by(|a, b| b.accuracy.se_hat.total_cmp(&a.accuracy.se_hat)),
    }
    Ok(ForestData { order, rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeOrdering {
    #[default]
    TestFirst,
    DiseaseFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub label: String,
    pub count: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<TreeNode>,
}

impl TreeNode {
    fn leaf(label: &str, count: f64) -> TreeNode {
        TreeNode { label: label.into(), count, children: Vec::new() }
    }

    fn branch(label: &str, children: Vec<TreeNode>) -> TreeNode {
        TreeNode { label: label.into(), count: children.iter().map(|c| c.count).sum(), children }
    }
}

/// Expected counts in a population of `n`; real valued, rounded only when drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeCounts {
    pub n: f64,
    pub ordering: TreeOrdering,
    pub root: TreeNode,
}

impl TreeCounts {
    /// Leaf `(label, count)` pairs, left to right.
    pub fn leaves(&self) -> Vec<(&str, f64)> {
        fn walk<'a>(n: &'a TreeNode, out: &mut Vec<(&'a str, f64)>) {
            if n.children.is_empty() {
                out.push((&n.label, n.count));
            }
            for c in &n.children {
                walk(c, out);
            }
        }
        let mut out = Vec::new();
        walk(&self.root, &mut out);
        out
    }

    pub fn leaf(&self, label: &str) -> Option<f64> {
        self.leaves().into_iter().find(|(l, _)| *l == label).map(|(_, c)| c)
    }
}

pub fn prevalence_tree(n: f64, prev: f64, se: f64, sp: f64, ordering: TreeOrdering) -> Result<TreeCounts, OutputError> {
    if !(n >= 1.0 && n.is_finite()) {
        return Err(OutputError::BadInput(format!("population size {n} must be at least 1")));
    }
    for p in [prev, se, sp] {
        if !(0.0..=1.0).contains(&p) {
            return Err(OutputError::BadInput(format!("probability {p} outside [0, 1]")));
        }
    }
    let tp = n * prev * se;
    let fn_ = n * prev * (1.0 - se);
    let fp = n * (1.0 - prev) * (1.0 - sp);
    let tn = n * (1.0 - prev) * sp;
    let children = match ordering {
        TreeOrdering::TestFirst => vec![
            TreeNode::branch("test positive", vec![TreeNode::leaf("TP", tp), TreeNode::leaf("FP", fp)]),
            TreeNode::branch("test negative", vec![TreeNode::leaf("FN", fn_), TreeNode::leaf("TN", tn)]),
        ],
        TreeOrdering::DiseaseFirst => vec![
            TreeNode::branch("diseased", vec![TreeNode::leaf("TP", tp), TreeNode::leaf("FN", fn_)]),
            TreeNode::branch("non-diseased", vec![TreeNode::leaf("FP", fp), TreeNode::leaf("TN", tn)]),
        ],
    };
    Ok(TreeCounts { n, ordering, root: TreeNode { label: "population".into(), count: n, children } })
}

/// Posterior medians of the HSROC parameters, as consumed by review software.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HsrocRecord {
    pub lambda: f64,
    pub theta: f64,
    pub beta: f64,
    pub var_theta: f64,
    pub var_alpha: f64,
}

pub const HSROC_HEADER: &str = "lambda,theta,beta,var_theta,var_alpha";

impl HsrocRecord {
    pub fn from_fit(fit: &FitResult) -> Result<HsrocRecord, OutputError> {
        let m = |n: &str| fit.median(n).ok_or_else(|| OutputError::MissingParameter(n.into()));
        Ok(HsrocRecord {
            lambda: m("hsroc_lambda")?,
            theta: m("hsroc_theta")?,
            beta: m("hsroc_beta")?,
            var_theta: m("hsroc_var_theta")?,
            var_alpha: m("hsroc_var_alpha")?,
        })
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{HSROC_HEADER}\n{},{},{},{},{}\n",
            self.lambda, self.theta, self.beta, self.var_theta, self.var_alpha
        )
    }
}

impl From<ModelError> for OutputError {
    fn from(e: ModelError) -> Self {
        OutputError::Model(e.to_string())
    }
}
