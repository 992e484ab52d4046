//! Command-line front end.
//!
//! Exit codes: 0 success, 1 invalid dataset, 2 usage or runtime error,
//! 3 diagnostics gate failed under `--strict`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::analysis::{run_analysis, AnalysisConfig, AnalysisResult};
use crate::data::{parse_dataset_with, validate_dataset, CovariateKind, Dataset, SidecarConfig};
use crate::diagnostics::{trace_density_data, DiagnosticsSummary, SummaryRow};
use crate::fit::FitResult;
use crate::models::{
    BivariateConfig, Dependence, EffectKind, MetaregConfig, ModelSpec, SubgroupConfig, TlcmConfig,
};
use crate::outputs::{
    forest_data, prevalence_tree, render, sroc_scene_groups, ForestOrder, HsrocRecord, OutputFormat, Renderable,
    SceneOptions, TreeOrdering,
};
use crate::priors::{prior_predictive_summary, PriorModelKind, PriorsFile};
use crate::sampler::SamplerConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID_DATA: i32 = 1;
pub const EXIT_ERROR: i32 = 2;
pub const EXIT_GATE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "dtameta", version, about = "Bayesian meta-analysis of diagnostic test accuracy")]
struct Cli {
    /// Caps the worker threads used for parallel chains.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse and check a dataset.
    Validate {
        data: PathBuf,
        #[arg(long)]
        sidecar: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize the prior distributions implied by a priors file.
    PriorCheck {
        #[arg(long)]
        priors: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "bivariate")]
        model: PriorModel,
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a model and write the result JSON.
    Fit {
        #[arg(value_enum)]
        model: ModelKind,
        data: PathBuf,
        #[command(flatten)]
        opts: FitOpts,
    },
    /// Render a plot as SVG or scene JSON.
    Plot {
        #[command(subcommand)]
        kind: PlotKind,
    },
    /// Report convergence diagnostics of a result.
    Diagnostics {
        result: PathBuf,
        /// Exit with code 3 unless every gate passes.
        #[arg(long)]
        strict: bool,
        /// Use the rank-normalized R-hat instead of the classic split R-hat.
        #[arg(long)]
        rank_normalized: bool,
    },
    /// Export derived records.
    Export {
        #[command(subcommand)]
        kind: ExportKind,
    },
    /// Run the HTTP job service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: std::net::SocketAddr,
        #[arg(long, default_value = "dtameta-store")]
        store: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, default_value_t = crate::service::DEFAULT_MAX_UPLOAD)]
        max_upload: usize,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PriorModel {
    Bivariate,
    Tlcm,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModelKind {
    Bivariate,
    Metareg,
    Subgroup,
    Tlcm,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Effect {
    Fixed,
    Random,
}

impl From<Effect> for EffectKind {
    fn from(e: Effect) -> Self {
        match e {
            Effect::Fixed => EffectKind::Fixed,
            Effect::Random => EffectKind::Random,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Dep {
    Independent,
    Dependent,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Kind {
    Categorical,
    Continuous,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Svg,
    Json,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Svg => OutputFormat::Svg,
            Format::Json => OutputFormat::Json,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Order {
    Input,
    ByYear,
    BySe,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TreeOrder {
    TestFirst,
    DiseaseFirst,
}

#[derive(Debug, Args)]
struct FitOpts {
    #[arg(long)]
    priors: Option<PathBuf>,
    #[arg(long)]
    sidecar: Option<PathBuf>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    target_accept: Option<f64>,
    #[arg(long)]
    max_treedepth: Option<u32>,
    /// Comma-separated study ids left out of the fit.
    #[arg(long, value_delimiter = ',')]
    exclude: Vec<String>,
    #[arg(long)]
    covariate: Option<String>,
    #[arg(long, value_enum)]
    kind: Option<Kind>,
    #[arg(long)]
    center: Option<f64>,
    #[arg(long)]
    report_at: Option<f64>,
    #[arg(long)]
    min_studies: Option<usize>,
    #[arg(long)]
    ref_column: Option<String>,
    #[arg(long, value_enum)]
    index: Option<Effect>,
    #[arg(long, value_enum)]
    refs: Option<Effect>,
    #[arg(long, value_enum)]
    dependence: Option<Dep>,
    /// Independent (uncorrelated) index-test random effects.
    #[arg(long)]
    uncorrelated_index: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit with code 3 unless every diagnostics gate passes.
    #[arg(long)]
    strict: bool,
}

#[derive(Debug, Args)]
struct SceneFlags {
    #[arg(long, value_enum, default_value = "svg")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum PlotKind {
    /// Summary ROC plot of a fitted result.
    Sroc {
        data: PathBuf,
        #[arg(long)]
        result: PathBuf,
        #[arg(long)]
        no_curve: bool,
        #[arg(long)]
        no_prediction: bool,
        #[arg(long)]
        weight_sizing: bool,
        #[arg(long)]
        quadas: bool,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        #[command(flatten)]
        flags: SceneFlags,
    },
    /// Per-study sensitivity and specificity with exact intervals.
    Forest {
        data: PathBuf,
        #[arg(long, value_enum, default_value = "input")]
        order: Order,
        #[arg(long)]
        exclude: Option<String>,
        #[command(flatten)]
        flags: SceneFlags,
    },
    /// Expected counts in a population; accuracy from `--result` or `--se/--sp`.
    Tree {
        data: Option<PathBuf>,
        #[arg(long)]
        result: Option<PathBuf>,
        /// Subgroup or categorical level whose accuracy is used.
        #[arg(long)]
        group: Option<String>,
        #[arg(long, default_value_t = 1000.0)]
        n: f64,
        #[arg(long)]
        prev: Option<f64>,
        #[arg(long)]
        se: Option<f64>,
        #[arg(long)]
        sp: Option<f64>,
        #[arg(long, value_enum, default_value = "test-first")]
        ordering: TreeOrder,
        #[command(flatten)]
        flags: SceneFlags,
    },
    /// Percentage study weights of a bivariate result.
    Weights {
        result: PathBuf,
        #[command(flatten)]
        flags: SceneFlags,
    },
    /// Correlation residuals of a latent class result.
    Residuals {
        result: PathBuf,
        #[command(flatten)]
        flags: SceneFlags,
    },
    /// Trace and histogram data of one parameter (JSON).
    Trace {
        result: PathBuf,
        #[arg(long)]
        param: String,
        #[arg(long, default_value_t = 40)]
        bins: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum ExportKind {
    /// HSROC parameter medians as a CSV record.
    Hsroc {
        result: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn runtime(message: impl std::fmt::Display) -> Self {
        Failure { code: EXIT_ERROR, message: message.to_string() }
    }

    fn data(message: impl std::fmt::Display) -> Self {
        Failure { code: EXIT_INVALID_DATA, message: message.to_string() }
    }
}

type CliResult = Result<i32, Failure>;

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Failure::runtime(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            if !text.ends_with('\n') {
                println!();
            }
            Ok(())
        }
    }
}

fn load_dataset(path: &Path, sidecar: Option<&Path>) -> Result<Dataset, Failure> {
    let side: SidecarConfig = match sidecar {
        Some(p) => serde_json::from_str(&read(p)?).map_err(|e| Failure::runtime(format!("sidecar: {e}")))?,
        None => SidecarConfig::default(),
    };
    parse_dataset_with(&read(path)?, &side).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn load_result(path: &Path) -> Result<AnalysisResult, Failure> {
    serde_json::from_str(&read(path)?).map_err(|e| Failure::runtime(format!("{}: not a result file: {e}", path.display())))
}

fn load_priors(path: Option<&Path>) -> Result<PriorsFile, Failure> {
    match path {
        Some(p) => PriorsFile::from_json(&read(p)?).map_err(Failure::runtime),
        None => Ok(PriorsFile::default()),
    }
}

fn model_spec(kind: ModelKind, o: &FitOpts) -> Result<ModelSpec, Failure> {
    let covariate = || o.covariate.clone().ok_or_else(|| Failure::runtime("--covariate is required for this model"));
    Ok(match kind {
        ModelKind::Bivariate => ModelSpec::Bivariate(BivariateConfig {}),
        ModelKind::Metareg => ModelSpec::Metareg(MetaregConfig {
            covariate: covariate()?,
            kind: o.kind.map(|k| match k {
                Kind::Categorical => CovariateKind::Categorical,
                Kind::Continuous => CovariateKind::Continuous,
            }),
            center: o.center,
            report_at: o.report_at,
        }),
        ModelKind::Subgroup => {
            ModelSpec::Subgroup(SubgroupConfig { covariate: covariate()?, min_studies: o.min_studies.unwrap_or(2) })
        }
        ModelKind::Tlcm => {
            let d = TlcmConfig::default();
            ModelSpec::Tlcm(TlcmConfig {
                index: o.index.map_or(d.index, Into::into),
                refs: o.refs.map_or(d.refs, Into::into),
                dependence: match o.dependence {
                    Some(Dep::Dependent) => Dependence::Dependent,
                    Some(Dep::Independent) | None => Dependence::Independent,
                },
                ref_column: o.ref_column.clone(),
                index_correlated: !o.uncorrelated_index,
            })
        }
    })
}

/// The request a `fit` invocation describes.
fn analysis_config(kind: ModelKind, o: &FitOpts) -> Result<AnalysisConfig, Failure> {
    let mut sampler = SamplerConfig::default();
    if let Some(v) = o.chains {
        sampler.chains = v;
    }
    if let Some(v) = o.warmup {
        sampler.warmup = v;
    }
    if let Some(v) = o.samples {
        sampler.samples = v;
    }
    if let Some(v) = o.target_accept {
        sampler.target_accept = v;
    }
    if let Some(v) = o.max_treedepth {
        sampler.max_treedepth = v;
    }
    match o.seed {
        Some(s) => sampler.seed = s,
        None => eprintln!("warning: no --seed given, using {}", sampler.seed),
    }
    Ok(AnalysisConfig {
        model: model_spec(kind, o)?,
        priors: load_priors(o.priors.as_deref())?,
        sampler,
        exclude: o.exclude.iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
    })
}

fn print_rows(label: &str, rows: &[SummaryRow]) {
    if !label.is_empty() {
        eprintln!("[{label}]");
    }
    for r in rows {
        eprintln!(
            "  {:<24} {:>9.4} [{:>9.4}, {:>9.4}]  rhat {}  ess {}",
            r.name,
            r.median,
            r.lower,
            r.upper,
            r.rhat.map_or("-".into(), |v| format!("{v:.3}")),
            r.ess.map_or("-".into(), |v| format!("{v:.0}"))
        );
    }
}

fn print_summary(result: &AnalysisResult) {
    match result {
        AnalysisResult::Bivariate { report, .. } => print_rows("", &report.summary),
        AnalysisResult::Metareg { report, .. } => {
            print_rows("varying", &report.varying);
            print_rows("shared", &report.shared);
        }
        AnalysisResult::Subgroup { groups, summaries } => {
            for (k, o) in groups {
                match summaries.get(k) {
                    Some(rows) => print_rows(k, rows),
                    None => eprintln!("[{k}] skipped"),
                }
                let _ = o;
            }
        }
        AnalysisResult::Tlcm { report, .. } => print_rows("", &report.summary),
    }
    for (label, fit) in result.fits() {
        for w in &fit.warnings {
            eprintln!("warning{}: {w}", if label.is_empty() { String::new() } else { format!(" [{label}]") });
        }
    }
}

fn gate_lines(label: &str, d: &DiagnosticsSummary) {
    let tag = if label.is_empty() { String::new() } else { format!("[{label}] ") };
    println!(
        "{tag}divergent {}  max-treedepth {}  max rhat {}  min ess {}  {}",
        d.n_divergent,
        d.n_max_treedepth,
        d.max_rhat.map_or("-".into(), |v| format!("{v:.4}")),
        d.min_ess.map_or("-".into(), |v| format!("{v:.0}")),
        if d.pass { "PASS" } else { "FAIL" }
    );
    for f in d.failures() {
        println!("{tag}  {f}");
    }
}

fn diagnostics_for(fit: &FitResult, rank: bool) -> DiagnosticsSummary {
    if !rank {
        return fit.diagnostics.clone();
    }
    let series = fit.params.iter().map(|(k, v)| (k.clone(), v.chains.clone())).collect();
    DiagnosticsSummary::compute(&series, fit.diagnostics.n_divergent, fit.diagnostics.n_max_treedepth, true)
}

fn cmd_fit(kind: ModelKind, data: &Path, o: &FitOpts) -> CliResult {
    let d = load_dataset(data, o.sidecar.as_deref())?;
    let report = validate_dataset(&d);
    if !report.ok {
        for e in &report.errors {
            eprintln!("error: {e:?}");
        }
        return Ok(EXIT_INVALID_DATA);
    }
    let cfg = analysis_config(kind, o)?;
    let result = run_analysis(&d, &cfg, &|_| true).map_err(Failure::runtime)?;
    emit(o.out.as_deref(), &result.to_json())?;
    print_summary(&result);
    if o.strict && !result.passes() {
        for (label, fit) in result.fits() {
            gate_lines(label, &fit.diagnostics);
        }
        return Ok(EXIT_GATE);
    }
    Ok(EXIT_OK)
}

fn cmd_plot(kind: &PlotKind) -> CliResult {
    match kind {
        PlotKind::Sroc { data, result, no_curve, no_prediction, weight_sizing, quadas, level, flags } => {
            let d = load_dataset(data, None)?;
            let r = load_result(result)?;
            let fits = r.fits();
            if let Some((_, f)) = fits.first() {
                if f.config.dataset_hash != d.content_hash() {
                    eprintln!("warning: dataset differs from the one the result was fitted on");
                }
            }
            let opts = SceneOptions {
                show_curve: !no_curve,
                show_prediction: !no_prediction,
                weight_sizing: *weight_sizing,
                quadas_overlay: *quadas,
                level: *level,
            };
            let scene = sroc_scene_groups(&fits, &d, &opts).map_err(Failure::runtime)?;
            let text = render(Renderable::Scene(&scene), flags.format.into()).map_err(Failure::runtime)?;
            emit(flags.out.as_deref(), &text)?;
        }
        PlotKind::Forest { data, order, exclude, flags } => {
            let mut d = load_dataset(data, None)?;
            if let Some(ex) = exclude {
                let ids = ex.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
                d = crate::data::exclude_studies(&d, &ids).map_err(Failure::runtime)?;
            }
            let order = match order {
                Order::Input => ForestOrder::Input,
                Order::ByYear => ForestOrder::ByYear,
                Order::BySe => ForestOrder::BySe,
            };
            let f = forest_data(&d, order).map_err(Failure::data)?;
            emit(flags.out.as_deref(), &render(Renderable::Forest(&f), flags.format.into()).map_err(Failure::runtime)?)?;
        }
        PlotKind::Tree { data, result, group, n, prev, se, sp, ordering, flags } => {
            let (mut s_e, mut s_p) = (*se, *sp);
            if let Some(path) = result {
                let (a, b) = load_result(path)?.pooled_accuracy(group.as_deref()).ok_or_else(|| {
                    Failure::runtime("no pooled accuracy in this result; name a subgroup or categorical level with --group")
                })?;
                s_e = s_e.or(Some(a));
                s_p = s_p.or(Some(b));
            }
            let (Some(s_e), Some(s_p)) = (s_e, s_p) else {
                return Err(Failure::runtime("give --result or both --se and --sp"));
            };
            let prev = match (prev, data) {
                (Some(p), _) => *p,
                (None, Some(path)) => crate::service::observed_prevalence(&load_dataset(path, None)?),
                (None, None) => return Err(Failure::runtime("give --prev or a dataset")),
            };
            let ordering = match ordering {
                TreeOrder::TestFirst => TreeOrdering::TestFirst,
                TreeOrder::DiseaseFirst => TreeOrdering::DiseaseFirst,
            };
            let t = prevalence_tree(*n, prev, s_e, s_p, ordering).map_err(Failure::runtime)?;
            emit(flags.out.as_deref(), &render(Renderable::Tree(&t), flags.format.into()).map_err(Failure::runtime)?)?;
        }
        PlotKind::Weights { result, flags } => {
            let AnalysisResult::Bivariate { report, .. } = load_result(result)? else {
                return Err(Failure::runtime("study weights need a bivariate result"));
            };
            let text = render(Renderable::Weights(&report.weights), flags.format.into()).map_err(Failure::runtime)?;
            emit(flags.out.as_deref(), &text)?;
        }
        PlotKind::Residuals { result, flags } => {
            let AnalysisResult::Tlcm { report, .. } = load_result(result)? else {
                return Err(Failure::runtime("correlation residuals need a latent class result"));
            };
            let res = report.residuals.ok_or_else(|| Failure::runtime("result has no correlation residuals"))?;
            emit(flags.out.as_deref(), &render(Renderable::Residuals(&res), flags.format.into()).map_err(Failure::runtime)?)?;
        }
        PlotKind::Trace { result, param, bins, out } => {
            let r = load_result(result)?;
            let fit = r.fits().first().map(|(_, f)| *f).ok_or_else(|| Failure::runtime("result has no fit"))?;
            let t = trace_density_data(fit, param, *bins).map_err(Failure::runtime)?;
            emit(out.as_deref(), &serde_json::to_string_pretty(&t).map_err(Failure::runtime)?)?;
        }
    }
    Ok(EXIT_OK)
}

fn dispatch(cli: Cli) -> CliResult {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global().map_err(Failure::runtime)?;
    }
    match cli.command {
        Command::Validate { data, sidecar, out } => {
            let d = match load_dataset(&data, sidecar.as_deref()) {
                Ok(d) => d,
                Err(f) => {
                    eprintln!("error: {}", f.message);
                    return Ok(EXIT_INVALID_DATA);
                }
            };
            let report = validate_dataset(&d);
            emit(out.as_deref(), &serde_json::to_string_pretty(&report).map_err(Failure::runtime)?)?;
            Ok(if report.ok { EXIT_OK } else { EXIT_INVALID_DATA })
        }
        Command::PriorCheck { priors, model, draws, seed, out } => {
            let spec = load_priors(priors.as_deref())?.resolve().map_err(Failure::runtime)?;
            let kind = match model {
                PriorModel::Bivariate => PriorModelKind::Bivariate,
                PriorModel::Tlcm => PriorModelKind::Tlcm,
            };
            let seed = seed.unwrap_or_else(|| {
                eprintln!("warning: no --seed given, using 1");
                1
            });
            let s = prior_predictive_summary(&spec, kind, draws, seed).map_err(Failure::runtime)?;
            emit(out.as_deref(), &serde_json::to_string_pretty(&s).map_err(Failure::runtime)?)?;
            Ok(EXIT_OK)
        }
        Command::Fit { model, data, opts } => cmd_fit(model, &data, &opts),
        Command::Plot { kind } => cmd_plot(&kind),
        Command::Diagnostics { result, strict, rank_normalized } => {
            let r = load_result(&result)?;
            let mut pass = true;
            for (label, fit) in r.fits() {
                let d = diagnostics_for(fit, rank_normalized);
                gate_lines(label, &d);
                pass &= d.pass;
            }
            Ok(if strict && !pass { EXIT_GATE } else { EXIT_OK })
        }
        Command::Export { kind: ExportKind::Hsroc { result, out } } => {
            let r = load_result(&result)?;
            let fit = r.fits().first().map(|(_, f)| *f).ok_or_else(|| Failure::runtime("result has no fit"))?;
            let rec = HsrocRecord::from_fit(fit).map_err(Failure::runtime)?;
            emit(out.as_deref(), &rec.to_csv())?;
            Ok(EXIT_OK)
        }
        Command::Serve { addr, store, workers, max_upload } => {
            let mut cfg = crate::service::ServiceConfig::new(store);
            cfg.max_upload = max_upload;
            if let Some(w) = workers {
                cfg.workers = w;
            }
            let rt = tokio::runtime::Runtime::new().map_err(Failure::runtime)?;
            eprintln!("listening on http://{addr}");
            rt.block_on(crate::service::serve(cfg, addr)).map_err(Failure::runtime)?;
            Ok(EXIT_OK)
        }
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
