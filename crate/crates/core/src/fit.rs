//! Posterior draws on the constrained scale with sampler statistics,
//! diagnostics and enough configuration to reproduce the run.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diagnostics::DiagnosticsSummary;
use crate::models::ModelSpec;
use crate::priors::PriorSpec;
use crate::sampler::{RawDraws, SamplerConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDraws {
    /// `chains x samples`.
    pub chains: Vec<Vec<f64>>,
}

impl ParamDraws {
    pub fn pooled(&self) -> Vec<f64> {
        self.chains.concat()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    pub step_size: f64,
    pub inv_mass: Vec<f64>,
    pub divergent: Vec<bool>,
    pub treedepth: Vec<u32>,
    pub n_leapfrog: Vec<u32>,
    pub energy: Vec<f64>,
    pub accept_stat: Vec<f64>,
}

impl ChainStats {
    pub fn from_raw(raw: &RawDraws) -> Vec<ChainStats> {
        raw.chains
            .iter()
            .map(|c| ChainStats {
                step_size: c.step_size,
                inv_mass: c.inv_mass.clone(),
                divergent: c.stats.iter().map(|s| s.divergent).collect(),
                treedepth: c.stats.iter().map(|s| s.treedepth).collect(),
                n_leapfrog: c.stats.iter().map(|s| s.n_leapfrog).collect(),
                energy: c.stats.iter().map(|s| s.energy).collect(),
                accept_stat: c.stats.iter().map(|s| s.accept_stat).collect(),
            })
            .collect()
    }
}

/// Everything needed to re-run an analysis bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub version: String,
    /// Content hash of the dataset before exclusions.
    pub dataset_hash: String,
    pub model: ModelSpec,
    pub priors: PriorSpec,
    pub sampler: SamplerConfig,
    pub exclusions: Vec<String>,
}

/// Study and covariate bookkeeping needed to interpret parameter names.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitInfo {
    pub study_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariate: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub levels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_at: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ref_types: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: BTreeMap<String, ParamDraws>,
    pub sampler: Vec<ChainStats>,
    pub diagnostics: DiagnosticsSummary,
    pub config: ConfigEcho,
    pub info: FitInfo,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl FitResult {
    /// Maps every unconstrained draw through `derive` (which writes one value
    /// per entry of `names`) and attaches diagnostics.
    pub fn assemble(
        raw: &RawDraws,
        names: &[String],
        derive: impl Fn(&[f64], &mut Vec<f64>),
        config: ConfigEcho,
        info: FitInfo,
    ) -> FitResult {
        let mut series: BTreeMap<String, Vec<Vec<f64>>> = names.iter().map(|n| (n.clone(), Vec::new())).collect();
        let mut buf = Vec::with_capacity(names.len());
        for chain in &raw.chains {
            let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(chain.draws.len()); names.len()];
            for d in &chain.draws {
                buf.clear();
                derive(d, &mut buf);
                debug_assert_eq!(buf.len(), names.len());
                for (col, v) in cols.iter_mut().zip(&buf) {
                    col.push(*v);
                }
            }
            for (name, col) in names.iter().zip(cols) {
                series.get_mut(name).expect("name present").push(col);
            }
        }
        let diagnostics = DiagnosticsSummary::compute(&series, raw.n_divergent(), raw.n_max_treedepth(), false);
        let params = series.into_iter().map(|(k, chains)| (k, ParamDraws { chains })).collect();
        FitResult { params, sampler: ChainStats::from_raw(raw), diagnostics, config, info, warnings: Vec::new() }
    }

    pub fn draws(&self, name: &str) -> Option<Vec<f64>> {
        self.params.get(name).map(ParamDraws::pooled)
    }

    pub fn median(&self, name: &str) -> Option<f64> {
        self.draws(name).map(|d| crate::math::quantile(&d, 0.5))
    }

    pub fn n_draws(&self) -> usize {
        self.params.values().next().map_or(0, |p| p.chains.iter().map(Vec::len).sum())
    }
}
