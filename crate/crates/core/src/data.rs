//! Study-level datasets: CSV ingestion, validation, per-study accuracy and
//! study exclusion.
//!
//! Columns are matched by position. The first six are always
//! `id/author, year, tp, fp, fn, tn`. An optional block of seven QUADAS-2
//! ratings follows (four risk-of-bias domains, then three applicability
//! domains); every remaining column is a covariate. Under the bivariate model
//! the counts are reference-classified; under the latent class model the same
//! four counts are read as the index x reference cross-classification
//! (`tp` both positive, `fp` index+/ref-, `fn` index-/ref+, `tn` both negative).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::function::beta::beta_reg;
use thiserror::Error;

/// Number of leading count/metadata columns.
pub const BASE_COLUMNS: usize = 6;
/// Number of QUADAS-2 rating columns.
pub const QUADAS_COLUMNS: usize = 7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("malformed CSV at row {row}: {message}")]
    MalformedCsv { row: usize, message: String },
    #[error("bad count {value:?} at row {row}, column {column}")]
    BadCount { row: usize, column: usize, value: String },
    #[error("bad QUADAS rating {value:?} at row {row}, column {column}")]
    BadRating { row: usize, column: usize, value: String },
    #[error("duplicate study id {id:?} at row {row}")]
    DuplicateStudyId { row: usize, id: String },
    #[error("bad covariate value {value:?} at row {row}, column {column}: {message}")]
    BadCovariate { row: usize, column: usize, value: String, message: String },
    #[error("unknown covariate {0:?}")]
    UnknownCovariate(String),
    #[error("study {0:?} has an empty diseased or non-diseased arm")]
    EmptyArm(String),
    #[error("unknown study id {0:?}")]
    UnknownStudyId(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rating {
    Low,
    High,
    Unclear,
}

impl Rating {
    /// Case-insensitive text form, or the numeric codes 1/2/3 when `numeric` is allowed.
    pub fn parse(raw: &str, numeric: bool) -> Option<Rating> {
        match raw.trim().to_ascii_lowercase().as_str() {
            "low" => Some(Rating::Low),
            "high" => Some(Rating::High),
            "unclear" => Some(Rating::Unclear),
            "1" if numeric => Some(Rating::Low),
            "2" if numeric => Some(Rating::High),
            "3" if numeric => Some(Rating::Unclear),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Rating::Low => "low",
            Rating::High => "high",
            Rating::Unclear => "unclear",
        }
    }
}

/// QUADAS-2 assessment: risk of bias over patient selection, index test,
/// reference standard and flow & timing; applicability concerns over the
/// first three domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadasAssessment {
    pub risk_of_bias: [Rating; 4],
    pub applicability: [Rating; 3],
}

impl QuadasAssessment {
    pub fn ratings(&self) -> [Rating; 7] {
        let r = &self.risk_of_bias;
        let a = &self.applicability;
        [r[0], r[1], r[2], r[3], a[0], a[1], a[2]]
    }

    /// Worst rating across the risk-of-bias domains (High > Unclear > Low).
    pub fn overall_risk_of_bias(&self) -> Rating {
        worst(&self.risk_of_bias)
    }

    pub fn overall_applicability(&self) -> Rating {
        worst(&self.applicability)
    }
}

fn worst(ratings: &[Rating]) -> Rating {
    if ratings.contains(&Rating::High) {
        Rating::High
    } else if ratings.contains(&Rating::Unclear) {
        Rating::Unclear
    } else {
        Rating::Low
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateKind {
    Categorical,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovariateValue {
    Number(f64),
    Text(String),
}

impl CovariateValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            CovariateValue::Number(v) => Some(*v),
            CovariateValue::Text(t) => t.trim().parse::<f64>().ok().filter(|v| v.is_finite()),
        }
    }

    /// Level label used when the covariate is treated as categorical.
    pub fn label(&self) -> String {
        match self {
            CovariateValue::Number(v) => format!("{v}"),
            CovariateValue::Text(t) => t.clone(),
        }
    }
}

impl fmt::Display for CovariateValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub study_id: String,
    pub author: String,
    pub year: i32,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadas: Option<QuadasAssessment>,
    #[serde(default)]
    pub covariates: BTreeMap<String, CovariateValue>,
}

impl StudyRecord {
    /// Minimal record without QUADAS data or covariates.
    pub fn new(study_id: impl Into<String>, year: i32, tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        let id = study_id.into();
        StudyRecord {
            author: id.clone(),
            study_id: id,
            year,
            tp,
            fp,
            fn_,
            tn,
            quadas: None,
            covariates: BTreeMap::new(),
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Reference-positive count (`tp + fn`).
    pub fn diseased(&self) -> u64 {
        self.tp + self.fn_
    }

    /// Reference-negative count (`tn + fp`).
    pub fn non_diseased(&self) -> u64 {
        self.tn + self.fp
    }

    pub fn has_zero_cell(&self) -> bool {
        self.tp == 0 || self.fp == 0 || self.fn_ == 0 || self.tn == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    pub kind: CovariateKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    studies: Vec<StudyRecord>,
    covariate_schema: Vec<CovariateSpec>,
    has_quadas: bool,
    headers: Vec<String>,
}

impl Dataset {
    /// Builds a dataset without validation; see [`validate_dataset`].
    pub fn new(studies: Vec<StudyRecord>, covariate_schema: Vec<CovariateSpec>, has_quadas: bool) -> Self {
        let headers = default_headers(&covariate_schema, has_quadas);
        Dataset { studies, covariate_schema, has_quadas, headers }
    }

    pub fn studies(&self) -> &[StudyRecord] {
        &self.studies
    }

    pub fn len(&self) -> usize {
        self.studies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.studies.is_empty()
    }

    pub fn covariate_schema(&self) -> &[CovariateSpec] {
        &self.covariate_schema
    }

    pub fn has_quadas(&self) -> bool {
        self.has_quadas
    }

    pub fn headers(&self) -> &[String] {
        &self.headers
    }

    pub fn study(&self, id: &str) -> Option<&StudyRecord> {
        self.studies.iter().find(|s| s.study_id == id)
    }

    pub fn covariate(&self, name: &str) -> Option<&CovariateSpec> {
        self.covariate_schema.iter().find(|c| c.name == name)
    }

    /// Returns a copy with `name` re-declared as `kind`.
    pub fn with_covariate_kind(&self, name: &str, kind: CovariateKind) -> Result<Dataset, DataError> {
        let idx = self
            .covariate_schema
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| DataError::UnknownCovariate(name.to_string()))?;
        let mut out = self.clone();
        if kind == CovariateKind::Continuous {
            for (row, s) in out.studies.iter_mut().enumerate() {
                let v = s.covariates.get(name).cloned().unwrap_or(CovariateValue::Text(String::new()));
                let num = v.as_f64().ok_or_else(|| DataError::BadCovariate {
                    row: row + 1,
                    column: BASE_COLUMNS + if self.has_quadas { QUADAS_COLUMNS } else { 0 } + idx + 1,
                    value: v.label(),
                    message: "not a finite number".into(),
                })?;
                s.covariates.insert(name.to_string(), CovariateValue::Number(num));
            }
        }
        out.covariate_schema[idx].kind = kind;
        Ok(out)
    }

    /// Distinct levels of a categorical covariate, numerically ordered when
    /// every level is numeric and lexically otherwise.
    pub fn levels(&self, name: &str) -> Vec<String> {
        let labels: BTreeSet<String> = self
            .studies
            .iter()
            .filter_map(|s| s.covariates.get(name).map(CovariateValue::label))
            .collect();
        let mut levels: Vec<String> = labels.into_iter().collect();
        if levels.iter().all(|l| l.parse::<f64>().is_ok()) {
            levels.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
        }
        levels
    }

    /// SHA-256 over the canonical CSV form plus the covariate schema.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(to_csv(self).as_bytes());
        for c in &self.covariate_schema {
            hasher.update(format!("\n{}:{:?}", c.name, c.kind).as_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

fn default_headers(schema: &[CovariateSpec], has_quadas: bool) -> Vec<String> {
    let mut h: Vec<String> = ["author", "year", "tp", "fp", "fn", "tn"].iter().map(|s| s.to_string()).collect();
    if has_quadas {
        for name in ["rob_ps", "rob_it", "rob_rs", "rob_ft", "ac_ps", "ac_it", "ac_rs"] {
            h.push(name.to_string());
        }
    }
    h.extend(schema.iter().map(|c| c.name.clone()));
    h
}

/// Optional JSON sidecar accompanying a CSV upload.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SidecarConfig {
    /// Covariate kind overrides by column header.
    #[serde(default)]
    pub covariates: BTreeMap<String, CovariateKind>,
    /// Covariate naming each study's reference test (latent class model).
    #[serde(default)]
    pub reference_column: Option<String>,
    /// Forces (or forbids) reading columns 7-13 as QUADAS-2 ratings. When set,
    /// numeric rating codes 1/2/3 are accepted.
    #[serde(default)]
    pub quadas: Option<bool>,
}

pub fn parse_dataset(csv_text: &str) -> Result<Dataset, DataError> {
    parse_dataset_with(csv_text, &SidecarConfig::default())
}

pub fn parse_dataset_with(csv_text: &str, sidecar: &SidecarConfig) -> Result<Dataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(csv_text.as_bytes());
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| DataError::MalformedCsv { row: 0, message: e.to_string() })?
        .iter()
        .map(str::to_string)
        .collect();
    let ncol = headers.len();
    if ncol < BASE_COLUMNS {
        return Err(DataError::MalformedCsv {
            row: 0,
            message: format!("expected at least {BASE_COLUMNS} columns, found {ncol}"),
        });
    }

    let mut rows: Vec<Vec<String>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| DataError::MalformedCsv { row: i + 1, message: e.to_string() })?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        rows.push(rec.iter().map(str::to_string).collect());
    }

    let has_quadas = match sidecar.quadas {
        Some(flag) => {
            if flag && ncol < BASE_COLUMNS + QUADAS_COLUMNS {
                return Err(DataError::MalformedCsv {
                    row: 0,
                    message: "QUADAS-2 block declared but fewer than 13 columns".into(),
                });
            }
            flag
        }
        None => {
            ncol >= BASE_COLUMNS + QUADAS_COLUMNS
                && rows.first().is_some_and(|r| {
                    r[BASE_COLUMNS..BASE_COLUMNS + QUADAS_COLUMNS]
                        .iter()
                        .all(|v| Rating::parse(v, false).is_some())
                })
        }
    };
    let numeric_ratings = sidecar.quadas == Some(true);
    let cov_start = BASE_COLUMNS + if has_quadas { QUADAS_COLUMNS } else { 0 };
    let cov_names: Vec<String> = headers[cov_start..].to_vec();
    for name in sidecar.covariates.keys() {
        if !cov_names.contains(name) {
            return Err(DataError::UnknownCovariate(name.clone()));
        }
    }

    let mut seen = BTreeSet::new();
    let mut studies = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        let row = i + 1;
        let id = r[0].clone();
        if id.is_empty() {
            return Err(DataError::MalformedCsv { row, message: "empty study id".into() });
        }
        if !seen.insert(id.clone()) {
            return Err(DataError::DuplicateStudyId { row, id });
        }
        let year = r[1].parse::<i32>().map_err(|_| DataError::MalformedCsv {
            row,
            message: format!("year {:?} in column 2 is not an integer", r[1]),
        })?;
        let count = |col: usize| -> Result<u64, DataError> {
            r[col].parse::<u64>().map_err(|_| DataError::BadCount { row, column: col + 1, value: r[col].clone() })
        };
        let (tp, fp, fn_, tn) = (count(2)?, count(3)?, count(4)?, count(5)?);
        let quadas = if has_quadas {
            let mut ratings = [Rating::Low; QUADAS_COLUMNS];
            for (k, slot) in ratings.iter_mut().enumerate() {
                let col = BASE_COLUMNS + k;
                *slot = Rating::parse(&r[col], numeric_ratings).ok_or_else(|| DataError::BadRating {
                    row,
                    column: col + 1,
                    value: r[col].clone(),
                })?;
            }
            Some(QuadasAssessment {
                risk_of_bias: [ratings[0], ratings[1], ratings[2], ratings[3]],
                applicability: [ratings[4], ratings[5], ratings[6]],
            })
        } else {
            None
        };
        let mut covariates = BTreeMap::new();
        for (k, name) in cov_names.iter().enumerate() {
            let col = cov_start + k;
            let raw = &r[col];
            if raw.is_empty() {
                return Err(DataError::BadCovariate {
                    row,
                    column: col + 1,
                    value: raw.clone(),
                    message: "missing value".into(),
                });
            }
            covariates.insert(name.clone(), CovariateValue::Text(raw.clone()));
        }
        studies.push(StudyRecord { study_id: id.clone(), author: id, year, tp, fp, fn_, tn, quadas, covariates });
    }

    // Kind inference: all-numeric -> continuous, unless overridden.
    let mut schema = Vec::with_capacity(cov_names.len());
    for (k, name) in cov_names.iter().enumerate() {
        let numeric = studies.iter().all(|s| s.covariates[name].as_f64().is_some());
        let kind = match sidecar.covariates.get(name) {
            Some(kind) => *kind,
            None if numeric => CovariateKind::Continuous,
            None => CovariateKind::Categorical,
        };
        for (i, s) in studies.iter_mut().enumerate() {
            let v = s.covariates.get_mut(name).expect("covariate present");
            let num = v.as_f64();
            match (kind, num) {
                (_, Some(x)) if numeric => *v = CovariateValue::Number(x),
                (CovariateKind::Continuous, None) => {
                    return Err(DataError::BadCovariate {
                        row: i + 1,
                        column: cov_start + k + 1,
                        value: v.label(),
                        message: "continuous covariate is not a finite number".into(),
                    })
                }
                _ => {}
            }
        }
        schema.push(CovariateSpec { name: name.clone(), kind });
    }

    Ok(Dataset { studies, covariate_schema: schema, has_quadas, headers })
}

/// Canonical CSV serialization; `parse_dataset(to_csv(d))` reproduces `d`.
pub fn to_csv(d: &Dataset) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(&d.headers).expect("in-memory write");
    for s in &d.studies {
        let mut rec = vec![
            s.study_id.clone(),
            s.year.to_string(),
            s.tp.to_string(),
            s.fp.to_string(),
            s.fn_.to_string(),
            s.tn.to_string(),
        ];
        if d.has_quadas {
            let q = s.quadas.expect("quadas present when has_quadas");
            rec.extend(q.ratings().iter().map(|r| r.as_str().to_string()));
        }
        for c in &d.covariate_schema {
            rec.push(s.covariates.get(&c.name).map(CovariateValue::label).unwrap_or_default());
        }
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Issue {
    /// 1-based data row; 0 for dataset-level issues.
    pub row: usize,
    pub column: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub errors: Vec<Issue>,
    pub warnings: Vec<Issue>,
}

pub fn validate_dataset(d: &Dataset) -> ValidationReport {
    let mut errors = Vec::new();
    let mut warnings = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, s) in d.studies.iter().enumerate() {
        let row = i + 1;
        if !seen.insert(s.study_id.as_str()) {
            errors.push(Issue { row, column: Some(1), message: format!("DuplicateStudyId: {}", s.study_id) });
        }
        if s.total() == 0 {
            errors.push(Issue { row, column: None, message: "all four counts are zero".into() });
        }
        if d.has_quadas && s.quadas.is_none() {
            errors.push(Issue { row, column: None, message: "missing QUADAS-2 ratings".into() });
        }
        if s.has_zero_cell() {
            warnings.push(Issue { row, column: None, message: format!("zero cell in study {}", s.study_id) });
        }
        if s.diseased() == 0 || s.non_diseased() == 0 {
            warnings.push(Issue {
                row,
                column: None,
                message: format!("study {} has an empty arm; sensitivity or specificity undefined", s.study_id),
            });
        }
        for c in &d.covariate_schema {
            match s.covariates.get(&c.name) {
                None => errors.push(Issue { row, column: None, message: format!("missing covariate {}", c.name) }),
                Some(v) if c.kind == CovariateKind::Continuous && v.as_f64().is_none() => errors.push(Issue {
                    row,
                    column: None,
                    message: format!("covariate {} value {v} is not a finite number", c.name),
                }),
                _ => {}
            }
        }
    }
    for c in &d.covariate_schema {
        if c.kind != CovariateKind::Categorical {
            continue;
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for s in &d.studies {
            if let Some(v) = s.covariates.get(&c.name) {
                *counts.entry(v.label()).or_default() += 1;
            }
        }
        if counts.is_empty() {
            errors.push(Issue { row: 0, column: None, message: format!("covariate {} has no observed level", c.name) });
        }
        for (level, n) in counts {
            if n == 1 {
                warnings.push(Issue {
                    row: 0,
                    column: None,
                    message: format!("single-study level: {}={level}", c.name),
                });
            }
        }
    }
    ValidationReport { ok: errors.is_empty(), errors, warnings }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyAccuracy {
    pub study_id: String,
    pub se_hat: f64,
    pub sp_hat: f64,
    pub se_ci: (f64, f64),
    pub sp_ci: (f64, f64),
}

pub fn study_accuracy(s: &StudyRecord) -> Result<StudyAccuracy, DataError> {
    if s.diseased() == 0 || s.non_diseased() == 0 {
        return Err(DataError::EmptyArm(s.study_id.clone()));
    }
    Ok(StudyAccuracy {
        study_id: s.study_id.clone(),
        se_hat: s.tp as f64 / s.diseased() as f64,
        sp_hat: s.tn as f64 / s.non_diseased() as f64,
        se_ci: clopper_pearson(s.tp, s.diseased(), 0.95),
        sp_ci: clopper_pearson(s.tn, s.non_diseased(), 0.95),
    })
}

/// Exact (Clopper-Pearson) interval for `x` successes out of `n`.
pub fn clopper_pearson(x: u64, n: u64, level: f64) -> (f64, f64) {
    assert!(n >= 1 && x <= n);
    let alpha = 1.0 - level;
    let (xf, nf) = (x as f64, n as f64);
    let lower = if x == 0 { 0.0 } else { beta_quantile(xf, nf - xf + 1.0, alpha / 2.0) };
    let upper = if x == n { 1.0 } else { beta_quantile(xf + 1.0, nf - xf, 1.0 - alpha / 2.0) };
    (lower, upper)
}

/// Beta(a, b) quantile by bisection on the regularized incomplete beta.
pub fn beta_quantile(a: f64, b: f64, p: f64) -> f64 {
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if beta_reg(a, b, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    0.5 * (lo + hi)
}

pub fn exclude_studies(d: &Dataset, ids: &BTreeSet<String>) -> Result<Dataset, DataError> {
    for id in ids {
        if d.study(id).is_none() {
            return Err(DataError::UnknownStudyId(id.clone()));
        }
    }
    let mut out = d.clone();
    out.studies.retain(|s| !ids.contains(&s.study_id));
    Ok(out)
}
