//! Directory-backed persistence for datasets, jobs and results.
//!
//! ```text
//! <root>/datasets/<hash>.csv
//! <root>/jobs/<id>/job.json
//! <root>/jobs/<id>/result.json
//! ```
//! Every file is written to a temporary name and renamed into place.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::AnalysisConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JobProgress {
    pub stage: usize,
    pub stages: usize,
    /// Most recently reported chain.
    pub chain: usize,
    pub iteration: usize,
    /// Iterations per chain, warmup included.
    pub total: usize,
    /// Overall completion in `[0, 1]`, never decreasing.
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    /// Submission order, used to requeue unfinished jobs after a restart.
    pub seq: u64,
    pub dataset_id: String,
    pub state: JobState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub progress: Option<JobProgress>,
    pub config: AnalysisConfig,
    /// Seconds since the Unix epoch.
    pub created: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub has_result: bool,
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

fn write_atomic(path: &Path, contents: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension(format!("tmp-{}", uuid::Uuid::new_v4().simple()));
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 128 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-')
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Store> {
        let root = root.into();
        fs::create_dir_all(root.join("datasets"))?;
        fs::create_dir_all(root.join("jobs"))?;
        Ok(Store { root })
    }

    fn dataset_path(&self, id: &str) -> Option<PathBuf> {
        valid_id(id).then(|| self.root.join("datasets").join(format!("{id}.csv")))
    }

    fn job_dir(&self, id: &str) -> Option<PathBuf> {
        valid_id(id).then(|| self.root.join("jobs").join(id))
    }

    pub fn put_dataset(&self, id: &str, csv: &str) -> io::Result<()> {
        let path = self.dataset_path(id).ok_or_else(|| io::Error::other("bad dataset id"))?;
        if path.exists() {
            return Ok(());
        }
        write_atomic(&path, csv.as_bytes())
    }

    pub fn dataset(&self, id: &str) -> Option<String> {
        fs::read_to_string(self.dataset_path(id)?).ok()
    }

    pub fn put_job(&self, job: &Job) -> io::Result<()> {
        let dir = self.job_dir(&job.id).ok_or_else(|| io::Error::other("bad job id"))?;
        fs::create_dir_all(&dir)?;
        write_atomic(&dir.join("job.json"), &serde_json::to_vec_pretty(job).map_err(io::Error::other)?)
    }

    pub fn put_result(&self, id: &str, json: &str) -> io::Result<()> {
        let dir = self.job_dir(id).ok_or_else(|| io::Error::other("bad job id"))?;
        write_atomic(&dir.join("result.json"), json.as_bytes())
    }

    pub fn result(&self, id: &str) -> Option<String> {
        fs::read_to_string(self.job_dir(id)?.join("result.json")).ok()
    }

    pub fn remove_job(&self, id: &str) -> io::Result<()> {
        match self.job_dir(id) {
            Some(dir) if dir.exists() => fs::remove_dir_all(dir),
            _ => Ok(()),
        }
    }

    /// Every readable job, in submission order.
    pub fn jobs(&self) -> io::Result<Vec<Job>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(self.root.join("jobs"))? {
            let path = entry?.path().join("job.json");
            if let Ok(text) = fs::read_to_string(&path) {
                if let Ok(job) = serde_json::from_str::<Job>(&text) {
                    out.push(job);
                }
            }
        }
        out.sort_by_key(|j| j.seq);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_cannot_escape_the_root() {
        let dir = tempfile::tempdir().unwrap();
        let s = Store::open(dir.path()).unwrap();
        assert!(s.dataset("../x").is_none());
        assert!(s.put_dataset("a/b", "x").is_err());
        s.put_dataset("abc", "1,2").unwrap();
        assert_eq!(s.dataset("abc").unwrap(), "1,2");
    }
}
