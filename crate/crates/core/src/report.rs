use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::greedy::GreedyStep;
use crate::refine::{ExchangeRecord, Termination};
use crate::selector::SelectionConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub cost_matrix_secs: f64,
    pub greedy_secs: f64,
    pub refine_secs: f64,
    pub total_secs: f64,
}

/// Effective configuration plus free-form input descriptions (file paths,
/// thread count) supplied by the caller.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub selection: SelectionConfig,
    pub inputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub label: i64,
    pub train_size: usize,
    pub val_size: usize,
    /// `|V_k| / |V|`.
    pub proportion: f64,
    pub budget: usize,
    /// `|S_k| / |S|` actually achieved.
    pub realized_proportion: f64,
    pub skipped: bool,
    pub report: Option<SelectionReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    /// Sorted, distinct training indices.
    pub selected_indices: Vec<usize>,
    pub initial_indices: Vec<usize>,
    pub greedy_trajectory: Vec<GreedyStep>,
    /// Proxy score of the initial subset.
    pub initial_score: f64,
    pub final_score: f64,
    /// Transport part of `final_score`.
    pub ot_component: f64,
    /// Gradient bonus subtracted from the transport part.
    pub grad_component: f64,
    /// `(iteration, score)`, starting with the initial subset at iteration 0.
    pub score_trajectory: Vec<(usize, f64)>,
    pub exchange_log: Vec<ExchangeRecord>,
    pub termination: Option<Termination>,
    pub pass_at_1: Option<f64>,
    pub avg_seconds_per_exchange: Option<f64>,
    pub classes: Vec<ClassReport>,
    pub config_echo: ConfigEcho,
    pub timings: Timings,
}

impl SelectionReport {
    pub fn validate(&self, train_size: usize) -> Result<()> {
        let sorted = self.selected_indices.windows(2).all(|w| w[0] < w[1]);
        if !sorted {
            return Err(Error::Invariant("selected indices not sorted and distinct".into()));
        }
        if let Some(&i) = self.selected_indices.iter().find(|&&i| i >= train_size) {
            return Err(Error::IndexOutOfRange {
                index: i,
                size: train_size,
            });
        }
        if self
            .score_trajectory
            .windows(2)
            .any(|w| w[1].1 > w[0].1)
        {
            return Err(Error::Invariant("score trajectory increases".into()));
        }
        Ok(())
    }
}

/// Path of the newline-separated index file written next to a report.
pub fn index_path(report_path: &Path) -> PathBuf {
    report_path.with_extension("idx")
}

pub fn format_indices(indices: &[usize]) -> String {
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    let mut out = String::with_capacity(sorted.len() * 6);
    for i in sorted {
        out.push_str(&i.to_string());
        out.push('\n');
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Writes the report as JSON at `path` and the sorted index list at
/// [`index_path`]`(path)`.
pub fn save_report(report: &SelectionReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Invariant(format!("report serialization failed: {e}")))?;
    write_file(path, json.as_bytes())?;
    write_file(&index_path(path), format_indices(&report.selected_indices).as_bytes())
}

pub fn load_report(path: &Path) -> Result<SelectionReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    pub(crate) fn minimal(indices: Vec<usize>) -> SelectionReport {
        SelectionReport {
            selected_indices: indices.clone(),
            initial_indices: indices,
            greedy_trajectory: vec![],
            initial_score: 1.0,
            final_score: 1.0,
            ot_component: 1.0,
            grad_component: 0.0,
            score_trajectory: vec![(0, 1.0)],
            exchange_log: vec![],
            termination: None,
            pass_at_1: None,
            avg_seconds_per_exchange: None,
            classes: vec![],
            config_echo: ConfigEcho {
                selection: SelectionConfig::new(3),
                inputs: BTreeMap::new(),
            },
            timings: Timings::default(),
        }
    }

    #[test]
    fn index_file_sorted() {
        assert_eq!(format_indices(&[3, 1, 7]), "1\n3\n7\n");
    }

    #[test]
    fn empty_exchange_log_is_explicit() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("r.json");
        let mut report = minimal(vec![1, 3, 7]);
        save_report(&report, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"exchange_log\": []"), "{text}");
        assert_eq!(fs::read_to_string(dir.path().join("r.idx")).unwrap(), "1\n3\n7\n");
        let back = load_report(&path).unwrap();
        assert_eq!(back.selected_indices, vec![1, 3, 7]);
        report.timings.total_secs = back.timings.total_secs;
        assert_eq!(back, report);
    }

    #[test]
    fn validate_rejects_bad_reports() {
        assert!(minimal(vec![1, 3, 7]).validate(8).is_ok());
        assert!(minimal(vec![3, 1]).validate(8).is_err());
        assert!(minimal(vec![1, 9]).validate(8).is_err());
        let mut r = minimal(vec![1]);
        r.score_trajectory = vec![(0, 1.0), (1, 2.0)];
        assert!(r.validate(8).is_err());
    }

    #[test]
    fn unwritable_path() {
        let r = minimal(vec![0]);
        assert!(save_report(&r, Path::new("/nonexistent-dir/x/r.json")).is_err());
    }
}
