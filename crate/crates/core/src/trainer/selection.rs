//! Loss bookkeeping, checkpoint selection and convergence reports.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::config::LossWeights;
use crate::error::{Error, Result};

/// `lambda_k lk + lambda_v lv + lambda_c lc`.
pub fn total_loss(weights: &LossWeights, lk: f64, lv: f64, lc: f64) -> f64 {
    weights.lambda_k * lk + weights.lambda_v * lv + weights.lambda_c * lc
}

/// One row of a loss trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub l_key: f64,
    pub l_vgg: f64,
    pub l_csds: f64,
    pub total: f64,
}

impl TraceRow {
    pub const CSV_HEADER: &'static str = "step,l_key,l_vgg,l_csds,total";

    pub fn new(step: u64, weights: &LossWeights, l_key: f64, l_vgg: f64, l_csds: f64) -> Self {
        TraceRow {
            step,
            l_key,
            l_vgg,
            l_csds,
            total: total_loss(weights, l_key, l_vgg, l_csds),
        }
    }

    /// Shortest representation that parses back to the same f64.
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?}",
            self.step, self.l_key, self.l_vgg, self.l_csds, self.total
        )
    }
}

/// Full-sum losses of the parameters at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub row: TraceRow,
    pub elapsed_secs: f64,
    /// Written only when the evaluation improved on every earlier one.
    pub checkpoint: Option<PathBuf>,
}

/// Index of the evaluation with the lowest total; the earliest wins ties.
pub fn select_checkpoint(evaluations: &[Evaluation]) -> Result<usize> {
    let totals: Vec<f64> = evaluations.iter().map(|e| e.row.total).collect();
    argmin_first(&totals).ok_or_else(|| Error::Contract("no evaluation has been logged".into()))
}

pub(crate) fn argmin_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (k, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v < values[b]) {
            best = Some(k);
        }
    }
    best
}

/// State captured when the run clock crossed a requested mark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub mark_minutes: f64,
    pub step: u64,
    pub elapsed_secs: f64,
    pub total: f64,
    pub image: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub mark_minutes: f64,
    /// `None` when the run ended before the mark.
    pub step: Option<u64>,
    pub total: Option<f64>,
    pub snapshot: Option<PathBuf>,
}

/// One row per requested mark, filled from the snapshots a run took.
pub fn log_convergence(snapshots: &[Snapshot], marks_minutes: &[f64]) -> Vec<ConvergenceRow> {
    marks_minutes
        .iter()
        .map(|&m| match snapshots.iter().find(|s| s.mark_minutes == m) {
            Some(s) => ConvergenceRow {
                mark_minutes: m,
                step: Some(s.step),
                total: Some(s.total),
                snapshot: s.image.clone(),
            },
            None => ConvergenceRow {
                mark_minutes: m,
                step: None,
                total: None,
                snapshot: None,
            },
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkAggregate {
    pub mark_minutes: f64,
    /// Runs that reached the mark.
    pub count: usize,
    pub mean: Option<f64>,
    /// Population standard deviation.
    pub std: Option<f64>,
}

/// Mean and spread of the total loss per mark across runs (for example one
/// run per seed or per sequence).
pub fn aggregate_convergence(runs: &[Vec<ConvergenceRow>]) -> Vec<MarkAggregate> {
    let Some(first) = runs.first() else {
        return Vec::new();
    };
    first
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let vals: Vec<f64> = runs.iter().filter_map(|r| r.get(k).and_then(|x| x.total)).collect();
            let n = vals.len();
            let (mean, std) = if n == 0 {
                (None, None)
            } else {
                let mean = vals.iter().sum::<f64>() / n as f64;
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                (Some(mean), Some(var.sqrt()))
            };
            MarkAggregate {
                mark_minutes: row.mark_minutes,
                count: n,
                mean,
                std,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn evals(totals: &[f64]) -> Vec<Evaluation> {
        totals
            .iter()
            .enumerate()
            .map(|(k, &t)| Evaluation {
                row: TraceRow {
                    step: k as u64 * 10,
                    l_key: 0.0,
                    l_vgg: 0.0,
                    l_csds: 0.0,
                    total: t,
                },
                elapsed_secs: 0.0,
                checkpoint: None,
            })
            .collect()
    }

    #[test]
    fn selection_examples() {
        assert_eq!(select_checkpoint(&evals(&[5.0, 3.0, 4.0])).unwrap(), 1);
        assert_eq!(select_checkpoint(&evals(&[3.0, 3.0])).unwrap(), 0);
        assert_eq!(select_checkpoint(&evals(&[4.0, 3.0, 2.0, 1.0])).unwrap(), 3);
        assert!(matches!(select_checkpoint(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::new(1.0, 100.0, 1e-5).unwrap();
        assert!((total_loss(&w, 0.01, 0.002, 50.0) - 0.2105).abs() < 1e-12);
        assert_eq!(total_loss(&w, 0.0, 0.0, 0.0), 0.0);
        let w = LossWeights::new(0.0, 0.0, 1.0).unwrap();
        assert_eq!(total_loss(&w, 3.0, 4.0, 7.0), 7.0);
    }

    #[test]
    fn unreached_marks_are_absent() {
        let snaps = vec![Snapshot {
            mark_minutes: 1.0,
            step: 5,
            elapsed_secs: 60.0,
            total: 0.5,
            image: None,
        }];
        let rows = log_convergence(&snaps, &[1.0, 2.0]);
        assert_eq!(rows[0].total, Some(0.5));
        assert_eq!(rows[1].total, None);
        assert!(log_convergence(&snaps, &[]).is_empty());
    }
}
