//! Ablation, parameter grid, conditioning comparison and the direct
//! structure-loss baseline.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::BackendRegistry;
use crate::config::{GuidanceKind, LossWeights, StructureTerm, TrainConfig};
use crate::dataset::FrameDataset;
use crate::distillation::{edge_iou, Canny, GuidanceFunction};
use crate::error::{Error, Result};
use crate::operator::OperatorParams;
use crate::scalar::Scalar;

use super::selection::TraceRow;
use super::{write_report, Draw, RunOptions, RunSummary, Trainer};

/// Named structure strengths for the third loss weight.
pub const PRESETS: [(&str, f64); 3] = [("style", 1e-6), ("balanced", 5e-6), ("structure", 1e-5)];

pub fn lambda_c_preset(name: &str) -> Result<f64> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, v)| *v)
        .ok_or_else(|| Error::Config(format!("unknown preset `{name}` (style, balanced, structure)")))
}

/// Unlabeled frames, or every frame when all are keyframes.
fn probe_frames<T: Scalar>(data: &FrameDataset<T>) -> Vec<usize> {
    let z = data.unlabeled_indices();
    if z.is_empty() {
        (0..data.len()).collect()
    } else {
        z
    }
}

/// Localization slack of the structure score, in pixels.
pub const STRUCTURE_TOLERANCE: usize = 1;

/// Mean edge-map agreement between stylized frames and their sources.
pub fn structure_score<T: Scalar>(params: &OperatorParams<T>, data: &FrameDataset<T>, frames: &[usize]) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::Contract("structure score needs at least one frame".into()));
    }
    let canny = Canny::default();
    let mut sum = 0.0;
    for &i in frames {
        let x = &data.frames[i];
        let y = params.apply(x)?;
        let (ex, ey) = (
            GuidanceFunction::<T>::condition(&canny, x)?,
            GuidanceFunction::<T>::condition(&canny, &y)?,
        );
        sum += edge_iou(&ey, &ex, STRUCTURE_TOLERANCE);
    }
    Ok(sum / frames.len() as f64)
}

struct Cell<T: Scalar> {
    trainer: Trainer<T>,
    summary: RunSummary,
    probe: Option<PathBuf>,
}

fn train_cell<T: Scalar>(
    cfg: TrainConfig,
    data: &FrameDataset<T>,
    registry: &BackendRegistry<T>,
    dir: Option<PathBuf>,
) -> Result<Cell<T>> {
    let mut trainer = Trainer::new(cfg, data.clone(), registry)?;
    let summary = trainer.run(RunOptions {
        out_dir: dir.clone(),
        ..RunOptions::default()
    })?;
    let probe = match &dir {
        Some(d) => {
            let p = d.join("probe.png");
            let i = probe_frames(data)[0];
            trainer.selected_params()?.apply(&data.frames[i])?.save_png(&p)?;
            Some(p)
        }
        None => None,
    };
    Ok(Cell {
        trainer,
        summary,
        probe,
    })
}

fn subdir(out: Option<&Path>, name: &str) -> Option<PathBuf> {
    out.map(|o| o.join(name))
}

fn draws_digest(draws: &[Draw]) -> String {
    let mut h = Sha256::new();
    for d in draws {
        h.update(d.step.to_le_bytes());
        h.update((d.keyframe as u64).to_le_bytes());
        h.update(d.unlabeled.map_or(u64::MAX, |i| i as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub weights: LossWeights,
    pub selected_step: u64,
    pub selected_total: f64,
    /// Last full-sum evaluation; dropped terms are still evaluated.
    pub last: TraceRow,
    pub structure_score: f64,
    pub probe: Option<PathBuf>,
    pub draws_digest: String,
    #[serde(skip)]
    pub draws: Vec<Draw>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// Four runs with the same budget and seed: each weight zeroed in turn,
/// then all three.
pub fn run_ablation<T: Scalar>(
    data: &FrameDataset<T>,
    cfg: &TrainConfig,
    registry: &BackendRegistry<T>,
    out: Option<&Path>,
) -> Result<AblationReport> {
    let w = cfg.weights;
    let variants = [
        ("drop_lambda_k", LossWeights::new(0.0, w.lambda_v, w.lambda_c)?),
        ("drop_lambda_v", LossWeights::new(w.lambda_k, 0.0, w.lambda_c)?),
        ("drop_lambda_c", LossWeights::new(w.lambda_k, w.lambda_v, 0.0)?),
        ("full", w),
    ];
    let probes = probe_frames(data);
    let mut rows = Vec::with_capacity(4);
    for (name, weights) in variants {
        let mut c = cfg.clone();
        c.weights = weights;
        let cell = train_cell(c, data, registry, subdir(out, name))?;
        let last = cell.summary.evaluations.last().expect("run evaluates").row;
        rows.push(AblationRow {
            name: name.to_string(),
            weights,
            selected_step: cell.summary.selected.row.step,
            selected_total: cell.summary.selected.row.total,
            last,
            structure_score: structure_score(cell.trainer.selected_params()?, data, &probes)?,
            probe: cell.probe,
            draws_digest: draws_digest(&cell.trainer.state.draws),
            draws: cell.trainer.state.draws.clone(),
        });
    }
    let report = AblationReport { rows };
    if let Some(o) = out {
        write_report(o, &report)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum CellStatus {
    Completed {
        selected_step: u64,
        selected_total: f64,
        structure_score: f64,
        probe: Option<PathBuf>,
    },
    Failed {
        reason: String,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridCell {
    pub lambda_c: f64,
    pub t_index: usize,
    #[serde(flatten)]
    pub status: CellStatus,
}

impl GridCell {
    pub fn structure_score(&self) -> Option<f64> {
        match self.status {
            CellStatus::Completed { structure_score, .. } => Some(structure_score),
            CellStatus::Failed { .. } => None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridReport {
    pub cells: Vec<GridCell>,
}

/// One run per (lambda_c, t) pair. A failing cell is recorded and the grid
/// continues.
pub fn run_grid<T: Scalar>(
    data: &FrameDataset<T>,
    cfg: &TrainConfig,
    registry: &BackendRegistry<T>,
    lambda_c_values: &[f64],
    t_values: &[usize],
    out: Option<&Path>,
) -> Result<GridReport> {
    if lambda_c_values.is_empty() || t_values.is_empty() {
        return Err(Error::Config("grid needs at least one lambda_c and one t".into()));
    }
    let probes = probe_frames(data);
    let mut cells = Vec::new();
    for &lambda_c in lambda_c_values {
        for &t_index in t_values {
            let mut c = cfg.clone();
            c.weights.lambda_c = lambda_c;
            c.t_index = t_index;
            let name = format!("lc_{lambda_c:e}_t_{t_index}");
            let status = train_cell(c, data, registry, subdir(out, &name)).and_then(|cell| {
                Ok(CellStatus::Completed {
                    selected_step: cell.summary.selected.row.step,
                    selected_total: cell.summary.selected.row.total,
                    structure_score: structure_score(cell.trainer.selected_params()?, data, &probes)?,
                    probe: cell.probe,
                })
            });
            let status = status.unwrap_or_else(|e| {
                log::warn!("grid cell {name} failed: {e}");
                CellStatus::Failed { reason: e.to_string() }
            });
            cells.push(GridCell {
                lambda_c,
                t_index,
                status,
            });
        }
    }
    let report = GridReport { cells };
    if let Some(o) = out {
        write_report(o, &report)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum KindStatus {
    Completed {
        /// Mean guidance extraction time per frame.
        extract_ms_per_frame: f64,
        selected_step: u64,
        selected_total: f64,
        structure_score: f64,
        probe: Option<PathBuf>,
    },
    Skipped {
        reason: String,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConditioningRow {
    pub kind: String,
    #[serde(flatten)]
    pub status: KindStatus,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConditioningReport {
    pub rows: Vec<ConditioningRow>,
}

/// Wall time of computing every frame's condition, per frame.
fn extraction_ms<T: Scalar>(g: &dyn GuidanceFunction<T>, data: &FrameDataset<T>) -> Result<f64> {
    let start = Instant::now();
    for f in &data.frames {
        g.condition(f)?;
    }
    Ok(start.elapsed().as_secs_f64() * 1e3 / data.len() as f64)
}

/// One run per guidance kind at the configured weights and step. Kinds that
/// are unknown or have no available backend are skipped with a reason.
pub fn run_conditioning_comparison<T: Scalar>(
    data: &FrameDataset<T>,
    cfg: &TrainConfig,
    registry: &BackendRegistry<T>,
    kinds: &[String],
    out: Option<&Path>,
) -> Result<ConditioningReport> {
    let probes = probe_frames(data);
    let mut rows = Vec::new();
    for name in kinds {
        let skip = |reason: String| ConditioningRow {
            kind: name.clone(),
            status: KindStatus::Skipped { reason },
        };
        let kind: GuidanceKind = match name.parse() {
            Ok(k) => k,
            Err(e) => {
                rows.push(skip(e.to_string()));
                continue;
            }
        };
        let g = match registry.guidance(kind) {
            Ok(g) => g,
            Err(e) => {
                rows.push(skip(e.to_string()));
                continue;
            }
        };
        let ms = extraction_ms(g.as_ref(), data)?;
        let mut c = cfg.clone();
        c.guidance_kind = kind;
        let cell = match train_cell(c, data, registry, subdir(out, name)) {
            Ok(cell) => cell,
            Err(e @ (Error::BackendUnavailable { .. } | Error::Config(_))) => {
                rows.push(skip(e.to_string()));
                continue;
            }
            Err(e) => return Err(e),
        };
        rows.push(ConditioningRow {
            kind: name.clone(),
            status: KindStatus::Completed {
                extract_ms_per_frame: ms,
                selected_step: cell.summary.selected.row.step,
                selected_total: cell.summary.selected.row.total,
                structure_score: structure_score(cell.trainer.selected_params()?, data, &probes)?,
                probe: cell.probe,
            },
        });
    }
    let report = ConditioningReport { rows };
    if let Some(o) = out {
        write_report(o, &report)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LineartReport {
    pub kind: GuidanceKind,
    pub selected_step: u64,
    pub selected_total: f64,
    pub structure_score: f64,
    pub probe: Option<PathBuf>,
}

/// Same training with the distillation term replaced by direct matching of
/// guidance maps. Requires a differentiable guidance kind.
pub fn run_lineart_baseline<T: Scalar>(
    data: &FrameDataset<T>,
    cfg: &TrainConfig,
    registry: &BackendRegistry<T>,
    out: Option<&Path>,
) -> Result<LineartReport> {
    let mut c = cfg.clone();
    c.structure_term = StructureTerm::Lineart;
    let cell = train_cell(c, data, registry, out.map(Path::to_path_buf))?;
    let report = LineartReport {
        kind: cfg.guidance_kind,
        selected_step: cell.summary.selected.row.step,
        selected_total: cell.summary.selected.row.total,
        structure_score: structure_score(cell.trainer.selected_params()?, data, &probe_frames(data))?,
        probe: cell.probe,
    };
    if let Some(o) = out {
        write_report(o, &report)?;
    }
    Ok(report)
}
