//! Stochastic optimization of the operator, evaluation and checkpointing.

mod experiments;
mod optimizer;
mod rundir;
mod selection;

pub use experiments::{
    lambda_c_preset, run_ablation, run_conditioning_comparison, run_grid, run_lineart_baseline,
    structure_score, AblationReport, AblationRow, CellStatus, ConditioningReport, ConditioningRow, GridCell,
    GridReport, KindStatus, LineartReport, PRESETS,
};
pub use optimizer::AdamW;
pub use rundir::{write_report, RunDir};
pub use selection::{
    aggregate_convergence, log_convergence, select_checkpoint, total_loss, ConvergenceRow, Evaluation,
    MarkAggregate, Snapshot, TraceRow,
};

use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backends::BackendRegistry;
use crate::checkpoint;
use crate::config::{StructureTerm, TrainConfig};
use crate::dataset::{FrameDataset, Severity};
use crate::distillation::{loss_csds, loss_lineart, ConditionCache, GuidanceFunction, GuidedDenoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::operator::{OperatorArch, OperatorParams};
use crate::perceptual::{loss_key_with_grad, loss_vgg_value, loss_vgg_with_grad, FeatureExtractor, StyleTarget};
use crate::rng::{gaussian, stream_rng, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Seed of every frozen toy network, independent of the run seed.
pub const FROZEN_SEED: u64 = 0;

/// The frozen networks a run depends on.
pub struct Frozen<T: Scalar> {
    pub extractor: Box<dyn FeatureExtractor<T>>,
    pub denoiser: Box<dyn GuidedDenoiser<T>>,
    pub guidance: Box<dyn GuidanceFunction<T>>,
    pub schedule: NoiseSchedule,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendFingerprints {
    pub extractor: String,
    pub denoiser: String,
    pub guidance: String,
}

impl<T: Scalar> Frozen<T> {
    pub fn resolve(cfg: &TrainConfig, registry: &BackendRegistry<T>) -> Result<Self> {
        let extractor = registry.extractor(&cfg.extractor, FROZEN_SEED)?;
        let denoiser = registry.denoiser(&cfg.denoiser)?;
        let guidance = registry.guidance(cfg.guidance_kind)?;
        if !denoiser.accepts(cfg.guidance_kind) {
            return Err(Error::Config(format!(
                "denoiser `{}` was not trained on {} conditions",
                denoiser.name(),
                cfg.guidance_kind
            )));
        }
        Ok(Frozen {
            extractor,
            denoiser,
            guidance,
            schedule: NoiseSchedule::default(),
        })
    }

    pub fn fingerprints(&self) -> BackendFingerprints {
        BackendFingerprints {
            extractor: self.extractor.fingerprint(),
            denoiser: self.denoiser.fingerprint(),
            guidance: self.guidance.fingerprint(),
        }
    }
}

/// Frames drawn for one step: keyframe `j` and, when there is one,
/// unlabeled frame `i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Draw {
    pub step: u64,
    pub keyframe: usize,
    pub unlabeled: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Best<T> {
    pub evaluation: usize,
    pub total: f64,
    pub params: OperatorParams<T>,
}

#[derive(Clone, Debug)]
pub struct TrainState<T> {
    /// Optimizer updates applied so far.
    pub step: u64,
    pub params: OperatorParams<T>,
    pub optimizer: AdamW<T>,
    /// Sampled losses, one row per update.
    pub trace: Vec<TraceRow>,
    pub evaluations: Vec<Evaluation>,
    pub best: Option<Best<T>>,
    pub draws: Vec<Draw>,
    pub snapshots: Vec<Snapshot>,
}

/// Time source for budgets and convergence marks.
pub trait Clock {
    fn elapsed(&mut self, step: u64) -> Duration;
}

pub struct WallClock(Instant);

impl WallClock {
    pub fn start() -> Self {
        WallClock(Instant::now())
    }
}

impl Clock for WallClock {
    fn elapsed(&mut self, _step: u64) -> Duration {
        self.0.elapsed()
    }
}

/// Deterministic clock advancing a fixed amount per step.
pub struct StepClock(pub Duration);

impl Clock for StepClock {
    fn elapsed(&mut self, step: u64) -> Duration {
        self.0 * step as u32
    }
}

pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub marks_minutes: Vec<f64>,
    /// Frame stylized for snapshots; defaults to the first unlabeled frame.
    pub probe: Option<usize>,
    pub clock: Box<dyn Clock>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            out_dir: None,
            marks_minutes: Vec::new(),
            probe: None,
            clock: Box::new(WallClock::start()),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: u64,
    pub selected: Evaluation,
    pub evaluations: Vec<Evaluation>,
    pub convergence: Vec<ConvergenceRow>,
    pub out_dir: Option<PathBuf>,
    pub fingerprints: BackendFingerprints,
}

pub struct Trainer<T: Scalar> {
    pub config: TrainConfig,
    pub data: FrameDataset<T>,
    pub frozen: Frozen<T>,
    pub state: TrainState<T>,
    style: Vec<StyleTarget<T>>,
    conditions: ConditionCache<T>,
    warned_empty: bool,
}

struct StepTerms<T> {
    l_key: T,
    l_vgg: T,
    l_csds: T,
    grads: Option<Vec<Tensor<T>>>,
}

fn to_f64<T: Scalar>(v: T) -> f64 {
    v.as_f64()
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, data: FrameDataset<T>, registry: &BackendRegistry<T>) -> Result<Self> {
        let frozen = Frozen::resolve(&config, registry)?;
        Self::with_frozen(config, data, frozen)
    }

    pub fn with_frozen(config: TrainConfig, data: FrameDataset<T>, frozen: Frozen<T>) -> Result<Self> {
        config.validate()?;
        let errors: Vec<String> = data
            .validate()
            .into_iter()
            .filter(|v| v.severity == Severity::Error)
            .map(|v| v.to_string())
            .collect();
        if !errors.is_empty() {
            return Err(Error::Contract(format!("invalid dataset: {}", errors.join("; "))));
        }
        frozen.schedule.alpha_bar(config.t_index)?;
        if config.structure_term == StructureTerm::Lineart {
            let mut tape = crate::autodiff::Tape::new();
            let probe = tape.leaf(data.frames[0].tensor().clone());
            if frozen.guidance.record(&mut tape, probe).is_none() {
                return Err(Error::Config(format!(
                    "guidance `{}` is not differentiable; the direct structure loss needs a differentiable kind",
                    frozen.guidance.kind()
                )));
            }
        }
        let style = if config.feature_layers.is_empty() {
            Vec::new()
        } else {
            data.stylized_keyframes
                .iter()
                .map(|k| StyleTarget::new(frozen.extractor.as_ref(), k, &config.feature_layers))
                .collect::<Result<Vec<_>>>()?
        };
        let arch = OperatorArch {
            pass_through: config.pass_through,
            ..OperatorArch::with_width(config.width_multiplier)
        };
        let params = OperatorParams::init(arch, config.seed);
        let optimizer = AdamW::new(&params.tensors);
        let conditions = ConditionCache::new(frozen.guidance.as_ref());
        Ok(Trainer {
            config,
            data,
            frozen,
            state: TrainState {
                step: 0,
                params,
                optimizer,
                trace: Vec::new(),
                evaluations: Vec::new(),
                best: None,
                draws: Vec::new(),
                snapshots: Vec::new(),
            },
            style,
            conditions,
            warned_empty: false,
        })
    }

    /// Frames used at `step`; depends only on the seed, the step and the
    /// dataset split, never on the loss weights.
    pub fn draw(&self, step: u64) -> Draw {
        let mut rng = stream_rng(self.config.seed, Stream::Sampling, step, 0);
        let keys = &self.data.keyframe_indices;
        let keyframe = keys[rng.random_range(0..keys.len())];
        let z = self.data.unlabeled_indices();
        let unlabeled = (!z.is_empty()).then(|| z[rng.random_range(0..z.len())]);
        Draw {
            step,
            keyframe,
            unlabeled,
        }
    }

    fn noise(&self, stream: Stream, step: u64, frame: usize) -> Tensor<T> {
        gaussian(self.data.frames[frame].shape(), self.config.seed, stream, step, frame as u64)
    }

    fn condition(&mut self, i: usize) -> Result<ImagePlane<T>> {
        Ok(self
            .conditions
            .get_or_compute(i, &self.data.frames[i], self.frozen.guidance.as_ref())?
            .clone())
    }

    /// Structure term of `y_hat` as the stylization of frame `i`.
    fn structure_term(&mut self, y_hat: &Tensor<T>, i: usize, eps: &Tensor<T>) -> Result<(T, Tensor<T>)> {
        let cond = self.condition(i)?;
        match self.config.structure_term {
            StructureTerm::Csds => {
                let term = loss_csds(
                    self.frozen.denoiser.as_mut(),
                    &self.frozen.schedule,
                    self.config.t_index,
                    y_hat,
                    &cond,
                    eps,
                    self.config.sds_weighting,
                )?;
                Ok((term.value, term.grad))
            }
            StructureTerm::Lineart => loss_lineart(self.frozen.guidance.as_ref(), y_hat, &cond),
        }
    }

    fn terms(&mut self, params: &OperatorParams<T>, draw: Draw, want_grad: bool) -> Result<StepTerms<T>> {
        let w = self.config.weights;
        let j = draw.keyframe;
        let slot = self.data.keyframe_slot(j).expect("drawn from keyframes");
        let fj = params.forward(&self.data.frames[j])?;
        let (l_key, g_key) = loss_key_with_grad(fj.output(), self.data.stylized_keyframes[slot].tensor())?;
        let mut grads = if want_grad && w.lambda_k > 0.0 {
            Some(fj.backward(&g_key.scale(T::lit(w.lambda_k)))?)
        } else {
            None
        };
        drop(fj);
        let (mut l_vgg, mut l_csds) = (T::zero(), T::zero());
        match draw.unlabeled {
            None => {
                if !self.warned_empty {
                    log::warn!("no unlabeled frames: training on the keyframe term only");
                    self.warned_empty = true;
                }
            }
            Some(i) => {
                let fi = params.forward(&self.data.frames[i])?;
                let y_hat = fi.output().clone();
                let need = want_grad && (w.lambda_v > 0.0 || w.lambda_c > 0.0);
                let mut upstream = Tensor::zeros(y_hat.shape());
                if !self.style.is_empty() {
                    if need && w.lambda_v > 0.0 {
                        let (v, g) = loss_vgg_with_grad(self.frozen.extractor.as_ref(), &y_hat, &self.style[slot])?;
                        l_vgg = v;
                        upstream.axpy(T::lit(w.lambda_v), &g);
                    } else {
                        l_vgg = loss_vgg_value(self.frozen.extractor.as_ref(), &y_hat, &self.style[slot])?;
                    }
                }
                let eps = self.noise(Stream::TrainNoise, draw.step, i);
                let (c, g) = self.structure_term(&y_hat, i, &eps)?;
                l_csds = c;
                if need {
                    upstream.axpy(T::lit(w.lambda_c), &g);
                    let gi = fi.backward(&upstream)?;
                    match grads.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| a.add_assign(b)),
                        None => grads = Some(gi),
                    }
                }
            }
        }
        if want_grad && grads.is_none() {
            grads = Some(params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect());
        }
        let check = |what: &str, v: T| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::NonFinite {
                    what: what.to_string(),
                    step: draw.step,
                    frame: draw.unlabeled,
                    keyframe: j,
                })
            }
        };
        check("key loss", l_key)?;
        check("style loss", l_vgg)?;
        check("structure loss", l_csds)?;
        if let Some(g) = &grads {
            if !g.iter().all(Tensor::all_finite) {
                check("gradient", T::nan())?;
            }
        }
        Ok(StepTerms {
            l_key,
            l_vgg,
            l_csds,
            grads,
        })
    }

    /// Sampled losses at `step` for the current parameters, without updating.
    pub fn sample_terms(&mut self, step: u64) -> Result<TraceRow> {
        let draw = self.draw(step);
        let params = self.state.params.clone();
        let t = self.terms(&params, draw, false)?;
        Ok(TraceRow::new(
            step,
            &self.config.weights,
            to_f64(t.l_key),
            to_f64(t.l_vgg),
            to_f64(t.l_csds),
        ))
    }

    /// One optimizer update on a freshly drawn (keyframe, unlabeled) pair.
    pub fn train_step(&mut self) -> Result<TraceRow> {
        let draw = self.draw(self.state.step);
        let params = std::mem::replace(
            &mut self.state.params,
            OperatorParams {
                arch: OperatorArch::default(),
                seed: 0,
                tensors: Vec::new(),
            },
        );
        let result = self.terms(&params, draw, true);
        self.state.params = params;
        let t = result?;
        let grads = t.grads.expect("requested");
        self.state.optimizer.step(
            &mut self.state.params.tensors,
            &grads,
            self.config.learning_rate,
            self.config.weight_decay,
        );
        self.state.step += 1;
        let row = TraceRow::new(
            self.state.step,
            &self.config.weights,
            to_f64(t.l_key),
            to_f64(t.l_vgg),
            to_f64(t.l_csds),
        );
        if !row.total.is_finite() {
            return Err(Error::NonFinite {
                what: "total loss".into(),
                step: draw.step,
                frame: draw.unlabeled,
                keyframe: draw.keyframe,
            });
        }
        self.state.trace.push(row);
        self.state.draws.push(draw);
        Ok(row)
    }

    /// Full-sum losses of `params`: the key term averaged over keyframes,
    /// the style term over all (unlabeled, keyframe) pairs and the structure
    /// term over unlabeled frames, with a fixed noise panel.
    pub fn evaluate_params(&mut self, params: &OperatorParams<T>) -> Result<TraceRow> {
        let keys = self.data.keyframe_indices.clone();
        let mut l_key = 0.0;
        for (slot, &j) in keys.iter().enumerate() {
            let y = params.forward(&self.data.frames[j])?;
            l_key += to_f64(loss_key_with_grad(y.output(), self.data.stylized_keyframes[slot].tensor())?.0);
        }
        l_key /= keys.len() as f64;
        let z = self.data.unlabeled_indices();
        let (mut l_vgg, mut l_csds) = (0.0, 0.0);
        for &i in &z {
            let y_hat = params.forward(&self.data.frames[i])?.output().clone();
            for target in &self.style {
                l_vgg += to_f64(loss_vgg_value(self.frozen.extractor.as_ref(), &y_hat, target)?);
            }
            let eps = self.noise(Stream::EvalNoise, 0, i);
            l_csds += to_f64(self.structure_term(&y_hat, i, &eps)?.0);
        }
        if !z.is_empty() {
            l_vgg /= (z.len() * keys.len()) as f64;
            l_csds /= z.len() as f64;
        }
        Ok(TraceRow::new(self.state.step, &self.config.weights, l_key, l_vgg, l_csds))
    }

    /// Evaluates the current parameters, records the result and keeps them
    /// if they are the best so far.
    pub fn evaluate(&mut self, elapsed: Duration, dir: Option<&mut RunDir>) -> Result<&Evaluation> {
        let params = self.state.params.clone();
        let row = self.evaluate_params(&params)?;
        if !row.total.is_finite() {
            return Err(Error::NonFinite {
                what: "evaluated total loss".into(),
                step: self.state.step,
                frame: None,
                keyframe: self.data.keyframe_indices[0],
            });
        }
        let improved = self.state.best.as_ref().is_none_or(|b| row.total < b.total);
        let mut checkpoint_path = None;
        if let Some(dir) = dir {
            dir.append_evaluation(&row)?;
            if improved {
                let p = dir.checkpoint_path(row.step);
                checkpoint::save(&p, &params, row.step, Some(row.total))?;
                checkpoint_path = Some(p);
            }
        }
        let index = self.state.evaluations.len();
        self.state.evaluations.push(Evaluation {
            row,
            elapsed_secs: elapsed.as_secs_f64(),
            checkpoint: checkpoint_path,
        });
        if improved {
            self.state.best = Some(Best {
                evaluation: index,
                total: row.total,
                params,
            });
        }
        Ok(&self.state.evaluations[index])
    }

    /// Parameters of the selected (lowest evaluated total) checkpoint.
    pub fn selected_params(&self) -> Result<&OperatorParams<T>> {
        let k = select_checkpoint(&self.state.evaluations)?;
        match &self.state.best {
            Some(b) if b.evaluation == k => Ok(&b.params),
            _ => Err(Error::Contract("selected evaluation has no stored parameters".into())),
        }
    }

    fn probe_index(&self, requested: Option<usize>) -> usize {
        requested
            .or_else(|| self.data.unlabeled_indices().first().copied())
            .unwrap_or(0)
            .min(self.data.len() - 1)
    }

    fn take_snapshot(&mut self, mark: f64, elapsed: Duration, probe: usize, dir: Option<&RunDir>) -> Result<()> {
        let params = self.state.params.clone();
        let row = self.evaluate_params(&params)?;
        let image = match dir {
            Some(d) => {
                let p = d.snapshot_path(mark);
                params.apply(&self.data.frames[probe])?.save_png(&p)?;
                Some(p)
            }
            None => None,
        };
        self.state.snapshots.push(Snapshot {
            mark_minutes: mark,
            step: self.state.step,
            elapsed_secs: elapsed.as_secs_f64(),
            total: row.total,
            image,
        });
        Ok(())
    }

    /// Trains until the step cap or the wall-clock budget, evaluating every
    /// `checkpoint_every` steps and at the end.
    pub fn run(&mut self, mut opts: RunOptions) -> Result<RunSummary> {
        let mut dir = match &opts.out_dir {
            Some(p) => Some(RunDir::create(p, &self.config)?),
            None => None,
        };
        let probe = self.probe_index(opts.probe);
        let mut marks = opts.marks_minutes.clone();
        marks.sort_by(f64::total_cmp);
        marks.dedup();
        let mut pending = marks.into_iter().peekable();
        let mut elapsed = opts.clock.elapsed(self.state.step);
        if self.state.evaluations.is_empty() {
            self.evaluate(elapsed, dir.as_mut())?;
        }
        loop {
            let by_steps = self.config.max_steps.is_some_and(|m| self.state.step >= m);
            let by_time = self.config.max_wallclock.is_some_and(|m| elapsed >= m);
            if by_steps || by_time {
                break;
            }
            let row = self.train_step()?;
            if let Some(d) = dir.as_mut() {
                d.append_trace(&row)?;
            }
            elapsed = opts.clock.elapsed(self.state.step);
            while let Some(&m) = pending.peek() {
                if elapsed.as_secs_f64() < m * 60.0 {
                    break;
                }
                pending.next();
                self.take_snapshot(m, elapsed, probe, dir.as_ref())?;
            }
            if self.state.step.is_multiple_of(self.config.checkpoint_every) {
                self.evaluate(elapsed, dir.as_mut())?;
            }
        }
        if self.state.evaluations.last().is_none_or(|e| e.row.step != self.state.step) {
            self.evaluate(elapsed, dir.as_mut())?;
        }
        if let Some(d) = dir.as_mut() {
            d.flush()?;
        }
        let k = select_checkpoint(&self.state.evaluations)?;
        Ok(RunSummary {
            steps: self.state.step,
            selected: self.state.evaluations[k].clone(),
            evaluations: self.state.evaluations.clone(),
            convergence: log_convergence(&self.state.snapshots, &opts.marks_minutes),
            out_dir: opts.out_dir.take(),
            fingerprints: self.frozen.fingerprints(),
        })
    }
}
