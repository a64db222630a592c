//! Loss weights, training configuration and the flat `key = value` file format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weights of the key, style and structure terms of the total objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_k: f64,
    pub lambda_v: f64,
    pub lambda_c: f64,
}

impl LossWeights {
    pub fn new(lambda_k: f64, lambda_v: f64, lambda_c: f64) -> Result<Self> {
        let w = LossWeights {
            lambda_k,
            lambda_v,
            lambda_c,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_k, self.lambda_v, self.lambda_c];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative, got {all:?}"
            )));
        }
        if all.iter().all(|v| *v == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    /// lambda_k = 1, lambda_v = 100, lambda_c = 1e-5.
    fn default() -> Self {
        LossWeights {
            lambda_k: 1.0,
            lambda_v: 100.0,
            lambda_c: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceKind {
    Canny,
    Lineart,
    Depth,
    Softedge,
    Toy,
}

impl GuidanceKind {
    pub const ALL: [GuidanceKind; 5] = [
        GuidanceKind::Canny,
        GuidanceKind::Lineart,
        GuidanceKind::Depth,
        GuidanceKind::Softedge,
        GuidanceKind::Toy,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            GuidanceKind::Canny => "canny",
            GuidanceKind::Lineart => "lineart",
            GuidanceKind::Depth => "depth",
            GuidanceKind::Softedge => "softedge",
            GuidanceKind::Toy => "toy",
        }
    }
}

impl std::fmt::Display for GuidanceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GuidanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GuidanceKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown guidance kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Resolution {
    Native,
    Fixed { width: usize, height: usize },
}

impl FromStr for Resolution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("native") {
            return Ok(Resolution::Native);
        }
        let parts: Vec<&str> = s.split(['x', 'X', ',']).map(str::trim).collect();
        match parts.as_slice() {
            [w, h] => {
                let width = w.parse().map_err(|_| bad("resolution", s))?;
                let height = h.parse().map_err(|_| bad("resolution", s))?;
                Ok(Resolution::Fixed { width, height })
            }
            _ => Err(bad("resolution", s)),
        }
    }
}

impl std::fmt::Display for Resolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Resolution::Native => f.write_str("native"),
            Resolution::Fixed { width, height } => write!(f, "{width}x{height}"),
        }
    }
}

/// How the score-distillation gradient is weighted per step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdsWeighting {
    /// w(t) = sqrt(alpha_bar_t), the Jacobian of the noise mix.
    SqrtAlphaBar,
    /// w(t) = 1.
    Unit,
}

impl FromStr for SdsWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sqrt_alpha_bar" => Ok(SdsWeighting::SqrtAlphaBar),
            "unit" => Ok(SdsWeighting::Unit),
            other => Err(bad("sds_weighting", other)),
        }
    }
}

/// Which structure term the third loss weight multiplies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureTerm {
    /// Condition-guided score distillation.
    Csds,
    /// Direct edge-map matching through a differentiable guidance function.
    Lineart,
}

impl FromStr for StructureTerm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "csds" => Ok(StructureTerm::Csds),
            "lineart" => Ok(StructureTerm::Lineart),
            other => Err(bad("structure_term", other)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_steps: Option<u64>,
    pub max_wallclock: Option<Duration>,
    /// Denoising step in [0, 29]; 0 is the noisiest.
    pub t_index: usize,
    pub feature_layers: Vec<String>,
    pub guidance_kind: GuidanceKind,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub resolution: Resolution,
    pub weights: LossWeights,
    pub width_multiplier: f64,
    pub pass_through: bool,
    pub extractor: String,
    pub denoiser: String,
    pub sds_weighting: SdsWeighting,
    pub structure_term: StructureTerm,
    pub weight_decay: f64,
    /// Backend registry entries (`backend.<name>.<field>` keys).
    pub backends: BTreeMap<String, BTreeMap<String, String>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-5,
            max_steps: Some(1_000_000),
            max_wallclock: Some(Duration::from_secs(4 * 3600)),
            t_index: 28,
            feature_layers: vec!["t1".into(), "t2".into()],
            guidance_kind: GuidanceKind::Canny,
            seed: 0,
            checkpoint_every: 100,
            resolution: Resolution::Native,
            weights: LossWeights::default(),
            width_multiplier: 1.0,
            pass_through: false,
            extractor: "toy".into(),
            denoiser: "structure".into(),
            sds_weighting: SdsWeighting::SqrtAlphaBar,
            structure_term: StructureTerm::Csds,
            weight_decay: 0.01,
            backends: BTreeMap::new(),
        }
    }
}

pub const SCHEDULE_STEPS: usize = 30;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.t_index >= SCHEDULE_STEPS {
            return Err(Error::Config(format!(
                "t_index {} outside [0, {}]",
                self.t_index,
                SCHEDULE_STEPS - 1
            )));
        }
        self.weights.validate()?;
        if self.weights.lambda_v > 0.0 && self.feature_layers.is_empty() {
            return Err(Error::Config(
                "feature_layers must be non-empty when lambda_v > 0".into(),
            ));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        if self.max_steps.is_none() && self.max_wallclock.is_none() {
            return Err(Error::Config(
                "one of max_steps / max_wallclock is required".into(),
            ));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(Error::Config("width_multiplier must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses `key = value` lines; `#` starts a comment. Missing keys keep
    /// their defaults, unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "learning_rate" => self.learning_rate = num(key, value)?,
            "max_steps" => self.max_steps = opt(value).map(|v| num(key, v)).transpose()?,
            "max_wallclock" => {
                self.max_wallclock = opt(value)
                    .map(|v| num::<f64>(key, v).map(Duration::from_secs_f64))
                    .transpose()?
            }
            "t_index" => self.t_index = num(key, value)?,
            "feature_layers" => {
                self.feature_layers = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            "guidance_kind" => self.guidance_kind = value.parse()?,
            "seed" => self.seed = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "resolution" => self.resolution = value.parse()?,
            "lambda_k" => self.weights.lambda_k = num(key, value)?,
            "lambda_v" => self.weights.lambda_v = num(key, value)?,
            "lambda_c" => self.weights.lambda_c = num(key, value)?,
            "width_multiplier" => self.width_multiplier = num(key, value)?,
            "pass_through" => self.pass_through = num(key, value)?,
            "extractor" => self.extractor = value.to_string(),
            "denoiser" => self.denoiser = value.to_string(),
            "sds_weighting" => self.sds_weighting = value.parse()?,
            "structure_term" => self.structure_term = value.parse()?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            other => {
                let Some(rest) = other.strip_prefix("backend.") else {
                    return Err(Error::Config(format!("unknown config key `{other}`")));
                };
                let (name, field) = rest.rsplit_once('.').ok_or_else(|| {
                    Error::Config(format!("backend key `{other}` needs `backend.<name>.<field>`"))
                })?;
                self.backends
                    .entry(name.to_string())
                    .or_default()
                    .insert(field.to_string(), value.to_string());
            }
        }
        Ok(())
    }

    /// Serializes every key; `parse(to_kv_string())` reproduces `self`.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let opt_str = |o: Option<String>| o.unwrap_or_else(|| "none".into());
        let _ = writeln!(s, "learning_rate = {:?}", self.learning_rate);
        let _ = writeln!(s, "max_steps = {}", opt_str(self.max_steps.map(|v| v.to_string())));
        let _ = writeln!(
            s,
            "max_wallclock = {}",
            opt_str(self.max_wallclock.map(|d| format!("{:?}", d.as_secs_f64())))
        );
        let _ = writeln!(s, "t_index = {}", self.t_index);
        let _ = writeln!(s, "feature_layers = {}", self.feature_layers.join(","));
        let _ = writeln!(s, "guidance_kind = {}", self.guidance_kind);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "resolution = {}", self.resolution);
        let _ = writeln!(s, "lambda_k = {:?}", self.weights.lambda_k);
        let _ = writeln!(s, "lambda_v = {:?}", self.weights.lambda_v);
        let _ = writeln!(s, "lambda_c = {:?}", self.weights.lambda_c);
        let _ = writeln!(s, "width_multiplier = {:?}", self.width_multiplier);
        let _ = writeln!(s, "pass_through = {}", self.pass_through);
        let _ = writeln!(s, "extractor = {}", self.extractor);
        let _ = writeln!(s, "denoiser = {}", self.denoiser);
        let _ = writeln!(
            s,
            "sds_weighting = {}",
            match self.sds_weighting {
                SdsWeighting::SqrtAlphaBar => "sqrt_alpha_bar",
                SdsWeighting::Unit => "unit",
            }
        );
        let _ = writeln!(
            s,
            "structure_term = {}",
            match self.structure_term {
                StructureTerm::Csds => "csds",
                StructureTerm::Lineart => "lineart",
            }
        );
        let _ = writeln!(s, "weight_decay = {:?}", self.weight_decay);
        for (name, fields) in &self.backends {
            for (field, value) in fields {
                let _ = writeln!(s, "backend.{name}.{field} = {value}");
            }
        }
        s
    }
}

fn opt(v: &str) -> Option<&str> {
    (!v.eq_ignore_ascii_case("none") && !v.is_empty()).then_some(v)
}

fn num<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.trim().parse().map_err(|_| bad(key, value))
}

fn bad(key: &str, value: &str) -> Error {
    Error::Config(format!("invalid value `{value}` for `{key}`"))
}
