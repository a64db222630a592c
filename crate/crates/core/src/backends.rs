//! Frozen model adapters and the registry that resolves them by name.
//!
//! The toy entries are small deterministic stand-ins with the same
//! interfaces as the pretrained networks. Artifact entries describe real
//! weights on disk; they resolve only when an adapter for them is linked in
//! through [`BackendRegistry::link_extractor`] and friends.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Activation, NodeId, Tape};
use crate::config::{GuidanceKind, TrainConfig};
use crate::distillation::{Canny, GuidanceFunction, GuidedDenoiser, NoiseSchedule, SoftEdges};
use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::perceptual::FeatureExtractor;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Environment variable naming the directory relative artifact paths are
/// resolved against.
pub const BACKEND_DIR_ENV: &str = "SR_BACKEND_DIR";

/// Two-stage random convolutional network.
///
/// Tap `t1` is the linear response of the first bank; `t2` is
/// `tanh(conv2(tanh(t1)))`. Neither stage has a bias, so a black image has
/// zero response everywhere.
#[derive(Clone, Debug)]
pub struct ToyExtractor<T> {
    kernel: usize,
    w1: Tensor<T>,
    w2: Tensor<T>,
}

impl<T: Scalar> ToyExtractor<T> {
    pub fn new(seed: u64, kernel: usize, c1: usize, c2: usize) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e57_f00d);
        let kk = kernel * kernel;
        let mut bank = |oc: usize, ic: usize| {
            let bound = 1.0 / ((ic * kk) as f64).sqrt();
            Tensor::from_fn(Shape::new(oc, ic, kk), |_, _, _| {
                T::lit(rng.random_range(-bound..bound))
            })
        };
        let w1 = bank(c1, 3);
        let w2 = bank(c2, c1);
        ToyExtractor { kernel, w1, w2 }
    }

    pub fn seeded(seed: u64) -> Self {
        Self::new(seed, 3, 8, 16)
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    /// First-stage weights, (out, in, k*k).
    pub fn first_bank(&self) -> &Tensor<T> {
        &self.w1
    }

    pub fn second_bank(&self) -> &Tensor<T> {
        &self.w2
    }
}

impl<T: Scalar> FeatureExtractor<T> for ToyExtractor<T> {
    fn name(&self) -> &str {
        "toy"
    }

    fn taps(&self) -> Vec<String> {
        vec!["t1".into(), "t2".into()]
    }

    fn record(&self, tape: &mut Tape<T>, input: NodeId, layers: &[String]) -> Result<Vec<NodeId>> {
        self.check_layers(layers)?;
        let c = tape.value(input).shape().channels;
        if c != 3 {
            return Err(Error::Contract(format!("extractor expects RGB, got {c} channels")));
        }
        let pad = self.kernel / 2;
        let w1 = tape.leaf(self.w1.clone());
        let t1 = tape.conv2d(input, w1, None, self.kernel, 1, pad);
        let t2 = if layers.iter().any(|l| l == "t2") {
            let a = tape.activation(t1, Activation::Tanh);
            let w2 = tape.leaf(self.w2.clone());
            let z = tape.conv2d(a, w2, None, self.kernel, 1, pad);
            Some(tape.activation(z, Activation::Tanh))
        } else {
            None
        };
        Ok(layers
            .iter()
            .map(|l| if l == "t1" { t1 } else { t2.expect("recorded") })
            .collect())
    }

    /// Hash of the current weights.
    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.kernel as u64).to_le_bytes());
        for v in self.w1.data().iter().chain(self.w2.data()) {
            h.update(v.as_f64().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyDenoiserKind {
    /// Returns the injected noise exactly; the residual is zero.
    Oracle,
    /// Returns its noisy input.
    Identity,
    /// Treats the broadcast condition as the clean image it expects:
    /// `(z - sqrt(a) s(c)) / sqrt(1 - a)`.
    Structure,
}

impl ToyDenoiserKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ToyDenoiserKind::Oracle => "oracle",
            ToyDenoiserKind::Identity => "identity",
            ToyDenoiserKind::Structure => "structure",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyDenoiser<T> {
    kind: ToyDenoiserKind,
    reference: Option<Tensor<T>>,
}

impl std::str::FromStr for ToyDenoiserKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [ToyDenoiserKind::Oracle, ToyDenoiserKind::Identity, ToyDenoiserKind::Structure]
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown toy denoiser `{s}` (oracle, identity, structure)")))
    }
}

impl<T: Scalar> ToyDenoiser<T> {
    pub fn new(kind: ToyDenoiserKind) -> Self {
        ToyDenoiser { kind, reference: None }
    }

    pub fn named(name: &str) -> Result<Self> {
        Ok(Self::new(name.parse()?))
    }
}

impl<T: Scalar> GuidedDenoiser<T> for ToyDenoiser<T> {
    fn name(&self) -> &str {
        self.kind.as_str()
    }

    fn bind_reference_noise(&mut self, eps: &Tensor<T>) {
        if self.kind == ToyDenoiserKind::Oracle {
            self.reference = Some(eps.clone());
        }
    }

    fn predict_noise(
        &mut self,
        noisy: &Tensor<T>,
        cond: &ImagePlane<T>,
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<Tensor<T>> {
        match self.kind {
            ToyDenoiserKind::Oracle => self
                .reference
                .take()
                .ok_or_else(|| Error::Contract("oracle denoiser queried without bound noise".into())),
            ToyDenoiserKind::Identity => Ok(noisy.clone()),
            ToyDenoiserKind::Structure => {
                let a = schedule.alpha_bar(t)?;
                if a >= 1.0 {
                    return Err(Error::Contract("noise-free step has no noise to predict".into()));
                }
                let s = cond.broadcast(noisy.shape().channels)?;
                let (sa, sn) = (T::lit(a.sqrt()), T::lit((1.0 - a).sqrt()));
                noisy.zip_map(s.tensor(), |z, c| (z - sa * c) / sn)
            }
        }
    }

    fn fingerprint(&self) -> String {
        format!("toy-denoiser:{}", self.kind.as_str())
    }
}

/// Wraps a denoiser and answers every derivative query with NaN, counting
/// the queries. Used to show a loss never differentiates through the model.
pub struct DerivativeTrap<D> {
    pub inner: D,
    queries: Arc<AtomicUsize>,
}

impl<D> DerivativeTrap<D> {
    pub fn new(inner: D) -> Self {
        DerivativeTrap {
            inner,
            queries: Arc::new(AtomicUsize::new(0)),
        }
    }

    pub fn queries(&self) -> usize {
        self.queries.load(Ordering::SeqCst)
    }

    /// Shared handle on the query count, still readable after the trap is
    /// boxed and handed to a trainer.
    pub fn counter(&self) -> Arc<AtomicUsize> {
        self.queries.clone()
    }
}

impl<T: Scalar, D: GuidedDenoiser<T>> GuidedDenoiser<T> for DerivativeTrap<D> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn accepts(&self, kind: GuidanceKind) -> bool {
        self.inner.accepts(kind)
    }

    fn bind_reference_noise(&mut self, eps: &Tensor<T>) {
        self.inner.bind_reference_noise(eps)
    }

    fn predict_noise(
        &mut self,
        noisy: &Tensor<T>,
        cond: &ImagePlane<T>,
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<Tensor<T>> {
        self.inner.predict_noise(noisy, cond, t, schedule)
    }

    fn noise_vjp(
        &mut self,
        noisy: &Tensor<T>,
        _cond: &ImagePlane<T>,
        _t: usize,
        _upstream: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        self.queries.fetch_add(1, Ordering::SeqCst);
        Ok(Tensor::full(noisy.shape(), T::nan()))
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Role {
    Extractor,
    Denoiser,
    Guidance,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Extractor => "extractor",
            Role::Denoiser => "denoiser",
            Role::Guidance => "guidance",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "extractor" => Ok(Role::Extractor),
            "denoiser" => Ok(Role::Denoiser),
            "guidance" => Ok(Role::Guidance),
            other => Err(Error::Config(format!("unknown backend role `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    Toy,
    Artifact {
        path: PathBuf,
        /// Input range the weights expect, for example `0,1` or `-1,1`.
        range: String,
        /// Whether the model works in a learned latent space.
        latent: bool,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackendEntry {
    pub name: String,
    pub role: Role,
    pub source: Source,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Availability {
    Ready,
    Unavailable(String),
}

type ExtractorFactory<T> = Arc<dyn Fn(u64) -> Result<Box<dyn FeatureExtractor<T>>> + Send + Sync>;
type DenoiserFactory<T> = Arc<dyn Fn() -> Result<Box<dyn GuidedDenoiser<T>>> + Send + Sync>;
type GuidanceFactory<T> = Arc<dyn Fn() -> Result<Box<dyn GuidanceFunction<T>>> + Send + Sync>;

/// Name to backend resolution, with one namespace per role. Guidance
/// backends are named after their kind (`canny`, `lineart`, ...).
pub struct BackendRegistry<T> {
    entries: BTreeMap<(Role, String), BackendEntry>,
    extractors: BTreeMap<String, ExtractorFactory<T>>,
    denoisers: BTreeMap<String, DenoiserFactory<T>>,
    guidance: BTreeMap<String, GuidanceFactory<T>>,
}

impl<T: Scalar> Default for BackendRegistry<T> {
    fn default() -> Self {
        Self::with_toys()
    }
}

impl<T: Scalar> BackendRegistry<T> {
    pub fn empty() -> Self {
        BackendRegistry {
            entries: BTreeMap::new(),
            extractors: BTreeMap::new(),
            denoisers: BTreeMap::new(),
            guidance: BTreeMap::new(),
        }
    }

    pub fn with_toys() -> Self {
        let mut r = Self::empty();
        r.link_extractor("toy", Arc::new(|seed| Ok(Box::new(ToyExtractor::<T>::seeded(seed)) as _)));
        for kind in [ToyDenoiserKind::Oracle, ToyDenoiserKind::Identity, ToyDenoiserKind::Structure] {
            r.link_denoiser(
                kind.as_str(),
                Arc::new(move || Ok(Box::new(ToyDenoiser::<T>::new(kind)) as _)),
            );
        }
        r.link_guidance(
            GuidanceKind::Canny.as_str(),
            Arc::new(|| Ok(Box::new(Canny::default()) as _)),
        );
        r.link_guidance(GuidanceKind::Toy.as_str(), Arc::new(|| Ok(Box::new(SoftEdges) as _)));
        r
    }

    /// Toy entries plus the `backend.*` entries of `cfg`.
    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        let root = std::env::var_os(BACKEND_DIR_ENV).map(PathBuf::from);
        let mut r = Self::with_toys();
        for (name, fields) in &cfg.backends {
            let get = |f: &str| {
                fields.get(f).ok_or_else(|| {
                    Error::Config(format!("backend `{name}` is missing `{f}`"))
                })
            };
            let role = Role::parse(get("role")?)?;
            let path = PathBuf::from(get("path")?);
            let path = match (&root, path.is_relative()) {
                (Some(root), true) => root.join(path),
                _ => path,
            };
            let range = fields.get("range").cloned().unwrap_or_else(|| "0,1".into());
            let latent = match fields.get("latent").map(String::as_str) {
                None | Some("false") => false,
                Some("true") => true,
                Some(v) => return Err(Error::Config(format!("backend `{name}`: latent must be true/false, got `{v}`"))),
            };
            r.add_artifact(name, role, path, range, latent);
        }
        Ok(r)
    }

    pub fn add_artifact(&mut self, name: &str, role: Role, path: PathBuf, range: String, latent: bool) {
        self.entries.insert(
            (role, name.to_string()),
            BackendEntry {
                name: name.to_string(),
                role,
                source: Source::Artifact { path, range, latent },
            },
        );
    }

    fn add_toy(&mut self, name: &str, role: Role) {
        self.entries.entry((role, name.to_string())).or_insert(BackendEntry {
            name: name.to_string(),
            role,
            source: Source::Toy,
        });
    }

    pub fn link_extractor(&mut self, name: &str, f: ExtractorFactory<T>) {
        self.add_toy(name, Role::Extractor);
        self.extractors.insert(name.to_string(), f);
    }

    pub fn link_denoiser(&mut self, name: &str, f: DenoiserFactory<T>) {
        self.add_toy(name, Role::Denoiser);
        self.denoisers.insert(name.to_string(), f);
    }

    pub fn link_guidance(&mut self, name: &str, f: GuidanceFactory<T>) {
        self.add_toy(name, Role::Guidance);
        self.guidance.insert(name.to_string(), f);
    }

    pub fn entries(&self) -> impl Iterator<Item = &BackendEntry> {
        self.entries.values()
    }

    pub fn probe(&self, role: Role, name: &str) -> Availability {
        let Some(entry) = self.entries.get(&(role, name.to_string())) else {
            return Availability::Unavailable("not registered".into());
        };
        let linked = match entry.role {
            Role::Extractor => self.extractors.contains_key(name),
            Role::Denoiser => self.denoisers.contains_key(name),
            Role::Guidance => self.guidance.contains_key(name),
        };
        match &entry.source {
            Source::Artifact { path, .. } if !path.exists() => {
                Availability::Unavailable(format!("artifact not found at {}", path.display()))
            }
            Source::Artifact { path, .. } if !linked => Availability::Unavailable(format!(
                "no adapter linked for the artifact at {}",
                path.display()
            )),
            _ if !linked => Availability::Unavailable("no adapter linked".into()),
            _ => Availability::Ready,
        }
    }

    fn require(&self, name: &str, role: Role) -> Result<()> {
        if !self.entries.contains_key(&(role, name.to_string())) {
            if let Some(e) = self.entries.values().find(|e| e.name == name) {
                return Err(Error::Config(format!(
                    "backend `{name}` is a {}, not a {}",
                    e.role.as_str(),
                    role.as_str()
                )));
            }
            return Err(Error::BackendUnavailable {
                name: name.to_string(),
                reason: format!("no {} named `{name}` is registered", role.as_str()),
            });
        }
        match self.probe(role, name) {
            Availability::Ready => Ok(()),
            Availability::Unavailable(reason) => Err(Error::BackendUnavailable {
                name: name.to_string(),
                reason,
            }),
        }
    }

    pub fn extractor(&self, name: &str, seed: u64) -> Result<Box<dyn FeatureExtractor<T>>> {
        self.require(name, Role::Extractor)?;
        (self.extractors[name])(seed)
    }

    pub fn denoiser(&self, name: &str) -> Result<Box<dyn GuidedDenoiser<T>>> {
        self.require(name, Role::Denoiser)?;
        (self.denoisers[name])()
    }

    pub fn guidance(&self, kind: GuidanceKind) -> Result<Box<dyn GuidanceFunction<T>>> {
        let name = kind.as_str();
        self.require(name, Role::Guidance)?;
        let g = (self.guidance[name])()?;
        if g.kind() != kind {
            return Err(Error::Config(format!(
                "guidance `{name}` reports kind {}",
                g.kind()
            )));
        }
        Ok(g)
    }
}

/// Hash of a file on disk, for recording which weights a run used.
pub fn file_fingerprint(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}
