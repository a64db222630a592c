//! Structural guidance functions and the per-frame condition cache.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::autodiff::{sobel, NodeId, Tape};
use crate::config::GuidanceKind;
use crate::error::Result;
use crate::image::ImagePlane;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Maps an RGB image to a structural condition image.
pub trait GuidanceFunction<T: Scalar>: Send + Sync {
    fn kind(&self) -> GuidanceKind;

    /// Channels of the condition image.
    fn channels(&self) -> usize {
        1
    }

    fn condition(&self, x: &ImagePlane<T>) -> Result<ImagePlane<T>>;

    /// Records a differentiable version on `tape`. `None` when the function
    /// has no useful derivative.
    fn record(&self, _tape: &mut Tape<T>, _input: NodeId) -> Option<NodeId> {
        None
    }

    fn fingerprint(&self) -> String;
}

/// Classic edge detector: Gaussian blur, Sobel, non-maximum suppression and
/// hysteresis. Thresholds apply to the raw Sobel magnitude of the blurred
/// luma, so a unit step scores about 4.
#[derive(Clone, Debug, PartialEq)]
pub struct Canny {
    pub sigma: f64,
    pub low: f64,
    pub high: f64,
}

impl Default for Canny {
    fn default() -> Self {
        Canny {
            sigma: 1.0,
            low: 0.4,
            high: 0.8,
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn blur(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * src[y * w + clamp(x as isize + j as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[clamp(y as isize + j as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

impl Canny {
    /// Binary edge map of a luma plane, returned row-major.
    pub fn edges(&self, lum: &[f64], h: usize, w: usize) -> Vec<bool> {
        let blurred = blur(lum, h, w, &gaussian_kernel(self.sigma));
        let t = Tensor::from_vec(Shape::new(1, h, w), blurred).expect("sized");
        let (gx, gy) = sobel(&t);
        let (gx, gy) = (gx.data(), gy.data());
        let mag: Vec<f64> = gx.iter().zip(gy).map(|(a, b)| (a * a + b * b).sqrt()).collect();
        let m_at = |y: isize, x: isize| {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                0.0
            } else {
                mag[y as usize * w + x as usize]
            }
        };
        // Thin ridges: keep a pixel if it is at least its predecessor along the
        // gradient and strictly above its successor, so a plateau two pixels
        // wide keeps exactly one.
        let mut thin = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let m = mag[i];
                if m < self.low || m == 0.0 {
                    continue;
                }
                let mut angle = gy[i].atan2(gx[i]).to_degrees();
                if angle < 0.0 {
                    angle += 180.0;
                }
                let (dy, dx) = if !(22.5..157.5).contains(&angle) {
                    (0, 1)
                } else if angle < 67.5 {
                    (1, 1)
                } else if angle < 112.5 {
                    (1, 0)
                } else {
                    (1, -1)
                };
                let (yi, xi) = (y as isize, x as isize);
                let prev = m_at(yi - dy, xi - dx);
                let next = m_at(yi + dy, xi + dx);
                if m >= prev && m > next {
                    thin[i] = m;
                }
            }
        }
        let mut out = vec![false; h * w];
        let mut stack: Vec<usize> = (0..h * w).filter(|&i| thin[i] >= self.high).collect();
        for &i in &stack {
            out[i] = true;
        }
        while let Some(i) = stack.pop() {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    let j = yy as usize * w + xx as usize;
                    if !out[j] && thin[j] >= self.low {
                        out[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        out
    }
}

impl<T: Scalar> GuidanceFunction<T> for Canny {
    fn kind(&self) -> GuidanceKind {
        GuidanceKind::Canny
    }

    fn condition(&self, x: &ImagePlane<T>) -> Result<ImagePlane<T>> {
        let (h, w) = (x.height(), x.width());
        let lum: Vec<f64> = x.luminance().data().iter().map(|v| v.as_f64()).collect();
        let e = self.edges(&lum, h, w);
        let t = Tensor::from_vec(
            Shape::new(1, h, w),
            e.into_iter().map(|b| if b { T::one() } else { T::zero() }).collect(),
        )?;
        ImagePlane::new(t)
    }

    fn fingerprint(&self) -> String {
        format!("canny:{}:{}:{}", self.sigma, self.low, self.high)
    }
}

/// Differentiable edge strength: Sobel magnitude of the luma scaled into
/// [0, 1].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SoftEdges;

impl<T: Scalar> GuidanceFunction<T> for SoftEdges {
    fn kind(&self) -> GuidanceKind {
        GuidanceKind::Toy
    }

    fn condition(&self, x: &ImagePlane<T>) -> Result<ImagePlane<T>> {
        let mut tape = Tape::new();
        let id = tape.leaf(x.tensor().clone());
        let out = tape.luma_sobel(id);
        ImagePlane::from_tensor_clamped(tape.value(out).clone())
    }

    fn record(&self, tape: &mut Tape<T>, input: NodeId) -> Option<NodeId> {
        Some(tape.luma_sobel(input))
    }

    fn fingerprint(&self) -> String {
        "toy:luma-sobel".into()
    }
}

fn binarize<T: Scalar>(m: &ImagePlane<T>, tolerance: usize) -> Vec<bool> {
    let (h, w) = (m.height(), m.width());
    let half = T::lit(0.5);
    let on: Vec<bool> = m.tensor().channel(0).iter().map(|&v| v > half).collect();
    if tolerance == 0 {
        return on;
    }
    let r = tolerance as isize;
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if !on[(y as usize) * w + x as usize] {
                continue;
            }
            for yy in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                for xx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                    out[yy as usize * w + xx as usize] = true;
                }
            }
        }
    }
    out
}

/// Intersection over union of two binary edge maps after dilating each by
/// `tolerance` pixels (square neighbourhood). Two empty maps agree
/// perfectly.
pub fn edge_iou<T: Scalar>(a: &ImagePlane<T>, b: &ImagePlane<T>, tolerance: usize) -> f64 {
    let (a, b) = (binarize(a, tolerance), binarize(b, tolerance));
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &q) in a.iter().zip(&b) {
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Conditions of the target frames, computed once per frame index.
#[derive(Debug)]
pub struct ConditionCache<T> {
    entries: HashMap<usize, ImagePlane<T>>,
    /// Identifies the guidance function the entries were computed with.
    owner: String,
}

impl<T: Scalar> ConditionCache<T> {
    pub fn new(g: &dyn GuidanceFunction<T>) -> Self {
        ConditionCache {
            entries: HashMap::new(),
            owner: g.fingerprint(),
        }
    }

    pub fn get_or_compute(
        &mut self,
        index: usize,
        x: &ImagePlane<T>,
        g: &dyn GuidanceFunction<T>,
    ) -> Result<&ImagePlane<T>> {
        let fp = g.fingerprint();
        if fp != self.owner {
            self.entries.clear();
            self.owner = fp;
        }
        if let std::collections::hash_map::Entry::Vacant(e) = self.entries.entry(index) {
            e.insert(g.condition(x)?);
        }
        Ok(&self.entries[&index])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Stable hash of a condition image, for logs and manifests.
pub fn condition_digest<T: Scalar>(c: &ImagePlane<T>) -> String {
    hex::encode(Sha256::digest(c.to_bytes()))
}
