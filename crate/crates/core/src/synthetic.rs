//! Procedural sequences for smoke runs and desk-scale experiments.
//!
//! Frames show a moving bar over a smooth background. Every frame except the
//! keyframe also contains a bright disc. The stylized keyframe recolors the
//! scene and overlays diagonal stripes that do not follow the scene
//! geometry.

use crate::dataset::FrameDataset;
use crate::error::Result;
use crate::image::ImagePlane;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub keyframes: Vec<usize>,
    /// Whether non-keyframes contain the disc.
    pub disc: bool,
}

impl SceneSpec {
    pub fn new(frames: usize, width: usize, height: usize, keyframes: Vec<usize>) -> Self {
        SceneSpec {
            frames,
            width,
            height,
            keyframes,
            disc: true,
        }
    }
}

fn smooth_step(edge: f64, v: f64) -> f64 {
    // Half-pixel ramp keeps shape boundaries crisp but position-accurate.
    (v - edge + 0.5).clamp(0.0, 1.0)
}

/// Scene for frame `k` of `n`: RGB value at pixel (x, y).
fn scene(spec: &SceneSpec, k: usize, with_disc: bool, x: f64, y: f64) -> [f64; 3] {
    let (w, h) = (spec.width as f64, spec.height as f64);
    let phase = if spec.frames > 1 { k as f64 / (spec.frames - 1) as f64 } else { 0.0 };
    let gx = x / w;
    let mut rgb = [0.15 + 0.25 * gx, 0.2 + 0.1 * (y / h), 0.35 - 0.15 * gx];
    let bar_x0 = w * (0.15 + 0.3 * phase);
    let bar = smooth_step(bar_x0, x) * smooth_step(x, bar_x0 + w * 0.18) * smooth_step(h * 0.2, y) * smooth_step(y, h * 0.8);
    for (c, v) in [0.85, 0.3, 0.2].into_iter().enumerate() {
        rgb[c] += bar * (v - rgb[c]);
    }
    if with_disc {
        let (cx, cy) = (w * (0.72 - 0.1 * phase), h * (0.3 + 0.35 * phase));
        let r = w.min(h) * 0.16;
        let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
        let inside = (r - d + 0.5).clamp(0.0, 1.0);
        for (c, v) in [0.95, 0.95, 0.7].into_iter().enumerate() {
            rgb[c] += inside * (v - rgb[c]);
        }
    }
    rgb
}

fn stylize(rgb: [f64; 3], x: usize, y: usize) -> [f64; 3] {
    let l = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
    let stripe = if ((x + y) / 3).is_multiple_of(2) { 1.0 } else { 0.0 };
    let ink = [0.1 + 0.5 * l, 0.05 + 0.3 * l, 0.3 + 0.6 * l];
    let paper = [0.95, 0.85, 0.55];
    let t = 0.35 + 0.4 * stripe;
    [0, 1, 2].map(|c| (t * ink[c] + (1.0 - t) * paper[c] * l.sqrt()).clamp(0.0, 1.0))
}

/// Builds the sequence and its stylized keyframes.
pub fn scene_dataset<T: Scalar>(spec: &SceneSpec) -> Result<FrameDataset<T>> {
    let mut frames = Vec::with_capacity(spec.frames);
    let mut keys = Vec::new();
    for k in 0..spec.frames {
        let is_key = spec.keyframes.contains(&k);
        let with_disc = spec.disc && !is_key;
        let px = |c: usize, y: usize, x: usize| scene(spec, k, with_disc, x as f64 + 0.5, y as f64 + 0.5)[c];
        let f = ImagePlane::from_fn(3, spec.height, spec.width, |c, y, x| T::lit(px(c, y, x)))?;
        if is_key {
            let s = ImagePlane::from_fn(3, spec.height, spec.width, |c, y, x| {
                let rgb = [0, 1, 2].map(|cc| px(cc, y, x));
                T::lit(stylize(rgb, x, y)[c])
            })?;
            keys.push((k, s));
        }
        frames.push(f);
    }
    Ok(FrameDataset::new(frames, keys))
}

/// Eight 64x64 frames with frame 0 as the only keyframe.
pub fn desk_scene<T: Scalar>() -> Result<FrameDataset<T>> {
    scene_dataset(&SceneSpec::new(8, 64, 64, vec![0]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_scene_is_valid() {
        let ds = desk_scene::<f32>().unwrap();
        assert!(ds.validate().is_empty());
        assert_eq!(ds.unlabeled_indices().len(), 7);
    }
}
