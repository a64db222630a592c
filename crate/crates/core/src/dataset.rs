//! Target frames, keyframe pairing and dataset validation.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::Resolution;
use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::scalar::Scalar;

/// Target sequence plus the stylized keyframes that supervise it.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameDataset<T> {
    pub frames: Vec<ImagePlane<T>>,
    /// File names, aligned with `frames`.
    pub names: Vec<String>,
    /// Sorted, aligned with `stylized_keyframes`.
    pub keyframe_indices: Vec<usize>,
    pub stylized_keyframes: Vec<ImagePlane<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rule {
    NoFrames,
    NoKeyframes,
    KeyframeIndexRange,
    DuplicateKeyframe,
    KeyframeCount,
    KeyframeDimensions,
    FrameDimensions,
    NoUnlabeledFrames,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    /// Frame index the violation refers to, when there is one.
    pub index: Option<usize>,
    pub rule: Rule,
    pub severity: Severity,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        match self.index {
            Some(i) => write!(f, "{sev}: [{:?}] index {i}: {}", self.rule, self.message),
            None => write!(f, "{sev}: [{:?}] {}", self.rule, self.message),
        }
    }
}

impl<T: Scalar> FrameDataset<T> {
    /// Builds a dataset from in-memory frames. `keyframes` pairs a frame
    /// index with its stylized counterpart; the result is not validated.
    pub fn new(frames: Vec<ImagePlane<T>>, mut keyframes: Vec<(usize, ImagePlane<T>)>) -> Self {
        keyframes.sort_by_key(|(i, _)| *i);
        let names = (0..frames.len()).map(|i| format!("{i:04}.png")).collect();
        let (keyframe_indices, stylized_keyframes) = keyframes.into_iter().unzip();
        FrameDataset {
            frames,
            names,
            keyframe_indices,
            stylized_keyframes,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frame indices without a stylized counterpart.
    pub fn unlabeled_indices(&self) -> Vec<usize> {
        let keys: BTreeSet<usize> = self.keyframe_indices.iter().copied().collect();
        (0..self.frames.len()).filter(|i| !keys.contains(i)).collect()
    }

    /// Position of frame `index` inside `keyframe_indices`.
    pub fn keyframe_slot(&self, index: usize) -> Option<usize> {
        self.keyframe_indices.binary_search(&index).ok()
    }

    /// Content hash over frame and keyframe samples (quantized to 8 bits so
    /// it matches the on-disk data) and the keyframe indices.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for f in &self.frames {
            h.update((f.width() as u64).to_le_bytes());
            h.update((f.height() as u64).to_le_bytes());
            h.update(f.to_bytes());
        }
        for (i, k) in self.keyframe_indices.iter().zip(&self.stylized_keyframes) {
            h.update((*i as u64).to_le_bytes());
            h.update(k.to_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Lists every broken invariant; an empty list means the dataset is
    /// usable for training.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let err = |index, rule, message: String| Violation {
            index,
            rule,
            severity: Severity::Error,
            message,
        };
        let n = self.frames.len();
        if n == 0 {
            out.push(err(None, Rule::NoFrames, "dataset has no frames".into()));
        }
        if let Some(first) = self.frames.first() {
            for (i, f) in self.frames.iter().enumerate().skip(1) {
                if (f.width(), f.height()) != (first.width(), first.height()) {
                    out.push(err(
                        Some(i),
                        Rule::FrameDimensions,
                        format!(
                            "frame is {}x{}, frame 0 is {}x{}",
                            f.width(),
                            f.height(),
                            first.width(),
                            first.height()
                        ),
                    ));
                }
            }
        }
        if self.keyframe_indices.is_empty() {
            out.push(err(None, Rule::NoKeyframes, "no stylized keyframes".into()));
        }
        if self.keyframe_indices.len() != self.stylized_keyframes.len() {
            out.push(err(
                None,
                Rule::KeyframeCount,
                format!(
                    "{} keyframe indices but {} stylized keyframes",
                    self.keyframe_indices.len(),
                    self.stylized_keyframes.len()
                ),
            ));
        }
        let mut seen = BTreeSet::new();
        for (slot, &i) in self.keyframe_indices.iter().enumerate() {
            if !seen.insert(i) {
                out.push(err(Some(i), Rule::DuplicateKeyframe, "keyframe index repeated".into()));
            }
            if i >= n {
                out.push(err(
                    Some(i),
                    Rule::KeyframeIndexRange,
                    format!("keyframe index outside [0, {n})"),
                ));
                continue;
            }
            if let Some(k) = self.stylized_keyframes.get(slot) {
                let f = &self.frames[i];
                if (k.width(), k.height()) != (f.width(), f.height()) {
                    out.push(err(
                        Some(i),
                        Rule::KeyframeDimensions,
                        format!(
                            "stylized keyframe is {}x{}, source frame is {}x{}",
                            k.width(),
                            k.height(),
                            f.width(),
                            f.height()
                        ),
                    ));
                }
            }
        }
        if n > 0 && !self.keyframe_indices.is_empty() && self.unlabeled_indices().is_empty() {
            out.push(Violation {
                index: None,
                rule: Rule::NoUnlabeledFrames,
                severity: Severity::Warning,
                message: "no unlabeled frames; training reduces to keyframe reconstruction".into(),
            });
        }
        out
    }
}

fn list_pngs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            let name = entry.file_name().to_string_lossy().into_owned();
            files.push((name, path));
        }
    }
    files.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(files)
}

fn stem(name: &str) -> &str {
    Path::new(name)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(name)
}

fn load_at<T: Scalar>(path: &Path, resolution: Resolution) -> Result<ImagePlane<T>> {
    let img = ImagePlane::<T>::load_png(path)?;
    match resolution {
        Resolution::Native => Ok(img),
        Resolution::Fixed { width, height } => img.resample(width, height),
    }
}

/// Loads a frame directory and its keyframe directory. Frames are ordered by
/// file name; keyframes pair with frames of the same stem.
pub fn load_dataset<T: Scalar>(
    frame_dir: &Path,
    keyframe_dir: &Path,
    resolution: Resolution,
) -> Result<FrameDataset<T>> {
    let frame_files = list_pngs(frame_dir)?;
    if frame_files.is_empty() {
        return Err(Error::Contract(format!(
            "no PNG frames in {}",
            frame_dir.display()
        )));
    }
    let key_files = list_pngs(keyframe_dir)?;
    let mut pairs = Vec::with_capacity(key_files.len());
    for (name, path) in &key_files {
        let idx = frame_files
            .iter()
            .position(|(f, _)| stem(f) == stem(name))
            .ok_or_else(|| Error::Pairing {
                orphan: path.clone(),
            })?;
        pairs.push((idx, path));
    }
    let frames = frame_files
        .iter()
        .map(|(_, p)| load_at::<T>(p, resolution))
        .collect::<Result<Vec<_>>>()?;
    if resolution == Resolution::Native {
        let (w, h) = (frames[0].width(), frames[0].height());
        if let Some(i) = frames.iter().position(|f| (f.width(), f.height()) != (w, h)) {
            return Err(Error::Dimension(format!(
                "{} is {}x{} but {} is {w}x{h}; set a fixed resolution",
                frame_files[i].1.display(),
                frames[i].width(),
                frames[i].height(),
                frame_files[0].1.display()
            )));
        }
    }
    let mut keyframes = Vec::with_capacity(pairs.len());
    for (idx, path) in pairs {
        let k = load_at::<T>(path, resolution)?;
        if (k.width(), k.height()) != (frames[idx].width(), frames[idx].height()) {
            return Err(Error::Dimension(format!(
                "keyframe {} is {}x{}, its frame is {}x{}",
                path.display(),
                k.width(),
                k.height(),
                frames[idx].width(),
                frames[idx].height()
            )));
        }
        keyframes.push((idx, k));
    }
    let mut ds = FrameDataset::new(frames, keyframes);
    ds.names = frame_files.into_iter().map(|(n, _)| n).collect();
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(v: f64) -> ImagePlane<f64> {
        ImagePlane::constant(3, 8, 8, v).unwrap()
    }

    #[test]
    fn valid_dataset_has_no_violations() {
        let ds = FrameDataset::new(vec![img(0.1), img(0.2), img(0.3)], vec![(1, img(0.9))]);
        assert!(ds.validate().is_empty());
        assert_eq!(ds.unlabeled_indices(), vec![0, 2]);
    }

    #[test]
    fn narrower_keyframe_is_reported_at_its_index() {
        let narrow = ImagePlane::constant(3, 8, 10, 0.5).unwrap();
        let frames = vec![
            ImagePlane::constant(3, 8, 12, 0.1).unwrap(),
            ImagePlane::constant(3, 8, 12, 0.1).unwrap(),
            ImagePlane::constant(3, 8, 12, 0.1).unwrap(),
        ];
        let ds = FrameDataset::new(frames, vec![(2, narrow)]);
        let v = ds.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, Rule::KeyframeDimensions);
        assert_eq!(v[0].index, Some(2));
    }

    #[test]
    fn all_keyframes_is_a_warning() {
        let ds = FrameDataset::new(vec![img(0.1), img(0.2)], vec![(0, img(0.5)), (1, img(0.5))]);
        let v = ds.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, Rule::NoUnlabeledFrames);
        assert_eq!(v[0].severity, Severity::Warning);
    }

    #[test]
    fn out_of_range_and_missing_keyframes() {
        let ds = FrameDataset::new(vec![img(0.1)], vec![(3, img(0.5))]);
        assert!(ds.validate().iter().any(|v| v.rule == Rule::KeyframeIndexRange));
        let ds = FrameDataset::new(vec![img(0.1)], vec![]);
        assert!(ds.validate().iter().any(|v| v.rule == Rule::NoKeyframes));
    }
}
