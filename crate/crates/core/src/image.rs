//! Images in the canonical [0, 1] range, PNG I/O and resampling.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Smallest accepted side length, in pixels.
pub const MIN_SIDE: usize = 8;

/// Rec. 601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// H x W x C image with every value finite and inside [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane<T> {
    tensor: Tensor<T>,
}

impl<T: Scalar> ImagePlane<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        let s = tensor.shape();
        if s.width < MIN_SIDE || s.height < MIN_SIDE {
            return Err(Error::Dimension(format!(
                "image {}x{} is below the {MIN_SIDE}x{MIN_SIDE} minimum",
                s.width, s.height
            )));
        }
        if s.channels == 0 {
            return Err(Error::Dimension("image has no channels".into()));
        }
        if let Some(pos) = tensor
            .data()
            .iter()
            .position(|v| !v.is_finite() || *v < T::zero() || *v > T::one())
        {
            return Err(Error::Contract(format!(
                "image value {} at flat index {pos} is outside [0, 1]",
                tensor.data()[pos]
            )));
        }
        Ok(ImagePlane { tensor })
    }

    /// Clamps into [0, 1] (NaN becomes 0) before wrapping.
    pub fn from_tensor_clamped(tensor: Tensor<T>) -> Result<Self> {
        let clamped = tensor.map(|v| {
            if v.is_nan() {
                T::zero()
            } else {
                v.max(T::zero()).min(T::one())
            }
        });
        Self::new(clamped)
    }

    pub fn constant(channels: usize, height: usize, width: usize, value: T) -> Result<Self> {
        Self::new(Tensor::full(Shape::new(channels, height, width), value))
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        f: impl FnMut(usize, usize, usize) -> T,
    ) -> Result<Self> {
        Self::new(Tensor::from_fn(Shape::new(channels, height, width), f))
    }

    pub fn width(&self) -> usize {
        self.tensor.shape().width
    }

    pub fn height(&self) -> usize {
        self.tensor.shape().height
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape().channels
    }

    pub fn shape(&self) -> Shape {
        self.tensor.shape()
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.tensor.at(c, y, x)
    }

    pub fn cast<U: Scalar>(&self) -> ImagePlane<U> {
        // Narrowing may round 1.0 - tiny up to 1.0, never out of range.
        ImagePlane {
            tensor: self.tensor.cast(),
        }
    }

    /// Single-channel luma. Single-channel inputs are returned unchanged.
    pub fn luminance(&self) -> Tensor<T> {
        luminance(&self.tensor)
    }

    /// Repeats a single-channel image `channels` times.
    pub fn broadcast(&self, channels: usize) -> Result<Self> {
        if self.channels() == channels {
            return Ok(self.clone());
        }
        if self.channels() != 1 {
            return Err(Error::Contract(format!(
                "cannot broadcast {} channels to {channels}",
                self.channels()
            )));
        }
        let s = self.shape();
        let src = self.tensor.channel(0);
        let data = (0..channels).flat_map(|_| src.iter().copied()).collect();
        Self::new(Tensor::from_vec(
            Shape::new(channels, s.height, s.width),
            data,
        )?)
    }

    /// Interleaved 8-bit samples, rounding to nearest.
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = self.shape();
        let mut out = Vec::with_capacity(s.len());
        for y in 0..s.height {
            for x in 0..s.width {
                for c in 0..s.channels {
                    out.push(quantize(self.at(c, y, x)));
                }
            }
        }
        out
    }

    pub fn from_bytes(channels: usize, width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != channels * width * height {
            return Err(Error::Dimension(format!(
                "{} bytes do not form a {width}x{height}x{channels} image",
                bytes.len()
            )));
        }
        let scale = T::lit(255.0);
        Self::from_fn(channels, height, width, |c, y, x| {
            T::of_usize(bytes[(y * width + x) * channels + c] as usize) / scale
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Decode {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })?;
        let rgb = img.to_rgb8();
        Self::from_bytes(3, rgb.width() as usize, rgb.height() as usize, rgb.as_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (w, h) = (self.width() as u32, self.height() as u32);
        let bytes = self.to_bytes();
        let res = match self.channels() {
            1 => image::GrayImage::from_raw(w, h, bytes).map(|i| i.save(path)),
            3 => image::RgbImage::from_raw(w, h, bytes).map(|i| i.save(path)),
            c => {
                return Err(Error::Dimension(format!(
                    "cannot encode a {c}-channel image as PNG"
                )))
            }
        };
        match res {
            Some(Ok(())) => Ok(()),
            Some(Err(image::ImageError::IoError(io))) => Err(Error::io(path, io)),
            Some(Err(e)) => Err(Error::Decode {
                path: path.to_path_buf(),
                message: e.to_string(),
            }),
            None => unreachable!("buffer length matches dimensions"),
        }
    }

    /// Area averaging along shrinking axes, bilinear along growing ones.
    pub fn resample(&self, width: usize, height: usize) -> Result<Self> {
        if width == self.width() && height == self.height() {
            return Ok(self.clone());
        }
        let horizontal = resample_axis(&self.tensor, width, Axis::X);
        let both = resample_axis(&horizontal, height, Axis::Y);
        Self::from_tensor_clamped(both)
    }
}

pub fn quantize<T: Scalar>(v: T) -> u8 {
    let v = v.as_f64().clamp(0.0, 1.0);
    (v * 255.0).round() as u8
}

pub fn luminance<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    if s.channels == 1 {
        return t.clone();
    }
    let w = LUMA.map(T::lit);
    let mut out = Tensor::zeros(Shape::new(1, s.height, s.width));
    for (c, &wc) in w.iter().enumerate().take(s.channels.min(3)) {
        for (o, &v) in out.data_mut().iter_mut().zip(t.channel(c)) {
            *o += wc * v;
        }
    }
    out
}

#[derive(Clone, Copy)]
enum Axis {
    X,
    Y,
}

fn resample_axis<T: Scalar>(src: &Tensor<T>, dst_len: usize, axis: Axis) -> Tensor<T> {
    let s = src.shape();
    let src_len = match axis {
        Axis::X => s.width,
        Axis::Y => s.height,
    };
    let weights = if dst_len == src_len {
        (0..dst_len).map(|i| vec![(i, 1.0)]).collect()
    } else if dst_len < src_len {
        area_weights(src_len, dst_len)
    } else {
        bilinear_weights(src_len, dst_len)
    };
    let out_shape = match axis {
        Axis::X => Shape::new(s.channels, s.height, dst_len),
        Axis::Y => Shape::new(s.channels, dst_len, s.width),
    };
    let weights: Vec<Vec<(usize, T)>> = weights
        .into_iter()
        .map(|row| row.into_iter().map(|(i, w)| (i, T::lit(w))).collect())
        .collect();
    Tensor::from_fn(out_shape, |c, y, x| {
        let taps = match axis {
            Axis::X => &weights[x],
            Axis::Y => &weights[y],
        };
        taps.iter()
            .map(|&(j, w)| match axis {
                Axis::X => w * src.at(c, y, j),
                Axis::Y => w * src.at(c, j, x),
            })
            .sum()
    })
}

/// Exact box coverage of each destination cell over the source grid.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let lo = i as f64 * ratio;
            let hi = (i + 1) as f64 * ratio;
            let mut taps = Vec::new();
            let mut j = lo.floor() as usize;
            while (j as f64) < hi && j < src {
                let cover = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
                if cover > 0.0 {
                    taps.push((j, cover / ratio));
                }
                j += 1;
            }
            taps
        })
        .collect()
}

/// Half-pixel-centred linear interpolation with edge clamping.
fn bilinear_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
            let j0 = pos.floor() as usize;
            let j1 = (j0 + 1).min(src - 1);
            let f = pos - j0 as f64;
            if j1 == j0 || f == 0.0 {
                vec![(j0, 1.0)]
            } else {
                vec![(j0, 1.0 - f), (j1, f)]
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_small() {
        assert!(ImagePlane::<f64>::constant(3, 8, 8, 1.5).is_err());
        assert!(ImagePlane::<f64>::constant(3, 8, 8, f64::NAN).is_err());
        assert!(ImagePlane::<f64>::constant(3, 7, 8, 0.5).is_err());
        assert!(ImagePlane::<f64>::constant(3, 8, 8, 0.5).is_ok());
    }

    #[test]
    fn area_downscale_by_two_averages_blocks() {
        let img = ImagePlane::<f64>::from_fn(1, 16, 16, |_, y, x| ((y * 16 + x) % 7) as f64 / 7.0)
            .unwrap();
        let small = img.resample(8, 8).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let expect = (img.at(0, 2 * y, 2 * x)
                    + img.at(0, 2 * y + 1, 2 * x)
                    + img.at(0, 2 * y, 2 * x + 1)
                    + img.at(0, 2 * y + 1, 2 * x + 1))
                    / 4.0;
                assert!((small.at(0, y, x) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn area_weights_sum_to_one() {
        for (src, dst) in [(960, 512), (540, 288), (17, 9), (10, 3)] {
            for row in area_weights(src, dst) {
                let s: f64 = row.iter().map(|(_, w)| w).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upscale_of_constant_is_constant() {
        let img = ImagePlane::<f32>::constant(3, 8, 8, 0.25).unwrap();
        let big = img.resample(20, 13).unwrap();
        assert_eq!((big.width(), big.height()), (20, 13));
        assert!(big.tensor().data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn png_round_trip_within_one_step() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImagePlane::<f64>::from_fn(3, 9, 11, |c, y, x| {
            ((c * 31 + y * 7 + x * 13) % 101) as f64 / 100.0
        })
        .unwrap();
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        let back = ImagePlane::<f64>::load_png(&path).unwrap();
        for (a, b) in img.tensor().data().iter().zip(back.tensor().data()) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }
}
