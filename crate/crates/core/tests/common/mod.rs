//! Scalar-loop reference implementations shared by the integration tests.
//! Nothing here calls into the library's numeric kernels.

#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use restyle::{ImagePlane, Shape, Tensor};

pub type Planes = Vec<Vec<Vec<f64>>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(seed: u64, c: usize, h: usize, w: usize) -> ImagePlane<f64> {
    let mut r = rng(seed);
    ImagePlane::from_fn(c, h, w, |_, _, _| r.random_range(0.05..0.95)).unwrap()
}

pub fn planes(t: &Tensor<f64>) -> Planes {
    let s = t.shape();
    (0..s.channels)
        .map(|c| (0..s.height).map(|y| (0..s.width).map(|x| t.at(c, y, x)).collect()).collect())
        .collect()
}

pub fn gram(f: &Planes) -> Vec<Vec<f64>> {
    let c = f.len();
    let (h, w) = (f[0].len(), f[0][0].len());
    let mut g = vec![vec![0.0; c]; c];
    for a in 0..c {
        for b in 0..c {
            let mut s = 0.0;
            for y in 0..h {
                for x in 0..w {
                    s += f[a][y][x] * f[b][y][x];
                }
            }
            g[a][b] = s / (h * w) as f64;
        }
    }
    g
}

/// Zero-padded "same" cross-correlation with weights laid out as
/// (out, in, k*k).
pub fn conv_same(x: &Planes, w: &Tensor<f64>, k: usize) -> Planes {
    let (h, wd) = (x[0].len(), x[0][0].len());
    let s = w.shape();
    let pad = (k / 2) as isize;
    let mut out = vec![vec![vec![0.0; wd]; h]; s.channels];
    for o in 0..s.channels {
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = 0.0;
                for i in 0..s.height {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = y as isize + ky as isize - pad;
                            let ix = xx as isize + kx as isize - pad;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += w.at(o, i, ky * k + kx) * x[i][iy as usize][ix as usize];
                        }
                    }
                }
                out[o][y][xx] = acc;
            }
        }
    }
    out
}

pub fn tanh_all(x: &Planes) -> Planes {
    x.iter().map(|p| p.iter().map(|r| r.iter().map(|v| v.tanh()).collect()).collect()).collect()
}

/// Mean squared entrywise difference of two Gram matrices.
pub fn gram_mse(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let n = a.len() * a.len();
    let mut s = 0.0;
    for (ra, rb) in a.iter().zip(b) {
        for (p, q) in ra.iter().zip(rb) {
            s += (p - q) * (p - q);
        }
    }
    s / n as f64
}

pub fn luma(x: &Planes) -> Vec<Vec<f64>> {
    let (h, w) = (x[0].len(), x[0][0].len());
    (0..h)
        .map(|y| (0..w).map(|xx| 0.299 * x[0][y][xx] + 0.587 * x[1][y][xx] + 0.114 * x[2][y][xx]).collect())
        .collect()
}

/// Sobel magnitude with replicated borders, divided by 4 * sqrt(2) so a unit
/// diagonal step reads 1.
pub fn sobel_magnitude(l: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (h, w) = (l.len() as isize, l[0].len() as isize);
    let at = |y: isize, x: isize| l[y.clamp(0, h - 1) as usize][x.clamp(0, w - 1) as usize];
    let mut out = vec![vec![0.0; w as usize]; h as usize];
    for y in 0..h {
        for x in 0..w {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            out[y as usize][x as usize] = (gx * gx + gy * gy).sqrt() / (4.0 * 2f64.sqrt());
        }
    }
    out
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Central difference of `f` at `x` along element `i`.
pub fn central_diff(f: &mut dyn FnMut(&Tensor<f64>) -> f64, x: &Tensor<f64>, i: usize, h: f64) -> f64 {
    let mut p = x.clone();
    p.data_mut()[i] += h;
    let fp = f(&p);
    p.data_mut()[i] -= 2.0 * h;
    let fm = f(&p);
    (fp - fm) / (2.0 * h)
}

/// Largest relative error between an analytic gradient and central
/// differences over `count` sampled coordinates, ignoring coordinates where
/// both are below `floor`.
pub fn worst_fd_error(
    f: &mut dyn FnMut(&Tensor<f64>) -> f64,
    x: &Tensor<f64>,
    grad: &Tensor<f64>,
    count: usize,
    seed: u64,
    floor: f64,
) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let i = r.random_range(0..x.len());
        let fd = central_diff(f, x, i, 1e-3);
        let an = grad.data()[i];
        if fd.abs().max(an.abs()) < floor {
            continue;
        }
        worst = worst.max(rel_err(fd, an));
    }
    worst
}

pub fn shape(c: usize, h: usize, w: usize) -> Shape {
    Shape::new(c, h, w)
}
