//! Reverse-mode differentiation over (C, H, W) tensors.
//!
//! A [`Tape`] records every operation of a forward pass. `backward` walks the
//! records in reverse, accumulating vector-Jacobian products, and returns the
//! gradient of every node that the seed reaches.

use crate::image::LUMA;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    /// x * sigmoid(x)
    Silu,
    Tanh,
    Sigmoid,
    LeakyRelu(f64),
}

/// Normalizer that maps the Sobel magnitude of a [0, 1] image into [0, 1].
pub const SOBEL_NORM: f64 = 5.656_854_249_492_381; // 4 * sqrt(2)

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Conv {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    InstanceNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        normalized: Tensor<T>,
        inv_std: Vec<T>,
    },
    Act {
        x: NodeId,
        kind: Activation,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    AddConst {
        x: NodeId,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    Upsample2 {
        x: NodeId,
    },
    Crop {
        x: NodeId,
    },
    Gram {
        x: NodeId,
    },
    MseConst {
        x: NodeId,
        target: Tensor<T>,
    },
    LumaSobel {
        x: NodeId,
        gx: Tensor<T>,
        gy: Tensor<T>,
    },
    Weighted {
        terms: Vec<(NodeId, T)>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads[id.0].take()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Zero-padded cross-correlation. Weights are stored as
    /// (out_channels, in_channels, kernel * kernel).
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let value = conv_forward(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            kernel,
            stride,
            pad,
        );
        self.push(
            value,
            Op::Conv {
                x,
                w,
                bias,
                kernel,
                stride,
                pad,
            },
        )
    }

    pub fn instance_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let s = xv.shape();
        let n = T::of_usize(s.plane());
        let eps = T::lit(INSTANCE_NORM_EPS);
        let mut normalized = Tensor::zeros(s);
        let mut inv_std = Vec::with_capacity(s.channels);
        let mut out = Tensor::zeros(s);
        let (g, b) = (self.value(gamma), self.value(beta));
        for c in 0..s.channels {
            let src = xv.channel(c);
            let mean = src.iter().copied().sum::<T>() / n;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            let (gc, bc) = (g.data()[c], b.data()[c]);
            let nrm = normalized.channel_mut(c);
            for (o, &v) in nrm.iter_mut().zip(src) {
                *o = (v - mean) * inv;
            }
            let nrm = normalized.channel(c).to_vec();
            for (o, v) in out.channel_mut(c).iter_mut().zip(nrm) {
                *o = gc * v + bc;
            }
        }
        self.push(
            out,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
        )
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> NodeId {
        let value = self.value(x).map(|v| activate(kind, v));
        self.push(value, Op::Act { x, kind })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add { a, b })
    }

    pub fn add_const(&mut self, x: NodeId, c: &Tensor<T>) -> NodeId {
        let mut value = self.value(x).clone();
        value.add_assign(c);
        self.push(value, Op::AddConst { x })
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        assert_eq!((sa.height, sa.width), (sb.height, sb.width), "concat spatial mismatch");
        let mut data = Vec::with_capacity(sa.len() + sb.len());
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        let value = Tensor::from_vec(
            Shape::new(sa.channels + sb.channels, sa.height, sa.width),
            data,
        )
        .expect("sizes agree");
        self.push(value, Op::Concat { a, b })
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let s = v.shape();
        let out = Tensor::from_fn(Shape::new(s.channels, s.height * 2, s.width * 2), |c, y, x| {
            v.at(c, y / 2, x / 2)
        });
        self.push(out, Op::Upsample2 { x })
    }

    /// Keeps the top-left `height x width` window.
    pub fn crop(&mut self, x: NodeId, height: usize, width: usize) -> NodeId {
        let v = self.value(x);
        let s = v.shape();
        assert!(height <= s.height && width <= s.width);
        let out = Tensor::from_fn(Shape::new(s.channels, height, width), |c, y, x| v.at(c, y, x));
        self.push(out, Op::Crop { x })
    }

    /// Spatially pooled channel correlations, normalized by H * W.
    /// Output shape is (1, C, C).
    pub fn gram(&mut self, x: NodeId) -> NodeId {
        let value = gram_matrix(self.value(x));
        self.push(value, Op::Gram { x })
    }

    /// Mean squared difference against a constant; scalar output.
    pub fn mse_const(&mut self, x: NodeId, target: &Tensor<T>) -> NodeId {
        let v = self.value(x);
        assert_eq!(v.shape(), target.shape(), "mse shape mismatch");
        let n = T::of_usize(v.len());
        let s: T = v
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        self.push(
            Tensor::scalar(s / n),
            Op::MseConst {
                x,
                target: target.clone(),
            },
        )
    }

    /// Sobel gradient magnitude of the luma of `x`, replicate-padded and
    /// divided by [`SOBEL_NORM`]. Output has one channel.
    pub fn luma_sobel(&mut self, x: NodeId) -> NodeId {
        let lum = crate::image::luminance(self.value(x));
        let (gx, gy) = sobel(&lum);
        let norm = T::lit(SOBEL_NORM);
        let value = gx
            .zip_map(&gy, |a, b| (a * a + b * b).sqrt() / norm)
            .expect("same shape");
        self.push(value, Op::LumaSobel { x, gx, gy })
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, T)]) -> NodeId {
        let v = terms
            .iter()
            .map(|&(id, w)| w * self.value(id).item())
            .sum();
        self.push(
            Tensor::scalar(v),
            Op::Weighted {
                terms: terms.to_vec(),
            },
        )
    }

    /// Propagates `seed` (the gradient of some objective with respect to
    /// `root`) back through the tape.
    pub fn backward(&self, root: NodeId, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.value(root).shape(), "seed shape");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => grads[idx] = Some(g),
                Op::Conv {
                    x,
                    w,
                    bias,
                    kernel,
                    stride,
                    pad,
                } => {
                    let (gx, gw, gb) = conv_backward(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        *kernel,
                        *stride,
                        *pad,
                        bias.is_some(),
                    );
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    if let (Some(b), Some(gb)) = (bias, gb) {
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::InstanceNorm {
                    x,
                    gamma,
                    beta,
                    normalized,
                    inv_std,
                } => {
                    let s = g.shape();
                    let n = T::of_usize(s.plane());
                    let gam = self.value(*gamma);
                    let mut gx = Tensor::zeros(s);
                    let mut ggamma = Tensor::zeros(gam.shape());
                    let mut gbeta = Tensor::zeros(gam.shape());
                    #[allow(clippy::needless_range_loop)]
                    for c in 0..s.channels {
                        let gc = g.channel(c);
                        let xh = normalized.channel(c);
                        let dg: T = gc.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                        let db: T = gc.iter().copied().sum();
                        ggamma.data_mut()[c] = dg;
                        gbeta.data_mut()[c] = db;
                        let k = gam.data()[c];
                        // dxhat = g * gamma; mean(dxhat) = k*db/n; mean(dxhat*xhat) = k*dg/n
                        let m1 = k * db / n;
                        let m2 = k * dg / n;
                        let inv = inv_std[c];
                        for ((o, &gv), &h) in gx.channel_mut(c).iter_mut().zip(gc).zip(xh) {
                            *o = inv * (k * gv - m1 - h * m2);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gamma, ggamma);
                    accumulate(&mut grads, *beta, gbeta);
                }
                Op::Act { x, kind } => {
                    let xin = self.value(*x);
                    let gx = g
                        .zip_map(xin, |gv, xv| gv * activation_grad(*kind, xv))
                        .expect("shape");
                    accumulate(&mut grads, *x, gx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddConst { x } => accumulate(&mut grads, *x, g),
                Op::Concat { a, b } => {
                    let sa = self.value(*a).shape();
                    let sb = self.value(*b).shape();
                    let (da, db) = g.data().split_at(sa.len());
                    accumulate(&mut grads, *a, Tensor::from_vec(sa, da.to_vec()).unwrap());
                    accumulate(&mut grads, *b, Tensor::from_vec(sb, db.to_vec()).unwrap());
                }
                Op::Upsample2 { x } => {
                    let s = self.value(*x).shape();
                    let mut gx = Tensor::zeros(s);
                    let gs = g.shape();
                    for c in 0..gs.channels {
                        for y in 0..gs.height {
                            for xx in 0..gs.width {
                                let i = gx.index(c, y / 2, xx / 2);
                                gx.data_mut()[i] += g.at(c, y, xx);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Crop { x } => {
                    let s = self.value(*x).shape();
                    let mut gx = Tensor::zeros(s);
                    let gs = g.shape();
                    for c in 0..gs.channels {
                        for y in 0..gs.height {
                            for xx in 0..gs.width {
                                gx.set(c, y, xx, g.at(c, y, xx));
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Gram { x } => {
                    let f = self.value(*x);
                    let s = f.shape();
                    let c = s.channels;
                    let n = T::of_usize(s.plane());
                    let mut gx = Tensor::zeros(s);
                    for a in 0..c {
                        for b in 0..c {
                            let coef = (g.at(0, a, b) + g.at(0, b, a)) / n;
                            if coef == T::zero() {
                                continue;
                            }
                            let fb = f.channel(b).to_vec();
                            for (o, v) in gx.channel_mut(a).iter_mut().zip(fb) {
                                *o += coef * v;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::MseConst { x, target } => {
                    let v = self.value(*x);
                    let k = T::lit(2.0) * g.item() / T::of_usize(v.len());
                    let gx = v.zip_map(target, |a, b| k * (a - b)).expect("shape");
                    accumulate(&mut grads, *x, gx);
                }
                Op::LumaSobel { x, gx, gy } => {
                    let norm = T::lit(SOBEL_NORM);
                    // d|grad| / d(gx, gy), zero where the magnitude vanishes.
                    let mut dgx = Tensor::zeros(gx.shape());
                    let mut dgy = Tensor::zeros(gy.shape());
                    for i in 0..gx.len() {
                        let (a, b) = (gx.data()[i], gy.data()[i]);
                        let m = (a * a + b * b).sqrt();
                        if m > T::zero() {
                            let k = g.data()[i] / (norm * m);
                            dgx.data_mut()[i] = k * a;
                            dgy.data_mut()[i] = k * b;
                        }
                    }
                    let dlum = sobel_transpose(&dgx, &dgy);
                    let xs = self.value(*x).shape();
                    let gxin = if xs.channels == 1 {
                        dlum
                    } else {
                        Tensor::from_fn(xs, |c, y, xx| {
                            if c < 3 {
                                T::lit(LUMA[c]) * dlum.at(0, y, xx)
                            } else {
                                T::zero()
                            }
                        })
                    };
                    accumulate(&mut grads, *x, gxin);
                }
                Op::Weighted { terms } => {
                    let gv = g.item();
                    for &(id, w) in terms {
                        accumulate(&mut grads, id, Tensor::scalar(gv * w));
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

#[inline]
pub(crate) fn activate<T: Scalar>(kind: Activation, v: T) -> T {
    match kind {
        Activation::Silu => v * sigmoid(v),
        Activation::Tanh => v.tanh(),
        Activation::Sigmoid => sigmoid(v),
        Activation::LeakyRelu(slope) => {
            if v >= T::zero() {
                v
            } else {
                T::lit(slope) * v
            }
        }
    }
}

#[inline]
fn activation_grad<T: Scalar>(kind: Activation, x: T) -> T {
    match kind {
        Activation::Silu => {
            let s = sigmoid(x);
            s + x * s * (T::one() - s)
        }
        Activation::Tanh => {
            let t = x.tanh();
            T::one() - t * t
        }
        Activation::Sigmoid => {
            let s = sigmoid(x);
            s * (T::one() - s)
        }
        Activation::LeakyRelu(slope) => {
            if x >= T::zero() {
                T::one()
            } else {
                T::lit(slope)
            }
        }
    }
}

#[inline]
fn out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - kernel) / stride + 1
}

/// Output positions `o` such that `o * stride + offset` lands in `[0, len)`.
#[inline]
fn valid_range(out: usize, len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let hi_excl = {
        // largest o with o*s + offset <= len-1
        let top = len as isize - 1 - offset;
        if top < 0 {
            0
        } else {
            (top / s + 1).min(out as isize)
        }
    };
    let lo = lo.min(out as isize) as usize;
    (lo, (hi_excl.max(lo as isize)) as usize)
}

/// Unfolds `x` into a (in_channels * k * k, oh * ow) row-major matrix of
/// zero-padded patches.
fn im2col<T: Scalar>(x: &Tensor<T>, kernel: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Vec<T> {
    let s = x.shape();
    let np = oh * ow;
    let mut cols = vec![T::zero(); s.channels * kernel * kernel * np];
    for ic in 0..s.channels {
        let src = x.channel(ic);
        for ky in 0..kernel {
            let dy = ky as isize - pad as isize;
            let (y0, y1) = valid_range(oh, s.height, stride, dy);
            for kx in 0..kernel {
                let dx = kx as isize - pad as isize;
                let (x0, x1) = valid_range(ow, s.width, stride, dx);
                let r = (ic * kernel + ky) * kernel + kx;
                let dst = &mut cols[r * np..(r + 1) * np];
                for oy in y0..y1 {
                    let iy = ((oy * stride) as isize + dy) as usize;
                    let row = &src[iy * s.width..(iy + 1) * s.width];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if stride == 1 {
                        let ix0 = (x0 as isize + dx) as usize;
                        drow[x0..x1].copy_from_slice(&row[ix0..ix0 + (x1 - x0)]);
                    } else {
                        for ox in x0..x1 {
                            drow[ox] = row[((ox * stride) as isize + dx) as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates patch gradients back onto the input.
fn col2im<T: Scalar>(cols: &[T], shape: Shape, kernel: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Tensor<T> {
    let np = oh * ow;
    let mut gx = Tensor::zeros(shape);
    for ic in 0..shape.channels {
        let dst = gx.channel_mut(ic);
        for ky in 0..kernel {
            let dy = ky as isize - pad as isize;
            let (y0, y1) = valid_range(oh, shape.height, stride, dy);
            for kx in 0..kernel {
                let dx = kx as isize - pad as isize;
                let (x0, x1) = valid_range(ow, shape.width, stride, dx);
                let r = (ic * kernel + ky) * kernel + kx;
                let src = &cols[r * np..(r + 1) * np];
                for oy in y0..y1 {
                    let iy = ((oy * stride) as isize + dy) as usize;
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    let row = &mut dst[iy * shape.width..(iy + 1) * shape.width];
                    if stride == 1 {
                        let ix0 = (x0 as isize + dx) as usize;
                        for (d, &v) in row[ix0..ix0 + (x1 - x0)].iter_mut().zip(&srow[x0..x1]) {
                            *d += v;
                        }
                    } else {
                        for ox in x0..x1 {
                            row[((ox * stride) as isize + dx) as usize] += srow[ox];
                        }
                    }
                }
            }
        }
    }
    gx
}

#[inline]
fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with eight independent partial sums so the loop vectorizes.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    acc.iter().copied().sum::<T>() + tail
}

pub(crate) fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let s = x.shape();
    let ws = w.shape();
    assert_eq!(ws.height, s.channels, "conv input channels");
    assert_eq!(ws.width, kernel * kernel, "conv kernel size");
    let oh = out_len(s.height, kernel, stride, pad);
    let ow = out_len(s.width, kernel, stride, pad);
    let np = oh * ow;
    let rows = s.channels * kernel * kernel;
    let cols = im2col(x, kernel, stride, pad, oh, ow);
    let mut out = Tensor::zeros(Shape::new(ws.channels, oh, ow));
    let wd = w.data();
    for oc in 0..ws.channels {
        let plane = out.channel_mut(oc);
        if let Some(b) = bias {
            let bv = b.data()[oc];
            plane.iter_mut().for_each(|v| *v = bv);
        }
        for (r, &wv) in wd[oc * rows..(oc + 1) * rows].iter().enumerate() {
            if wv != T::zero() {
                axpy(wv, &cols[r * np..(r + 1) * np], plane);
            }
        }
    }
    out
}

#[allow(clippy::type_complexity)]
pub(crate) fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
    with_bias: bool,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let s = x.shape();
    let gs = gout.shape();
    let (oh, ow) = (gs.height, gs.width);
    let np = oh * ow;
    let rows = s.channels * kernel * kernel;
    let cols = im2col(x, kernel, stride, pad, oh, ow);
    let mut gw = Tensor::zeros(w.shape());
    let mut gcols = vec![T::zero(); rows * np];
    let wd = w.data();
    for oc in 0..gs.channels {
        let gplane = gout.channel(oc);
        let gwd = &mut gw.data_mut()[oc * rows..(oc + 1) * rows];
        for r in 0..rows {
            gwd[r] = dot(gplane, &cols[r * np..(r + 1) * np]);
            let wv = wd[oc * rows + r];
            if wv != T::zero() {
                axpy(wv, gplane, &mut gcols[r * np..(r + 1) * np]);
            }
        }
    }
    let gx = col2im(&gcols, s, kernel, stride, pad, oh, ow);
    let gb = with_bias.then(|| {
        Tensor::from_fn(Shape::new(gs.channels, 1, 1), |c, _, _| {
            gout.channel(c).iter().copied().sum()
        })
    });
    (gx, gw, gb)
}

/// G[a][b] = sum_p F[a][p] * F[b][p] / (H * W), shape (1, C, C).
pub fn gram_matrix<T: Scalar>(f: &Tensor<T>) -> Tensor<T> {
    let s = f.shape();
    let n = T::of_usize(s.plane());
    let c = s.channels;
    let mut g = Tensor::zeros(Shape::new(1, c, c));
    for a in 0..c {
        for b in a..c {
            let v = f
                .channel(a)
                .iter()
                .zip(f.channel(b))
                .map(|(&p, &q)| p * q)
                .sum::<T>()
                / n;
            g.set(0, a, b, v);
            g.set(0, b, a, v);
        }
    }
    g
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

#[inline]
fn clamp_idx(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

/// Horizontal and vertical Sobel responses of a single-channel tensor with
/// replicated borders.
pub fn sobel<T: Scalar>(lum: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let s = lum.shape();
    let kx = SOBEL_X.map(|r| r.map(T::lit));
    let ky = SOBEL_Y.map(|r| r.map(T::lit));
    let mut gx = Tensor::zeros(Shape::new(1, s.height, s.width));
    let mut gy = Tensor::zeros(Shape::new(1, s.height, s.width));
    for y in 0..s.height {
        for x in 0..s.width {
            let (mut a, mut b) = (T::zero(), T::zero());
            for (dy, (rx, ry)) in kx.iter().zip(&ky).enumerate() {
                let yy = clamp_idx(y as isize + dy as isize - 1, s.height);
                for dx in 0..3 {
                    let xx = clamp_idx(x as isize + dx as isize - 1, s.width);
                    let v = lum.at(0, yy, xx);
                    a += rx[dx] * v;
                    b += ry[dx] * v;
                }
            }
            gx.set(0, y, x, a);
            gy.set(0, y, x, b);
        }
    }
    (gx, gy)
}

/// Adjoint of [`sobel`]: maps gradients on (gx, gy) back to the luma plane.
fn sobel_transpose<T: Scalar>(dgx: &Tensor<T>, dgy: &Tensor<T>) -> Tensor<T> {
    let s = dgx.shape();
    let mut out = Tensor::zeros(s);
    for y in 0..s.height {
        for x in 0..s.width {
            let (a, b) = (dgx.at(0, y, x), dgy.at(0, y, x));
            if a == T::zero() && b == T::zero() {
                continue;
            }
            for dy in 0..3 {
                let yy = clamp_idx(y as isize + dy as isize - 1, s.height);
                for dx in 0..3 {
                    let xx = clamp_idx(x as isize + dx as isize - 1, s.width);
                    let i = out.index(0, yy, xx);
                    out.data_mut()[i] += T::lit(SOBEL_X[dy][dx]) * a + T::lit(SOBEL_Y[dy][dx]) * b;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_, _, _| rng.random_range(-1.0..1.0))
    }

    /// Checks d(sum(r * f(x)))/dx against central differences.
    fn check_input_grad(build: impl Fn(&mut Tape<f64>, NodeId) -> NodeId, shape: Shape) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(shape, &mut rng);
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let out = build(&mut tape, xi);
        let r = random(tape.value(out).shape(), &mut rng);
        let grads = tape.backward(out, r.clone());
        let analytic = grads.get(xi).unwrap().clone();
        let eval = |x: &Tensor<f64>| {
            let mut t = Tape::new();
            let xi = t.leaf(x.clone());
            let o = build(&mut t, xi);
            t.value(o).dot(&r)
        };
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (eval(&xp) - eval(&xm)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (fd - a).abs() <= 1e-6 * (1.0 + fd.abs()),
                "index {i}: fd {fd} vs analytic {a}"
            );
        }
    }

    #[test]
    fn conv_stride_and_padding_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (3, 1, 0)] {
            let w = random(Shape::new(2, 3, k * k), &mut rng);
            let b = random(Shape::new(2, 1, 1), &mut rng);
            check_input_grad(
                |t, x| {
                    let wi = t.leaf(w.clone());
                    let bi = t.leaf(b.clone());
                    t.conv2d(x, wi, Some(bi), k, s, p)
                },
                Shape::new(3, 6, 5),
            );
        }
    }

    #[test]
    fn conv_weight_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(Shape::new(2, 5, 6), &mut rng);
        let w = random(Shape::new(3, 2, 9), &mut rng);
        let r = random(Shape::new(3, 3, 3), &mut rng);
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let wi = tape.leaf(w.clone());
        let o = tape.conv2d(xi, wi, None, 3, 2, 1);
        assert_eq!(tape.value(o).shape(), Shape::new(3, 3, 3));
        let g = tape.backward(o, r.clone());
        let gw = g.get(wi).unwrap();
        for i in 0..w.len() {
            let h = 1e-6;
            let mut wp = w.clone();
            wp.data_mut()[i] += h;
            let mut wm = w.clone();
            wm.data_mut()[i] -= h;
            let fp = conv_forward(&x, &wp, None, 3, 2, 1).dot(&r);
            let fm = conv_forward(&x, &wm, None, 3, 2, 1).dot(&r);
            assert!(((fp - fm) / (2.0 * h) - gw.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn instance_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gamma = random(Shape::new(3, 1, 1), &mut rng);
        let beta = random(Shape::new(3, 1, 1), &mut rng);
        check_input_grad(
            |t, x| {
                let g = t.leaf(gamma.clone());
                let b = t.leaf(beta.clone());
                t.instance_norm(x, g, b)
            },
            Shape::new(3, 4, 4),
        );
    }

    #[test]
    fn pointwise_and_structural_gradients() {
        for kind in [Activation::Silu, Activation::Tanh, Activation::Sigmoid] {
            check_input_grad(|t, x| t.activation(x, kind), Shape::new(2, 3, 3));
        }
        check_input_grad(|t, x| t.upsample2(x), Shape::new(2, 3, 3));
        check_input_grad(|t, x| t.crop(x, 2, 3), Shape::new(2, 4, 4));
        check_input_grad(|t, x| t.gram(x), Shape::new(3, 3, 2));
        check_input_grad(|t, x| t.concat(x, x), Shape::new(2, 3, 3));
        check_input_grad(
            |t, x| {
                let y = t.activation(x, Activation::Tanh);
                t.add(x, y)
            },
            Shape::new(1, 3, 3),
        );
        check_input_grad(|t, x| t.luma_sobel(x), Shape::new(3, 5, 6));
    }

    #[test]
    fn valid_range_matches_brute_force() {
        for len in 1..9usize {
            for stride in 1..3usize {
                for offset in -2isize..3 {
                    let out = len + 2;
                    let (lo, hi) = valid_range(out, len, stride, offset);
                    let brute: Vec<usize> = (0..out)
                        .filter(|&o| {
                            let i = (o * stride) as isize + offset;
                            i >= 0 && i < len as isize
                        })
                        .collect();
                    let got: Vec<usize> = (lo..hi).collect();
                    assert_eq!(got, brute, "len {len} stride {stride} offset {offset}");
                }
            }
        }
    }
}
