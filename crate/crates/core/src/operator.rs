//! The trainable image-to-image stylization network.
//!
//! Encoder/decoder with skip connections and instance normalization:
//!
//! ```text
//! in:   conv3x3(3 -> w0) IN act
//! down: conv3x3/2(w[k-1] -> w[k]) IN act, conv3x3(w[k] -> w[k]) IN act     (k = 1..=levels)
//! res:  conv IN act conv IN, + identity, act                                 (at w[levels])
//! up:   up2x, conv3x3(w[k] -> w[k-1]) IN act, concat skip, conv3x3(2 w[k-1] -> w[k-1]) IN act
//! head: conv1x1(w0 -> 3) + bias [+ logit(x) when pass-through], sigmoid
//! ```
//!
//! Inputs whose sides are not a multiple of the downsampling factor are
//! reflect-padded on the bottom/right and the output is cropped back.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, NodeId, Tape};
use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

const ACT: Activation = Activation::Silu;
/// Clamp applied before the logit of the pass-through path.
const LOGIT_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorArch {
    pub base_width: usize,
    pub levels: usize,
    pub residual_blocks: usize,
    pub width_multiplier: f64,
    /// Adds logit(x) before the output squash so a zero head is the identity.
    pub pass_through: bool,
}

impl Default for OperatorArch {
    fn default() -> Self {
        OperatorArch {
            base_width: 32,
            levels: 3,
            residual_blocks: 1,
            width_multiplier: 1.0,
            pass_through: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// Uniform in +-1/sqrt(fan_in).
    Fan(usize),
    Ones,
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    init: Init,
}

impl OperatorArch {
    pub fn with_width(width_multiplier: f64) -> Self {
        OperatorArch {
            width_multiplier,
            ..Default::default()
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        (0..=self.levels)
            .map(|k| {
                let w = (self.base_width << k) as f64 * self.width_multiplier;
                (w.round() as usize).max(1)
            })
            .collect()
    }

    /// Total spatial downsampling factor.
    pub fn factor(&self) -> usize {
        1 << self.levels
    }

    pub fn layout(&self) -> Vec<ParamSpec> {
        let w = self.widths();
        let mut specs = Vec::new();
        let conv = |specs: &mut Vec<ParamSpec>, name: String, out: usize, inp: usize, k: usize| {
            specs.push(ParamSpec {
                name: format!("{name}.weight"),
                shape: Shape::new(out, inp, k * k),
                init: Init::Fan(inp * k * k),
            });
        };
        let norm = |specs: &mut Vec<ParamSpec>, name: String, c: usize| {
            specs.push(ParamSpec {
                name: format!("{name}.gamma"),
                shape: Shape::new(c, 1, 1),
                init: Init::Ones,
            });
            specs.push(ParamSpec {
                name: format!("{name}.beta"),
                shape: Shape::new(c, 1, 1),
                init: Init::Zeros,
            });
        };
        conv(&mut specs, "in.conv".into(), w[0], 3, 3);
        norm(&mut specs, "in.norm".into(), w[0]);
        for k in 1..=self.levels {
            conv(&mut specs, format!("down{k}.conv1"), w[k], w[k - 1], 3);
            norm(&mut specs, format!("down{k}.norm1"), w[k]);
            conv(&mut specs, format!("down{k}.conv2"), w[k], w[k], 3);
            norm(&mut specs, format!("down{k}.norm2"), w[k]);
        }
        let deep = w[self.levels];
        for r in 0..self.residual_blocks {
            conv(&mut specs, format!("res{r}.conv1"), deep, deep, 3);
            norm(&mut specs, format!("res{r}.norm1"), deep);
            conv(&mut specs, format!("res{r}.conv2"), deep, deep, 3);
            norm(&mut specs, format!("res{r}.norm2"), deep);
        }
        for k in (1..=self.levels).rev() {
            conv(&mut specs, format!("up{k}.conv1"), w[k - 1], w[k], 3);
            norm(&mut specs, format!("up{k}.norm1"), w[k - 1]);
            conv(&mut specs, format!("up{k}.conv2"), w[k - 1], 2 * w[k - 1], 3);
            norm(&mut specs, format!("up{k}.norm2"), w[k - 1]);
        }
        conv(&mut specs, "head.conv".into(), 3, w[0], 1);
        specs.push(ParamSpec {
            name: "head.bias".into(),
            shape: Shape::new(3, 1, 1),
            init: Init::Zeros,
        });
        specs
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|s| s.shape.len()).sum()
    }
}

/// Network weights plus the metadata needed to rebuild them.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorParams<T> {
    pub arch: OperatorArch,
    pub seed: u64,
    pub tensors: Vec<Tensor<T>>,
}

/// Forward pass kept alive for a later backward pass.
pub struct OperatorForward<T> {
    tape: Tape<T>,
    params: Vec<NodeId>,
    output: NodeId,
}

impl<T: Scalar> OperatorForward<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.tape.value(self.output)
    }

    pub fn output_image(&self) -> Result<ImagePlane<T>> {
        ImagePlane::from_tensor_clamped(self.output().clone())
    }

    /// Parameter gradients given the gradient of the objective w.r.t. the
    /// output image.
    pub fn backward(&self, grad_output: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        grad_output.expect_shape(self.output().shape())?;
        let mut grads = self.tape.backward(self.output, grad_output.clone());
        Ok(self
            .params
            .iter()
            .map(|&id| {
                grads
                    .take(id)
                    .unwrap_or_else(|| Tensor::zeros(self.tape.value(id).shape()))
            })
            .collect())
    }
}

impl<T: Scalar> OperatorParams<T> {
    /// Deterministic initialization from `seed`.
    pub fn init(arch: OperatorArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = arch
            .layout()
            .iter()
            .map(|spec| match spec.init {
                Init::Fan(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    Tensor::from_fn(spec.shape, |_, _, _| T::lit(rng.random_range(-bound..bound)))
                }
                Init::Ones => Tensor::full(spec.shape, T::one()),
                Init::Zeros => Tensor::zeros(spec.shape),
            })
            .collect();
        OperatorParams {
            arch,
            seed,
            tensors,
        }
    }

    /// Operator whose output reproduces its input: pass-through enabled and
    /// a zero head.
    pub fn identity(width_multiplier: f64, seed: u64) -> Self {
        let arch = OperatorArch {
            pass_through: true,
            ..OperatorArch::with_width(width_multiplier)
        };
        let mut p = Self::init(arch, seed);
        let n = p.tensors.len();
        for t in &mut p.tensors[n - 2..] {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        p
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (spec, t) in self.arch.layout().iter().zip(&self.tensors) {
            if let Some(i) = t.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Contract(format!(
                    "parameter {}[{i}] is not finite ({})",
                    spec.name,
                    t.data()[i]
                )));
            }
        }
        Ok(())
    }

    /// Checks that the tensors match the architecture layout.
    pub fn check_layout(&self) -> Result<()> {
        let layout = self.arch.layout();
        if layout.len() != self.tensors.len() {
            return Err(Error::Dimension(format!(
                "architecture expects {} tensors, found {}",
                layout.len(),
                self.tensors.len()
            )));
        }
        for (spec, t) in layout.iter().zip(&self.tensors) {
            if spec.shape != t.shape() {
                return Err(Error::Dimension(format!(
                    "{} should be {}, found {}",
                    spec.name,
                    spec.shape,
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> OperatorParams<U> {
        OperatorParams {
            arch: self.arch.clone(),
            seed: self.seed,
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Records a forward pass over `x` for later differentiation.
    pub fn forward(&self, x: &ImagePlane<T>) -> Result<OperatorForward<T>> {
        self.check_finite()?;
        if x.channels() != 3 {
            return Err(Error::Dimension(format!(
                "operator expects 3 channels, got {}",
                x.channels()
            )));
        }
        let (h, w) = (x.height(), x.width());
        let f = self.arch.factor();
        let padded = reflect_pad(x.tensor(), h.div_ceil(f) * f, w.div_ceil(f) * f);
        let mut tape = Tape::new();
        let params: Vec<NodeId> = self.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let mut next = params.iter().copied();
        let mut p = || next.next().expect("layout consumed in order");

        let input = tape.leaf(padded.clone());
        let conv_block = |tape: &mut Tape<T>, x: NodeId, w: NodeId, g: NodeId, b: NodeId, stride| {
            let c = tape.conv2d(x, w, None, 3, stride, 1);
            let n = tape.instance_norm(c, g, b);
            tape.activation(n, ACT)
        };

        let (w0, g0, b0) = (p(), p(), p());
        let mut cur = conv_block(&mut tape, input, w0, g0, b0, 1);
        let mut skips = vec![cur];
        for _ in 1..=self.arch.levels {
            let (w1, g1, b1) = (p(), p(), p());
            cur = conv_block(&mut tape, cur, w1, g1, b1, 2);
            let (w2, g2, b2) = (p(), p(), p());
            cur = conv_block(&mut tape, cur, w2, g2, b2, 1);
            skips.push(cur);
        }
        for _ in 0..self.arch.residual_blocks {
            let (w1, g1, b1) = (p(), p(), p());
            let a = conv_block(&mut tape, cur, w1, g1, b1, 1);
            let (w2, g2, b2) = (p(), p(), p());
            let c = tape.conv2d(a, w2, None, 3, 1, 1);
            let n = tape.instance_norm(c, g2, b2);
            let sum = tape.add(n, cur);
            cur = tape.activation(sum, ACT);
        }
        skips.pop();
        for _ in (1..=self.arch.levels).rev() {
            let up = tape.upsample2(cur);
            let (w1, g1, b1) = (p(), p(), p());
            let a = conv_block(&mut tape, up, w1, g1, b1, 1);
            let skip = skips.pop().expect("one skip per level");
            let cat = tape.concat(a, skip);
            let (w2, g2, b2) = (p(), p(), p());
            cur = conv_block(&mut tape, cat, w2, g2, b2, 1);
        }
        let (hw, hb) = (p(), p());
        let mut head = tape.conv2d(cur, hw, Some(hb), 1, 1, 0);
        if self.arch.pass_through {
            let eps = T::lit(LOGIT_EPS);
            let logit = padded.map(|v| {
                let v = v.max(eps).min(T::one() - eps);
                (v / (T::one() - v)).ln()
            });
            head = tape.add_const(head, &logit);
        }
        let squashed = tape.activation(head, Activation::Sigmoid);
        let output = if (h, w) == (padded.shape().height, padded.shape().width) {
            squashed
        } else {
            tape.crop(squashed, h, w)
        };
        Ok(OperatorForward {
            tape,
            params,
            output,
        })
    }

    /// Inference: stylizes one frame.
    pub fn apply(&self, x: &ImagePlane<T>) -> Result<ImagePlane<T>> {
        self.forward(x)?.output_image()
    }
}

/// Mirror-pads the bottom and right edges (edge sample not repeated).
pub fn reflect_pad<T: Scalar>(t: &Tensor<T>, height: usize, width: usize) -> Tensor<T> {
    let s = t.shape();
    if (s.height, s.width) == (height, width) {
        return t.clone();
    }
    let mirror = |i: usize, len: usize| -> usize {
        if len == 1 {
            return 0;
        }
        let period = 2 * (len - 1);
        let m = i % period;
        if m < len {
            m
        } else {
            period - m
        }
    };
    Tensor::from_fn(Shape::new(s.channels, height, width), |c, y, x| {
        t.at(c, mirror(y, s.height), mirror(x, s.width))
    })
}
