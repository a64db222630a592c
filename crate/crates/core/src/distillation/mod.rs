//! Score distillation from a frozen, structure-conditioned denoiser.

mod guidance;
mod schedule;

pub use guidance::{condition_digest, edge_iou, Canny, ConditionCache, GuidanceFunction, SoftEdges};
pub use schedule::{mix_noise, mix_noise_at, BetaSchedule, NoiseSchedule, ScheduleConfig};

use crate::autodiff::Tape;
use crate::config::{GuidanceKind, SdsWeighting};
use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A frozen noise predictor conditioned on a structure image. The text
/// prompt is always empty.
pub trait GuidedDenoiser<T: Scalar>: Send {
    fn name(&self) -> &str;

    /// Whether the denoiser was trained on conditions of this kind.
    fn accepts(&self, _kind: GuidanceKind) -> bool {
        true
    }

    /// Noise that produced the next noisy input. Only test doubles use it.
    fn bind_reference_noise(&mut self, _eps: &Tensor<T>) {}

    /// Predicted noise for `noisy` at sampling step `t`.
    fn predict_noise(
        &mut self,
        noisy: &Tensor<T>,
        cond: &ImagePlane<T>,
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<Tensor<T>>;

    /// Vector-Jacobian product through the predictor. The distillation loss
    /// never asks for it.
    fn noise_vjp(
        &mut self,
        _noisy: &Tensor<T>,
        _cond: &ImagePlane<T>,
        _t: usize,
        _upstream: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        Err(Error::Contract(format!("{} exposes no derivative", self.name())))
    }

    fn fingerprint(&self) -> String;
}

/// Value and stop-gradient update direction of the distillation term.
#[derive(Clone, Debug, PartialEq)]
pub struct CsdsTerm<T> {
    /// Mean of the squared residual between predicted and injected noise.
    pub value: T,
    /// `w(t) (d - eps)`, to be added to the gradient of the operator output.
    pub grad: Tensor<T>,
}

pub fn sds_weight(weighting: SdsWeighting, alpha_bar: f64) -> f64 {
    match weighting {
        SdsWeighting::SqrtAlphaBar => alpha_bar.sqrt(),
        SdsWeighting::Unit => 1.0,
    }
}

/// Noises `y_hat` with `eps` at step `t`, queries the denoiser under `cond`
/// and returns the residual-based term. The denoiser is treated as a
/// constant: only its forward pass is evaluated.
#[allow(clippy::too_many_arguments)]
pub fn loss_csds<T: Scalar>(
    d: &mut dyn GuidedDenoiser<T>,
    schedule: &NoiseSchedule,
    t: usize,
    y_hat: &Tensor<T>,
    cond: &ImagePlane<T>,
    eps: &Tensor<T>,
    weighting: SdsWeighting,
) -> Result<CsdsTerm<T>> {
    let alpha_bar = schedule.alpha_bar(t)?;
    if (cond.height(), cond.width()) != (y_hat.shape().height, y_hat.shape().width) {
        return Err(Error::Contract(format!(
            "condition is {}x{}, image is {}x{}",
            cond.width(),
            cond.height(),
            y_hat.shape().width,
            y_hat.shape().height
        )));
    }
    let noisy = mix_noise_at(y_hat, eps, alpha_bar)?;
    d.bind_reference_noise(eps);
    let pred = d.predict_noise(&noisy, cond, t, schedule)?;
    pred.expect_shape(eps.shape())?;
    if !pred.all_finite() {
        return Err(Error::Backend {
            name: d.name().to_string(),
            reason: format!("non-finite noise prediction at step {t}"),
        });
    }
    let residual = pred.zip_map(eps, |a, b| a - b)?;
    let n = T::of_usize(residual.len());
    let value = residual.data().iter().map(|&r| r * r).sum::<T>() / n;
    let grad = residual.scale(T::lit(sds_weight(weighting, alpha_bar)));
    Ok(CsdsTerm { value, grad })
}

/// Mean squared difference between the guidance of `y_hat` and the cached
/// guidance of the source frame, with its gradient through the guidance.
pub fn loss_lineart<T: Scalar>(
    g: &dyn GuidanceFunction<T>,
    y_hat: &Tensor<T>,
    cond_x: &ImagePlane<T>,
) -> Result<(T, Tensor<T>)> {
    let mut tape = Tape::new();
    let input = tape.leaf(y_hat.clone());
    let c = g.record(&mut tape, input).ok_or_else(|| {
        Error::Config(format!(
            "guidance `{}` is not differentiable and cannot drive a direct structure loss",
            g.kind()
        ))
    })?;
    if tape.value(c).shape() != cond_x.shape() {
        return Err(Error::Dimension(format!(
            "guidance output {} does not match condition {}",
            tape.value(c).shape(),
            cond_x.shape()
        )));
    }
    let l = tape.mse_const(c, cond_x.tensor());
    let value = tape.value(l).item();
    let grads = tape.backward(l, Tensor::scalar(T::one()));
    let grad = grads.get(input).cloned().unwrap_or_else(|| Tensor::zeros(y_hat.shape()));
    Ok((value, grad))
}
