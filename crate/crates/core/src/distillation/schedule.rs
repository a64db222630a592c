//! Discrete noise schedule of the frozen denoiser and the noise mix.

use crate::config::SCHEDULE_STEPS;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BetaSchedule {
    Linear,
    /// Linear in sqrt(beta).
    ScaledLinear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub train_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub beta_schedule: BetaSchedule,
    pub sampling_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            train_timesteps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
            beta_schedule: BetaSchedule::ScaledLinear,
            sampling_steps: SCHEDULE_STEPS,
        }
    }
}

/// Cumulative signal fractions indexed by sampling step: step 0 is the
/// noisiest, the last step the cleanest.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub config: ScheduleConfig,
    /// Training timestep of each sampling step.
    pub timesteps: Vec<usize>,
    pub alpha_bar: Vec<f64>,
}

fn linspace(start: f64, stop: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![start];
    }
    let step = (stop - start) / (n - 1) as f64;
    let mut v: Vec<f64> = (0..n).map(|i| start + step * i as f64).collect();
    v[n - 1] = stop;
    v
}

/// Round half to even, matching the reference sampler's timestep rounding.
fn round_even(v: f64) -> f64 {
    let r = v.round();
    if (v - v.trunc()).abs() == 0.5 {
        2.0 * (v / 2.0).round()
    } else {
        r
    }
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let n = config.train_timesteps;
        if n < 2 || config.sampling_steps == 0 || config.sampling_steps > n {
            return Err(Error::Config(format!(
                "invalid schedule: {} sampling steps over {n} training timesteps",
                config.sampling_steps
            )));
        }
        if !(config.beta_start > 0.0 && config.beta_start < config.beta_end && config.beta_end < 1.0) {
            return Err(Error::Config("betas must satisfy 0 < start < end < 1".into()));
        }
        let betas: Vec<f64> = match config.beta_schedule {
            BetaSchedule::Linear => linspace(config.beta_start, config.beta_end, n),
            BetaSchedule::ScaledLinear => linspace(config.beta_start.sqrt(), config.beta_end.sqrt(), n)
                .into_iter()
                .map(|b| b * b)
                .collect(),
        };
        let mut cum = Vec::with_capacity(n);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            cum.push(acc);
        }
        let m = config.sampling_steps;
        let mut timesteps: Vec<usize> = linspace(0.0, (n - 1) as f64, m + 1)
            .into_iter()
            .map(|v| round_even(v) as usize)
            .collect();
        timesteps.reverse();
        timesteps.truncate(m);
        let alpha_bar = timesteps.iter().map(|&t| cum[t]).collect();
        Ok(NoiseSchedule {
            config,
            timesteps,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or_else(|| {
            Error::Contract(format!("step {t} outside the {}-step schedule", self.steps()))
        })
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::new(ScheduleConfig::default()).expect("default schedule is valid")
    }
}

/// `sqrt(a) y + sqrt(1 - a) eps` for a cumulative signal fraction `a`.
pub fn mix_noise_at<T: Scalar>(y: &Tensor<T>, eps: &Tensor<T>, alpha_bar: f64) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::Contract(format!("alpha_bar {alpha_bar} outside [0, 1]")));
    }
    let s = T::lit(alpha_bar.sqrt());
    let n = T::lit((1.0 - alpha_bar).sqrt());
    y.zip_map(eps, |a, e| s * a + n * e)
}

/// Noisy version of `y` at sampling step `t`.
pub fn mix_noise<T: Scalar>(y: &Tensor<T>, eps: &Tensor<T>, schedule: &NoiseSchedule, t: usize) -> Result<Tensor<T>> {
    mix_noise_at(y, eps, schedule.alpha_bar(t)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn endpoints_of_the_mix() {
        let y = Tensor::full(Shape::new(1, 2, 2), 0.7f64);
        let e = Tensor::full(Shape::new(1, 2, 2), -1.3f64);
        assert_eq!(mix_noise_at(&y, &e, 1.0).unwrap(), y);
        assert_eq!(mix_noise_at(&y, &e, 0.0).unwrap(), e);
        assert!(mix_noise_at(&y, &e, 1.5).is_err());
    }

    #[test]
    fn step_range_is_checked() {
        let s = NoiseSchedule::default();
        assert!(s.alpha_bar(29).is_ok());
        assert!(matches!(s.alpha_bar(30), Err(Error::Contract(_))));
    }

    #[test]
    fn half_way_rounding() {
        assert_eq!(round_even(166.5), 166.0);
        assert_eq!(round_even(499.5), 500.0);
        assert_eq!(round_even(832.5), 832.0);
        assert_eq!(round_even(2.4), 2.0);
    }
}
