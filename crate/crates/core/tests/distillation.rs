#![allow(clippy::needless_range_loop)]

mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use common::*;
use restyle::backends::{DerivativeTrap, ToyDenoiser, ToyDenoiserKind};
use restyle::config::{GuidanceKind, SdsWeighting};
use restyle::distillation::{
    edge_iou, loss_csds, loss_lineart, mix_noise, mix_noise_at, Canny, ConditionCache, GuidanceFunction,
    GuidedDenoiser, NoiseSchedule, SoftEdges,
};
use restyle::rng::{gaussian, Stream};
use restyle::{Error, ImagePlane, Tensor};

/// Sampling timesteps and cumulative alphas of the default schedule,
/// produced by an independent float64 script (scaled-linear betas over 1000
/// training steps, 30 evenly spaced inference steps, half-to-even rounding).
const TIMESTEPS: [usize; 30] = [
    999, 966, 932, 899, 866, 832, 799, 766, 733, 699, 666, 633, 599, 566, 533, 499, 466, 433, 400, 366, 333, 300,
    266, 233, 200, 166, 133, 100, 67, 33,
];
const ALPHA_BAR: [f64; 30] = [
    0.004660098513077238,
    0.006876341554119448,
    0.010065395095161873,
    0.014298676888235697,
    0.01995040272316076,
    0.027608532013742575,
    0.03719499978868227,
    0.049288644094493364,
    0.0642743362348637,
    0.0831283308658812,
    0.10508046809056672,
    0.1309030910684791,
    0.1617525150051568,
    0.1958982840824945,
    0.23414733941692567,
    0.27766965045646763,
    0.32359614889966576,
    0.3727168862281212,
    0.4244830240309834,
    0.47989920017723,
    0.5349620779284376,
    0.590501058799611,
    0.6473843253575059,
    0.701466517694146,
    0.7536920451608515,
    0.8048504572210783,
    0.8513369499616286,
    0.8942234775865594,
    0.9331511226777164,
    0.968866749728323,
];

#[test]
fn default_schedule_matches_frozen_values() {
    let s = NoiseSchedule::default();
    assert_eq!(s.timesteps, TIMESTEPS);
    for (t, (&got, &want)) in s.alpha_bar.iter().zip(&ALPHA_BAR).enumerate() {
        assert!((got - want).abs() < 1e-6, "t={t}: {got} vs {want}");
    }
}

#[test]
fn schedule_is_monotone_with_noisy_start_and_clean_end() {
    let s = NoiseSchedule::default();
    assert!(s.alpha_bar.windows(2).all(|w| w[0] < w[1]));
    assert!(s.alpha_bar[29] > s.alpha_bar[20] && s.alpha_bar[20] > s.alpha_bar[0]);
    assert!(s.alpha_bar[0] > 0.0 && s.alpha_bar[0] <= 0.05);
    assert!(s.alpha_bar[29] >= 0.95 && s.alpha_bar[29] < 1.0);
    assert!(matches!(s.alpha_bar(30), Err(Error::Contract(_))));
}

#[test]
fn noisiest_step_is_dominated_by_noise() {
    let s = NoiseSchedule::default();
    let y = Tensor::<f64>::full(shape(3, 16, 16), 0.5);
    let eps = gaussian::<f64>(y.shape(), 1, Stream::EvalNoise, 0, 0);
    let z = mix_noise(&y, &eps, &s, 0).unwrap();
    let signal = s.alpha_bar[0].sqrt() * 0.5;
    let noise = z.zip_map(&eps, |a, b| a - b * (1.0 - s.alpha_bar[0]).sqrt()).unwrap();
    assert!(noise.data().iter().all(|v| (v - signal).abs() < 1e-12));
    assert!(signal < 0.05);
}

#[test]
fn mix_examples() {
    let y = Tensor::<f64>::full(shape(3, 4, 4), 0.4);
    let eps = Tensor::<f64>::full(shape(3, 4, 4), 1.0);
    let z = mix_noise_at(&y, &eps, 0.25).unwrap();
    let want = 0.5 * 0.4 + 0.75f64.sqrt();
    assert!(z.data().iter().all(|v| (v - want).abs() < 1e-12));
    assert!((want - 1.0660).abs() < 1e-4);
    assert_eq!(mix_noise_at(&y, &eps, 1.0).unwrap(), y);
    assert_eq!(mix_noise_at(&y, &eps, 0.0).unwrap(), eps);
    let short = Tensor::<f64>::full(shape(3, 4, 3), 1.0);
    assert!(matches!(mix_noise_at(&y, &short, 0.5), Err(Error::Contract(_)) | Err(Error::Dimension(_))));
}

#[test]
fn canny_on_constant_image_is_empty() {
    let img = ImagePlane::<f64>::constant(3, 16, 16, 0.3).unwrap();
    let c = GuidanceFunction::<f64>::condition(&Canny::default(), &img).unwrap();
    assert_eq!(c.channels(), 1);
    assert!(c.tensor().data().iter().all(|&v| v == 0.0));
}

#[test]
fn canny_on_half_split_is_a_one_pixel_line() {
    let img = ImagePlane::<f64>::from_fn(3, 24, 24, |_, _, x| if x < 12 { 0.0 } else { 1.0 }).unwrap();
    let c = GuidanceFunction::<f64>::condition(&Canny::default(), &img).unwrap();
    for y in 0..24 {
        let on: Vec<usize> = (0..24).filter(|&x| c.at(0, y, x) > 0.5).collect();
        assert_eq!(on.len(), 1, "row {y}: {on:?}");
        assert!(on[0] == 11 || on[0] == 12);
    }
}

#[test]
fn soft_edges_match_hand_sobel() {
    // Checkerboard of 2x2 blocks with a bright vertical bar.
    let img = ImagePlane::<f64>::from_fn(3, 8, 8, |c, y, x| {
        let base = if (y / 2 + x / 2) % 2 == 0 { 0.2 } else { 0.7 };
        if x == 5 {
            [0.9, 0.8, 1.0][c]
        } else {
            base * [1.0, 0.8, 0.6][c]
        }
    })
    .unwrap();
    let got = GuidanceFunction::<f64>::condition(&SoftEdges, &img).unwrap();
    let want = sobel_magnitude(&luma(&planes(img.tensor())));
    for y in 0..8 {
        for x in 0..8 {
            assert!((got.at(0, y, x) - want[y][x].min(1.0)).abs() < 1e-6);
        }
    }
    assert_eq!(GuidanceFunction::<f64>::kind(&SoftEdges), GuidanceKind::Toy);
}

struct Counting {
    calls: Arc<AtomicUsize>,
}

impl GuidanceFunction<f64> for Counting {
    fn kind(&self) -> GuidanceKind {
        GuidanceKind::Toy
    }

    fn condition(&self, x: &ImagePlane<f64>) -> restyle::Result<ImagePlane<f64>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        GuidanceFunction::<f64>::condition(&SoftEdges, x)
    }

    fn fingerprint(&self) -> String {
        "counting".into()
    }
}

#[test]
fn condition_cache_computes_each_frame_once() {
    let calls = Arc::new(AtomicUsize::new(0));
    let g = Counting { calls: calls.clone() };
    let mut cache = ConditionCache::new(&g);
    let a = random_image(1, 3, 8, 8);
    let b = random_image(2, 3, 8, 8);
    let first = cache.get_or_compute(0, &a, &g).unwrap().clone();
    assert_eq!(calls.load(Ordering::SeqCst), 1);
    assert_eq!(cache.get_or_compute(0, &a, &g).unwrap(), &first);
    assert_eq!(calls.load(Ordering::SeqCst), 1);
    cache.get_or_compute(1, &b, &g).unwrap();
    cache.get_or_compute(1, &b, &g).unwrap();
    assert_eq!(calls.load(Ordering::SeqCst), 2);
    assert_eq!(cache.len(), 2);
}

fn csds_inputs(seed: u64) -> (Tensor<f64>, ImagePlane<f64>, Tensor<f64>) {
    let y = random_image(seed, 3, 12, 12).into_tensor();
    let cond = GuidanceFunction::<f64>::condition(&Canny::default(), &random_image(seed + 1, 3, 12, 12)).unwrap();
    let eps = gaussian::<f64>(y.shape(), seed, Stream::TrainNoise, 3, 1);
    (y, cond, eps)
}

#[test]
fn oracle_denoiser_gives_exact_zero() {
    let s = NoiseSchedule::default();
    for t in [0, 16, 28, 29] {
        let (y, cond, eps) = csds_inputs(t as u64);
        let mut d = ToyDenoiser::new(ToyDenoiserKind::Oracle);
        let term = loss_csds(&mut d, &s, t, &y, &cond, &eps, SdsWeighting::SqrtAlphaBar).unwrap();
        assert_eq!(term.value, 0.0);
        assert!(term.grad.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn identity_denoiser_on_black_image() {
    let s = NoiseSchedule::default();
    let t = 20;
    let a = s.alpha_bar[t];
    let y = Tensor::<f64>::zeros(shape(3, 8, 8));
    let eps = Tensor::<f64>::full(y.shape(), 1.0);
    let cond = ImagePlane::constant(1, 8, 8, 0.0).unwrap();
    let mut d = ToyDenoiser::new(ToyDenoiserKind::Identity);
    let term = loss_csds(&mut d, &s, t, &y, &cond, &eps, SdsWeighting::Unit).unwrap();
    let r = (1.0 - a).sqrt() - 1.0;
    assert!((term.value - r * r).abs() < 1e-15);
    assert!(term.grad.data().iter().all(|g| (g - r).abs() < 1e-15));
}

#[test]
fn gradient_is_weighted_residual_for_identity_and_structure() {
    let s = NoiseSchedule::default();
    for kind in [ToyDenoiserKind::Identity, ToyDenoiserKind::Structure] {
        for t in [16, 28] {
            let a = s.alpha_bar[t];
            let (y, cond, eps) = csds_inputs(40 + t as u64);
            let mut d = ToyDenoiser::new(kind);
            let term = loss_csds(&mut d, &s, t, &y, &cond, &eps, SdsWeighting::SqrtAlphaBar).unwrap();
            let c = cond.broadcast(3).unwrap();
            let mut sq = 0.0;
            for i in 0..y.len() {
                let z = a.sqrt() * y.data()[i] + (1.0 - a).sqrt() * eps.data()[i];
                let d = match kind {
                    ToyDenoiserKind::Identity => z,
                    _ => (z - a.sqrt() * c.tensor().data()[i]) / (1.0 - a).sqrt(),
                };
                let r = d - eps.data()[i];
                sq += r * r;
                assert!((term.grad.data()[i] - a.sqrt() * r).abs() <= 4.0 * f64::EPSILON * (1.0 + r.abs()));
            }
            assert!(rel_err(term.value, sq / y.len() as f64) < 1e-12);
        }
    }
}

#[test]
fn structure_gradient_points_toward_the_condition() {
    let s = NoiseSchedule::default();
    let t = 28;
    let a = s.alpha_bar[t];
    let y = random_image(3, 3, 16, 16).into_tensor();
    let cond = ImagePlane::<f64>::from_fn(1, 16, 16, |_, _, x| if x < 8 { 0.0 } else { 1.0 }).unwrap();
    let eps = gaussian::<f64>(y.shape(), 3, Stream::TrainNoise, 0, 0);
    let mut d = ToyDenoiser::new(ToyDenoiserKind::Structure);
    let term = loss_csds(&mut d, &s, t, &y, &cond, &eps, SdsWeighting::SqrtAlphaBar).unwrap();
    for c in 0..3 {
        for yy in 0..16 {
            for x in 0..16 {
                let target = cond.at(0, yy, x);
                let closed = a / (1.0 - a).sqrt() * (y.at(c, yy, x) - target);
                assert!((term.grad.at(c, yy, x) - closed).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn descent_on_the_image_converges_to_the_condition() {
    let s = NoiseSchedule::default();
    let t = 28;
    let a = s.alpha_bar[t];
    let lr = 0.5 * (1.0 - a).sqrt() / a.sqrt();
    let cond = ImagePlane::<f64>::from_fn(1, 16, 16, |_, y, x| if (x + y) % 5 < 2 { 1.0 } else { 0.0 }).unwrap();
    let target = cond.broadcast(3).unwrap().into_tensor();
    let mut y = random_image(9, 3, 16, 16).into_tensor();
    let mut d = ToyDenoiser::new(ToyDenoiserKind::Structure);
    let mut steps = 0;
    while y.zip_map(&target, |p, q| p - q).unwrap().max_abs() >= 0.01 {
        assert!(steps < 500, "not converged after 500 steps");
        let eps = gaussian::<f64>(y.shape(), 9, Stream::TrainNoise, steps, 0);
        let term = loss_csds(&mut d, &s, t, &y, &cond, &eps, SdsWeighting::SqrtAlphaBar).unwrap();
        y.axpy(-lr, &term.grad);
        steps += 1;
    }
    assert!(steps <= 500);
}

#[test]
fn distillation_never_asks_for_a_derivative() {
    let s = NoiseSchedule::default();
    for kind in [ToyDenoiserKind::Oracle, ToyDenoiserKind::Identity, ToyDenoiserKind::Structure] {
        let mut d = DerivativeTrap::new(ToyDenoiser::<f64>::new(kind));
        for step in 0..5 {
            let (y, cond, eps) = csds_inputs(step);
            let term = loss_csds(&mut d, &s, 20, &y, &cond, &eps, SdsWeighting::SqrtAlphaBar).unwrap();
            assert!(term.grad.all_finite());
        }
        assert_eq!(d.queries(), 0);
        // The trap itself does poison direct queries.
        let (y, cond, _) = csds_inputs(0);
        let v = d.noise_vjp(&y, &cond, 20, &y).unwrap();
        assert!(v.data().iter().all(|x| x.is_nan()));
        assert_eq!(d.queries(), 1);
    }
}

struct Broken;

impl GuidedDenoiser<f64> for Broken {
    fn name(&self) -> &str {
        "broken"
    }

    fn predict_noise(
        &mut self,
        noisy: &Tensor<f64>,
        _: &ImagePlane<f64>,
        _: usize,
        _: &NoiseSchedule,
    ) -> restyle::Result<Tensor<f64>> {
        Ok(Tensor::full(noisy.shape(), f64::INFINITY))
    }

    fn fingerprint(&self) -> String {
        "broken".into()
    }
}

#[test]
fn csds_errors() {
    let s = NoiseSchedule::default();
    let (y, cond, eps) = csds_inputs(1);
    assert!(matches!(
        loss_csds(&mut Broken, &s, 20, &y, &cond, &eps, SdsWeighting::Unit),
        Err(Error::Backend { .. })
    ));
    let mut d = ToyDenoiser::new(ToyDenoiserKind::Identity);
    assert!(matches!(
        loss_csds(&mut d, &s, 30, &y, &cond, &eps, SdsWeighting::Unit),
        Err(Error::Contract(_))
    ));
}

#[test]
fn lineart_examples() {
    let x = random_image(5, 3, 8, 8);
    let cx = GuidanceFunction::<f64>::condition(&SoftEdges, &x).unwrap();
    let (v, g) = loss_lineart(&SoftEdges, x.tensor(), &cx).unwrap();
    assert_eq!(v, 0.0);
    assert!(g.data().iter().all(|&v| v == 0.0));
    let shifted = x.tensor().map(|v| v + 0.03);
    let (v, _) = loss_lineart(&SoftEdges, &shifted, &cx).unwrap();
    assert!(v.abs() < 1e-24);
    assert!(matches!(loss_lineart(&Canny::default(), x.tensor(), &cx), Err(Error::Config(_))));
}

#[test]
fn lineart_matches_unrolled_reference() {
    let a = ImagePlane::<f64>::from_fn(3, 8, 8, |c, y, x| ((x * 3 + y * 5 + c) % 7) as f64 / 8.0).unwrap();
    let b = ImagePlane::<f64>::from_fn(3, 8, 8, |c, y, x| if (x as i32 - 4).pow(2) + (y as i32 - 3).pow(2) < 6 { 0.9 } else { 0.1 + 0.05 * c as f64 }).unwrap();
    let cb = GuidanceFunction::<f64>::condition(&SoftEdges, &b).unwrap();
    let (v, _) = loss_lineart(&SoftEdges, a.tensor(), &cb).unwrap();
    let ea = sobel_magnitude(&luma(&planes(a.tensor())));
    let eb = sobel_magnitude(&luma(&planes(b.tensor())));
    let mut s = 0.0;
    for y in 0..8 {
        for x in 0..8 {
            s += (ea[y][x] - eb[y][x].min(1.0)).powi(2);
        }
    }
    assert!(rel_err(v, s / 64.0) < 1e-6);
}

#[test]
fn edge_iou_with_tolerance() {
    let line = |x0: usize| ImagePlane::<f64>::from_fn(1, 8, 8, |_, _, x| if x == x0 { 1.0 } else { 0.0 }).unwrap();
    assert_eq!(edge_iou(&line(3), &line(3), 0), 1.0);
    assert_eq!(edge_iou(&line(3), &line(4), 0), 0.0);
    // Dilated by one pixel: columns 2..=4 against 3..=5.
    assert!((edge_iou(&line(3), &line(4), 1) - 0.5).abs() < 1e-12);
}
