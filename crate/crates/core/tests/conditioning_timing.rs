//! Runs alone in its own binary: it compares wall-clock timings.

use std::sync::Arc;
use std::time::Duration;

use restyle::backends::BackendRegistry;
use restyle::config::{GuidanceKind, TrainConfig};
use restyle::distillation::{Canny, GuidanceFunction};
use restyle::synthetic::{scene_dataset, SceneSpec};
use restyle::trainer::{run_conditioning_comparison, KindStatus};
use restyle::ImagePlane;

/// Canny followed by a sleep, standing in for a slow neural extractor.
struct SlowDepth {
    delay: Duration,
}

impl GuidanceFunction<f32> for SlowDepth {
    fn kind(&self) -> GuidanceKind {
        GuidanceKind::Depth
    }

    fn condition(&self, x: &ImagePlane<f32>) -> restyle::Result<ImagePlane<f32>> {
        let c = GuidanceFunction::<f32>::condition(&Canny::default(), x);
        std::thread::sleep(self.delay);
        c
    }

    fn fingerprint(&self) -> String {
        "slow-depth".into()
    }
}

#[test]
fn conditioning_timing_reflects_extractor_cost() {
    let data = scene_dataset::<f32>(&SceneSpec::new(8, 128, 128, vec![0])).unwrap();
    // Median per-frame canny time on this machine.
    let mut samples: Vec<f64> = (0..15)
        .map(|_| {
            let t = std::time::Instant::now();
            for f in &data.frames {
                GuidanceFunction::<f32>::condition(&Canny::default(), f).unwrap();
            }
            t.elapsed().as_secs_f64() / data.len() as f64
        })
        .collect();
    samples.sort_by(f64::total_cmp);
    let canny = samples[samples.len() / 2];
    let mut reg = BackendRegistry::with_toys();
    let delay = Duration::from_secs_f64(9.0 * canny);
    reg.link_guidance("depth", Arc::new(move || Ok(Box::new(SlowDepth { delay }) as _)));
    let kinds = vec!["canny".to_string(), "depth".to_string()];
    let report = run_conditioning_comparison(&data, &TrainConfig {
            width_multiplier: 0.25,
            max_steps: Some(1),
            ..TrainConfig::default()
        }, &reg, &kinds, None).unwrap();
    let ms = |k: usize| match report.rows[k].status {
        KindStatus::Completed { extract_ms_per_frame, .. } => extract_ms_per_frame,
        _ => panic!("row {k} skipped"),
    };
    let ratio = ms(1) / ms(0);
    println!("depth/canny extraction time ratio {ratio:.2}");
    assert!((ratio - 10.0).abs() <= 2.0, "ratio {ratio}");
}

