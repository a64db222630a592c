use std::sync::Arc;

use restyle::backends::{
    file_fingerprint, Availability, BackendRegistry, Role, Source, ToyDenoiser, ToyDenoiserKind, BACKEND_DIR_ENV,
};
use restyle::config::{GuidanceKind, TrainConfig};
use restyle::Error;

fn artifacts(reg: &BackendRegistry<f32>) -> Vec<(Role, String)> {
    reg.entries()
        .filter(|e| matches!(e.source, Source::Artifact { .. }))
        .map(|e| (e.role, e.name.clone()))
        .collect()
}

#[test]
fn empty_config_gives_only_toys() {
    let reg = BackendRegistry::<f32>::from_config(&TrainConfig::default()).unwrap();
    assert!(artifacts(&reg).is_empty());
    assert!(reg.entries().all(|e| e.source == Source::Toy));
    for (role, name) in [
        (Role::Extractor, "toy"),
        (Role::Denoiser, "oracle"),
        (Role::Denoiser, "identity"),
        (Role::Denoiser, "structure"),
        (Role::Guidance, "canny"),
        (Role::Guidance, "toy"),
    ] {
        assert_eq!(reg.probe(role, name), Availability::Ready, "{name}");
    }
}

#[test]
fn one_configured_denoiser_adds_exactly_one_entry() {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("control_canny.bin");
    std::fs::write(&weights, b"weights").unwrap();
    let mut cfg = TrainConfig::default();
    cfg.set("backend.cn_canny.role", "denoiser").unwrap();
    cfg.set("backend.cn_canny.path", weights.to_str().unwrap()).unwrap();
    cfg.set("backend.cn_canny.range", "-1,1").unwrap();
    cfg.set("backend.cn_canny.latent", "true").unwrap();
    let mut reg = BackendRegistry::<f32>::from_config(&cfg).unwrap();
    assert_eq!(artifacts(&reg), vec![(Role::Denoiser, "cn_canny".to_string())]);
    let entry = reg.entries().find(|e| e.name == "cn_canny").unwrap();
    assert_eq!(
        entry.source,
        Source::Artifact {
            path: weights.clone(),
            range: "-1,1".into(),
            latent: true
        }
    );
    // The file exists but nothing can run it yet.
    assert!(matches!(reg.probe(Role::Denoiser, "cn_canny"), Availability::Unavailable(r) if r.contains("adapter")));
    assert!(matches!(reg.denoiser("cn_canny"), Err(Error::BackendUnavailable { .. })));
    reg.link_denoiser("cn_canny", Arc::new(|| Ok(Box::new(ToyDenoiser::<f32>::new(ToyDenoiserKind::Structure)) as _)));
    assert_eq!(reg.probe(Role::Denoiser, "cn_canny"), Availability::Ready);
    assert!(reg.denoiser("cn_canny").is_ok());
    assert_eq!(file_fingerprint(&weights).unwrap().len(), 64);
}

#[test]
fn wrong_path_is_echoed() {
    let mut cfg = TrainConfig::default();
    cfg.set("backend.vgg.role", "extractor").unwrap();
    cfg.set("backend.vgg.path", "/nonexistent/vgg19.bin").unwrap();
    let reg = BackendRegistry::<f32>::from_config(&cfg).unwrap();
    match reg.probe(Role::Extractor, "vgg") {
        Availability::Unavailable(r) => assert!(r.contains("/nonexistent/vgg19.bin"), "{r}"),
        Availability::Ready => panic!("should be unavailable"),
    }
    match reg.extractor("vgg", 0) {
        Err(Error::BackendUnavailable { name, reason }) => {
            assert_eq!(name, "vgg");
            assert!(reason.contains("/nonexistent/vgg19.bin"));
        }
        _ => panic!("expected unavailable"),
    }
}

#[test]
fn relative_paths_resolve_against_the_backend_dir() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("depth.bin"), b"w").unwrap();
    std::env::set_var(BACKEND_DIR_ENV, dir.path());
    let mut cfg = TrainConfig::default();
    cfg.set("backend.depth.role", "guidance").unwrap();
    cfg.set("backend.depth.path", "depth.bin").unwrap();
    let reg = BackendRegistry::<f32>::from_config(&cfg);
    std::env::remove_var(BACKEND_DIR_ENV);
    let reg = reg.unwrap();
    let e = reg.entries().find(|e| e.name == "depth").unwrap();
    assert_eq!(
        e.source,
        Source::Artifact {
            path: dir.path().join("depth.bin"),
            range: "0,1".into(),
            latent: false
        }
    );
    assert!(matches!(reg.guidance(GuidanceKind::Depth), Err(Error::BackendUnavailable { .. })));
}

#[test]
fn malformed_backend_sections_are_config_errors() {
    let mut cfg = TrainConfig::default();
    cfg.set("backend.x.path", "/tmp/x").unwrap();
    assert!(matches!(BackendRegistry::<f32>::from_config(&cfg), Err(Error::Config(_))));
    cfg.set("backend.x.role", "painter").unwrap();
    assert!(matches!(BackendRegistry::<f32>::from_config(&cfg), Err(Error::Config(_))));
}

#[test]
fn neural_guidance_kinds_need_a_backend() {
    let reg = BackendRegistry::<f32>::with_toys();
    for kind in [GuidanceKind::Lineart, GuidanceKind::Depth, GuidanceKind::Softedge] {
        match reg.guidance(kind) {
            Err(Error::BackendUnavailable { name, .. }) => assert_eq!(name, kind.as_str()),
            _ => panic!("{kind} should be unavailable"),
        }
    }
}

#[test]
fn toy_denoiser_names() {
    assert!(ToyDenoiser::<f32>::named("structure").is_ok());
    assert!(matches!(ToyDenoiser::<f32>::named("ddim"), Err(Error::Config(_))));
}
