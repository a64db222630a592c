use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use log::{info, warn};
use restyle::backends::{file_fingerprint, BackendRegistry};
use restyle::config::{GuidanceKind, TrainConfig};
use restyle::dataset::{load_dataset, FrameDataset, Severity};
use restyle::operator::OperatorParams;
use restyle::trainer::{
    run_ablation, run_conditioning_comparison, run_grid, run_lineart_baseline, Frozen, RunOptions,
    Trainer,
};
use restyle::{checkpoint, stream, Error, ImagePlane, Result};

use crate::manifest::RunManifest;

/// Dataset and configuration flags shared by `train` and the experiments.
#[derive(clap::Args, Debug, Clone)]
pub struct DataArgs {
    /// Directory of input frames (PNG, ordered by file name).
    #[arg(long)]
    pub frames: PathBuf,
    /// Directory of stylized keyframes; file stems match their frames.
    #[arg(long)]
    pub keyframes: PathBuf,
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Override a configuration key, e.g. `--set max_steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

pub struct Prepared {
    pub config: TrainConfig,
    pub registry: BackendRegistry<f32>,
    pub data: FrameDataset<f32>,
    pub manifest: RunManifest,
}

fn load_config(args: &DataArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::load(&args.config)?;
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads configuration, backends and data, and opens the manifest. The
/// manifest is written before anything that can fail on the data.
pub fn prepare(args: &DataArgs) -> Result<Prepared> {
    let config = load_config(args)?;
    let mut manifest = RunManifest::begin(&args.out, config.to_kv_string(), Some(config.seed))?;
    let result = (|| {
        let registry = BackendRegistry::from_config(&config)?;
        let frozen = Frozen::resolve(&config, &registry)?;
        let f = frozen.fingerprints();
        manifest.backends.insert("extractor".into(), f.extractor);
        manifest.backends.insert("denoiser".into(), f.denoiser);
        manifest.backends.insert("guidance".into(), f.guidance);
        let data = load_dataset::<f32>(&args.frames, &args.keyframes, config.resolution)?;
        for v in data.validate() {
            match v.severity {
                Severity::Warning => warn!("{v}"),
                Severity::Error => eprintln!("violation: {v}"),
            }
        }
        manifest.dataset_fingerprint = Some(data.fingerprint());
        manifest.write()?;
        Ok((registry, data))
    })();
    match result {
        Ok((registry, data)) => Ok(Prepared {
            config,
            registry,
            data,
            manifest,
        }),
        Err(e) => {
            manifest.finish(Err(&e))?;
            Err(e)
        }
    }
}

/// Runs `body` and records its outcome and artifacts in the manifest.
pub fn finish(mut p: Prepared, body: impl FnOnce(&mut Prepared) -> Result<Vec<PathBuf>>) -> Result<Vec<PathBuf>> {
    let outcome = body(&mut p);
    match &outcome {
        Ok(paths) => {
            p.manifest.artifacts = paths.clone();
            p.manifest.finish(Ok(()))?;
        }
        Err(e) => p.manifest.finish(Err(e))?,
    }
    outcome
}

pub fn train(args: &DataArgs) -> Result<PathBuf> {
    let p = prepare(args)?;
    let out = args.out.clone();
    let paths = finish(p, |p| {
        let mut trainer = Trainer::new(p.config.clone(), p.data.clone(), &p.registry)?;
        let summary = trainer.run(RunOptions {
            out_dir: Some(out.clone()),
            ..RunOptions::default()
        })?;
        let selected = summary
            .selected
            .checkpoint
            .clone()
            .ok_or_else(|| Error::Checkpoint("selected evaluation has no checkpoint".into()))?;
        info!(
            "selected step {} (total {:.6}) after {} steps",
            summary.selected.row.step, summary.selected.row.total, summary.steps
        );
        let mut paths = vec![selected, out.join("trace.csv"), out.join("evaluations.csv")];
        paths.extend(summary.evaluations.iter().filter_map(|e| e.checkpoint.clone()));
        paths.dedup();
        Ok(paths)
    })?;
    Ok(paths[0].clone())
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn load_model(path: &Path) -> Result<OperatorParams<f32>> {
    let (params, meta) = checkpoint::load::<f32>(path)?;
    info!("loaded {} (step {}, {} parameters)", path.display(), meta.step, meta.param_count);
    Ok(params)
}

pub fn stylize_dir(model: &Path, frames: &Path, out: &Path) -> Result<usize> {
    let params = load_model(model)?;
    let mut manifest = RunManifest::begin(out, String::new(), None)?;
    manifest.backends.insert("model".into(), file_fingerprint(model)?);
    manifest.write()?;
    let result = (|| {
        let files = list_pngs(frames)?;
        if files.is_empty() {
            return Err(Error::Contract(format!("no PNG frames in {}", frames.display())));
        }
        let mut written = Vec::with_capacity(files.len());
        for f in &files {
            let x = ImagePlane::<f32>::load_png(f)?;
            let y = params.apply(&x)?;
            let dst = out.join(f.file_name().expect("listed files have names"));
            y.save_png(&dst)?;
            written.push(dst);
        }
        Ok(written)
    })();
    match result {
        Ok(written) => {
            let n = written.len();
            manifest.artifacts = written;
            manifest.finish(Ok(()))?;
            Ok(n)
        }
        Err(e) => {
            manifest.finish(Err(&e))?;
            Err(e)
        }
    }
}

pub fn stylize_pipe(model: &Path) -> Result<u64> {
    let params = load_model(model)?;
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    let mut input = BufReader::new(stdin.lock());
    let mut output = BufWriter::new(stdout.lock());
    stream::stylize_stream(&params, &mut input, &mut output)
}

pub fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse `{s}` in {what} list")))
        })
        .collect()
}

pub fn ablate(args: &DataArgs) -> Result<PathBuf> {
    let out = args.out.clone();
    let paths = finish(prepare(args)?, |p| {
        let report = run_ablation(&p.data, &p.config, &p.registry, Some(&out))?;
        for r in &report.rows {
            info!("{}: selected total {:.6}, structure {:.3}", r.name, r.selected_total, r.structure_score);
        }
        Ok(vec![out.join("report.json")])
    })?;
    Ok(paths[0].clone())
}

pub fn grid(args: &DataArgs, lambda_c: &str, t: &str) -> Result<PathBuf> {
    let lambdas: Vec<f64> = parse_list(lambda_c, "lambda-c")?;
    let ts: Vec<usize> = parse_list(t, "t")?;
    let out = args.out.clone();
    let paths = finish(prepare(args)?, |p| {
        let report = run_grid(&p.data, &p.config, &p.registry, &lambdas, &ts, Some(&out))?;
        for c in &report.cells {
            match c.structure_score() {
                Some(s) => info!("lambda_c={:e} t={}: structure {s:.3}", c.lambda_c, c.t_index),
                None => warn!("lambda_c={:e} t={}: failed", c.lambda_c, c.t_index),
            }
        }
        Ok(vec![out.join("report.json")])
    })?;
    Ok(paths[0].clone())
}

pub fn conditioning(args: &DataArgs, kinds: Option<&str>) -> Result<PathBuf> {
    let kinds: Vec<String> = match kinds {
        Some(k) => k.split(',').map(|s| s.trim().to_string()).collect(),
        None => GuidanceKind::ALL.iter().map(|k| k.as_str().to_string()).collect(),
    };
    let out = args.out.clone();
    let paths = finish(prepare(args)?, |p| {
        run_conditioning_comparison(&p.data, &p.config, &p.registry, &kinds, Some(&out))?;
        Ok(vec![out.join("report.json")])
    })?;
    Ok(paths[0].clone())
}

pub fn lineart_baseline(args: &DataArgs) -> Result<PathBuf> {
    let out = args.out.clone();
    let paths = finish(prepare(args)?, |p| {
        let report = run_lineart_baseline(&p.data, &p.config, &p.registry, Some(&out))?;
        info!("selected total {:.6}, structure {:.3}", report.selected_total, report.structure_score);
        Ok(vec![out.join("report.json")])
    })?;
    Ok(paths[0].clone())
}
