//! On-disk layout of a training run.
//!
//! ```text
//! <root>/config.txt        configuration copy
//! <root>/trace.csv         one row per optimizer step
//! <root>/evaluations.csv   full-sum evaluations
//! <root>/checkpoints/      improving checkpoints, step_XXXXXXXX.ckpt
//! <root>/snapshots/        probe stylizations at wall-clock marks
//! <root>/report.json
//! ```

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::TrainConfig;
use crate::error::{Error, Result};

use super::selection::TraceRow;

pub struct RunDir {
    root: PathBuf,
    trace: BufWriter<File>,
    evaluations: BufWriter<File>,
}

impl RunDir {
    pub fn create(root: &Path, config: &TrainConfig) -> Result<Self> {
        for d in [root.to_path_buf(), root.join("checkpoints"), root.join("snapshots")] {
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let cfg = root.join("config.txt");
        std::fs::write(&cfg, config.to_kv_string()).map_err(|e| Error::io(&cfg, e))?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            let p = root.join(name);
            let mut w = BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?);
            writeln!(w, "{}", TraceRow::CSV_HEADER).map_err(|e| Error::io(&p, e))?;
            Ok(w)
        };
        Ok(RunDir {
            root: root.to_path_buf(),
            trace: open("trace.csv")?,
            evaluations: open("evaluations.csv")?,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn trace_path(&self) -> PathBuf {
        self.root.join("trace.csv")
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("step_{step:08}.ckpt"))
    }

    pub fn snapshot_path(&self, mark_minutes: f64) -> PathBuf {
        self.root.join("snapshots").join(format!("mark_{mark_minutes}min.png"))
    }

    pub fn append_trace(&mut self, row: &TraceRow) -> Result<()> {
        writeln!(self.trace, "{}", row.to_csv()).map_err(|e| Error::io(self.root.join("trace.csv"), e))
    }

    pub fn append_evaluation(&mut self, row: &TraceRow) -> Result<()> {
        writeln!(self.evaluations, "{}", row.to_csv())
            .map_err(|e| Error::io(self.root.join("evaluations.csv"), e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.trace.flush().map_err(|e| Error::io(self.trace_path(), e))?;
        self.evaluations
            .flush()
            .map_err(|e| Error::io(self.root.join("evaluations.csv"), e))
    }
}

/// Writes `value` as pretty JSON to `<dir>/report.json`.
pub fn write_report<S: Serialize>(dir: &Path, value: &S) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("report.json");
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Contract(format!("report: {e}")))?;
    crate::checkpoint::write_atomic(&path, text.as_bytes())?;
    Ok(path)
}
