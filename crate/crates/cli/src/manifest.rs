use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use restyle::checkpoint::write_atomic;
use restyle::Result;
use serde::Serialize;

pub const FILE_NAME: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Running,
    Completed,
    Failed,
}

/// Everything needed to rerun a command: the argument vector, the effective
/// configuration, the dataset hash and the frozen backend identities.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config: String,
    pub dataset_fingerprint: Option<String>,
    pub backends: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    pub status: Status,
    pub error: Option<String>,
    pub artifacts: Vec<PathBuf>,
    #[serde(skip)]
    dir: PathBuf,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl RunManifest {
    /// Creates `dir` and writes the manifest with status `running`.
    pub fn begin(dir: &Path, config: String, seed: Option<u64>) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| restyle::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let m = RunManifest {
            command: std::env::args().collect(),
            config,
            dataset_fingerprint: None,
            backends: BTreeMap::new(),
            seed,
            started_unix: now(),
            finished_unix: None,
            status: Status::Running,
            error: None,
            artifacts: Vec::new(),
            dir: dir.to_path_buf(),
        };
        m.write()?;
        Ok(m)
    }

    pub fn write(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(&self.dir.join(FILE_NAME), text.as_bytes())
    }

    pub fn finish(&mut self, outcome: std::result::Result<(), &restyle::Error>) -> Result<()> {
        self.finished_unix = Some(now());
        match outcome {
            Ok(()) => self.status = Status::Completed,
            Err(e) => {
                self.status = Status::Failed;
                self.error = Some(e.to_string());
            }
        }
        self.write()
    }
}
