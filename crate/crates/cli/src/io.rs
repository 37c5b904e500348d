//! File helpers, run manifests and the error type with its exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use moenav::ablation::AblationError;
use moenav::envgraph::{EnvError, NavGraph, WorldFile, WorldParams};
use moenav::metrics::MetricError;
use moenav::policy::PolicyError;
use moenav::trainer::TrainError;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_VALIDATION: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Ablation(#[from] AblationError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Train(TrainError::NonFinite { .. } | TrainError::Policy(PolicyError::NonFinite(_))) => EXIT_NUMERIC,
            CliError::Policy(PolicyError::NonFinite(_)) => EXIT_NUMERIC,
            CliError::Ablation(AblationError::Cell {
                source: TrainError::NonFinite { .. } | TrainError::Policy(PolicyError::NonFinite(_)),
                ..
            }) => EXIT_NUMERIC,
            CliError::Ablation(AblationError::UnknownAxis(_) | AblationError::BadGridValue { .. } | AblationError::EmptyGrid) => {
                EXIT_USAGE
            }
            _ => EXIT_VALIDATION,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(io_err(path))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Parse {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

pub fn to_json_pretty<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("values serialize");
    s.push(b'\n');
    s
}

pub fn to_jsonl<T: Serialize>(rows: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).expect("values serialize");
        out.push(b'\n');
    }
    out
}

pub fn load_world(path: &Path) -> Result<NavGraph, CliError> {
    let file: WorldFile = read_json(path)?;
    NavGraph::from_file(&file, WorldParams::default()).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Serialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

impl Artifact {
    pub fn of(path: &Path) -> Result<Self, CliError> {
        Ok(Artifact {
            path: path.to_path_buf(),
            sha256: hex::encode(Sha256::digest(read_bytes(path)?)),
        })
    }
}

/// One record per command run.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub wall_clock_s: f64,
}

pub struct ManifestBuilder {
    command: String,
    started: Instant,
}

impl ManifestBuilder {
    pub fn start(command: &str) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            started: Instant::now(),
        }
    }

    /// Hashes the listed files and writes the manifest to `dest`, or to stderr when `None`.
    pub fn finish(
        self,
        config: serde_json::Value,
        seed: Option<u64>,
        inputs: &[&Path],
        outputs: &[&Path],
        dest: Option<&Path>,
    ) -> Result<(), CliError> {
        let m = RunManifest {
            command: self.command,
            config,
            seed,
            inputs: inputs.iter().map(|p| Artifact::of(p)).collect::<Result<_, _>>()?,
            outputs: outputs.iter().map(|p| Artifact::of(p)).collect::<Result<_, _>>()?,
            wall_clock_s: self.started.elapsed().as_secs_f64(),
        };
        match dest {
            Some(p) => write_bytes(p, &to_json_pretty(&m)),
            None => {
                eprintln!("{}", serde_json::to_string(&m).expect("manifest serializes"));
                Ok(())
            }
        }
    }
}

/// `<path>.manifest.json` unless overridden.
pub fn manifest_path(explicit: Option<&Path>, primary: &Path) -> PathBuf {
    explicit.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut s = primary.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    })
}
