use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use srafte_core::artifact::{checksum_hex, read_bytes};

use crate::ConfigError;

/// Append-only log of runs writing into a directory, one JSON object per
/// line. Timestamps live only here.
pub const RUN_LOG: &str = "runs.jsonl";

#[derive(Debug, Serialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub bytes: u64,
    pub checksum: String,
}

impl Artifact {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            bytes: bytes.len() as u64,
            checksum: checksum_hex(&bytes),
        })
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: &'static str,
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub started_unix_s: u64,
    pub wall_time_s: f64,
}

pub struct Run {
    command: &'static str,
    started: Instant,
    started_unix_s: u64,
}

impl Run {
    pub fn start(command: &'static str) -> Self {
        Self {
            command,
            started: Instant::now(),
            started_unix_s: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn finish(
        self,
        out: &Path,
        config: serde_json::Value,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
    ) -> Result<()> {
        let manifest = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            command: self.command.into(),
            args: std::env::args().collect(),
            config,
            inputs: inputs.iter().map(|p| Artifact::of(p)).collect::<Result<_>>()?,
            outputs: outputs.iter().map(|p| Artifact::of(p)).collect::<Result<_>>()?,
            started_unix_s: self.started_unix_s,
            wall_time_s: self.started.elapsed().as_secs_f64(),
        };
        let path = out.join(RUN_LOG);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .with_context(|| format!("opening {}", path.display()))?;
        writeln!(f, "{}", serde_json::to_string(&manifest)?)
            .with_context(|| format!("appending to {}", path.display()))?;
        Ok(())
    }
}

/// Resolves the output directory and refuses to reuse a non-empty one
/// without `force`. Outputs may not land inside any input directory.
pub fn prepare_out(out: Option<&Path>, default_leaf: &str, force: bool, inputs: &[&Path]) -> Result<PathBuf> {
    let dir = match out {
        Some(p) => p.to_path_buf(),
        None => match std::env::var_os("SRAFTE_DATA_DIR") {
            Some(root) => PathBuf::from(root).join(default_leaf),
            None => {
                return Err(ConfigError("no --out given and SRAFTE_DATA_DIR is not set".into()).into())
            }
        },
    };
    if dir.exists() {
        let occupied = std::fs::read_dir(&dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .filter_map(|e| e.ok())
            .any(|e| e.file_name() != RUN_LOG);
        if occupied && !force {
            return Err(ConfigError(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            ))
            .into());
        }
    }
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let canon = dir.canonicalize()?;
    for input in inputs {
        if let Ok(i) = input.canonicalize() {
            let input_dir = if i.is_dir() { i } else { i.parent().map(Path::to_path_buf).unwrap_or(i) };
            if canon == input_dir {
                return Err(ConfigError(format!(
                    "output directory {} coincides with input {}",
                    dir.display(),
                    input.display()
                ))
                .into());
            }
        }
    }
    Ok(dir)
}
