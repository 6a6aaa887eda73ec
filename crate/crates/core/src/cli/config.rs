//! Run configuration files (TOML) and run manifests (JSON).
//!
//! ```toml
//! schema_version = 1
//!
//! [data]
//! series = "series.csv"      # relative paths resolve against the config file
//! graph = "graph.csv"        # required for graph-aware aggregators
//! symmetrize = true
//! # binarize_threshold = 0.1
//! # interval_min = 5
//!
//! [run]                      # every key optional; defaults shown
//! mode = "federated"         # federated | centralized | local_only
//! rounds = 5
//! local_epochs = 3
//! batch_size = 128
//! seed = 0
//! worker_count = 1
//! # clip_norm = 5.0
//! [run.adam]
//! lr = 1e-3
//! [run.aggregator]
//! kind = "graphfedavg"       # fedavg | graphfedavg | mpfedavg
//! hops = 1
//! alpha = 0.8
//! [run.arch]
//! hidden_dim = 100
//! [run.windows]
//! convention = "timesteps"   # timesteps | windows
//! stride = 1
//!
//! [output]
//! dir = "runs/latest"
//! checkpoint_every = 0       # also checkpoint every k rounds; the final round always is
//! dump_params = false
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fedsim::FedConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub series: PathBuf,
    #[serde(default)]
    pub graph: Option<PathBuf>,
    #[serde(default = "yes")]
    pub symmetrize: bool,
    #[serde(default)]
    pub binarize_threshold: Option<f64>,
    /// Expected sampling interval; checked against the series header when set.
    #[serde(default)]
    pub interval_min: Option<u32>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub checkpoint_every: usize,
    pub dump_params: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/latest"),
            checkpoint_every: 0,
            dump_params: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub schema_version: u32,
    pub data: DataSection,
    #[serde(default)]
    pub run: FedConfig,
    #[serde(default)]
    pub output: OutputSection,
}

impl TrainConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text)
            .map_err(|e| Error::Config(format!("{}: {}", origin.display(), e.message())))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "{}: schema_version {} is not supported (expected {SCHEMA_VERSION})",
                origin.display(),
                cfg.schema_version
            )));
        }
        cfg.run.validate()?;
        Ok(cfg)
    }

    /// Loads a config and resolves its relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.series);
        if let Some(g) = &mut self.data.graph {
            fix(g);
        }
        fix(&mut self.output.dir);
    }
}

/// Everything needed to rerun a training job: the fully resolved config plus digests
/// of its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: TrainConfig,
    pub series_sha256: String,
    pub graph_sha256: Option<String>,
}

impl RunManifest {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        Ok(Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.run.seed,
            config_hash: config.run.hash(),
            config: config.clone(),
            series_sha256: file_digest(&config.data.series)?,
            graph_sha256: config.data.graph.as_deref().map(file_digest).transpose()?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Fails when an input file changed since the manifest was written.
    pub fn verify_inputs(&self) -> Result<()> {
        let check = |path: &Path, want: &str| -> Result<()> {
            if file_digest(path)? != want {
                return Err(Error::Integrity {
                    path: path.to_path_buf(),
                    msg: "input changed since the manifest was written".into(),
                });
            }
            Ok(())
        };
        check(&self.config.data.series, &self.series_sha256)?;
        if let (Some(g), Some(d)) = (&self.config.data.graph, &self.graph_sha256) {
            check(g, d)?;
        }
        Ok(())
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
