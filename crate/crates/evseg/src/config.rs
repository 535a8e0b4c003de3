//! TOML run configurations.
//!
//! Every file starts with `schema_version = 1`. Unknown keys are rejected and
//! errors name the offending field (`train.steps`, `grid[2].mode`, ...).
//! Relative paths resolve against the config file's directory.
//!
//! Training (`evseg train --config`):
//!
//! ```toml
//! schema_version = 1
//! data = "samples"            # dataset directory
//! labels = "labels.json"      # optional bundle replacing the samples' labels
//!
//! [network]                   # NetworkConfig; omitted keys keep defaults
//! feature_dim = 32
//!
//! [train]                     # TrainConfig
//! mode = "full"
//! steps = 2000
//! warmup_steps = 500
//! checkpoint_every = 500
//! [train.weights]
//! proto = 0.1
//! ```
//!
//! Ablation (`evseg ablate --grid`): the same `[network]` and `[train]`
//! tables as the base configuration, plus
//!
//! ```toml
//! seeds = [0, 1, 2, 3, 4]
//! confusing_classes = [2, 5]  # optional; smallest-area classes otherwise
//!
//! [benchmark]                 # generate the synthetic benchmark in memory...
//! scenes = 250
//! # ...or read two dataset directories instead:
//! # train_data = "train"
//! # eval_data = "eval"
//!
//! [[grid]]
//! label = "baseline"
//! mode = "baseline"
//!
//! [[grid]]
//! label = "full, th 0.3"
//! mode = "full"
//! threshold = 0.3
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use evseg_core::evaluator::GridCell;
use evseg_core::network::NetworkConfig;
use evseg_core::synth::BenchmarkConfig;
use evseg_core::trainer::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub schema_version: u32,
    pub data: PathBuf,
    #[serde(default)]
    pub labels: Option<PathBuf>,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFile {
    pub schema_version: u32,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub confusing_classes: Option<BTreeSet<u8>>,
    #[serde(default)]
    pub benchmark: Option<BenchmarkConfig>,
    #[serde(default)]
    pub train_data: Option<PathBuf>,
    #[serde(default)]
    pub eval_data: Option<PathBuf>,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub grid: Vec<GridCell>,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

/// Where an ablation's train and held-out splits come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Benchmark(BenchmarkConfig),
    Dirs { train: PathBuf, eval: PathBuf },
}

impl AblationFile {
    pub fn source(&self) -> std::result::Result<DataSource, String> {
        match (&self.benchmark, &self.train_data, &self.eval_data) {
            (Some(b), None, None) => Ok(DataSource::Benchmark(b.clone())),
            (None, Some(t), Some(e)) => Ok(DataSource::Dirs {
                train: t.clone(),
                eval: e.clone(),
            }),
            (None, None, None) => Ok(DataSource::Benchmark(BenchmarkConfig::default())),
            _ => Err("give either `[benchmark]` or both `train_data` and `eval_data`".into()),
        }
    }
}

/// Parses `text`, checking the schema version first.
pub fn parse<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    let table: toml::Table = text.parse().map_err(|e| Error::format(path, e))?;
    match table.get("schema_version") {
        None => return Err(Error::format(path, "missing field `schema_version`")),
        Some(toml::Value::Integer(v)) if *v == i64::from(SCHEMA_VERSION) => {}
        Some(v) => {
            return Err(Error::format(
                path,
                format!("field `schema_version`: unsupported value {v} (expected {SCHEMA_VERSION})"),
            ))
        }
    }
    let de = toml::Deserializer::parse(text).map_err(|e| Error::format(path, e))?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        Error::format(path, format!("field `{field}`: {}", e.into_inner()))
    })
}

fn load<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, path)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn check(path: &Path, section: &str, r: evseg_core::Result<()>) -> Result<()> {
    r.map_err(|e| Error::format(path, format!("[{section}] {e}")))
}

impl TrainFile {
    pub fn load(path: &Path) -> Result<Self> {
        let mut f: TrainFile = load(path)?;
        check(path, "network", f.network.validate())?;
        check(path, "train", f.train.validate())?;
        f.data = resolve(path, &f.data);
        f.labels = f.labels.map(|l| resolve(path, &l));
        Ok(f)
    }
}

impl AblationFile {
    pub fn load(path: &Path) -> Result<Self> {
        let mut f: AblationFile = load(path)?;
        check(path, "network", f.network.validate())?;
        check(path, "train", f.train.validate())?;
        if f.seeds.is_empty() {
            return Err(Error::format(path, "field `seeds`: at least one seed is required"));
        }
        f.source().map_err(|m| Error::format(path, m))?;
        f.train_data = f.train_data.map(|p| resolve(path, &p));
        f.eval_data = f.eval_data.map(|p| resolve(path, &p));
        Ok(f)
    }
}
