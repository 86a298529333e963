//! Config loading, data preparation and the run manifest.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use ssmrec::data::{
    compute_stats, kcore_filter, load_interactions, partition_item_groups, split_dataset, write_id_map,
    DatasetSplit, DatasetStats, ItemGroups,
};
use ssmrec::trainer::TrainConfig;

use crate::DataArgs;

/// A user-input problem detected by the CLI itself (exit code 1).
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Parses and validates a training config. Schema errors carry the path of
/// the offending field, e.g. `loss.temperature`.
pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    let cfg: TrainConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let field = e.path().to_string();
        invalid(format!("{}: at `{field}`: {}", path.display(), e.inner()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub struct Prepared {
    /// Raw ids of the users and items that survived filtering, by dense index.
    pub user_ids: Vec<u64>,
    pub item_ids: Vec<u64>,
    pub stats: DatasetStats,
    pub split: DatasetSplit,
    pub groups: ItemGroups,
}

/// Load, k-core filter, split with the config seed, and group items by
/// training popularity.
pub fn prepare(data: &DataArgs, cfg: &TrainConfig) -> Result<Prepared> {
    let loaded = load_interactions(&data.input, data.format)?;
    let (dataset, user_ids, item_ids) = if cfg.kcore > 1 {
        let core = kcore_filter(&loaded.dataset, cfg.kcore)?;
        if core.dataset.is_empty() {
            return Err(invalid(format!("the {}-core of {} is empty", cfg.kcore, data.input.display())));
        }
        let users = core.kept_users.iter().map(|&u| loaded.user_ids[u]).collect();
        let items = core.kept_items.iter().map(|&i| loaded.item_ids[i]).collect();
        (core.dataset, users, items)
    } else {
        (loaded.dataset, loaded.user_ids, loaded.item_ids)
    };
    let split = split_dataset(&dataset, cfg.split, cfg.seed)?;
    let groups = partition_item_groups(&split.train, cfg.groups)?;
    Ok(Prepared {
        user_ids,
        item_ids,
        stats: compute_stats(&dataset),
        split,
        groups,
    })
}

#[derive(Debug, Serialize)]
pub struct InputRecord {
    pub path: PathBuf,
    pub format: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct OutputRecord {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: &'static str,
    pub inputs: Vec<InputRecord>,
    pub config: TrainConfig,
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    pub outputs: Vec<OutputRecord>,
}

/// Collects artifacts written into one directory and emits the manifest
/// that lists them.
pub struct OutDir {
    root: PathBuf,
    outputs: Vec<OutputRecord>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            outputs: Vec::new(),
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<String> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.record(rel)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<String> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    /// Registers a file some other writer already put under the root.
    pub fn record(&mut self, rel: &str) -> Result<String> {
        let hash = sha256_file(&self.path(rel))?;
        self.outputs.push(OutputRecord {
            path: rel.to_string(),
            sha256: hash.clone(),
        });
        Ok(hash)
    }

    pub fn write_id_maps(&mut self, prepared: &Prepared) -> Result<()> {
        write_id_map(&self.path("user_ids.txt"), &prepared.user_ids)?;
        self.record("user_ids.txt")?;
        write_id_map(&self.path("item_ids.txt"), &prepared.item_ids)?;
        self.record("item_ids.txt")?;
        Ok(())
    }

    pub fn finish(self, command: &str, data: &DataArgs, config: &TrainConfig, seeds: Vec<u64>) -> Result<PathBuf> {
        let manifest = RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION"),
            inputs: vec![InputRecord {
                path: data.input.clone(),
                format: serde_json::to_value(data.format)?.as_str().unwrap_or_default().to_string(),
                sha256: sha256_file(&data.input)?,
            }],
            config_sha256: sha256_hex(serde_json::to_string(config)?.as_bytes()),
            config: config.clone(),
            seeds,
            outputs: self.outputs,
        };
        let path = self.root.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
