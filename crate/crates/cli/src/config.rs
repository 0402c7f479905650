//! Training configuration: defaults, then a TOML file, then flags.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use calnet_core::TrainConfig;

/// Flag-level overrides; `None` leaves the file or default value alone.
#[derive(Debug, Default, Clone, clap::Args)]
pub struct Overrides {
    /// Seeds initialization, the split, shuffling, augmentation and dropout.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Square input resolution of the image branch.
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Disable training-time augmentation.
    #[arg(long)]
    pub no_augment: bool,
}

fn table_keys(v: &toml::Value) -> BTreeSet<String> {
    v.as_table().map(|t| t.keys().cloned().collect()).unwrap_or_default()
}

/// Parses a config file. Keys not present in [`TrainConfig`] are rejected
/// so a typo cannot silently fall back to a default.
pub fn parse_file(text: &str) -> Result<TrainConfig> {
    let value: toml::Value = toml::from_str(text).context("config is not valid TOML")?;
    let known = table_keys(&toml::Value::try_from(TrainConfig::default()).expect("config serializes"));
    let unknown: Vec<String> = table_keys(&value).difference(&known).cloned().collect();
    if !unknown.is_empty() {
        bail!("unknown config keys: {}", unknown.join(", "));
    }
    Ok(value.try_into()?)
}

pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<TrainConfig> {
    let mut cfg = match file {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            parse_file(&text).with_context(|| format!("in config {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    if let Some(v) = flags.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = flags.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = flags.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = flags.image_size {
        cfg.arch.image_size = v;
    }
    if flags.no_augment {
        cfg.augment = false;
    }
    cfg.validate()?;
    Ok(cfg)
}
