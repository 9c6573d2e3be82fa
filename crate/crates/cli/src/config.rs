//! Loading run configurations from TOML files.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use cellfed_core::federation::RunConfig;

/// Keys every configuration file must set explicitly.
pub const REQUIRED_KEYS: [&str; 2] = ["clients", "max_rounds"];

/// Parses a configuration, applying defaults for every key except
/// [`REQUIRED_KEYS`]. Unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let table: toml::Table = text
        .parse()
        .map_err(|e| anyhow!("config is not valid TOML: {e}"))?;
    for key in REQUIRED_KEYS {
        if !table.contains_key(key) {
            bail!("missing required field `{key}`");
        }
    }
    let cfg: RunConfig = toml::from_str(text).map_err(|e| anyhow!("invalid config: {e}"))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads and parses `path`. Relative dataset paths are resolved against
/// the directory holding the file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text =
        fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut cfg = parse_config(&text).with_context(|| format!("in {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    for p in [
        &mut cfg.idx_train_images,
        &mut cfg.idx_train_labels,
        &mut cfg.idx_test_images,
        &mut cfg.idx_test_labels,
    ]
    .into_iter()
    .flatten()
    {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok(cfg)
}

/// Applies command-line overrides and re-validates.
pub fn apply_overrides(
    cfg: &mut RunConfig,
    seed: Option<u64>,
    arm: Option<cellfed_core::federation::Arm>,
) -> Result<()> {
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(arm) = arm {
        cfg.set_arm(arm);
    }
    cfg.validate()?;
    Ok(())
}
