//! Run-configuration resolution: file, then seed, then `--set` overrides.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use larr::pipeline::RunConfig;
use toml::{Table, Value};

/// Applies one `dotted.key=value` override. Values are parsed as TOML
/// literals, falling back to a bare string.
pub fn apply_override(cfg: &RunConfig, assignment: &str) -> Result<RunConfig> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{assignment}` is not KEY=VALUE"))?;
    let raw = raw.trim();
    if raw.is_empty() {
        bail!("override `{key}` has an empty value");
    }
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let mut root: Table = cfg.to_toml().parse().context("re-reading resolved config")?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut node = &mut root;
    for p in path {
        node = node
            .get_mut(*p)
            .and_then(Value::as_table_mut)
            .ok_or_else(|| anyhow!("unknown config section `{p}` in `{key}`"))?;
    }
    if !node.contains_key(*last) {
        bail!("unknown config key `{key}`");
    }
    node.insert(last.to_string(), value);
    Ok(RunConfig::from_toml(&root.to_string())?)
}

/// Resolves the configuration of a command. Without `--config`, the run
/// directory's stored config is used, or the defaults when there is none
/// and `allow_default` is set.
pub fn resolve(
    file: Option<&Path>,
    stored: &Path,
    allow_default: bool,
    seed: Option<u64>,
    overrides: &[String],
) -> Result<RunConfig> {
    let mut cfg = match file {
        Some(f) => RunConfig::from_toml(&fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?)?,
        None if stored.exists() => RunConfig::from_toml(&fs::read_to_string(stored)?)?,
        None if allow_default => RunConfig::default(),
        None => {
            return Err(larr::LarrError::MissingArtifact {
                path: stored.display().to_string(),
                producer: "gen-data",
            }
            .into())
        }
    };
    if let Some(s) = seed {
        cfg = cfg.seeded(s);
    }
    for o in overrides {
        cfg = apply_override(&cfg, o)?;
    }
    cfg.fusion.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_nested_keys() {
        let base = RunConfig::default();
        let c = apply_override(&base, "fusion.lr=0.01").unwrap();
        assert_eq!(c.fusion.lr, 0.01);
        let c = apply_override(&c, "cache.source=projected").unwrap();
        assert_eq!(c.cache.source, larr::scenecache::VectorSource::Projected);
        let c = apply_override(&c, "fusion.beta=[1.0, 0.0]").unwrap();
        assert_eq!(c.fusion.beta, [1.0, 0.0]);
        assert!(apply_override(&base, "fusion.nope=1").is_err());
        assert!(apply_override(&base, "fusion.lr").is_err());
        assert!(apply_override(&base, "fusion.lr=fast").is_err());
    }
}
