//! Line-delimited JSON persistence for worlds and interaction logs.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{GroundTruth, InteractionRecord, PoiRecord, TruthRow, UserRecord, World, WorldConfig};
use crate::error::{LarrError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldManifest {
    pub format_version: u32,
    pub config: WorldConfig,
    pub n_pois: usize,
    pub n_users: usize,
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn from_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(contents.as_bytes())?;
    Ok(())
}

pub fn save_world(dir: &Path, world: &World) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = WorldManifest {
        format_version: FORMAT_VERSION,
        config: world.config.clone(),
        n_pois: world.pois.len(),
        n_users: world.users.len(),
    };
    write_file(&dir.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;
    write_file(&dir.join("pois.jsonl"), &to_jsonl(&world.pois)?)?;
    write_file(&dir.join("users.jsonl"), &to_jsonl(&world.users)?)?;
    write_file(&dir.join("truth.json"), &serde_json::to_string(&world.truth)?)?;
    Ok(())
}

pub fn load_world(dir: &Path) -> Result<World> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(LarrError::MissingArtifact {
            path: manifest_path.display().to_string(),
            producer: "gen-data",
        });
    }
    let manifest: WorldManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(LarrError::Corrupt(format!(
            "world format version {} unsupported",
            manifest.format_version
        )));
    }
    let pois: Vec<PoiRecord> = from_jsonl(&dir.join("pois.jsonl"))?;
    let users: Vec<UserRecord> = from_jsonl(&dir.join("users.jsonl"))?;
    let truth: GroundTruth = serde_json::from_str(&fs::read_to_string(dir.join("truth.json"))?)?;
    if pois.len() != manifest.n_pois || users.len() != manifest.n_users {
        return Err(LarrError::Corrupt("world record counts disagree with manifest".into()));
    }
    Ok(World {
        config: manifest.config,
        pois,
        users,
        truth,
    })
}

pub fn save_interactions(path: &Path, records: &[InteractionRecord]) -> Result<()> {
    write_file(path, &to_jsonl(records)?)
}

pub fn load_interactions(path: &Path) -> Result<Vec<InteractionRecord>> {
    if !path.exists() {
        return Err(LarrError::MissingArtifact {
            path: path.display().to_string(),
            producer: "gen-data",
        });
    }
    from_jsonl(path)
}

pub fn save_truth_rows(path: &Path, rows: &[TruthRow]) -> Result<()> {
    write_file(path, &to_jsonl(rows)?)
}

pub fn load_truth_rows(path: &Path) -> Result<Vec<TruthRow>> {
    from_jsonl(path)
}
