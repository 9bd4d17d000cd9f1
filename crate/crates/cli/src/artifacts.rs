//! Artifact files in a run directory and their lineage manifests.
//!
//! Every artifact `name` is accompanied by `name.manifest.json`, recording
//! its content digest and the digests of the artifacts it was built from.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use larr::digest::sha256_hex;
use larr::LarrError;
use serde::{Deserialize, Serialize};

pub const DATA: &str = "data";
pub const LM: &str = "lm.ckpt";
pub const EMBEDDER: &str = "embedder.ckpt";
pub const CACHE: &str = "scene.cache";
pub const FUSION: &str = "fusion.ckpt";

/// Files making up the data artifact, hashed in this order.
pub const DATA_FILES: [&str; 5] = [
    "world/manifest.json",
    "world/pois.jsonl",
    "world/users.jsonl",
    "world/truth.json",
    "interactions.jsonl",
];

pub fn producer(name: &str) -> &'static str {
    match name {
        DATA => "gen-data",
        LM => "pretrain",
        EMBEDDER => "finetune",
        CACHE => "build-cache",
        FUSION => "train",
        _ => "gen-data",
    }
}

pub fn build_id() -> String {
    option_env!("LARR_BUILD_ID")
        .map(str::to_string)
        .unwrap_or_else(|| format!("larr-{}", env!("CARGO_PKG_VERSION")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub sha256: String,
    pub inputs: BTreeMap<String, String>,
    pub config_digest: String,
    pub seed: u64,
    pub build: String,
    /// Free-form producer details (variant, corpus, vector source).
    #[serde(default)]
    pub detail: BTreeMap<String, String>,
}

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn manifest_path(&self, name: &str) -> PathBuf {
        self.root.join(format!("{name}.manifest.json"))
    }

    /// Content digest of an artifact as it is on disk now.
    pub fn content_digest(&self, name: &str) -> Result<String> {
        if name == DATA {
            let mut bytes = Vec::new();
            for f in DATA_FILES {
                bytes.extend(fs::read(self.path(DATA).join(f)).map_err(|_| missing(self, name))?);
            }
            return Ok(sha256_hex(&bytes));
        }
        Ok(sha256_hex(&fs::read(self.path(name)).map_err(|_| missing(self, name))?))
    }

    pub fn write_manifest(&self, name: &str, mut m: Manifest) -> Result<Manifest> {
        m.sha256 = self.content_digest(name)?;
        fs::write(self.manifest_path(name), serde_json::to_string_pretty(&m)? + "\n")?;
        Ok(m)
    }

    pub fn manifest(&self, name: &str) -> Result<Manifest> {
        let p = self.manifest_path(name);
        let text = fs::read_to_string(&p).map_err(|_| missing(self, name))?;
        Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?)
    }

    /// Checks that `name` is intact and that every recorded input still has
    /// the digest it had when `name` was produced, recursively.
    pub fn verify(&self, name: &str) -> Result<Manifest> {
        let m = self.manifest(name)?;
        let found = self.content_digest(name)?;
        if found != m.sha256 {
            return Err(LarrError::DigestMismatch {
                what: "artifact content",
                expected: m.sha256.clone(),
                found,
            })
            .with_context(|| format!("{name} was modified after `{}` wrote it", producer(name)));
        }
        for (input, digest) in &m.inputs {
            let up = self.verify(input)?;
            if &up.sha256 != digest {
                return Err(LarrError::DigestMismatch {
                    what: "upstream artifact",
                    expected: digest.clone(),
                    found: up.sha256,
                })
                .with_context(|| format!("{name} was built from a different {input}; rerun `{}`", producer(name)));
            }
        }
        Ok(m)
    }
}

fn missing(dir: &RunDir, name: &str) -> anyhow::Error {
    LarrError::MissingArtifact {
        path: dir.path(name).display().to_string(),
        producer: producer(name),
    }
    .into()
}
