//! Dataset manifests: one JSON object per line.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use tqsel_core::embed::{embed_text_hashed, load_query_embedding, QueryEmbedding};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestRecord {
    pub example_id: String,
    pub audio: PathBuf,
    pub query_text: String,
    /// Either the literal string "hashed" or a path to a saved embedding.
    pub query_embedding: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_embedding: Option<PathBuf>,
    pub protocol: String,
    /// Ground truth for static targets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub azimuth_deg: Option<f64>,
    /// Ground truth for moving targets, one entry per label frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub azimuth_series_deg: Option<Vec<f64>>,
    pub scene_seed: u64,
    pub split: String,
}

impl ManifestRecord {
    pub fn is_moving(&self) -> bool {
        self.azimuth_series_deg.is_some()
    }
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading manifest {}", path.display()))?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: ManifestRecord = serde_json::from_str(line)
                .with_context(|| format!("{} line {}", path.display(), i + 1))?;
            if r.azimuth_deg.is_some() == r.azimuth_series_deg.is_some() {
                bail!(
                    "{}: example {} must carry exactly one of azimuth_deg / azimuth_series_deg",
                    path.display(),
                    r.example_id
                );
            }
            records.push(r);
        }
        if records.is_empty() {
            bail!("manifest {} is empty", path.display());
        }
        Ok(Self { root, records })
    }

    pub fn audio_path(&self, r: &ManifestRecord) -> PathBuf {
        if r.audio.is_absolute() {
            r.audio.clone()
        } else {
            self.root.join(&r.audio)
        }
    }

    pub fn find(&self, example_id: &str) -> Result<&ManifestRecord> {
        self.records
            .iter()
            .find(|r| r.example_id == example_id)
            .with_context(|| format!("example {example_id} not in manifest"))
    }

    pub fn query_embedding(&self, r: &ManifestRecord) -> Result<QueryEmbedding> {
        if r.query_embedding == "hashed" {
            Ok(embed_text_hashed(&r.query_text)?)
        } else {
            let p = PathBuf::from(&r.query_embedding);
            let p = if p.is_absolute() { p } else { self.root.join(p) };
            Ok(load_query_embedding(p, &r.query_text)?)
        }
    }
}

/// Serialize records to JSONL. Field and record order are fixed, so the same
/// inputs always produce identical bytes.
pub fn manifest_to_string(records: &[ManifestRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    std::fs::write(path.as_ref(), manifest_to_string(records)?)?;
    Ok(())
}
