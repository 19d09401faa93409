//! Trajectory export: ground truth vs prediction for one moving example.

use std::path::Path;

use anyhow::{bail, Result};

use tqsel_core::wav::read_wav;

use crate::manifest::Manifest;
use crate::model::{extract_feature, load_model, predict_series};

/// Write `frame,gt_deg,pred_deg` CSV rows for a moving example, one row per
/// label frame. Ground truth is copied verbatim from the manifest.
pub fn export_trajectory(
    ckpt: &Path,
    manifest_path: &Path,
    example_id: &str,
    out_csv: &Path,
) -> Result<usize> {
    let (cfg, model) = load_model(ckpt)?;
    let manifest = Manifest::load(manifest_path)?;
    let record = manifest.find(example_id)?;
    let gt = match &record.azimuth_series_deg {
        Some(s) => s,
        None => bail!("example {example_id} is static; trajectory export needs a moving example"),
    };
    let w = read_wav(manifest.audio_path(record))?;
    let feature = extract_feature(&cfg, &w)?;
    let query = manifest.query_embedding(record)?.vector;
    let pred = predict_series(&cfg, &model, &feature, &query, gt.len())?;

    let mut csv = String::from("frame,gt_deg,pred_deg\n");
    for (k, (&g, &p)) in gt.iter().zip(&pred).enumerate() {
        csv.push_str(&format!("{k},{g},{p}\n"));
    }
    std::fs::write(out_csv, csv)?;
    Ok(gt.len())
}
