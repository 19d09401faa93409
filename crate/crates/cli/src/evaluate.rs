//! Checkpoint evaluation: per-example circular errors and their mean.

use std::path::Path;

use anyhow::Result;
use serde::Serialize;

use tqsel_core::objectives::circular_mae;

use crate::manifest::Manifest;
use crate::model::load_model;
use crate::train::{eval_mae, load_examples, Example, Label};

#[derive(Debug, Clone, Serialize)]
pub struct PerExample {
    pub example_id: String,
    pub error_deg: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub manifest: String,
    pub num_examples: usize,
    pub mae_deg: f64,
    pub config_hash: String,
    pub per_example: Vec<PerExample>,
}

pub fn evaluate(ckpt: &Path, manifest_path: &Path, report_out: Option<&Path>) -> Result<EvalReport> {
    let (cfg, model) = load_model(ckpt)?;
    let manifest = Manifest::load(manifest_path)?;
    let examples = load_examples(&cfg, &manifest)?;

    let mut per_example = Vec::with_capacity(examples.len());
    for ex in &examples {
        let error_deg = example_error(&cfg, &model, ex)?;
        per_example.push(PerExample { example_id: ex.id.clone(), error_deg });
    }
    let mae_deg =
        per_example.iter().map(|p| p.error_deg).sum::<f64>() / per_example.len() as f64;
    debug_assert!((mae_deg - eval_mae(&cfg, &model, &examples)?).abs() < 1e-9);

    let report = EvalReport {
        manifest: manifest_path.display().to_string(),
        num_examples: per_example.len(),
        mae_deg,
        config_hash: cfg.hash(),
        per_example,
    };
    if let Some(path) = report_out {
        std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}

fn example_error(
    cfg: &crate::config::ExperimentConfig,
    model: &crate::model::Model,
    ex: &Example,
) -> Result<f64> {
    match &ex.label {
        Label::Static { gt, .. } => {
            let pred = crate::model::predict_static(cfg, model, &ex.feature, &ex.query)?;
            Ok(circular_mae(&[pred], &[*gt])?)
        }
        Label::Moving { gt, .. } => {
            let pred =
                crate::model::predict_series(cfg, model, &ex.feature, &ex.query, gt.len())?;
            Ok(circular_mae(&pred, gt)?)
        }
    }
}
