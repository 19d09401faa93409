//! Training loop: cached GCC features, Adam with step decay, early stopping
//! on eval MAE, best-checkpoint saving.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use tqsel_core::autograd::{Adam, Tape};
use tqsel_core::features::GccFeature;
use tqsel_core::models::{embedding_batch_tensor, gcc_batch_tensor, FrameMode};
use tqsel_core::objectives::{
    circular_mae, emd_loss_batch, encode_doa_target, DoaDistribution, DoaTarget,
};
use tqsel_core::wav::read_wav;

use crate::config::{ExperimentConfig, ModelKind};
use crate::manifest::Manifest;
use crate::model::{
    build_model, frame_input, pooling_matrix, predict_series, predict_static, save_model, Model,
};

pub enum Label {
    Static { gt: f64, dist: DoaDistribution },
    Moving { gt: Vec<f64>, dists: Vec<DoaDistribution> },
}

pub struct Example {
    pub id: String,
    pub feature: GccFeature,
    pub query: Vec<f64>,
    pub label: Label,
}

/// Load a manifest and cache GCC features, query embeddings, and encoded
/// targets for every record.
pub fn load_examples(cfg: &ExperimentConfig, manifest: &Manifest) -> Result<Vec<Example>> {
    manifest
        .records
        .par_iter()
        .map(|r| {
            let w = read_wav(manifest.audio_path(r))
                .with_context(|| format!("audio for {}", r.example_id))?;
            let feature = crate::model::extract_feature(cfg, &w)
                .with_context(|| format!("features for {}", r.example_id))?;
            let query = manifest.query_embedding(r)?.vector;
            let label = if let Some(series) = &r.azimuth_series_deg {
                let dists = series
                    .iter()
                    .map(|&a| {
                        Ok(encode_doa_target(&DoaTarget::with_sigma_sq(a, cfg.sigma_sq)?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Label::Moving { gt: series.clone(), dists }
            } else {
                let a = r.azimuth_deg.unwrap();
                Label::Static {
                    gt: a,
                    dist: encode_doa_target(&DoaTarget::with_sigma_sq(a, cfg.sigma_sq)?),
                }
            };
            Ok(Example { id: r.example_id.clone(), feature, query, label })
        })
        .collect()
}

/// Rebuild the encoded targets with a new variance; used when the config
/// anneals sigma_sq across epochs.
fn re_encode_targets(examples: &mut [Example], sigma_sq: f64) -> Result<()> {
    for ex in examples.iter_mut() {
        match &mut ex.label {
            Label::Static { gt, dist } => {
                *dist = encode_doa_target(&DoaTarget::with_sigma_sq(*gt, sigma_sq)?);
            }
            Label::Moving { gt, dists } => {
                for (d, &a) in dists.iter_mut().zip(gt.iter()) {
                    *d = encode_doa_target(&DoaTarget::with_sigma_sq(a, sigma_sq)?);
                }
            }
        }
    }
    Ok(())
}

fn nan_abort(cfg: &ExperimentConfig, epoch: usize, detail: &str) -> anyhow::Error {
    anyhow::anyhow!(
        "training aborted at epoch {epoch}: {detail}\nseed={}\nconfig:\n{}",
        cfg.seed,
        cfg.serialize()
    )
}

/// Mean per-example circular MAE over a set of cached examples.
pub fn eval_mae(cfg: &ExperimentConfig, model: &Model, examples: &[Example]) -> Result<f64> {
    let errors: Vec<f64> = examples
        .iter()
        .map(|ex| match &ex.label {
            Label::Static { gt, .. } => {
                let pred = predict_static(cfg, model, &ex.feature, &ex.query)?;
                circular_mae(&[pred], &[*gt]).map_err(Into::into)
            }
            Label::Moving { gt, .. } => {
                let pred = predict_series(cfg, model, &ex.feature, &ex.query, gt.len())?;
                circular_mae(&pred, gt).map_err(Into::into)
            }
        })
        .collect::<Result<_>>()?;
    Ok(errors.iter().sum::<f64>() / errors.len() as f64)
}

/// One optimizer step over a batch of static examples through the clip
/// model. Returns the batch loss.
fn clip_batch_step(
    cfg: &ExperimentConfig,
    model: &mut Model,
    adam: &mut Adam,
    examples: &[Example],
    idx: &[usize],
    epoch: usize,
) -> Result<f64> {
    let m = match model {
        Model::Clip(m) => m,
        Model::Frame(_) => unreachable!(),
    };
    let mut tape: Tape<f32> = Tape::new();
    let vars = m.bind(&mut tape);
    let feats: Vec<&GccFeature> = idx.iter().map(|&i| &examples[i].feature).collect();
    let rows: Vec<&[f64]> = idx.iter().map(|&i| examples[i].query.as_slice()).collect();
    let targets: Vec<DoaDistribution> = idx
        .iter()
        .map(|&i| match &examples[i].label {
            Label::Static { dist, .. } => dist.clone(),
            Label::Moving { .. } => unreachable!(),
        })
        .collect();
    let gv = gcc_batch_tensor(&mut tape, &feats)?;
    let qv = embedding_batch_tensor(&mut tape, "query", &rows)?;
    let logits = m.forward(&mut tape, &vars, gv, qv, None)?;
    let loss = emd_loss_batch(&mut tape, logits, &targets)
        .map_err(|e| nan_abort(cfg, epoch, &e.to_string()))?;
    let loss_val = tape.data(loss)[0] as f64;
    if !loss_val.is_finite() {
        return Err(nan_abort(cfg, epoch, &format!("loss is {loss_val}")));
    }
    let grads = tape.backward(loss)?;
    m.set_mut().accumulate(&grads, &vars);
    adam.lr = cfg.lr_at(epoch);
    adam.step(&mut m.set_mut().all_mut())
        .map_err(|e| nan_abort(cfg, epoch, &e.to_string()))?;
    Ok(loss_val)
}

/// One optimizer step over a batch of examples through the frame model,
/// with per-example forward passes and gradient accumulation. Moving labels
/// are matched by pooling per-frame logits into the 10 Hz label windows.
fn frame_batch_step(
    cfg: &ExperimentConfig,
    model: &mut Model,
    adam: &mut Adam,
    examples: &[Example],
    idx: &[usize],
    epoch: usize,
) -> Result<f64> {
    let m = match model {
        Model::Frame(m) => m,
        Model::Clip(_) => unreachable!(),
    };
    let mut batch_loss = 0.0;
    for &i in idx {
        let ex = &examples[i];
        let mut tape: Tape<f32> = Tape::new();
        let vars = m.bind(&mut tape);
        let (data, t, d) = frame_input(&ex.feature);
        if d != m.config.in_dim {
            bail!("feature width {d} does not match model in_dim {}", m.config.in_dim);
        }
        let frames = tape.constant(&[t, d], data)?;
        let loss = match &ex.label {
            Label::Static { dist, .. } => {
                let logits =
                    m.forward(&mut tape, &vars, frames, &ex.query, FrameMode::ClsPooled)?;
                emd_loss_batch(&mut tape, logits, std::slice::from_ref(dist))
            }
            Label::Moving { dists, .. } => {
                let logits =
                    m.forward(&mut tape, &vars, frames, &ex.query, FrameMode::PerFrame)?;
                let pool = pooling_matrix(
                    t,
                    cfg.n_fft,
                    cfg.hop,
                    cfg.sample_rate,
                    cfg.label_hop_s,
                    dists.len(),
                );
                let pool_var = tape.constant(
                    &[dists.len(), t],
                    pool.iter().map(|&v| v as f32).collect(),
                )?;
                let pooled = tape.matmul(pool_var, logits)?;
                emd_loss_batch(&mut tape, pooled, dists)
            }
        }
        .map_err(|e| nan_abort(cfg, epoch, &e.to_string()))?;
        let loss_val = tape.data(loss)[0] as f64;
        if !loss_val.is_finite() {
            return Err(nan_abort(cfg, epoch, &format!("loss is {loss_val}")));
        }
        batch_loss += loss_val;
        // mean over the batch: scale each example's loss before backward
        let scaled = tape.scale(loss, 1.0 / idx.len() as f64);
        let grads = tape.backward(scaled)?;
        m.set.accumulate(&grads, &vars);
    }
    adam.lr = cfg.lr_at(epoch);
    adam.step(&mut m.set.all_mut())
        .map_err(|e| nan_abort(cfg, epoch, &e.to_string()))?;
    Ok(batch_loss / idx.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_eval_mae: f64,
    pub first_epoch_loss: f64,
    pub ckpt_path: PathBuf,
    pub log_path: PathBuf,
}

pub fn train(
    cfg: &ExperimentConfig,
    train_manifest: &Path,
    eval_manifest: &Path,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let train_m = Manifest::load(train_manifest)?;
    let eval_m = Manifest::load(eval_manifest)?;
    if cfg.model == ModelKind::ClipConcat {
        if let Some(r) = train_m
            .records
            .iter()
            .chain(&eval_m.records)
            .find(|r| r.is_moving())
        {
            bail!(
                "clip model cannot train on moving example {}; use model=frame_cross_attn",
                r.example_id
            );
        }
    }
    let mut train_ex = load_examples(cfg, &train_m)?;
    let eval_ex = load_examples(cfg, &eval_m)?;

    let mut model = build_model(cfg)?;
    let mut adam = Adam::new(cfg.lr);

    let mut log = String::from("epoch,lr,train_loss,eval_mae\n");
    let mut best_mae = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_data: Vec<Vec<f32>> = Vec::new();
    let mut since_best = 0usize;
    let mut first_epoch_loss = f64::NAN;
    let mut epochs_run = 0usize;

    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        if cfg.sigma_sq_final.is_some() && epoch > 1 {
            re_encode_targets(&mut train_ex, cfg.sigma_sq_at(epoch))?;
        }
        let mut order: Vec<usize> = (0..train_ex.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(crate::synth::splitmix64(cfg.seed ^ epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut weighted = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let loss = match cfg.model {
                ModelKind::ClipConcat => {
                    clip_batch_step(cfg, &mut model, &mut adam, &train_ex, chunk, epoch)?
                }
                ModelKind::FrameCrossAttn => {
                    frame_batch_step(cfg, &mut model, &mut adam, &train_ex, chunk, epoch)?
                }
            };
            weighted += loss * chunk.len() as f64;
        }
        let train_loss = weighted / train_ex.len() as f64;
        if epoch == 1 {
            first_epoch_loss = train_loss;
        }

        let mae = eval_mae(cfg, &model, &eval_ex)?;
        log.push_str(&format!("{epoch},{},{train_loss},{mae}\n", cfg.lr_at(epoch)));

        if mae < best_mae {
            best_mae = mae;
            best_epoch = epoch;
            since_best = 0;
            best_data = model.set().all().iter().map(|p| p.data.clone()).collect();
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    if best_epoch > 0 {
        let set = model.set_mut();
        for (i, data) in best_data.iter().enumerate() {
            set.param_mut(i).data.copy_from_slice(data);
        }
    }

    let ckpt_path = out_dir.join("model.tqck");
    save_model(&ckpt_path, cfg, &model)?;
    let log_path = out_dir.join("train_log.csv");
    std::fs::write(&log_path, log)?;

    Ok(TrainOutcome {
        epochs_run,
        best_epoch,
        best_eval_mae: best_mae,
        first_epoch_loss,
        ckpt_path,
        log_path,
    })
}

/// Early-stopping bookkeeping exposed for direct testing: returns the epoch
/// training halts on given a sequence of eval MAEs.
pub fn stop_epoch(maes: &[f64], patience: usize) -> usize {
    let mut best = f64::INFINITY;
    let mut since = 0usize;
    for (k, &m) in maes.iter().enumerate() {
        if m < best {
            best = m;
            since = 0;
        } else {
            since += 1;
            if since >= patience {
                return k + 1;
            }
        }
    }
    maes.len()
}
