//! Model construction, checkpoint I/O, and inference helpers shared by the
//! train, eval, and export commands.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tqsel_core::autograd::{
    entries_to_params, load_checkpoint, params_to_entries, save_checkpoint, Tape,
};
use tqsel_core::features::{gcc_phat_stack, GccFeature};
use tqsel_core::models::{
    embedding_batch_tensor, gcc_batch_tensor, ClipConcatModel, FrameCrossAttnModel, FrameMode,
    FrameModelConfig, SpatialEncoderConfig,
};
use tqsel_core::objectives::decode_argmax;
use tqsel_core::signal::{StftConfig, Waveform};

use crate::config::{ExperimentConfig, ModelKind};

/// Pairs of a 4-mic array.
pub const NUM_PAIRS: usize = 6;

pub enum Model {
    Clip(ClipConcatModel<f32>),
    Frame(FrameCrossAttnModel<f32>),
}

impl Model {
    pub fn set(&self) -> &tqsel_core::models::ParamSet<f32> {
        match self {
            Model::Clip(m) => m.set(),
            Model::Frame(m) => &m.set,
        }
    }

    pub fn set_mut(&mut self) -> &mut tqsel_core::models::ParamSet<f32> {
        match self {
            Model::Clip(m) => m.set_mut(),
            Model::Frame(m) => &mut m.set,
        }
    }
}

pub fn build_model(cfg: &ExperimentConfig) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    match cfg.model {
        ModelKind::ClipConcat => {
            let enc = SpatialEncoderConfig {
                in_channels: NUM_PAIRS,
                blocks: cfg.spatial_channels.iter().map(|&c| (c, 2)).collect(),
                output_dim: tqsel_core::models::SPATIAL_DIM,
            };
            Ok(Model::Clip(ClipConcatModel::new(enc, cfg.use_audio_semantic, &mut rng)))
        }
        ModelKind::FrameCrossAttn => {
            let fc = FrameModelConfig {
                d_model: cfg.d_model,
                heads: cfg.heads,
                d_ff: cfg.d_ff,
                n_enc: cfg.n_enc,
                n_dec: cfg.n_dec,
                causal: cfg.causal,
                ..FrameModelConfig::new(NUM_PAIRS * cfg.num_lags)
            };
            Ok(Model::Frame(FrameCrossAttnModel::new(fc, &mut rng)?))
        }
    }
}

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_os_string();
    s.push(".config");
    PathBuf::from(s)
}

pub fn save_model(ckpt: &Path, cfg: &ExperimentConfig, model: &Model) -> Result<()> {
    let entries = params_to_entries(&model.set().all(), true);
    save_checkpoint(ckpt, &entries)?;
    std::fs::write(sidecar_path(ckpt), cfg.serialize())?;
    Ok(())
}

pub fn load_model(ckpt: &Path) -> Result<(ExperimentConfig, Model)> {
    let sidecar = sidecar_path(ckpt);
    let cfg = ExperimentConfig::load(&sidecar)
        .with_context(|| format!("checkpoint sidecar {}", sidecar.display()))?;
    let mut model = build_model(&cfg)?;
    let entries = load_checkpoint(ckpt)?;
    entries_to_params(&entries, &mut model.set_mut().all_mut())?;
    Ok((cfg, model))
}

pub fn extract_feature(cfg: &ExperimentConfig, w: &Waveform) -> Result<GccFeature> {
    if w.sample_rate() != cfg.sample_rate {
        bail!("audio is {} Hz, config expects {}", w.sample_rate(), cfg.sample_rate);
    }
    let stft = StftConfig::new(cfg.n_fft, cfg.hop)?;
    Ok(gcc_phat_stack(w, stft, cfg.num_lags)?)
}

/// (T, pairs*lags) row-major view of a GCC map for the frame model.
pub fn frame_input(g: &GccFeature) -> (Vec<f32>, usize, usize) {
    let (p, t, f) = (g.num_pairs, g.num_frames, g.num_lags);
    let mut data = Vec::with_capacity(t * p * f);
    for frame in 0..t {
        for pair in 0..p {
            for lag in 0..f {
                data.push(g.value(pair, frame, lag) as f32);
            }
        }
    }
    (data, t, p * f)
}

/// Row-normalized (n_labels, num_frames) matrix averaging STFT frames whose
/// centers fall inside each label window. A window with no frame borrows the
/// nearest frame so every label still gets a prediction.
pub fn pooling_matrix(
    num_frames: usize,
    n_fft: usize,
    hop: usize,
    sample_rate: u32,
    label_hop_s: f64,
    n_labels: usize,
) -> Vec<f64> {
    let mut mat = vec![0.0; n_labels * num_frames];
    let centers: Vec<f64> = (0..num_frames)
        .map(|i| (i * hop + n_fft / 2) as f64 / sample_rate as f64)
        .collect();
    for k in 0..n_labels {
        let (lo, hi) = (k as f64 * label_hop_s, (k as f64 + 1.0) * label_hop_s);
        let row = &mut mat[k * num_frames..(k + 1) * num_frames];
        let mut count = 0usize;
        for (i, &c) in centers.iter().enumerate() {
            if c >= lo && c < hi {
                row[i] = 1.0;
                count += 1;
            }
        }
        if count > 0 {
            for v in row.iter_mut() {
                *v /= count as f64;
            }
        } else {
            let mid = (lo + hi) / 2.0;
            let nearest = centers
                .iter()
                .enumerate()
                .min_by(|a, b| {
                    (a.1 - mid).abs().partial_cmp(&(b.1 - mid).abs()).unwrap()
                })
                .map(|(i, _)| i)
                .unwrap_or(0);
            row[nearest] = 1.0;
        }
    }
    mat
}

/// Single azimuth prediction for a static example.
pub fn predict_static(
    cfg: &ExperimentConfig,
    model: &Model,
    g: &GccFeature,
    query: &[f64],
) -> Result<f64> {
    let mut tape: Tape<f32> = Tape::new();
    match model {
        Model::Clip(m) => {
            let vars = m.bind(&mut tape);
            let gv = gcc_batch_tensor(&mut tape, &[g])?;
            let qv = embedding_batch_tensor(&mut tape, "query", &[query])?;
            let logits = m.forward(&mut tape, &vars, gv, qv, None)?;
            Ok(decode_argmax(tape.data(logits)) as f64)
        }
        Model::Frame(m) => {
            let vars = m.bind(&mut tape);
            let (data, t, d) = frame_input(g);
            if d != m.config.in_dim {
                bail!("feature width {d} does not match model in_dim {}", m.config.in_dim);
            }
            let frames = tape.constant(&[t, d], data)?;
            let logits = m.forward(&mut tape, &vars, frames, query, FrameMode::ClsPooled)?;
            let _ = cfg;
            Ok(decode_argmax(tape.data(logits)) as f64)
        }
    }
}

/// Per-label azimuth series for a moving example: per-frame logits pooled
/// into label windows, then argmax per window.
pub fn predict_series(
    cfg: &ExperimentConfig,
    model: &Model,
    g: &GccFeature,
    query: &[f64],
    n_labels: usize,
) -> Result<Vec<f64>> {
    let m = match model {
        Model::Frame(m) => m,
        Model::Clip(_) => bail!("trajectory prediction needs the frame model"),
    };
    let mut tape: Tape<f32> = Tape::new();
    let vars = m.bind(&mut tape);
    let (data, t, d) = frame_input(g);
    if d != m.config.in_dim {
        bail!("feature width {d} does not match model in_dim {}", m.config.in_dim);
    }
    let frames = tape.constant(&[t, d], data)?;
    let logits = m.forward(&mut tape, &vars, frames, query, FrameMode::PerFrame)?;
    let raw = tape.data(logits);
    let bins = tqsel_core::objectives::NUM_BINS;
    let pool = pooling_matrix(t, cfg.n_fft, cfg.hop, cfg.sample_rate, cfg.label_hop_s, n_labels);
    let mut out = Vec::with_capacity(n_labels);
    for k in 0..n_labels {
        let mut row = vec![0.0f64; bins];
        for i in 0..t {
            let w = pool[k * t + i];
            if w == 0.0 {
                continue;
            }
            for (b, acc) in row.iter_mut().enumerate() {
                *acc += w * raw[i * bins + b] as f64;
            }
        }
        out.push(decode_argmax(&row) as f64);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_rows_sum_to_one_and_cover_all_frames() {
        // 10 s at 16 kHz, 1024/640 STFT: 234 frames, 100 labels.
        let frames = (160_000 - 1024) / 640 + 1;
        let mat = pooling_matrix(frames, 1024, 640, 16_000, 0.1, 100);
        let mut covered = vec![false; frames];
        for k in 0..100 {
            let row = &mat[k * frames..(k + 1) * frames];
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row {k} sums to {s}");
            for (i, &v) in row.iter().enumerate() {
                if v > 0.0 {
                    covered[i] = true;
                }
            }
        }
        // every frame with center inside [0, 10) s is used exactly once
        let used: usize = covered.iter().filter(|&&c| c).count();
        let in_range = (0..frames)
            .filter(|&i| ((i * 640 + 512) as f64 / 16_000.0) < 10.0)
            .count();
        assert_eq!(used, in_range);
    }

    #[test]
    fn empty_label_window_borrows_nearest_frame() {
        // 2 frames but 8 labels: most windows are empty yet still predict.
        let mat = pooling_matrix(2, 1024, 640, 16_000, 0.1, 8);
        for k in 0..8 {
            let s: f64 = mat[k * 2..(k + 1) * 2].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let cfg = ExperimentConfig {
            num_lags: 16,
            spatial_channels: vec![4, 8],
            seed: 3,
            ..ExperimentConfig::default()
        };
        let model = build_model(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("model.tqck");
        save_model(&ckpt, &cfg, &model).unwrap();
        let (cfg2, model2) = load_model(&ckpt).unwrap();
        assert_eq!(cfg2, cfg);

        let g = GccFeature::from_values(
            vec![0.01; NUM_PAIRS * 3 * 16],
            NUM_PAIRS,
            3,
            16,
            25.0,
        )
        .unwrap();
        let q = tqsel_core::embed::embed_text_hashed("dog barking").unwrap();
        let a = predict_static(&cfg, &model, &g, &q.vector).unwrap();
        let b = predict_static(&cfg2, &model2, &g, &q.vector).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn frame_model_round_trip_and_series_shape() {
        let cfg = ExperimentConfig {
            model: ModelKind::FrameCrossAttn,
            num_lags: 8,
            d_model: 16,
            heads: 2,
            d_ff: 24,
            n_enc: 1,
            n_dec: 1,
            seed: 5,
            ..ExperimentConfig::default()
        };
        let model = build_model(&cfg).unwrap();
        let g = GccFeature::from_values(
            vec![0.02; NUM_PAIRS * 6 * 8],
            NUM_PAIRS,
            6,
            8,
            25.0,
        )
        .unwrap();
        let q = tqsel_core::embed::embed_text_hashed("siren wailing").unwrap();
        let series = predict_series(&cfg, &model, &g, &q.vector, 4).unwrap();
        assert_eq!(series.len(), 4);
        for &a in &series {
            assert!((0.0..360.0).contains(&a));
        }
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("frame.tqck");
        save_model(&ckpt, &cfg, &model).unwrap();
        let (cfg2, model2) = load_model(&ckpt).unwrap();
        let series2 = predict_series(&cfg2, &model2, &g, &q.vector, 4).unwrap();
        assert_eq!(series, series2);
    }
}
