use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::*;
use crate::embed::embed_text_hashed;
use crate::features::GccFeature;
use crate::objectives::{emd_loss, encode_doa_target, DoaTarget};

fn toy_feature(rng: &mut StdRng, pairs: usize, frames: usize, lags: usize) -> GccFeature {
    let values: Vec<f64> = (0..pairs * frames * lags).map(|_| rng.gen_range(-1.0..1.0)).collect();
    GccFeature::from_values(values, pairs, frames, lags, 25.0).unwrap()
}

fn unit_embedding(text: &str) -> Vec<f64> {
    embed_text_hashed(text).unwrap().vector
}

#[test]
fn spatial_encoder_outputs_512() {
    let mut rng = StdRng::seed_from_u64(1);
    let enc = SpatialEncoder::<f64>::new(SpatialEncoderConfig::new(6), &mut rng);
    let g = toy_feature(&mut rng, 6, 8, 96);
    let mut tape = Tape::new();
    let vars = enc.set.bind_all(&mut tape);
    let x = gcc_batch_tensor(&mut tape, &[&g]).unwrap();
    let out = enc.forward_clip(&mut tape, &vars, x).unwrap();
    assert_eq!(tape.shape(out), &[1, 512]);
    assert!(tape.data(out).iter().all(|v| v.is_finite()));
}

#[test]
fn zero_feature_is_deterministic() {
    let mut rng = StdRng::seed_from_u64(2);
    let enc = SpatialEncoder::<f64>::new(SpatialEncoderConfig::tiny(2, 16), &mut rng);
    let zeros = GccFeature::from_values(vec![0.0; 2 * 4 * 8], 2, 4, 8, 25.0).unwrap();
    let run = || {
        let mut tape = Tape::new();
        let vars = enc.set.bind_all(&mut tape);
        let x = gcc_batch_tensor(&mut tape, &[&zeros]).unwrap();
        let out = enc.forward_clip(&mut tape, &vars, x).unwrap();
        tape.data(out).to_vec()
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
    assert!(a.iter().all(|v| v.is_finite()));
}

#[test]
fn encoder_is_sensitive_to_pair_order() {
    let mut rng = StdRng::seed_from_u64(3);
    let enc = SpatialEncoder::<f64>::new(SpatialEncoderConfig::tiny(3, 16), &mut rng);
    let g = toy_feature(&mut rng, 3, 4, 8);
    // swap the first two pair slabs
    let mut swapped = g.values.to_vec();
    let slab = 4 * 8;
    for i in 0..slab {
        swapped.swap(i, slab + i);
    }
    let swapped = GccFeature::from_values(swapped, 3, 4, 8, 25.0).unwrap();
    let run = |feat: &GccFeature| {
        let mut tape = Tape::new();
        let vars = enc.set.bind_all(&mut tape);
        let x = gcc_batch_tensor(&mut tape, &[feat]).unwrap();
        let out = enc.forward_clip(&mut tape, &vars, x).unwrap();
        tape.data(out).to_vec()
    };
    let a = run(&g);
    let b = run(&swapped);
    let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
    assert!(diff > 1e-9, "encoder ignored channel order");
}

#[test]
fn clip_model_logits_shape_and_purity() {
    let mut rng = StdRng::seed_from_u64(4);
    let model = ClipConcatModel::<f64>::new(SpatialEncoderConfig::tiny(2, 16), false, &mut rng);
    let g = toy_feature(&mut rng, 2, 4, 8);
    let q = unit_embedding("dog barking");
    let run = || {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let x = gcc_batch_tensor(&mut tape, &[&g]).unwrap();
        let t = embedding_batch_tensor(&mut tape, "query", &[&q]).unwrap();
        let o = model.forward(&mut tape, &vars, x, t, None).unwrap();
        assert_eq!(tape.shape(o), &[1, 360]);
        tape.data(o).to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn clip_model_reacts_to_query_swap() {
    let mut rng = StdRng::seed_from_u64(5);
    let model = ClipConcatModel::<f64>::new(SpatialEncoderConfig::tiny(2, 16), false, &mut rng);
    let g = toy_feature(&mut rng, 2, 4, 8);
    let qa = unit_embedding("dog barking");
    let qb = unit_embedding("siren wailing");
    let run = |q: &[f64]| {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let x = gcc_batch_tensor(&mut tape, &[&g]).unwrap();
        let t = embedding_batch_tensor(&mut tape, "query", &[q]).unwrap();
        let o = model.forward(&mut tape, &vars, x, t, None).unwrap();
        tape.data(o).to_vec()
    };
    let a = run(&qa);
    let b = run(&qb);
    let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
    assert!(diff > 1e-9, "logits ignored the query embedding");
}

#[test]
fn clip_model_flag_mismatch_is_an_error() {
    let mut rng = StdRng::seed_from_u64(6);
    let model = ClipConcatModel::<f64>::new(SpatialEncoderConfig::tiny(2, 16), true, &mut rng);
    let g = toy_feature(&mut rng, 2, 4, 8);
    let q = unit_embedding("dog barking");
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let x = gcc_batch_tensor(&mut tape, &[&g]).unwrap();
    let t = embedding_batch_tensor(&mut tape, "query", &[&q]).unwrap();
    assert!(model.forward(&mut tape, &vars, x, t, None).is_err());
}

#[test]
fn non_unit_embedding_rejected_at_boundary() {
    let mut tape = Tape::<f64>::new();
    let bad = vec![0.5; EMBED_DIM];
    assert!(embedding_batch_tensor(&mut tape, "query", &[&bad]).is_err());
}

fn tiny_frame_config(causal: bool) -> FrameModelConfig {
    FrameModelConfig {
        in_dim: 2 * 8,
        d_model: 16,
        heads: 2,
        d_ff: 24,
        n_enc: 1,
        n_dec: 1,
        causal,
    }
}

fn frames_tensor(tape: &mut Tape<f64>, g: &GccFeature) -> Var {
    // (L, T, F) -> (T, L*F) row-major frame tokens
    let (l, t, f) = (g.num_pairs, g.num_frames, g.num_lags);
    let mut data = vec![0.0; t * l * f];
    for li in 0..l {
        for ti in 0..t {
            for fi in 0..f {
                data[ti * l * f + li * f + fi] = g.value(li, ti, fi);
            }
        }
    }
    tape.constant(&[t, l * f], data).unwrap()
}

#[test]
fn frame_model_preserves_frame_count() {
    let mut rng = StdRng::seed_from_u64(7);
    let model = FrameCrossAttnModel::<f64>::new(tiny_frame_config(false), &mut rng).unwrap();
    let g = toy_feature(&mut rng, 2, 5, 8);
    let q = unit_embedding("dog barking");
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let x = frames_tensor(&mut tape, &g);
    let o = model.forward(&mut tape, &vars, x, &q, FrameMode::PerFrame).unwrap();
    assert_eq!(tape.shape(o), &[5, 360]);
}

#[test]
fn frame_model_cls_mode_is_single_row() {
    let mut rng = StdRng::seed_from_u64(8);
    let model = FrameCrossAttnModel::<f64>::new(tiny_frame_config(false), &mut rng).unwrap();
    let g = toy_feature(&mut rng, 2, 5, 8);
    let q = unit_embedding("dog barking");
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let x = frames_tensor(&mut tape, &g);
    let o = model.forward(&mut tape, &vars, x, &q, FrameMode::ClsPooled).unwrap();
    assert_eq!(tape.shape(o), &[1, 360]);
}

#[test]
fn frame_model_rejects_bad_head_split() {
    let mut rng = StdRng::seed_from_u64(9);
    let mut cfg = tiny_frame_config(false);
    cfg.heads = 3;
    assert!(FrameCrossAttnModel::<f64>::new(cfg, &mut rng).is_err());
}

#[test]
fn causal_frame_model_is_truncation_equivariant() {
    let mut rng = StdRng::seed_from_u64(10);
    let model = FrameCrossAttnModel::<f64>::new(tiny_frame_config(true), &mut rng).unwrap();
    let g = toy_feature(&mut rng, 2, 6, 8);
    let q = unit_embedding("dog barking");

    let full = {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let x = frames_tensor(&mut tape, &g);
        let o = model.forward(&mut tape, &vars, x, &q, FrameMode::PerFrame).unwrap();
        tape.data(o).to_vec()
    };
    // keep only the first 4 frames
    let (l, f) = (g.num_pairs, g.num_lags);
    let mut short_vals = vec![0.0; l * 4 * f];
    for li in 0..l {
        for ti in 0..4 {
            for fi in 0..f {
                short_vals[(li * 4 + ti) * f + fi] = g.value(li, ti, fi);
            }
        }
    }
    let short = GccFeature::from_values(short_vals, l, 4, f, 25.0).unwrap();
    let trunc = {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let x = frames_tensor(&mut tape, &short);
        let o = model.forward(&mut tape, &vars, x, &q, FrameMode::PerFrame).unwrap();
        tape.data(o).to_vec()
    };
    for i in 0..4 * 360 {
        assert!(
            (full[i] - trunc[i]).abs() < 1e-9,
            "frame logits changed after truncation at flat index {i}"
        );
    }
}

/// Numerically check d(loss)/d(theta) for a random subset of parameter
/// coordinates against the tape gradient.
fn spot_check_param_grads<M, FL>(model: &mut M, loss_of: FL, picks: usize, seed: u64)
where
    M: HasParams,
    FL: Fn(&M) -> (f64, Vec<Vec<f64>>),
{
    let (_, analytic) = loss_of(model);
    let mut rng = StdRng::seed_from_u64(seed);
    let h = 1e-5;
    let num_params = analytic.len();
    for _ in 0..picks {
        let pi = rng.gen_range(0..num_params);
        if analytic[pi].is_empty() {
            continue;
        }
        let ei = rng.gen_range(0..analytic[pi].len());
        let (fp, fm);
        {
            let orig = nudge(model, pi, ei, h, &loss_of);
            fp = orig.0;
            fm = orig.1;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[pi][ei];
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        assert!(
            ((a - numeric) / denom).abs() <= 1e-4,
            "param {pi} elem {ei}: analytic {a} vs numeric {numeric}"
        );
    }
}

fn nudge<M, FL>(model: &mut M, pi: usize, ei: usize, h: f64, loss_of: &FL) -> (f64, f64)
where
    M: HasParams,
    FL: Fn(&M) -> (f64, Vec<Vec<f64>>),
{
    let (fp, fm);
    {
        let delta = h;
        adjust(model, pi, ei, delta);
        fp = loss_of(model).0;
        adjust(model, pi, ei, -2.0 * delta);
        fm = loss_of(model).0;
        adjust(model, pi, ei, delta);
    }
    (fp, fm)
}

// Both models expose their ParamSet; route the adjustment through a trait.
trait HasParams {
    fn param_data_mut(&mut self, pi: usize) -> &mut Vec<f64>;
}

impl HasParams for ClipConcatModel<f64> {
    fn param_data_mut(&mut self, pi: usize) -> &mut Vec<f64> {
        &mut self.set_mut().param_mut(pi).data
    }
}

impl HasParams for FrameCrossAttnModel<f64> {
    fn param_data_mut(&mut self, pi: usize) -> &mut Vec<f64> {
        &mut self.set.param_mut(pi).data
    }
}

fn adjust<M: HasParams>(model: &mut M, pi: usize, ei: usize, delta: f64) {
    model.param_data_mut(pi)[ei] += delta;
}

#[test]
fn end_to_end_gradients_clip_model() {
    let mut rng = StdRng::seed_from_u64(11);
    let mut model = ClipConcatModel::<f64>::new(SpatialEncoderConfig::tiny(2, 16), false, &mut rng);
    let g = toy_feature(&mut rng, 2, 4, 8);
    let q = unit_embedding("dog barking");
    let y = encode_doa_target(&DoaTarget::new(45.0).unwrap());

    let loss_of = move |m: &ClipConcatModel<f64>| {
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape);
        let x = gcc_batch_tensor(&mut tape, &[&g]).unwrap();
        let t = embedding_batch_tensor(&mut tape, "query", &[&q]).unwrap();
        let o = m.forward(&mut tape, &vars, x, t, None).unwrap();
        let row = tape.reshape(o, &[360]).unwrap();
        let loss = emd_loss(&mut tape, row, &y).unwrap();
        let grads = tape.backward(loss).unwrap();
        let per_param: Vec<Vec<f64>> = vars
            .iter()
            .map(|&v| grads.wrt(v).map(|s| s.to_vec()).unwrap_or_default())
            .collect();
        (tape.value_scalar(loss), per_param)
    };
    spot_check_param_grads(&mut model, loss_of, 25, 99);
}

#[test]
fn end_to_end_gradients_frame_model() {
    let mut rng = StdRng::seed_from_u64(12);
    let mut model = FrameCrossAttnModel::<f64>::new(tiny_frame_config(false), &mut rng).unwrap();
    let g = toy_feature(&mut rng, 2, 4, 8);
    let q = unit_embedding("glass breaking");
    let y = encode_doa_target(&DoaTarget::new(300.0).unwrap());

    let loss_of = move |m: &FrameCrossAttnModel<f64>| {
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape);
        let (l, t, f) = (g.num_pairs, g.num_frames, g.num_lags);
        let mut data = vec![0.0; t * l * f];
        for li in 0..l {
            for ti in 0..t {
                for fi in 0..f {
                    data[ti * l * f + li * f + fi] = g.value(li, ti, fi);
                }
            }
        }
        let x = tape.constant(&[t, l * f], data).unwrap();
        let o = m.forward(&mut tape, &vars, x, &q, FrameMode::ClsPooled).unwrap();
        let row = tape.reshape(o, &[360]).unwrap();
        let loss = emd_loss(&mut tape, row, &y).unwrap();
        let grads = tape.backward(loss).unwrap();
        let per_param: Vec<Vec<f64>> = vars
            .iter()
            .map(|&v| grads.wrt(v).map(|s| s.to_vec()).unwrap_or_default())
            .collect();
        (tape.value_scalar(loss), per_param)
    };
    spot_check_param_grads(&mut model, loss_of, 25, 101);
}
