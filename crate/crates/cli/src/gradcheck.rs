//! Finite-difference verification suite behind `tqsel gradcheck`.
//!
//! Every differentiable op gets at least one central-difference check, plus
//! end-to-end checks through both models with the loss on top.

use anyhow::{bail, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tqsel_core::autograd::{grad_check, GradCheckReport, Tape, Var};
use tqsel_core::models::{
    ClipConcatModel, FrameCrossAttnModel, FrameMode, FrameModelConfig, SpatialEncoderConfig,
};
use tqsel_core::objectives::{emd_loss, encode_doa_target, DoaTarget, NUM_BINS};

pub struct CheckResult {
    pub name: &'static str,
    pub report: GradCheckReport,
    pub tol: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.passes(self.tol)
    }
}

fn vals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Run the whole suite. Inputs are seeded so reruns check the same points.
pub fn run_suite() -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x67726164);
    let mut out = Vec::new();
    let tol = 1e-6;
    let h = 1e-5;

    macro_rules! check {
        ($name:literal, $shape:expr, $f:expr) => {{
            let shape: &[usize] = $shape;
            let n: usize = shape.iter().product();
            let x = vals(&mut rng, n);
            let report = grad_check($f, shape, &x, h)?;
            out.push(CheckResult { name: $name, report, tol });
        }};
    }

    check!("add", &[3, 4], |t: &mut Tape<f64>, x: Var| {
        let c = t.constant(&[3, 4], (0..12).map(|i| 0.1 * i as f64).collect())?;
        let s = t.add(x, c)?;
        let m = t.mul(s, s)?;
        Ok(t.sum(m))
    });
    check!("sub", &[3, 4], |t: &mut Tape<f64>, x: Var| {
        let c = t.constant(&[3, 4], vec![0.3; 12])?;
        let s = t.sub(x, c)?;
        let m = t.mul(s, s)?;
        Ok(t.sum(m))
    });
    check!("mul", &[2, 5], |t: &mut Tape<f64>, x: Var| {
        let c = t.constant(&[2, 5], (0..10).map(|i| 0.2 * i as f64 - 0.9).collect())?;
        let m = t.mul(x, c)?;
        let sq = t.mul(m, m)?;
        Ok(t.sum(sq))
    });
    check!("scale", &[7], |t: &mut Tape<f64>, x: Var| {
        let s = t.scale(x, -2.5);
        let m = t.mul(s, s)?;
        Ok(t.sum(m))
    });
    check!("add_bias", &[3, 4], |t: &mut Tape<f64>, x: Var| {
        let b = t.constant(&[4], vec![0.1, -0.2, 0.3, -0.4])?;
        let y = t.add_bias(x, b)?;
        let m = t.mul(y, y)?;
        Ok(t.sum(m))
    });
    check!("matmul_lhs", &[3, 4], |t: &mut Tape<f64>, x: Var| {
        let w = t.constant(&[4, 2], (0..8).map(|i| 0.1 * i as f64 - 0.35).collect())?;
        let y = t.matmul(x, w)?;
        let m = t.mul(y, y)?;
        Ok(t.sum(m))
    });
    check!("matmul_rhs", &[4, 2], |t: &mut Tape<f64>, x: Var| {
        let a = t.constant(&[3, 4], (0..12).map(|i| 0.07 * i as f64 - 0.4).collect())?;
        let y = t.matmul(a, x)?;
        let m = t.mul(y, y)?;
        Ok(t.sum(m))
    });
    check!("matmul_batched", &[2, 3, 4], |t: &mut Tape<f64>, x: Var| {
        let b = t.constant(&[2, 4, 2], (0..16).map(|i| 0.05 * i as f64 - 0.4).collect())?;
        let y = t.matmul(x, b)?;
        let m = t.mul(y, y)?;
        Ok(t.sum(m))
    });
    check!("relu", &[9], |t: &mut Tape<f64>, x: Var| {
        // nudge away from the kink so finite differences stay clean
        let c = t.constant(&[9], vec![0.123; 9])?;
        let s = t.add(x, c)?;
        let r = t.relu(s);
        let m = t.mul(r, r)?;
        Ok(t.sum(m))
    });
    check!("abs", &[9], |t: &mut Tape<f64>, x: Var| {
        let c = t.constant(&[9], vec![0.321; 9])?;
        let s = t.add(x, c)?;
        let a = t.abs(s);
        Ok(t.sum(a))
    });
    check!("softmax", &[2, 6], |t: &mut Tape<f64>, x: Var| {
        let p = t.softmax(x)?;
        let m = t.mul(p, p)?;
        Ok(t.sum(m))
    });
    check!("layer_norm", &[3, 5], |t: &mut Tape<f64>, x: Var| {
        let g = t.constant(&[5], vec![1.1, 0.9, 1.0, 1.2, 0.8])?;
        let b = t.constant(&[5], vec![0.1, -0.1, 0.0, 0.2, -0.2])?;
        let y = t.layer_norm(x, g, b, 1e-5)?;
        let m = t.mul(y, y)?;
        Ok(t.sum(m))
    });
    check!("conv2d_input", &[1, 2, 4, 5], |t: &mut Tape<f64>, x: Var| {
        let w = t.constant(&[3, 2, 3, 3], (0..54).map(|i| 0.03 * i as f64 - 0.8).collect())?;
        let b = t.constant(&[3], vec![0.05, -0.05, 0.1])?;
        let y = t.conv2d(x, w, b, (1, 1), (1, 1))?;
        let m = t.mul(y, y)?;
        Ok(t.sum(m))
    });
    check!("conv2d_strided", &[1, 2, 6, 6], |t: &mut Tape<f64>, x: Var| {
        let w = t.constant(&[2, 2, 3, 3], (0..36).map(|i| 0.04 * i as f64 - 0.7).collect())?;
        let b = t.constant(&[2], vec![0.0, 0.1])?;
        let y = t.conv2d(x, w, b, (2, 2), (1, 1))?;
        let m = t.mul(y, y)?;
        Ok(t.sum(m))
    });
    check!("global_mean_pool", &[2, 3, 4, 5], |t: &mut Tape<f64>, x: Var| {
        let p = t.global_mean_pool(x)?;
        let m = t.mul(p, p)?;
        Ok(t.sum(m))
    });
    check!("mean_last", &[2, 3, 4], |t: &mut Tape<f64>, x: Var| {
        let p = t.mean_last(x)?;
        let m = t.mul(p, p)?;
        Ok(t.sum(m))
    });
    check!("concat", &[2, 3], |t: &mut Tape<f64>, x: Var| {
        let c = t.constant(&[2, 2], vec![0.4, -0.3, 0.2, -0.1])?;
        let y = t.concat(1, &[x, c, x])?;
        let m = t.mul(y, y)?;
        Ok(t.sum(m))
    });
    check!("reshape_permute", &[2, 3, 4], |t: &mut Tape<f64>, x: Var| {
        let p = t.permute(x, &[2, 0, 1])?;
        let r = t.reshape(p, &[4, 6])?;
        let m = t.mul(r, r)?;
        Ok(t.sum(m))
    });
    check!("narrow", &[4, 6], |t: &mut Tape<f64>, x: Var| {
        let n = t.narrow(x, 1, 2, 3)?;
        let m = t.mul(n, n)?;
        Ok(t.sum(m))
    });
    check!("sum", &[11], |t: &mut Tape<f64>, x: Var| {
        let m = t.mul(x, x)?;
        Ok(t.sum(m))
    });
    check!("mean", &[3, 7], |t: &mut Tape<f64>, x: Var| {
        let m = t.mul(x, x)?;
        Ok(t.mean(m))
    });
    check!("attention_q", &[5, 8], |t: &mut Tape<f64>, x: Var| {
        let kv = t.constant(&[6, 8], (0..48).map(|i| 0.02 * i as f64 - 0.5).collect())?;
        let y = t.scaled_dot_product_attention(x, kv, kv)?;
        let m = t.mul(y, y)?;
        Ok(t.sum(m))
    });
    check!("multi_head_cross_attention", &[4, 8], |t: &mut Tape<f64>, x: Var| {
        let kv = t.constant(&[3, 8], (0..24).map(|i| 0.05 * i as f64 - 0.6).collect())?;
        let y = t.multi_head_cross_attention(x, kv, 2)?;
        let m = t.mul(y, y)?;
        Ok(t.sum(m))
    });

    // whole-model checks: gradient of the training loss wrt the GCC input
    let target = encode_doa_target(&DoaTarget::new(123.0).unwrap());
    {
        let mut mrng = ChaCha8Rng::seed_from_u64(41);
        let model: ClipConcatModel<f64> =
            ClipConcatModel::new(SpatialEncoderConfig::tiny(2, 16), false, &mut mrng);
        let q = tqsel_core::embed::embed_text_hashed("dog barking")?.vector;
        let shape = [1usize, 2, 6, 8];
        let n: usize = shape.iter().product();
        let x = vals(&mut rng, n);
        let t2 = target.clone();
        let report = grad_check(
            move |t: &mut Tape<f64>, x: Var| {
                let vars = model.bind(t);
                let qv = tqsel_core::models::embedding_batch_tensor(t, "query", &[q.as_slice()])?;
                let logits = model.forward(t, &vars, x, qv, None)?;
                let row = t.reshape(logits, &[NUM_BINS])?;
                emd_loss(t, row, &t2)
            },
            &shape,
            &x,
            h,
        )?;
        out.push(CheckResult { name: "clip_model_loss", report, tol: 1e-3 });
    }
    {
        let mut mrng = ChaCha8Rng::seed_from_u64(42);
        let cfg = FrameModelConfig {
            d_model: 8,
            heads: 2,
            d_ff: 12,
            n_enc: 1,
            n_dec: 1,
            ..FrameModelConfig::new(10)
        };
        let model: FrameCrossAttnModel<f64> = FrameCrossAttnModel::new(cfg, &mut mrng)?;
        let q = tqsel_core::embed::embed_text_hashed("siren wailing")?.vector;
        let shape = [3usize, 10];
        let x = vals(&mut rng, 30);
        let t2 = target.clone();
        let report = grad_check(
            move |t: &mut Tape<f64>, x: Var| {
                let logits = {
                    let vars = model.bind(t);
                    model.forward(t, &vars, x, &q, FrameMode::ClsPooled)?
                };
                let row = t.reshape(logits, &[NUM_BINS])?;
                emd_loss(t, row, &t2)
            },
            &shape,
            &x,
            h,
        )?;
        out.push(CheckResult { name: "frame_model_loss", report, tol: 1e-3 });
    }

    Ok(out)
}

/// Run the suite and format one line per check; error if anything fails.
pub fn run_and_report() -> Result<String> {
    let results = run_suite()?;
    let mut s = String::new();
    let mut failed = 0;
    for r in &results {
        s.push_str(&format!(
            "{:<28} max_rel_err {:>12.3e}  ({} points)  {}\n",
            r.name,
            r.report.max_rel_err,
            r.report.checked,
            if r.passed() { "ok" } else { "FAIL" }
        ));
        if !r.passed() {
            failed += 1;
        }
    }
    s.push_str(&format!("{} checks, {} failed\n", results.len(), failed));
    if failed > 0 {
        bail!("gradient checks failed:\n{s}");
    }
    Ok(s)
}
