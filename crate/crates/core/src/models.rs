//! Query-conditioned localization networks.
//!
//! Two fusion styles over GCC-PHAT features and 512-d semantic embeddings:
//! a clip-level model that concatenates pooled spatial and semantic vectors
//! before a linear classifier, and a frame-level transformer whose decoder
//! cross-attends from frame tokens to the text embedding. Both emit logits
//! over 360 azimuth bins; the loss applies the softmax.

use rand::Rng;

use crate::autograd::{Element, Grads, Parameter, Tape, Var};
use crate::embed::{is_unit_norm, EMBED_DIM};
use crate::error::{Error, Result};
use crate::features::GccFeature;
use crate::objectives::NUM_BINS;

pub const SPATIAL_DIM: usize = 512;

/// Flat, ordered collection of model parameters.
#[derive(Debug, Clone)]
pub struct ParamSet<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Element> ParamSet<T> {
    fn new() -> Self {
        Self { params: Vec::new() }
    }

    fn add(&mut self, p: Parameter<T>) -> usize {
        self.params.push(p);
        self.params.len() - 1
    }

    pub fn bind_all(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| p.bind(tape)).collect()
    }

    pub fn accumulate(&mut self, grads: &Grads<T>, vars: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            p.accumulate(grads, v);
        }
    }

    pub fn all(&self) -> Vec<&Parameter<T>> {
        self.params.iter().collect()
    }

    pub fn all_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.params.iter_mut().collect()
    }

    pub fn param_mut(&mut self, i: usize) -> &mut Parameter<T> {
        &mut self.params[i]
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }
}

fn check_embedding(name: &str, v: &[f64]) -> Result<()> {
    if v.len() != EMBED_DIM {
        return Err(Error::ShapeMismatch { expected: vec![EMBED_DIM], got: vec![v.len()] });
    }
    if !is_unit_norm(v) {
        return Err(Error::InvalidArgument(format!("{name} embedding is not unit-norm")));
    }
    Ok(())
}

/// Stack GCC features into a constant (N, L, T, F) tensor.
pub fn gcc_batch_tensor<T: Element>(tape: &mut Tape<T>, feats: &[&GccFeature]) -> Result<Var> {
    let first = feats.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (l, t, f) = (first.num_pairs, first.num_frames, first.num_lags);
    let mut data = Vec::with_capacity(feats.len() * l * t * f);
    for g in feats {
        if g.num_pairs != l || g.num_frames != t || g.num_lags != f {
            return Err(Error::ShapeMismatch {
                expected: vec![l, t, f],
                got: vec![g.num_pairs, g.num_frames, g.num_lags],
            });
        }
        data.extend(g.values.iter().map(|&x| T::of(x)));
    }
    tape.constant(&[feats.len(), l, t, f], data)
}

/// Constant (N, 512) tensor from embedding rows.
pub fn embedding_batch_tensor<T: Element>(
    tape: &mut Tape<T>,
    name: &str,
    rows: &[&[f64]],
) -> Result<Var> {
    let mut data = Vec::with_capacity(rows.len() * EMBED_DIM);
    for r in rows {
        check_embedding(name, r)?;
        data.extend(r.iter().map(|&x| T::of(x)));
    }
    tape.constant(&[rows.len(), EMBED_DIM], data)
}

#[derive(Debug, Clone)]
pub struct SpatialEncoderConfig {
    pub in_channels: usize,
    pub blocks: Vec<(usize, usize)>,
    pub output_dim: usize,
}

impl SpatialEncoderConfig {
    pub fn new(in_channels: usize) -> Self {
        Self {
            in_channels,
            blocks: vec![(32, 2), (64, 2), (128, 2), (256, 2)],
            output_dim: SPATIAL_DIM,
        }
    }

    /// Small stack for tests and gradient checks.
    pub fn tiny(in_channels: usize, output_dim: usize) -> Self {
        Self { in_channels, blocks: vec![(4, 2), (8, 2)], output_dim }
    }
}

struct StageIdx {
    conv_w: usize,
    conv_b: usize,
    ln_g: usize,
    ln_b: usize,
}

/// CNN over the (pairs, frames, lags) map producing a spatial feature
/// vector per clip or per frame.
pub struct SpatialEncoder<T> {
    pub config: SpatialEncoderConfig,
    stages: Vec<StageIdx>,
    head_w: usize,
    head_b: usize,
    pub set: ParamSet<T>,
}

impl<T: Element> SpatialEncoder<T> {
    pub fn new(config: SpatialEncoderConfig, rng: &mut impl Rng) -> Self {
        let mut set = ParamSet::new();
        let mut stages = Vec::new();
        let mut cin = config.in_channels;
        for (i, &(cout, _)) in config.blocks.iter().enumerate() {
            let fan_in = cin * 9;
            let conv_w = set.add(Parameter::glorot(
                format!("spa.stage{i}.conv.w"),
                &[cout, cin, 3, 3],
                fan_in,
                cout * 9,
                rng,
            ));
            let conv_b = set.add(Parameter::zeros(format!("spa.stage{i}.conv.b"), &[cout]));
            let ln_g = set.add(
                Parameter::new(format!("spa.stage{i}.ln.g"), &[cout], vec![T::one(); cout]).unwrap(),
            );
            let ln_b = set.add(Parameter::zeros(format!("spa.stage{i}.ln.b"), &[cout]));
            stages.push(StageIdx { conv_w, conv_b, ln_g, ln_b });
            cin = cout;
        }
        let head_w = set.add(Parameter::glorot("spa.head.w", &[cin, config.output_dim], cin, config.output_dim, rng));
        let head_b = set.add(Parameter::zeros("spa.head.b", &[config.output_dim]));
        Self { config, stages, head_w, head_b, set }
    }

    fn stage_stack(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        mut x: Var,
        keep_time: bool,
    ) -> Result<Var> {
        for (st, &(_, stride)) in self.stages.iter().zip(&self.config.blocks) {
            let s = if keep_time { (1, stride) } else { (stride, stride) };
            x = tape.conv2d(x, vars[st.conv_w], vars[st.conv_b], s, (1, 1))?;
            // layer norm over channels: move C last, normalize, move back
            let c_last = tape.permute(x, &[0, 2, 3, 1])?;
            let normed = tape.layer_norm(c_last, vars[st.ln_g], vars[st.ln_b], 1e-5)?;
            let back = tape.permute(normed, &[0, 3, 1, 2])?;
            x = tape.relu(back);
        }
        Ok(x)
    }

    /// Clip-level feature: (N, L, T, F) -> (N, output_dim).
    pub fn forward_clip(&self, tape: &mut Tape<T>, vars: &[Var], g: Var) -> Result<Var> {
        if tape.shape(g).len() != 4 || tape.shape(g)[1] != self.config.in_channels {
            return Err(Error::ShapeMismatch {
                expected: vec![0, self.config.in_channels, 0, 0],
                got: tape.shape(g).to_vec(),
            });
        }
        let x = self.stage_stack(tape, vars, g, false)?;
        let pooled = tape.global_mean_pool(x)?;
        tape.linear(pooled, vars[self.head_w], vars[self.head_b])
    }

    /// Frame-level feature: (N, L, T, F) -> (N, T, output_dim). Time is
    /// preserved by striding only along the lag axis.
    pub fn forward_frames(&self, tape: &mut Tape<T>, vars: &[Var], g: Var) -> Result<Var> {
        let shape = tape.shape(g).to_vec();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::ShapeMismatch {
                expected: vec![0, self.config.in_channels, 0, 0],
                got: shape,
            });
        }
        let x = self.stage_stack(tape, vars, g, true)?;
        // (N, C, T, F') -> mean over F' -> (N, C, T) -> (N, T, C)
        let avg = tape.mean_last(x)?;
        let nt = tape.permute(avg, &[0, 2, 1])?;
        let s = tape.shape(nt).to_vec();
        let flat = tape.reshape(nt, &[s[0] * s[1], s[2]])?;
        let proj = tape.linear(flat, vars[self.head_w], vars[self.head_b])?;
        tape.reshape(proj, &[s[0], s[1], self.config.output_dim])
    }
}

/// Clip-level concatenation fusion with a linear classifier.
pub struct ClipConcatModel<T> {
    pub encoder: SpatialEncoder<T>,
    pub use_audio_semantic: bool,
    cls_w: usize,
    cls_b: usize,
}

impl<T: Element> ClipConcatModel<T> {
    pub fn new(
        encoder_config: SpatialEncoderConfig,
        use_audio_semantic: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let mut encoder = SpatialEncoder::new(encoder_config, rng);
        let in_dim = encoder.config.output_dim
            + EMBED_DIM
            + if use_audio_semantic { EMBED_DIM } else { 0 };
        let cls_w = encoder.set.add(Parameter::glorot("cls.w", &[in_dim, NUM_BINS], in_dim, NUM_BINS, rng));
        let cls_b = encoder.set.add(Parameter::zeros("cls.b", &[NUM_BINS]));
        Self { encoder, use_audio_semantic, cls_w, cls_b }
    }

    pub fn set(&self) -> &ParamSet<T> {
        &self.encoder.set
    }

    pub fn set_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.encoder.set
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.encoder.set.bind_all(tape)
    }

    /// Logits (N, 360) for a batch. `f_a_sem` must be present exactly when
    /// the model was built with `use_audio_semantic`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        g: Var,
        f_t_sem: Var,
        f_a_sem: Option<Var>,
    ) -> Result<Var> {
        if self.use_audio_semantic != f_a_sem.is_some() {
            return Err(Error::InvalidArgument(
                "audio-semantic embedding presence does not match the model flag".into(),
            ));
        }
        let spa = self.encoder.forward_clip(tape, vars, g)?;
        let fused = match f_a_sem {
            Some(a) => tape.concat(1, &[spa, a, f_t_sem])?,
            None => tape.concat(1, &[spa, f_t_sem])?,
        };
        tape.linear(fused, vars[self.cls_w], vars[self.cls_b])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameMode {
    PerFrame,
    ClsPooled,
}

#[derive(Debug, Clone)]
pub struct FrameModelConfig {
    pub in_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub n_enc: usize,
    pub n_dec: usize,
    pub causal: bool,
}

impl FrameModelConfig {
    pub fn new(in_dim: usize) -> Self {
        Self { in_dim, d_model: 256, heads: 4, d_ff: 1024, n_enc: 4, n_dec: 4, causal: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

struct AttnIdx {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    bo: usize,
}

struct EncBlockIdx {
    attn: AttnIdx,
    ln1: (usize, usize),
    ffn_w1: usize,
    ffn_b1: usize,
    ffn_w2: usize,
    ffn_b2: usize,
    ln2: (usize, usize),
}

struct DecBlockIdx {
    self_attn: AttnIdx,
    ln1: (usize, usize),
    cross_attn: AttnIdx,
    ln2: (usize, usize),
    ffn_w1: usize,
    ffn_b1: usize,
    ffn_w2: usize,
    ffn_b2: usize,
    ln3: (usize, usize),
}

/// Frame-level transformer with decoder cross-attention to the text token.
pub struct FrameCrossAttnModel<T> {
    pub config: FrameModelConfig,
    proj_w: usize,
    proj_b: usize,
    text_w: usize,
    text_b: usize,
    cls_token: usize,
    enc: Vec<EncBlockIdx>,
    dec: Vec<DecBlockIdx>,
    head_w: usize,
    head_b: usize,
    pub set: ParamSet<T>,
}

impl<T: Element> FrameCrossAttnModel<T> {
    pub fn new(config: FrameModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut set = ParamSet::new();
        let proj_w = set.add(Parameter::glorot("frame.proj.w", &[config.in_dim, d], config.in_dim, d, rng));
        let proj_b = set.add(Parameter::zeros("frame.proj.b", &[d]));
        let text_w = set.add(Parameter::glorot("frame.text.w", &[EMBED_DIM, d], EMBED_DIM, d, rng));
        let text_b = set.add(Parameter::zeros("frame.text.b", &[d]));
        let cls_token = set.add(Parameter::uniform("frame.cls", &[1, d], 0.02, rng));

        let mut enc = Vec::new();
        for i in 0..config.n_enc {
            let p = format!("frame.enc{i}");
            enc.push(EncBlockIdx {
                attn: make_attn(&mut set, d, &format!("{p}.attn"), rng),
                ln1: make_ln(&mut set, d, &format!("{p}.ln1")),
                ffn_w1: set.add(Parameter::glorot(format!("{p}.ffn.w1"), &[d, config.d_ff], d, config.d_ff, rng)),
                ffn_b1: set.add(Parameter::zeros(format!("{p}.ffn.b1"), &[config.d_ff])),
                ffn_w2: set.add(Parameter::glorot(format!("{p}.ffn.w2"), &[config.d_ff, d], config.d_ff, d, rng)),
                ffn_b2: set.add(Parameter::zeros(format!("{p}.ffn.b2"), &[d])),
                ln2: make_ln(&mut set, d, &format!("{p}.ln2")),
            });
        }
        let mut dec = Vec::new();
        for i in 0..config.n_dec {
            let p = format!("frame.dec{i}");
            dec.push(DecBlockIdx {
                self_attn: make_attn(&mut set, d, &format!("{p}.self"), rng),
                ln1: make_ln(&mut set, d, &format!("{p}.ln1")),
                cross_attn: make_attn(&mut set, d, &format!("{p}.cross"), rng),
                ln2: make_ln(&mut set, d, &format!("{p}.ln2")),
                ffn_w1: set.add(Parameter::glorot(format!("{p}.ffn.w1"), &[d, config.d_ff], d, config.d_ff, rng)),
                ffn_b1: set.add(Parameter::zeros(format!("{p}.ffn.b1"), &[config.d_ff])),
                ffn_w2: set.add(Parameter::glorot(format!("{p}.ffn.w2"), &[config.d_ff, d], config.d_ff, d, rng)),
                ffn_b2: set.add(Parameter::zeros(format!("{p}.ffn.b2"), &[d])),
                ln3: make_ln(&mut set, d, &format!("{p}.ln3")),
            });
        }
        let head_w = set.add(Parameter::glorot("frame.head.w", &[d, NUM_BINS], d, NUM_BINS, rng));
        let head_b = set.add(Parameter::zeros("frame.head.b", &[NUM_BINS]));
        Ok(Self { config, proj_w, proj_b, text_w, text_b, cls_token, enc, dec, head_w, head_b, set })
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.set.bind_all(tape)
    }

    fn attention(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        idx: &AttnIdx,
        q_in: Var,
        kv_in: Var,
        causal: bool,
    ) -> Result<Var> {
        let d = self.config.d_model;
        let h = self.config.heads;
        let hd = d / h;
        let q = tape.matmul(q_in, vars[idx.wq])?;
        let k = tape.matmul(kv_in, vars[idx.wk])?;
        let v = tape.matmul(kv_in, vars[idx.wv])?;
        let tq = tape.shape(q)[0];
        let tk = tape.shape(k)[0];
        let mask = if causal {
            let mut m = vec![T::zero(); tq * tk];
            for i in 0..tq {
                for j in 0..tk {
                    if j > i {
                        m[i * tk + j] = T::of(-1e9);
                    }
                }
            }
            Some(tape.constant(&[tq, tk], m)?)
        } else {
            None
        };
        let mut heads_out = Vec::with_capacity(h);
        for hi in 0..h {
            let qh = tape.narrow(q, 1, hi * hd, hd)?;
            let kh = tape.narrow(k, 1, hi * hd, hd)?;
            let vh = tape.narrow(v, 1, hi * hd, hd)?;
            let kt = tape.permute(kh, &[1, 0])?;
            let scores = tape.matmul(qh, kt)?;
            let mut scaled = tape.scale(scores, 1.0 / (hd as f64).sqrt());
            if let Some(m) = mask {
                scaled = tape.add(scaled, m)?;
            }
            let attn = tape.softmax(scaled)?;
            heads_out.push(tape.matmul(attn, vh)?);
        }
        let cat = tape.concat(1, &heads_out)?;
        tape.linear(cat, vars[idx.wo], vars[idx.bo])
    }

    fn ffn(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        x: Var,
        w1: usize,
        b1: usize,
        w2: usize,
        b2: usize,
    ) -> Result<Var> {
        let h = tape.linear(x, vars[w1], vars[b1])?;
        let h = tape.relu(h);
        tape.linear(h, vars[w2], vars[b2])
    }

    fn post_norm(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        x: Var,
        sub: Var,
        ln: (usize, usize),
    ) -> Result<Var> {
        let s = tape.add(x, sub)?;
        tape.layer_norm(s, vars[ln.0], vars[ln.1], 1e-5)
    }

    /// Forward one clip. `frames` is the (T, in_dim) flattened GCC map and
    /// `f_t_sem` a unit-norm 512-d query vector. Returns (T, 360) logits in
    /// per-frame mode, (1, 360) in CLS-pooled mode.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        frames: Var,
        f_t_sem: &[f64],
        mode: FrameMode,
    ) -> Result<Var> {
        check_embedding("query", f_t_sem)?;
        let shape = tape.shape(frames).to_vec();
        if shape.len() != 2 || shape[1] != self.config.in_dim || shape[0] == 0 {
            return Err(Error::ShapeMismatch {
                expected: vec![1, self.config.in_dim],
                got: shape,
            });
        }
        let t_frames = shape[0];
        let d = self.config.d_model;

        let mut x = tape.linear(frames, vars[self.proj_w], vars[self.proj_b])?;
        if mode == FrameMode::ClsPooled {
            x = tape.concat(0, &[vars[self.cls_token], x])?;
        }
        let tokens = tape.shape(x)[0];
        let pe = tape.constant(&[tokens, d], sinusoidal_pe(tokens, d))?;
        x = tape.add(x, pe)?;

        for blk in &self.enc {
            let a = self.attention(tape, vars, &blk.attn, x, x, self.config.causal)?;
            x = self.post_norm(tape, vars, x, a, blk.ln1)?;
            let f = self.ffn(tape, vars, x, blk.ffn_w1, blk.ffn_b1, blk.ffn_w2, blk.ffn_b2)?;
            x = self.post_norm(tape, vars, x, f, blk.ln2)?;
        }

        let text_row = tape.constant(&[1, EMBED_DIM], f_t_sem.iter().map(|&v| T::of(v)).collect())?;
        let text_tok = tape.linear(text_row, vars[self.text_w], vars[self.text_b])?;

        for blk in &self.dec {
            let a = self.attention(tape, vars, &blk.self_attn, x, x, self.config.causal)?;
            x = self.post_norm(tape, vars, x, a, blk.ln1)?;
            let c = self.attention(tape, vars, &blk.cross_attn, x, text_tok, false)?;
            x = self.post_norm(tape, vars, x, c, blk.ln2)?;
            let f = self.ffn(tape, vars, x, blk.ffn_w1, blk.ffn_b1, blk.ffn_w2, blk.ffn_b2)?;
            x = self.post_norm(tape, vars, x, f, blk.ln3)?;
        }

        let logits = tape.linear(x, vars[self.head_w], vars[self.head_b])?;
        match mode {
            FrameMode::PerFrame => {
                debug_assert_eq!(tape.shape(logits)[0], t_frames);
                Ok(logits)
            }
            FrameMode::ClsPooled => tape.narrow(logits, 0, 0, 1),
        }
    }
}

fn make_attn<T: Element>(
    set: &mut ParamSet<T>,
    d: usize,
    prefix: &str,
    rng: &mut impl Rng,
) -> AttnIdx {
    AttnIdx {
        wq: set.add(Parameter::glorot(format!("{prefix}.wq"), &[d, d], d, d, rng)),
        wk: set.add(Parameter::glorot(format!("{prefix}.wk"), &[d, d], d, d, rng)),
        wv: set.add(Parameter::glorot(format!("{prefix}.wv"), &[d, d], d, d, rng)),
        wo: set.add(Parameter::glorot(format!("{prefix}.wo"), &[d, d], d, d, rng)),
        bo: set.add(Parameter::zeros(format!("{prefix}.bo"), &[d])),
    }
}

fn make_ln<T: Element>(set: &mut ParamSet<T>, d: usize, name: &str) -> (usize, usize) {
    (
        set.add(Parameter::new(format!("{name}.g"), &[d], vec![T::one(); d]).unwrap()),
        set.add(Parameter::zeros(format!("{name}.b"), &[d])),
    )
}

fn sinusoidal_pe<T: Element>(tokens: usize, d: usize) -> Vec<T> {
    let mut pe = vec![T::zero(); tokens * d];
    for p in 0..tokens {
        for i in 0..d / 2 {
            let rate = (10_000f64).powf(2.0 * i as f64 / d as f64);
            let angle = p as f64 / rate;
            pe[p * d + 2 * i] = T::of(angle.sin());
            pe[p * d + 2 * i + 1] = T::of(angle.cos());
        }
    }
    pe
}

#[cfg(test)]
mod tests;
