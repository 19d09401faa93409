//! Experiment configuration: a flat UTF-8 `key=value` file.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    ClipConcat,
    FrameCrossAttn,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::ClipConcat => "clip_concat",
            ModelKind::FrameCrossAttn => "frame_cross_attn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "clip_concat" => Ok(ModelKind::ClipConcat),
            "frame_cross_attn" => Ok(ModelKind::FrameCrossAttn),
            other => bail!("unknown model kind {other:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub num_lags: usize,
    pub model: ModelKind,
    pub use_audio_semantic: bool,
    /// Conv widths of the spatial encoder stages, each with stride 2.
    pub spatial_channels: Vec<usize>,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub n_enc: usize,
    pub n_dec: usize,
    pub causal: bool,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub sigma_sq: f64,
    /// When set, the target variance is annealed geometrically from
    /// `sigma_sq` at epoch 1 down to this value at `max_epochs`.
    pub sigma_sq_final: Option<f64>,
    /// Train-time augmentation for static clip batches: remap the square
    /// array's channels under a random 90 deg rotation and mirror, with the
    /// target azimuth transformed to match.
    pub augment_rotations: bool,
    pub label_hop_s: f64,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_fft: 1024,
            hop: 640,
            num_lags: 96,
            model: ModelKind::ClipConcat,
            use_audio_semantic: false,
            spatial_channels: vec![32, 64, 128, 256],
            d_model: 256,
            heads: 4,
            d_ff: 1024,
            n_enc: 4,
            n_dec: 4,
            causal: false,
            batch_size: 64,
            lr: 5e-4,
            lr_decay: 0.5,
            lr_decay_every: 20,
            max_epochs: 100,
            patience: 10,
            sigma_sq: 5.0,
            sigma_sq_final: None,
            augment_rotations: false,
            label_hop_s: 0.1,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Reduced preset sized for a single desktop core.
    pub fn desk() -> Self {
        Self {
            spatial_channels: vec![16, 32, 64, 128],
            d_model: 64,
            heads: 4,
            d_ff: 128,
            n_enc: 1,
            n_dec: 1,
            batch_size: 16,
            max_epochs: 50,
            ..Self::default()
        }
    }

    /// Learning rate for a 1-based epoch under the step decay schedule.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = (epoch.max(1) - 1) / self.lr_decay_every.max(1);
        self.lr * self.lr_decay.powi(steps as i32)
    }

    /// Target variance for a 1-based epoch. Constant unless `sigma_sq_final`
    /// requests geometric annealing across the full epoch budget.
    pub fn sigma_sq_at(&self, epoch: usize) -> f64 {
        match self.sigma_sq_final {
            None => self.sigma_sq,
            Some(fin) => {
                if self.max_epochs <= 1 {
                    return fin;
                }
                let t = ((epoch.max(1) - 1) as f64) / ((self.max_epochs - 1) as f64);
                let t = t.min(1.0);
                self.sigma_sq.powf(1.0 - t) * fin.powf(t)
            }
        }
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "sample_rate={}", self.sample_rate);
        let _ = writeln!(s, "n_fft={}", self.n_fft);
        let _ = writeln!(s, "hop={}", self.hop);
        let _ = writeln!(s, "num_lags={}", self.num_lags);
        let _ = writeln!(s, "model={}", self.model.as_str());
        let _ = writeln!(s, "use_audio_semantic={}", self.use_audio_semantic);
        let chans: Vec<String> = self.spatial_channels.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(s, "spatial_channels={}", chans.join(","));
        let _ = writeln!(s, "d_model={}", self.d_model);
        let _ = writeln!(s, "heads={}", self.heads);
        let _ = writeln!(s, "d_ff={}", self.d_ff);
        let _ = writeln!(s, "n_enc={}", self.n_enc);
        let _ = writeln!(s, "n_dec={}", self.n_dec);
        let _ = writeln!(s, "causal={}", self.causal);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "lr={}", self.lr);
        let _ = writeln!(s, "lr_decay={}", self.lr_decay);
        let _ = writeln!(s, "lr_decay_every={}", self.lr_decay_every);
        let _ = writeln!(s, "max_epochs={}", self.max_epochs);
        let _ = writeln!(s, "patience={}", self.patience);
        let _ = writeln!(s, "sigma_sq={}", self.sigma_sq);
        if let Some(fin) = self.sigma_sq_final {
            let _ = writeln!(s, "sigma_sq_final={fin}");
        }
        let _ = writeln!(s, "augment_rotations={}", self.augment_rotations);
        let _ = writeln!(s, "label_hop_s={}", self.label_hop_s);
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected key=value, got {raw:?}", ln + 1))?;
            let (key, value) = (key.trim(), value.trim());
            let ctx = || format!("line {}: bad value for {key}", ln + 1);
            match key {
                "sample_rate" => cfg.sample_rate = value.parse().with_context(ctx)?,
                "n_fft" => cfg.n_fft = value.parse().with_context(ctx)?,
                "hop" => cfg.hop = value.parse().with_context(ctx)?,
                "num_lags" => cfg.num_lags = value.parse().with_context(ctx)?,
                "model" => cfg.model = ModelKind::parse(value)?,
                "use_audio_semantic" => cfg.use_audio_semantic = value.parse().with_context(ctx)?,
                "spatial_channels" => {
                    cfg.spatial_channels = value
                        .split(',')
                        .map(|v| v.trim().parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .with_context(ctx)?;
                }
                "d_model" => cfg.d_model = value.parse().with_context(ctx)?,
                "heads" => cfg.heads = value.parse().with_context(ctx)?,
                "d_ff" => cfg.d_ff = value.parse().with_context(ctx)?,
                "n_enc" => cfg.n_enc = value.parse().with_context(ctx)?,
                "n_dec" => cfg.n_dec = value.parse().with_context(ctx)?,
                "causal" => cfg.causal = value.parse().with_context(ctx)?,
                "batch_size" => cfg.batch_size = value.parse().with_context(ctx)?,
                "lr" => cfg.lr = value.parse().with_context(ctx)?,
                "lr_decay" => cfg.lr_decay = value.parse().with_context(ctx)?,
                "lr_decay_every" => cfg.lr_decay_every = value.parse().with_context(ctx)?,
                "max_epochs" => cfg.max_epochs = value.parse().with_context(ctx)?,
                "patience" => cfg.patience = value.parse().with_context(ctx)?,
                "sigma_sq" => cfg.sigma_sq = value.parse().with_context(ctx)?,
                "sigma_sq_final" => {
                    cfg.sigma_sq_final = Some(value.parse().with_context(ctx)?)
                }
                "augment_rotations" => {
                    cfg.augment_rotations = value.parse().with_context(ctx)?
                }
                "label_hop_s" => cfg.label_hop_s = value.parse().with_context(ctx)?,
                "seed" => cfg.seed = value.parse().with_context(ctx)?,
                other => bail!("line {}: unknown config key {other:?}", ln + 1),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_fft == 0 || self.hop == 0 || self.num_lags == 0 || self.batch_size == 0 {
            bail!("n_fft, hop, num_lags, and batch_size must be positive");
        }
        if self.spatial_channels.is_empty() {
            bail!("spatial_channels must list at least one stage");
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            bail!("d_model must be a positive multiple of heads");
        }
        if !(self.lr > 0.0) || !(self.sigma_sq > 0.0) || !(self.label_hop_s > 0.0) {
            bail!("lr, sigma_sq, and label_hop_s must be positive");
        }
        if let Some(fin) = self.sigma_sq_final {
            if !(fin > 0.0) {
                bail!("sigma_sq_final must be positive");
            }
        }
        Ok(())
    }

    /// FNV-1a hash of the serialized config, for report provenance.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.serialize().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::parse(&cfg.serialize()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn sigma_annealing_schedule_and_round_trip() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(cfg.sigma_sq_at(1), cfg.sigma_sq);
        assert_eq!(cfg.sigma_sq_at(cfg.max_epochs), cfg.sigma_sq);
        cfg.sigma_sq = 200.0;
        cfg.sigma_sq_final = Some(2.0);
        cfg.max_epochs = 50;
        assert!((cfg.sigma_sq_at(1) - 200.0).abs() < 1e-12);
        assert!((cfg.sigma_sq_at(50) - 2.0).abs() < 1e-12);
        let mid = cfg.sigma_sq_at(25);
        assert!(mid < 200.0 && mid > 2.0);
        let back = ExperimentConfig::parse(&cfg.serialize()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn lr_schedule_steps_after_twenty_epochs() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.lr_at(1), 5e-4);
        assert_eq!(cfg.lr_at(20), 5e-4);
        assert_eq!(cfg.lr_at(21), 2.5e-4);
        assert_eq!(cfg.lr_at(40), 2.5e-4);
        assert_eq!(cfg.lr_at(41), 1.25e-4);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(ExperimentConfig::parse("bogus=1\n").is_err());
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = ExperimentConfig::parse("# hi\n\nlr=0.001\n").unwrap();
        assert_eq!(cfg.lr, 0.001);
    }

    #[test]
    fn invalid_heads_rejected() {
        assert!(ExperimentConfig::parse("d_model=10\nheads=3\n").is_err());
    }
}
