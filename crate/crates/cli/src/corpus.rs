//! Corpus ingestion and the built-in toy corpus generator.
//!
//! A corpus is a directory with `corpus.jsonl` describing (audio, caption)
//! clips with split tags. The toy generator writes 8 synthetic classes whose
//! spectral band, tone, and amplitude-modulation rate differ per class, so
//! class identity is recoverable from spatial features alone.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use tqsel_core::signal::Waveform;
use tqsel_core::wav::{write_wav, SampleFormat};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CorpusEntry {
    pub clip_id: String,
    pub audio: PathBuf,
    pub caption: String,
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_embedding: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_embedding: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub entries: Vec<CorpusEntry>,
}

impl Corpus {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let root = dir.as_ref().to_path_buf();
        let listing = root.join("corpus.jsonl");
        let text = std::fs::read_to_string(&listing)
            .with_context(|| format!("reading {}", listing.display()))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: CorpusEntry = serde_json::from_str(line)
                .with_context(|| format!("corpus.jsonl line {}", i + 1))?;
            if e.caption.trim().is_empty() {
                bail!("clip {} has an empty caption", e.clip_id);
            }
            entries.push(e);
        }
        if entries.is_empty() {
            bail!("corpus at {} is empty", root.display());
        }
        Ok(Self { root, entries })
    }

    pub fn split(&self, tag: &str) -> Vec<&CorpusEntry> {
        self.entries.iter().filter(|e| e.split == tag).collect()
    }

    pub fn audio_path(&self, e: &CorpusEntry) -> PathBuf {
        if e.audio.is_absolute() {
            e.audio.clone()
        } else {
            self.root.join(&e.audio)
        }
    }
}

/// name, caption, AM rate (Hz)
///
/// Class spectra are interleaved combs: class i owns the 100 Hz teeth at
/// offset i*100 of an 800 Hz period, from 400 Hz up to Nyquist. Support is
/// broadband for every class (sharp GCC-PHAT ridges) while the supports of
/// different classes are disjoint, so in a mixture each ridge keeps a clean
/// class signature.
pub const TOY_CLASSES: &[(&str, &str, f64)] = &[
    ("dog", "dog barking", 3.0),
    ("siren", "siren wailing", 1.5),
    ("glass", "glass breaking", 6.0),
    ("engine", "engine humming", 0.8),
    ("bird", "bird chirping", 5.0),
    ("drum", "drum beating", 2.2),
    ("phone", "phone ringing", 4.0),
    ("water", "water splashing", 0.5),
];

const COMB_PERIOD: f64 = 800.0;
const COMB_TOOTH: f64 = 100.0;

/// Lower edges of the comb teeth owned by a class.
fn comb_teeth(class: usize, sample_rate: u32) -> Vec<f64> {
    let offset = (class % TOY_CLASSES.len()) as f64 * COMB_TOOTH;
    let f_max = sample_rate as f64 / 2.0 - 200.0;
    let mut teeth = Vec::new();
    let mut k = 0.0;
    loop {
        let base = k * COMB_PERIOD + offset;
        if base + COMB_TOOTH > f_max {
            break;
        }
        if base >= 400.0 {
            teeth.push(base);
        }
        k += 1.0;
    }
    teeth
}

/// One toy clip: partials on a fixed per-class frequency grid (four per
/// comb tooth) plus a strong anchor tone, amplitude-modulated at the class
/// rate. Only phases and amplitudes vary between clips of a class; the
/// frequency support is exactly the class comb, so the spectral signature
/// is a class property rather than a clip property.
pub fn toy_clip(class: usize, seed: u64, duration_s: f64, sample_rate: u32) -> Waveform {
    let (_, _, am) = TOY_CLASSES[class % TOY_CLASSES.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (duration_s * sample_rate as f64).round() as usize;
    let sr = sample_rate as f64;
    let teeth = comb_teeth(class, sample_rate);
    let mut partials: Vec<(f64, f64, f64)> = Vec::new();
    for &base in &teeth {
        for off in [12.5, 37.5, 62.5, 87.5] {
            partials.push((
                base + off,
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.3..1.0),
            ));
        }
    }
    let anchor = teeth[teeth.len() / 3] + COMB_TOOTH / 2.0;
    partials.push((anchor, rng.gen_range(0.0..std::f64::consts::TAU), 6.0));
    let mut x = vec![0.0f64; n];
    for (i, v) in x.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let mut acc = 0.0;
        for &(f, ph, a) in &partials {
            acc += a * (std::f64::consts::TAU * f * t + ph).sin();
        }
        let env = 0.55 + 0.45 * (std::f64::consts::TAU * am * t).cos();
        *v = acc * env;
    }
    let peak = x.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1e-12);
    for v in &mut x {
        *v *= 0.7 / peak;
    }
    Waveform::mono(x, sample_rate).unwrap()
}

/// Generate the toy corpus: `clips_per_class` clips for each of the 8
/// classes, split roughly 70/15/15 per class.
pub fn make_toy_corpus(
    dir: impl AsRef<Path>,
    clips_per_class: usize,
    duration_s: f64,
    sample_rate: u32,
    seed: u64,
) -> Result<Corpus> {
    if clips_per_class < 3 {
        bail!("need at least 3 clips per class to cover all splits");
    }
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("audio"))?;
    // at least one eval and one test clip per class, rest train
    let n_test = ((clips_per_class as f64 * 0.15).round() as usize).max(1);
    let n_eval = n_test;
    let n_train = clips_per_class - n_eval - n_test;
    let mut entries = Vec::new();
    for (ci, &(name, caption, _)) in TOY_CLASSES.iter().enumerate() {
        for k in 0..clips_per_class {
            let clip_id = format!("{name}_{k:03}");
            let rel = PathBuf::from("audio").join(format!("{clip_id}.wav"));
            let clip_seed = seed
                .wrapping_mul(0x9e3779b97f4a7c15)
                .wrapping_add((ci * 10_000 + k) as u64);
            let w = toy_clip(ci, clip_seed, duration_s, sample_rate);
            write_wav(dir.join(&rel), &w, SampleFormat::Float32)?;
            let split = if k < n_train {
                "train"
            } else if k < n_train + n_eval {
                "eval"
            } else {
                "test"
            };
            entries.push(CorpusEntry {
                clip_id,
                audio: rel,
                caption: caption.to_string(),
                split: split.to_string(),
                text_embedding: None,
                audio_embedding: None,
            });
        }
    }
    let mut listing = String::new();
    for e in &entries {
        listing.push_str(&serde_json::to_string(e)?);
        listing.push('\n');
    }
    std::fs::write(dir.join("corpus.jsonl"), listing)?;
    Ok(Corpus { root: dir.to_path_buf(), entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_corpus_has_all_splits_and_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = make_toy_corpus(dir.path(), 5, 0.2, 8_000, 7).unwrap();
        assert_eq!(corpus.entries.len(), 40);
        for tag in ["train", "eval", "test"] {
            assert!(!corpus.split(tag).is_empty(), "missing split {tag}");
        }
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(back.entries, corpus.entries);
        let w = tqsel_core::wav::read_wav(back.audio_path(&back.entries[0])).unwrap();
        assert_eq!(w.sample_rate(), 8_000);
    }

    #[test]
    fn toy_clips_are_deterministic_and_class_distinct() {
        let a = toy_clip(0, 5, 0.1, 8_000);
        let b = toy_clip(0, 5, 0.1, 8_000);
        assert_eq!(a.channel(0), b.channel(0));
        let c = toy_clip(1, 5, 0.1, 8_000);
        assert_ne!(a.channel(0), c.channel(0));
    }

    #[test]
    fn class_combs_are_disjoint_and_broadband() {
        for a in 0..TOY_CLASSES.len() {
            let ta = comb_teeth(a, 16_000);
            assert!(ta.len() >= 8, "class {a} has only {} teeth", ta.len());
            let span = ta.last().unwrap() + COMB_TOOTH - ta[0];
            assert!(span >= 5_000.0, "class {a} spans only {span} Hz");
            for b in a + 1..TOY_CLASSES.len() {
                for &x in &ta {
                    for &y in &comb_teeth(b, 16_000) {
                        assert!((x - y).abs() >= COMB_TOOTH, "classes {a}/{b} overlap");
                    }
                }
            }
        }
    }

    #[test]
    fn captions_are_distinct() {
        let caps: std::collections::HashSet<&str> =
            TOY_CLASSES.iter().map(|&(_, c, _)| c).collect();
        assert_eq!(caps.len(), TOY_CLASSES.len());
    }
}
