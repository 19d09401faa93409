//! Scene synthesis: corpus clips -> spatialized 4-channel mixtures plus a
//! manifest with ground-truth azimuths.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use tqsel_core::room::{
    render_moving_source, render_static_source, sample_scene, simulate_rir, Protocol,
};
use tqsel_core::signal::{mix, pad_or_truncate, Waveform};
use tqsel_core::wav::{read_wav, write_wav, SampleFormat};

use crate::corpus::Corpus;
use crate::manifest::{save_manifest, ManifestRecord};

#[derive(Debug, Clone)]
pub struct SynthRequest {
    pub protocol: Protocol,
    pub count: usize,
    pub seed: u64,
    pub split: String,
    pub duration_s: f64,
    pub label_hop_s: f64,
}

impl SynthRequest {
    pub fn new(protocol: Protocol, count: usize, seed: u64, split: &str) -> Self {
        Self {
            protocol,
            count,
            seed,
            split: split.to_string(),
            duration_s: 10.0,
            label_hop_s: 0.1,
        }
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Replicate a mono clip into `n` identical channels: no inter-channel cues,
/// equal energy everywhere.
fn additive_waveform(clip: &Waveform, n: usize) -> Result<Waveform> {
    Ok(Waveform::new(vec![clip.channel(0).to_vec(); n], clip.sample_rate())?)
}

struct Rendered {
    record: ManifestRecord,
    audio: Waveform,
}

fn synth_one(
    corpus: &Corpus,
    req: &SynthRequest,
    index: usize,
    sample_rate: u32,
) -> Result<Rendered> {
    let record_seed = splitmix64(req.seed ^ (index as u64).wrapping_mul(0x9e3779b97f4a7c15));
    // Separate streams for clip choice and scene geometry so they cannot
    // alias even though both derive from the record seed.
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(record_seed ^ 0x636c6970));
    let pool = corpus.split(&req.split);
    if pool.len() < 2 {
        bail!("split {:?} has {} clips, need at least 2", req.split, pool.len());
    }
    // The second clip must carry a different caption, otherwise the query
    // would describe both sources and the target label would be ambiguous.
    let clip_a = *pool.choose(&mut rng).unwrap();
    let others: Vec<_> = pool
        .iter()
        .filter(|e| e.caption != clip_a.caption)
        .copied()
        .collect();
    if others.is_empty() {
        bail!("split {:?} has a single caption, cannot pick a distractor", req.split);
    }
    let clip_b = *others.choose(&mut rng).unwrap();

    let load = |e: &crate::corpus::CorpusEntry| -> Result<Waveform> {
        let w = read_wav(corpus.audio_path(e))
            .with_context(|| format!("reading clip {}", e.clip_id))?;
        if w.sample_rate() != sample_rate {
            bail!(
                "clip {} has sample rate {}, expected {}",
                e.clip_id,
                w.sample_rate(),
                sample_rate
            );
        }
        Ok(pad_or_truncate(&w, req.duration_s)?)
    };
    let dry_a = load(clip_a)?;
    let dry_b = load(clip_b)?;

    let scene = sample_scene(record_seed, req.protocol, req.duration_s)?;
    let n_mics = scene.array.num_mics();

    let mut stems: Vec<Waveform> = Vec::new();
    let mut azimuth_deg = None;
    let mut azimuth_series = None;
    let mut target_idx = 0usize;
    match req.protocol {
        Protocol::OneDirectionalOneAdditive => {
            let traj = scene.sources[0].trajectory.as_ref().unwrap();
            let pos = traj.position_at(0.0, scene.array.centroid());
            let rir = simulate_rir(&scene.room, pos, &scene.array, sample_rate)?;
            let wet = render_static_source(&dry_a, &rir)?;
            stems.push(pad_or_truncate(&wet, req.duration_s)?);
            stems.push(additive_waveform(&dry_b, n_mics)?);
            azimuth_deg = Some(traj.azimuth_at(0.0));
        }
        Protocol::TwoDirectional => {
            for (si, dry) in [&dry_a, &dry_b].into_iter().enumerate() {
                let traj = scene.sources[si].trajectory.as_ref().unwrap();
                let pos = traj.position_at(0.0, scene.array.centroid());
                let rir = simulate_rir(&scene.room, pos, &scene.array, sample_rate)?;
                let wet = render_static_source(dry, &rir)?;
                stems.push(pad_or_truncate(&wet, req.duration_s)?);
            }
            target_idx = rng.gen_range(0..2usize);
            let traj = scene.sources[target_idx].trajectory.as_ref().unwrap();
            azimuth_deg = Some(traj.azimuth_at(0.0));
        }
        Protocol::Moving => {
            let traj = scene.sources[0].trajectory.as_ref().unwrap();
            let (wet, series) = render_moving_source(
                &dry_a,
                &scene.room,
                traj,
                &scene.array,
                req.label_hop_s,
            )?;
            stems.push(pad_or_truncate(&wet, req.duration_s)?);
            stems.push(additive_waveform(&dry_b, n_mics)?);
            azimuth_series = Some(series);
        }
    }

    let gains: Vec<f64> = scene.sources.iter().map(|s| s.gain_db).collect();
    let inputs: Vec<(&Waveform, f64)> = stems.iter().zip(gains.iter().copied()).collect();
    let mut audio = mix(&inputs)?;
    let peak = audio
        .channels()
        .iter()
        .flat_map(|c| c.iter())
        .fold(0.0f64, |m, &v| m.max(v.abs()));
    if peak > 1.0 {
        let g = 0.99 / peak;
        let scaled: Vec<Vec<f64>> = audio
            .channels()
            .iter()
            .map(|c| c.iter().map(|&v| v * g).collect())
            .collect();
        audio = Waveform::new(scaled, sample_rate)?;
    }

    let example_id = format!(
        "{}_{}_{:08x}_{:05}",
        req.protocol.as_str(),
        req.split,
        req.seed,
        index
    );
    let target_entry = if target_idx == 0 { clip_a } else { clip_b };
    let record = ManifestRecord {
        example_id: example_id.clone(),
        audio: PathBuf::from("audio").join(format!("{example_id}.wav")),
        query_text: target_entry.caption.clone(),
        query_embedding: "hashed".into(),
        audio_embedding: None,
        protocol: req.protocol.as_str().into(),
        azimuth_deg,
        azimuth_series_deg: azimuth_series,
        scene_seed: record_seed,
        split: req.split.clone(),
    };
    Ok(Rendered { record, audio })
}

/// Render `req.count` scenes from the given corpus split and write the audio
/// plus `manifest.jsonl` under `out_dir`. Deterministic per (seed, index).
pub fn synthesize_dataset(
    corpus: &Corpus,
    req: &SynthRequest,
    sample_rate: u32,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<ManifestRecord>> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir.join("audio"))?;
    let rendered: Vec<Rendered> = (0..req.count)
        .into_par_iter()
        .map(|i| synth_one(corpus, req, i, sample_rate))
        .collect::<Result<_>>()?;
    let mut records = Vec::with_capacity(rendered.len());
    for r in rendered {
        write_wav(out_dir.join(&r.record.audio), &r.audio, SampleFormat::Float32)?;
        records.push(r.record);
    }
    save_manifest(out_dir.join("manifest.jsonl"), &records)?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::make_toy_corpus;
    use crate::manifest::{manifest_to_string, Manifest};

    fn tiny_corpus(dir: &Path) -> Corpus {
        make_toy_corpus(dir, 4, 0.5, 16_000, 11).unwrap()
    }

    #[test]
    fn same_seed_same_manifest_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = tiny_corpus(&dir.path().join("corpus"));
        let req = SynthRequest {
            duration_s: 0.5,
            ..SynthRequest::new(Protocol::OneDirectionalOneAdditive, 3, 9, "train")
        };
        let a = synthesize_dataset(&corpus, &req, 16_000, dir.path().join("a")).unwrap();
        let b = synthesize_dataset(&corpus, &req, 16_000, dir.path().join("b")).unwrap();
        assert_eq!(
            manifest_to_string(&a).unwrap(),
            manifest_to_string(&b).unwrap()
        );
        let wa = read_wav(dir.path().join("a/audio").join(a[0].audio.file_name().unwrap())).unwrap();
        let wb = read_wav(dir.path().join("b/audio").join(b[0].audio.file_name().unwrap())).unwrap();
        assert_eq!(wa.channel(0), wb.channel(0));
    }

    #[test]
    fn additive_stem_identical_across_channels() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = tiny_corpus(&dir.path().join("corpus"));
        let clip = read_wav(corpus.audio_path(&corpus.entries[0])).unwrap();
        let add = additive_waveform(&clip, 4).unwrap();
        assert_eq!(add.num_channels(), 4);
        for ch in 1..4 {
            assert_eq!(add.channel(0), add.channel(ch));
        }
    }

    #[test]
    fn static_protocols_carry_single_azimuth_and_moving_a_series() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = tiny_corpus(&dir.path().join("corpus"));
        for (protocol, moving) in [
            (Protocol::OneDirectionalOneAdditive, false),
            (Protocol::TwoDirectional, false),
            (Protocol::Moving, true),
        ] {
            let req = SynthRequest {
                duration_s: 0.5,
                ..SynthRequest::new(protocol, 2, 3, "train")
            };
            let out = dir.path().join(protocol.as_str());
            let recs = synthesize_dataset(&corpus, &req, 16_000, &out).unwrap();
            for r in &recs {
                assert_eq!(r.is_moving(), moving, "{}", r.example_id);
                if moving {
                    let s = r.azimuth_series_deg.as_ref().unwrap();
                    assert_eq!(s.len(), 5); // 0.5 s at 10 Hz
                    for &a in s {
                        assert!((0.0..360.0).contains(&a));
                    }
                } else {
                    let a = r.azimuth_deg.unwrap();
                    assert!((0.0..360.0).contains(&a));
                }
            }
            let m = Manifest::load(out.join("manifest.jsonl")).unwrap();
            let w = read_wav(m.audio_path(&m.records[0])).unwrap();
            assert_eq!(w.num_channels(), 4);
            assert_eq!(w.num_samples(), 8_000);
        }
    }

    #[test]
    fn two_dir_query_matches_target_clip() {
        // With only one train class per caption the query text must be the
        // caption of whichever clip the target index picked.
        let dir = tempfile::tempdir().unwrap();
        let corpus = tiny_corpus(&dir.path().join("corpus"));
        let req = SynthRequest {
            duration_s: 0.5,
            ..SynthRequest::new(Protocol::TwoDirectional, 6, 21, "train")
        };
        let recs = synthesize_dataset(&corpus, &req, 16_000, dir.path().join("d")).unwrap();
        let captions: std::collections::HashSet<String> =
            corpus.entries.iter().map(|e| e.caption.clone()).collect();
        for r in &recs {
            assert!(captions.contains(&r.query_text));
        }
    }
}
