//! GCC-PHAT spatial feature extraction and multi-pair stacking.
//!
//! Per frame, the cross-power spectrum of a mic pair is normalized to unit
//! magnitude per bin (phase transform) and inverse-transformed to the lag
//! domain. Sign convention: a positive lag means channel `n` lags channel `m`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::room::SceneSpec;
use crate::signal::{stft_multichannel, ComplexSpectrogram, StftConfig, Waveform};

/// Magnitude floor applied before the phase-transform division so silent
/// frames produce zeros instead of NaN.
pub const PHAT_FLOOR: f64 = 1e-8;

/// Stacked per-pair GCC-PHAT maps, `pairs x frames x lags` row-major.
#[derive(Debug, Clone)]
pub struct GccFeature {
    pub values: Vec<f64>,
    pub num_pairs: usize,
    pub num_frames: usize,
    pub num_lags: usize,
    /// Integer sample lags, centered on zero (e.g. -48..=47 for 96 lags).
    pub lag_axis: Vec<i64>,
    /// Unordered mic index pairs in lexicographic order; this defines the
    /// channel layout contract for models and checkpoints.
    pub pair_index: Vec<(usize, usize)>,
    pub frame_rate: f64,
}

impl GccFeature {
    /// Build a feature from raw `pairs x frames x lags` values with a
    /// synthetic lexicographic pair index; used by loaders and tests.
    pub fn from_values(
        values: Vec<f64>,
        num_pairs: usize,
        num_frames: usize,
        num_lags: usize,
        frame_rate: f64,
    ) -> Result<Self> {
        if values.len() != num_pairs * num_frames * num_lags {
            return Err(Error::ShapeMismatch {
                expected: vec![num_pairs, num_frames, num_lags],
                got: vec![values.len()],
            });
        }
        let mut pair_index = Vec::with_capacity(num_pairs);
        let mut c = 2;
        while c * (c - 1) / 2 < num_pairs {
            c += 1;
        }
        'outer: for m in 0..c {
            for n in m + 1..c {
                pair_index.push((m, n));
                if pair_index.len() == num_pairs {
                    break 'outer;
                }
            }
        }
        Ok(Self {
            values,
            num_pairs,
            num_frames,
            num_lags,
            lag_axis: lag_axis(num_lags),
            pair_index,
            frame_rate,
        })
    }

    pub fn value(&self, pair: usize, frame: usize, lag_idx: usize) -> f64 {
        self.values[(pair * self.num_frames + frame) * self.num_lags + lag_idx]
    }

    pub fn frame_slice(&self, pair: usize, frame: usize) -> &[f64] {
        let base = (pair * self.num_frames + frame) * self.num_lags;
        &self.values[base..base + self.num_lags]
    }
}

/// Centered lag axis for a lag count: -F/2 ..= F/2 - 1 (even F),
/// -(F-1)/2 ..= (F-1)/2 (odd F).
pub fn lag_axis(num_lags: usize) -> Vec<i64> {
    let lo = -(num_lags as i64) / 2;
    (0..num_lags as i64).map(|i| lo + i).collect()
}

/// GCC-PHAT between two spectrogram channels; returns `frames x num_lags`
/// values in [-1, 1].
pub fn gcc_phat_pair(
    sm: &ComplexSpectrogram,
    sn: &ComplexSpectrogram,
    num_lags: usize,
) -> Result<Vec<f64>> {
    if sm.num_frames != sn.num_frames || sm.num_bins != sn.num_bins || sm.config != sn.config {
        return Err(Error::ShapeMismatch {
            expected: vec![sm.num_frames, sm.num_bins],
            got: vec![sn.num_frames, sn.num_bins],
        });
    }
    let n = sm.config.n_fft;
    if num_lags == 0 || num_lags > n {
        return Err(Error::InvalidArgument(format!("num_lags {num_lags} out of range 1..={n}")));
    }
    let lags = lag_axis(num_lags);

    let mut planner = FftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(n);
    let mut scratch = vec![Complex::new(0.0, 0.0); ifft.get_inplace_scratch_len()];
    let mut spec = vec![Complex::new(0.0, 0.0); n];
    let mut out = Vec::with_capacity(sm.num_frames * num_lags);

    for t in 0..sm.num_frames {
        let fm = sm.frame(t);
        let fn_ = sn.frame(t);
        // One-sided cross spectrum Phi_m * conj(Phi_n), PHAT-normalized,
        // expanded to the full conjugate-symmetric spectrum.
        for b in 0..sm.num_bins {
            let r = fm[b] * fn_[b].conj();
            let mag = r.norm().max(PHAT_FLOOR);
            let v = r / mag;
            spec[b] = v;
            if b != 0 && b != n / 2 {
                spec[n - b] = v.conj();
            }
        }
        ifft.process_with_scratch(&mut spec, &mut scratch);
        let scale = 1.0 / n as f64;
        // Positive lag tau (n lags m) lives at index (n - tau) mod n of this
        // inverse transform.
        for &lag in &lags {
            let idx = ((n as i64 - lag).rem_euclid(n as i64)) as usize % n;
            out.push(spec[idx].re * scale);
        }
    }
    Ok(out)
}

/// Stack GCC-PHAT maps for every unordered mic pair (lexicographic order).
pub fn gcc_phat_stack(w: &Waveform, cfg: StftConfig, num_lags: usize) -> Result<GccFeature> {
    let channels = w.num_channels();
    if channels < 2 {
        return Err(Error::InvalidArgument("gcc_phat_stack needs >= 2 channels".into()));
    }
    let specs = stft_multichannel(w, cfg)?;
    let frames = specs[0].num_frames;
    let mut pair_index = Vec::new();
    let mut values = Vec::new();
    for m in 0..channels {
        for n in m + 1..channels {
            pair_index.push((m, n));
            values.extend(gcc_phat_pair(&specs[m], &specs[n], num_lags)?);
        }
    }
    Ok(GccFeature {
        values,
        num_pairs: pair_index.len(),
        num_frames: frames,
        num_lags,
        lag_axis: lag_axis(num_lags),
        pair_index,
        frame_rate: specs[0].frame_rate,
    })
}

/// Remap a 4-mic square-array feature stack onto the array rotated by
/// `quarter_turns` x 90 degrees counterclockwise, optionally mirrored about
/// the x axis first.
///
/// Channel-order contract (matching `sample_scene`): mics at (-,-), (-,+),
/// (+,-), (+,+) relative to the array centroid. Both transforms map the mic
/// set onto itself, so the result is exactly the feature of the same scene
/// with the source azimuth moved to `quarter_turns*90 + (mirror ? -a : a)`;
/// pairs whose index order flips under the permutation are lag-reversed.
/// The one extreme lag without a negated counterpart reuses the edge value.
pub fn permute_square_array_feature(
    g: &GccFeature,
    quarter_turns: usize,
    mirror: bool,
) -> Result<GccFeature> {
    if g.num_pairs != 6 || g.pair_index != [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)] {
        return Err(Error::InvalidArgument(
            "square-array permutation needs the canonical 4-mic pair layout".into(),
        ));
    }
    // new channel i carries old channel perm[i]
    const ROT90: [usize; 4] = [1, 3, 0, 2];
    const MIRROR: [usize; 4] = [1, 0, 3, 2];
    let mut perm = [0usize, 1, 2, 3];
    if mirror {
        perm = MIRROR;
    }
    for _ in 0..(quarter_turns % 4) {
        perm = [perm[ROT90[0]], perm[ROT90[1]], perm[ROT90[2]], perm[ROT90[3]]];
    }
    let (t, f) = (g.num_frames, g.num_lags);
    let lo = g.lag_axis[0];
    let mut values = vec![0.0f64; g.values.len()];
    for (pi, &(i, j)) in g.pair_index.iter().enumerate() {
        let (a, b) = (perm[i], perm[j]);
        let flip = a > b;
        let key = if flip { (b, a) } else { (a, b) };
        let src = g.pair_index.iter().position(|&p| p == key).unwrap();
        for ti in 0..t {
            let dst = (pi * t + ti) * f;
            if flip {
                for li in 0..f {
                    let neg = -(g.lag_axis[li]) - lo;
                    let si = (neg as usize).min(f - 1);
                    values[dst + li] = g.value(src, ti, si);
                }
            } else {
                values[dst..dst + f].copy_from_slice(g.frame_slice(src, ti));
            }
        }
    }
    Ok(GccFeature { values, ..g.clone() })
}

/// Geometric TDOA oracle: the lag (in samples, positive when mic `n` is
/// farther) a directional source at time `t` should produce on a mic pair.
pub fn expected_tdoa(scene: &SceneSpec, pair: (usize, usize), t: f64, sample_rate: u32) -> Result<f64> {
    let pos = scene
        .directional_position_at(t)
        .ok_or_else(|| Error::InvalidArgument("scene has no directional source".into()))?;
    let mics = &scene.array.mic_positions;
    if pair.0 >= mics.len() || pair.1 >= mics.len() {
        return Err(Error::InvalidArgument(format!("pair {pair:?} out of range")));
    }
    let d = |a: [f64; 3], b: [f64; 3]| -> f64 {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    };
    let dm = d(pos, mics[pair.0]);
    let dn = d(pos, mics[pair.1]);
    Ok((dn - dm) * sample_rate as f64 / scene.room.speed_of_sound)
}

const GCC_MAGIC: &[u8; 4] = b"TQGC";

/// Feature cache dump: magic "TQGC", u32 version, u32 L, u32 T, u32 F, then
/// float32 little-endian values in L-major order.
pub fn save_gcc_feature(path: impl AsRef<Path>, g: &GccFeature) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(GCC_MAGIC)?;
    out.write_all(&1u32.to_le_bytes())?;
    out.write_all(&(g.num_pairs as u32).to_le_bytes())?;
    out.write_all(&(g.num_frames as u32).to_le_bytes())?;
    out.write_all(&(g.num_lags as u32).to_le_bytes())?;
    for &v in &g.values {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Read a feature dump written by [`save_gcc_feature`].
///
/// The pair index is reconstructed lexicographically from the pair count,
/// matching the layout contract of [`gcc_phat_stack`].
pub fn load_gcc_feature(path: impl AsRef<Path>, frame_rate: f64) -> Result<GccFeature> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != GCC_MAGIC {
        return Err(Error::Format("bad GCC feature magic".into()));
    }
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    if u32::from_le_bytes(b) != 1 {
        return Err(Error::Format("unsupported GCC feature version".into()));
    }
    r.read_exact(&mut b)?;
    let l = u32::from_le_bytes(b) as usize;
    r.read_exact(&mut b)?;
    let t = u32::from_le_bytes(b) as usize;
    r.read_exact(&mut b)?;
    let f = u32::from_le_bytes(b) as usize;
    let mut values = Vec::with_capacity(l * t * f);
    for _ in 0..l * t * f {
        r.read_exact(&mut b)?;
        values.push(f32::from_le_bytes(b) as f64);
    }
    // Invert L = C(C, 2) to recover the channel count.
    let mut channels = 2;
    while channels * (channels - 1) / 2 < l {
        channels += 1;
    }
    if channels * (channels - 1) / 2 != l {
        return Err(Error::Format(format!("pair count {l} is not C(c,2) for any c")));
    }
    let mut pair_index = Vec::new();
    for m in 0..channels {
        for n in m + 1..channels {
            pair_index.push((m, n));
        }
    }
    Ok(GccFeature {
        values,
        num_pairs: l,
        num_frames: t,
        num_lags: f,
        lag_axis: lag_axis(f),
        pair_index,
        frame_rate,
    })
}
