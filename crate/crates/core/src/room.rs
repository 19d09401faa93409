//! Shoebox image-source-model acoustics.
//!
//! RIR synthesis with fractional-delay taps, static and moving source
//! spatialization, and randomized scene sampling.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::signal::Waveform;

pub type Point3 = [f64; 3];

fn dist(a: Point3, b: Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Shoebox room with a target reverberation time.
#[derive(Debug, Clone, PartialEq)]
pub struct RoomSpec {
    pub dimensions: Point3,
    pub rt60: f64,
    pub speed_of_sound: f64,
    pub max_image_order: usize,
}

impl RoomSpec {
    pub fn new(dimensions: Point3, rt60: f64) -> Result<Self> {
        if dimensions.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::Geometry(format!("non-positive room dimension {dimensions:?}")));
        }
        if !(rt60 > 0.0) {
            return Err(Error::InvalidArgument(format!("rt60 must be > 0, got {rt60}")));
        }
        Ok(Self { dimensions, rt60, speed_of_sound: 343.0, max_image_order: 20 })
    }

    pub fn with_max_image_order(mut self, order: usize) -> Self {
        self.max_image_order = order;
        self
    }

    pub fn contains(&self, p: Point3, margin: f64) -> bool {
        (0..3).all(|i| p[i] > margin && p[i] < self.dimensions[i] - margin)
    }

    pub fn volume(&self) -> f64 {
        self.dimensions[0] * self.dimensions[1] * self.dimensions[2]
    }

    pub fn surface_area(&self) -> f64 {
        let [x, y, z] = self.dimensions;
        2.0 * (x * y + y * z + x * z)
    }
}

/// Uniform wall absorption from Sabine's relation, alpha = 0.161 V / (S rt60),
/// clamped to (0, 0.9999]. The boolean is set when the requested RT60 is
/// physically unreachable for the room (alpha >= 1 pre-clamp).
pub fn sabine_absorption(room: &RoomSpec) -> (f64, bool) {
    let alpha = 0.161 * room.volume() / (room.surface_area() * room.rt60);
    if alpha >= 1.0 {
        (0.9999, true)
    } else {
        (alpha.max(f64::MIN_POSITIVE), false)
    }
}

/// Microphone positions in room coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayGeometry {
    pub mic_positions: Vec<Point3>,
}

impl ArrayGeometry {
    pub fn new(mic_positions: Vec<Point3>) -> Result<Self> {
        if mic_positions.len() < 2 {
            return Err(Error::Geometry("array needs >= 2 microphones".into()));
        }
        for i in 0..mic_positions.len() {
            for j in i + 1..mic_positions.len() {
                if dist(mic_positions[i], mic_positions[j]) < 1e-9 {
                    return Err(Error::Geometry(format!("mics {i} and {j} coincide")));
                }
            }
        }
        Ok(Self { mic_positions })
    }

    pub fn num_mics(&self) -> usize {
        self.mic_positions.len()
    }

    pub fn centroid(&self) -> Point3 {
        let n = self.mic_positions.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.mic_positions {
            for i in 0..3 {
                c[i] += p[i] / n;
            }
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryKind {
    Static,
    Moving,
}

/// One trajectory control point, relative to the array centroid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keyframe {
    pub time_s: f64,
    pub azimuth_deg: f64,
    pub radius_m: f64,
    /// Vertical offset from the array centroid.
    pub height_m: f64,
}

/// Source path around the array. Azimuth interpolates along the shortest arc
/// between consecutive keyframes.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceTrajectory {
    pub keyframes: Vec<Keyframe>,
    pub kind: TrajectoryKind,
}

fn wrap_deg(a: f64) -> f64 {
    let mut x = a % 360.0;
    if x < 0.0 {
        x += 360.0;
    }
    x
}

impl SourceTrajectory {
    pub fn new(keyframes: Vec<Keyframe>, kind: TrajectoryKind) -> Result<Self> {
        if keyframes.is_empty() {
            return Err(Error::InvalidArgument("trajectory needs >= 1 keyframe".into()));
        }
        if keyframes[0].time_s != 0.0 {
            return Err(Error::InvalidArgument("first keyframe must be at t = 0".into()));
        }
        for w in keyframes.windows(2) {
            if w[1].time_s <= w[0].time_s {
                return Err(Error::InvalidArgument("keyframe times must strictly increase".into()));
            }
        }
        if kind == TrajectoryKind::Static && keyframes.len() != 1 {
            return Err(Error::InvalidArgument("static trajectory must have exactly one keyframe".into()));
        }
        for k in &keyframes {
            if !(0.0..360.0).contains(&k.azimuth_deg) {
                return Err(Error::InvalidArgument(format!(
                    "keyframe azimuth {} outside [0, 360)",
                    k.azimuth_deg
                )));
            }
        }
        Ok(Self { keyframes, kind })
    }

    pub fn statically_at(azimuth_deg: f64, radius_m: f64, height_m: f64) -> Result<Self> {
        Self::new(
            vec![Keyframe { time_s: 0.0, azimuth_deg, radius_m, height_m }],
            TrajectoryKind::Static,
        )
    }

    fn segment(&self, t: f64) -> (Keyframe, Keyframe, f64) {
        let kf = &self.keyframes;
        if t <= kf[0].time_s || kf.len() == 1 {
            return (kf[0], kf[0], 0.0);
        }
        for w in kf.windows(2) {
            if t <= w[1].time_s {
                let u = (t - w[0].time_s) / (w[1].time_s - w[0].time_s);
                return (w[0], w[1], u);
            }
        }
        let last = *kf.last().unwrap();
        (last, last, 0.0)
    }

    /// Azimuth in [0, 360) at time `t`, shortest-arc interpolation.
    pub fn azimuth_at(&self, t: f64) -> f64 {
        let (a, b, u) = self.segment(t);
        let delta = (b.azimuth_deg - a.azimuth_deg + 540.0).rem_euclid(360.0) - 180.0;
        wrap_deg(a.azimuth_deg + delta * u)
    }

    /// Absolute position at time `t` given the array centroid.
    pub fn position_at(&self, t: f64, centroid: Point3) -> Point3 {
        let (a, b, u) = self.segment(t);
        let az = self.azimuth_at(t).to_radians();
        let r = a.radius_m + (b.radius_m - a.radius_m) * u;
        let h = a.height_m + (b.height_m - a.height_m) * u;
        [centroid[0] + r * az.cos(), centroid[1] + r * az.sin(), centroid[2] + h]
    }

    pub fn duration(&self) -> f64 {
        self.keyframes.last().unwrap().time_s
    }
}

/// Multichannel room impulse response.
#[derive(Debug, Clone, PartialEq)]
pub struct Rir {
    /// taps[mic][sample]
    pub taps: Vec<Vec<f64>>,
    pub sample_rate: u32,
}

impl Rir {
    pub fn num_channels(&self) -> usize {
        self.taps.len()
    }

    pub fn len(&self) -> usize {
        self.taps.first().map(|t| t.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

const SINC_HALF: isize = 40; // 81-tap windowed sinc

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

fn sinc_window(x: f64) -> f64 {
    // Hann taper over the 81-tap support.
    let half = SINC_HALF as f64 + 0.5;
    if x.abs() >= half {
        0.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * x / half).cos())
    }
}

/// Per-dimension image positions with their wall-hit counts:
/// even images 2kL + x (|2k| hits), odd images 2kL - x (|2k - 1| hits).
fn axis_images(x: f64, l: f64, order: isize) -> Vec<(f64, isize)> {
    let mut v = Vec::new();
    let kmax = order / 2 + 1;
    for k in -kmax..=kmax {
        let even_hits = (2 * k).abs();
        if even_hits <= order {
            v.push((2.0 * k as f64 * l + x, even_hits));
        }
        let odd_hits = (2 * k - 1).abs();
        if odd_hits <= order {
            v.push((2.0 * k as f64 * l - x, odd_hits));
        }
    }
    v
}

/// Calibrate the wall energy coefficient so the Schroeder RT60 of a generated
/// RIR matches `room.rt60`. A specular lattice with the raw Sabine coefficient
/// decays anisotropically (Eyring-fast on average, slower along long room
/// axes), so a fixed formula misses by well over 20% for many rooms. Instead,
/// measure the decay of the lattice's own energy histogram at a coarse rate
/// and Newton-adjust the per-hit energy factor. Depends only on the room and
/// the listening point, so for a moving source it can be computed once and
/// reused across segments.
fn calibrated_wall_energy(room: &RoomSpec, at: Point3) -> f64 {
    let (alpha, _) = sabine_absorption(room);
    let order = room.max_image_order as isize;
    let c = room.speed_of_sound;
    let xs = axis_images(at[0], room.dimensions[0], order);
    let ys = axis_images(at[1], room.dimensions[1], order);
    let zs = axis_images(at[2], room.dimensions[2], order);
    let mut max_d2 = 0.0f64;
    for (imgs, dim) in [(&xs, 0), (&ys, 1), (&zs, 2)] {
        let m = imgs.iter().map(|(p, _)| (p - at[dim]).abs()).fold(0.0f64, f64::max);
        max_d2 += m * m;
    }
    let sr_cal = 2_000.0f64;
    let cal_len = (max_d2.sqrt() / c * sr_cal).ceil() as usize + 2;
    let mut rho = (-alpha).exp(); // Eyring-inverted starting guess
    for _ in 0..4 {
        let mut hist = vec![0.0f64; cal_len];
        for &(px, hx) in &xs {
            for &(py, hy) in &ys {
                if hx + hy > order {
                    continue;
                }
                for &(pz, hz) in &zs {
                    let hits = hx + hy + hz;
                    if hits > order {
                        continue;
                    }
                    let d = dist([px, py, pz], at);
                    if d < 1e-6 {
                        continue;
                    }
                    let idx = (d / c * sr_cal) as usize;
                    hist[idx.min(cal_len - 1)] +=
                        rho.powi(hits as i32) / (4.0 * std::f64::consts::PI * d).powi(2);
                }
            }
        }
        let amp: Vec<f64> = hist.iter().map(|e| e.sqrt()).collect();
        match schroeder_rt60(&amp, sr_cal as u32) {
            Some(rt_m) if rt_m.is_finite() && rt_m > 0.0 => {
                let ratio = (rt_m / room.rt60).clamp(0.25, 4.0);
                rho = rho.powf(ratio).clamp(1e-9, 0.999_999);
                if (ratio - 1.0).abs() < 0.01 {
                    break;
                }
            }
            _ => break, // decay range unreachable at this image order
        }
    }
    rho
}

/// Image-source-model RIR for a static source.
///
/// Each image up to `max_image_order` wall hits contributes
/// `(-sqrt(rho))^hits / (4 pi d)` at delay `d / c`, placed with an 81-tap
/// windowed-sinc fractional-delay kernel, where `rho` is the calibrated
/// per-hit energy coefficient.
pub fn simulate_rir(
    room: &RoomSpec,
    source: Point3,
    array: &ArrayGeometry,
    sample_rate: u32,
) -> Result<Rir> {
    let rho = calibrated_wall_energy(room, array.centroid());
    simulate_rir_with_rho(room, source, array, sample_rate, rho)
}

fn simulate_rir_with_rho(
    room: &RoomSpec,
    source: Point3,
    array: &ArrayGeometry,
    sample_rate: u32,
    rho: f64,
) -> Result<Rir> {
    if !room.contains(source, 0.0) {
        return Err(Error::Geometry(format!("source {source:?} outside room")));
    }
    for (i, m) in array.mic_positions.iter().enumerate() {
        if !room.contains(*m, 0.0) {
            return Err(Error::Geometry(format!("mic {i} outside room")));
        }
        if dist(source, *m) <= 0.1 {
            return Err(Error::Geometry(format!("source within 0.1 m of mic {i}")));
        }
    }

    let order = room.max_image_order as isize;
    let c = room.speed_of_sound;
    let sr = sample_rate as f64;

    let xs = axis_images(source[0], room.dimensions[0], order);
    let ys = axis_images(source[1], room.dimensions[1], order);
    let zs = axis_images(source[2], room.dimensions[2], order);

    // Bound the tap buffer by the farthest admissible image.
    let mut max_d2 = 0.0f64;
    for (imgs, dim) in [(&xs, 0), (&ys, 1), (&zs, 2)] {
        let m = imgs
            .iter()
            .flat_map(|(p, _)| array.mic_positions.iter().map(move |mic| (p - mic[dim]).abs()))
            .fold(0.0f64, f64::max);
        max_d2 += m * m;
    }
    let len = (max_d2.sqrt() / c * sr).ceil() as usize + 2 * SINC_HALF as usize + 2;
    let mut taps = vec![vec![0.0f64; len]; array.num_mics()];

    // negative pressure-reflection sign; an all-positive image train piles up
    // into a spurious DC component and halves the measured decay rate
    let reflect = -rho.sqrt();

    for &(px, hx) in &xs {
        for &(py, hy) in &ys {
            if hx + hy > order {
                continue;
            }
            for &(pz, hz) in &zs {
                let hits = hx + hy + hz;
                if hits > order {
                    continue;
                }
                let gain = reflect.powi(hits as i32);
                for (mic, out) in array.mic_positions.iter().zip(taps.iter_mut()) {
                    let d = dist([px, py, pz], *mic);
                    if d < 1e-6 {
                        continue;
                    }
                    let amp = gain / (4.0 * std::f64::consts::PI * d);
                    let delay = d / c * sr;
                    let center = delay.round() as isize;
                    let frac = delay - center as f64;
                    for i in -SINC_HALF..=SINC_HALF {
                        let idx = center + i;
                        if idx < 0 || idx as usize >= len {
                            continue;
                        }
                        let x = i as f64 - frac;
                        out[idx as usize] += amp * sinc(x) * sinc_window(x);
                    }
                }
            }
        }
    }

    Ok(Rir { taps, sample_rate })
}

/// Linear convolution via FFT.
pub fn fft_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let ifft = planner.plan_fft_inverse(n);

    let mut fa: Vec<Complex<f64>> = a.iter().map(|&x| Complex::new(x, 0.0)).collect();
    fa.resize(n, Complex::new(0.0, 0.0));
    let mut fb: Vec<Complex<f64>> = b.iter().map(|&x| Complex::new(x, 0.0)).collect();
    fb.resize(n, Complex::new(0.0, 0.0));
    fft.process(&mut fa);
    fft.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    ifft.process(&mut fa);
    let scale = 1.0 / n as f64;
    fa[..out_len].iter().map(|c| c.re * scale).collect()
}

/// Per-mic convolution of a dry mono signal with an RIR, truncated to the dry
/// signal's length.
pub fn render_static_source(dry: &Waveform, rir: &Rir) -> Result<Waveform> {
    if dry.num_channels() != 1 {
        return Err(Error::ShapeMismatch { expected: vec![1], got: vec![dry.num_channels()] });
    }
    if dry.sample_rate() != rir.sample_rate {
        return Err(Error::SampleRateMismatch { expected: dry.sample_rate(), got: rir.sample_rate });
    }
    let len = dry.num_samples();
    let channels = rir
        .taps
        .iter()
        .map(|taps| {
            let mut y = fft_convolve(dry.channel(0), taps);
            y.resize(len, 0.0);
            y
        })
        .collect();
    Waveform::new(channels, dry.sample_rate())
}

/// Spatialize a moving source by piecewise-static RIRs.
///
/// The trajectory is discretized at `hop_s` intervals; each segment gets its
/// own RIR and segments are cross-faded with 50%-overlapping raised-cosine
/// windows. Returns the rendered waveform and the trajectory azimuth sampled
/// at each label-frame center, wrapped to [0, 360).
pub fn render_moving_source(
    dry: &Waveform,
    room: &RoomSpec,
    traj: &SourceTrajectory,
    array: &ArrayGeometry,
    hop_s: f64,
) -> Result<(Waveform, Vec<f64>)> {
    if traj.kind != TrajectoryKind::Moving {
        return Err(Error::InvalidArgument("render_moving_source needs a moving trajectory".into()));
    }
    if !(hop_s > 0.0) {
        return Err(Error::InvalidArgument(format!("hop_s must be > 0, got {hop_s}")));
    }
    if dry.num_channels() != 1 {
        return Err(Error::ShapeMismatch { expected: vec![1], got: vec![dry.num_channels()] });
    }
    let sr = dry.sample_rate();
    let len = dry.num_samples();
    let hop = (hop_s * sr as f64).round() as usize;
    if hop == 0 || len == 0 {
        return Err(Error::InvalidArgument("hop or signal empty".into()));
    }
    let centroid = array.centroid();
    // The wall calibration depends only on the room and the array, so run it
    // once instead of per segment.
    let rho = calibrated_wall_energy(room, centroid);

    // Windows k = 0..=segments, Hann of length 2*hop hopped by hop: exact COLA.
    let segments = len.div_ceil(hop);
    let mut out = vec![vec![0.0f64; len]; array.num_mics()];
    for k in 0..=segments {
        let t_k = (k * hop).min(len) as f64 / sr as f64;
        let pos = traj.position_at(t_k, centroid);
        if !room.contains(pos, 0.0) {
            return Err(Error::Geometry(format!("trajectory leaves room at t = {t_k:.3} s: {pos:?}")));
        }
        let rir = simulate_rir_with_rho(room, pos, array, sr, rho)?;

        let start = (k as isize - 1) * hop as isize;
        let lo = start.max(0) as usize;
        let hi = ((start + 2 * hop as isize) as usize).min(len);
        if lo >= hi {
            continue;
        }
        let chunk: Vec<f64> = (lo..hi)
            .map(|i| {
                let o = (i as isize - start) as f64;
                let w = 0.5 * (1.0 - (std::f64::consts::PI * o / hop as f64).cos());
                dry.channel(0)[i] * w
            })
            .collect();
        for (mic, dst) in out.iter_mut().enumerate() {
            let y = fft_convolve(&chunk, &rir.taps[mic]);
            for (j, v) in y.iter().enumerate() {
                let idx = lo + j;
                if idx < len {
                    dst[idx] += v;
                }
            }
        }
    }

    let duration = len as f64 / sr as f64;
    let n_labels = (duration / hop_s).ceil() as usize;
    let azimuths = (0..n_labels)
        .map(|k| {
            let t = ((k as f64 + 0.5) * hop_s).min(duration);
            traj.azimuth_at(t)
        })
        .collect();

    Ok((Waveform::new(out, sr)?, azimuths))
}

/// How a source enters the mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceRole {
    /// Spatialized through a room impulse response.
    Directional,
    /// Injected identically into all channels, no inter-channel cues.
    Additive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSource {
    pub role: SourceRole,
    /// Present for directional sources only.
    pub trajectory: Option<SourceTrajectory>,
    pub gain_db: f64,
}

/// Scene sampling protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    OneDirectionalOneAdditive,
    TwoDirectional,
    Moving,
}

impl Protocol {
    pub fn as_str(&self) -> &'static str {
        match self {
            Protocol::OneDirectionalOneAdditive => "1dir1add",
            Protocol::TwoDirectional => "2dir",
            Protocol::Moving => "moving",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "1dir1add" => Ok(Protocol::OneDirectionalOneAdditive),
            "2dir" => Ok(Protocol::TwoDirectional),
            "moving" => Ok(Protocol::Moving),
            other => Err(Error::InvalidArgument(format!("unknown protocol {other:?}"))),
        }
    }
}

/// A fully sampled scene: room, array, and sources with mixing gains.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub room: RoomSpec,
    pub array: ArrayGeometry,
    pub sources: Vec<SceneSource>,
    pub seed: u64,
}

impl SceneSpec {
    /// Position of the first directional source at time `t`.
    pub fn directional_position_at(&self, t: f64) -> Option<Point3> {
        let centroid = self.array.centroid();
        self.sources
            .iter()
            .find(|s| s.role == SourceRole::Directional)
            .and_then(|s| s.trajectory.as_ref())
            .map(|traj| traj.position_at(t, centroid))
    }
}

const WALL_MARGIN: f64 = 0.15;

/// Draw a random scene. Deterministic for a given seed.
///
/// Room dims ~ U[5,15] m, RT60 ~ U[0.5,1.0] s, horizontal square array with
/// side ~ U[0.10,0.13] m at height ~ U[1.0,1.2] m, centered +-1 m jitter.
/// Directional sources at radius U[1,3] m, height offset U[-0.5,0.5] m;
/// moving sources sweep at U[5,20] deg/s.
pub fn sample_scene(seed: u64, protocol: Protocol, duration_s: f64) -> Result<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [
        rng.gen_range(5.0..15.0),
        rng.gen_range(5.0..15.0),
        rng.gen_range(5.0..15.0),
    ];
    let rt60 = rng.gen_range(0.5..1.0);
    let room = RoomSpec::new(dims, rt60)?;

    let side = rng.gen_range(0.10..0.13);
    let height = rng.gen_range(1.0..1.2);
    let cx = dims[0] / 2.0 + rng.gen_range(-1.0..1.0);
    let cy = dims[1] / 2.0 + rng.gen_range(-1.0..1.0);
    let h = side / 2.0;
    let array = ArrayGeometry::new(vec![
        [cx - h, cy - h, height],
        [cx - h, cy + h, height],
        [cx + h, cy - h, height],
        [cx + h, cy + h, height],
    ])?;
    let centroid = [cx, cy, height];

    let draw_static = |rng: &mut ChaCha8Rng| -> Result<SourceTrajectory> {
        for _ in 0..1000 {
            let radius = rng.gen_range(1.0..3.0);
            let azimuth = rng.gen_range(0.0..360.0);
            let hoff = rng.gen_range(-0.5..0.5);
            let traj = SourceTrajectory::statically_at(azimuth, radius, hoff)?;
            if room.contains(traj.position_at(0.0, centroid), WALL_MARGIN) {
                return Ok(traj);
            }
        }
        Err(Error::Geometry("could not place static source inside room".into()))
    };

    let mut sources = Vec::new();
    match protocol {
        Protocol::OneDirectionalOneAdditive => {
            let traj = draw_static(&mut rng)?;
            let g0 = rng.gen_range(-6.0..6.0);
            let g1 = rng.gen_range(-6.0..6.0);
            sources.push(SceneSource { role: SourceRole::Directional, trajectory: Some(traj), gain_db: g0 });
            sources.push(SceneSource { role: SourceRole::Additive, trajectory: None, gain_db: g1 });
        }
        Protocol::TwoDirectional => {
            let t0 = draw_static(&mut rng)?;
            let t1 = draw_static(&mut rng)?;
            let g0 = rng.gen_range(-6.0..6.0);
            let g1 = rng.gen_range(-6.0..6.0);
            sources.push(SceneSource { role: SourceRole::Directional, trajectory: Some(t0), gain_db: g0 });
            sources.push(SceneSource { role: SourceRole::Directional, trajectory: Some(t1), gain_db: g1 });
        }
        Protocol::Moving => {
            let mut traj = None;
            'outer: for _ in 0..1000 {
                let radius = rng.gen_range(1.0..3.0);
                let az0 = rng.gen_range(0.0..360.0);
                let hoff = rng.gen_range(-0.5..0.5);
                let speed = rng.gen_range(5.0..20.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                // Keyframes every second keep per-segment sweeps well under
                // the 180 deg shortest-arc ambiguity.
                let steps = duration_s.ceil() as usize;
                let mut keyframes = Vec::with_capacity(steps + 1);
                for k in 0..=steps {
                    let t = (k as f64).min(duration_s);
                    keyframes.push(Keyframe {
                        time_s: t,
                        azimuth_deg: wrap_deg(az0 + speed * t),
                        radius_m: radius,
                        height_m: hoff,
                    });
                }
                let cand = SourceTrajectory::new(keyframes, TrajectoryKind::Moving)?;
                let mut t = 0.0;
                while t <= duration_s {
                    if !room.contains(cand.position_at(t, centroid), WALL_MARGIN) {
                        continue 'outer;
                    }
                    t += 0.05;
                }
                traj = Some(cand);
                break;
            }
            let traj = traj.ok_or_else(|| Error::Geometry("could not place moving source".into()))?;
            let g0 = rng.gen_range(-6.0..6.0);
            let g1 = rng.gen_range(-6.0..6.0);
            sources.push(SceneSource { role: SourceRole::Directional, trajectory: Some(traj), gain_db: g0 });
            sources.push(SceneSource { role: SourceRole::Additive, trajectory: None, gain_db: g1 });
        }
    }

    Ok(SceneSpec { room, array, sources, seed })
}

const RIR_MAGIC: &[u8; 4] = b"TQRR";

/// Write an RIR in the external exchange format: magic "TQRR", u32 version,
/// u32 channels, u32 sample_rate, u64 taps_per_channel, channel-major
/// float32 little-endian taps.
pub fn save_external_rir(path: impl AsRef<Path>, rir: &Rir) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(RIR_MAGIC)?;
    out.write_all(&1u32.to_le_bytes())?;
    out.write_all(&(rir.num_channels() as u32).to_le_bytes())?;
    out.write_all(&rir.sample_rate.to_le_bytes())?;
    out.write_all(&(rir.len() as u64).to_le_bytes())?;
    for ch in &rir.taps {
        for &t in ch {
            out.write_all(&(t as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Read an RIR written by [`save_external_rir`] (or produced externally).
pub fn load_external_rir(path: impl AsRef<Path>) -> Result<Rir> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != RIR_MAGIC {
        return Err(Error::Format("bad RIR magic".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != 1 {
        return Err(Error::Format(format!("unsupported RIR version {version}")));
    }
    r.read_exact(&mut b4)?;
    let channels = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4)?;
    let sample_rate = u32::from_le_bytes(b4);
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let per = u64::from_le_bytes(b8) as usize;
    if channels == 0 || per == 0 {
        return Err(Error::Format("empty RIR".into()));
    }
    let mut taps = Vec::with_capacity(channels);
    for _ in 0..channels {
        let mut ch = Vec::with_capacity(per);
        for _ in 0..per {
            r.read_exact(&mut b4)?;
            ch.push(f32::from_le_bytes(b4) as f64);
        }
        taps.push(ch);
    }
    Ok(Rir { taps, sample_rate })
}

/// Schroeder backward-integration RT60 estimate from a single-channel RIR.
///
/// Fits the energy decay curve between -5 and -25 dB and extrapolates the
/// slope to -60 dB. Returns None when the RIR has too little decay range.
pub fn schroeder_rt60(taps: &[f64], sample_rate: u32) -> Option<f64> {
    if taps.is_empty() {
        return None;
    }
    let mut edc = vec![0.0f64; taps.len()];
    let mut acc = 0.0;
    for (i, &t) in taps.iter().enumerate().rev() {
        acc += t * t;
        edc[i] = acc;
    }
    let total = edc[0];
    if total <= 0.0 {
        return None;
    }
    let db: Vec<f64> = edc.iter().map(|e| 10.0 * (e / total).max(1e-30).log10()).collect();
    let i5 = db.iter().position(|&d| d <= -5.0)?;
    let i35 = db.iter().position(|&d| d <= -35.0)?;
    if i35 <= i5 + 2 {
        return None;
    }
    // Least-squares slope of db vs time on [i5, i35].
    let n = (i35 - i5 + 1) as f64;
    let sr = sample_rate as f64;
    let (mut st, mut sd, mut stt, mut std_) = (0.0, 0.0, 0.0, 0.0);
    for i in i5..=i35 {
        let t = i as f64 / sr;
        st += t;
        sd += db[i];
        stt += t * t;
        std_ += t * db[i];
    }
    let slope = (n * std_ - st * sd) / (n * stt - st * st);
    if slope >= 0.0 {
        return None;
    }
    Some(-60.0 / slope)
}
