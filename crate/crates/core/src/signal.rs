//! Time-domain audio containers and the STFT front end.
//!
//! Everything downstream (room simulation, GCC-PHAT features, evaluation)
//! operates on [`Waveform`] and [`ComplexSpectrogram`].

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Multichannel time-domain audio, channel-major, nominal range [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    channels: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl Waveform {
    /// Build a waveform, validating the container invariants: at least one
    /// channel, equal channel lengths, positive sample rate, finite samples.
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample_rate must be > 0".into()));
        }
        if channels.is_empty() {
            return Err(Error::InvalidArgument("waveform needs >= 1 channel".into()));
        }
        let len = channels[0].len();
        for (i, ch) in channels.iter().enumerate() {
            if ch.len() != len {
                return Err(Error::ShapeMismatch {
                    expected: vec![channels.len(), len],
                    got: vec![i, ch.len()],
                });
            }
            if ch.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerics(format!("non-finite sample in channel {i}")));
            }
        }
        Ok(Self { channels, sample_rate })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Self::new(vec![samples], sample_rate)
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn num_samples(&self) -> usize {
        self.channels[0].len()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_seconds(&self) -> f64 {
        self.num_samples() as f64 / self.sample_rate as f64
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.channels[i]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    /// Root-mean-square over all channels.
    pub fn rms(&self) -> f64 {
        let n: usize = self.channels.iter().map(|c| c.len()).sum();
        if n == 0 {
            return 0.0;
        }
        let e: f64 = self.channels.iter().flatten().map(|x| x * x).sum();
        (e / n as f64).sqrt()
    }
}

/// Window function for the STFT.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Hann,
}

/// STFT analysis parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub window: Window,
}

impl StftConfig {
    pub fn new(n_fft: usize, hop: usize) -> Result<Self> {
        if !n_fft.is_power_of_two() || n_fft == 0 {
            return Err(Error::InvalidArgument(format!("n_fft must be a power of two, got {n_fft}")));
        }
        if hop == 0 || hop > n_fft {
            return Err(Error::InvalidArgument(format!("hop must satisfy 0 < hop <= n_fft, got {hop}")));
        }
        Ok(Self { n_fft, hop, window: Window::Hann })
    }

    pub fn num_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frame count for a signal of `len` samples: floor((len - n_fft)/hop) + 1.
    pub fn num_frames(&self, len: usize) -> Option<usize> {
        if len < self.n_fft {
            None
        } else {
            Some((len - self.n_fft) / self.hop + 1)
        }
    }

    pub fn window_values(&self) -> Vec<f64> {
        match self.window {
            Window::Hann => (0..self.n_fft)
                .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / self.n_fft as f64).cos()))
                .collect(),
        }
    }
}

impl Default for StftConfig {
    /// n_fft 1024, hop 640.
    fn default() -> Self {
        Self { n_fft: 1024, hop: 640, window: Window::Hann }
    }
}

/// One-sided complex spectrogram, frame-major: `bins[t * num_bins + b]`.
#[derive(Debug, Clone)]
pub struct ComplexSpectrogram {
    pub bins: Vec<Complex<f64>>,
    pub num_frames: usize,
    pub num_bins: usize,
    pub frame_rate: f64,
    pub config: StftConfig,
}

impl ComplexSpectrogram {
    pub fn frame(&self, t: usize) -> &[Complex<f64>] {
        &self.bins[t * self.num_bins..(t + 1) * self.num_bins]
    }
}

/// Windowed DFT of frames `[t*hop, t*hop + n_fft)` of a single channel.
pub fn stft(samples: &[f64], sample_rate: u32, cfg: StftConfig) -> Result<ComplexSpectrogram> {
    let n = cfg.n_fft;
    if samples.len() < n {
        return Err(Error::InputTooShort { needed: n, got: samples.len() });
    }
    let frames = cfg.num_frames(samples.len()).unwrap();
    let bins = cfg.num_bins();
    let window = cfg.window_values();

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut out = Vec::with_capacity(frames * bins);

    for t in 0..frames {
        let start = t * cfg.hop;
        for i in 0..n {
            buf[i] = Complex::new(samples[start + i] * window[i], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        out.extend_from_slice(&buf[..bins]);
    }

    Ok(ComplexSpectrogram {
        bins: out,
        num_frames: frames,
        num_bins: bins,
        frame_rate: sample_rate as f64 / cfg.hop as f64,
        config: cfg,
    })
}

/// STFT of every channel of a waveform.
pub fn stft_multichannel(w: &Waveform, cfg: StftConfig) -> Result<Vec<ComplexSpectrogram>> {
    w.channels().iter().map(|ch| stft(ch, w.sample_rate(), cfg)).collect()
}

/// Force a waveform to exactly `round(seconds * sample_rate)` samples per
/// channel. Truncation keeps the head; padding appends zeros.
pub fn pad_or_truncate(w: &Waveform, seconds: f64) -> Result<Waveform> {
    if !(seconds > 0.0) {
        return Err(Error::InvalidArgument(format!("seconds must be > 0, got {seconds}")));
    }
    let target = (seconds * w.sample_rate() as f64).round() as usize;
    let channels = w
        .channels()
        .iter()
        .map(|ch| {
            let mut out = ch.clone();
            out.resize(target, 0.0);
            out
        })
        .collect();
    Waveform::new(channels, w.sample_rate())
}

/// Sample-wise sum of gain-scaled inputs; gain factor is 10^(gain_db/20).
pub fn mix(inputs: &[(&Waveform, f64)]) -> Result<Waveform> {
    let (first, _) = inputs
        .first()
        .ok_or_else(|| Error::InvalidArgument("mix needs >= 1 input".into()))?;
    let channels = first.num_channels();
    let len = first.num_samples();
    let rate = first.sample_rate();
    let mut acc = vec![vec![0.0f64; len]; channels];
    for (w, gain_db) in inputs {
        if w.sample_rate() != rate {
            return Err(Error::SampleRateMismatch { expected: rate, got: w.sample_rate() });
        }
        if w.num_channels() != channels || w.num_samples() != len {
            return Err(Error::ShapeMismatch {
                expected: vec![channels, len],
                got: vec![w.num_channels(), w.num_samples()],
            });
        }
        let g = 10f64.powf(gain_db / 20.0);
        for (dst, src) in acc.iter_mut().zip(w.channels()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += g * s;
            }
        }
    }
    Waveform::new(acc, rate)
}
