//! DOA target encoding, training loss, decoding, and the evaluation metric.
//!
//! Azimuths live on a 360-bin circle (bin i = degree i). Targets are
//! circularly-wrapped Gaussians normalized to distributions; the loss is the
//! accumulated absolute difference between the softmaxed model output and
//! the target, and the metric is the circular mean absolute error.

use crate::autograd::{Element, Tape, Var};
use crate::error::{Error, Result};

pub const NUM_BINS: usize = 360;
pub const DEFAULT_SIGMA_SQ: f64 = 5.0;

#[derive(Debug, Clone, Copy)]
pub struct DoaTarget {
    pub azimuth_deg: f64,
    pub sigma_sq: f64,
}

impl DoaTarget {
    pub fn new(azimuth_deg: f64) -> Result<Self> {
        Self::with_sigma_sq(azimuth_deg, DEFAULT_SIGMA_SQ)
    }

    pub fn with_sigma_sq(azimuth_deg: f64, sigma_sq: f64) -> Result<Self> {
        if !(0.0..360.0).contains(&azimuth_deg) || !azimuth_deg.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "azimuth {azimuth_deg} outside [0, 360)"
            )));
        }
        if !(sigma_sq > 0.0) {
            return Err(Error::InvalidArgument(format!("sigma_sq {sigma_sq} must be positive")));
        }
        Ok(Self { azimuth_deg, sigma_sq })
    }
}

#[derive(Debug, Clone)]
pub struct DoaDistribution {
    pub probs: Vec<f64>,
}

impl DoaDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() != NUM_BINS {
            return Err(Error::ShapeMismatch { expected: vec![NUM_BINS], got: vec![probs.len()] });
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Numerics("distribution has negative or non-finite mass".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Numerics(format!("distribution sums to {sum}, not 1")));
        }
        Ok(Self { probs })
    }
}

/// Circular distance in degrees between bin center `i` and azimuth `d`.
fn circ_delta(i: usize, d: f64) -> f64 {
    let raw = (i as f64 - d).abs() % 360.0;
    raw.min(360.0 - raw)
}

/// Circularly-wrapped Gaussian over the 360 bins, normalized to sum 1.
pub fn encode_doa_target(t: &DoaTarget) -> DoaDistribution {
    let mut probs = vec![0.0; NUM_BINS];
    let inv = 1.0 / (2.0 * t.sigma_sq);
    for (i, p) in probs.iter_mut().enumerate() {
        let delta = circ_delta(i, t.azimuth_deg);
        *p = (-delta * delta * inv).exp();
    }
    let sum: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }
    DoaDistribution { probs }
}

/// Accumulated absolute difference between softmax(logits) and the target,
/// built on the tape so it is differentiable. `logits` must be rank-1 of
/// length 360.
pub fn emd_loss<T: Element>(tape: &mut Tape<T>, logits: Var, y: &DoaDistribution) -> Result<Var> {
    if tape.shape(logits) != [NUM_BINS] {
        return Err(Error::ShapeMismatch {
            expected: vec![NUM_BINS],
            got: tape.shape(logits).to_vec(),
        });
    }
    if tape.data(logits).iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerics("non-finite logits in loss".into()));
    }
    let probs = tape.softmax(logits)?;
    let target = tape.constant(&[NUM_BINS], y.probs.iter().map(|&p| T::of(p)).collect())?;
    let diff = tape.sub(probs, target)?;
    let a = tape.abs(diff);
    Ok(tape.sum(a))
}

/// Batched variant: `logits` is (n, 360), targets one per row; returns the
/// mean of the per-row losses.
pub fn emd_loss_batch<T: Element>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &[DoaDistribution],
) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[1] != NUM_BINS || shape[0] != targets.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![targets.len(), NUM_BINS],
            got: shape,
        });
    }
    if tape.data(logits).iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerics("non-finite logits in loss".into()));
    }
    let probs = tape.softmax(logits)?;
    let mut flat = Vec::with_capacity(targets.len() * NUM_BINS);
    for t in targets {
        flat.extend(t.probs.iter().map(|&p| T::of(p)));
    }
    let target = tape.constant(&shape, flat)?;
    let diff = tape.sub(probs, target)?;
    let a = tape.abs(diff);
    let total = tape.sum(a);
    Ok(tape.scale(total, 1.0 / targets.len() as f64))
}

/// Smallest index attaining the maximum.
pub fn decode_argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean circular absolute error in degrees.
pub fn circular_mae(pred_deg: &[f64], gt_deg: &[f64]) -> Result<f64> {
    if pred_deg.is_empty() || pred_deg.len() != gt_deg.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![gt_deg.len()],
            got: vec![pred_deg.len()],
        });
    }
    let mut acc = 0.0;
    for (&p, &d) in pred_deg.iter().zip(gt_deg) {
        if !(0.0..360.0).contains(&p) || !(0.0..360.0).contains(&d) {
            return Err(Error::InvalidArgument(format!(
                "angles must lie in [0, 360), got pred {p}, gt {d}"
            )));
        }
        let mut e = (p - d).abs();
        if e > 180.0 {
            e = 360.0 - e;
        }
        acc += e;
    }
    Ok(acc / pred_deg.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn encoding_is_symmetric_around_target() {
        let y = encode_doa_target(&DoaTarget::new(180.0).unwrap());
        assert_eq!(decode_argmax(&y.probs), 180);
        assert!((y.probs[179] - y.probs[181]).abs() < 1e-15);
        let sum: f64 = y.probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn encoding_wraps_at_zero() {
        let y = encode_doa_target(&DoaTarget::new(0.0).unwrap());
        assert!((y.probs[1] - y.probs[359]).abs() < 1e-15);
        assert_eq!(decode_argmax(&y.probs), 0);
    }

    #[test]
    fn encoding_is_rotation_equivariant() {
        let base = encode_doa_target(&DoaTarget::new(37.0).unwrap());
        for k in [1usize, 90, 183, 359] {
            let shifted = encode_doa_target(&DoaTarget::new((37.0 + k as f64) % 360.0).unwrap());
            for i in 0..NUM_BINS {
                let j = (i + k) % NUM_BINS;
                assert!(
                    (base.probs[i] - shifted.probs[j]).abs() < 1e-12,
                    "k={k} i={i}"
                );
            }
        }
    }

    #[test]
    fn loss_zero_when_softmax_matches_target() {
        let y = encode_doa_target(&DoaTarget::new(90.0).unwrap());
        // logits = ln(y) gives softmax exactly y up to fp rounding
        let logits: Vec<f64> = y.probs.iter().map(|&p| p.max(1e-300).ln()).collect();
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(&[NUM_BINS], logits, false).unwrap();
        let loss = emd_loss(&mut tape, l, &y).unwrap();
        assert!(tape.value_scalar(loss) < 1e-9);
    }

    #[test]
    fn loss_against_uniform_matches_direct_sum() {
        let y = encode_doa_target(&DoaTarget::new(90.0).unwrap());
        let expected: f64 = y.probs.iter().map(|&p| (1.0 / 360.0 - p).abs()).sum();
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(&[NUM_BINS], vec![0.0; NUM_BINS], false).unwrap();
        let loss = emd_loss(&mut tape, l, &y).unwrap();
        assert!((tape.value_scalar(loss) - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_is_bounded_by_two() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..20 {
            let y = encode_doa_target(&DoaTarget::new(rng.gen_range(0.0..360.0)).unwrap());
            let logits: Vec<f64> = (0..NUM_BINS).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let mut tape = Tape::<f64>::new();
            let l = tape.leaf(&[NUM_BINS], logits, false).unwrap();
            let loss = emd_loss(&mut tape, l, &y).unwrap();
            let v = tape.value_scalar(loss);
            assert!((0.0..=2.0 + 1e-12).contains(&v));
        }
    }

    #[test]
    fn loss_rejects_nan_logits() {
        let y = encode_doa_target(&DoaTarget::new(10.0).unwrap());
        let mut logits = vec![0.0; NUM_BINS];
        logits[7] = f64::NAN;
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(&[NUM_BINS], logits, false).unwrap();
        assert!(emd_loss(&mut tape, l, &y).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(9);
        let y = encode_doa_target(&DoaTarget::new(123.0).unwrap());
        let logits: Vec<f64> = (0..NUM_BINS).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = grad_check(
            |t, l| emd_loss(t, l, &y),
            &[NUM_BINS],
            &logits,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }

    #[test]
    fn batch_loss_is_mean_of_rows() {
        let ya = encode_doa_target(&DoaTarget::new(10.0).unwrap());
        let yb = encode_doa_target(&DoaTarget::new(200.0).unwrap());
        let mut rng = StdRng::seed_from_u64(21);
        let la: Vec<f64> = (0..NUM_BINS).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lb: Vec<f64> = (0..NUM_BINS).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let single = |l: &[f64], y: &DoaDistribution| {
            let mut tape = Tape::<f64>::new();
            let v = tape.leaf(&[NUM_BINS], l.to_vec(), false).unwrap();
            let loss = emd_loss(&mut tape, v, y).unwrap();
            tape.value_scalar(loss)
        };
        let expected = 0.5 * (single(&la, &ya) + single(&lb, &yb));

        let mut tape = Tape::<f64>::new();
        let mut flat = la.clone();
        flat.extend_from_slice(&lb);
        let l = tape.leaf(&[2, NUM_BINS], flat, false).unwrap();
        let loss = emd_loss_batch(&mut tape, l, &[ya, yb]).unwrap();
        assert!((tape.value_scalar(loss) - expected).abs() < 1e-12);
    }

    #[test]
    fn argmax_decoding() {
        let mut v = vec![0.0; NUM_BINS];
        v[42] = 1.0;
        assert_eq!(decode_argmax(&v), 42);
        let mut tie = vec![0.0; NUM_BINS];
        tie[10] = 0.5;
        tie[200] = 0.5;
        assert_eq!(decode_argmax(&tie), 10);
        // monotone transform keeps the argmax
        let logit: Vec<f64> = tie.iter().map(|&p| 3.0 * p - 7.0).collect();
        assert_eq!(decode_argmax(&logit), 10);
    }

    #[test]
    fn circular_mae_unit_cases() {
        assert_eq!(circular_mae(&[359.0], &[1.0]).unwrap(), 2.0);
        assert_eq!(circular_mae(&[42.0], &[42.0]).unwrap(), 0.0);
        assert_eq!(circular_mae(&[0.0], &[180.0]).unwrap(), 180.0);
        assert!(circular_mae(&[], &[]).is_err());
        assert!(circular_mae(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn random_baseline_is_ninety_degrees() {
        let mut rng = StdRng::seed_from_u64(777);
        let n = 100_000;
        let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..360.0)).collect();
        let gt: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..360.0)).collect();
        let mae = circular_mae(&pred, &gt).unwrap();
        assert!((mae - 90.0).abs() < 2.0, "got {mae}");
    }
}
