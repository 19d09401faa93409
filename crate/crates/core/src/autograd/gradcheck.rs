//! Central-difference gradient verification.

use super::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compare the reverse-mode gradient of a scalar-valued function against
/// central finite differences with step `h`, in f64.
///
/// `f` builds the graph from a single leaf input and must return a scalar.
pub fn grad_check<F>(f: F, shape: &[usize], x: &[f64], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::<f64>::new();
        let input = tape.leaf(shape, x.to_vec(), true)?;
        let out = f(&mut tape, input)?;
        let grads = tape.backward(out)?;
        grads
            .wrt(input)
            .ok_or_else(|| Error::Numerics("no gradient reached the input".into()))?
            .to_vec()
    };

    let eval = |data: &[f64]| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let input = tape.leaf(shape, data.to_vec(), false)?;
        let out = f(&mut tape, input)?;
        Ok(tape.value_scalar(out))
    };

    let mut max_rel_err = 0.0;
    let mut worst_index = 0;
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = eval(&xp)?;
        xp[i] = orig - h;
        let fm = eval(&xp)?;
        xp[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport { max_rel_err, worst_index, checked: x.len() })
}
