//! Trainable parameters and the Adam optimizer.

use rand::Rng;

use super::{numel, Element, Grads, Tape, Var};
use crate::error::{Error, Result};

/// Named trainable tensor with accumulated gradient and Adam state.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub grad: Vec<T>,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Element> Parameter<T> {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::ShapeMismatch { expected: shape.to_vec(), got: vec![data.len()] });
        }
        let n = data.len();
        Ok(Self {
            name: name.into(),
            shape: shape.to_vec(),
            data,
            grad: vec![T::zero(); n],
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        })
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = numel(shape);
        Self::new(name, shape, vec![T::zero(); n]).unwrap()
    }

    /// Uniform init in [-scale, scale].
    pub fn uniform(name: impl Into<String>, shape: &[usize], scale: f64, rng: &mut impl Rng) -> Self {
        let n = numel(shape);
        let data = (0..n).map(|_| T::of(rng.gen_range(-scale..scale))).collect();
        Self::new(name, shape, data).unwrap()
    }

    /// Glorot-style uniform init for a (fan_in, fan_out) weight.
    pub fn glorot(name: impl Into<String>, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let scale = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self::uniform(name, shape, scale, rng)
    }

    /// Bind this parameter onto a tape as a grad-requiring leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Var {
        tape.leaf(&self.shape, self.data.clone(), true).unwrap()
    }

    /// Add the gradient of `var` from a backward pass into `self.grad`.
    pub fn accumulate(&mut self, grads: &Grads<T>, var: Var) {
        if let Some(g) = grads.wrt(var) {
            for (a, &b) in self.grad.iter_mut().zip(g) {
                *a = *a + b;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grad {
            *g = T::zero();
        }
    }
}

/// Adam optimizer state shared across a parameter set.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0 }
    }

    /// One update step over all parameters; gradients are zeroed afterwards.
    /// Returns an error and leaves parameters untouched if any gradient is
    /// not finite.
    pub fn step<T: Element>(&mut self, params: &mut [&mut Parameter<T>]) -> Result<()> {
        for p in params.iter() {
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerics(format!(
                    "non-finite gradient in parameter '{}'",
                    p.name
                )));
            }
        }
        self.t += 1;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let one = T::one();
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let lr = T::of(self.lr);
        let eps = T::of(self.eps);
        let ibc1 = T::of(1.0 / bc1);
        let ibc2 = T::of(1.0 / bc2);
        for p in params.iter_mut() {
            for i in 0..p.data.len() {
                let g = p.grad[i];
                p.m[i] = b1 * p.m[i] + (one - b1) * g;
                p.v[i] = b2 * p.v[i] + (one - b2) * g * g;
                let mhat = p.m[i] * ibc1;
                let vhat = p.v[i] * ibc2;
                p.data[i] = p.data[i] - lr * mhat / (vhat.sqrt() + eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}
