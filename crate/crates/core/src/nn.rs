//! Minimal dense layers over flat parameter buffers, with hand-written backward passes.
//!
//! A layer's parameters occupy `outputs * inputs` weights (row-major, one row per
//! output) followed by `outputs` biases.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearShape {
    pub inputs: usize,
    pub outputs: usize,
}

impl LinearShape {
    pub const fn new(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs }
    }

    pub const fn weight_count(&self) -> usize {
        self.inputs * self.outputs
    }

    pub const fn param_count(&self) -> usize {
        self.weight_count() + self.outputs
    }

    /// `out = W x + b`.
    pub fn forward(&self, params: &[f64], x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(params.len(), self.param_count());
        debug_assert_eq!(x.len(), self.inputs);
        let (w, b) = params.split_at(self.weight_count());
        for (o, (row, bias)) in out.iter_mut().zip(w.chunks_exact(self.inputs).zip(b)) {
            *o = bias + dot(row, x);
        }
    }

    /// Accumulates parameter gradients and, when requested, the input gradient.
    pub fn backward(&self, params: &[f64], x: &[f64], grad_out: &[f64], grad_params: &mut [f64], grad_x: Option<&mut [f64]>) {
        let nw = self.weight_count();
        {
            let (gw, gb) = grad_params.split_at_mut(nw);
            for (o, &g) in grad_out.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                gb[o] += g;
                for (gwi, xi) in gw[o * self.inputs..(o + 1) * self.inputs].iter_mut().zip(x) {
                    *gwi += g * xi;
                }
            }
        }
        if let Some(gx) = grad_x {
            let w = &params[..nw];
            for (o, &g) in grad_out.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                for (gxi, wi) in gx.iter_mut().zip(&w[o * self.inputs..(o + 1) * self.inputs]) {
                    *gxi += g * wi;
                }
            }
        }
    }

    /// Glorot-uniform weights and zero biases.
    pub fn init<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let limit = (6.0 / (self.inputs + self.outputs) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bound");
        let mut p: Vec<f64> = (0..self.weight_count()).map(|_| dist.sample(rng)).collect();
        p.resize(self.param_count(), 0.0);
        p
    }

    /// He-normal weights (for ReLU trunks) and zero biases.
    pub fn init_he<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let dist = Normal::new(0.0, (2.0 / self.inputs as f64).sqrt()).expect("positive std");
        let mut p: Vec<f64> = (0..self.weight_count()).map(|_| dist.sample(rng)).collect();
        p.resize(self.param_count(), 0.0);
        p
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Adaptive-moment optimizer state for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; len], v: vec![0.0; len], steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "optimizer sized for a different group");
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Exponential decay from `start` at step 0 to `end` at `total - 1`.
pub fn exponential_lr(start: f64, end: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return start;
    }
    let frac = step.min(total - 1) as f64 / (total - 1) as f64;
    start * (end / start).powf(frac)
}
