//! Time-conditioned deformation of canonical Gaussians.

use nalgebra::{DMatrix, DMatrixView, Vector3, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Gaussian;
use crate::error::{Error, Result};
use crate::nn::LinearShape;

/// `[x, sin(2^0 π x), cos(2^0 π x), …, sin(2^(L-1) π x), cos(2^(L-1) π x)]`, each block over all components.
pub fn positional_encoding(x: &[f64], freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() * (2 * freqs + 1));
    out.extend_from_slice(x);
    for l in 0..freqs {
        let w = (1u64 << l) as f64 * std::f64::consts::PI;
        out.extend(x.iter().map(|v| (w * v).sin()));
        out.extend(x.iter().map(|v| (w * v).cos()));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeformationConfig {
    pub position_freqs: usize,
    pub time_freqs: usize,
    pub depth: usize,
    pub width: usize,
    /// Index of the hidden layer whose input is concatenated with the encoded input.
    pub skip_layer: usize,
}

impl Default for DeformationConfig {
    fn default() -> Self {
        Self { position_freqs: 10, time_freqs: 6, depth: 8, width: 256, skip_layer: 4 }
    }
}

impl DeformationConfig {
    /// Narrow trunk for tests and toy scenes.
    pub fn narrow(width: usize) -> Self {
        Self { width, ..Self::default() }
    }

    pub fn input_dim(&self) -> usize {
        3 * (2 * self.position_freqs + 1) + 2 * self.time_freqs + 1
    }

    /// Trunk layers followed by the joint head (`δx`, `δs`, `δq`).
    pub fn shapes(&self) -> Vec<LinearShape> {
        let d = self.input_dim();
        let mut shapes: Vec<LinearShape> = (0..self.depth)
            .map(|i| {
                let inputs = match i {
                    0 => d,
                    i if i == self.skip_layer => self.width + d,
                    _ => self.width,
                };
                LinearShape::new(inputs, self.width)
            })
            .collect();
        shapes.push(LinearShape::new(self.width, HEAD));
        shapes
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 {
            return Err(Error::Config("deformation network needs at least one non-empty layer".into()));
        }
        if self.skip_layer == 0 || self.skip_layer >= self.depth {
            return Err(Error::Config(format!("skip layer {} must lie in 1..{}", self.skip_layer, self.depth)));
        }
        Ok(())
    }
}

const HEAD: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Offsets {
    pub dx: Vector3<f64>,
    pub ds: Vector3<f64>,
    pub dq: Vector4<f64>,
}

impl Offsets {
    fn from_slice(v: &[f64]) -> Self {
        Self {
            dx: Vector3::new(v[0], v[1], v[2]),
            ds: Vector3::new(v[3], v[4], v[5]),
            dq: Vector4::new(v[6], v[7], v[8], v[9]),
        }
    }

    fn write(&self, out: &mut [f64]) {
        out[..3].copy_from_slice(self.dx.as_slice());
        out[3..6].copy_from_slice(self.ds.as_slice());
        out[6..10].copy_from_slice(self.dq.as_slice());
    }

    pub fn apply(&self, g: &Gaussian) -> Gaussian {
        Gaussian { mu: g.mu + self.dx, log_scale: g.log_scale + self.ds, rotation: g.rotation + self.dq, ..*g }
    }
}

/// Activations kept from a batched forward pass.
#[derive(Debug, Clone)]
pub struct DeformationTrace {
    input: DMatrix<f64>,
    /// Post-activation output of every trunk layer.
    hidden: Vec<DMatrix<f64>>,
}

impl DeformationTrace {
    pub fn len(&self) -> usize {
        self.input.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.input.nrows() == 0
    }
}

/// ReLU trunk over encoded `(position, time)` with a zero-initialized output head.
///
/// Weights follow the flat row-major layout of [`LinearShape`], which doubles as a
/// column-major `inputs × outputs` matrix for batched products.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    config: DeformationConfig,
    shapes: Vec<LinearShape>,
    offsets: Vec<usize>,
    params: Vec<f64>,
}

impl DeformationField {
    pub fn new(config: DeformationConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let shapes = config.shapes();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut offsets = Vec::with_capacity(shapes.len() + 1);
        for (i, s) in shapes.iter().enumerate() {
            offsets.push(params.len());
            if i + 1 == shapes.len() {
                params.resize(params.len() + s.param_count(), 0.0);
            } else {
                params.extend(s.init_he(&mut rng));
            }
        }
        offsets.push(params.len());
        Ok(Self { config, shapes, offsets, params })
    }

    pub fn from_params(config: DeformationConfig, params: Vec<f64>) -> Result<Self> {
        let mut field = Self::new(config, 0)?;
        if params.len() != field.params.len() {
            return Err(Error::Shape(format!("expected {} deformation parameters, got {}", field.params.len(), params.len())));
        }
        field.params = params;
        Ok(field)
    }

    pub fn config(&self) -> &DeformationConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Bias of the output head, laid out as `δx`, `δs`, `δq`.
    pub fn head_bias_mut(&mut self) -> &mut [f64] {
        let end = self.params.len();
        &mut self.params[end - HEAD..end]
    }

    fn encode(&self, mu: &Vector3<f64>, t: f64) -> Vec<f64> {
        let mut v = positional_encoding(mu.as_slice(), self.config.position_freqs);
        v.extend(positional_encoding(&[t], self.config.time_freqs));
        v
    }

    fn layer(&self, i: usize) -> (DMatrixView<'_, f64>, &[f64]) {
        let s = self.shapes[i];
        let p = &self.params[self.offsets[i]..self.offsets[i + 1]];
        let (w, b) = p.split_at(s.weight_count());
        (DMatrixView::from_slice(w, s.inputs, s.outputs), b)
    }

    /// Offsets for every canonical position at normalized time `t`.
    pub fn forward(&self, positions: &[Vector3<f64>], t: f64) -> (Vec<Offsets>, DeformationTrace) {
        let n = positions.len();
        let d = self.config.input_dim();
        let mut input = DMatrix::zeros(n, d);
        for (r, mu) in positions.iter().enumerate() {
            for (c, v) in self.encode(mu, t).into_iter().enumerate() {
                input[(r, c)] = v;
            }
        }
        let mut hidden: Vec<DMatrix<f64>> = Vec::with_capacity(self.config.depth);
        for i in 0..self.config.depth {
            let x = self.layer_input(i, &input, &hidden);
            let (w, b) = self.layer(i);
            let mut h = x * w;
            for mut row in h.row_iter_mut() {
                for (v, bias) in row.iter_mut().zip(b) {
                    *v = (*v + bias).max(0.0);
                }
            }
            hidden.push(h);
        }
        let (w, b) = self.layer(self.config.depth);
        let out = hidden.last().expect("non-empty trunk") * w;
        let offsets = (0..n)
            .map(|r| {
                let row: Vec<f64> = (0..HEAD).map(|c| out[(r, c)] + b[c]).collect();
                Offsets::from_slice(&row)
            })
            .collect();
        (offsets, DeformationTrace { input, hidden })
    }

    fn layer_input(&self, i: usize, input: &DMatrix<f64>, hidden: &[DMatrix<f64>]) -> DMatrix<f64> {
        match i {
            0 => input.clone(),
            i if i == self.config.skip_layer => {
                let prev = &hidden[i - 1];
                let mut x = DMatrix::zeros(prev.nrows(), prev.ncols() + input.ncols());
                x.columns_mut(0, prev.ncols()).copy_from(prev);
                x.columns_mut(prev.ncols(), input.ncols()).copy_from(input);
                x
            }
            _ => hidden[i - 1].clone(),
        }
    }

    /// Accumulates parameter gradients for upstream offset gradients; the encoded input is a constant.
    pub fn backward(&self, trace: &DeformationTrace, grad: &[Offsets], grad_params: &mut [f64]) {
        assert_eq!(grad.len(), trace.len(), "one gradient per traced position");
        assert_eq!(grad_params.len(), self.params.len());
        let n = trace.len();
        let mut g_out = DMatrix::zeros(n, HEAD);
        let mut row = [0.0; HEAD];
        for (r, g) in grad.iter().enumerate() {
            g.write(&mut row);
            for c in 0..HEAD {
                g_out[(r, c)] = row[c];
            }
        }
        let mut upstream = g_out;
        for i in (0..=self.config.depth).rev() {
            let x = if i == self.config.depth {
                trace.hidden[i - 1].clone()
            } else {
                self.layer_input(i, &trace.input, &trace.hidden)
            };
            let s = self.shapes[i];
            let gp = &mut grad_params[self.offsets[i]..self.offsets[i + 1]];
            let (gw, gb) = gp.split_at_mut(s.weight_count());
            let dw = x.transpose() * &upstream;
            for (a, b) in gw.iter_mut().zip(dw.as_slice()) {
                *a += b;
            }
            for (c, b) in gb.iter_mut().enumerate() {
                *b += upstream.column(c).sum();
            }
            if i == 0 {
                break;
            }
            let (w, _) = self.layer(i);
            let gx = &upstream * w.transpose();
            // at the skip layer the trailing columns belong to the constant input
            let mut gh = gx.columns(0, self.config.width).into_owned();
            let h = &trace.hidden[i - 1];
            gh.zip_apply(h, |g, y| {
                if y <= 0.0 {
                    *g = 0.0;
                }
            });
            upstream = gh;
        }
    }

    /// Deformed copies of `canonical` at time `t`.
    pub fn deform(&self, canonical: &[Gaussian], t: f64) -> (Vec<Gaussian>, Vec<Offsets>, DeformationTrace) {
        let positions: Vec<Vector3<f64>> = canonical.iter().map(|g| g.mu).collect();
        let (offsets, trace) = self.forward(&positions, t);
        let deformed = canonical.iter().zip(&offsets).map(|(g, o)| o.apply(g)).collect();
        (deformed, offsets, trace)
    }
}
