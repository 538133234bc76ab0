//! Position-wise projectors into the common embedding space.
//!
//! Activations are stored row-major as `features x columns`; for a visual map
//! the columns are grid positions, which is exactly the channel-major layout
//! of [`FeatureMap`]. For audio the columns are batch samples.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, EmbeddingVector, FeatureMap};

/// Stack of affine layers with a rectifier between consecutive layers.
///
/// Parameters live in one flat buffer, layer by layer, weight (`out x in`,
/// row-major) before bias, so an optimizer can treat them as a single slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    params: Vec<f64>,
}

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    cols: usize,
    /// `activations[k]` feeds layer `k`; the last entry is the output.
    activations: Vec<Vec<f64>>,
    /// Pre-rectifier values of every hidden layer.
    hidden_pre: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace has an output")
    }

    pub fn columns(&self) -> usize {
        self.cols
    }

    /// Distance of the nearest hidden pre-activation to the rectifier kink.
    pub fn min_abs_preactivation(&self) -> f64 {
        self.hidden_pre
            .iter()
            .flatten()
            .fold(f64::INFINITY, |m, x| m.min(x.abs()))
    }
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl Mlp {
    fn check_dims(dims: &[usize]) -> Result<()> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidConfig(format!("invalid layer dims {dims:?}")));
        }
        Ok(())
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::check_dims(dims)?;
        Ok(Self {
            dims: dims.to_vec(),
            params: vec![0.0; param_count(dims)],
        })
    }

    /// Uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn xavier(dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut mlp = Self::zeros(dims)?;
        for k in 0..mlp.layers() {
            let (fan_in, fan_out) = (dims[k], dims[k + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let (w, _) = mlp.layer_mut(k);
            for x in w.iter_mut() {
                *x = rng.gen_range(-bound..=bound);
            }
        }
        Ok(mlp)
    }

    pub fn from_params(dims: &[usize], params: Vec<f64>) -> Result<Self> {
        Self::check_dims(dims)?;
        if params.len() != param_count(dims) {
            return Err(Error::ShapeMismatch(format!(
                "dims {dims:?} need {} parameters, got {}",
                param_count(dims),
                params.len()
            )));
        }
        if params.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("projector parameters"));
        }
        Ok(Self {
            dims: dims.to_vec(),
            params,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().expect("at least two dims")
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn offset(&self, k: usize) -> usize {
        param_count(&self.dims[..=k])
    }

    /// Weight (`out x in`) and bias of layer `k`.
    pub fn layer(&self, k: usize) -> (&[f64], &[f64]) {
        let (i, o) = (self.dims[k], self.dims[k + 1]);
        let start = self.offset(k);
        let (w, rest) = self.params[start..start + o * i + o].split_at(o * i);
        (w, rest)
    }

    pub fn layer_mut(&mut self, k: usize) -> (&mut [f64], &mut [f64]) {
        let (i, o) = (self.dims[k], self.dims[k + 1]);
        let start = self.offset(k);
        self.params[start..start + o * i + o].split_at_mut(o * i)
    }

    pub fn forward(&self, x: &[f64], cols: usize) -> Result<MlpTrace> {
        if x.len() != self.in_dim() * cols {
            return Err(Error::ShapeMismatch(format!(
                "projector expects {} x {cols} inputs, got {}",
                self.in_dim(),
                x.len()
            )));
        }
        let mut activations = vec![x.to_vec()];
        let mut hidden_pre = Vec::new();
        for k in 0..self.layers() {
            let (w, b) = self.layer(k);
            let (n_in, n_out) = (self.dims[k], self.dims[k + 1]);
            let input = activations.last().expect("non-empty");
            let mut y = vec![0.0; n_out * cols];
            for o in 0..n_out {
                let row = &mut y[o * cols..(o + 1) * cols];
                row.fill(b[o]);
                for i in 0..n_in {
                    let wi = w[o * n_in + i];
                    if wi == 0.0 {
                        continue;
                    }
                    for (yp, xp) in row.iter_mut().zip(&input[i * cols..(i + 1) * cols]) {
                        *yp += wi * xp;
                    }
                }
            }
            if k + 1 < self.layers() {
                let relu = y.iter().map(|v| v.max(0.0)).collect();
                hidden_pre.push(y);
                activations.push(relu);
            } else {
                activations.push(y);
            }
        }
        Ok(MlpTrace {
            cols,
            activations,
            hidden_pre,
        })
    }

    /// Returns `(parameter gradient, input gradient)` for output gradient `dy`.
    pub fn backward(&self, trace: &MlpTrace, dy: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let cols = trace.cols;
        let mut grad = vec![0.0; self.params.len()];
        let mut delta = dy.to_vec();
        for k in (0..self.layers()).rev() {
            let (n_in, n_out) = (self.dims[k], self.dims[k + 1]);
            let (w, _) = self.layer(k);
            let input = &trace.activations[k];
            let start = self.offset(k);
            let (gw, gb) = grad[start..start + n_out * n_in + n_out].split_at_mut(n_out * n_in);
            let mut dx = vec![0.0; n_in * cols];
            for o in 0..n_out {
                let d = &delta[o * cols..(o + 1) * cols];
                gb[o] = d.iter().sum();
                for i in 0..n_in {
                    let xi = &input[i * cols..(i + 1) * cols];
                    gw[o * n_in + i] = dot(d, xi);
                    let wi = w[o * n_in + i];
                    for (dxp, dp) in dx[i * cols..(i + 1) * cols].iter_mut().zip(d) {
                        *dxp += wi * dp;
                    }
                }
            }
            if k > 0 {
                for (g, pre) in dx.iter_mut().zip(&trace.hidden_pre[k - 1]) {
                    if *pre <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            delta = dx;
        }
        (grad, delta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualVariant {
    SingleLinear,
    LinearReluLinear,
}

/// 1x1-convolution projector for visual maps.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualProjector {
    pub mlp: Mlp,
}

impl VisualProjector {
    pub fn new(variant: VisualVariant, c_in: usize, hidden: usize, c_out: usize, rng: &mut impl Rng) -> Result<Self> {
        let dims = match variant {
            VisualVariant::SingleLinear => vec![c_in, c_out],
            VisualVariant::LinearReluLinear => vec![c_in, hidden, c_out],
        };
        Ok(Self {
            mlp: Mlp::xavier(&dims, rng)?,
        })
    }

    /// Square single-layer projector that returns its input.
    pub fn identity(c: usize) -> Result<Self> {
        let mut mlp = Mlp::zeros(&[c, c])?;
        let (w, _) = mlp.layer_mut(0);
        for k in 0..c {
            w[k * c + k] = 1.0;
        }
        Ok(Self { mlp })
    }

    pub fn variant(&self) -> VisualVariant {
        if self.mlp.layers() == 1 {
            VisualVariant::SingleLinear
        } else {
            VisualVariant::LinearReluLinear
        }
    }

    pub fn project(&self, z: &FeatureMap) -> Result<(FeatureMap, MlpTrace)> {
        if z.channels() != self.mlp.in_dim() {
            return Err(Error::ShapeMismatch(format!(
                "visual projector expects {} channels, got {}",
                self.mlp.in_dim(),
                z.channels()
            )));
        }
        let trace = self.mlp.forward(z.data(), z.positions())?;
        let out = FeatureMap::new(self.mlp.out_dim(), z.height(), z.width(), trace.output().to_vec())?;
        Ok((out, trace))
    }

    pub fn backward(&self, trace: &MlpTrace, grad_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
        self.mlp.backward(trace, grad_out)
    }
}

/// FC-ReLU-FC projector for audio vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioProjector {
    pub mlp: Mlp,
}

impl AudioProjector {
    pub fn new(c_in: usize, hidden: usize, c_out: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::xavier(&[c_in, hidden, c_out], rng)?,
        })
    }

    pub fn project(&self, z: &EmbeddingVector) -> Result<EmbeddingVector> {
        let (mut out, _) = self.project_batch(std::slice::from_ref(z))?;
        Ok(out.remove(0))
    }

    /// Projects a batch at once; samples become the columns of the trace.
    pub fn project_batch(&self, batch: &[EmbeddingVector]) -> Result<(Vec<EmbeddingVector>, MlpTrace)> {
        let d = self.mlp.in_dim();
        let n = batch.len();
        let mut x = vec![0.0; d * n];
        for (col, v) in batch.iter().enumerate() {
            if v.dim() != d {
                return Err(
                    Error::ShapeMismatch(format!("audio projector expects dim {d}, got {}", v.dim())).at_sample(col),
                );
            }
            for (c, &value) in v.as_slice().iter().enumerate() {
                x[c * n + col] = value;
            }
        }
        let trace = self.mlp.forward(&x, n)?;
        let y = trace.output();
        let out_dim = self.mlp.out_dim();
        let outputs = (0..n)
            .map(|col| EmbeddingVector::new((0..out_dim).map(|c| y[c * n + col]).collect()))
            .collect::<Result<Vec<_>>>()?;
        Ok((outputs, trace))
    }

    /// Parameter gradient from per-sample output gradients.
    pub fn backward(&self, trace: &MlpTrace, grads: &[Vec<f64>]) -> Vec<f64> {
        let n = trace.columns();
        let out_dim = self.mlp.out_dim();
        let mut dy = vec![0.0; out_dim * n];
        for (col, g) in grads.iter().enumerate() {
            for (c, &value) in g.iter().enumerate() {
                dy[c * n + col] = value;
            }
        }
        self.mlp.backward(trace, &dy).0
    }
}
