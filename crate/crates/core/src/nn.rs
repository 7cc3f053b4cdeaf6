//! Dense feedforward networks with a hand-written reverse pass and Adam.
//!
//! Parameters of all layers live in one flat buffer so optimizers and
//! checkpoints treat a network as a single vector. Layer `l` stores its
//! weight as an `inputs x outputs` row-major block followed by its bias, and
//! computes `act(x W + b)` for a row-major batch `x`.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::linalg::{gemm_slices, Matrix, Trans};
use crate::math;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl LayerShape {
    fn weight_len(&self) -> usize {
        self.inputs * self.outputs
    }

    fn param_len(&self) -> usize {
        self.weight_len() + self.outputs
    }
}

#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "RawNet"))]
pub struct DenseNet {
    layers: Vec<LayerShape>,
    params: Vec<f64>,
    dropout_p: f64,
    #[cfg_attr(feature = "serde", serde(skip))]
    generation: u64,
}

// The tape generation is bookkeeping, not part of the network's value.
impl PartialEq for DenseNet {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.params == other.params && self.dropout_p == other.dropout_p
    }
}

#[cfg(feature = "serde")]
#[derive(serde::Deserialize)]
struct RawNet {
    layers: Vec<LayerShape>,
    params: Vec<f64>,
    dropout_p: f64,
}

#[cfg(feature = "serde")]
impl TryFrom<RawNet> for DenseNet {
    type Error = Error;

    fn try_from(raw: RawNet) -> Result<Self> {
        Self::from_parts(raw.layers, raw.params, raw.dropout_p)
    }
}

impl DenseNet {
    /// Builds a network with the given layer widths (`widths[0]` is the input
    /// dimension). Hidden layers use ReLU, the last layer is linear. Weights
    /// are drawn uniformly with fan-in scaling; biases start at zero.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], dropout_p: f64, rng: &mut R) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidConfig("a network needs at least one layer".into()));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| LayerShape {
                inputs: w[0],
                outputs: w[1],
                activation: if i + 2 == widths.len() { Activation::Identity } else { Activation::Relu },
            })
            .collect();
        Self::with_layers(layers, dropout_p, rng)
    }

    pub fn with_layers<R: Rng + ?Sized>(layers: Vec<LayerShape>, dropout_p: f64, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeroed(layers, dropout_p)?;
        let mut offset = 0;
        for layer in net.layers.clone() {
            let gain = match layer.activation {
                Activation::Relu => 6.0,
                Activation::Identity => 3.0,
            };
            let bound = math::sqrt(gain / layer.inputs.max(1) as f64);
            for w in &mut net.params[offset..offset + layer.weight_len()] {
                *w = rng.gen_range(-bound..=bound);
            }
            offset += layer.param_len();
        }
        Ok(net)
    }

    /// All-zero parameters.
    pub fn zeroed(layers: Vec<LayerShape>, dropout_p: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("a network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::ShapeMismatch { expected: pair[0].outputs, got: pair[1].inputs });
            }
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(Error::InvalidConfig("dropout probability must lie in [0, 1)".into()));
        }
        let total = layers.iter().map(LayerShape::param_len).sum();
        Ok(Self { layers, params: vec![0.0; total], dropout_p, generation: 0 })
    }

    pub fn from_parts(layers: Vec<LayerShape>, params: Vec<f64>, dropout_p: f64) -> Result<Self> {
        let mut net = Self::zeroed(layers, dropout_p)?;
        if params.len() != net.params.len() {
            return Err(Error::ShapeMismatch { expected: net.params.len(), got: params.len() });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidConfig("non-finite parameter".into()));
        }
        net.params = params;
        Ok(net)
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn dropout_p(&self) -> f64 {
        self.dropout_p
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable access to the flat parameter vector. Invalidates outstanding
    /// tapes.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.generation = self.generation.wrapping_add(1);
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// `(weight, bias)` slices of layer `l`.
    pub fn layer_params(&self, l: usize) -> (&[f64], &[f64]) {
        let offset: usize = self.layers[..l].iter().map(LayerShape::param_len).sum();
        let shape = self.layers[l];
        let w = &self.params[offset..offset + shape.weight_len()];
        let b = &self.params[offset + shape.weight_len()..offset + shape.param_len()];
        (w, b)
    }

    /// Forward pass. Dropout is applied to hidden activations only when an
    /// RNG is supplied (train mode), with inverted `1 / (1 - p)` scaling.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        batch: &Matrix,
        dropout_rng: Option<&mut R>,
    ) -> Result<(Matrix, GradientTape)> {
        if batch.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch { expected: self.input_dim(), got: batch.cols() });
        }
        let n = batch.rows();
        let mut rng = dropout_rng;
        let train = rng.is_some() && self.dropout_p > 0.0;
        let keep_scale = 1.0 / (1.0 - self.dropout_p);
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut masks = Vec::with_capacity(self.layers.len());
        activations.push(batch.clone());
        let mut offset = 0;
        for (l, layer) in self.layers.iter().enumerate() {
            let w = &self.params[offset..offset + layer.weight_len()];
            let b = &self.params[offset + layer.weight_len()..offset + layer.param_len()];
            offset += layer.param_len();
            let mut z = Matrix::zeros(n, layer.outputs);
            for i in 0..n {
                z.row_mut(i).copy_from_slice(b);
            }
            let input = &activations[l];
            gemm_slices(
                1.0,
                input.as_slice(),
                (n, layer.inputs),
                Trans::No,
                w,
                (layer.inputs, layer.outputs),
                Trans::No,
                1.0,
                z.as_mut_slice(),
                (n, layer.outputs),
            );
            if layer.activation == Activation::Relu {
                for v in z.as_mut_slice() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            let is_hidden = l + 1 < self.layers.len();
            let mask = match (&mut rng, train && is_hidden) {
                (Some(r), true) => {
                    let m: Vec<f64> = (0..n * layer.outputs)
                        .map(|_| if r.gen::<f64>() < self.dropout_p { 0.0 } else { keep_scale })
                        .collect();
                    for (v, k) in z.as_mut_slice().iter_mut().zip(&m) {
                        *v *= k;
                    }
                    Some(m)
                }
                _ => None,
            };
            masks.push(mask);
            activations.push(z);
        }
        let output = activations[activations.len() - 1].clone();
        let tape = GradientTape { activations, masks, generation: self.generation, layers: self.layers.clone() };
        Ok((output, tape))
    }

    /// Evaluation-mode forward pass without keeping a tape.
    pub fn predict(&self, batch: &Matrix) -> Result<Matrix> {
        self.forward::<rand_chacha::ChaCha8Rng>(batch, None).map(|(out, _)| out)
    }

    /// Reverse pass: given `dL/d(output)`, returns parameter gradients and
    /// `dL/d(input)`.
    pub fn backward(&self, tape: &GradientTape, output_grads: &Matrix) -> Result<Gradients> {
        if tape.generation != self.generation || tape.layers != self.layers {
            return Err(Error::StaleTape);
        }
        let n = tape.activations[0].rows();
        if output_grads.rows() != n || output_grads.cols() != self.output_dim() {
            return Err(Error::ShapeMismatch {
                expected: n * self.output_dim(),
                got: output_grads.rows() * output_grads.cols(),
            });
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut g = output_grads.clone();
        let mut offset = self.params.len();
        for l in (0..self.layers.len()).rev() {
            let layer = self.layers[l];
            offset -= layer.param_len();
            let out = &tape.activations[l + 1];
            if let Some(mask) = &tape.masks[l] {
                for (gv, k) in g.as_mut_slice().iter_mut().zip(mask) {
                    *gv *= k;
                }
            }
            if layer.activation == Activation::Relu {
                for (gv, a) in g.as_mut_slice().iter_mut().zip(out.as_slice()) {
                    if *a <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            let input = &tape.activations[l];
            let (gw, gb) = grads[offset..offset + layer.param_len()].split_at_mut(layer.weight_len());
            gemm_slices(
                1.0,
                input.as_slice(),
                (n, layer.inputs),
                Trans::Yes,
                g.as_slice(),
                (n, layer.outputs),
                Trans::No,
                0.0,
                gw,
                (layer.inputs, layer.outputs),
            );
            for i in 0..n {
                for (b, v) in gb.iter_mut().zip(g.row(i)) {
                    *b += v;
                }
            }
            let w = &self.params[offset..offset + layer.weight_len()];
            let mut prev = Matrix::zeros(n, layer.inputs);
            gemm_slices(
                1.0,
                g.as_slice(),
                (n, layer.outputs),
                Trans::No,
                w,
                (layer.inputs, layer.outputs),
                Trans::Yes,
                0.0,
                prev.as_mut_slice(),
                (n, layer.inputs),
            );
            g = prev;
        }
        Ok(Gradients { params: grads, input: g })
    }
}

/// Cached activations of one forward pass.
#[derive(Debug, Clone)]
pub struct GradientTape {
    activations: Vec<Matrix>,
    masks: Vec<Option<Vec<f64>>>,
    generation: u64,
    layers: Vec<LayerShape>,
}

impl GradientTape {
    pub fn output(&self) -> &Matrix {
        &self.activations[self.activations.len() - 1]
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// Same layout as [`DenseNet::params`].
    pub params: Vec<f64>,
    /// Gradient with respect to the input batch.
    pub input: Matrix,
}

/// Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::ShapeMismatch { expected: params.len(), got: grads.len() });
    }
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::ShapeMismatch { expected: params.len(), got: state.m.len() });
    }
    let (b1, b2) = betas;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - libm::pow(b1, t as f64);
    let c2 = 1.0 - libm::pow(b2, t as f64);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (math::sqrt(v_hat) + eps);
    }
    Ok(())
}

/// Adam bundled with its hyperparameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Self { config, state: AdamState::new(num_params) }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        self.step_with_lr(params, grads, self.config.lr)
    }

    pub fn step_with_lr(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        let c = self.config;
        adam_step(params, grads, &mut self.state, lr, (c.beta1, c.beta2), c.eps)
    }
}

/// `base * (1 + cos(pi * t / total)) / 2`.
pub fn cosine_lr(base: f64, t: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * (1.0 + math::cos(core::f64::consts::PI * t as f64 / total as f64)) / 2.0
}

/// Trunk output split into its stable and unstable parts.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitRepresentation {
    pub phi_s: Vec<f64>,
    pub phi_u: Vec<f64>,
}

impl SplitRepresentation {
    pub fn concat(&self) -> Vec<f64> {
        let mut v = self.phi_s.clone();
        v.extend_from_slice(&self.phi_u);
        v
    }
}

pub fn split(trunk_output: &[f64], dim_s: usize) -> Result<SplitRepresentation> {
    let width = trunk_output.len();
    if dim_s == 0 || dim_s >= width {
        return Err(Error::BadSplit { dim_s, width });
    }
    Ok(SplitRepresentation { phi_s: trunk_output[..dim_s].to_vec(), phi_u: trunk_output[dim_s..].to_vec() })
}

/// Row-wise [`split`] of a batch.
pub fn split_batch(trunk_output: &Matrix, dim_s: usize) -> Result<(Matrix, Matrix)> {
    let width = trunk_output.cols();
    if dim_s == 0 || dim_s >= width {
        return Err(Error::BadSplit { dim_s, width });
    }
    Ok((trunk_output.columns(0, dim_s), trunk_output.columns(dim_s, width)))
}
