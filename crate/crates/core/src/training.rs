//! Multi-environment training of a stable/unstable split model.
//!
//! A shared trunk `phi` produces a representation whose first `dim_s`
//! coordinates feed a linear stable head and the rest feed one linear
//! unstable head per training environment. The objective per environment is
//! the stable risk plus the risk of the fused predictor, with a stability
//! penalty on the stable head and an optional penalty on the within-class
//! cross-covariance of the two halves.
//!
//! Heads emit one logit for binary problems and `K` logits otherwise. The
//! unstable head emits an offset relative to the pooled training prior, so
//! fused logits are simply `z_S + z_U` and an all-zero unstable head leaves
//! the stable prediction unchanged.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adaptation::class_probs_from_logits;
use crate::calibration::{apply_temperature, Temperature};
use crate::envs::EnvDataset;
use crate::linalg::{gemm_slices, matmul, Matrix, Trans};
use crate::math;
use crate::nn::{cosine_lr, split_batch, Adam, AdamConfig, DenseNet, GradientTape};
use crate::prob::{clamp_probability, sigmoid_f64};
use crate::{Error, Result};

/// Stability penalty applied to the stable head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum PenaltyKind {
    #[default]
    Irmv1,
    Vrex,
}

/// Which terms of the objective are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Method {
    /// Stable and joint risks plus penalties.
    #[default]
    Sfb,
    /// Stable risk plus the stability penalty; no unstable heads.
    Irm,
    /// Pooled stable risk only.
    Erm,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub method: Method,
    pub lambda_s: f64,
    pub lambda_c: f64,
    pub penalty: PenaltyKind,
    pub lr: f64,
    pub cosine_schedule: bool,
    pub steps: usize,
    pub pretrain_steps: usize,
    /// `None` trains on full batches.
    pub batch_size: Option<usize>,
    pub hidden: Vec<usize>,
    /// Trunk output width, split into `dim_s` stable and the rest unstable.
    pub trunk_width: usize,
    pub dim_s: usize,
    pub dropout: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Sfb,
            lambda_s: 1.0,
            lambda_c: 0.0,
            penalty: PenaltyKind::Irmv1,
            lr: 1e-3,
            cosine_schedule: false,
            steps: 1000,
            pretrain_steps: 100,
            batch_size: None,
            hidden: vec![8, 8],
            trunk_width: 8,
            dim_s: 4,
            dropout: 0.0,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.pretrain_steps > self.steps {
            return bad("pretrain_steps must not exceed steps");
        }
        if !(self.lambda_s >= 0.0 && self.lambda_c >= 0.0) {
            return bad("penalty weights must be nonnegative");
        }
        if self.dim_s == 0 || self.dim_s >= self.trunk_width {
            return Err(Error::BadSplit { dim_s: self.dim_s, width: self.trunk_width });
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be positive");
        }
        Ok(())
    }
}

/// Linear map stored as `[W (inputs x outputs, row-major), b]`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LinearHead {
    pub inputs: usize,
    pub outputs: usize,
    pub params: Vec<f64>,
}

impl LinearHead {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, params: vec![0.0; inputs * outputs + outputs] }
    }

    pub fn random<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let mut head = Self::zeros(inputs, outputs);
        let bound = math::sqrt(3.0 / inputs.max(1) as f64);
        for w in &mut head.params[..inputs * outputs] {
            *w = rng.gen_range(-bound..=bound);
        }
        head
    }

    pub fn weights(&self) -> Matrix {
        Matrix::from_vec(self.inputs, self.outputs, self.params[..self.inputs * self.outputs].to_vec())
            .expect("head layout")
    }

    pub fn bias(&self) -> &[f64] {
        &self.params[self.inputs * self.outputs..]
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.inputs {
            return Err(Error::ShapeMismatch { expected: self.inputs, got: x.cols() });
        }
        let mut z = Matrix::zeros(x.rows(), self.outputs);
        for i in 0..x.rows() {
            z.row_mut(i).copy_from_slice(self.bias());
        }
        gemm_slices(
            1.0,
            x.as_slice(),
            (x.rows(), x.cols()),
            Trans::No,
            &self.params[..self.inputs * self.outputs],
            (self.inputs, self.outputs),
            Trans::No,
            1.0,
            z.as_mut_slice(),
            (x.rows(), self.outputs),
        );
        Ok(z)
    }

    /// Parameter gradient and input gradient for `dL/dz = gz`.
    fn backward(&self, x: &Matrix, gz: &Matrix) -> (Vec<f64>, Matrix) {
        let mut grads = matmul(x, Trans::Yes, gz, Trans::No).into_vec();
        let mut gb = vec![0.0; self.outputs];
        for i in 0..gz.rows() {
            for (b, v) in gb.iter_mut().zip(gz.row(i)) {
                *b += v;
            }
        }
        grads.extend(gb);
        let mut gx = Matrix::zeros(x.rows(), self.inputs);
        gemm_slices(
            1.0,
            gz.as_slice(),
            (gz.rows(), gz.cols()),
            Trans::No,
            &self.params[..self.inputs * self.outputs],
            (self.inputs, self.outputs),
            Trans::Yes,
            0.0,
            gx.as_mut_slice(),
            (x.rows(), self.inputs),
        );
        (grads, gx)
    }
}

/// Shared trunk with a stable head and per-environment unstable heads.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SfbModel {
    pub trunk: DenseNet,
    pub dim_s: usize,
    pub num_classes: usize,
    pub stable_head: LinearHead,
    pub unstable_heads: BTreeMap<usize, LinearHead>,
    /// Pooled class frequencies of the training environments.
    pub train_prior: Vec<f64>,
    pub temperature: Temperature,
}

fn head_outputs(num_classes: usize) -> usize {
    if num_classes == 2 {
        1
    } else {
        num_classes
    }
}

impl SfbModel {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        num_classes: usize,
        env_ids: &[usize],
        train_prior: Vec<f64>,
        cfg: &TrainConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if num_classes < 2 {
            return Err(Error::TooFewClasses(num_classes));
        }
        let mut widths = vec![input_dim];
        widths.extend_from_slice(&cfg.hidden);
        widths.push(cfg.trunk_width);
        let trunk = DenseNet::new(&widths, cfg.dropout, rng)?;
        let o = head_outputs(num_classes);
        let stable_head = LinearHead::random(cfg.dim_s, o, rng);
        let unstable_heads = env_ids.iter().map(|&e| (e, LinearHead::zeros(cfg.trunk_width - cfg.dim_s, o))).collect();
        Ok(Self {
            trunk,
            dim_s: cfg.dim_s,
            num_classes,
            stable_head,
            unstable_heads,
            train_prior,
            temperature: Temperature::IDENTITY,
        })
    }

    pub fn unstable_dim(&self) -> usize {
        self.trunk.output_dim() - self.dim_s
    }

    /// `(phi_S, phi_U)` in evaluation mode.
    pub fn representation(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        split_batch(&self.trunk.predict(x)?, self.dim_s)
    }

    pub fn stable_logits(&self, x: &Matrix) -> Result<Matrix> {
        let (phi_s, _) = self.representation(x)?;
        self.stable_head.apply(&phi_s)
    }

    /// Temperature-scaled stable class probabilities.
    pub fn stable_proba(&self, x: &Matrix) -> Result<Matrix> {
        Ok(apply_temperature(&self.stable_logits(x)?, self.temperature))
    }

    fn head(&self, env: usize) -> Result<&LinearHead> {
        self.unstable_heads.get(&env).ok_or(Error::UnknownEnvironment(env))
    }

    /// Unstable-head logit offsets for one training environment.
    pub fn unstable_logits(&self, x: &Matrix, env: usize) -> Result<Matrix> {
        let (_, phi_u) = self.representation(x)?;
        self.head(env)?.apply(&phi_u)
    }

    /// Logit offsets of every unstable head, concatenated per row in
    /// environment order.
    pub fn unstable_head_features(&self, x: &Matrix) -> Result<Matrix> {
        let (_, phi_u) = self.representation(x)?;
        let o = head_outputs(self.num_classes);
        let mut out = Matrix::zeros(x.rows(), o * self.unstable_heads.len());
        for (h, head) in self.unstable_heads.values().enumerate() {
            let z = head.apply(&phi_u)?;
            for i in 0..x.rows() {
                out.row_mut(i)[h * o..(h + 1) * o].copy_from_slice(z.row(i));
            }
        }
        Ok(out)
    }

    /// Unstable class probabilities of environment `env` under the pooled
    /// training prior.
    pub fn unstable_proba(&self, x: &Matrix, env: usize) -> Result<Matrix> {
        let z = self.unstable_logits(x, env)?;
        let offsets = prior_logits(&self.train_prior);
        Ok(logits_to_probs(&add_row(&z, &offsets)))
    }

    /// Fused probabilities using the unstable head of training environment
    /// `env` (uncalibrated stable logits).
    pub fn joint_proba(&self, x: &Matrix, env: usize) -> Result<Matrix> {
        let (phi_s, phi_u) = self.representation(x)?;
        let zs = self.stable_head.apply(&phi_s)?;
        let zu = self.head(env)?.apply(&phi_u)?;
        let mut z = zs;
        for (a, b) in z.as_mut_slice().iter_mut().zip(zu.as_slice()) {
            *a += b;
        }
        Ok(logits_to_probs(&z))
    }

    /// Number of trainable parameters in [`Self::flat_params`] order: trunk,
    /// stable head, unstable heads by environment id.
    pub fn num_params(&self) -> usize {
        self.trunk.num_params()
            + self.stable_head.params.len()
            + self.unstable_heads.values().map(|h| h.params.len()).sum::<usize>()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = self.trunk.params().to_vec();
        v.extend_from_slice(&self.stable_head.params);
        for h in self.unstable_heads.values() {
            v.extend_from_slice(&h.params);
        }
        v
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch { expected: self.num_params(), got: flat.len() });
        }
        let t = self.trunk.num_params();
        self.trunk.params_mut().copy_from_slice(&flat[..t]);
        let mut offset = t;
        let s = self.stable_head.params.len();
        self.stable_head.params.copy_from_slice(&flat[offset..offset + s]);
        offset += s;
        for h in self.unstable_heads.values_mut() {
            let len = h.params.len();
            h.params.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }
}

fn prior_logits(prior: &[f64]) -> Vec<f64> {
    if prior.len() == 2 {
        let p = clamp_probability(prior[1]);
        vec![math::ln(p) - math::ln_1p(-p)]
    } else {
        prior.iter().map(|p| math::ln(p.max(1e-300))).collect()
    }
}

fn add_row(z: &Matrix, offsets: &[f64]) -> Matrix {
    let mut out = z.clone();
    for i in 0..out.rows() {
        for (v, o) in out.row_mut(i).iter_mut().zip(offsets) {
            *v += o;
        }
    }
    out
}

/// Row-wise class probabilities of a logit matrix (one column = binary).
pub fn logits_to_probs(z: &Matrix) -> Matrix {
    let k = if z.cols() == 1 { 2 } else { z.cols() };
    let mut out = Matrix::zeros(z.rows(), k);
    for i in 0..z.rows() {
        out.row_mut(i).copy_from_slice(&class_probs_from_logits(z.row(i)));
    }
    out
}

/// One-hot `n x K` targets.
pub fn one_hot(labels: &[usize], k: usize) -> Matrix {
    let mut t = Matrix::zeros(labels.len(), k);
    for (i, &y) in labels.iter().enumerate() {
        t[(i, y)] = 1.0;
    }
    t
}

/// Mean negative log-likelihood of binary probabilities against (possibly
/// fractional) class-1 labels. Probabilities are clamped before the log.
pub fn cross_entropy_risk(probs: &[f64], labels: &[f64]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::LengthMismatch { left: probs.len(), right: labels.len() });
    }
    if probs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, y)| {
            let p = clamp_probability(*p);
            -(y * math::ln(p) + (1.0 - y) * math::ln(1.0 - p))
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// Soft-target cross-entropy of logits (`n x 1` binary or `n x K`) and its
/// gradient with respect to the logits.
pub fn cross_entropy_logits(logits: &Matrix, targets: &Matrix) -> Result<(f64, Matrix)> {
    let n = logits.rows();
    if n != targets.rows() {
        return Err(Error::LengthMismatch { left: n, right: targets.rows() });
    }
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let nf = n as f64;
    let mut grad = Matrix::zeros(n, logits.cols());
    let mut total = 0.0;
    if logits.cols() == 1 {
        for i in 0..n {
            let z = logits[(i, 0)];
            let y = targets[(i, 1)];
            total += y * math::softplus(-z) + (1.0 - y) * math::softplus(z);
            grad[(i, 0)] = (sigmoid_f64(z) - y) / nf;
        }
    } else {
        for i in 0..n {
            let row = logits.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + math::ln(row.iter().map(|z| math::exp(z - max)).sum::<f64>());
            for c in 0..row.len() {
                let y = targets[(i, c)];
                total += y * (lse - row[c]);
                grad[(i, c)] = (math::exp(row[c] - lse) - y) / nf;
            }
        }
    }
    Ok((total / nf, grad))
}

/// IRMv1 penalty `(mean_i dl_i/dw |_{w=1})^2` for a per-environment batch of
/// logits, with its gradient with respect to the logits.
pub fn irmv1_penalty(logits: &Matrix, targets: &Matrix) -> Result<(f64, Matrix)> {
    let n = logits.rows();
    if n == 0 {
        return Err(Error::EmptyEnvironment(0));
    }
    if n != targets.rows() {
        return Err(Error::LengthMismatch { left: n, right: targets.rows() });
    }
    let nf = n as f64;
    let mut inner = 0.0;
    let mut local = Matrix::zeros(n, logits.cols());
    if logits.cols() == 1 {
        for i in 0..n {
            let z = logits[(i, 0)];
            let s = sigmoid_f64(z);
            let y = targets[(i, 1)];
            inner += (s - y) * z;
            local[(i, 0)] = s * (1.0 - s) * z + s - y;
        }
    } else {
        for i in 0..n {
            let z = logits.row(i);
            let s = class_probs_from_logits(z);
            let sz: f64 = s.iter().zip(z).map(|(a, b)| a * b).sum();
            for c in 0..z.len() {
                let y = targets[(i, c)];
                inner += (s[c] - y) * z[c];
                local[(i, c)] = s[c] - y + s[c] * (z[c] - sz);
            }
        }
    }
    let m = inner / nf;
    for v in local.as_mut_slice() {
        *v *= 2.0 * m / nf;
    }
    Ok((m * m, local))
}

/// Population variance of environment risks and its gradient per risk.
pub fn vrex_penalty(risks: &[f64]) -> Result<(f64, Vec<f64>)> {
    let m = risks.len();
    if m < 2 {
        return Err(Error::TooFewEnvironments { needed: 2, got: m });
    }
    let mean = risks.iter().sum::<f64>() / m as f64;
    let value = risks.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / m as f64;
    let grads = risks.iter().map(|r| 2.0 * (r - mean) / m as f64).collect();
    Ok((value, grads))
}

/// Penalty value with gradients for both halves of the representation.
#[derive(Debug, Clone)]
pub struct CondIndepPenalty {
    pub value: f64,
    pub grad_s: Matrix,
    pub grad_u: Matrix,
}

/// `sum_y w_y ||Cov_y(phi_S, phi_U)||_F^2` with within-class sample
/// cross-covariances and class weights `w_y = n_y / n`.
pub fn cond_indep_penalty(phi_s: &Matrix, phi_u: &Matrix, labels: &[usize]) -> Result<CondIndepPenalty> {
    let n = labels.len();
    if phi_s.rows() != n || phi_u.rows() != n {
        return Err(Error::LengthMismatch { left: phi_s.rows().max(phi_u.rows()), right: n });
    }
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let (ds, du) = (phi_s.cols(), phi_u.cols());
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut value = 0.0;
    let mut grad_s = Matrix::zeros(n, ds);
    let mut grad_u = Matrix::zeros(n, du);
    for (&class, idx) in &by_class {
        let ny = idx.len();
        if ny < 2 {
            return Err(Error::DegenerateClass { class, count: ny });
        }
        let w = ny as f64 / n as f64;
        let mut mean_s = vec![0.0; ds];
        let mut mean_u = vec![0.0; du];
        for &i in idx {
            mean_s.iter_mut().zip(phi_s.row(i)).for_each(|(m, v)| *m += v / ny as f64);
            mean_u.iter_mut().zip(phi_u.row(i)).for_each(|(m, v)| *m += v / ny as f64);
        }
        let mut cov = Matrix::zeros(ds, du);
        let scale = 1.0 / (ny - 1) as f64;
        for &i in idx {
            for a in 0..ds {
                let ca = (phi_s[(i, a)] - mean_s[a]) * scale;
                for b in 0..du {
                    cov[(a, b)] += ca * (phi_u[(i, b)] - mean_u[b]);
                }
            }
        }
        value += w * cov.frobenius_sq();
        let g = 2.0 * w * scale;
        for &i in idx {
            let cu: Vec<f64> = (0..du).map(|b| phi_u[(i, b)] - mean_u[b]).collect();
            let cs: Vec<f64> = (0..ds).map(|a| phi_s[(i, a)] - mean_s[a]).collect();
            for a in 0..ds {
                grad_s[(i, a)] = g * (0..du).map(|b| cov[(a, b)] * cu[b]).sum::<f64>();
            }
            for b in 0..du {
                grad_u[(i, b)] = g * (0..ds).map(|a| cov[(a, b)] * cs[a]).sum::<f64>();
            }
        }
    }
    Ok(CondIndepPenalty { value, grad_s, grad_u })
}

/// A training batch from one environment.
#[derive(Debug, Clone)]
pub struct EnvBatch {
    pub env_id: usize,
    pub x: Matrix,
    /// `n x K` row-stochastic targets.
    pub targets: Matrix,
    /// Hard labels used by the conditional-independence penalty.
    pub labels: Vec<usize>,
}

impl EnvBatch {
    pub fn from_labels(env_id: usize, x: Matrix, labels: Vec<usize>, k: usize) -> Self {
        Self { env_id, targets: one_hot(&labels, k), x, labels }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EnvRisk {
    pub env_id: usize,
    /// Mean cross-entropy of the stable head.
    pub risk: f64,
    /// Mean cross-entropy of the fused predictor (0 when not trained).
    pub joint_risk: f64,
    pub irm_penalty: f64,
    pub cond_indep_penalty: f64,
}

/// Gradients in [`SfbModel::flat_params`] layout.
#[derive(Debug, Clone)]
pub struct SfbGradients {
    pub trunk: Vec<f64>,
    pub stable_head: Vec<f64>,
    pub unstable_heads: BTreeMap<usize, Vec<f64>>,
}

impl SfbGradients {
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.trunk.clone();
        v.extend_from_slice(&self.stable_head);
        for g in self.unstable_heads.values() {
            v.extend_from_slice(g);
        }
        v
    }
}

#[derive(Debug, Clone)]
pub struct Objective {
    pub value: f64,
    pub grads: SfbGradients,
    pub env_risks: Vec<EnvRisk>,
    pub stability_penalty: f64,
    pub cond_indep_penalty: f64,
}

/// Weights that switch terms of the objective on and off.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveWeights {
    pub joint: bool,
    pub lambda_s: f64,
    pub lambda_c: f64,
    pub penalty: PenaltyKind,
}

impl ObjectiveWeights {
    pub fn from_config(cfg: &TrainConfig, penalties_on: bool) -> Self {
        let (lambda_s, lambda_c) = if penalties_on { (cfg.lambda_s, cfg.lambda_c) } else { (0.0, 0.0) };
        match cfg.method {
            Method::Sfb => Self { joint: true, lambda_s, lambda_c, penalty: cfg.penalty },
            Method::Irm => Self { joint: false, lambda_s, lambda_c: 0.0, penalty: cfg.penalty },
            Method::Erm => Self { joint: false, lambda_s: 0.0, lambda_c: 0.0, penalty: cfg.penalty },
        }
    }
}

struct EnvForward {
    tape: GradientTape,
    phi_s: Matrix,
    phi_u: Matrix,
    zs: Matrix,
    zu: Option<Matrix>,
}

/// Objective value and gradients. Pass a dropout RNG for train mode.
pub fn sfb_objective<R: Rng + ?Sized>(
    model: &SfbModel,
    batches: &[EnvBatch],
    weights: ObjectiveWeights,
    mut dropout_rng: Option<&mut R>,
) -> Result<Objective> {
    if batches.is_empty() {
        return Err(Error::TooFewEnvironments { needed: 1, got: 0 });
    }
    let mut forwards = Vec::with_capacity(batches.len());
    for b in batches {
        if b.x.rows() == 0 {
            return Err(Error::EmptyEnvironment(b.env_id));
        }
        let (out, tape) = match dropout_rng.as_deref_mut() {
            Some(r) => model.trunk.forward(&b.x, Some(r))?,
            None => model.trunk.forward::<ChaCha8Rng>(&b.x, None)?,
        };
        let (phi_s, phi_u) = split_batch(&out, model.dim_s)?;
        let zs = model.stable_head.apply(&phi_s)?;
        let zu = if weights.joint { Some(model.head(b.env_id)?.apply(&phi_u)?) } else { None };
        forwards.push(EnvForward { tape, phi_s, phi_u, zs, zu });
    }

    let mut value = 0.0;
    let mut env_risks = Vec::with_capacity(batches.len());
    let mut stable_risk_grads = Vec::with_capacity(batches.len());
    let mut stable_risks = Vec::with_capacity(batches.len());
    for (b, f) in batches.iter().zip(&forwards) {
        let (r, g) = cross_entropy_logits(&f.zs, &b.targets)?;
        stable_risks.push(r);
        stable_risk_grads.push(g);
        value += r;
    }
    let vrex_grads = if weights.penalty == PenaltyKind::Vrex && weights.lambda_s > 0.0 {
        let (v, g) = vrex_penalty(&stable_risks)?;
        Some((v, g))
    } else {
        None
    };
    let mut stability = vrex_grads.as_ref().map_or(0.0, |(v, _)| *v);
    let mut cond_total = 0.0;

    let mut grads = SfbGradients {
        trunk: vec![0.0; model.trunk.num_params()],
        stable_head: vec![0.0; model.stable_head.params.len()],
        unstable_heads: model.unstable_heads.iter().map(|(e, h)| (*e, vec![0.0; h.params.len()])).collect(),
    };

    for (idx, (b, f)) in batches.iter().zip(&forwards).enumerate() {
        let mut gzs = stable_risk_grads[idx].clone();
        if let Some((_, g)) = &vrex_grads {
            let scale = 1.0 + weights.lambda_s * g[idx];
            gzs.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
        }
        let mut irm_value = 0.0;
        if weights.penalty == PenaltyKind::Irmv1 && weights.lambda_s > 0.0 {
            let (d, gd) = irmv1_penalty(&f.zs, &b.targets)?;
            irm_value = d;
            stability += d;
            for (a, v) in gzs.as_mut_slice().iter_mut().zip(gd.as_slice()) {
                *a += weights.lambda_s * v;
            }
        }
        let mut joint_risk = 0.0;
        let mut gzu = None;
        if let Some(zu) = &f.zu {
            let mut zj = f.zs.clone();
            zj.as_mut_slice().iter_mut().zip(zu.as_slice()).for_each(|(a, u)| *a += u);
            let (rj, gj) = cross_entropy_logits(&zj, &b.targets)?;
            joint_risk = rj;
            value += rj;
            gzs.as_mut_slice().iter_mut().zip(gj.as_slice()).for_each(|(a, g)| *a += g);
            gzu = Some(gj);
        }
        let (gs_head, mut g_phi_s) = model.stable_head.backward(&f.phi_s, &gzs);
        grads.stable_head.iter_mut().zip(&gs_head).for_each(|(a, g)| *a += g);
        let mut g_phi_u = Matrix::zeros(f.phi_u.rows(), f.phi_u.cols());
        if let Some(gj) = gzu {
            let head = model.head(b.env_id)?;
            let (gu_head, gpu) = head.backward(&f.phi_u, &gj);
            let acc = grads.unstable_heads.get_mut(&b.env_id).ok_or(Error::UnknownEnvironment(b.env_id))?;
            acc.iter_mut().zip(&gu_head).for_each(|(a, g)| *a += g);
            g_phi_u = gpu;
        }
        let mut ci_value = 0.0;
        if weights.lambda_c > 0.0 {
            let ci = cond_indep_penalty(&f.phi_s, &f.phi_u, &b.labels)?;
            ci_value = ci.value;
            cond_total += ci.value;
            g_phi_s.as_mut_slice().iter_mut().zip(ci.grad_s.as_slice()).for_each(|(a, g)| *a += weights.lambda_c * g);
            g_phi_u.as_mut_slice().iter_mut().zip(ci.grad_u.as_slice()).for_each(|(a, g)| *a += weights.lambda_c * g);
        }
        let n = f.phi_s.rows();
        let width = model.trunk.output_dim();
        let mut g_out = Matrix::zeros(n, width);
        for i in 0..n {
            g_out.row_mut(i)[..model.dim_s].copy_from_slice(g_phi_s.row(i));
            g_out.row_mut(i)[model.dim_s..].copy_from_slice(g_phi_u.row(i));
        }
        let tg = model.trunk.backward(&f.tape, &g_out)?;
        grads.trunk.iter_mut().zip(&tg.params).for_each(|(a, g)| *a += g);
        env_risks.push(EnvRisk {
            env_id: b.env_id,
            risk: stable_risks[idx],
            joint_risk,
            irm_penalty: irm_value,
            cond_indep_penalty: ci_value,
        });
    }
    value += weights.lambda_s * stability + weights.lambda_c * cond_total;
    Ok(Objective { value, grads, env_risks, stability_penalty: stability, cond_indep_penalty: cond_total })
}

/// One row of the step-indexed training log.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepMetrics {
    pub step: usize,
    pub env_risks: Vec<EnvRisk>,
    pub stability_penalty: f64,
    pub cond_indep_penalty: f64,
    pub objective: f64,
}

struct Optimizers {
    trunk: Adam,
    stable: Adam,
    unstable: BTreeMap<usize, Adam>,
}

impl Optimizers {
    fn new(model: &SfbModel, lr: f64) -> Self {
        let cfg = AdamConfig { lr, ..AdamConfig::default() };
        Self {
            trunk: Adam::new(cfg, model.trunk.num_params()),
            stable: Adam::new(cfg, model.stable_head.params.len()),
            unstable: model.unstable_heads.iter().map(|(e, h)| (*e, Adam::new(cfg, h.params.len()))).collect(),
        }
    }
}

fn weight_decay(grads: &mut [f64], params: &[f64], wd: f64) {
    if wd > 0.0 {
        grads.iter_mut().zip(params).for_each(|(g, p)| *g += wd * p);
    }
}

/// Pooled class frequencies.
pub fn pooled_prior(datasets: &[EnvDataset], k: usize) -> Vec<f64> {
    let mut counts = vec![0.0; k];
    let mut n = 0.0f64;
    for d in datasets {
        for &y in &d.labels {
            counts[y] += 1.0;
            n += 1.0;
        }
    }
    counts.into_iter().map(|c| c / n.max(1.0)).collect()
}

/// Trains a model on labeled environments. Penalties are off for the first
/// `pretrain_steps` steps; the optimizer state is reset when they switch on.
/// `on_step` receives the metrics of every step.
pub fn train_with_log(
    datasets: &[EnvDataset],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<SfbModel> {
    cfg.validate()?;
    let needed = if cfg.method == Method::Erm { 1 } else { 2 };
    if datasets.len() < needed {
        return Err(Error::TooFewEnvironments { needed, got: datasets.len() });
    }
    let k = datasets.iter().map(|d| d.num_classes).max().unwrap_or(2).max(2);
    let input_dim = datasets[0].x.cols();
    let env_ids: Vec<usize> = datasets.iter().map(|d| d.env_id).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prior = pooled_prior(datasets, k);
    let mut model = SfbModel::new(input_dim, k, &env_ids, prior, cfg, &mut rng)?;

    let full: Vec<EnvBatch> = if cfg.method == Method::Erm {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for d in datasets {
            for i in 0..d.x.rows() {
                rows.extend_from_slice(d.x.row(i));
            }
            labels.extend_from_slice(&d.labels);
        }
        let x = Matrix::from_vec(labels.len(), input_dim, rows)?;
        vec![EnvBatch::from_labels(env_ids[0], x, labels, k)]
    } else {
        datasets.iter().map(|d| EnvBatch::from_labels(d.env_id, d.x.clone(), d.labels.clone(), k)).collect()
    };

    let mut opt = Optimizers::new(&model, cfg.lr);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    for step in 0..cfg.steps {
        let penalties_on = step >= cfg.pretrain_steps;
        if step == cfg.pretrain_steps && step > 0 {
            opt = Optimizers::new(&model, cfg.lr);
        }
        let weights = ObjectiveWeights::from_config(cfg, penalties_on);
        let batches: Vec<EnvBatch> = match cfg.batch_size {
            None => full.clone(),
            Some(bs) => full.iter().map(|b| sample_batch(b, bs, &mut batch_rng)).collect(),
        };
        let use_dropout = cfg.dropout > 0.0;
        let obj = sfb_objective(&model, &batches, weights, if use_dropout { Some(&mut dropout_rng) } else { None })?;
        if !obj.value.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        on_step(&StepMetrics {
            step,
            env_risks: obj.env_risks.clone(),
            stability_penalty: obj.stability_penalty,
            cond_indep_penalty: obj.cond_indep_penalty,
            objective: obj.value,
        });
        let lr = if cfg.cosine_schedule { cosine_lr(cfg.lr, step, cfg.steps) } else { cfg.lr };
        let mut g = obj.grads;
        weight_decay(&mut g.trunk, model.trunk.params(), cfg.weight_decay);
        opt.trunk.step_with_lr(model.trunk.params_mut(), &g.trunk, lr)?;
        opt.stable.step_with_lr(&mut model.stable_head.params, &g.stable_head, lr)?;
        if weights.joint {
            for (e, head) in model.unstable_heads.iter_mut() {
                let (Some(adam), Some(grad)) = (opt.unstable.get_mut(e), g.unstable_heads.get(e)) else {
                    continue;
                };
                adam.step_with_lr(&mut head.params, grad, lr)?;
            }
        }
    }
    Ok(model)
}

pub fn train(datasets: &[EnvDataset], cfg: &TrainConfig) -> Result<SfbModel> {
    train_with_log(datasets, cfg, |_| {})
}

fn sample_batch<R: Rng + ?Sized>(b: &EnvBatch, size: usize, rng: &mut R) -> EnvBatch {
    let n = b.x.rows();
    if size >= n {
        return b.clone();
    }
    let idx: Vec<usize> = rand::seq::index::sample(rng, n, size).into_vec();
    let mut x = Matrix::zeros(size, b.x.cols());
    let mut t = Matrix::zeros(size, b.targets.cols());
    let mut labels = Vec::with_capacity(size);
    for (r, &i) in idx.iter().enumerate() {
        x.row_mut(r).copy_from_slice(b.x.row(i));
        t.row_mut(r).copy_from_slice(b.targets.row(i));
        labels.push(b.labels[i]);
    }
    EnvBatch { env_id: b.env_id, x, targets: t, labels }
}
