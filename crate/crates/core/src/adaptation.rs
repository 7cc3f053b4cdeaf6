//! Bias-corrected adaptation in an unlabeled environment.
//!
//! The calibrated stable classifier labels the new environment softly. An
//! unstable classifier fit to those pseudo-labels estimates
//! `Pr[pseudo-label | x_U]`, which differs from `Pr[Y | x_U]` by a known
//! noise channel: when the stable and unstable features are conditionally
//! independent given the label, the pseudo-label is a class-conditionally
//! noisy copy of `Y` whose confusion matrix can be estimated from the stable
//! outputs alone. Inverting that channel gives an unbiased unstable
//! classifier, which is then fused with the stable one.
//!
//! All class probabilities are carried as `n x K` row-stochastic matrices
//! (binary problems use `K = 2`, column 1 is the positive class).

use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::linalg::{least_squares, matmul, symmetric_eigen, Matrix, Trans};
use crate::nn::{Adam, AdamConfig, DenseNet};
use crate::prob::{
    self, clamp_probability, combine_binary, combine_multiclass, project_to_simplex, Probability, SimplexVector,
};
use crate::{Error, Result};

/// Minimum informativeness margin: `eps0 + eps1 - 1` in the binary case, the
/// smallest singular value of the confusion matrix otherwise.
pub const INFORMATIVENESS_THRESHOLD: f64 = 1e-3;

/// Soft pseudo-labels and their per-class soft counts.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPseudoLabels {
    pub labels: Vec<Probability>,
    /// `n1 = sum_i Yhat_i`.
    pub class_one_mass: f64,
}

impl SoftPseudoLabels {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Soft frequency `n1 / n` of class 1.
    pub fn prior(&self) -> f64 {
        self.class_one_mass / self.labels.len() as f64
    }
}

/// Wraps calibrated stable outputs as soft pseudo-labels.
pub fn soft_pseudo_labels(stable_probs: &[Probability]) -> Result<SoftPseudoLabels> {
    if stable_probs.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(SoftPseudoLabels { labels: stable_probs.to_vec(), class_one_mass: stable_probs.iter().map(|p| p.value()).sum() })
}

/// Soft class masses `sum_i p_i` of a multiclass batch.
pub fn soft_class_masses(stable_probs: &[SimplexVector]) -> Result<Vec<f64>> {
    let first = stable_probs.first().ok_or(Error::EmptyInput)?;
    let mut mass = vec![0.0; first.len()];
    for p in stable_probs {
        if p.len() != mass.len() {
            return Err(Error::ShapeMismatch { expected: mass.len(), got: p.len() });
        }
        for (m, v) in mass.iter_mut().zip(p.as_slice()) {
            *m += v;
        }
    }
    Ok(mass)
}

/// Class-wise pseudo-label accuracies.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum PseudoLabelStats {
    /// `eps0 = Pr[Yhat = 0 | Y = 0]`, `eps1 = Pr[Yhat = 1 | Y = 1]`.
    Binary { eps0: f64, eps1: f64 },
    /// `confusion[(y, y')] = Pr[Yhat = y | Y = y']`; columns sum to one.
    Multiclass { confusion: Matrix },
}

impl PseudoLabelStats {
    /// Perfect pseudo-labels for `k` classes.
    pub fn perfect(k: usize) -> Self {
        if k == 2 {
            Self::Binary { eps0: 1.0, eps1: 1.0 }
        } else {
            Self::Multiclass { confusion: Matrix::identity(k) }
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Self::Binary { .. } => 2,
            Self::Multiclass { confusion } => confusion.rows(),
        }
    }

    /// Confusion matrix form (also for binary stats).
    pub fn confusion(&self) -> Matrix {
        match self {
            Self::Binary { eps0, eps1 } => {
                Matrix::from_rows(&[vec![*eps0, 1.0 - eps1], vec![1.0 - eps0, *eps1]]).expect("2x2")
            }
            Self::Multiclass { confusion } => confusion.clone(),
        }
    }

    /// `eps0 + eps1 - 1` for binary stats, the smallest singular value of the
    /// confusion matrix otherwise.
    pub fn informativeness(&self) -> f64 {
        match self {
            Self::Binary { eps0, eps1 } => eps0 + eps1 - 1.0,
            Self::Multiclass { confusion } => smallest_singular_value(confusion).unwrap_or(0.0),
        }
    }

    /// Pushes a true-label distribution through the pseudo-label channel.
    pub fn forward(&self, p: &[f64]) -> Vec<f64> {
        self.confusion().mat_vec(p)
    }
}

fn smallest_singular_value(m: &Matrix) -> Result<f64> {
    let ata = matmul(m, Trans::Yes, m, Trans::No);
    let (eig, _) = symmetric_eigen(&ata)?;
    Ok(libm::sqrt(eig.into_iter().fold(f64::INFINITY, f64::min).max(0.0)))
}

/// `eps1 = sum p^2 / sum p` and `eps0 = sum (1-p)^2 / sum (1-p)` with soft
/// pseudo-labels equal to the stable outputs.
pub fn estimate_binary_accuracies(stable_probs: &[Probability]) -> Result<PseudoLabelStats> {
    let labels = soft_pseudo_labels(stable_probs)?;
    let n = labels.len() as f64;
    let n1 = labels.class_one_mass;
    if n1 <= 0.0 {
        return Err(Error::DegenerateClassMass { class: 1, mass: n1 });
    }
    if n - n1 <= 0.0 {
        return Err(Error::DegenerateClassMass { class: 0, mass: n - n1 });
    }
    let (mut s1, mut s0, mut m0) = (0.0, 0.0, 0.0);
    for p in &labels.labels {
        let p = p.value();
        s1 += p * p;
        s0 += (1.0 - p) * (1.0 - p);
        m0 += 1.0 - p;
    }
    Ok(PseudoLabelStats::Binary { eps0: s0 / m0, eps1: s1 / n1 })
}

/// `eps = F^T Normalize_columns(F)` for the `n x K` matrix `F` of stable
/// outputs.
pub fn estimate_confusion(stable_probs: &[SimplexVector]) -> Result<PseudoLabelStats> {
    let mass = soft_class_masses(stable_probs)?;
    let k = mass.len();
    if let Some((class, &m)) = mass.iter().enumerate().find(|(_, m)| **m <= 0.0) {
        return Err(Error::DegenerateClassMass { class, mass: m });
    }
    let mut eps = Matrix::zeros(k, k);
    for p in stable_probs {
        let p = p.as_slice();
        for y in 0..k {
            for y2 in 0..k {
                eps[(y, y2)] += p[y] * p[y2];
            }
        }
    }
    for y in 0..k {
        for y2 in 0..k {
            eps[(y, y2)] /= mass[y2];
        }
    }
    Ok(PseudoLabelStats::Multiclass { confusion: eps })
}

/// Inverts the binary pseudo-label channel:
/// `clamp((p~ + eps0 - 1) / (eps0 + eps1 - 1), 0, 1)`.
pub fn bias_correct_binary(tilde_p: Probability, stats: &PseudoLabelStats) -> Result<Probability> {
    let (eps0, eps1) = match stats {
        PseudoLabelStats::Binary { eps0, eps1 } => (*eps0, *eps1),
        PseudoLabelStats::Multiclass { confusion } if confusion.rows() == 2 => (confusion[(0, 0)], confusion[(1, 1)]),
        PseudoLabelStats::Multiclass { confusion } => {
            return Err(Error::ShapeMismatch { expected: 2, got: confusion.rows() })
        }
    };
    let margin = eps0 + eps1 - 1.0;
    if margin <= INFORMATIVENESS_THRESHOLD || margin.is_nan() {
        return Err(Error::UninformativeStable { margin, threshold: INFORMATIVENESS_THRESHOLD });
    }
    Ok(Probability::saturating((tilde_p.value() - (1.0 - eps0)) / margin))
}

/// Precomputed multiclass inverse of a pseudo-label channel.
#[derive(Debug, Clone)]
pub struct BiasCorrector {
    confusion: Matrix,
    step: f64,
}

impl BiasCorrector {
    pub fn new(stats: &PseudoLabelStats) -> Result<Self> {
        let confusion = stats.confusion();
        let ata = matmul(&confusion, Trans::Yes, &confusion, Trans::No);
        let (eig, _) = symmetric_eigen(&ata)?;
        let min = eig.iter().copied().fold(f64::INFINITY, f64::min).max(0.0);
        let max = eig.iter().copied().fold(0.0, f64::max);
        let sigma_min = libm::sqrt(min);
        if sigma_min <= INFORMATIVENESS_THRESHOLD || sigma_min.is_nan() {
            return Err(Error::UninformativeStable { margin: sigma_min, threshold: INFORMATIVENESS_THRESHOLD });
        }
        Ok(Self { confusion, step: 1.0 / max })
    }

    fn residual(&self, p: &[f64], target: &[f64]) -> f64 {
        self.confusion.mat_vec(p).iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    /// `argmin_{p in simplex} ||eps p - tilde||_2`.
    pub fn correct(&self, tilde: &SimplexVector) -> Result<SimplexVector> {
        let k = self.confusion.rows();
        if tilde.len() != k {
            return Err(Error::ShapeMismatch { expected: k, got: tilde.len() });
        }
        let t = tilde.as_slice();
        let unconstrained = least_squares(&self.confusion, t)?;
        let ls_residual = self.residual(&unconstrained, t);
        let mut p = project_to_simplex(&unconstrained)?;
        if self.residual(p.as_slice(), t) <= ls_residual + 1e-9 {
            return Ok(p);
        }
        for _ in 0..10_000 {
            let r: Vec<f64> = self.confusion.mat_vec(p.as_slice()).iter().zip(t).map(|(a, b)| a - b).collect();
            let g = self.confusion.mat_t_vec(&r);
            let moved: Vec<f64> = p.as_slice().iter().zip(&g).map(|(x, gx)| x - self.step * gx).collect();
            let next = project_to_simplex(&moved)?;
            let delta: f64 = next.as_slice().iter().zip(p.as_slice()).map(|(a, b)| (a - b).abs()).sum();
            p = next;
            if delta < 1e-15 {
                break;
            }
        }
        Ok(p)
    }
}

/// Multiclass bias correction; see [`BiasCorrector::correct`].
pub fn bias_correct_multiclass(tilde_p: &SimplexVector, stats: &PseudoLabelStats) -> Result<SimplexVector> {
    BiasCorrector::new(stats)?.correct(tilde_p)
}

/// Fitted parameters of an unstable learner, for checkpoints.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "lowercase"))]
pub enum LearnerParams {
    Tabular { cells: Vec<(Vec<f64>, Vec<f64>)>, fallback: Vec<f64> },
    Logistic { weights: Matrix, bias: Vec<f64> },
    Net { net: DenseNet },
}

/// A probabilistic classifier on unstable features fit to soft targets.
pub trait UnstableLearner {
    /// Fits to `targets`, an `n x K` row-stochastic matrix.
    fn fit(&mut self, features: &Matrix, targets: &Matrix) -> Result<()>;

    /// `n x K` class probabilities.
    fn predict_proba(&self, features: &Matrix) -> Result<Matrix>;

    fn parameters(&self) -> LearnerParams;
}

impl<L: UnstableLearner + ?Sized> UnstableLearner for alloc::boxed::Box<L> {
    fn fit(&mut self, features: &Matrix, targets: &Matrix) -> Result<()> {
        (**self).fit(features, targets)
    }

    fn predict_proba(&self, features: &Matrix) -> Result<Matrix> {
        (**self).predict_proba(features)
    }

    fn parameters(&self) -> LearnerParams {
        (**self).parameters()
    }
}

impl LearnerParams {
    /// Rebuilds a fitted learner.
    pub fn into_learner(self) -> alloc::boxed::Box<dyn UnstableLearner> {
        match self {
            Self::Tabular { cells, fallback } => {
                alloc::boxed::Box::new(TabularLearner::from_parameters(cells, fallback))
            }
            Self::Logistic { weights, bias } => alloc::boxed::Box::new(LogisticLearner::from_parameters(weights, bias)),
            Self::Net { net } => alloc::boxed::Box::new(NetLearner::from_net(net)),
        }
    }
}

fn check_targets(features: &Matrix, targets: &Matrix) -> Result<()> {
    if features.rows() != targets.rows() {
        return Err(Error::LengthMismatch { left: features.rows(), right: targets.rows() });
    }
    if features.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    if targets.cols() < 2 {
        return Err(Error::TooFewClasses(targets.cols()));
    }
    Ok(())
}

fn cell_key(row: &[f64]) -> Vec<u64> {
    // -0.0 and 0.0 share a cell.
    row.iter().map(|v| (v + 0.0).to_bits()).collect()
}

/// Exact conditional mean of the targets in every distinct feature cell.
/// Cells unseen during fitting predict the global mean.
#[derive(Debug, Clone, Default)]
pub struct TabularLearner {
    cells: BTreeMap<Vec<u64>, (Vec<f64>, Vec<f64>)>,
    fallback: Vec<f64>,
}

impl TabularLearner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }
}

impl UnstableLearner for TabularLearner {
    fn fit(&mut self, features: &Matrix, targets: &Matrix) -> Result<()> {
        check_targets(features, targets)?;
        let k = targets.cols();
        let mut sums: BTreeMap<Vec<u64>, (Vec<f64>, Vec<f64>, f64)> = BTreeMap::new();
        let mut global = vec![0.0; k];
        for i in 0..features.rows() {
            let entry =
                sums.entry(cell_key(features.row(i))).or_insert_with(|| (features.row(i).to_vec(), vec![0.0; k], 0.0));
            for (s, t) in entry.1.iter_mut().zip(targets.row(i)) {
                *s += t;
            }
            entry.2 += 1.0;
            for (g, t) in global.iter_mut().zip(targets.row(i)) {
                *g += t;
            }
        }
        let n = features.rows() as f64;
        self.fallback = global.into_iter().map(|g| g / n).collect();
        self.cells =
            sums.into_iter().map(|(key, (row, s, c))| (key, (row, s.into_iter().map(|v| v / c).collect()))).collect();
        Ok(())
    }

    fn predict_proba(&self, features: &Matrix) -> Result<Matrix> {
        if self.fallback.is_empty() {
            return Err(Error::LearnerFailure("tabular learner used before fit".to_string()));
        }
        let k = self.fallback.len();
        let mut out = Matrix::zeros(features.rows(), k);
        for i in 0..features.rows() {
            let p = self.cells.get(&cell_key(features.row(i))).map_or(&self.fallback, |(_, p)| p);
            out.row_mut(i).copy_from_slice(p);
        }
        Ok(out)
    }

    fn parameters(&self) -> LearnerParams {
        LearnerParams::Tabular { cells: self.cells.values().cloned().collect(), fallback: self.fallback.clone() }
    }
}

impl TabularLearner {
    pub fn from_parameters(cells: Vec<(Vec<f64>, Vec<f64>)>, fallback: Vec<f64>) -> Self {
        Self { cells: cells.into_iter().map(|(row, p)| (cell_key(&row), (row, p))).collect(), fallback }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GradientFitConfig {
    pub lr: f64,
    pub steps: usize,
    /// L2 penalty on weights (not biases).
    pub l2: f64,
    pub seed: u64,
}

impl Default for GradientFitConfig {
    fn default() -> Self {
        Self { lr: 0.01, steps: 20, l2: 0.0, seed: 0 }
    }
}

/// Soft-target cross-entropy gradient w.r.t. logits for a row-stochastic
/// target. Binary heads have one logit; multiclass heads one per class.
fn soft_ce_logit_grads(logits: &Matrix, targets: &Matrix) -> Matrix {
    let n = logits.rows() as f64;
    let mut g = Matrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        let probs = class_probs_from_logits(logits.row(i));
        if logits.cols() == 1 {
            g[(i, 0)] = (probs[1] - targets[(i, 1)]) / n;
        } else {
            for c in 0..logits.cols() {
                g[(i, c)] = (probs[c] - targets[(i, c)]) / n;
            }
        }
    }
    g
}

/// Class probabilities of one logit row (single column = binary logit).
pub fn class_probs_from_logits(row: &[f64]) -> Vec<f64> {
    if row.len() == 1 {
        let p = prob::sigmoid_f64(row[0]);
        return vec![1.0 - p, p];
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|z| libm::exp(z - max)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Linear (logistic / softmax) head trained with full-batch Adam from a
/// given starting point.
#[derive(Debug, Clone)]
pub struct LogisticLearner {
    pub config: GradientFitConfig,
    weights: Matrix,
    bias: Vec<f64>,
    init: Option<(Matrix, Vec<f64>)>,
}

impl LogisticLearner {
    pub fn new(config: GradientFitConfig) -> Self {
        Self { config, weights: Matrix::zeros(0, 0), bias: Vec::new(), init: None }
    }

    /// Starts fitting from the given head instead of zeros.
    pub fn with_init(mut self, weights: Matrix, bias: Vec<f64>) -> Self {
        self.init = Some((weights, bias));
        self
    }

    pub fn from_parameters(weights: Matrix, bias: Vec<f64>) -> Self {
        Self { config: GradientFitConfig::default(), weights, bias, init: None }
    }

    pub fn weights(&self) -> (&Matrix, &[f64]) {
        (&self.weights, &self.bias)
    }

    fn logits(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.weights.rows() {
            return Err(Error::ShapeMismatch { expected: self.weights.rows(), got: features.cols() });
        }
        let mut z = matmul(features, Trans::No, &self.weights, Trans::No);
        for i in 0..z.rows() {
            for (v, b) in z.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(z)
    }
}

impl UnstableLearner for LogisticLearner {
    fn fit(&mut self, features: &Matrix, targets: &Matrix) -> Result<()> {
        check_targets(features, targets)?;
        let d = features.cols();
        let outputs = if targets.cols() == 2 { 1 } else { targets.cols() };
        match &self.init {
            Some((w, b)) if w.rows() == d && w.cols() == outputs && b.len() == outputs => {
                self.weights = w.clone();
                self.bias = b.clone();
            }
            Some(_) => return Err(Error::LearnerFailure("initial head has the wrong shape".to_string())),
            None => {
                self.weights = Matrix::zeros(d, outputs);
                self.bias = vec![0.0; outputs];
            }
        }
        let n_w = d * outputs;
        let mut params: Vec<f64> = self.weights.as_slice().iter().chain(&self.bias).copied().collect();
        let mut adam = Adam::new(AdamConfig { lr: self.config.lr, ..AdamConfig::default() }, params.len());
        for _ in 0..self.config.steps {
            let z = self.logits(features)?;
            let gz = soft_ce_logit_grads(&z, targets);
            let gw = matmul(features, Trans::Yes, &gz, Trans::No);
            let mut grads: Vec<f64> = gw.into_vec();
            for (g, w) in grads.iter_mut().zip(self.weights.as_slice()) {
                *g += 2.0 * self.config.l2 * w;
            }
            let mut gb = vec![0.0; outputs];
            for i in 0..gz.rows() {
                for (b, v) in gb.iter_mut().zip(gz.row(i)) {
                    *b += v;
                }
            }
            grads.extend(gb);
            adam.step(&mut params, &grads)?;
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::LearnerFailure("non-finite logistic parameters".to_string()));
            }
            self.weights.as_mut_slice().copy_from_slice(&params[..n_w]);
            self.bias.copy_from_slice(&params[n_w..]);
        }
        Ok(())
    }

    fn predict_proba(&self, features: &Matrix) -> Result<Matrix> {
        let z = self.logits(features)?;
        let k = if z.cols() == 1 { 2 } else { z.cols() };
        let mut out = Matrix::zeros(z.rows(), k);
        for i in 0..z.rows() {
            out.row_mut(i).copy_from_slice(&class_probs_from_logits(z.row(i)));
        }
        Ok(out)
    }

    fn parameters(&self) -> LearnerParams {
        LearnerParams::Logistic { weights: self.weights.clone(), bias: self.bias.clone() }
    }
}

/// Small ReLU network head fit with full-batch Adam.
#[derive(Debug, Clone)]
pub struct NetLearner {
    pub config: GradientFitConfig,
    pub hidden: Vec<usize>,
    net: Option<DenseNet>,
}

impl NetLearner {
    pub fn new(hidden: Vec<usize>, config: GradientFitConfig) -> Self {
        Self { config, hidden, net: None }
    }

    pub fn from_net(net: DenseNet) -> Self {
        Self { config: GradientFitConfig::default(), hidden: Vec::new(), net: Some(net) }
    }
}

impl UnstableLearner for NetLearner {
    fn fit(&mut self, features: &Matrix, targets: &Matrix) -> Result<()> {
        check_targets(features, targets)?;
        let outputs = if targets.cols() == 2 { 1 } else { targets.cols() };
        let mut widths = vec![features.cols()];
        widths.extend_from_slice(&self.hidden);
        widths.push(outputs);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut net = DenseNet::new(&widths, 0.0, &mut rng)?;
        let mut adam = Adam::new(AdamConfig { lr: self.config.lr, ..AdamConfig::default() }, net.num_params());
        for _ in 0..self.config.steps {
            let (z, tape) = net.forward::<ChaCha8Rng>(features, None)?;
            let gz = soft_ce_logit_grads(&z, targets);
            let grads = net.backward(&tape, &gz)?;
            adam.step(net.params_mut(), &grads.params)?;
            if net.params().iter().any(|p| !p.is_finite()) {
                return Err(Error::LearnerFailure("non-finite network parameters".to_string()));
            }
        }
        self.net = Some(net);
        Ok(())
    }

    fn predict_proba(&self, features: &Matrix) -> Result<Matrix> {
        let net =
            self.net.as_ref().ok_or_else(|| Error::LearnerFailure("network learner used before fit".to_string()))?;
        let z = net.predict(features)?;
        let k = if z.cols() == 1 { 2 } else { z.cols() };
        let mut out = Matrix::zeros(z.rows(), k);
        for i in 0..z.rows() {
            out.row_mut(i).copy_from_slice(&class_probs_from_logits(z.row(i)));
        }
        Ok(out)
    }

    fn parameters(&self) -> LearnerParams {
        match &self.net {
            Some(net) => LearnerParams::Net { net: net.clone() },
            None => LearnerParams::Tabular { cells: Vec::new(), fallback: Vec::new() },
        }
    }
}

/// Calibrated stable classifier over stable features.
pub trait StableClassifier {
    /// `n x K` calibrated class probabilities.
    fn predict_proba(&self, stable_features: &Matrix) -> Result<Matrix>;
}

/// Adapts a closure into a [`StableClassifier`].
pub struct FnClassifier<F>(pub F);

impl<F> StableClassifier for FnClassifier<F>
where
    F: Fn(&Matrix) -> Result<Matrix>,
{
    fn predict_proba(&self, stable_features: &Matrix) -> Result<Matrix> {
        (self.0)(stable_features)
    }
}

impl<S: StableClassifier + ?Sized> StableClassifier for &S {
    fn predict_proba(&self, stable_features: &Matrix) -> Result<Matrix> {
        (**self).predict_proba(stable_features)
    }
}

/// Whether later rounds re-estimate the pseudo-label statistics or keep the
/// first round's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum StatsPolicy {
    #[default]
    Reestimate,
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdaptConfig {
    pub rounds: usize,
    pub stats_policy: StatsPolicy,
    /// `false` skips the channel inversion (naive pseudo-labeling).
    pub bias_correction: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self { rounds: 1, stats_policy: StatsPolicy::Reestimate, bias_correction: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RoundDiagnostics {
    pub round: usize,
    pub stats: PseudoLabelStats,
    pub prior: Vec<f64>,
    pub informativeness: f64,
    /// Fraction of samples whose joint argmax differs from the stable argmax.
    pub changed_vs_stable: f64,
    pub mean_joint_confidence: f64,
}

/// Stable classifier + bias-corrected unstable classifier + fusion prior.
#[derive(Debug, Clone)]
pub struct AdaptedClassifier<S, L> {
    pub stable: S,
    pub unstable: L,
    pub prior: Vec<f64>,
    pub stats: PseudoLabelStats,
    pub bias_correction: bool,
    pub rounds: Vec<RoundDiagnostics>,
}

impl<S: StableClassifier, L: UnstableLearner> AdaptedClassifier<S, L> {
    pub fn num_classes(&self) -> usize {
        self.prior.len()
    }

    /// Bias-corrected unstable probabilities.
    pub fn unstable_corrected(&self, unstable_features: &Matrix) -> Result<Matrix> {
        let tilde = self.unstable.predict_proba(unstable_features)?;
        if self.bias_correction {
            correct_rows(&tilde, &self.stats)
        } else {
            Ok(tilde)
        }
    }

    /// Joint class probabilities.
    pub fn predict_proba(&self, stable_features: &Matrix, unstable_features: &Matrix) -> Result<Matrix> {
        let stable = self.stable.predict_proba(stable_features)?;
        let unstable = self.unstable_corrected(unstable_features)?;
        combine_rows(&stable, &unstable, &self.prior)
    }

    pub fn predict(&self, stable_features: &Matrix, unstable_features: &Matrix) -> Result<Vec<usize>> {
        let p = self.predict_proba(stable_features, unstable_features)?;
        Ok((0..p.rows()).map(|i| prob::argmax(p.row(i))).collect())
    }
}

fn row_simplex(row: &[f64]) -> Result<SimplexVector> {
    SimplexVector::new(row.to_vec()).or_else(|_| SimplexVector::normalize(row.to_vec()))
}

/// Applies bias correction row-wise.
pub fn correct_rows(tilde: &Matrix, stats: &PseudoLabelStats) -> Result<Matrix> {
    let k = stats.num_classes();
    if tilde.cols() != k {
        return Err(Error::ShapeMismatch { expected: k, got: tilde.cols() });
    }
    let mut out = Matrix::zeros(tilde.rows(), k);
    if k == 2 {
        for i in 0..tilde.rows() {
            let p = bias_correct_binary(Probability::saturating(tilde[(i, 1)]), stats)?;
            out[(i, 0)] = 1.0 - p.value();
            out[(i, 1)] = p.value();
        }
    } else {
        let corrector = BiasCorrector::new(stats)?;
        for i in 0..tilde.rows() {
            let p = corrector.correct(&row_simplex(tilde.row(i))?)?;
            out.row_mut(i).copy_from_slice(p.as_slice());
        }
    }
    Ok(out)
}

/// Fuses stable and unstable rows under `prior`.
pub fn combine_rows(stable: &Matrix, unstable: &Matrix, prior: &[f64]) -> Result<Matrix> {
    let k = prior.len();
    if stable.cols() != k || unstable.cols() != k {
        return Err(Error::ShapeMismatch { expected: k, got: stable.cols().max(unstable.cols()) });
    }
    if stable.rows() != unstable.rows() {
        return Err(Error::LengthMismatch { left: stable.rows(), right: unstable.rows() });
    }
    let mut out = Matrix::zeros(stable.rows(), k);
    if k == 2 {
        let pi = Probability::new(prior[1])?;
        for i in 0..stable.rows() {
            let p =
                combine_binary(Probability::saturating(stable[(i, 1)]), Probability::saturating(unstable[(i, 1)]), pi)?;
            out[(i, 0)] = 1.0 - p.value();
            out[(i, 1)] = p.value();
        }
    } else {
        let pi = SimplexVector::new(prior.to_vec())?;
        for i in 0..stable.rows() {
            let p = combine_multiclass(&row_simplex(stable.row(i))?, &row_simplex(unstable.row(i))?, &pi)?;
            out.row_mut(i).copy_from_slice(p.as_slice());
        }
    }
    Ok(out)
}

/// Pseudo-label statistics of an `n x K` batch of calibrated outputs.
pub fn estimate_stats(probs: &Matrix) -> Result<PseudoLabelStats> {
    if probs.cols() == 2 {
        let p: Vec<Probability> = (0..probs.rows()).map(|i| Probability::saturating(probs[(i, 1)])).collect();
        estimate_binary_accuracies(&p)
    } else {
        let rows = (0..probs.rows()).map(|i| row_simplex(probs.row(i))).collect::<Result<Vec<_>>>()?;
        estimate_confusion(&rows)
    }
}

fn column_means(m: &Matrix) -> Vec<f64> {
    let mut mean = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (a, v) in mean.iter_mut().zip(m.row(i)) {
            *a += v;
        }
    }
    let n = m.rows() as f64;
    mean.iter_mut().for_each(|a| *a /= n);
    mean
}

/// Runs bias-corrected adaptation on an unlabeled sample.
///
/// Round 1 pseudo-labels the sample with the stable classifier, estimates
/// the pseudo-label statistics, fits the learner, inverts the pseudo-label
/// channel and fuses. Each later round pseudo-labels with the previous
/// round's joint predictions instead; the fusion always uses the original
/// stable predictions.
pub fn adapt<S, L>(
    stable: S,
    mut learner: L,
    stable_features: &Matrix,
    unstable_features: &Matrix,
    config: AdaptConfig,
) -> Result<AdaptedClassifier<S, L>>
where
    S: StableClassifier,
    L: UnstableLearner,
{
    if stable_features.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    if stable_features.rows() != unstable_features.rows() {
        return Err(Error::LengthMismatch { left: stable_features.rows(), right: unstable_features.rows() });
    }
    if config.rounds == 0 {
        return Err(Error::InvalidConfig("adaptation needs at least one round".into()));
    }
    let stable_probs = stable.predict_proba(stable_features)?;
    let k = stable_probs.cols();
    let mut pseudo = stable_probs.clone();
    let mut rounds = Vec::with_capacity(config.rounds);
    let mut first_stats: Option<PseudoLabelStats> = None;
    let mut last = None;
    for round in 1..=config.rounds {
        for v in pseudo.as_mut_slice() {
            *v = v.clamp(0.0, 1.0);
        }
        let prior: Vec<f64> = column_means(&pseudo)
            .into_iter()
            .map(|p| if k == 2 { clamp_probability(p) } else { p.max(f64::MIN_POSITIVE) })
            .collect();
        let stats = if !config.bias_correction {
            PseudoLabelStats::perfect(k)
        } else {
            match (&first_stats, config.stats_policy) {
                (Some(s), StatsPolicy::Frozen) => s.clone(),
                _ => estimate_stats(&pseudo)?,
            }
        };
        if first_stats.is_none() {
            first_stats = Some(stats.clone());
        }
        learner.fit(unstable_features, &pseudo)?;
        let tilde = learner.predict_proba(unstable_features)?;
        let corrected = if config.bias_correction { correct_rows(&tilde, &stats)? } else { tilde };
        let joint = combine_rows(&stable_probs, &corrected, &prior)?;
        let n = joint.rows() as f64;
        let changed = (0..joint.rows())
            .filter(|&i| prob::argmax(joint.row(i)) != prob::argmax(stable_probs.row(i)))
            .count() as f64
            / n;
        let confidence = (0..joint.rows()).map(|i| joint.row(i).iter().copied().fold(0.0, f64::max)).sum::<f64>() / n;
        rounds.push(RoundDiagnostics {
            round,
            informativeness: stats.informativeness(),
            stats: stats.clone(),
            prior: prior.clone(),
            changed_vs_stable: changed,
            mean_joint_confidence: confidence,
        });
        pseudo = joint;
        last = Some((stats, prior));
    }
    let (stats, prior) = last.expect("at least one round");
    Ok(AdaptedClassifier { stable, unstable: learner, prior, stats, bias_correction: config.bias_correction, rounds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(v: f64) -> Probability {
        Probability::new(v).unwrap()
    }

    fn ac_stable_posteriors(n: usize) -> Vec<Probability> {
        (0..n).map(|i| if i % 2 == 0 { p(0.75) } else { p(0.25) }).collect()
    }

    #[test]
    fn soft_pseudo_label_examples() {
        let l = soft_pseudo_labels(&[p(0.9), p(0.1)]).unwrap();
        assert_eq!(l.labels, vec![p(0.9), p(0.1)]);
        assert!((l.class_one_mass - 1.0).abs() < 1e-15);
        assert_eq!(soft_pseudo_labels(&[]), Err(Error::EmptyInput));
        assert_eq!(soft_pseudo_labels(&[p(0.5); 4]).unwrap().class_one_mass, 2.0);
    }

    #[test]
    fn binary_accuracy_examples() {
        // E[p^2] / E[p] = 0.3125 / 0.5 over the AC stable posterior.
        let s = estimate_binary_accuracies(&ac_stable_posteriors(1000)).unwrap();
        let PseudoLabelStats::Binary { eps0, eps1 } = s else { panic!() };
        assert!((eps0 - 0.625).abs() < 1e-12 && (eps1 - 0.625).abs() < 1e-12);

        let mut perfect = vec![p(1.0); 9];
        perfect.push(p(0.0));
        assert_eq!(estimate_binary_accuracies(&perfect).unwrap(), PseudoLabelStats::Binary { eps0: 1.0, eps1: 1.0 });

        let s = estimate_binary_accuracies(&[p(0.5); 10]).unwrap();
        assert_eq!(s, PseudoLabelStats::Binary { eps0: 0.5, eps1: 0.5 });
        assert_eq!(s.informativeness(), 0.0);

        assert!(matches!(estimate_binary_accuracies(&[p(0.0); 3]), Err(Error::DegenerateClassMass { class: 1, .. })));
        assert!(matches!(estimate_binary_accuracies(&[p(1.0); 3]), Err(Error::DegenerateClassMass { class: 0, .. })));
    }

    #[test]
    fn confusion_examples() {
        let one_hot: Vec<SimplexVector> = (0..9).map(|i| SimplexVector::one_hot(3, i % 3).unwrap()).collect();
        let PseudoLabelStats::Multiclass { confusion } = estimate_confusion(&one_hot).unwrap() else { panic!() };
        assert_eq!(confusion, Matrix::identity(3));

        let uniform = vec![SimplexVector::uniform(4).unwrap(); 5];
        let PseudoLabelStats::Multiclass { confusion } = estimate_confusion(&uniform).unwrap() else { panic!() };
        assert!(confusion.as_slice().iter().all(|v| (v - 0.25).abs() < 1e-15));

        let rows: Vec<SimplexVector> = ac_stable_posteriors(100).into_iter().map(SimplexVector::from_binary).collect();
        let PseudoLabelStats::Multiclass { confusion } = estimate_confusion(&rows).unwrap() else { panic!() };
        let expect = [0.625, 0.375, 0.375, 0.625];
        for (a, b) in confusion.as_slice().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }

        let degenerate = vec![SimplexVector::one_hot(3, 0).unwrap(); 4];
        assert!(matches!(estimate_confusion(&degenerate), Err(Error::DegenerateClassMass { class: 1, .. })));
    }

    #[test]
    fn bias_correct_binary_examples() {
        let s = PseudoLabelStats::Binary { eps0: 0.625, eps1: 0.625 };
        // Forward channel: 0.25 * 0.1 + 0.375 = 0.4.
        assert!((s.forward(&[0.9, 0.1])[1] - 0.4).abs() < 1e-15);
        let r = bias_correct_binary(p(0.4), &s).unwrap();
        assert!((r.value() - 0.1).abs() < 1e-12);

        let perfect = PseudoLabelStats::perfect(2);
        assert_eq!(bias_correct_binary(p(0.37), &perfect).unwrap(), p(0.37));

        let bad = PseudoLabelStats::Binary { eps0: 0.9, eps1: 0.05 };
        assert!(matches!(bias_correct_binary(p(0.2), &bad), Err(Error::UninformativeStable { .. })));

        // Clamped at the ends.
        assert_eq!(bias_correct_binary(p(0.99), &s).unwrap(), Probability::ONE);
        assert_eq!(bias_correct_binary(p(0.01), &s).unwrap(), Probability::ZERO);
    }

    #[test]
    fn bias_correct_multiclass_examples() {
        let t = SimplexVector::new(vec![0.2, 0.5, 0.3]).unwrap();
        let id = PseudoLabelStats::perfect(3);
        let r = bias_correct_multiclass(&t, &id).unwrap();
        for (a, b) in r.as_slice().iter().zip(t.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }

        let s = PseudoLabelStats::Multiclass {
            confusion: Matrix::from_rows(&[vec![0.625, 0.375], vec![0.375, 0.625]]).unwrap(),
        };
        let r = bias_correct_multiclass(&SimplexVector::new(vec![0.6, 0.4]).unwrap(), &s).unwrap();
        assert!((r.as_slice()[0] - 0.9).abs() < 1e-12);
        assert!((r.as_slice()[1] - 0.1).abs() < 1e-12);

        let dup = PseudoLabelStats::Multiclass {
            confusion: Matrix::from_rows(&[vec![0.5, 0.5, 0.1], vec![0.3, 0.3, 0.1], vec![0.2, 0.2, 0.8]]).unwrap(),
        };
        assert!(matches!(bias_correct_multiclass(&t, &dup), Err(Error::UninformativeStable { .. })));
    }

    #[test]
    fn multiclass_correction_is_constrained_minimizer() {
        let eps = Matrix::from_rows(&[vec![0.7, 0.2, 0.1], vec![0.2, 0.6, 0.3], vec![0.1, 0.2, 0.6]]).unwrap();
        let stats = PseudoLabelStats::Multiclass { confusion: eps.clone() };
        let corrector = BiasCorrector::new(&stats).unwrap();
        let t = SimplexVector::new(vec![0.85, 0.1, 0.05]).unwrap();
        let r = corrector.correct(&t).unwrap();
        let res = corrector.residual(r.as_slice(), t.as_slice());
        // Brute force over a simplex grid.
        let steps = 400;
        let mut best = f64::INFINITY;
        for i in 0..=steps {
            for j in 0..=(steps - i) {
                let x = [i as f64 / steps as f64, j as f64 / steps as f64, (steps - i - j) as f64 / steps as f64];
                best = best.min(corrector.residual(&x, t.as_slice()));
            }
        }
        assert!(res <= best + 1e-9, "{res} vs {best}");
    }

    #[test]
    fn tabular_learner_uses_cell_means_and_fallback() {
        let x = Matrix::from_rows(&[vec![1.0], vec![1.0], vec![-1.0], vec![0.0]]).unwrap();
        let t = Matrix::from_rows(&[vec![0.2, 0.8], vec![0.6, 0.4], vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
        let mut l = TabularLearner::new();
        l.fit(&x, &t).unwrap();
        let q = Matrix::from_rows(&[vec![1.0], vec![-1.0], vec![7.0], vec![-0.0]]).unwrap();
        let out = l.predict_proba(&q).unwrap();
        assert!((out[(0, 1)] - 0.6).abs() < 1e-15);
        assert_eq!(out[(1, 1)], 0.0);
        assert!((out[(2, 1)] - 0.425).abs() < 1e-15);
        assert_eq!(out[(3, 1)], 0.5);
    }

    #[test]
    fn logistic_learner_recovers_soft_targets() {
        let x = Matrix::from_rows(&[vec![1.0], vec![-1.0]]).unwrap();
        let t = Matrix::from_rows(&[vec![0.3, 0.7], vec![0.8, 0.2]]).unwrap();
        let mut l = LogisticLearner::new(GradientFitConfig { lr: 0.05, steps: 3000, l2: 0.0, seed: 0 });
        l.fit(&x, &t).unwrap();
        let out = l.predict_proba(&x).unwrap();
        assert!((out[(0, 1)] - 0.7).abs() < 1e-3);
        assert!((out[(1, 1)] - 0.2).abs() < 1e-3);
    }

    #[test]
    fn net_learner_fits_xor_cells() {
        let x = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let t = Matrix::from_rows(&[vec![0.9, 0.1], vec![0.1, 0.9], vec![0.1, 0.9], vec![0.9, 0.1]]).unwrap();
        let mut l = NetLearner::new(vec![8], GradientFitConfig { lr: 0.05, steps: 2000, l2: 0.0, seed: 4 });
        l.fit(&x, &t).unwrap();
        let out = l.predict_proba(&x).unwrap();
        for i in 0..4 {
            assert!((out[(i, 1)] - t[(i, 1)]).abs() < 0.05, "{i}: {}", out[(i, 1)]);
        }
    }

    struct ConstLearner(Vec<f64>);

    impl UnstableLearner for ConstLearner {
        fn fit(&mut self, _: &Matrix, targets: &Matrix) -> Result<()> {
            self.0 = column_means(targets);
            Ok(())
        }

        fn predict_proba(&self, features: &Matrix) -> Result<Matrix> {
            let mut out = Matrix::zeros(features.rows(), self.0.len());
            for i in 0..features.rows() {
                out.row_mut(i).copy_from_slice(&self.0);
            }
            Ok(out)
        }

        fn parameters(&self) -> LearnerParams {
            LearnerParams::Tabular { cells: Vec::new(), fallback: self.0.clone() }
        }
    }

    #[test]
    fn prior_learner_leaves_stable_unchanged() {
        let n = 50;
        let stable_p: Vec<f64> = (0..n).map(|i| 0.05 + 0.9 * (i as f64 / n as f64).powi(2)).collect();
        let xs = Matrix::from_vec(n, 1, stable_p.clone()).unwrap();
        let xu = Matrix::zeros(n, 1);
        let stable = FnClassifier(|x: &Matrix| {
            let mut out = Matrix::zeros(x.rows(), 2);
            for i in 0..x.rows() {
                out[(i, 0)] = 1.0 - x[(i, 0)];
                out[(i, 1)] = x[(i, 0)];
            }
            Ok(out)
        });
        let adapted = adapt(&stable, ConstLearner(Vec::new()), &xs, &xu, AdaptConfig::default()).unwrap();
        let joint = adapted.predict_proba(&xs, &xu).unwrap();
        for i in 0..n {
            assert!((joint[(i, 1)] - stable_p[i]).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn binary_inversion_identity(x in 0.0..1.0f64, e0 in 0.0..1.0f64, e1 in 0.0..1.0f64) {
            prop_assume!(e0 + e1 - 1.0 > 0.01);
            let s = PseudoLabelStats::Binary { eps0: e0, eps1: e1 };
            let forward = (e0 + e1 - 1.0) * x + 1.0 - e0;
            let back = bias_correct_binary(p(forward), &s).unwrap().value();
            prop_assert!((back - x).abs() < 1e-12);
        }

        #[test]
        fn confusion_matches_binary(ps in proptest::collection::vec(0.0..1.0f64, 2..60)) {
            let probs: Vec<Probability> = ps.iter().map(|v| p(*v)).collect();
            let Ok(bin) = estimate_binary_accuracies(&probs) else { return Ok(()); };
            let rows: Vec<SimplexVector> = probs.iter().map(|v| SimplexVector::from_binary(*v)).collect();
            let multi = estimate_confusion(&rows).unwrap();
            let (PseudoLabelStats::Binary { eps0, eps1 }, PseudoLabelStats::Multiclass { confusion }) = (bin, multi) else { panic!() };
            prop_assert!((confusion[(0, 0)] - eps0).abs() < 1e-12);
            prop_assert!((confusion[(1, 1)] - eps1).abs() < 1e-12);
            for c in 0..2 {
                prop_assert!((confusion[(0, c)] + confusion[(1, c)] - 1.0).abs() < 1e-6);
            }
        }
    }
}
