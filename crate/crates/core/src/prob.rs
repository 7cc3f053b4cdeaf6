//! Probability and logit algebra shared by every other module.
//!
//! The two fusion rules live here: [`combine_binary`] adds stable and
//! unstable logits and removes the prior logit once, [`combine_multiclass`]
//! multiplies the class probabilities, divides by the prior and renormalizes.
//! For two classes they are the same map.

use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::math;
use crate::{Error, Result};

/// Clamp applied to probabilities before they enter a logarithm on training
/// paths. The combination functions do not clamp; they treat exact 0 and 1 as
/// saturated states.
pub const PROB_CLAMP: f64 = 1e-7;

/// Tolerance for a vector to count as lying on the simplex.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A probability in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "f64", into = "f64"))]
pub struct Probability(f64);

impl Probability {
    pub const ZERO: Self = Self(0.0);
    pub const HALF: Self = Self(0.5);
    pub const ONE: Self = Self(1.0);

    pub fn new(value: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&value) {
            Ok(Self(value))
        } else {
            Err(Error::ProbabilityOutOfRange(value))
        }
    }

    /// Clamps into `[0, 1]`; NaN maps to 0.5.
    pub fn saturating(value: f64) -> Self {
        if value.is_nan() {
            Self::HALF
        } else {
            Self(value.clamp(0.0, 1.0))
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    #[inline]
    pub fn complement(self) -> Self {
        Self(1.0 - self.0)
    }

    #[inline]
    pub fn is_saturated(self) -> bool {
        self.0 == 0.0 || self.0 == 1.0
    }
}

impl TryFrom<f64> for Probability {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Self::new(value)
    }
}

impl From<Probability> for f64 {
    fn from(p: Probability) -> f64 {
        p.0
    }
}

/// A log-odds value. `+inf` and `-inf` are the saturated states of
/// probabilities 1 and 0.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct LogitValue(f64);

impl LogitValue {
    pub fn new(value: f64) -> Self {
        Self(value)
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    #[inline]
    pub fn is_saturated(self) -> bool {
        self.0.is_infinite()
    }
}

/// `ln(p / (1 - p))`, with 0 and 1 mapped to the infinite logits.
pub fn logit(p: Probability) -> LogitValue {
    LogitValue(logit_f64(p.value()))
}

#[inline]
pub(crate) fn logit_f64(p: f64) -> f64 {
    if p <= 0.0 {
        f64::NEG_INFINITY
    } else if p >= 1.0 {
        f64::INFINITY
    } else {
        math::ln(p) - math::ln_1p(-p)
    }
}

/// Logistic function; maps the infinite logits to exactly 0 and 1.
pub fn sigmoid(z: LogitValue) -> Probability {
    Probability(sigmoid_f64(z.value()))
}

#[inline]
pub fn sigmoid_f64(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + math::exp(-z))
    } else {
        let e = math::exp(z);
        e / (1.0 + e)
    }
}

/// Clamps a raw probability to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
#[inline]
pub fn clamp_probability(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Fuses a stable and an unstable class-1 probability that were each
/// computed under `prior`.
///
/// When exactly one input is saturated its value wins. Both saturated in
/// opposite directions is [`Error::ConflictingCertainty`]: with correctly
/// specified conditionals that event has probability zero.
pub fn combine_binary(p_stable: Probability, p_unstable: Probability, prior: Probability) -> Result<Probability> {
    if prior.is_saturated() {
        return Err(Error::DegeneratePrior);
    }
    match (p_stable.is_saturated(), p_unstable.is_saturated()) {
        (true, true) if p_stable != p_unstable => Err(Error::ConflictingCertainty),
        (true, _) => Ok(p_stable),
        (false, true) => Ok(p_unstable),
        (false, false) => {
            let z = logit_f64(p_stable.value()) + logit_f64(p_unstable.value()) - logit_f64(prior.value());
            Ok(Probability(sigmoid_f64(z)))
        }
    }
}

/// A point on the probability simplex with at least two classes.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "Vec<f64>", into = "Vec<f64>"))]
pub struct SimplexVector(Vec<f64>);

impl SimplexVector {
    /// Validates and renormalizes. Entries down to `-SIMPLEX_TOL` are clipped
    /// to zero and a sum within `SIMPLEX_TOL` of one is rescaled to one.
    pub fn new(mut entries: Vec<f64>) -> Result<Self> {
        if entries.len() < 2 {
            return Err(Error::TooFewClasses(entries.len()));
        }
        let sum: f64 = entries.iter().sum();
        let min = entries.iter().copied().fold(f64::INFINITY, f64::min);
        let finite = entries.iter().all(|v| v.is_finite());
        if !finite || min < -SIMPLEX_TOL || (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::NotOnSimplex { sum, min });
        }
        for v in entries.iter_mut() {
            *v = v.max(0.0);
        }
        let sum: f64 = entries.iter().sum();
        for v in entries.iter_mut() {
            *v /= sum;
        }
        Ok(Self(entries))
    }

    /// Scales a nonnegative vector with positive mass onto the simplex.
    pub fn normalize(entries: Vec<f64>) -> Result<Self> {
        if entries.len() < 2 {
            return Err(Error::TooFewClasses(entries.len()));
        }
        if entries.iter().any(|v| !v.is_finite() || *v < 0.0) {
            let sum = entries.iter().sum();
            let min = entries.iter().copied().fold(f64::INFINITY, f64::min);
            return Err(Error::NotOnSimplex { sum, min });
        }
        let sum: f64 = entries.iter().sum();
        if sum <= 0.0 {
            return Err(Error::ZeroMass);
        }
        Ok(Self(entries.into_iter().map(|v| v / sum).collect()))
    }

    pub fn uniform(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::TooFewClasses(k));
        }
        Ok(Self(alloc::vec![1.0 / k as f64; k]))
    }

    /// Unit mass on `class`.
    pub fn one_hot(k: usize, class: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::TooFewClasses(k));
        }
        if class >= k {
            return Err(Error::ShapeMismatch { expected: k, got: class + 1 });
        }
        let mut v = alloc::vec![0.0; k];
        v[class] = 1.0;
        Ok(Self(v))
    }

    /// `(1 - p, p)`.
    pub fn from_binary(p: Probability) -> Self {
        Self(alloc::vec![1.0 - p.value(), p.value()])
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest entry; the first one on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl TryFrom<Vec<f64>> for SimplexVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SimplexVector> for Vec<f64> {
    fn from(v: SimplexVector) -> Vec<f64> {
        v.0
    }
}

/// First index of the maximum; NaN entries are ignored.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] || values[best].is_nan() {
            best = i;
        }
    }
    best
}

/// Product-and-renormalize fusion: `p_S * p_U / prior`, normalized.
pub fn combine_multiclass(
    p_stable: &SimplexVector,
    p_unstable: &SimplexVector,
    prior: &SimplexVector,
) -> Result<SimplexVector> {
    let k = p_stable.len();
    for other in [p_unstable.len(), prior.len()] {
        if other != k {
            return Err(Error::ShapeMismatch { expected: k, got: other });
        }
    }
    if prior.as_slice().iter().any(|&p| p <= 0.0) {
        return Err(Error::DegeneratePrior);
    }
    let q: Vec<f64> = p_stable
        .as_slice()
        .iter()
        .zip(p_unstable.as_slice())
        .zip(prior.as_slice())
        .map(|((s, u), pi)| s * u / pi)
        .collect();
    let total: f64 = q.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroMass);
    }
    Ok(SimplexVector(q.into_iter().map(|v| v / total).collect()))
}

/// Euclidean projection onto the probability simplex (sort-based, exact).
pub fn project_to_simplex(v: &[f64]) -> Result<SimplexVector> {
    if v.len() < 2 {
        return Err(Error::TooFewClasses(v.len()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        let sum = v.iter().sum();
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        return Err(Error::NotOnSimplex { sum, min });
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (j, u) in sorted.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - 1.0) / (j + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        }
    }
    let mut out: Vec<f64> = v.iter().map(|x| (x - theta).max(0.0)).collect();
    let sum: f64 = out.iter().sum();
    for x in out.iter_mut() {
        *x /= sum;
    }
    Ok(SimplexVector(out))
}
