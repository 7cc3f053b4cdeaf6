//! Post-hoc temperature scaling and expected calibration error.
//!
//! Logits are passed as an `n x c` matrix. A single column (`c == 1`) is a
//! binary logit for class 1 and maps to `(1 - p, p)`; more columns are
//! softmax logits.

use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::Matrix;
use crate::math;
use crate::prob::{argmax, sigmoid_f64};
use crate::{Error, Result};

pub const DEFAULT_BINS: usize = 15;
pub const DEFAULT_GRID: [f64; 8] = [0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 5.0];

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "f64", into = "f64"))]
pub struct Temperature(f64);

impl Temperature {
    pub const IDENTITY: Self = Self(1.0);

    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value > 0.0 {
            Ok(Self(value))
        } else {
            Err(Error::InvalidTemperature(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn default_grid() -> Vec<Temperature> {
        DEFAULT_GRID.iter().map(|&t| Self(t)).collect()
    }
}

impl TryFrom<f64> for Temperature {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Self::new(value)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// One reliability-diagram bin.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ReliabilityBin {
    pub confidence: f64,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CalibrationReport {
    pub ece_before: f64,
    pub ece_after: f64,
    pub temperature: Temperature,
    pub bins: usize,
    pub reliability_curve: Vec<ReliabilityBin>,
}

/// Divides logits by `t` and maps them to class probabilities.
pub fn apply_temperature(logits: &Matrix, t: Temperature) -> Matrix {
    let n = logits.rows();
    let c = logits.cols();
    if c == 1 {
        let mut out = Matrix::zeros(n, 2);
        for i in 0..n {
            let p = sigmoid_f64(logits[(i, 0)] / t.0);
            out[(i, 0)] = 1.0 - p;
            out[(i, 1)] = p;
        }
        return out;
    }
    let mut out = Matrix::zeros(n, c);
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, z) in out.row_mut(i).iter_mut().zip(row) {
            *o = math::exp((z - max) / t.0);
            total += *o;
        }
        out.row_mut(i).iter_mut().for_each(|o| *o /= total);
    }
    out
}

/// Max-class confidence reliability bins over `[0, 1]`.
pub fn reliability_curve(probs: &Matrix, labels: &[usize], bins: usize) -> Result<Vec<ReliabilityBin>> {
    if bins == 0 {
        return Err(Error::NoBins);
    }
    if probs.rows() != labels.len() {
        return Err(Error::LengthMismatch { left: probs.rows(), right: labels.len() });
    }
    let mut conf = vec![0.0; bins];
    let mut correct = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for (i, &y) in labels.iter().enumerate() {
        let row = probs.row(i);
        let pred = argmax(row);
        let c = row[pred];
        let b = ((c * bins as f64) as usize).min(bins - 1);
        conf[b] += c;
        if pred == y {
            correct[b] += 1.0;
        }
        count[b] += 1;
    }
    Ok((0..bins)
        .map(|b| {
            let n = count[b].max(1) as f64;
            ReliabilityBin { confidence: conf[b] / n, accuracy: correct[b] / n, count: count[b] }
        })
        .collect())
}

/// Expected calibration error with `bins` equal-width confidence bins.
/// Empty bins contribute nothing; an empty sample has ECE 0.
pub fn ece(probs: &Matrix, labels: &[usize], bins: usize) -> Result<f64> {
    let curve = reliability_curve(probs, labels, bins)?;
    let n = labels.len();
    if n == 0 {
        return Ok(0.0);
    }
    Ok(curve.iter().map(|b| b.count as f64 / n as f64 * (b.accuracy - b.confidence).abs()).sum())
}

/// Grid temperature with the lowest ECE; ties go to the temperature closest
/// to 1.
pub fn fit_temperature(logits: &Matrix, labels: &[usize], grid: &[Temperature], bins: usize) -> Result<Temperature> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if logits.rows() != labels.len() {
        return Err(Error::LengthMismatch { left: logits.rows(), right: labels.len() });
    }
    let mut best = grid[0];
    let mut best_ece = f64::INFINITY;
    for &t in grid {
        let e = ece(&apply_temperature(logits, t), labels, bins)?;
        let closer = (t.0 - 1.0).abs() < (best.0 - 1.0).abs();
        if e < best_ece || (e == best_ece && closer) {
            best = t;
            best_ece = e;
        }
    }
    Ok(best)
}

/// Fits a temperature and reports ECE before and after.
pub fn calibrate(logits: &Matrix, labels: &[usize], grid: &[Temperature], bins: usize) -> Result<CalibrationReport> {
    let t = fit_temperature(logits, labels, grid, bins)?;
    let before = ece(&apply_temperature(logits, Temperature::IDENTITY), labels, bins)?;
    let after_probs = apply_temperature(logits, t);
    let after = ece(&after_probs, labels, bins)?;
    Ok(CalibrationReport {
        ece_before: before,
        ece_after: after,
        temperature: t,
        bins,
        reliability_curve: reliability_curve(&after_probs, labels, bins)?,
    })
}
