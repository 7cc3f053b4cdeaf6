//! Environment data: synthetic generators with exact Bayes oracles, MNIST
//! IDX parsing and ColorMNIST construction.
//!
//! AC features are `[x_S, x_U]` in `{-1, +1}`; CE-DD features are
//! `[x_S, x_U]` in `{0, 1}`. Labels are always class indices.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linalg::Matrix;
use crate::prob::{combine_binary, Probability};
use crate::{Error, Result};

/// Default label-flip probability for ColorMNIST.
pub const CMNIST_LABEL_NOISE: f64 = 0.25;
/// Default color noise of the two training environments.
pub const CMNIST_TRAIN_NOISE: [f64; 2] = [0.1, 0.2];
/// Default color noise of the test environment.
pub const CMNIST_TEST_NOISE: f64 = 0.9;
pub const CMNIST_SIDE: usize = 14;
pub const CMNIST_FEATURES: usize = 2 * CMNIST_SIDE * CMNIST_SIDE;

/// Stable-feature accuracy of both synthetic generators.
const STABLE_STRENGTH: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum GeneratorTag {
    #[cfg_attr(feature = "serde", serde(rename = "ac"))]
    Ac,
    #[cfg_attr(feature = "serde", serde(rename = "cedd"))]
    Cedd,
    #[cfg_attr(feature = "serde", serde(rename = "cmnist"))]
    Cmnist,
}

impl GeneratorTag {
    pub fn name(self) -> &'static str {
        match self {
            Self::Ac => "ac",
            Self::Cedd => "cedd",
            Self::Cmnist => "cmnist",
        }
    }
}

/// Labeled samples from one environment; row `i` of `x` pairs with
/// `labels[i]`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EnvDataset {
    pub env_id: usize,
    pub beta: f64,
    pub generator: GeneratorTag,
    pub num_classes: usize,
    pub x: Matrix,
    pub labels: Vec<usize>,
}

impl EnvDataset {
    pub fn new(env_id: usize, beta: f64, generator: GeneratorTag, x: Matrix, labels: Vec<usize>) -> Result<Self> {
        check_unit(beta)?;
        if x.rows() != labels.len() {
            return Err(Error::LengthMismatch { left: x.rows(), right: labels.len() });
        }
        let num_classes = labels.iter().copied().max().map_or(2, |m| (m + 1).max(2));
        Ok(Self { env_id, beta, generator, num_classes, x, labels })
    }

    pub fn with_env_id(mut self, env_id: usize) -> Self {
        self.env_id = env_id;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `[start, end)` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let end = end.min(self.len());
        let start = start.min(end);
        let d = self.x.cols();
        let x = Matrix::from_vec(end - start, d, self.x.as_slice()[start * d..end * d].to_vec()).expect("slice layout");
        Self { x, labels: self.labels[start..end].to_vec(), ..self.clone_header() }
    }

    fn clone_header(&self) -> Self {
        Self {
            env_id: self.env_id,
            beta: self.beta,
            generator: self.generator,
            num_classes: self.num_classes,
            x: Matrix::zeros(0, self.x.cols()),
            labels: Vec::new(),
        }
    }

    /// Feature columns `[start, end)`.
    pub fn columns(&self, start: usize, end: usize) -> Matrix {
        self.x.columns(start, end)
    }
}

fn check_unit(beta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&beta) {
        Ok(())
    } else {
        Err(Error::ProbabilityOutOfRange(beta))
    }
}

fn rademacher<R: Rng>(rng: &mut R, p_plus: f64) -> f64 {
    if rng.gen_bool(p_plus) {
        1.0
    } else {
        -1.0
    }
}

/// `Y <- Rad(0.5); X_S <- Y * Rad(0.75); X_U <- Y * Rad(beta)`.
pub fn gen_ac(beta: f64, n: usize, seed: u64) -> Result<EnvDataset> {
    check_unit(beta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = rademacher(&mut rng, 0.5);
        x.push(y * rademacher(&mut rng, STABLE_STRENGTH));
        x.push(y * rademacher(&mut rng, beta));
        labels.push(usize::from(y > 0.0));
    }
    EnvDataset::new(0, beta, GeneratorTag::Ac, Matrix::from_vec(n, 2, x)?, labels)
}

/// `X_S <- Bern(0.5); Y <- X_S xor Bern(0.75); X_U <- (Y xor Bern(beta)) xor X_S`.
pub fn gen_cedd(beta: f64, n: usize, seed: u64) -> Result<EnvDataset> {
    check_unit(beta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let xs = rng.gen_bool(0.5);
        let y = xs ^ rng.gen_bool(STABLE_STRENGTH);
        let xu = (y ^ rng.gen_bool(beta)) ^ xs;
        x.push(f64::from(u8::from(xs)));
        x.push(f64::from(u8::from(xu)));
        labels.push(usize::from(y));
    }
    EnvDataset::new(0, beta, GeneratorTag::Cedd, Matrix::from_vec(n, 2, x)?, labels)
}

/// Conditionals of one `(x_S, x_U)` cell.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OracleCell {
    pub x_s: f64,
    pub x_u: f64,
    /// `Pr[x_S, x_U]`.
    pub mass: f64,
    pub p_given_s: f64,
    pub p_given_u: f64,
    pub p_given_su: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BayesOracle {
    pub generator: GeneratorTag,
    pub beta: f64,
    pub prior: f64,
    pub cells: Vec<OracleCell>,
    pub bayes_accuracy: f64,
}

impl BayesOracle {
    pub fn cell(&self, x_s: f64, x_u: f64) -> Option<&OracleCell> {
        self.cells.iter().find(|c| c.x_s == x_s && c.x_u == x_u)
    }

    /// Distinct `x_U` values with their marginal mass and `Pr[Y=1|x_U]`.
    pub fn unstable_marginal(&self) -> Vec<(f64, f64, f64)> {
        let mut out: Vec<(f64, f64, f64)> = Vec::new();
        for c in &self.cells {
            match out.iter_mut().find(|(v, _, _)| *v == c.x_u) {
                Some(entry) => entry.1 += c.mass,
                None => out.push((c.x_u, c.mass, c.p_given_u)),
            }
        }
        out
    }

    /// Bayes label from `x_U` alone, `None` on a tie.
    pub fn bayes_label_u(&self, x_u: f64) -> Option<usize> {
        let p = self.cells.iter().find(|c| c.x_u == x_u)?.p_given_u;
        if p > 0.5 {
            Some(1)
        } else if p < 0.5 {
            Some(0)
        } else {
            None
        }
    }
}

/// Exact conditionals by enumerating the generator's finite joint law.
pub fn bayes_oracle(tag: GeneratorTag, beta: f64) -> Result<BayesOracle> {
    check_unit(beta)?;
    let b = |v: bool, p: f64| if v { p } else { 1.0 - p };
    // joint[(xs, xu, y)] over binary codes.
    let mut joint = [[[0.0f64; 2]; 2]; 2];
    let values: [f64; 2] = match tag {
        GeneratorTag::Ac => {
            for y in [false, true] {
                for s_flip in [false, true] {
                    for u_flip in [false, true] {
                        // Rad(p) is +1 with probability p; a "flip" is -1.
                        let xs = y ^ s_flip;
                        let xu = y ^ u_flip;
                        joint[usize::from(xs)][usize::from(xu)][usize::from(y)] +=
                            0.5 * b(!s_flip, STABLE_STRENGTH) * b(!u_flip, beta);
                    }
                }
            }
            [-1.0, 1.0]
        }
        GeneratorTag::Cedd => {
            for xs in [false, true] {
                for ny in [false, true] {
                    for nu in [false, true] {
                        let y = xs ^ ny;
                        let xu = (y ^ nu) ^ xs;
                        joint[usize::from(xs)][usize::from(xu)][usize::from(y)] +=
                            0.5 * b(ny, STABLE_STRENGTH) * b(nu, beta);
                    }
                }
            }
            [0.0, 1.0]
        }
        GeneratorTag::Cmnist => return Err(Error::UnsupportedGenerator("cmnist")),
    };
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.5 };
    let mut cells = Vec::with_capacity(4);
    let mut bayes = 0.0;
    for s in 0..2 {
        for u in 0..2 {
            let mass = joint[s][u][0] + joint[s][u][1];
            let s_mass: f64 = (0..2).map(|v| joint[s][v][0] + joint[s][v][1]).sum();
            let s_pos: f64 = (0..2).map(|v| joint[s][v][1]).sum();
            let u_mass: f64 = (0..2).map(|v| joint[v][u][0] + joint[v][u][1]).sum();
            let u_pos: f64 = (0..2).map(|v| joint[v][u][1]).sum();
            bayes += joint[s][u][0].max(joint[s][u][1]);
            cells.push(OracleCell {
                x_s: values[s],
                x_u: values[u],
                mass,
                p_given_s: ratio(s_pos, s_mass),
                p_given_u: ratio(u_pos, u_mass),
                p_given_su: ratio(joint[s][u][1], mass),
            });
        }
    }
    let prior = (0..2).flat_map(|s| (0..2).map(move |u| (s, u))).map(|(s, u)| joint[s][u][1]).sum();
    Ok(BayesOracle { generator: tag, beta, prior, cells, bayes_accuracy: bayes })
}

/// Joint posterior implied by fusing the oracle's two single-feature
/// posteriors under its prior.
pub fn fused_posterior(oracle: &BayesOracle, cell: &OracleCell) -> Result<f64> {
    let p = combine_binary(
        Probability::new(cell.p_given_s)?,
        Probability::new(cell.p_given_u)?,
        Probability::new(oracle.prior)?,
    )?;
    Ok(p.value())
}

/// `Pr_{X_U}[h(X_U) != h*(X_U)]`, skipping `x_U` values where the Bayes
/// label is tied.
pub fn suboptimality_vs_bayes(h: impl Fn(f64) -> usize, oracle: &BayesOracle) -> Result<f64> {
    if oracle.generator == GeneratorTag::Cmnist {
        return Err(Error::UnsupportedGenerator("cmnist"));
    }
    Ok(oracle
        .unstable_marginal()
        .into_iter()
        .filter_map(|(x_u, mass, _)| {
            let best = oracle.bayes_label_u(x_u)?;
            (h(x_u) != best).then_some(mass)
        })
        .sum())
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let chunk = bytes.get(offset..offset + 4).ok_or(Error::TruncatedFile { needed: offset + 4, have: bytes.len() })?;
    Ok(u32::from_be_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = read_u32(bytes, 0)?;
    if found != expected {
        return Err(Error::BadMagic { found, expected });
    }
    Ok(())
}

/// Uncompressed IDX image file contents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn image(&self, i: usize) -> &[u8] {
        let size = self.rows * self.cols;
        &self.pixels[i * size..(i + 1) * size]
    }
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let needed = 16 + count * rows * cols;
    if bytes.len() < needed {
        return Err(Error::TruncatedFile { needed, have: bytes.len() });
    }
    Ok(IdxImages { count, rows, cols, pixels: bytes[16..needed].to_vec() })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(Error::TruncatedFile { needed, have: bytes.len() });
    }
    Ok(bytes[8..needed].to_vec())
}

/// Raw MNIST digits with matching labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MnistDigits {
    pub images: IdxImages,
    pub labels: Vec<u8>,
}

impl MnistDigits {
    pub fn new(images: IdxImages, labels: Vec<u8>) -> Result<Self> {
        if images.count != labels.len() {
            return Err(Error::CountMismatch { images: images.count, labels: labels.len() });
        }
        Ok(Self { images, labels })
    }

    pub fn parse(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Self> {
        Self::new(parse_idx_images(image_bytes)?, parse_idx_labels(label_bytes)?)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Color noise giving color-label correlation `c`.
pub fn color_noise_for_correlation(c: f64) -> f64 {
    (1.0 - c) / 2.0
}

/// Every other row and column, scaled to `[0, 1]`.
fn downsample(img: &[u8], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(CMNIST_SIDE * CMNIST_SIDE);
    for r in (0..rows).step_by(2).take(CMNIST_SIDE) {
        for c in (0..cols).step_by(2).take(CMNIST_SIDE) {
            out.push(f64::from(img[r * cols + c]) / 255.0);
        }
    }
    out.resize(CMNIST_SIDE * CMNIST_SIDE, 0.0);
    out
}

/// Colored binary-label environments. Digits are shuffled and dealt
/// round-robin to one environment per noise level (env ids `0..`). The
/// label is `1{digit >= 5}` flipped with `label_noise`; the color equals
/// the label flipped with the environment's noise and selects which of the
/// two channels carries the digit.
pub fn make_cmnist(
    digits: &MnistDigits,
    color_noise_levels: &[f64],
    label_noise: f64,
    seed: u64,
) -> Result<Vec<EnvDataset>> {
    if !(0.0..1.0).contains(&label_noise) {
        return Err(Error::ProbabilityOutOfRange(label_noise));
    }
    for &e in color_noise_levels {
        check_unit(e)?;
    }
    let m = color_noise_levels.len();
    if m == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..digits.len()).collect();
    order.shuffle(&mut rng);
    let plane = CMNIST_SIDE * CMNIST_SIDE;
    let mut rows: Vec<Vec<f64>> = vec![Vec::new(); m];
    let mut labels: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (k, &i) in order.iter().enumerate() {
        let env = k % m;
        let clean = digits.labels[i] >= 5;
        let y = clean ^ rng.gen_bool(label_noise);
        let color = y ^ rng.gen_bool(color_noise_levels[env]);
        let img = downsample(digits.images.image(i), digits.images.rows, digits.images.cols);
        let mut feat = vec![0.0; 2 * plane];
        let channel = usize::from(color);
        feat[channel * plane..(channel + 1) * plane].copy_from_slice(&img);
        rows[env].extend(feat);
        labels[env].push(usize::from(y));
    }
    let mut out = Vec::with_capacity(m);
    for (env, (x, y)) in rows.into_iter().zip(labels).enumerate() {
        let n = y.len();
        out.push(EnvDataset::new(
            env,
            color_noise_levels[env],
            GeneratorTag::Cmnist,
            Matrix::from_vec(n, CMNIST_FEATURES, x)?,
            y,
        )?);
    }
    Ok(out)
}

/// Channel index carrying the digit in a ColorMNIST row (1 = second).
pub fn cmnist_color(row: &[f64]) -> usize {
    let plane = CMNIST_SIDE * CMNIST_SIDE;
    let first: f64 = row[..plane].iter().sum();
    let second: f64 = row[plane..2 * plane].iter().sum();
    usize::from(second > first)
}

/// Copies the digit into both channels so color carries no information.
pub fn grayscale(ds: &EnvDataset) -> EnvDataset {
    let plane = CMNIST_SIDE * CMNIST_SIDE;
    let mut x = ds.x.clone();
    for i in 0..x.rows() {
        let row = x.row_mut(i);
        for p in 0..plane {
            let v = row[p].max(row[plane + p]);
            row[p] = v;
            row[plane + p] = v;
        }
    }
    EnvDataset { x, ..ds.clone() }
}
