//! Per-seed experiment pipeline: generate, train, calibrate, adapt and
//! evaluate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sfb_core::adaptation::{
    adapt, combine_rows, AdaptConfig, AdaptedClassifier, GradientFitConfig, LogisticLearner, NetLearner,
    RoundDiagnostics, StableClassifier, StatsPolicy, TabularLearner, UnstableLearner,
};
use sfb_core::calibration::{calibrate, CalibrationReport, Temperature};
use sfb_core::envs::{
    bayes_oracle, color_noise_for_correlation, gen_ac, gen_cedd, make_cmnist, EnvDataset, GeneratorTag,
};
use sfb_core::linalg::Matrix;
use sfb_core::prob::argmax;
use sfb_core::training::{one_hot, train_with_log, Method, SfbModel, StepMetrics, TrainConfig};
use sfb_core::Error;

use crate::checkpoint::{AdaptedCheckpoint, Mode, StableRef, CHECKPOINT_VERSION};
use crate::config::{ExperimentConfig, LearnerKind, MethodName, UnstableFeatures};
use crate::error::{HarnessError, Stage, StageExt};
use crate::io::{load_mnist_split, MnistSplit};

/// Environments of one seed. Training environments have ids `0..m`.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<EnvDataset>,
    pub validation: EnvDataset,
    pub test: EnvDataset,
    /// Labeled test-domain sample used to train the Oracle baseline.
    pub oracle_train: EnvDataset,
}

/// Deterministic per-seed, per-purpose RNG seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15)).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn synthetic(tag: GeneratorTag, beta: f64, n: usize, seed: u64) -> Result<EnvDataset, HarnessError> {
    match tag {
        GeneratorTag::Ac => gen_ac(beta, n, seed),
        GeneratorTag::Cedd => gen_cedd(beta, n, seed),
        GeneratorTag::Cmnist => Err(Error::UnsupportedGenerator("cmnist")),
    }
    .stage(Stage::Generate)
}

pub fn generate(cfg: &ExperimentConfig, seed: u64) -> Result<Splits, HarnessError> {
    let d = &cfg.dataset;
    let m = d.train.len();
    if d.generator == GeneratorTag::Cmnist {
        return generate_cmnist(cfg, seed);
    }
    let mut train = Vec::with_capacity(m);
    for (e, &beta) in d.train.iter().enumerate() {
        train.push(synthetic(d.generator, beta, d.n_train, derive_seed(seed, e as u64))?.with_env_id(e));
    }
    let validation = synthetic(d.generator, d.validation, d.n_validation, derive_seed(seed, 100))?.with_env_id(m);
    let test = synthetic(d.generator, d.test, d.n_test, derive_seed(seed, 101))?.with_env_id(m + 1);
    let oracle_train = synthetic(d.generator, d.test, d.n_test, derive_seed(seed, 102))?.with_env_id(m + 2);
    Ok(Splits { train, validation, test, oracle_train })
}

fn generate_cmnist(cfg: &ExperimentConfig, seed: u64) -> Result<Splits, HarnessError> {
    let d = &cfg.dataset;
    let m = d.train.len();
    let dir = cfg.data_dir();
    let train_digits = load_mnist_split(dir.as_deref(), MnistSplit::Train)?;
    let mut noises = d.train.clone();
    noises.push(d.validation);
    let envs = make_cmnist(&train_digits, &noises, d.label_noise, derive_seed(seed, 0)).stage(Stage::Generate)?;
    let mut train = Vec::with_capacity(m);
    for (e, env) in envs.iter().take(m).enumerate() {
        train.push(env.slice(0, d.n_train).with_env_id(e));
    }
    let validation = envs[m].slice(0, d.n_validation).with_env_id(m);
    let (test, oracle_train) = cmnist_test_pair(cfg, seed, d.test)?;
    Ok(Splits { train, validation, test, oracle_train })
}

/// Two disjoint ColorMNIST environments drawn from the MNIST test digits.
fn cmnist_test_pair(cfg: &ExperimentConfig, seed: u64, noise: f64) -> Result<(EnvDataset, EnvDataset), HarnessError> {
    let d = &cfg.dataset;
    let m = d.train.len();
    let test_digits = load_mnist_split(cfg.data_dir().as_deref(), MnistSplit::Test)?;
    let envs =
        make_cmnist(&test_digits, &[noise, noise], d.label_noise, derive_seed(seed, 1)).stage(Stage::Generate)?;
    Ok((envs[0].slice(0, d.n_test).with_env_id(m + 1), envs[1].slice(0, d.n_test).with_env_id(m + 2)))
}

/// Test environment at a sweep value: `beta` for the synthetic generators,
/// color-label correlation for ColorMNIST.
pub fn sweep_test_env(cfg: &ExperimentConfig, seed: u64, value: f64) -> Result<EnvDataset, HarnessError> {
    let d = &cfg.dataset;
    match d.generator {
        GeneratorTag::Cmnist => Ok(cmnist_test_pair(cfg, seed, color_noise_for_correlation(value))?.0),
        tag => Ok(synthetic(tag, value, d.n_test, derive_seed(seed, 101))?.with_env_id(d.train.len() + 1)),
    }
}

/// Calibrated stable predictor of a trained model.
pub struct ModelStable<'a>(pub &'a SfbModel);

impl StableClassifier for ModelStable<'_> {
    fn predict_proba(&self, x: &Matrix) -> sfb_core::Result<Matrix> {
        self.0.stable_proba(x)
    }
}

pub fn unstable_features(model: &SfbModel, kind: UnstableFeatures, x: &Matrix) -> sfb_core::Result<Matrix> {
    match kind {
        UnstableFeatures::Representation => Ok(model.representation(x)?.1),
        UnstableFeatures::HeadLogits => model.unstable_head_features(x),
    }
}

pub fn make_learner(cfg: &ExperimentConfig, steps: usize, seed: u64) -> Box<dyn UnstableLearner> {
    let a = &cfg.adaptation;
    let fit = GradientFitConfig { lr: a.lr, steps, l2: a.l2, seed };
    match a.learner {
        LearnerKind::Logistic => Box::new(LogisticLearner::new(fit)),
        LearnerKind::Tabular => Box::new(TabularLearner::new()),
        LearnerKind::Mlp => Box::new(NetLearner::new(a.hidden.clone(), fit)),
    }
}

pub fn accuracy(probs: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = (0..probs.rows()).filter(|&i| argmax(probs.row(i)) == labels[i]).count();
    100.0 * correct as f64 / labels.len() as f64
}

type Adapted<'a> = AdaptedClassifier<ModelStable<'a>, Box<dyn UnstableLearner>>;

/// Outcome of one adaptation. `None` means the stable pseudo-labels were
/// not informative enough and predictions fall back to the stable model.
pub struct AdaptRun<'a> {
    pub adapted: Option<Adapted<'a>>,
    pub fallback_reason: Option<String>,
    pub probs: Matrix,
}

pub fn run_adaptation<'a>(
    cfg: &ExperimentConfig,
    model: &'a SfbModel,
    x: &Matrix,
    steps: usize,
    bias_correction: bool,
    stats_policy: StatsPolicy,
    seed: u64,
) -> Result<AdaptRun<'a>, HarnessError> {
    let xu = unstable_features(model, cfg.adaptation.features, x).stage(Stage::Adapt)?;
    let config = AdaptConfig { rounds: cfg.adaptation.rounds, stats_policy, bias_correction };
    match adapt(ModelStable(model), make_learner(cfg, steps, seed), x, &xu, config) {
        Ok(a) => {
            let probs = a.predict_proba(x, &xu).stage(Stage::Adapt)?;
            Ok(AdaptRun { adapted: Some(a), fallback_reason: None, probs })
        }
        Err(e @ (Error::UninformativeStable { .. } | Error::DegenerateClassMass { .. })) => Ok(AdaptRun {
            adapted: None,
            fallback_reason: Some(e.to_string()),
            probs: model.stable_proba(x).stage(Stage::Adapt)?,
        }),
        Err(e) => Err(HarnessError::Core { stage: Stage::Adapt, source: e }),
    }
}

/// Mean negative log-likelihood of the true labels.
pub fn mean_nll(probs: &Matrix, labels: &[usize]) -> f64 {
    let total: f64 = labels.iter().enumerate().map(|(i, &y)| -probs.row(i)[y].max(1e-12).ln()).sum();
    total / labels.len().max(1) as f64
}

/// Number of adaptation steps in `1..=max_steps` with the lowest adapted
/// cross-entropy on the validation split (ties go to fewer steps). Returns
/// the steps and the validation accuracy at those steps.
///
/// Cross-entropy rather than accuracy: when the validation domain's unstable
/// feature is weak, accuracy is flat in the step count and cannot tell an
/// unfitted learner from a fitted one.
pub fn select_steps(
    cfg: &ExperimentConfig,
    model: &SfbModel,
    val: &EnvDataset,
    seed: u64,
) -> Result<(usize, f64), HarnessError> {
    let candidates: Vec<usize> = match cfg.adaptation.learner {
        LearnerKind::Tabular => vec![1],
        _ => (1..=cfg.adaptation.max_steps).collect(),
    };
    let mut best = (candidates[0], f64::INFINITY, 0.0);
    for steps in candidates {
        let run = run_adaptation(cfg, model, &val.x, steps, true, cfg.adaptation.stats_policy, seed)?;
        let nll = mean_nll(&run.probs, &val.labels);
        if nll < best.1 {
            best = (steps, nll, accuracy(&run.probs, &val.labels));
        }
    }
    Ok((best.0, best.2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lambda_s: f64,
    pub lambda_c: f64,
    pub temperature: f64,
    pub validation_stable_accuracy: f64,
    pub validation_adapted_accuracy: f64,
    pub adaptation_steps: usize,
}

/// Trained models of one seed plus the selection record.
pub struct TrainedSeed {
    pub seed: u64,
    pub model: SfbModel,
    pub metrics: Vec<StepMetrics>,
    pub calibration: CalibrationReport,
    pub adaptation_steps: usize,
    pub selected: GridPoint,
    pub grid: Vec<GridPoint>,
    pub erm: Option<SfbModel>,
    pub irm: Option<SfbModel>,
    pub oracle: Option<SfbModel>,
}

/// Rows of several environments stacked into one dataset.
pub fn concat(envs: &[EnvDataset]) -> Result<EnvDataset, HarnessError> {
    let cols = envs[0].x.cols();
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for e in envs {
        values.extend_from_slice(e.x.as_slice());
        labels.extend_from_slice(&e.labels);
    }
    let x = Matrix::from_vec(labels.len(), cols, values).stage(Stage::Calibrate)?;
    EnvDataset::new(envs[0].env_id, envs[0].beta, envs[0].generator, x, labels).stage(Stage::Calibrate)
}

/// Split used to fit the temperature: the pooled training domains for
/// ColorMNIST, the validation domain otherwise.
pub fn calibration_split(cfg: &ExperimentConfig, splits: &Splits) -> Result<EnvDataset, HarnessError> {
    match cfg.dataset.generator {
        GeneratorTag::Cmnist => concat(&splits.train),
        _ => Ok(splits.validation.clone()),
    }
}

fn calibrate_model(
    cfg: &ExperimentConfig,
    model: &mut SfbModel,
    val: &EnvDataset,
) -> Result<CalibrationReport, HarnessError> {
    let grid = cfg
        .calibration
        .grid
        .iter()
        .map(|t| Temperature::new(*t))
        .collect::<sfb_core::Result<Vec<_>>>()
        .stage(Stage::Calibrate)?;
    let logits = model.stable_logits(&val.x).stage(Stage::Calibrate)?;
    let report = calibrate(&logits, &val.labels, &grid, cfg.calibration.bins).stage(Stage::Calibrate)?;
    model.temperature = report.temperature;
    Ok(report)
}

fn train_variant(
    cfg: &ExperimentConfig,
    envs: &[EnvDataset],
    method: Method,
    seed: u64,
    lambda_s: f64,
) -> Result<SfbModel, HarnessError> {
    let tc = TrainConfig { method, lambda_s, seed: derive_seed(seed, 200 + method as u64), ..cfg.train.clone() };
    train_with_log(envs, &tc, |_| {}).stage(Stage::Train)
}

/// Trains SFB over the penalty grid, keeps the point with the best adapted
/// validation accuracy, and trains the requested baselines.
pub fn train_seed(cfg: &ExperimentConfig, seed: u64, splits: &Splits) -> Result<TrainedSeed, HarnessError> {
    let mut best: Option<(SfbModel, Vec<StepMetrics>, CalibrationReport, GridPoint)> = None;
    let mut grid = Vec::new();
    let calib = calibration_split(cfg, splits)?;
    for (lambda_s, lambda_c) in cfg.search_grid() {
        let tc =
            TrainConfig { method: Method::Sfb, lambda_s, lambda_c, seed: derive_seed(seed, 200), ..cfg.train.clone() };
        let mut metrics = Vec::new();
        let mut model = train_with_log(&splits.train, &tc, |m| metrics.push(m.clone())).stage(Stage::Train)?;
        let report = calibrate_model(cfg, &mut model, &calib)?;
        let stable_acc =
            accuracy(&model.stable_proba(&splits.validation.x).stage(Stage::Evaluate)?, &splits.validation.labels);
        let (steps, adapted_acc) = select_steps(cfg, &model, &splits.validation, derive_seed(seed, 300))?;
        let point = GridPoint {
            lambda_s,
            lambda_c,
            temperature: report.temperature.value(),
            validation_stable_accuracy: stable_acc,
            validation_adapted_accuracy: adapted_acc,
            adaptation_steps: steps,
        };
        grid.push(point.clone());
        if best.as_ref().is_none_or(|b| adapted_acc > b.3.validation_adapted_accuracy) {
            best = Some((model, metrics, report, point));
        }
    }
    let (model, metrics, calibration, selected) = best.expect("search grid is nonempty");
    let erm = if cfg.wants(MethodName::Erm) {
        Some(train_variant(cfg, &splits.train, Method::Erm, seed, 0.0)?)
    } else {
        None
    };
    let irm = if cfg.wants(MethodName::Irm) {
        Some(train_variant(cfg, &splits.train, Method::Irm, seed, selected.lambda_s)?)
    } else {
        None
    };
    let oracle = if cfg.wants(MethodName::Oracle) {
        Some(train_variant(cfg, std::slice::from_ref(&splits.oracle_train), Method::Erm, seed, 0.0)?)
    } else {
        None
    };
    Ok(TrainedSeed {
        seed,
        model,
        metrics,
        calibration,
        adaptation_steps: selected.adaptation_steps,
        selected,
        grid,
        erm,
        irm,
        oracle,
    })
}

/// Adaptation record of one evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptationDiagnostics {
    pub steps: usize,
    pub rounds: Vec<RoundDiagnostics>,
    pub fallback: bool,
    pub fallback_reason: Option<String>,
    /// Accuracy when later rounds keep the first round's statistics.
    pub frozen_stats_accuracy: Option<f64>,
}

pub struct Evaluation {
    pub accuracies: BTreeMap<MethodName, f64>,
    pub adaptation: AdaptationDiagnostics,
    pub checkpoint: Option<AdaptedCheckpoint>,
}

/// Scores every requested method on `test`.
pub fn evaluate_seed(
    cfg: &ExperimentConfig,
    trained: &TrainedSeed,
    test: &EnvDataset,
) -> Result<Evaluation, HarnessError> {
    let model = &trained.model;
    let seed = derive_seed(trained.seed, 400);
    let mut acc = BTreeMap::new();
    let stable = model.stable_proba(&test.x).stage(Stage::Evaluate)?;
    if cfg.wants(MethodName::SfbNoAdapt) {
        acc.insert(MethodName::SfbNoAdapt, accuracy(&stable, &test.labels));
    }
    let steps = trained.adaptation_steps;
    let run = run_adaptation(cfg, model, &test.x, steps, true, cfg.adaptation.stats_policy, seed)?;
    if cfg.wants(MethodName::Sfb) {
        acc.insert(MethodName::Sfb, accuracy(&run.probs, &test.labels));
    }
    let frozen_stats_accuracy = if cfg.adaptation.rounds > 1 {
        let frozen = run_adaptation(cfg, model, &test.x, steps, true, StatsPolicy::Frozen, seed)?;
        Some(accuracy(&frozen.probs, &test.labels))
    } else {
        None
    };
    if cfg.wants(MethodName::PlNaive) {
        let naive = run_adaptation(cfg, model, &test.x, steps, false, cfg.adaptation.stats_policy, seed)?;
        acc.insert(MethodName::PlNaive, accuracy(&naive.probs, &test.labels));
    }
    if cfg.wants(MethodName::GtAdapt) {
        acc.insert(MethodName::GtAdapt, gt_adapt_accuracy(cfg, model, test, &stable, seed)?);
    }
    for (name, baseline) in
        [(MethodName::Erm, &trained.erm), (MethodName::Irm, &trained.irm), (MethodName::Oracle, &trained.oracle)]
    {
        if let Some(b) = baseline {
            acc.insert(name, accuracy(&b.stable_proba(&test.x).stage(Stage::Evaluate)?, &test.labels));
        }
    }
    let checkpoint = run.adapted.as_ref().map(|a| AdaptedCheckpoint {
        version: CHECKPOINT_VERSION,
        mode: Mode::for_classes(a.num_classes()),
        stats: a.stats.clone(),
        prior: a.prior.clone(),
        bias_correction: a.bias_correction,
        stable_ref: StableRef {
            model: format!("../models/{}", model_file_name(trained.seed)),
            temperature: model.temperature,
        },
        unstable_features: cfg.adaptation.features,
        unstable_params: a.unstable.parameters(),
        rounds: a.rounds.clone(),
    });
    let adaptation = AdaptationDiagnostics {
        steps,
        rounds: run.adapted.as_ref().map(|a| a.rounds.clone()).unwrap_or_default(),
        fallback: run.adapted.is_none(),
        fallback_reason: run.fallback_reason,
        frozen_stats_accuracy,
    };
    Ok(Evaluation { accuracies: acc, adaptation, checkpoint })
}

/// Unstable learner fit on the true test labels, fused without correction
/// under the empirical label distribution.
fn gt_adapt_accuracy(
    cfg: &ExperimentConfig,
    model: &SfbModel,
    test: &EnvDataset,
    stable: &Matrix,
    seed: u64,
) -> Result<f64, HarnessError> {
    let k = stable.cols();
    let xu = unstable_features(model, cfg.adaptation.features, &test.x).stage(Stage::Adapt)?;
    let mut learner = make_learner(cfg, cfg.adaptation.max_steps, seed);
    let targets = one_hot(&test.labels, k);
    learner.fit(&xu, &targets).stage(Stage::Adapt)?;
    let mut prior = vec![0.0; k];
    for &y in &test.labels {
        prior[y] += 1.0 / test.len() as f64;
    }
    let prior: Vec<f64> = prior.into_iter().map(|p| p.clamp(1e-6, 1.0 - 1e-6)).collect();
    let total: f64 = prior.iter().sum();
    let prior: Vec<f64> = prior.into_iter().map(|p| p / total).collect();
    let unstable = learner.predict_proba(&xu).stage(Stage::Adapt)?;
    let joint = combine_rows(stable, &unstable, &prior).stage(Stage::Adapt)?;
    Ok(accuracy(&joint, &test.labels))
}

pub fn model_file_name(seed: u64) -> String {
    format!("seed_{seed}.json")
}

/// Everything recorded about one seed of `run`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedDiagnostics {
    pub experiment: String,
    pub dataset: GeneratorTag,
    pub seed: u64,
    /// How hyperparameters and adaptation steps were selected.
    pub selection_protocol: String,
    pub selected: GridPoint,
    pub grid: Vec<GridPoint>,
    pub temperature: f64,
    pub ece_before: f64,
    pub ece_after: f64,
    pub adaptation: AdaptationDiagnostics,
    pub bayes_accuracy: Option<f64>,
    pub accuracies: BTreeMap<String, f64>,
}

pub fn selection_protocol(tag: GeneratorTag) -> &'static str {
    match tag {
        GeneratorTag::Cmnist => "test-domain validation split (ColorMNIST convention)",
        _ => "validation domain",
    }
}

pub struct SeedOutcome {
    pub trained: TrainedSeed,
    pub evaluation: Evaluation,
    pub diagnostics: SeedDiagnostics,
}

/// Full pipeline for one seed.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome, HarnessError> {
    let splits = generate(cfg, seed)?;
    let trained = train_seed(cfg, seed, &splits)?;
    let evaluation = evaluate_seed(cfg, &trained, &splits.test)?;
    let bayes_accuracy = match cfg.dataset.generator {
        GeneratorTag::Cmnist => None,
        tag => Some(100.0 * bayes_oracle(tag, cfg.dataset.test).stage(Stage::Evaluate)?.bayes_accuracy),
    };
    let diagnostics = SeedDiagnostics {
        experiment: cfg.name.clone(),
        dataset: cfg.dataset.generator,
        seed,
        selection_protocol: selection_protocol(cfg.dataset.generator).to_string(),
        selected: trained.selected.clone(),
        grid: trained.grid.clone(),
        temperature: trained.calibration.temperature.value(),
        ece_before: trained.calibration.ece_before,
        ece_after: trained.calibration.ece_after,
        adaptation: evaluation.adaptation.clone(),
        bayes_accuracy,
        accuracies: evaluation.accuracies.iter().map(|(m, a)| (m.label().to_string(), *a)).collect(),
    };
    Ok(SeedOutcome { trained, evaluation, diagnostics })
}
