//! Subcommand bodies behind the `sfb` binary.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sfb_core::adaptation::AdaptedClassifier;
use sfb_core::calibration::CalibrationReport;
use sfb_core::envs::{bayes_oracle, EnvDataset, GeneratorTag};
use sfb_core::training::StepMetrics;

use crate::checkpoint::{load_json, save_json, AdaptedCheckpoint, ModelCheckpoint};
use crate::config::{ExperimentConfig, MethodName};
use crate::error::{HarnessError, Stage, StageExt};
use crate::harness::{
    self, accuracy, evaluate_seed, generate, model_file_name, run_seed, sweep_test_env, train_seed, unstable_features,
    GridPoint, ModelStable, TrainedSeed,
};
use crate::io::{write_dataset_csv, write_tensor};
use crate::report::{mean_and_se, read_records, render_csv, render_text, summarize, write_records, RunRecord};

/// Loads a config and applies the command-line overrides.
pub fn load_config(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    Ok(cfg)
}

pub fn dataset_label(tag: GeneratorTag) -> &'static str {
    match tag {
        GeneratorTag::Ac => "AC",
        GeneratorTag::Cedd => "CE-DD",
        GeneratorTag::Cmnist => "CMNIST",
    }
}

fn create(path: &Path, stage: Stage) -> Result<File, HarnessError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(HarnessError::io(stage, parent))?;
    }
    File::create(path).map_err(HarnessError::io(stage, path))
}

fn write_text(path: &Path, text: &str, stage: Stage) -> Result<(), HarnessError> {
    create(path, stage)?.write_all(text.as_bytes()).map_err(HarnessError::io(stage, path))
}

fn seed_dir(cfg: &ExperimentConfig, kind: &str) -> PathBuf {
    cfg.out_dir.join(kind)
}

fn write_env(ds: &EnvDataset, dir: &Path, name: &str) -> Result<PathBuf, HarnessError> {
    let path = if ds.generator == GeneratorTag::Cmnist {
        let p = dir.join(format!("{name}.sfbt"));
        write_tensor(ds, create(&p, Stage::Generate)?)?;
        p
    } else {
        let p = dir.join(format!("{name}.csv"));
        write_dataset_csv(ds, create(&p, Stage::Generate)?)?;
        p
    };
    Ok(path)
}

/// Writes every split of every seed under `<out>/data/seed_<s>/`.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, HarnessError> {
    let mut written = Vec::new();
    for &seed in &cfg.seeds {
        let splits = generate(cfg, seed)?;
        let dir = seed_dir(cfg, "data").join(format!("seed_{seed}"));
        for (e, env) in splits.train.iter().enumerate() {
            written.push(write_env(env, &dir, &format!("train_e{e}"))?);
        }
        written.push(write_env(&splits.validation, &dir, "validation")?);
        written.push(write_env(&splits.test, &dir, "test")?);
    }
    Ok(written)
}

/// Writes the per-step training log as CSV.
pub fn write_metrics<W: Write>(metrics: &[StepMetrics], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| HarnessError::format(Stage::Train, e);
    let Some(first) = metrics.first() else {
        return Ok(());
    };
    let mut header = vec!["step".to_string()];
    for r in &first.env_risks {
        header.push(format!("risk_e{}", r.env_id));
    }
    for r in &first.env_risks {
        header.push(format!("joint_risk_e{}", r.env_id));
    }
    header.extend(["stability_penalty", "cond_indep_penalty", "objective"].map(String::from));
    w.write_record(&header).map_err(err)?;
    for m in metrics {
        let mut rec = vec![m.step.to_string()];
        rec.extend(m.env_risks.iter().map(|r| r.risk.to_string()));
        rec.extend(m.env_risks.iter().map(|r| r.joint_risk.to_string()));
        rec.push(m.stability_penalty.to_string());
        rec.push(m.cond_indep_penalty.to_string());
        rec.push(m.objective.to_string());
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(HarnessError::io(Stage::Train, "metrics.csv"))
}

/// Hyperparameter selection saved next to a model checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Selection {
    pub seed: u64,
    pub selected: GridPoint,
    pub grid: Vec<GridPoint>,
    pub adaptation_steps: usize,
    pub calibration: CalibrationReport,
}

fn selection_path(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    seed_dir(cfg, "models").join(format!("seed_{seed}.selection.json"))
}

fn save_trained(cfg: &ExperimentConfig, trained: &TrainedSeed) -> Result<(), HarnessError> {
    let seed = trained.seed;
    let models = seed_dir(cfg, "models");
    save_json(&ModelCheckpoint::from_model(&trained.model), &models.join(model_file_name(seed)), Stage::Train)?;
    for (name, m) in [("erm", &trained.erm), ("irm", &trained.irm), ("oracle", &trained.oracle)] {
        if let Some(m) = m {
            save_json(&ModelCheckpoint::from_model(m), &models.join(format!("seed_{seed}.{name}.json")), Stage::Train)?;
        }
    }
    let selection = Selection {
        seed,
        selected: trained.selected.clone(),
        grid: trained.grid.clone(),
        adaptation_steps: trained.adaptation_steps,
        calibration: trained.calibration.clone(),
    };
    save_json(&selection, &selection_path(cfg, seed), Stage::Train)?;
    let metrics = seed_dir(cfg, "metrics").join(format!("seed_{seed}.csv"));
    write_metrics(&trained.metrics, create(&metrics, Stage::Train)?)
}

/// Trains (with penalty-grid selection and calibration) and saves models.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Vec<Selection>, HarnessError> {
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let splits = generate(cfg, seed)?;
        let trained = train_seed(cfg, seed, &splits)?;
        save_trained(cfg, &trained)?;
        out.push(load_json(&selection_path(cfg, seed), Stage::Train)?);
    }
    Ok(out)
}

fn load_model(cfg: &ExperimentConfig, seed: u64, stage: Stage) -> Result<sfb_core::training::SfbModel, HarnessError> {
    let path = seed_dir(cfg, "models").join(model_file_name(seed));
    load_json::<ModelCheckpoint>(&path, stage)?.to_model()
}

/// Adapts saved models to the unlabeled test split and saves the adapted
/// checkpoints.
pub fn cmd_adapt(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, HarnessError> {
    let mut written = Vec::new();
    for &seed in &cfg.seeds {
        let model = load_model(cfg, seed, Stage::Adapt)?;
        let selection: Selection = load_json(&selection_path(cfg, seed), Stage::Adapt)?;
        let splits = generate(cfg, seed)?;
        let run = harness::run_adaptation(
            cfg,
            &model,
            &splits.test.x,
            selection.adaptation_steps,
            true,
            cfg.adaptation.stats_policy,
            harness::derive_seed(seed, 400),
        )?;
        let Some(a) = run.adapted else {
            return Err(HarnessError::format(
                Stage::Adapt,
                format!("seed {seed}: {}", run.fallback_reason.unwrap_or_default()),
            ));
        };
        let ck = AdaptedCheckpoint {
            version: crate::checkpoint::CHECKPOINT_VERSION,
            mode: crate::checkpoint::Mode::for_classes(a.num_classes()),
            stats: a.stats.clone(),
            prior: a.prior.clone(),
            bias_correction: a.bias_correction,
            stable_ref: crate::checkpoint::StableRef {
                model: format!("../models/{}", model_file_name(seed)),
                temperature: model.temperature,
            },
            unstable_features: cfg.adaptation.features,
            unstable_params: a.unstable.parameters(),
            rounds: a.rounds.clone(),
        };
        let path = seed_dir(cfg, "adapted").join(format!("seed_{seed}.json"));
        save_json(&ck, &path, Stage::Adapt)?;
        save_json(
            &selection.calibration,
            &seed_dir(cfg, "calibration").join(format!("seed_{seed}.json")),
            Stage::Adapt,
        )?;
        written.push(path);
    }
    Ok(written)
}

/// Test accuracies of a saved adapted checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedEvaluation {
    pub seed: u64,
    pub stable_accuracy: f64,
    pub adapted_accuracy: f64,
}

pub fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<Vec<SavedEvaluation>, HarnessError> {
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let path = seed_dir(cfg, "adapted").join(format!("seed_{seed}.json"));
        let ck: AdaptedCheckpoint = load_json(&path, Stage::Evaluate)?;
        if ck.version != crate::checkpoint::CHECKPOINT_VERSION {
            return Err(HarnessError::format(
                Stage::Evaluate,
                format!("unsupported checkpoint version {}", ck.version),
            ));
        }
        let model_path = path.parent().unwrap_or(Path::new(".")).join(&ck.stable_ref.model);
        let mut model = load_json::<ModelCheckpoint>(&model_path, Stage::Evaluate)?.to_model()?;
        model.temperature = ck.stable_ref.temperature;
        let splits = generate(cfg, seed)?;
        let test = &splits.test;
        let adapted = AdaptedClassifier {
            stable: ModelStable(&model),
            unstable: ck.unstable_params.clone().into_learner(),
            prior: ck.prior.clone(),
            stats: ck.stats.clone(),
            bias_correction: ck.bias_correction,
            rounds: ck.rounds.clone(),
        };
        let xu = unstable_features(&model, ck.unstable_features, &test.x).stage(Stage::Evaluate)?;
        let joint = adapted.predict_proba(&test.x, &xu).stage(Stage::Evaluate)?;
        let stable = model.stable_proba(&test.x).stage(Stage::Evaluate)?;
        let ev = SavedEvaluation {
            seed,
            stable_accuracy: accuracy(&stable, &test.labels),
            adapted_accuracy: accuracy(&joint, &test.labels),
        };
        save_json(&ev, &seed_dir(cfg, "evaluation").join(format!("seed_{seed}.json")), Stage::Evaluate)?;
        out.push(ev);
    }
    Ok(out)
}

/// Full pipeline over all seeds. Writes `results.csv`, per-seed
/// diagnostics, calibration reports, models, training logs, `summary.csv`
/// and `report.txt`; returns the rendered table.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<String, HarnessError> {
    let label = dataset_label(cfg.dataset.generator);
    let mut records = Vec::new();
    for &seed in &cfg.seeds {
        let outcome = run_seed(cfg, seed)?;
        for (method, acc) in &outcome.evaluation.accuracies {
            records.push(RunRecord {
                dataset: label.to_string(),
                seed,
                method: method.label().to_string(),
                accuracy: *acc,
            });
        }
        save_json(
            &outcome.diagnostics,
            &seed_dir(cfg, "diagnostics").join(format!("seed_{seed}.json")),
            Stage::Evaluate,
        )?;
        save_json(
            &outcome.trained.calibration,
            &seed_dir(cfg, "calibration").join(format!("seed_{seed}.json")),
            Stage::Evaluate,
        )?;
        if let Some(ck) = &outcome.evaluation.checkpoint {
            save_json(ck, &seed_dir(cfg, "adapted").join(format!("seed_{seed}.json")), Stage::Evaluate)?;
        }
        save_trained(cfg, &outcome.trained)?;
    }
    let results = cfg.out_dir.join("results.csv");
    write_records(&records, create(&results, Stage::Report)?)?;
    cmd_report(cfg)
}

/// Renders `report.txt` and `summary.csv` from `results.csv`.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<String, HarnessError> {
    let results = cfg.out_dir.join("results.csv");
    let records = read_records(File::open(&results).map_err(HarnessError::io(Stage::Report, &results))?)?;
    if records.is_empty() {
        return Err(HarnessError::format(Stage::Report, format!("{} has no rows", results.display())));
    }
    let rows = summarize(&records);
    let text = render_text(&rows);
    write_text(&cfg.out_dir.join("report.txt"), &text, Stage::Report)?;
    write_text(&cfg.out_dir.join("summary.csv"), &render_csv(&rows)?, Stage::Report)?;
    Ok(text)
}

/// Mean accuracy per method over the sweep axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepMatrix {
    pub values: Vec<f64>,
    /// Method label -> per-value (mean, standard error).
    pub rows: BTreeMap<String, Vec<(f64, Option<f64>)>>,
}

pub const BAYES_ROW: &str = "Bayes";

/// Trains once per seed, then evaluates on a test domain at every sweep
/// value. Writes `sweep.csv` (and `sweep_plot.txt` when requested).
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<SweepMatrix, HarnessError> {
    if cfg.sweep.values.is_empty() {
        return Err(HarnessError::Config { field: "sweep.values".into(), message: "no sweep values".into() });
    }
    let mut sweep_cfg = cfg.clone();
    // The oracle is trained for one test domain only.
    sweep_cfg.methods.retain(|m| *m != MethodName::Oracle);
    let mut acc: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    let nv = cfg.sweep.values.len();
    for &seed in &cfg.seeds {
        let splits = generate(&sweep_cfg, seed)?;
        let trained = train_seed(&sweep_cfg, seed, &splits)?;
        for (j, &value) in cfg.sweep.values.iter().enumerate() {
            let test = sweep_test_env(&sweep_cfg, seed, value)?;
            let ev = evaluate_seed(&sweep_cfg, &trained, &test)?;
            for (m, a) in ev.accuracies {
                acc.entry(m.label().to_string()).or_insert_with(|| vec![Vec::new(); nv])[j].push(a);
            }
        }
    }
    if cfg.dataset.generator != GeneratorTag::Cmnist {
        let mut row = vec![Vec::new(); nv];
        for (j, &beta) in cfg.sweep.values.iter().enumerate() {
            row[j].push(100.0 * bayes_oracle(cfg.dataset.generator, beta).stage(Stage::Sweep)?.bayes_accuracy);
        }
        acc.insert(BAYES_ROW.to_string(), row);
    }
    let rows = acc
        .into_iter()
        .map(|(m, cols)| {
            (m, cols.iter().map(|v| if v.is_empty() { (f64::NAN, None) } else { mean_and_se(v) }).collect())
        })
        .collect();
    let matrix = SweepMatrix { values: cfg.sweep.values.clone(), rows };
    write_text(&cfg.out_dir.join("sweep.csv"), &render_sweep_csv(&matrix)?, Stage::Sweep)?;
    if cfg.sweep.plot {
        write_text(&cfg.out_dir.join("sweep_plot.txt"), &render_sweep_plot(&matrix), Stage::Sweep)?;
    }
    Ok(matrix)
}

/// Wide CSV: one row per method, one mean column and one standard-error
/// column per sweep value.
pub fn render_sweep_csv(m: &SweepMatrix) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| HarnessError::format(Stage::Sweep, e);
    let mut header = vec!["method".to_string()];
    for v in &m.values {
        header.push(format!("{v}"));
        header.push(format!("{v}_se"));
    }
    w.write_record(&header).map_err(err)?;
    for (method, cells) in &m.rows {
        let mut rec = vec![method.clone()];
        for (mean, se) in cells {
            rec.push(format!("{mean:.2}"));
            rec.push(se.map(|s| format!("{s:.2}")).unwrap_or_default());
        }
        w.write_record(&rec).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::format(Stage::Sweep, e))?;
    String::from_utf8(bytes).map_err(|e| HarnessError::format(Stage::Sweep, e))
}

/// Text chart: accuracy (0-100) on the vertical axis, sweep values along
/// the horizontal axis, one letter per method.
pub fn render_sweep_plot(m: &SweepMatrix) -> String {
    const HEIGHT: usize = 20;
    const CELL: usize = 6;
    let methods: Vec<&String> = m.rows.keys().collect();
    let mut grid = vec![vec![' '; m.values.len() * CELL]; HEIGHT + 1];
    for (k, method) in methods.iter().enumerate() {
        let mark = (b'a' + (k % 26) as u8) as char;
        for (j, (mean, _)) in m.rows[*method].iter().enumerate() {
            if mean.is_finite() {
                let r = HEIGHT - ((mean.clamp(0.0, 100.0) / 100.0) * HEIGHT as f64).round() as usize;
                let c = j * CELL + CELL / 2;
                grid[r][c] = if grid[r][c] == ' ' { mark } else { '*' };
            }
        }
    }
    let mut out = String::new();
    for (r, line) in grid.iter().enumerate() {
        let y = 100 - r * 100 / HEIGHT;
        let body: String = line.iter().collect();
        out.push_str(&format!("{y:>3} |{}\n", body.trim_end()));
    }
    out.push_str(&format!("    +{}\n     ", "-".repeat(m.values.len() * CELL)));
    for v in &m.values {
        out.push_str(&format!("{:^width$}", format!("{v}"), width = CELL));
    }
    out.push_str("\n\n");
    for (k, method) in methods.iter().enumerate() {
        out.push_str(&format!("{} = {}\n", (b'a' + (k % 26) as u8) as char, method));
    }
    out.push_str("* = overlap\n");
    out
}
