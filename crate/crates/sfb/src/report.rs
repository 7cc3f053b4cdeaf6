//! Result files and the mean ± standard error tables built from them.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::config::MethodName;
use crate::error::{HarnessError, Stage};

/// One line of `results.csv`: a method's test accuracy (percent) for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset: String,
    pub seed: u64,
    pub method: String,
    pub accuracy: f64,
}

/// Aggregate over seeds for one method and dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub dataset: String,
    pub mean: f64,
    /// `None` when fewer than two seeds are available.
    pub std_error: Option<f64>,
    pub seeds: usize,
}

pub fn write_records<W: Write>(records: &[RunRecord], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r).map_err(|e| HarnessError::format(Stage::Report, e))?;
    }
    w.flush().map_err(HarnessError::io(Stage::Report, "results.csv"))
}

pub fn read_records<R: Read>(input: R) -> Result<Vec<RunRecord>, HarnessError> {
    csv::Reader::from_reader(input)
        .deserialize()
        .collect::<Result<Vec<RunRecord>, _>>()
        .map_err(|e| HarnessError::format(Stage::Report, e))
}

/// Sample mean and standard error of the mean.
pub fn mean_and_se(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

fn method_rank(method: &str) -> usize {
    MethodName::from_label(method).map_or(usize::MAX, |m| m as usize)
}

/// Groups records by (method, dataset). Methods follow the canonical order,
/// datasets their first appearance.
pub fn summarize(records: &[RunRecord]) -> Vec<ResultRow> {
    let datasets = first_seen(records.iter().map(|r| r.dataset.as_str()));
    let mut methods = first_seen(records.iter().map(|r| r.method.as_str()));
    methods.sort_by_key(|m| method_rank(m));
    let mut rows = Vec::new();
    for m in &methods {
        for d in &datasets {
            let values: Vec<f64> =
                records.iter().filter(|r| &r.method == m && &r.dataset == d).map(|r| r.accuracy).collect();
            if values.is_empty() {
                continue;
            }
            let (mean, std_error) = mean_and_se(&values);
            rows.push(ResultRow { method: m.clone(), dataset: d.clone(), mean, std_error, seeds: values.len() });
        }
    }
    rows
}

fn first_seen<'a>(items: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for s in items {
        if !out.iter().any(|o| o == s) {
            out.push(s.to_string());
        }
    }
    out
}

pub fn format_cell(mean: f64, std_error: Option<f64>) -> String {
    match std_error {
        Some(se) => format!("{mean:.1} ± {se:.1}"),
        None => format!("{mean:.1} ± n/a"),
    }
}

/// Plain-text table with methods as rows and datasets as columns. The best
/// mean of each column (as displayed) is wrapped in `**`.
pub fn render_text(rows: &[ResultRow]) -> String {
    let datasets = first_seen(rows.iter().map(|r| r.dataset.as_str()));
    let methods = first_seen(rows.iter().map(|r| r.method.as_str()));
    let best: Vec<Option<String>> = datasets
        .iter()
        .map(|d| {
            rows.iter()
                .filter(|r| &r.dataset == d)
                .map(|r| r.mean)
                .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
                .map(|v| format!("{v:.1}"))
        })
        .collect();
    let mut table: Vec<Vec<String>> =
        vec![std::iter::once("Algorithm".to_string()).chain(datasets.iter().cloned()).collect()];
    for m in &methods {
        let mut line = vec![m.clone()];
        for (d, best) in datasets.iter().zip(&best) {
            let cell = match rows.iter().find(|r| &r.method == m && &r.dataset == d) {
                Some(r) if best.as_deref() == Some(format!("{:.1}", r.mean).as_str()) => {
                    format!("**{}**", format_cell(r.mean, r.std_error))
                }
                Some(r) => format_cell(r.mean, r.std_error),
                None => "-".to_string(),
            };
            line.push(cell);
        }
        table.push(line);
    }
    let cols = datasets.len() + 1;
    let widths: Vec<usize> =
        (0..cols).map(|j| table.iter().map(|line| line[j].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, line) in table.iter().enumerate() {
        let cells: Vec<String> =
            line.iter().zip(&widths).map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count()))).collect();
        out.push_str(cells.join(" | ").trim_end());
        out.push('\n');
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            out.push_str(&rule.join("-|-"));
            out.push('\n');
        }
    }
    out
}

/// Summary rows as CSV (`method,dataset,mean,std_error,seeds`, empty
/// `std_error` for a single seed).
pub fn render_csv(rows: &[ResultRow]) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| HarnessError::format(Stage::Report, e))?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::format(Stage::Report, e))?;
    String::from_utf8(bytes).map_err(|e| HarnessError::format(Stage::Report, e))
}
