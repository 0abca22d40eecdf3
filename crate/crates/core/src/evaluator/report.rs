//! CSV exports and the `run.json` summary they are rebuilt from.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AccuracyMatrix, FreezeHeatmap, MetricReport};
use crate::error::{Error, Result};
use crate::tasks::SuiteConfig;
use crate::trainer::{RunResult, TrainConfig};

pub const SUMMARY_FILE: &str = "run.json";

/// Everything the report files are derived from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub suite: SuiteConfig,
    pub config: TrainConfig,
    pub task_names: Vec<String>,
    pub accuracy: Vec<Vec<f64>>,
    pub oracle_accuracy: Vec<Vec<f64>>,
    pub heatmap: Vec<Vec<usize>>,
    pub log: Vec<String>,
}

impl RunSummary {
    pub fn from_run(run: &RunResult) -> Self {
        Self {
            suite: run.suite.clone(),
            config: run.config.clone(),
            task_names: run.accuracy.names().to_vec(),
            accuracy: run.accuracy.rows().to_vec(),
            oracle_accuracy: run.oracle_accuracy.rows().to_vec(),
            heatmap: run.heatmap.rows().to_vec(),
            log: run.log.clone(),
        }
    }

    pub fn accuracy_matrix(&self) -> Result<AccuracyMatrix> {
        AccuracyMatrix::from_rows(self.task_names.clone(), self.accuracy.clone())
    }

    pub fn oracle_matrix(&self) -> Result<AccuracyMatrix> {
        AccuracyMatrix::from_rows(self.task_names.clone(), self.oracle_accuracy.clone())
    }

    pub fn freeze_heatmap(&self) -> Result<FreezeHeatmap> {
        let mut h = FreezeHeatmap::new(self.config.depth);
        for r in &self.heatmap {
            h.push_row(r.clone())?;
        }
        Ok(h)
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file))
}

fn write_csv(path: &Path, header: Vec<String>, rows: Vec<Vec<String>>) -> Result<()> {
    let csv_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    };
    let mut w = csv_writer(path)?;
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_matrix(path: &Path, m: &AccuracyMatrix) -> Result<()> {
    let mut header = vec!["checkpoint".to_string()];
    header.extend(m.names().iter().cloned());
    let rows = m
        .rows()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut out = vec![m.names()[i].clone()];
            out.extend(r.iter().map(|v| v.to_string()));
            out
        })
        .collect();
    write_csv(path, header, rows)
}

fn write_metrics(path: &Path, m: &AccuracyMatrix) -> Result<()> {
    let report = MetricReport::compute(m);
    let mut header = vec!["metric".to_string()];
    header.extend(m.names().iter().cloned());
    header.push("mean".into());
    let cell = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
    let rows = report
        .blocks()
        .iter()
        .map(|(name, block)| {
            let mut out = vec![name.to_string()];
            out.extend(block.per_task.iter().map(|v| cell(*v)));
            out.push(cell(block.mean));
            out
        })
        .collect();
    write_csv(path, header, rows)
}

/// Writes the summary and every CSV derived from it into `dir`.
pub fn write_report(summary: &RunSummary, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let acc = summary.accuracy_matrix()?;
    let oracle = summary.oracle_matrix()?;
    let heat = summary.freeze_heatmap()?;

    write_matrix(&dir.join("accuracy_matrix.csv"), &acc)?;
    write_matrix(&dir.join("accuracy_matrix_oracle.csv"), &oracle)?;
    write_metrics(&dir.join("metrics.csv"), &acc)?;
    write_metrics(&dir.join("metrics_oracle.csv"), &oracle)?;

    let mut header = vec!["checkpoint".to_string()];
    header.extend((0..heat.blocks()).map(|b| format!("block_{b}")));
    let rows = heat
        .rows()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut out = vec![summary.task_names[i].clone()];
            out.extend(r.iter().map(ToString::to_string));
            out
        })
        .collect();
    write_csv(&dir.join("freeze_heatmap.csv"), header, rows)?;

    let log_path = dir.join("run.log");
    let mut text = summary.log.join("\n");
    text.push('\n');
    fs::write(&log_path, text).map_err(|e| Error::io(&log_path, e))
}

/// Writes `run.json` and the report files for `run`.
pub fn export_report(run: &RunResult, dir: &Path) -> Result<()> {
    let summary = RunSummary::from_run(run);
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Numeric(format!("run summary: {e}")))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    write_report(&summary, dir)
}

pub fn load_summary(dir: &Path) -> Result<RunSummary> {
    let path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}
