//! Runs a (variant × seed) grid and writes its results.
//!
//! Layout under the output directory:
//! - `runs/<variant>__seed<k>.json`: one record per trial (`gdistill.run.v1`)
//! - `runs/<variant>__seed<k>.gdck`: final model checkpoint of a successful trial
//! - `aggregate.csv`: mean and sample standard deviation per variant (`gdistill.aggregate.v1`)
//! - `plots/<variant>.csv`: ACC/FGT against classes seen, per seed (`gdistill.series.v1`)
//!
//! Nothing time-dependent is written, so a fixed config reproduces every byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{acc, fgt, AccuracyMatrix};
use crate::nnet::Model;
use crate::taskgen::Benchmark;
use crate::trainer::{run_sequence, MethodVariant, RunOutcome, StageLog, TrainSettings};

pub const RUN_SCHEMA: &str = "gdistill.run.v1";
pub const AGGREGATE_SCHEMA: &str = "gdistill.aggregate.v1";
pub const SERIES_SCHEMA: &str = "gdistill.series.v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema: String,
    pub variant: String,
    pub seed: u64,
    pub status: TrialStatus,
    pub error: Option<String>,
    pub task_sizes: Vec<usize>,
    pub acc: Option<f64>,
    pub fgt: Option<f64>,
    /// `accuracy[s][r]`: model after stage `s` on task `r`.
    pub accuracy: Vec<Vec<f64>>,
    pub stages: Vec<StageLog>,
}

impl RunRecord {
    pub fn matrix(&self) -> Result<AccuracyMatrix> {
        AccuracyMatrix::from_rows(self.task_sizes.clone(), self.accuracy.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub variant: String,
    /// Successful trials.
    pub seeds: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub fgt_mean: f64,
    pub fgt_std: f64,
    pub failed: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub records: Vec<RunRecord>,
    pub aggregate: Vec<AggregateRow>,
}

impl ExperimentSummary {
    pub fn row(&self, variant: &str) -> Option<&AggregateRow> {
        self.aggregate.iter().find(|r| r.variant == variant)
    }
}

/// Mean and sample standard deviation (0 for a single value, NaN for none).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs one trial; errors become a failed record. The final model is
/// returned for successful trials.
pub fn run_trial(cfg: &ExperimentConfig, variant: &MethodVariant, settings: &TrainSettings, seed: u64) -> (RunRecord, Option<Model>) {
    let task_sizes = vec![cfg.benchmark.task_size; cfg.benchmark.num_tasks()];
    let outcome = Benchmark::new(cfg.benchmark.clone(), seed).and_then(|bench| {
        let tasks = bench.make_task_sequence();
        let out = run_sequence(&bench, &tasks, variant, settings, seed)?;
        let metrics = if out.matrix.stages() >= 2 { Some((acc(&out.matrix)?, fgt(&out.matrix)?)) } else { None };
        Ok((out, metrics))
    });
    match outcome {
        Ok((RunOutcome { stages, final_model, .. }, metrics)) => (RunRecord {
            schema: RUN_SCHEMA.into(),
            variant: variant.name.clone(),
            seed,
            status: TrialStatus::Ok,
            error: None,
            task_sizes,
            acc: metrics.map(|m| m.0),
            fgt: metrics.map(|m| m.1),
            accuracy: stages.iter().map(|s| s.accuracies.clone()).collect(),
            stages,
        }, Some(final_model)),
        Err(e) => (RunRecord {
            schema: RUN_SCHEMA.into(),
            variant: variant.name.clone(),
            seed,
            status: TrialStatus::Failed,
            error: Some(e.to_string()),
            task_sizes,
            acc: None,
            fgt: None,
            accuracy: Vec::new(),
            stages: Vec::new(),
        }, None),
    }
}

pub fn aggregate(variants: &[MethodVariant], records: &[RunRecord]) -> Vec<AggregateRow> {
    variants
        .iter()
        .map(|v| {
            let mine: Vec<&RunRecord> = records.iter().filter(|r| r.variant == v.name).collect();
            let ok: Vec<&RunRecord> = mine.iter().copied().filter(|r| r.status == TrialStatus::Ok && r.acc.is_some()).collect();
            let (acc_mean, acc_std) = mean_std(&ok.iter().filter_map(|r| r.acc).collect::<Vec<_>>());
            let (fgt_mean, fgt_std) = mean_std(&ok.iter().filter_map(|r| r.fgt).collect::<Vec<_>>());
            AggregateRow {
                variant: v.name.clone(),
                seeds: ok.len(),
                acc_mean,
                acc_std,
                fgt_mean,
                fgt_std,
                failed: mine.len() - ok.len(),
            }
        })
        .collect()
}

pub fn write_aggregate(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["schema", "variant", "seeds", "ACC_mean", "ACC_std", "FGT_mean", "FGT_std", "failed"])?;
    for r in rows {
        w.write_record([
            AGGREGATE_SCHEMA.to_string(),
            r.variant.clone(),
            r.seeds.to_string(),
            format!("{:.6}", r.acc_mean),
            format!("{:.6}", r.acc_std),
            format!("{:.6}", r.fgt_mean),
            format!("{:.6}", r.fgt_std),
            r.failed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn record_path(dir: &Path, variant: &str, seed: u64, ext: &str) -> PathBuf {
    dir.join("runs").join(format!("{variant}__seed{seed}.{ext}"))
}

/// Runs every (variant, seed) trial in order and writes the results under `out_dir`.
/// A failing trial is recorded and the grid continues; I/O failures abort.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let variants = cfg.resolved_variants()?;
    let settings = cfg.train_settings();
    fs::create_dir_all(out_dir.join("runs"))?;
    let mut records = Vec::with_capacity(variants.len() * cfg.seeds.len());
    for v in &variants {
        for &seed in &cfg.seeds {
            let (record, model) = run_trial(cfg, v, &settings, seed);
            fs::write(record_path(out_dir, &v.name, seed, "json"), serde_json::to_string_pretty(&record)?)?;
            if let Some(model) = model {
                let mut bytes = Vec::new();
                model.write_checkpoint(&mut bytes)?;
                fs::write(record_path(out_dir, &v.name, seed, "gdck"), bytes)?;
            }
            records.push(record);
        }
    }
    let aggregate = aggregate(&variants, &records);
    write_aggregate(&out_dir.join("aggregate.csv"), &aggregate)?;
    emit_plots(out_dir)?;
    Ok(ExperimentSummary { records, aggregate })
}

pub fn read_records(results: &Path) -> Result<Vec<RunRecord>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(results.join("runs"))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let record: RunRecord = serde_json::from_slice(&fs::read(&p)?)?;
        if record.schema != RUN_SCHEMA {
            return Err(Error::invalid(format!("{}: unsupported schema `{}`", p.display(), record.schema)));
        }
        out.push(record);
    }
    Ok(out)
}

/// One point of a curve: metrics of the matrix truncated after a stage.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesPoint {
    pub seed: u64,
    pub stage: usize,
    pub classes_seen: usize,
    pub acc: f64,
    pub fgt: f64,
}

/// ACC and FGT after every stage from the second on.
pub fn series(record: &RunRecord) -> Result<Vec<SeriesPoint>> {
    let m = record.matrix()?;
    (2..=m.stages())
        .map(|s| {
            let t = m.truncated(s);
            Ok(SeriesPoint {
                seed: record.seed,
                stage: s,
                classes_seen: record.task_sizes[..s].iter().sum(),
                acc: acc(&t)?,
                fgt: fgt(&t)?,
            })
        })
        .collect()
}

/// Writes `plots/<variant>.csv` for every variant found under `results`.
/// Failed trials contribute no points.
pub fn emit_plots(results: &Path) -> Result<Vec<PathBuf>> {
    let records = read_records(results)?;
    let dir = results.join("plots");
    fs::create_dir_all(&dir)?;
    let mut names: Vec<&str> = records.iter().map(|r| r.variant.as_str()).collect();
    names.dedup();
    names.sort_unstable();
    names.dedup();
    let mut written = Vec::new();
    for name in names {
        let path = dir.join(format!("{name}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["schema", "variant", "seed", "stage", "classes_seen", "ACC", "FGT"])?;
        for r in records.iter().filter(|r| r.variant == name && r.status == TrialStatus::Ok) {
            for p in series(r)? {
                w.write_record([
                    SERIES_SCHEMA.to_string(),
                    name.to_string(),
                    p.seed.to_string(),
                    p.stage.to_string(),
                    p.classes_seen.to_string(),
                    p.acc.to_string(),
                    p.fgt.to_string(),
                ])?;
            }
        }
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}
