//! Accuracy matrix and the incremental metrics derived from it.
//!
//! `A[r][s]` is the accuracy of the model after stage `s` on the test set of
//! task `r` (`r <= s`), predicting over every class seen so far. ACC averages
//! the class-share-weighted accuracy of stages 2..t; FGT averages the
//! class-share-weighted drop from each task's accuracy at the stage it was
//! learned. The first stage is excluded from both.

use std::io::Write;

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::nnet::{argmax, Model};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AccuracyMatrix {
    /// `a[s][r]` for `r <= s` (0-based stage and task).
    a: Vec<Vec<f64>>,
    pub task_sizes: Vec<usize>,
}

impl AccuracyMatrix {
    pub fn new(task_sizes: Vec<usize>) -> Self {
        Self { a: Vec::new(), task_sizes }
    }

    /// Appends the accuracies of the model after the next stage, one per task so far.
    pub fn push_stage(&mut self, accuracies: Vec<f64>) -> Result<()> {
        let s = self.a.len();
        if accuracies.len() != s + 1 || s >= self.task_sizes.len() {
            return Err(Error::invalid(format!("stage {} needs {} accuracies, got {}", s, s + 1, accuracies.len())));
        }
        if accuracies.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("accuracy outside [0, 1]"));
        }
        self.a.push(accuracies);
        Ok(())
    }

    /// Builds a full lower-triangular matrix from rows `rows[s] = [A_{0,s}..A_{s,s}]`.
    pub fn from_rows(task_sizes: Vec<usize>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new(task_sizes);
        for r in rows {
            m.push_stage(r)?;
        }
        Ok(m)
    }

    pub fn stages(&self) -> usize {
        self.a.len()
    }

    /// Accuracy of the stage-`s` model on task `r` (0-based, `r <= s`).
    pub fn get(&self, r: usize, s: usize) -> f64 {
        self.a[s][r]
    }

    /// The matrix restricted to the first `stages` stages.
    pub fn truncated(&self, stages: usize) -> Self {
        Self { a: self.a[..stages].to_vec(), task_sizes: self.task_sizes.clone() }
    }

    /// CSV with header `r,s,accuracy` (1-based indices, as in the usual notation).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["r", "s", "accuracy"])?;
        for (s, row) in self.a.iter().enumerate() {
            for (r, v) in row.iter().enumerate() {
                out.write_record([(r + 1).to_string(), (s + 1).to_string(), v.to_string()])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R, task_sizes: Vec<usize>) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<usize> {
                rec[i].parse().map_err(|_| Error::invalid(format!("bad index `{}`", &rec[i])))
            };
            let (r, s) = (parse(0)?, parse(1)?);
            let v = crate::data::parse_f64(&rec[2])?;
            if r == 0 || s == 0 || r > s {
                return Err(Error::invalid(format!("entry ({r},{s}) is outside the lower triangle")));
            }
            if rows.len() < s {
                rows.resize(s, Vec::new());
            }
            if rows[s - 1].len() != r - 1 {
                return Err(Error::invalid(format!("entry ({r},{s}) out of order")));
            }
            rows[s - 1].push(v);
        }
        Self::from_rows(task_sizes, rows)
    }
}

fn check_stages(m: &AccuracyMatrix) -> Result<usize> {
    let t = m.stages();
    if t < 2 {
        return Err(Error::TooFewStages(t));
    }
    Ok(t)
}

/// Average incremental accuracy over stages 2..t.
pub fn acc(m: &AccuracyMatrix) -> Result<f64> {
    let t = check_stages(m)?;
    let mut total = 0.0;
    for s in 1..t {
        let seen: usize = m.task_sizes[..=s].iter().sum();
        total += (0..=s).map(|r| m.task_sizes[r] as f64 / seen as f64 * m.get(r, s)).sum::<f64>();
    }
    Ok(total / (t - 1) as f64)
}

/// Average forgetting over stages 2..t.
pub fn fgt(m: &AccuracyMatrix) -> Result<f64> {
    let t = check_stages(m)?;
    let mut total = 0.0;
    for s in 1..t {
        let seen: usize = m.task_sizes[..=s].iter().sum();
        total += (0..s)
            .map(|r| m.task_sizes[r] as f64 / seen as f64 * (m.get(r, r) - m.get(r, s)))
            .sum::<f64>();
    }
    Ok(total / (t - 1) as f64)
}

/// Fraction of `test` whose argmax over all heads equals the label. Test
/// sets must hold the same number of examples for every class.
pub fn task_accuracy(model: &Model, test: &LabeledSet) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let counts = test.class_counts();
    let first = *counts.values().next().unwrap();
    if counts.values().any(|&c| c != first) {
        return Err(Error::invalid("test set is not class-balanced"));
    }
    let logits = model.logits(&test.inputs, model.all_heads())?;
    let correct = logits.iter_rows().zip(&test.labels).filter(|(z, &y)| argmax(z) == y).count();
    Ok(correct as f64 / test.len() as f64)
}
