//! Ensemble teacher over all seen classes, built from the previous model's
//! prediction over old classes and the current-task teacher's prediction
//! over new classes.
//!
//! The previous model's top class keeps its probability `p_max`. The other
//! old classes are rescaled so the old classes together hold `1 - eps`, and
//! the current-task distribution is scaled to total `eps`, where `eps` makes
//! the expected probability of every non-top class equal.

use crate::error::{Error, Result};
use crate::nnet::{argmax, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOutput {
    /// Previous classes first, then current-task classes.
    pub probs: Vec<f64>,
    pub epsilon: f64,
    pub y_max: usize,
    pub p_max: f64,
}

/// `eps = (1 - p_max) |T_t| / (|T_1:t| - 1)`.
pub fn epsilon(p_max: f64, cur_size: usize, total_size: usize) -> Result<f64> {
    if total_size < 2 {
        return Err(Error::invalid("ensemble needs at least two classes"));
    }
    if !(p_max > 0.0 && p_max <= 1.0) {
        return Err(Error::invalid(format!("p_max {p_max} outside (0, 1]")));
    }
    if cur_size == 0 || cur_size >= total_size {
        return Err(Error::invalid("current task must be a nonempty strict subset of the seen classes"));
    }
    Ok((1.0 - p_max) * cur_size as f64 / (total_size - 1) as f64)
}

/// Combines one example's previous-model and current-teacher distributions.
/// When `p_max = 1` the other old classes receive 0 (the limit of the scale).
pub fn q_predict(p_prev: &[f64], p_cur: &[f64]) -> Result<EnsembleOutput> {
    if p_prev.is_empty() || p_cur.is_empty() {
        return Err(Error::invalid("both distributions must be nonempty"));
    }
    let y_max = argmax(p_prev);
    let p_max = p_prev[y_max];
    let total = p_prev.len() + p_cur.len();
    let eps = epsilon(p_max, p_cur.len(), total)?;
    let rest = 1.0 - p_max;
    let scale = if rest > 0.0 { (rest - eps) / rest } else { 0.0 };
    let mut probs = Vec::with_capacity(total);
    for (y, &p) in p_prev.iter().enumerate() {
        probs.push(if y == y_max { p_max } else { scale * p });
    }
    probs.extend(p_cur.iter().map(|p| eps * p));
    Ok(EnsembleOutput { probs, epsilon: eps, y_max, p_max })
}

/// Row-wise [`q_predict`]: one ensemble distribution per row.
pub fn q_predict_rows(p_prev: &Matrix, p_cur: &Matrix) -> Result<Matrix> {
    if p_prev.rows() != p_cur.rows() {
        return Err(Error::invalid("previous and current predictions differ in row count"));
    }
    let mut out = Matrix::zeros(p_prev.rows(), p_prev.cols() + p_cur.cols());
    for i in 0..p_prev.rows() {
        let q = q_predict(p_prev.row(i), p_cur.row(i))?;
        out.row_mut(i).copy_from_slice(&q.probs);
    }
    Ok(out)
}
