//! Loss terms over logits: classification, distillation and confidence,
//! plus the class-frequency data weights and per-term loss weights.
//!
//! Every loss returns its value together with the exact gradient with respect
//! to the logits it was given. Probabilities of the student are never
//! materialized before the log; all log-probabilities go through log-sum-exp.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nnet::{log_softmax_temperature, HeadRange, Matrix};

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    /// Gradient with respect to the input logits, same shape.
    pub grad: Matrix,
}

impl LossOutput {
    fn zero(rows: usize, cols: usize) -> Self {
        Self { loss: 0.0, grad: Matrix::zeros(rows, cols) }
    }
}

fn check_weights(weights: Option<&[f64]>, n: usize) -> Result<()> {
    match weights {
        Some(w) if w.len() != n => Err(Error::invalid(format!("{} example weights for {n} examples", w.len()))),
        Some(w) if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) => {
            Err(Error::invalid("example weights must be finite and nonnegative"))
        }
        _ => Ok(()),
    }
}

/// Weighted mean of `-log p(y|x)`. The mean divides by the batch size, not
/// by the weight sum, so weight 2 is the same as feeding an example twice.
pub fn cls_loss(logits: &Matrix, labels: &[usize], weights: Option<&[f64]>) -> Result<LossOutput> {
    let n = logits.rows();
    if labels.len() != n {
        return Err(Error::invalid(format!("{} labels for {n} rows", labels.len())));
    }
    check_weights(weights, n)?;
    if n == 0 {
        return Ok(LossOutput::zero(0, logits.cols()));
    }
    let mut out = LossOutput::zero(n, logits.cols());
    for (i, &y) in labels.iter().enumerate() {
        if y >= logits.cols() {
            return Err(Error::invalid(format!("label {y} outside {} logits", logits.cols())));
        }
        let w = weights.map_or(1.0, |w| w[i]);
        let z = logits.row(i);
        let logp = log_softmax_temperature(z, 1.0);
        out.loss -= w * logp[y];
        let g = out.grad.row_mut(i);
        for (k, (gk, lp)) in g.iter_mut().zip(&logp).enumerate() {
            *gk = w * (lp.exp() - if k == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    out.loss /= n as f64;
    Ok(out)
}

/// Weighted mean of `sum_y -q(y) log p_gamma(y|x)` where `q` rows are the
/// teacher's (already smoothed) probabilities and `p_gamma` is the student
/// softmax at temperature `gamma`. No `gamma^2` rescaling is applied.
pub fn dst_loss(logits: &Matrix, teacher: &Matrix, gamma: f64, weights: Option<&[f64]>) -> Result<LossOutput> {
    let n = logits.rows();
    if teacher.rows() != n || teacher.cols() != logits.cols() {
        return Err(Error::invalid(format!(
            "teacher is {}x{}, student logits are {}x{}",
            teacher.rows(),
            teacher.cols(),
            n,
            logits.cols()
        )));
    }
    if !(gamma > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    check_weights(weights, n)?;
    if n == 0 {
        return Ok(LossOutput::zero(0, logits.cols()));
    }
    let mut out = LossOutput::zero(n, logits.cols());
    for i in 0..n {
        let w = weights.map_or(1.0, |w| w[i]);
        let q = teacher.row(i);
        let logp = log_softmax_temperature(logits.row(i), gamma);
        let mass: f64 = q.iter().sum();
        out.loss -= w * q.iter().zip(&logp).map(|(q, lp)| if *q == 0.0 { 0.0 } else { q * lp }).sum::<f64>();
        let scale = w / (gamma * n as f64);
        for ((g, lp), qk) in out.grad.row_mut(i).iter_mut().zip(&logp).zip(q) {
            *g = scale * (lp.exp() * mass - qk);
        }
    }
    out.loss /= n as f64;
    Ok(out)
}

/// Mean over examples and classes of `-log p(y|x)`: cross-entropy to the
/// uniform distribution, minimized exactly by equal logits.
pub fn cnf_loss(logits: &Matrix) -> LossOutput {
    let n = logits.rows();
    let k = logits.cols();
    let mut out = LossOutput::zero(n, k);
    if n == 0 || k == 0 {
        return out;
    }
    let uniform = 1.0 / k as f64;
    for i in 0..n {
        let logp = log_softmax_temperature(logits.row(i), 1.0);
        out.loss -= logp.iter().sum::<f64>() * uniform;
        for (g, lp) in out.grad.row_mut(i).iter_mut().zip(&logp) {
            *g = (lp.exp() - uniform) / n as f64;
        }
    }
    out.loss /= n as f64;
    out
}

/// Per-class data weights `w_k = |D| / (|T| n_k)`; exactly one on balanced data.
#[derive(Debug, Clone, PartialEq)]
pub struct DataWeights {
    pub per_class: BTreeMap<usize, f64>,
}

impl DataWeights {
    pub fn get(&self, class: usize) -> Option<f64> {
        self.per_class.get(&class).copied()
    }

    /// Weight of each label in order.
    pub fn per_example(&self, labels: &[usize]) -> Result<Vec<f64>> {
        labels
            .iter()
            .map(|&y| self.get(y).ok_or_else(|| Error::invalid(format!("label {y} has no data weight"))))
            .collect()
    }
}

/// Inverse class-frequency weights over `classes`, normalized so they are
/// all one when the labels are balanced. Every class must occur.
pub fn data_weights(labels: &[usize], classes: &[usize]) -> Result<DataWeights> {
    let mut counts: BTreeMap<usize, usize> = classes.iter().map(|&c| (c, 0)).collect();
    for &y in labels {
        match counts.get_mut(&y) {
            Some(c) => *c += 1,
            None => return Err(Error::invalid(format!("label {y} is not in the weighting class range"))),
        }
    }
    let total = labels.len() as f64;
    let num_classes = counts.len() as f64;
    let mut per_class = BTreeMap::new();
    for (class, n) in counts {
        if n == 0 {
            return Err(Error::MissingClass { class });
        }
        per_class.insert(class, total / (num_classes * n as f64));
    }
    Ok(DataWeights { per_class })
}

/// `|T| / |T_1:t|`: the share of the seen classes a term trains.
pub fn loss_weight(task_size: usize, total_classes: usize) -> f64 {
    debug_assert!(task_size >= 1 && task_size <= total_classes);
    task_size as f64 / total_classes as f64
}

/// Frozen model a distillation term learns from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Teacher {
    /// Previous-stage model, softmax over all previous classes.
    Previous,
    /// Previous-stage model restricted to one earlier task's head, softmax within that task.
    PreviousLocal(usize),
    /// Current-task teacher.
    Current,
    /// Ensemble of previous and current teachers.
    Ensemble,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TermKind {
    Cls,
    Dst(Teacher),
    Cnf,
}

/// Dataset a term is evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DataRole {
    /// Labeled training set (current data plus coreset).
    Train,
    /// Sampled external set only.
    External,
    /// Training inputs together with the external set.
    Union,
}

/// One term of a composite objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerm {
    pub kind: TermKind,
    pub heads: HeadRange,
    pub role: DataRole,
    pub gamma: f64,
    pub weight: f64,
}

/// Temperatures for distillation from each reference model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperatures {
    pub previous: f64,
    pub current: f64,
    pub ensemble: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Self { previous: 2.0, current: 2.0, ensemble: 1.0 }
    }
}

/// Which reference models feed global distillation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ReferenceSet {
    pub previous: bool,
    pub current: bool,
    pub ensemble: bool,
}

impl ReferenceSet {
    pub const ALL: ReferenceSet = ReferenceSet { previous: true, current: true, ensemble: true };
    pub const NONE: ReferenceSet = ReferenceSet { previous: false, current: false, ensemble: false };
}

/// Global distillation objective at stage `stage` (0-based) for tasks of the
/// given sizes: classification on the training set over every head, then the
/// selected distillation terms, weighted by the share of classes each trains.
pub fn global_terms(task_sizes: &[usize], stage: usize, refs: ReferenceSet, temps: Temperatures) -> Vec<LossTerm> {
    let seen: usize = task_sizes[..=stage].iter().sum();
    let prev: usize = task_sizes[..stage].iter().sum();
    let all = HeadRange::new(0, stage + 1);
    let mut terms = vec![LossTerm { kind: TermKind::Cls, heads: all, role: DataRole::Train, gamma: 1.0, weight: 1.0 }];
    if stage == 0 {
        return terms;
    }
    if refs.previous {
        terms.push(LossTerm {
            kind: TermKind::Dst(Teacher::Previous),
            heads: HeadRange::new(0, stage),
            role: DataRole::Union,
            gamma: temps.previous,
            weight: loss_weight(prev, seen),
        });
    }
    if refs.current {
        terms.push(LossTerm {
            kind: TermKind::Dst(Teacher::Current),
            heads: HeadRange::single(stage),
            role: DataRole::Union,
            gamma: temps.current,
            weight: loss_weight(task_sizes[stage], seen),
        });
    }
    if refs.ensemble {
        terms.push(LossTerm {
            kind: TermKind::Dst(Teacher::Ensemble),
            heads: all,
            role: DataRole::External,
            gamma: temps.ensemble,
            weight: 1.0,
        });
    }
    terms
}

/// Task-wise (local) distillation: one term per earlier task on the training
/// set, each with its own within-task softmax. With `with_current`, adds
/// distillation from the current-task teacher as well.
pub fn local_terms(task_sizes: &[usize], stage: usize, with_current: bool, temps: Temperatures) -> Vec<LossTerm> {
    let seen: usize = task_sizes[..=stage].iter().sum();
    let mut terms = vec![LossTerm {
        kind: TermKind::Cls,
        heads: HeadRange::new(0, stage + 1),
        role: DataRole::Train,
        gamma: 1.0,
        weight: 1.0,
    }];
    for s in 0..stage {
        terms.push(LossTerm {
            kind: TermKind::Dst(Teacher::PreviousLocal(s)),
            heads: HeadRange::single(s),
            role: DataRole::Train,
            gamma: temps.previous,
            weight: loss_weight(task_sizes[s], seen),
        });
    }
    if with_current && stage > 0 {
        terms.push(LossTerm {
            kind: TermKind::Dst(Teacher::Current),
            heads: HeadRange::single(stage),
            role: DataRole::Union,
            gamma: temps.current,
            weight: loss_weight(task_sizes[stage], seen),
        });
    }
    terms
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn cls_examples() {
        let confident = cls_loss(&m(&[&[50.0, 0.0, 0.0]]), &[0], None).unwrap();
        assert!(confident.loss < 1e-20);
        let uniform = cls_loss(&m(&[&[0.3; 4]]), &[2], None).unwrap();
        assert!((uniform.loss - 4f64.ln()).abs() < 1e-12);
        assert!(cls_loss(&m(&[&[0.0, 0.0]]), &[2], None).is_err());
    }

    #[test]
    fn weight_two_equals_duplicate() {
        let a = m(&[&[0.5, -1.0, 2.0], &[1.0, 0.0, -0.5]]);
        let dup = m(&[&[0.5, -1.0, 2.0], &[0.5, -1.0, 2.0], &[1.0, 0.0, -0.5]]);
        // Weighted mean over 2 rows normalized to the 3-row duplicate by the factor 2/3.
        let w = cls_loss(&a, &[2, 0], Some(&[2.0, 1.0])).unwrap();
        let d = cls_loss(&dup, &[2, 2, 0], None).unwrap();
        assert!((w.loss * 2.0 / 3.0 - d.loss).abs() < 1e-14);
        for k in 0..3 {
            let gd = d.grad.get(0, k) + d.grad.get(1, k);
            assert!((w.grad.get(0, k) * 2.0 / 3.0 - gd).abs() < 1e-14);
        }
    }

    #[test]
    fn dst_examples() {
        // Student equals uniform teacher over 2 classes: loss is the teacher entropy.
        let out = dst_loss(&m(&[&[0.7, 0.7]]), &m(&[&[0.5, 0.5]]), 2.0, None).unwrap();
        assert!((out.loss - LN2).abs() < 1e-12);
        // Uniform student: cross-entropy is ln 2 whatever the teacher.
        let out = dst_loss(&m(&[&[0.0, 0.0]]), &m(&[&[0.75, 0.25]]), 1.0, None).unwrap();
        assert!((out.loss - LN2).abs() < 1e-12);
        assert!(dst_loss(&m(&[&[0.0, 0.0]]), &m(&[&[1.0, 0.0, 0.0]]), 1.0, None).is_err());
    }

    #[test]
    fn one_hot_teacher_matches_cls() {
        let z = m(&[&[0.2, 1.5, -0.3], &[2.0, 0.0, 1.0]]);
        let q = m(&[&[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0]]);
        let d = dst_loss(&z, &q, 1.0, None).unwrap();
        let c = cls_loss(&z, &[2, 0], None).unwrap();
        assert!((d.loss - c.loss).abs() < 1e-14);
        for (a, b) in d.grad.as_slice().iter().zip(c.grad.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn cnf_examples() {
        let u = cnf_loss(&m(&[&[1.0; 4]]));
        assert!((u.loss - 4f64.ln()).abs() < 1e-12);
        assert!(u.grad.as_slice().iter().all(|g| g.abs() < 1e-15));
        // [10,0,0,0]: lse = ln(e^10 + 3); loss = lse - 10/4.
        let peaked = cnf_loss(&m(&[&[10.0, 0.0, 0.0, 0.0]]));
        let expected = (10f64.exp() + 3.0).ln() - 2.5;
        assert!((peaked.loss - expected).abs() < 1e-12);
        assert!(peaked.loss > 4f64.ln());
    }

    #[test]
    fn data_weight_examples() {
        let w = data_weights(&[0, 1, 2, 0, 1, 2], &[0, 1, 2]).unwrap();
        assert!(w.per_class.values().all(|&v| v == 1.0));
        let w = data_weights(&[0, 0, 1, 2], &[0, 1, 2]).unwrap();
        assert!((w.get(0).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((w.get(1).unwrap() - 4.0 / 3.0).abs() < 1e-15);
        assert!((w.get(2).unwrap() - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(data_weights(&[5; 7], &[5]).unwrap().get(5), Some(1.0));
        assert!(matches!(data_weights(&[0, 0], &[0, 1]), Err(Error::MissingClass { class: 1 })));
    }

    #[test]
    fn loss_weight_examples() {
        assert_eq!(loss_weight(10, 10), 1.0);
        assert!((loss_weight(10, 30) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(loss_weight(5, 10), 0.5);
    }

    #[test]
    fn global_term_weights() {
        let sizes = [10, 5, 15];
        let terms = global_terms(&sizes, 2, ReferenceSet::ALL, Temperatures::default());
        assert_eq!(terms.len(), 4);
        let w = |k: TermKind| terms.iter().find(|t| t.kind == k).unwrap().weight;
        assert_eq!(w(TermKind::Cls), 1.0);
        assert_eq!(w(TermKind::Dst(Teacher::Ensemble)), 1.0);
        let p = w(TermKind::Dst(Teacher::Previous));
        let c = w(TermKind::Dst(Teacher::Current));
        assert!((p - 15.0 / 30.0).abs() < 1e-15 && (c - 15.0 / 30.0).abs() < 1e-15);
        assert!((p + c - 1.0).abs() < 1e-15);
        assert_eq!(global_terms(&sizes, 2, ReferenceSet::NONE, Temperatures::default()).len(), 1);
        assert_eq!(global_terms(&sizes, 0, ReferenceSet::ALL, Temperatures::default()).len(), 1);
    }
}
