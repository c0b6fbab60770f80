//! Brute-force oracles shared by the integration tests. Each one recomputes
//! a quantity straight from its definition, independently of the library's
//! implementation.

#![allow(dead_code)]

use std::collections::BTreeMap;

use gdistill::metrics::AccuracyMatrix;
use gdistill::nnet::Model;

/// Single linear head whose logits equal the input: `k` inputs, `k` classes.
pub fn identity_model(k: usize) -> Model {
    let mut m = Model::zeros(k, &[], &[k]);
    for c in 0..k {
        m.set_param(c * k + c, 1.0);
    }
    m
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Scored bucket chosen by ranking every eligible stream item at once:
/// items after the first `n_ood` pulls and within the first `n_max` pulls,
/// grouped by predicted class, keeping the `cap` best by (probability
/// descending, arrival ascending). Returns class -> sorted arrivals.
pub fn oracle_prev_bucket(logits: &[Vec<f64>], n_ood: usize, n_max: usize, cap: usize) -> BTreeMap<usize, Vec<usize>> {
    let mut by_class: BTreeMap<usize, Vec<(f64, usize)>> = BTreeMap::new();
    for (arrival, z) in logits.iter().enumerate().take(n_max).skip(n_ood) {
        let p = softmax(z);
        let mut best = 0;
        for (i, v) in p.iter().enumerate() {
            if *v > p[best] {
                best = i;
            }
        }
        by_class.entry(best).or_default().push((p[best], arrival));
    }
    by_class
        .into_iter()
        .filter_map(|(c, mut items)| {
            items.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut kept: Vec<usize> = items.into_iter().take(cap).map(|(_, a)| a).collect();
            kept.sort_unstable();
            (!kept.is_empty()).then_some((c, kept))
        })
        .collect()
}

/// ACC and FGT by literal summation over 1-based stage and task indices.
pub fn oracle_acc_fgt(m: &AccuracyMatrix) -> (f64, f64) {
    let t = m.stages();
    let sizes = &m.task_sizes;
    let mut acc = 0.0;
    let mut fgt = 0.0;
    for s in 2..=t {
        let mut seen = 0usize;
        for r in 1..=s {
            seen += sizes[r - 1];
        }
        let mut a = 0.0;
        let mut f = 0.0;
        for r in 1..=s {
            let share = sizes[r - 1] as f64 / seen as f64;
            a += share * m.get(r - 1, s - 1);
            if r < s {
                f += share * (m.get(r - 1, r - 1) - m.get(r - 1, s - 1));
            }
        }
        acc += a;
        fgt += f;
    }
    (acc / (t - 1) as f64, fgt / (t - 1) as f64)
}
