//! External-set sampling from an unlabeled stream.
//!
//! The first `ceil(ood_ratio * n_d)` stream items are kept verbatim as the
//! random (out-of-distribution) bucket. Every later item, up to `n_max` pulls
//! in total, is scored by the previous model and competes for a slot in the
//! bucket of its predicted class. Each class keeps at most
//! `floor(n_prev / classes)` items: the most confident ones seen so far, with
//! the earlier arrival winning ties.

use std::collections::BTreeMap;
use std::io::BufRead;

use crate::data::parse_f64;
use crate::error::{Error, Result};
use crate::nnet::{argmax, softmax_temperature, Matrix, Model};

/// Pull-based source of unlabeled feature vectors.
pub trait UnlabeledStream {
    /// Next item, or `None` once the source is exhausted.
    fn next_unlabeled(&mut self) -> Option<Vec<f64>>;
}

/// Replays a fixed list of vectors, then reports exhaustion.
#[derive(Debug, Clone)]
pub struct VecStream {
    items: std::vec::IntoIter<Vec<f64>>,
}

impl VecStream {
    pub fn new(items: Vec<Vec<f64>>) -> Self {
        Self { items: items.into_iter() }
    }

    /// Reads a CSV with a header row and one example per record; every
    /// column is a feature (`x0,x1,...`).
    pub fn from_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let mut items = Vec::new();
        for rec in reader.records() {
            items.push(rec?.iter().map(parse_f64).collect::<Result<Vec<_>>>()?);
        }
        Ok(Self::new(items))
    }
}

impl UnlabeledStream for VecStream {
    fn next_unlabeled(&mut self) -> Option<Vec<f64>> {
        self.items.next()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredExample {
    pub x: Vec<f64>,
    /// Predicted class of the scoring model.
    pub y_hat: usize,
    /// Its probability.
    pub p_hat: f64,
    /// Zero-based stream position.
    pub arrival: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    /// Target external-set size.
    pub n_d: usize,
    /// Maximum number of stream pulls.
    pub n_max: usize,
    /// Share of `n_d` filled by unscored stream items.
    pub ood_ratio: f64,
}

impl SamplerConfig {
    pub fn n_ood(&self) -> usize {
        // Guard against products like 0.7 * 10 = 7.000000000000001.
        ((self.ood_ratio * self.n_d as f64) - 1e-9).ceil().max(0.0) as usize
    }

    pub fn n_prev(&self) -> usize {
        self.n_d - self.n_ood().min(self.n_d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExternalSet {
    /// Class -> members ordered by arrival.
    pub prev_bucket: BTreeMap<usize, Vec<ScoredExample>>,
    pub ood_bucket: Vec<Vec<f64>>,
    pub n_prev_target: usize,
    pub n_ood_target: usize,
    /// Per-class capacity of the scored bucket.
    pub cap: usize,
    /// Stream pulls performed.
    pub retrieved: usize,
    /// The stream ran dry before the budget was used.
    pub truncated: bool,
}

impl ExternalSet {
    pub fn prev_len(&self) -> usize {
        self.prev_bucket.values().map(Vec::len).sum()
    }

    pub fn len(&self) -> usize {
        self.ood_bucket.len() + self.prev_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops labels and scores: OOD items first, then scored items by class
    /// ascending and arrival ascending.
    pub fn flatten(&self, dim: usize) -> Matrix {
        let mut data = Vec::with_capacity(self.len() * dim);
        for x in &self.ood_bucket {
            data.extend_from_slice(x);
        }
        for members in self.prev_bucket.values() {
            for e in members {
                data.extend_from_slice(&e.x);
            }
        }
        Matrix::from_vec(self.len(), dim, data).expect("stream items share the model input width")
    }
}

/// Items are scored in chunks of this many; results are identical to
/// one-at-a-time scoring.
const SCORE_CHUNK: usize = 512;

/// Fills the random bucket, then the confidence-ranked bucket of the classes
/// `prev_model` knows. With `ood_ratio = 1` no model is needed.
pub fn sample_external(
    prev_model: Option<&Model>,
    stream: &mut dyn UnlabeledStream,
    config: SamplerConfig,
) -> Result<ExternalSet> {
    if config.n_d == 0 {
        return Err(Error::invalid("external set size must be at least 1"));
    }
    if config.n_max < config.n_d {
        return Err(Error::invalid(format!("n_max {} is below n_d {}", config.n_max, config.n_d)));
    }
    if !(0.0..=1.0).contains(&config.ood_ratio) {
        return Err(Error::invalid(format!("ood_ratio {} outside [0, 1]", config.ood_ratio)));
    }
    let n_ood = config.n_ood();
    let n_prev = config.n_prev();
    let scorer = match prev_model {
        Some(m) if m.num_heads() > 0 => Some(m),
        _ if n_prev == 0 => None,
        _ => return Err(Error::InvalidConfig("scored sampling needs a previous model".into())),
    };

    let mut ext = ExternalSet {
        prev_bucket: BTreeMap::new(),
        ood_bucket: Vec::with_capacity(n_ood),
        n_prev_target: n_prev,
        n_ood_target: n_ood,
        cap: 0,
        retrieved: 0,
        truncated: false,
    };
    while ext.ood_bucket.len() < n_ood {
        match stream.next_unlabeled() {
            Some(x) => {
                ext.ood_bucket.push(x);
                ext.retrieved += 1;
            }
            None => {
                ext.truncated = true;
                return Ok(ext);
            }
        }
    }
    let Some(model) = scorer else { return Ok(ext) };
    let num_classes = model.num_classes();
    ext.cap = n_prev / num_classes;

    let mut buckets: BTreeMap<usize, Vec<ScoredExample>> = BTreeMap::new();
    while ext.retrieved < config.n_max {
        let want = (config.n_max - ext.retrieved).min(SCORE_CHUNK);
        let mut chunk = Vec::with_capacity(want);
        for _ in 0..want {
            match stream.next_unlabeled() {
                Some(x) => chunk.push(x),
                None => {
                    ext.truncated = true;
                    break;
                }
            }
        }
        if chunk.is_empty() {
            break;
        }
        let logits = model.logits(&Matrix::from_rows(&chunk)?, model.all_heads())?;
        for (x, z) in chunk.into_iter().zip(logits.iter_rows()) {
            let p = softmax_temperature(z, 1.0);
            let y_hat = argmax(&p);
            let cand = ScoredExample { x, y_hat, p_hat: p[y_hat], arrival: ext.retrieved };
            ext.retrieved += 1;
            offer(buckets.entry(y_hat).or_default(), cand, ext.cap);
        }
        if ext.truncated {
            break;
        }
    }
    for members in buckets.values_mut() {
        members.sort_by_key(|e| e.arrival);
    }
    buckets.retain(|_, v| !v.is_empty());
    ext.prev_bucket = buckets;
    Ok(ext)
}

/// Inserts below capacity; otherwise replaces the least confident member
/// (the latest arrival among equals) when the candidate is strictly more confident.
fn offer(bucket: &mut Vec<ScoredExample>, cand: ScoredExample, cap: usize) {
    if bucket.len() < cap {
        bucket.push(cand);
        return;
    }
    let weakest = bucket
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.p_hat.total_cmp(&b.p_hat).then(b.arrival.cmp(&a.arrival)))
        .map(|(i, _)| i);
    if let Some(i) = weakest {
        if bucket[i].p_hat < cand.p_hat {
            bucket[i] = cand;
        }
    }
}
