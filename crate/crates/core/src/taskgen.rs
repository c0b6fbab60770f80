//! Synthetic class-incremental benchmark: isotropic Gaussian class clusters,
//! a seeded class order split into tasks, and an unbounded unlabeled stream
//! mixing samples of already-seen classes with out-of-distribution clusters.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::nnet::Matrix;
use crate::sampler::UnlabeledStream;

/// Derives an independent seed for a named purpose.
pub fn sub_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 of the pair
    let mut z = seed.wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, tag))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSpec {
    pub dim: usize,
    pub num_classes: usize,
    pub task_size: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    /// Standard deviation of every class cluster.
    pub cluster_std: f64,
    /// Standard deviation of the class-center distribution.
    pub center_scale: f64,
    pub ood_clusters: usize,
    /// Standard deviation of the OOD-center distribution.
    pub ood_scale: f64,
    pub ood_std: f64,
    /// Minimum distance from an OOD center to any class center, in class stds.
    pub ood_separation: f64,
    /// Probability that a stream item comes from an already-seen class.
    pub prev_like_fraction: f64,
    /// Seed of the cluster geometry and the labeled samples. Trials then
    /// differ only in class order, stream and training randomness.
    pub data_seed: u64,
    /// Draw geometry and samples from the trial seed instead of `data_seed`.
    pub resample_per_trial: bool,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            dim: 16,
            num_classes: 20,
            task_size: 10,
            per_class_train: 200,
            per_class_test: 200,
            cluster_std: 1.0,
            center_scale: 0.8,
            ood_clusters: 64,
            ood_scale: 1.0,
            ood_std: 1.0,
            ood_separation: 3.0,
            prev_like_fraction: 0.05,
            data_seed: 0,
            resample_per_trial: false,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| Err(Error::ConfigKey { key: format!("benchmark.{key}"), message: message.into() });
        if self.dim == 0 {
            return bad("dim", "must be positive");
        }
        if self.task_size == 0 || self.num_classes == 0 || !self.num_classes.is_multiple_of(self.task_size) {
            return bad("task_size", "must be positive and divide num_classes");
        }
        if self.per_class_train == 0 || self.per_class_test == 0 {
            return bad("per_class_train", "per-class counts must be positive");
        }
        for (k, v) in [("cluster_std", self.cluster_std), ("center_scale", self.center_scale), ("ood_scale", self.ood_scale), ("ood_std", self.ood_std)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(k, "must be positive");
            }
        }
        if self.ood_clusters == 0 {
            return bad("ood_clusters", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.prev_like_fraction) {
            return bad("prev_like_fraction", "must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.num_classes / self.task_size
    }
}

/// Seeded class order split into equally sized tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskLayout {
    pub num_classes: usize,
    pub task_size: usize,
    /// `class_order[label]` is the cluster behind global label `label`.
    pub class_order: Vec<usize>,
}

impl TaskLayout {
    pub fn shuffled<R: Rng + ?Sized>(num_classes: usize, task_size: usize, rng: &mut R) -> Self {
        let mut class_order: Vec<usize> = (0..num_classes).collect();
        class_order.shuffle(rng);
        Self { num_classes, task_size, class_order }
    }

    pub fn num_tasks(&self) -> usize {
        self.num_classes.div_ceil(self.task_size)
    }

    /// Global labels of task `t`.
    pub fn task_labels(&self, t: usize) -> std::ops::Range<usize> {
        t * self.task_size..((t + 1) * self.task_size).min(self.num_classes)
    }

    pub fn task_sizes(&self) -> Vec<usize> {
        (0..self.num_tasks()).map(|t| self.task_labels(t).len()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: LabeledSet,
    pub test: LabeledSet,
}

/// Cluster geometry of one trial.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub spec: BenchmarkSpec,
    /// Seed behind the geometry and the labeled samples.
    pub data_seed: u64,
    /// Indexed by cluster id.
    pub class_centers: Vec<Vec<f64>>,
    pub ood_centers: Vec<Vec<f64>>,
    pub layout: TaskLayout,
}

fn gauss<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * gauss(rng)).collect::<Vec<f64>>()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl Benchmark {
    pub fn new(spec: BenchmarkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let data_seed = if spec.resample_per_trial { seed } else { spec.data_seed };
        let mut rng = rng_for(data_seed, 1);
        let class_centers: Vec<Vec<f64>> =
            (0..spec.num_classes).map(|_| gaussian_vec(&mut rng, spec.dim, spec.center_scale)).collect();
        let min_gap = spec.ood_separation * spec.cluster_std;
        let mut ood_centers = Vec::with_capacity(spec.ood_clusters);
        let mut attempts = 0usize;
        while ood_centers.len() < spec.ood_clusters {
            attempts += 1;
            if attempts > 1_000_000 {
                return Err(Error::InvalidConfig("could not place OOD clusters far enough from the class clusters".into()));
            }
            let c = gaussian_vec(&mut rng, spec.dim, spec.ood_scale);
            if class_centers.iter().all(|k| dist(k, &c) >= min_gap) {
                ood_centers.push(c);
            }
        }
        let layout = TaskLayout::shuffled(spec.num_classes, spec.task_size, &mut rng_for(seed, 2));
        Ok(Self { spec, data_seed, class_centers, ood_centers, layout })
    }

    pub fn center_of_label(&self, label: usize) -> &[f64] {
        &self.class_centers[self.layout.class_order[label]]
    }

    /// Samples of each class come from their own stream keyed by cluster,
    /// so a cluster keeps its samples whatever label it gets.
    fn draw(&self, labels: std::ops::Range<usize>, per_class: usize, tag: u64) -> LabeledSet {
        let mut data = Vec::with_capacity(labels.len() * per_class * self.spec.dim);
        let mut ys = Vec::with_capacity(labels.len() * per_class);
        for y in labels {
            let cluster = self.layout.class_order[y];
            let c = &self.class_centers[cluster];
            let mut rng = rng_for(self.data_seed, tag + 2 * cluster as u64);
            for _ in 0..per_class {
                data.extend(c.iter().map(|m| m + self.spec.cluster_std * gauss(&mut rng)));
                ys.push(y);
            }
        }
        LabeledSet { inputs: Matrix::from_vec(ys.len(), self.spec.dim, data).unwrap(), labels: ys }
    }

    /// Train and test sets of every task, with equal per-class test counts.
    pub fn make_task_sequence(&self) -> Vec<TaskData> {
        (0..self.layout.num_tasks())
            .map(|t| {
                let labels = self.layout.task_labels(t);
                let train = self.draw(labels.clone(), self.spec.per_class_train, 100);
                let test = self.draw(labels, self.spec.per_class_test, 101);
                TaskData { train, test }
            })
            .collect()
    }

    /// Held-out OOD samples.
    pub fn ood_samples(&self, n: usize, seed: u64) -> Matrix {
        let mut rng = rng_for(seed, 7);
        let mut data = Vec::with_capacity(n * self.spec.dim);
        for _ in 0..n {
            data.extend(self.ood_point(&mut rng));
        }
        Matrix::from_vec(n, self.spec.dim, data).unwrap()
    }

    fn ood_point(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let c = &self.ood_centers[rng.gen_range(0..self.ood_centers.len())];
        c.iter().map(|m| m + self.spec.ood_std * gauss(rng)).collect()
    }

    /// Unlabeled stream whose in-distribution items come from `seen_labels`.
    /// Items that collide bit-for-bit with a vector in `exclude` are redrawn.
    pub fn stream(&self, seen_labels: std::ops::Range<usize>, exclude: &[&Matrix], seed: u64) -> SyntheticStream<'_> {
        let excluded = exclude
            .iter()
            .flat_map(|m| m.iter_rows().map(|r| r.iter().map(|v| v.to_bits()).collect::<Vec<u64>>()))
            .collect();
        SyntheticStream {
            bench: self,
            seen: seen_labels.collect(),
            excluded,
            rng: rng_for(seed, 3),
            prev_like_draws: 0,
            ood_draws: 0,
        }
    }
}

pub struct SyntheticStream<'a> {
    bench: &'a Benchmark,
    seen: Vec<usize>,
    excluded: HashSet<Vec<u64>>,
    rng: ChaCha8Rng,
    pub prev_like_draws: usize,
    pub ood_draws: usize,
}

impl SyntheticStream<'_> {
    fn draw_once(&mut self) -> Vec<f64> {
        let spec = &self.bench.spec;
        let prev_like = !self.seen.is_empty() && self.rng.gen_bool(spec.prev_like_fraction);
        if prev_like {
            self.prev_like_draws += 1;
            let label = self.seen[self.rng.gen_range(0..self.seen.len())];
            let c = self.bench.center_of_label(label);
            c.iter().map(|m| m + spec.cluster_std * gauss(&mut self.rng)).collect()
        } else {
            self.ood_draws += 1;
            self.bench.ood_point(&mut self.rng)
        }
    }
}

impl UnlabeledStream for SyntheticStream<'_> {
    fn next_unlabeled(&mut self) -> Option<Vec<f64>> {
        loop {
            let x = self.draw_once();
            if self.excluded.is_empty() || !self.excluded.contains(&x.iter().map(|v| v.to_bits()).collect::<Vec<u64>>()) {
                return Some(x);
            }
        }
    }
}
