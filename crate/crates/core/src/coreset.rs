//! Class-balanced replay memory.

use rand::seq::index;
use rand::Rng;

use crate::data::LabeledSet;

#[derive(Debug, Clone, PartialEq)]
pub struct Coreset {
    pub set: LabeledSet,
    pub capacity: usize,
    pub classes: Vec<usize>,
}

impl Coreset {
    pub fn empty(dim: usize, capacity: usize) -> Self {
        Self { set: LabeledSet::empty(dim), capacity, classes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }
}

/// Picks `floor(n_c / |classes|)` examples of every class uniformly without
/// replacement (all of them when a class has fewer). The remainder of a
/// non-divisible capacity is left unused. Output is ordered by class, then by
/// position in `d_trn`.
pub fn update_coreset<R: Rng + ?Sized>(d_trn: &LabeledSet, n_c: usize, classes: &[usize], rng: &mut R) -> Coreset {
    let mut classes = classes.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let quota = if classes.is_empty() { 0 } else { n_c / classes.len() };
    let by_class = d_trn.indices_by_class();
    let mut picked = Vec::with_capacity(quota * classes.len());
    for class in &classes {
        let Some(pool) = by_class.get(class) else { continue };
        let take = quota.min(pool.len());
        let mut chosen: Vec<usize> = index::sample(rng, pool.len(), take).into_iter().map(|j| pool[j]).collect();
        chosen.sort_unstable();
        picked.extend(chosen);
    }
    Coreset { set: d_trn.select(&picked), capacity: n_c, classes }
}
