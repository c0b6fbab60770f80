//! Stage orchestration: sample an external set, train the current-task
//! teacher, train the main model against the reference models, fine-tune
//! for class balance, and refresh the coreset.
//!
//! Every objective is lowered to an [`Objective`]: a list of input pools and
//! terms bound to one pool each, with targets precomputed from the frozen
//! reference models. One optimization step draws a minibatch from every pool
//! that has terms, runs one forward pass per pool over all heads and sums the
//! weighted term gradients.

use std::ops::Range;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coreset::{update_coreset, Coreset};
use crate::data::LabeledSet;
use crate::ensemble::q_predict_rows;
use crate::error::{Error, Result};
use crate::losses::{
    cls_loss, cnf_loss, data_weights, dst_loss, global_terms, local_terms, DataRole, LossTerm, ReferenceSet,
    Teacher, Temperatures, TermKind,
};
use crate::metrics::{task_accuracy, AccuracyMatrix};
use crate::nnet::{argmax, softmax_rows, HeadRange, Matrix, Model, OptimizerState, SgdConfig, UpdateScope};
use crate::sampler::{sample_external, SamplerConfig, UnlabeledStream};
use crate::taskgen::{rng_for, Benchmark, TaskData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Replays all past training data; classification loss only.
    Oracle,
    /// Classification on current data plus coreset.
    Baseline,
    /// Classification plus task-wise distillation from the previous model.
    Lwf,
    /// LwF plus distillation from the current-task teacher.
    Dr,
    /// Global distillation from the selected reference models.
    Gd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Balancing {
    None,
    /// Data weighting throughout main training.
    Dw,
    /// Whole-network fine-tuning on an undersampled balanced training set.
    FtDset,
    /// Head-only fine-tuning with data weighting.
    FtDw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    /// No external data.
    None,
    /// The whole external set is taken unscored from the stream.
    RandomOnly,
    /// The whole external set is confidence-selected.
    PredOnly,
    /// Random share given by `ood_ratio`, the rest confidence-selected.
    Combined,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodVariant {
    pub name: String,
    pub method: Method,
    /// Used by [`Method::Gd`] only.
    pub references: ReferenceSet,
    pub balancing: Balancing,
    pub sampling: Sampling,
    /// Train the current-task teacher with the confidence loss.
    pub confidence: bool,
}

impl MethodVariant {
    pub fn gd_ext(name: &str) -> Self {
        Self {
            name: name.into(),
            method: Method::Gd,
            references: ReferenceSet::ALL,
            balancing: Balancing::FtDw,
            sampling: Sampling::Combined,
            confidence: true,
        }
    }

    pub fn uses_external(&self) -> bool {
        self.sampling != Sampling::None
    }

    fn needs_current_teacher(&self) -> bool {
        match self.method {
            Method::Dr => true,
            Method::Gd => self.references.current || self.references.ensemble,
            _ => false,
        }
    }
}

/// Epoch counts and learning-rate milestones, already scaled to desk size.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub epochs: usize,
    pub milestones: Vec<usize>,
    /// Main-phase length when a fine-tuning phase follows.
    pub main_epochs_with_ft: usize,
    pub main_milestones_with_ft: Vec<usize>,
    pub ft_epochs: usize,
    pub ft_lr: f64,
    pub ft_milestones: Vec<usize>,
    pub lr_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub hidden: Vec<usize>,
    pub sgd: SgdConfig,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub temps: Temperatures,
    /// Temperature of the previous/current probabilities combined into the ensemble.
    pub ensemble_input_temperature: f64,
    /// Weight of the confidence term in the current-teacher objective.
    pub confidence_weight: f64,
    /// Also data-weight distillation terms, by the class counts of the
    /// teacher's argmax. Off: only classification is weighted.
    pub weight_soft_targets: bool,
    pub ood_ratio: f64,
    pub n_max: usize,
    /// External-set size; `None` uses the size of the stage's training set.
    pub external_size: Option<usize>,
    pub coreset_size: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            sgd: SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0005 },
            batch_size: 128,
            schedule: Schedule {
                epochs: 20,
                milestones: vec![12, 16, 18],
                main_epochs_with_ft: 18,
                main_milestones_with_ft: vec![12, 16, 17],
                ft_epochs: 2,
                ft_lr: 0.01,
                ft_milestones: vec![1, 2],
                lr_decay: 0.1,
            },
            temps: Temperatures::default(),
            ensemble_input_temperature: 1.0,
            confidence_weight: 1.0,
            weight_soft_targets: false,
            ood_ratio: 0.7,
            n_max: 60_000,
            external_size: None,
            coreset_size: 200,
        }
    }
}

/// What a term is trained towards.
#[derive(Debug, Clone)]
pub enum Target {
    Labels(Vec<usize>),
    Soft(Matrix),
    Uniform,
}

#[derive(Debug, Clone)]
pub struct BoundTerm {
    pub name: String,
    pub pool: usize,
    /// Logit columns of the full model the term reads.
    pub span: Range<usize>,
    pub target: Target,
    pub gamma: f64,
    pub weight: f64,
    pub example_weights: Option<Vec<f64>>,
}

/// Pools of inputs and the terms evaluated on them.
#[derive(Debug, Clone)]
pub struct Objective {
    pub pools: Vec<Matrix>,
    pub terms: Vec<BoundTerm>,
}

/// Loss of a term over a subset of its pool: value and logit gradient.
fn term_loss(term: &BoundTerm, logits: &Matrix, rows: &[usize]) -> Result<(f64, Matrix)> {
    let z = logits.columns(term.span.clone());
    let w: Option<Vec<f64>> = term.example_weights.as_ref().map(|w| rows.iter().map(|&i| w[i]).collect());
    let out = match &term.target {
        Target::Labels(labels) => {
            let ys: Vec<usize> = rows.iter().map(|&i| labels[i] - term.span.start).collect();
            cls_loss(&z, &ys, w.as_deref())?
        }
        Target::Soft(q) => dst_loss(&z, &q.select_rows(rows), term.gamma, w.as_deref())?,
        Target::Uniform => cnf_loss(&z),
    };
    Ok((out.loss, out.grad))
}

impl Objective {
    fn check(&self, model: &Model) -> Result<()> {
        for t in &self.terms {
            if t.span.end > model.num_classes() || t.span.is_empty() {
                return Err(Error::InvalidConfig(format!("term {} reads classes outside the model", t.name)));
            }
            let rows = self.pools[t.pool].rows();
            let ok = match &t.target {
                Target::Labels(l) => l.len() == rows,
                Target::Soft(q) => q.rows() == rows && q.cols() == t.span.len(),
                Target::Uniform => true,
            };
            if !ok || t.example_weights.as_ref().is_some_and(|w| w.len() != rows) {
                return Err(Error::InvalidConfig(format!("term {} targets do not match its pool", t.name)));
            }
        }
        Ok(())
    }

    /// Full-pool value of every term, unweighted by the term weight.
    pub fn evaluate(&self, model: &Model) -> Result<Vec<(String, f64)>> {
        self.check(model)?;
        let mut out = Vec::with_capacity(self.terms.len());
        for t in &self.terms {
            let pool = &self.pools[t.pool];
            if pool.rows() == 0 {
                out.push((t.name.clone(), 0.0));
                continue;
            }
            let logits = model.logits(pool, model.all_heads())?;
            let rows: Vec<usize> = (0..pool.rows()).collect();
            out.push((t.name.clone(), term_loss(t, &logits, &rows)?.0));
        }
        Ok(out)
    }

    /// Weighted total loss and gradient over the given rows of each pool.
    pub fn loss_and_gradient(&self, model: &Model, rows: &[Vec<usize>], scope: UpdateScope) -> Result<(f64, crate::nnet::Gradients, Vec<f64>)> {
        let mut total = crate::nnet::Gradients::zeros_like(model);
        let mut loss = 0.0;
        let mut per_term = vec![0.0; self.terms.len()];
        for (p, pool) in self.pools.iter().enumerate() {
            let idx = &rows[p];
            let terms: Vec<usize> = (0..self.terms.len()).filter(|&i| self.terms[i].pool == p).collect();
            if idx.is_empty() || terms.is_empty() {
                continue;
            }
            let batch = pool.select_rows(idx);
            let (logits, cache) = model.forward(&batch, model.all_heads())?;
            let mut dlogits = Matrix::zeros(logits.rows(), logits.cols());
            for i in terms {
                let term = &self.terms[i];
                let (l, mut g) = term_loss(term, &logits, idx)?;
                per_term[i] = l;
                loss += term.weight * l;
                g.scale(term.weight);
                dlogits.add_columns(term.span.start, &g);
            }
            let grads = model.backward(&cache, &dlogits, scope == UpdateScope::HeadsOnly)?;
            total.add_scaled(&grads, 1.0);
        }
        Ok((loss, total, per_term))
    }
}

/// Cycles through a shuffled pool, reshuffling at every wrap.
struct BatchCursor {
    perm: Vec<usize>,
    pos: usize,
}

impl BatchCursor {
    fn new(len: usize) -> Self {
        Self { perm: (0..len).collect(), pos: len }
    }

    fn next(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let size = size.min(self.perm.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.perm.len() {
                self.perm.shuffle(rng);
                self.pos = 0;
            }
            let take = (size - out.len()).min(self.perm.len() - self.pos);
            out.extend_from_slice(&self.perm[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

/// One optimization phase.
#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    pub epochs: usize,
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub scope: UpdateScope,
}

impl Phase {
    fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.decay.powi(drops as i32)
    }
}

/// Mean per-epoch loss of each term during one phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermTrace {
    pub phase: String,
    pub term: String,
    pub per_epoch: Vec<f64>,
}

/// Runs SGD on `objective`; returns the per-term loss traces.
pub fn optimize(
    model: &mut Model,
    objective: &Objective,
    phase: &Phase,
    settings: &TrainSettings,
    label: &str,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TermTrace>> {
    objective.check(model)?;
    let mut traces: Vec<TermTrace> = objective
        .terms
        .iter()
        .map(|t| TermTrace { phase: label.into(), term: t.name.clone(), per_epoch: Vec::with_capacity(phase.epochs) })
        .collect();
    let active: Vec<bool> = (0..objective.pools.len())
        .map(|p| objective.pools[p].rows() > 0 && objective.terms.iter().any(|t| t.pool == p))
        .collect();
    let largest = (0..objective.pools.len()).filter(|&p| active[p]).map(|p| objective.pools[p].rows()).max();
    let Some(largest) = largest else { return Ok(traces) };
    let steps = largest.div_ceil(settings.batch_size);
    let mut cursors: Vec<BatchCursor> = objective.pools.iter().map(|p| BatchCursor::new(p.rows())).collect();
    let mut opt = OptimizerState::new(model, SgdConfig { lr: phase.lr, ..settings.sgd });
    for epoch in 0..phase.epochs {
        opt.set_lr(phase.lr_at(epoch));
        let mut sums = vec![0.0; objective.terms.len()];
        for _ in 0..steps {
            let rows: Vec<Vec<usize>> = cursors
                .iter_mut()
                .enumerate()
                .map(|(p, c)| if active[p] { c.next(settings.batch_size, rng) } else { Vec::new() })
                .collect();
            let (_, grads, per_term) = objective.loss_and_gradient(model, &rows, phase.scope)?;
            opt.step(model, &grads, phase.scope)?;
            for (s, l) in sums.iter_mut().zip(per_term) {
                *s += l;
            }
        }
        for (t, s) in traces.iter_mut().zip(sums) {
            t.per_epoch.push(s / steps as f64);
        }
    }
    Ok(traces)
}

fn full_phase(settings: &TrainSettings) -> Phase {
    let s = &settings.schedule;
    Phase { epochs: s.epochs, lr: settings.sgd.lr, milestones: s.milestones.clone(), decay: s.lr_decay, scope: UpdateScope::All }
}

/// Fresh single-head model trained on the current task with cross-entropy,
/// plus (when `confidence` is set) the confidence loss on the coreset and
/// external inputs, which pushes predictions off the task towards uniform.
pub fn train_current_teacher(
    d_t: &LabeledSet,
    class_offset: usize,
    num_classes: usize,
    cnf_pool: &Matrix,
    confidence: bool,
    settings: &TrainSettings,
    rng: &mut ChaCha8Rng,
) -> Result<(Model, Vec<TermTrace>)> {
    if d_t.is_empty() {
        return Err(Error::invalid("current task has no training data"));
    }
    let mut model = Model::new(d_t.dim(), &settings.hidden, rng);
    model.add_head(num_classes, rng)?;
    let local: Vec<usize> = d_t
        .labels
        .iter()
        .map(|&y| {
            y.checked_sub(class_offset)
                .filter(|&l| l < num_classes)
                .ok_or_else(|| Error::invalid(format!("label {y} is not in the current task")))
        })
        .collect::<Result<_>>()?;
    let mut objective = Objective {
        pools: vec![d_t.inputs.clone()],
        terms: vec![BoundTerm {
            name: "cls".into(),
            pool: 0,
            span: 0..num_classes,
            target: Target::Labels(local),
            gamma: 1.0,
            weight: 1.0,
            example_weights: None,
        }],
    };
    if confidence && cnf_pool.rows() > 0 {
        objective.pools.push(cnf_pool.clone());
        objective.terms.push(BoundTerm {
            name: "cnf".into(),
            pool: 1,
            span: 0..num_classes,
            target: Target::Uniform,
            gamma: 1.0,
            weight: settings.confidence_weight,
            example_weights: None,
        });
    }
    let traces = optimize(&mut model, &objective, &full_phase(settings), settings, "teacher", rng)?;
    Ok((model, traces))
}

/// Frozen models a stage distills from.
#[derive(Debug, Clone, Copy)]
pub struct References<'a> {
    pub previous: &'a Model,
    pub current: Option<&'a Model>,
}

const POOL_TRAIN: usize = 0;
const POOL_UNION: usize = 1;
const POOL_EXTERNAL: usize = 2;

fn pool_of(role: DataRole) -> usize {
    match role {
        DataRole::Train => POOL_TRAIN,
        DataRole::Union => POOL_UNION,
        DataRole::External => POOL_EXTERNAL,
    }
}

/// Loss terms a method optimizes at a stage after the first.
pub fn method_terms(variant: &MethodVariant, task_sizes: &[usize], stage: usize, temps: Temperatures) -> Vec<LossTerm> {
    match variant.method {
        Method::Oracle | Method::Baseline => global_terms(task_sizes, stage, ReferenceSet::NONE, temps),
        Method::Lwf => local_terms(task_sizes, stage, false, temps),
        Method::Dr => local_terms(task_sizes, stage, true, temps),
        Method::Gd => global_terms(task_sizes, stage, variant.references, temps),
    }
}

fn term_name(kind: TermKind) -> String {
    match kind {
        TermKind::Cls => "cls".into(),
        TermKind::Cnf => "cnf".into(),
        TermKind::Dst(Teacher::Previous) => "dst:P".into(),
        TermKind::Dst(Teacher::PreviousLocal(s)) => format!("dst:P[{s}]"),
        TermKind::Dst(Teacher::Current) => "dst:C".into(),
        TermKind::Dst(Teacher::Ensemble) => "dst:Q".into(),
    }
}

/// Weights from the class counts of each row's hard label, normalized over
/// the classes that occur.
fn weights_from_labels(labels: &[usize]) -> Result<Vec<f64>> {
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    data_weights(labels, &classes)?.per_example(labels)
}

/// Binds `terms` to the training set, the external inputs and the references.
/// With `weighted`, classification terms carry per-example data weights from
/// the true labels, and distillation terms too (from the teacher's argmax)
/// when `settings.weight_soft_targets` is set.
pub fn bind_objective(
    terms: &[LossTerm],
    model: &Model,
    refs: References<'_>,
    d_trn: &LabeledSet,
    d_ext: &Matrix,
    settings: &TrainSettings,
    weighted: bool,
) -> Result<Objective> {
    let union = Matrix::vstack(&d_trn.inputs, d_ext)?;
    let pools = vec![d_trn.inputs.clone(), union, d_ext.clone()];
    let prev_heads = refs.previous.all_heads();
    let mut bound = Vec::with_capacity(terms.len());
    for term in terms {
        let pool = pool_of(term.role);
        let inputs = &pools[pool];
        let span = model.class_span(term.heads);
        let target = match term.kind {
            TermKind::Cls => {
                if pool != POOL_TRAIN {
                    return Err(Error::InvalidConfig("classification needs labeled data".into()));
                }
                Target::Labels(d_trn.labels.clone())
            }
            TermKind::Cnf => Target::Uniform,
            _ if inputs.rows() == 0 => Target::Soft(Matrix::zeros(0, span.len())),
            TermKind::Dst(Teacher::Previous) => {
                if term.heads != prev_heads {
                    return Err(Error::InvalidConfig("previous-model term must span the previous heads".into()));
                }
                Target::Soft(softmax_rows(&refs.previous.logits(inputs, prev_heads)?, term.gamma))
            }
            TermKind::Dst(Teacher::PreviousLocal(s)) => {
                Target::Soft(softmax_rows(&refs.previous.logits(inputs, HeadRange::single(s))?, term.gamma))
            }
            TermKind::Dst(Teacher::Current) => {
                let c = refs.current.ok_or_else(|| Error::InvalidConfig("term needs the current-task teacher".into()))?;
                if c.num_classes() != span.len() {
                    return Err(Error::InvalidConfig("current-task teacher does not match the new head".into()));
                }
                Target::Soft(softmax_rows(&c.logits(inputs, c.all_heads())?, term.gamma))
            }
            TermKind::Dst(Teacher::Ensemble) => {
                let c = refs.current.ok_or_else(|| Error::InvalidConfig("ensemble needs the current-task teacher".into()))?;
                let temp = settings.ensemble_input_temperature;
                let p = softmax_rows(&refs.previous.logits(inputs, prev_heads)?, temp);
                let q = softmax_rows(&c.logits(inputs, c.all_heads())?, temp);
                let ens = q_predict_rows(&p, &q)?;
                if ens.cols() != span.len() {
                    return Err(Error::InvalidConfig("ensemble width does not match the model".into()));
                }
                Target::Soft(ens)
            }
        };
        let example_weights = match (&target, weighted) {
            (_, false) => None,
            (Target::Labels(labels), true) => {
                let classes: Vec<usize> = span.clone().collect();
                Some(data_weights(labels, &classes)?.per_example(labels)?)
            }
            (Target::Soft(q), true) if q.rows() > 0 && settings.weight_soft_targets => {
                let hard: Vec<usize> = q.iter_rows().map(|r| span.start + argmax(r)).collect();
                Some(weights_from_labels(&hard)?)
            }
            _ => None,
        };
        bound.push(BoundTerm {
            name: term_name(term.kind),
            pool,
            span,
            target,
            gamma: term.gamma,
            weight: term.weight,
            example_weights,
        });
    }
    Ok(Objective { pools, terms: bound })
}

/// Main training of `model` (already grown to the stage's heads) against the references.
#[allow(clippy::too_many_arguments)]
pub fn train_main(
    model: &mut Model,
    refs: References<'_>,
    d_trn: &LabeledSet,
    d_ext: &Matrix,
    variant: &MethodVariant,
    task_sizes: &[usize],
    stage: usize,
    settings: &TrainSettings,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TermTrace>> {
    if model.num_heads() != stage + 1 || refs.previous.num_heads() != stage {
        return Err(Error::InvalidConfig("model heads do not match the stage".into()));
    }
    let terms = method_terms(variant, task_sizes, stage, settings.temps);
    let weighted = variant.balancing == Balancing::Dw;
    let objective = bind_objective(&terms, model, refs, d_trn, d_ext, settings, weighted)?;
    let s = &settings.schedule;
    let phase = match variant.balancing {
        Balancing::FtDw | Balancing::FtDset => Phase {
            epochs: s.main_epochs_with_ft,
            lr: settings.sgd.lr,
            milestones: s.main_milestones_with_ft.clone(),
            decay: s.lr_decay,
            scope: UpdateScope::All,
        },
        _ => full_phase(settings),
    };
    optimize(model, &objective, &phase, settings, "main", rng)
}

/// Undersamples every class of `d_trn` to the smallest class count.
pub fn balanced_subset(d_trn: &LabeledSet, rng: &mut ChaCha8Rng) -> LabeledSet {
    let by_class = d_trn.indices_by_class();
    let n = by_class.values().map(Vec::len).min().unwrap_or(0);
    let mut picked = Vec::new();
    for pool in by_class.values() {
        let mut chosen: Vec<usize> = rand::seq::index::sample(rng, pool.len(), n).into_iter().map(|j| pool[j]).collect();
        chosen.sort_unstable();
        picked.extend(chosen);
    }
    d_trn.select(&picked)
}

/// Removes the bias towards the current task after main training.
#[allow(clippy::too_many_arguments)]
pub fn balanced_finetune(
    model: &mut Model,
    refs: References<'_>,
    d_trn: &LabeledSet,
    d_ext: &Matrix,
    variant: &MethodVariant,
    task_sizes: &[usize],
    stage: usize,
    settings: &TrainSettings,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TermTrace>> {
    let s = &settings.schedule;
    let terms = method_terms(variant, task_sizes, stage, settings.temps);
    let (objective, scope) = match variant.balancing {
        Balancing::None | Balancing::Dw => return Ok(Vec::new()),
        Balancing::FtDw => (bind_objective(&terms, model, refs, d_trn, d_ext, settings, true)?, UpdateScope::HeadsOnly),
        Balancing::FtDset => {
            let balanced = balanced_subset(d_trn, rng);
            (bind_objective(&terms, model, refs, &balanced, d_ext, settings, false)?, UpdateScope::All)
        }
    };
    let phase = Phase { epochs: s.ft_epochs, lr: s.ft_lr, milestones: s.ft_milestones.clone(), decay: s.lr_decay, scope };
    optimize(model, &objective, &phase, settings, "finetune", rng)
}

/// Size summary of the external set used by a stage; the set itself is dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ExternalSummary {
    pub ood: usize,
    pub prev: usize,
    pub retrieved: usize,
    pub truncated: bool,
}

#[derive(Debug, Clone)]
pub struct StageResult {
    pub model: Model,
    pub coreset: Coreset,
    /// Current-task teacher, when one was trained.
    pub teacher: Option<Model>,
    pub traces: Vec<TermTrace>,
    pub external: ExternalSummary,
    pub wall_time: Duration,
}

/// Inputs of one stage.
#[derive(Debug, Clone, Copy)]
pub struct StageInput<'a> {
    pub stage: usize,
    pub task_sizes: &'a [usize],
    pub train: &'a LabeledSet,
    /// All earlier training data, replayed by [`Method::Oracle`].
    pub history: Option<&'a LabeledSet>,
}

/// One full stage: sample, teacher, main training, fine-tuning, coreset.
/// At the first stage the model is the current-task teacher itself.
pub fn run_stage(
    prev: Option<&StageResult>,
    input: StageInput<'_>,
    stream: &mut dyn UnlabeledStream,
    variant: &MethodVariant,
    settings: &TrainSettings,
    rng: &mut ChaCha8Rng,
) -> Result<StageResult> {
    let started = Instant::now();
    let t = input.stage;
    if (t == 0) != prev.is_none() {
        return Err(Error::Contract("a previous stage is required exactly when t > 0".into()));
    }
    let dim = input.train.dim();
    let seen: usize = input.task_sizes[..=t].iter().sum();
    let offset = seen - input.task_sizes[t];
    let empty_coreset = Coreset::empty(dim, settings.coreset_size);
    let coreset = prev.map_or(&empty_coreset, |p| &p.coreset);

    let d_trn = match (variant.method, input.history) {
        (Method::Oracle, Some(h)) => h.concat(input.train)?,
        _ => input.train.concat(&coreset.set)?,
    };

    let mut external = ExternalSummary::default();
    let d_ext = if variant.uses_external() {
        let ratio = match (t, variant.sampling) {
            (0, _) | (_, Sampling::RandomOnly) => 1.0,
            (_, Sampling::PredOnly) => 0.0,
            _ => settings.ood_ratio,
        };
        let n_d = settings.external_size.unwrap_or(d_trn.len());
        let cfg = SamplerConfig { n_d, n_max: settings.n_max.max(n_d), ood_ratio: ratio };
        let ext = sample_external(prev.map(|p| &p.model), stream, cfg)?;
        external = ExternalSummary { ood: ext.ood_bucket.len(), prev: ext.prev_len(), retrieved: ext.retrieved, truncated: ext.truncated };
        ext.flatten(dim)
    } else {
        Matrix::zeros(0, dim)
    };

    let mut traces = Vec::new();
    let teacher = if t == 0 || variant.needs_current_teacher() {
        let cnf_pool = Matrix::vstack(&coreset.set.inputs, &d_ext)?;
        let (c, tr) =
            train_current_teacher(input.train, offset, input.task_sizes[t], &cnf_pool, variant.confidence, settings, rng)?;
        traces.extend(tr);
        Some(c)
    } else {
        None
    };

    let model = match prev {
        None => teacher.clone().expect("first stage trains a teacher"),
        Some(p) => {
            let mut m = p.model.clone();
            m.add_head(input.task_sizes[t], rng)?;
            let refs = References { previous: &p.model, current: teacher.as_ref() };
            traces.extend(train_main(&mut m, refs, &d_trn, &d_ext, variant, input.task_sizes, t, settings, rng)?);
            traces.extend(balanced_finetune(&mut m, refs, &d_trn, &d_ext, variant, input.task_sizes, t, settings, rng)?);
            m
        }
    };

    let classes: Vec<usize> = (0..seen).collect();
    let coreset = update_coreset(&d_trn, settings.coreset_size, &classes, rng);
    Ok(StageResult { model, coreset, teacher, traces, external, wall_time: started.elapsed() })
}

/// Per-stage diagnostics kept after a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: usize,
    pub accuracies: Vec<f64>,
    pub external: ExternalSummary,
    pub traces: Vec<TermTrace>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub matrix: AccuracyMatrix,
    pub stages: Vec<StageLog>,
    pub final_model: Model,
    pub wall_time: Duration,
}

/// Runs every task of `bench` in order and evaluates each stage's model on
/// the test sets of all tasks seen so far, predicting over all heads.
pub fn run_sequence(
    bench: &Benchmark,
    tasks: &[TaskData],
    variant: &MethodVariant,
    settings: &TrainSettings,
    seed: u64,
) -> Result<RunOutcome> {
    let task_sizes = bench.layout.task_sizes();
    let tests: Vec<&Matrix> = tasks.iter().map(|t| &t.test.inputs).collect();
    let mut matrix = AccuracyMatrix::new(task_sizes.clone());
    let mut stages = Vec::with_capacity(tasks.len());
    let mut prev: Option<StageResult> = None;
    let mut history: Option<LabeledSet> = None;
    let mut wall = Duration::ZERO;
    for (t, task) in tasks.iter().enumerate() {
        let seen_before = task_sizes[..t].iter().sum::<usize>();
        let mut stream = bench.stream(0..seen_before, &tests, crate::taskgen::sub_seed(seed, 500 + t as u64));
        let mut rng = rng_for(seed, 1000 + t as u64);
        let input = StageInput { stage: t, task_sizes: &task_sizes, train: &task.train, history: history.as_ref() };
        let result = run_stage(prev.as_ref(), input, &mut stream, variant, settings, &mut rng)?;
        wall += result.wall_time;
        let accuracies = tasks[..=t].iter().map(|r| task_accuracy(&result.model, &r.test)).collect::<Result<Vec<_>>>()?;
        matrix.push_stage(accuracies.clone())?;
        stages.push(StageLog { stage: t, accuracies, external: result.external, traces: result.traces.clone() });
        if variant.method == Method::Oracle {
            history = Some(match history {
                Some(h) => h.concat(&task.train)?,
                None => task.train.clone(),
            });
        }
        prev = Some(result);
    }
    let final_model = prev.map(|p| p.model).ok_or_else(|| Error::invalid("no tasks"))?;
    Ok(RunOutcome { matrix, stages, final_model, wall_time: wall })
}

/// Mean over rows of the largest softmax probability.
pub fn mean_max_probability(model: &Model, inputs: &Matrix) -> Result<f64> {
    let p = softmax_rows(&model.logits(inputs, model.all_heads())?, 1.0);
    Ok(p.iter_rows().map(|r| r.iter().copied().fold(0.0, f64::max)).sum::<f64>() / p.rows() as f64)
}

/// Draws a random `ChaCha8Rng` seed for callers that need one more stream.
pub fn fork_rng(rng: &mut ChaCha8Rng) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(rng.gen())
}
