//! Experiment configuration, read from TOML. Every key is optional; unknown
//! keys are rejected with their dotted path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{ReferenceSet, Temperatures};
use crate::nnet::SgdConfig;
use crate::taskgen::BenchmarkSpec;
use crate::trainer::{Balancing, Method, MethodVariant, Sampling, Schedule, TrainSettings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    /// Output directory; the `GDISTILL_OUTPUT` environment variable takes precedence in the CLI.
    pub output_dir: String,
    pub benchmark: BenchmarkSpec,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub distill: DistillConfig,
    pub sampling: SamplingConfig,
    pub coreset: CoresetConfig,
    pub variants: Vec<VariantConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

/// Full-length schedule; every epoch count and milestone is divided by
/// `divisor` (rounded, epochs at least 1) before use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub divisor: usize,
    pub epochs: usize,
    pub milestones: Vec<usize>,
    pub main_epochs_with_ft: usize,
    pub main_milestones_with_ft: Vec<usize>,
    pub ft_epochs: usize,
    pub ft_lr: f64,
    pub ft_milestones: Vec<usize>,
    pub lr_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub gamma_previous: f64,
    pub gamma_current: f64,
    pub gamma_ensemble: f64,
    /// Temperature of the two model outputs combined into the ensemble target.
    pub ensemble_input_temperature: f64,
    pub confidence_weight: f64,
    /// Data-weight distillation terms by the teacher's argmax class counts,
    /// not just the classification term.
    pub weight_soft_targets: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub ood_ratio: f64,
    pub n_max: usize,
    /// 0 means "same size as the stage's training set".
    pub external_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoresetConfig {
    /// Full-scale size; divided by `schedule.divisor` like the epochs.
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariantConfig {
    pub name: String,
    pub method: Method,
    /// Subset of `"P"`, `"C"`, `"Q"`; read by the `gd` method only.
    pub references: Vec<String>,
    pub balancing: Balancing,
    pub sampling: Sampling,
    pub confidence: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64] }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr: 0.1, momentum: 0.9, weight_decay: 0.0005, batch_size: 128 }
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            divisor: 10,
            epochs: 200,
            milestones: vec![120, 160, 180],
            main_epochs_with_ft: 180,
            main_milestones_with_ft: vec![120, 160, 170],
            ft_epochs: 20,
            ft_lr: 0.01,
            ft_milestones: vec![10, 15],
            lr_decay: 0.1,
        }
    }
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            gamma_previous: 2.0,
            gamma_current: 2.0,
            gamma_ensemble: 1.0,
            ensemble_input_temperature: 1.0,
            confidence_weight: 1.0,
            weight_soft_targets: false,
        }
    }
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { ood_ratio: 0.7, n_max: 60_000, external_size: 0 }
    }
}

impl Default for CoresetConfig {
    fn default() -> Self {
        Self { size: 2000 }
    }
}

impl Default for VariantConfig {
    fn default() -> Self {
        Self::gd("gd-ext", &["P", "C", "Q"], Balancing::FtDw, Sampling::Combined, true)
    }
}

impl VariantConfig {
    pub fn gd(name: &str, refs: &[&str], balancing: Balancing, sampling: Sampling, confidence: bool) -> Self {
        Self {
            name: name.into(),
            method: Method::Gd,
            references: refs.iter().map(|s| s.to_string()).collect(),
            balancing,
            sampling,
            confidence,
        }
    }

    pub fn plain(name: &str, method: Method, balancing: Balancing) -> Self {
        Self {
            name: name.into(),
            method,
            references: Vec::new(),
            balancing,
            sampling: Sampling::None,
            confidence: false,
        }
    }

    fn reference_set(&self, key: &str) -> Result<ReferenceSet> {
        let mut set = ReferenceSet::NONE;
        for r in &self.references {
            let slot = match r.as_str() {
                "P" => &mut set.previous,
                "C" => &mut set.current,
                "Q" => &mut set.ensemble,
                _ => return Err(key_error(key, format!("unknown reference `{r}` (expected P, C or Q)"))),
            };
            if std::mem::replace(slot, true) {
                return Err(key_error(key, format!("reference `{r}` listed twice")));
            }
        }
        Ok(set)
    }

    pub fn resolve(&self, index: usize) -> Result<MethodVariant> {
        let key = format!("variants[{index}].references");
        let references = self.reference_set(&key)?;
        if self.method == Method::Gd && references == ReferenceSet::NONE {
            return Err(key_error(&key, "gd needs at least one reference".into()));
        }
        Ok(MethodVariant {
            name: self.name.clone(),
            method: self.method,
            references,
            balancing: self.balancing,
            sampling: self.sampling,
            confidence: self.confidence,
        })
    }
}

/// Baseline, GD without external data, and GD with it.
pub fn default_variants() -> Vec<VariantConfig> {
    vec![
        VariantConfig::plain("baseline", Method::Baseline, Balancing::None),
        VariantConfig::gd("gd", &["P", "C", "Q"], Balancing::FtDw, Sampling::None, true),
        VariantConfig::default(),
    ]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: (0..10).collect(),
            output_dir: "results".into(),
            benchmark: BenchmarkSpec::default(),
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            distill: DistillConfig::default(),
            sampling: SamplingConfig::default(),
            coreset: CoresetConfig::default(),
            variants: default_variants(),
        }
    }
}

fn key_error(key: &str, message: String) -> Error {
    Error::ConfigKey { key: key.into(), message }
}

fn scaled(v: usize, divisor: usize) -> usize {
    (v + divisor / 2) / divisor
}

/// Parses and validates a TOML document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = toml::Deserializer::new(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        let message = e.inner().message().to_string();
        if key == "." {
            Error::InvalidConfig(message)
        } else {
            key_error(&key, message)
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.benchmark.validate()?;
        let positive = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(key_error(key, format!("must be positive, got {v}")))
            }
        };
        if self.seeds.is_empty() {
            return Err(key_error("seeds", "at least one seed is required".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(key_error("seeds", "seeds must be distinct".into()));
        }
        if self.model.hidden.contains(&0) {
            return Err(key_error("model.hidden", "layer widths must be positive".into()));
        }
        positive("optimizer.lr", self.optimizer.lr)?;
        if !(0.0..1.0).contains(&self.optimizer.momentum) {
            return Err(key_error("optimizer.momentum", "must lie in [0, 1)".into()));
        }
        if !(self.optimizer.weight_decay >= 0.0 && self.optimizer.weight_decay.is_finite()) {
            return Err(key_error("optimizer.weight_decay", "must be non-negative".into()));
        }
        if self.optimizer.batch_size == 0 {
            return Err(key_error("optimizer.batch_size", "must be positive".into()));
        }
        let s = &self.schedule;
        if s.divisor == 0 {
            return Err(key_error("schedule.divisor", "must be positive".into()));
        }
        if s.epochs == 0 || s.main_epochs_with_ft == 0 {
            return Err(key_error("schedule.epochs", "must be positive".into()));
        }
        for (key, m) in [
            ("schedule.milestones", &s.milestones),
            ("schedule.main_milestones_with_ft", &s.main_milestones_with_ft),
            ("schedule.ft_milestones", &s.ft_milestones),
        ] {
            if m.windows(2).any(|w| w[0] >= w[1]) {
                return Err(key_error(key, "milestones must be strictly increasing".into()));
            }
        }
        positive("schedule.ft_lr", s.ft_lr)?;
        positive("schedule.lr_decay", s.lr_decay)?;
        let d = &self.distill;
        positive("distill.gamma_previous", d.gamma_previous)?;
        positive("distill.gamma_current", d.gamma_current)?;
        positive("distill.gamma_ensemble", d.gamma_ensemble)?;
        positive("distill.ensemble_input_temperature", d.ensemble_input_temperature)?;
        if !(d.confidence_weight >= 0.0 && d.confidence_weight.is_finite()) {
            return Err(key_error("distill.confidence_weight", "must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.sampling.ood_ratio) {
            return Err(key_error("sampling.ood_ratio", format!("must lie in [0, 1], got {}", self.sampling.ood_ratio)));
        }
        if self.sampling.n_max == 0 {
            return Err(key_error("sampling.n_max", "must be positive".into()));
        }
        if self.variants.is_empty() {
            return Err(key_error("variants", "at least one variant is required".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for (i, v) in self.variants.iter().enumerate() {
            let bad_name = v.name.is_empty() || v.name.contains(['/', '\\']) || v.name.contains("__");
            if bad_name || !names.insert(v.name.as_str()) {
                return Err(key_error(&format!("variants[{i}].name"), format!("`{}` is empty, reused or not file-safe", v.name)));
            }
            v.resolve(i)?;
        }
        Ok(())
    }

    pub fn resolved_variants(&self) -> Result<Vec<MethodVariant>> {
        self.variants.iter().enumerate().map(|(i, v)| v.resolve(i)).collect()
    }

    /// Training settings with the schedule and coreset scaled down.
    pub fn train_settings(&self) -> TrainSettings {
        let s = &self.schedule;
        let div = s.divisor;
        let ms = |m: &[usize]| m.iter().map(|&v| scaled(v, div)).collect::<Vec<_>>();
        TrainSettings {
            hidden: self.model.hidden.clone(),
            sgd: SgdConfig { lr: self.optimizer.lr, momentum: self.optimizer.momentum, weight_decay: self.optimizer.weight_decay },
            batch_size: self.optimizer.batch_size,
            schedule: Schedule {
                epochs: scaled(s.epochs, div).max(1),
                milestones: ms(&s.milestones),
                main_epochs_with_ft: scaled(s.main_epochs_with_ft, div).max(1),
                main_milestones_with_ft: ms(&s.main_milestones_with_ft),
                ft_epochs: scaled(s.ft_epochs, div).max(1),
                ft_lr: s.ft_lr,
                ft_milestones: ms(&s.ft_milestones),
                lr_decay: s.lr_decay,
            },
            temps: Temperatures {
                previous: self.distill.gamma_previous,
                current: self.distill.gamma_current,
                ensemble: self.distill.gamma_ensemble,
            },
            ensemble_input_temperature: self.distill.ensemble_input_temperature,
            confidence_weight: self.distill.confidence_weight,
            weight_soft_targets: self.distill.weight_soft_targets,
            ood_ratio: self.sampling.ood_ratio,
            n_max: self.sampling.n_max,
            external_size: (self.sampling.external_size > 0).then_some(self.sampling.external_size),
            coreset_size: scaled(self.coreset.size, div),
        }
    }
}
