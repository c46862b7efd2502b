//! Flat key-value (TOML) configuration files. Every key has a default and
//! unknown keys are rejected.
//!
//! Experiment keys:
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `train_path`, `val_path`, `test_path` | unset | feature files; when `train_path` is unset a synthetic task is generated |
//! | `classes`, `n_max`, `n_min`, `decay`, `dim`, `class_separation`, `val_per_class`, `test_per_class` | 50, 500, 5, `exponential`, 64, 4.0, 20, 20 | synthetic task |
//! | `data_seed` | 0 | base seed of the synthetic task, combined with each run seed |
//! | `many_threshold`, `few_threshold` | 100, 20 | split thresholds |
//! | `epochs`, `batch_size`, `lr0`, `momentum`, `weight_decay` | 90, 64, 0.2, 0.9, 5e-4 | joint (first stage) recipe |
//! | `loss`, `focal_gamma`, `cb_beta`, `ldam_max_margin` | `ce`, 2.0, 0 (off; 0.999 is the usual choice), 0.5 | joint loss |
//! | `backbone_hidden` | 0 | width of a trainable ReLU layer in front of the joint classifier (0 = identity) |
//! | `stage2_epochs`, `stage2_lr0` | 10, 0.2 | cRT and LWS recipe |
//! | `learn_tau_epochs`, `learn_tau_lr`, `learn_tau_init` | 5, 0.01, 0.5 | learned tau |
//! | `samplers` | all four | joint samplers: `instance`, `class`, `sqrt`, `progressive` |
//! | `methods` | all six | `joint`, `crt`, `ncm`, `tau`, `lws`, `learn_tau` |
//! | `ncm_metric` | `cosine` | `cosine` or `euclidean_l2norm` |
//! | `tau_grid` | `0:1:0.05` | grid for tau selection |
//! | `sweep_grid` | `0:1:0.1` | grid for the tau-sweep diagnostic |
//! | `seeds` | `[0, 1, 2, 3, 4]` | replication seeds |
//! | `output_dir` | `runs/default` | artifact directory |
//! | `threads` | 0 | worker threads (0 = all cores) |

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::balancing::{LearnTauConfig, NcmMetric};
use crate::data::{Decay, SyntheticSpec, FEW_THRESHOLD, MANY_THRESHOLD};
use crate::error::{invalid, Error, Result};
use crate::harness::diagnostics::parse_grid;
use crate::losses::{LossKind, LossSpec};
use crate::sampling::{SamplerKind, SamplingStrategy};
use crate::training::{Freeze, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Joint,
    Crt,
    Ncm,
    Tau,
    Lws,
    LearnTau,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Joint,
        Method::Crt,
        Method::Ncm,
        Method::Tau,
        Method::Lws,
        Method::LearnTau,
    ];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Joint => "joint",
            Method::Crt => "crt",
            Method::Ncm => "ncm",
            Method::Tau => "tau",
            Method::Lws => "lws",
            Method::LearnTau => "learn_tau",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.to_string() == s.replace('-', "_"))
            .ok_or_else(|| invalid("method", format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_path: Option<PathBuf>,

    pub classes: usize,
    pub n_max: usize,
    pub n_min: usize,
    pub decay: Decay,
    pub dim: usize,
    pub class_separation: f64,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub data_seed: u64,

    pub many_threshold: usize,
    pub few_threshold: usize,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss: LossKind,
    pub focal_gamma: f64,
    pub cb_beta: f64,
    pub ldam_max_margin: f64,
    pub backbone_hidden: usize,

    pub stage2_epochs: usize,
    pub stage2_lr0: f64,

    pub learn_tau_epochs: usize,
    pub learn_tau_lr: f64,
    pub learn_tau_init: f64,

    pub samplers: Vec<SamplerKind>,
    pub methods: Vec<Method>,
    pub ncm_metric: NcmMetric,
    pub tau_grid: String,
    pub sweep_grid: String,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let spec = SyntheticSpec::default();
        let train = TrainConfig::default();
        let loss = LossSpec::default();
        let tau = LearnTauConfig::default();
        Self {
            train_path: None,
            val_path: None,
            test_path: None,
            classes: spec.classes,
            n_max: spec.n_max,
            n_min: spec.n_min,
            decay: spec.decay,
            dim: spec.dim,
            class_separation: spec.class_separation,
            val_per_class: spec.val_per_class,
            test_per_class: spec.test_per_class,
            data_seed: spec.seed,
            many_threshold: MANY_THRESHOLD,
            few_threshold: FEW_THRESHOLD,
            epochs: train.epochs,
            batch_size: train.batch_size,
            lr0: train.lr0,
            momentum: train.momentum,
            weight_decay: train.weight_decay,
            loss: loss.kind,
            focal_gamma: loss.gamma,
            cb_beta: loss.beta,
            ldam_max_margin: loss.max_margin,
            backbone_hidden: 0,
            stage2_epochs: 10,
            stage2_lr0: train.lr0,
            learn_tau_epochs: tau.epochs,
            learn_tau_lr: tau.lr0,
            learn_tau_init: tau.init,
            samplers: SamplerKind::ALL.to_vec(),
            methods: Method::ALL.to_vec(),
            ncm_metric: NcmMetric::Cosine,
            tau_grid: "0:1:0.05".into(),
            sweep_grid: "0:1:0.1".into(),
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: PathBuf::from("runs/default"),
            threads: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::from_toml(&fs::read_to_string(path)?)?;
        // Relative data paths resolve against the config file's directory.
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.train_path, &mut cfg.val_path, &mut cfg.test_path]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.samplers.is_empty() {
            return Err(Error::Config("at least one sampler is required".into()));
        }
        if self.train_path.is_some() && self.test_path.is_none() {
            return Err(Error::Config("train_path requires test_path".into()));
        }
        if self.train_path.is_none() {
            self.synthetic(0).validate()?;
        }
        if self.few_threshold < 1 || self.many_threshold < self.few_threshold {
            return Err(Error::Config(
                "need many_threshold >= few_threshold >= 1".into(),
            ));
        }
        parse_grid(&self.tau_grid)?;
        parse_grid(&self.sweep_grid)?;
        self.stage_one(SamplerKind::Instance, 0).validate()?;
        self.stage_two(0).validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }

    /// Synthetic task for one replication seed.
    pub fn synthetic(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.classes,
            n_max: self.n_max,
            n_min: self.n_min,
            decay: self.decay,
            dim: self.dim,
            class_separation: self.class_separation,
            seed: crate::rng::derive_seed(self.data_seed, &[seed]),
            val_per_class: self.val_per_class,
            test_per_class: self.test_per_class,
        }
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec {
            kind: self.loss,
            gamma: self.focal_gamma,
            beta: self.cb_beta,
            max_margin: self.ldam_max_margin,
        }
    }

    pub fn stage_one(&self, sampler: SamplerKind, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr0: self.lr0,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            sampler: SamplingStrategy::from_kind(sampler, self.epochs),
            loss: self.loss_spec(),
            seed,
            freeze: Freeze::Nothing,
        }
    }

    pub fn stage_two(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.stage2_epochs,
            batch_size: self.batch_size,
            lr0: self.stage2_lr0,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            sampler: SamplingStrategy::ClassBalanced,
            loss: LossSpec::cross_entropy(),
            seed,
            freeze: Freeze::Nothing,
        }
    }

    pub fn learn_tau(&self, seed: u64) -> LearnTauConfig {
        LearnTauConfig {
            epochs: self.learn_tau_epochs,
            batch_size: self.batch_size,
            lr0: self.learn_tau_lr,
            init: self.learn_tau_init,
            seed,
        }
    }

    pub fn tau_grid(&self) -> Vec<f64> {
        parse_grid(&self.tau_grid).unwrap_or_default()
    }

    pub fn sweep_grid(&self) -> Vec<f64> {
        parse_grid(&self.sweep_grid).unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeKey {
    #[default]
    Nothing,
    AllButScales,
    AllButClassifier,
}

/// Keys of a single training run (`longtail train --config`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainFileConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub sampler: SamplerKind,
    /// Progressive schedule length; defaults to `epochs`.
    pub total_epochs: Option<usize>,
    pub loss: LossKind,
    pub focal_gamma: f64,
    pub cb_beta: f64,
    pub ldam_max_margin: f64,
    pub seed: u64,
    pub freeze: FreezeKey,
    /// Hidden layer widths of an MLP head; empty for a linear head.
    pub hidden: Vec<usize>,
}

impl Default for TrainFileConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let l = LossSpec::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr0: t.lr0,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            sampler: SamplerKind::Instance,
            total_epochs: None,
            loss: l.kind,
            focal_gamma: l.gamma,
            cb_beta: l.beta,
            ldam_max_margin: l.max_margin,
            seed: 0,
            freeze: FreezeKey::Nothing,
            hidden: Vec::new(),
        }
    }
}

impl TrainFileConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr0: self.lr0,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            sampler: SamplingStrategy::from_kind(
                self.sampler,
                self.total_epochs.unwrap_or(self.epochs),
            ),
            loss: LossSpec {
                kind: self.loss,
                gamma: self.focal_gamma,
                beta: self.cb_beta,
                max_margin: self.ldam_max_margin,
            },
            seed: self.seed,
            freeze: match self.freeze {
                FreezeKey::Nothing => Freeze::Nothing,
                FreezeKey::AllButScales => Freeze::AllButScales,
                FreezeKey::AllButClassifier => Freeze::AllButClassifier,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.tau_grid().len(), 21);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = ExperimentConfig::from_toml("epochz = 3\n").unwrap_err();
        assert!(e.to_string().contains("epochz"), "{e}");
        assert!(TrainFileConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn parses_lists_and_enums() {
        let cfg = ExperimentConfig::from_toml(
            "samplers = [\"instance\", \"progressive\"]\nmethods = [\"joint\", \"learn_tau\"]\nseeds = [7]\nloss = \"focal\"\ndecay = \"power-law\"\n",
        )
        .unwrap();
        assert_eq!(cfg.samplers, vec![SamplerKind::Instance, SamplerKind::Progressive]);
        assert_eq!(cfg.methods, vec![Method::Joint, Method::LearnTau]);
        assert_eq!(cfg.loss, LossKind::Focal);
        assert_eq!(cfg.decay, Decay::PowerLaw);
        assert_eq!(
            cfg.stage_one(SamplerKind::Progressive, 1).sampler,
            SamplingStrategy::Progressive { total_epochs: 90 }
        );
    }

    #[test]
    fn invalid_values_are_rejected() {
        for text in [
            "methods = []",
            "seeds = []",
            "tau_grid = \"1:0:0.1\"",
            "momentum = 1.5",
            "n_min = 0",
            "cb_beta = 1.0",
            "train_path = \"x.txt\"",
        ] {
            assert!(ExperimentConfig::from_toml(text).is_err(), "{text}");
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig {
            seeds: vec![3, 4],
            ..Default::default()
        };
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn train_file_progressive_defaults_to_epochs() {
        let t = TrainFileConfig::from_toml("sampler = \"progressive\"\nepochs = 7\nhidden = [16]\n").unwrap();
        assert_eq!(
            t.train_config().sampler,
            SamplingStrategy::Progressive { total_epochs: 7 }
        );
        assert_eq!(t.hidden, vec![16]);
        assert_eq!("learn-tau".parse::<Method>().unwrap(), Method::LearnTau);
    }
}
