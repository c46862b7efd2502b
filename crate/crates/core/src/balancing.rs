//! Second-stage classifier balancing on frozen features: classifier
//! re-training (cRT), nearest class mean (NCM), tau-normalization with grid
//! selection or a learned tau, learnable weight scaling (LWS), and cosine
//! similarity prediction.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::harness::eval::class_correct;
use crate::head::{argmax, init_head, ClassifierHead, HeadKind, Prediction, Predictor};
use crate::losses::{softmax_xent, LossSpec};
use crate::rng;
use crate::sampling::{EpochSampler, SamplingStrategy};
use crate::training::{cosine_lr, train_head, Freeze, TrainConfig};

/// Classifier re-training: a freshly initialized linear head (zero bias)
/// trained with class-balanced sampling on the frozen features.
pub fn crt(train: &Dataset, config: &TrainConfig) -> Result<ClassifierHead> {
    let init = init_head(train.dim(), train.classes(), HeadKind::Linear, config.seed)?;
    let config = TrainConfig {
        sampler: SamplingStrategy::ClassBalanced,
        freeze: Freeze::Nothing,
        ..config.clone()
    };
    Ok(train_head(train, &config, Some(init))?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NcmMetric {
    #[default]
    Cosine,
    /// Euclidean distance to L2-normalized class means.
    EuclideanL2norm,
}

impl fmt::Display for NcmMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NcmMetric::Cosine => "cosine",
            NcmMetric::EuclideanL2norm => "euclidean_l2norm",
        })
    }
}

impl FromStr for NcmMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "euclidean_l2norm" | "euclidean" => Ok(Self::EuclideanL2norm),
            other => Err(invalid("metric", format!("unknown NCM metric {other:?}"))),
        }
    }
}

/// Nearest class mean classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct NcmClassifier {
    /// `d x C`; unit columns under `EuclideanL2norm`.
    pub means: Array2<f64>,
    pub metric: NcmMetric,
}

fn l2(v: ArrayView1<'_, f64>) -> f64 {
    v.dot(&v).sqrt()
}

pub fn ncm_fit(train: &Dataset, metric: NcmMetric) -> Result<NcmClassifier> {
    let (d, c) = (train.dim(), train.classes());
    let mut means = Array2::<f64>::zeros((d, c));
    let members = train.class_members();
    for (j, idx) in members.iter().enumerate() {
        if idx.is_empty() {
            return Err(Error::EmptyClass(j));
        }
        let mean = train
            .features()
            .select(Axis(0), idx)
            .mean_axis(Axis(0))
            .expect("non-empty class");
        means.column_mut(j).assign(&mean);
    }
    if metric == NcmMetric::EuclideanL2norm {
        for mut col in means.columns_mut() {
            let n = l2(col.view());
            if n > 0.0 {
                col /= n;
            }
        }
    }
    Ok(NcmClassifier { means, metric })
}

impl NcmClassifier {
    /// The means as a cosine-scored head, for evaluation and serialization.
    /// Both metrics rank classes identically for non-zero queries.
    pub fn to_head(&self) -> ClassifierHead {
        ClassifierHead {
            kind: HeadKind::Ncm,
            hidden: Vec::new(),
            weights: self.means.clone(),
            bias: None,
            scales: None,
        }
    }
}

pub fn ncm_predict(classifier: &NcmClassifier, z: ArrayView1<'_, f64>) -> Prediction {
    classifier.predict_checked(z)
}

impl Predictor for NcmClassifier {
    fn input_dim(&self) -> usize {
        self.means.nrows()
    }

    fn classes(&self) -> usize {
        self.means.ncols()
    }

    fn predict_checked(&self, z: ArrayView1<'_, f64>) -> Prediction {
        match self.metric {
            NcmMetric::Cosine => {
                let zn = l2(z);
                if zn == 0.0 {
                    return Prediction {
                        class: 0,
                        degenerate: true,
                    };
                }
                let scores = self.means.columns().into_iter().map(|m| {
                    let mn = l2(m);
                    if mn > 0.0 {
                        m.dot(&z) / (mn * zn)
                    } else {
                        0.0
                    }
                });
                Prediction {
                    class: argmax(scores),
                    degenerate: false,
                }
            }
            NcmMetric::EuclideanL2norm => {
                let scores = self.means.columns().into_iter().map(|m| {
                    let diff = &z - &m;
                    -diff.dot(&diff)
                });
                Prediction {
                    class: argmax(scores),
                    degenerate: false,
                }
            }
        }
    }
}

/// True when `tau` lies in the conventional `[0, 1]` range.
pub fn tau_in_range(tau: f64) -> bool {
    (0.0..=1.0).contains(&tau)
}

/// Scale each class weight to `w_j / ||w_j||^tau` and drop the bias.
/// Existing per-class scales are folded into the weights first.
pub fn tau_normalize(head: &ClassifierHead, tau: f64) -> Result<ClassifierHead> {
    if !tau.is_finite() {
        return Err(invalid("tau", "must be finite"));
    }
    let mut out = head.clone();
    if let Some(f) = out.scales.take() {
        out.weights *= &f;
    }
    for (j, mut col) in out.weights.columns_mut().into_iter().enumerate() {
        let norm = l2(col.view());
        if norm == 0.0 {
            return Err(Error::ZeroNormColumn(j));
        }
        col /= norm.powf(tau);
    }
    out.bias = None;
    out.kind = if head.hidden.is_empty() {
        HeadKind::TauNormalized
    } else {
        HeadKind::Mlp
    };
    Ok(out)
}

/// Learnable weight scaling: per-class scales initialized to 1 and trained
/// with class-balanced sampling and cross-entropy; weights and bias stay
/// fixed.
pub fn lws_fit(head: &ClassifierHead, train: &Dataset, config: &TrainConfig) -> Result<ClassifierHead> {
    let mut init = head.clone();
    init.scales = Some(Array1::ones(head.classes()));
    let config = TrainConfig {
        sampler: SamplingStrategy::ClassBalanced,
        loss: LossSpec::cross_entropy(),
        freeze: Freeze::AllButScales,
        ..config.clone()
    };
    Ok(train_head(train, &config, Some(init))?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauObjective {
    /// Plain top-1 accuracy on a held-out set.
    #[default]
    ValTop1,
    /// Mean of per-class accuracies on the training set.
    TrainClassAveraged,
}

impl fmt::Display for TauObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TauObjective::ValTop1 => "val_top1",
            TauObjective::TrainClassAveraged => "train_class_averaged",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TauSelection {
    pub grid: Vec<f64>,
    pub scores: Vec<f64>,
    pub chosen: f64,
    pub objective: TauObjective,
}

/// Evaluate every `tau` in `grid` and keep the best; ties go to the
/// smallest tau.
pub fn select_tau(
    head: &ClassifierHead,
    eval: &Dataset,
    grid: &[f64],
    objective: TauObjective,
) -> Result<TauSelection> {
    if grid.is_empty() {
        return Err(invalid("grid", "empty tau grid"));
    }
    let mut scores = Vec::with_capacity(grid.len());
    for &tau in grid {
        let normalized = tau_normalize(head, tau)?;
        let (correct, total) = class_correct(&normalized, eval)?;
        let score = match objective {
            TauObjective::ValTop1 => {
                correct.iter().sum::<usize>() as f64 / total.iter().sum::<usize>() as f64
            }
            TauObjective::TrainClassAveraged => {
                let accs: Vec<f64> = correct
                    .iter()
                    .zip(&total)
                    .filter(|(_, &t)| t > 0)
                    .map(|(&c, &t)| c as f64 / t as f64)
                    .collect();
                accs.iter().sum::<f64>() / accs.len() as f64
            }
        };
        scores.push(score);
    }
    let mut best = 0;
    for i in 1..grid.len() {
        if scores[i] > scores[best] || (scores[i] == scores[best] && grid[i] < grid[best]) {
            best = i;
        }
    }
    Ok(TauSelection {
        chosen: grid[best],
        grid: grid.to_vec(),
        scores,
        objective,
    })
}

/// Recipe for learning a single tau with everything else frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnTauConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub init: f64,
    pub seed: u64,
}

impl Default for LearnTauConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 64,
            lr0: 0.01,
            init: 0.5,
            seed: 0,
        }
    }
}

/// Cross-entropy of tau-normalized logits `r_j * exp(-tau * ln ||w_j||)` for
/// one sample and its derivative with respect to tau. `raw` holds the
/// unnormalized scores `w_j . z`.
pub fn tau_loss_grad(raw: &[f64], log_norms: &[f64], label: usize, tau: f64) -> (f64, f64) {
    let logits: Vec<f64> = raw
        .iter()
        .zip(log_norms)
        .map(|(&r, &ln)| r * (-tau * ln).exp())
        .collect();
    let (loss, g) = softmax_xent(&logits, label);
    let dtau = g
        .iter()
        .zip(&logits)
        .zip(log_norms)
        .map(|((&gj, &lj), &ln)| -gj * lj * ln)
        .sum();
    (loss, dtau)
}

/// Learn tau by plain SGD on class-balanced batches with a cosine schedule.
pub fn learn_tau(head: &ClassifierHead, train: &Dataset, config: &LearnTauConfig) -> Result<f64> {
    if config.batch_size == 0 {
        return Err(invalid("batch_size", "must be at least 1"));
    }
    let mut weights = head.weights.clone();
    if let Some(f) = &head.scales {
        weights *= f;
    }
    let log_norms = weights
        .columns()
        .into_iter()
        .enumerate()
        .map(|(j, c)| {
            let n = l2(c);
            if n == 0.0 {
                Err(Error::ZeroNormColumn(j))
            } else {
                Ok(n.ln())
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut tau = config.init;
    if config.epochs == 0 {
        return Ok(tau);
    }
    let repr = head.represent(train.features().view());
    let raw = repr.dot(&weights);
    let sampler = EpochSampler::new(
        train,
        SamplingStrategy::ClassBalanced,
        rng::derive_seed(config.seed, &[0x7A0]),
    )?;
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let total = config.epochs * steps_per_epoch;
    let mut step = 0;
    for epoch in 0..config.epochs {
        for chunk in sampler.epoch(epoch)?.chunks(config.batch_size) {
            let mut grad = 0.0;
            for &i in chunk {
                let row = raw.row(i);
                let (loss, g) = tau_loss_grad(row.as_slice().unwrap(), &log_norms, train.labels()[i], tau);
                if !loss.is_finite() || !g.is_finite() {
                    return Err(Error::Diverged { epoch, step, loss });
                }
                grad += g;
            }
            tau -= cosine_lr(step, total, config.lr0) * grad / chunk.len() as f64;
            step += 1;
        }
    }
    Ok(tau)
}

/// Cosine-similarity prediction with the head's weights, optionally
/// rectifying the query first.
pub fn cosine_predict(head: &ClassifierHead, z: ArrayView1<'_, f64>, with_activation: bool) -> Prediction {
    let mut repr = head.represent(z.insert_axis(Axis(0))).row(0).to_owned();
    if with_activation {
        repr.mapv_inplace(|v| v.max(0.0));
    }
    let zn = l2(repr.view());
    if zn == 0.0 {
        return Prediction {
            class: 0,
            degenerate: true,
        };
    }
    let scores = (0..head.classes()).map(|j| {
        let w = head.effective_weight(j);
        let wn = l2(w.view());
        if wn > 0.0 {
            w.dot(&repr) / (wn * zn)
        } else {
            0.0
        }
    });
    Prediction {
        class: argmax(scores),
        degenerate: false,
    }
}

/// A head scored by cosine similarity.
#[derive(Debug, Clone)]
pub struct CosinePredictor {
    pub head: ClassifierHead,
    pub with_activation: bool,
}

impl Predictor for CosinePredictor {
    fn input_dim(&self) -> usize {
        self.head.input_dim()
    }

    fn classes(&self) -> usize {
        self.head.classes()
    }

    fn predict_checked(&self, z: ArrayView1<'_, f64>) -> Prediction {
        cosine_predict(&self.head, z, self.with_activation)
    }
}
