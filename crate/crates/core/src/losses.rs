//! Per-sample classification losses with analytic gradients with respect
//! to the logits: cross-entropy, focal, LDAM, and the class-balanced
//! (effective number of samples) re-weighting.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Softmax probabilities of `logits` written to `out`; returns
/// `-log softmax(logits)[label]` computed without cancellation.
fn softmax_into(logits: &[f64], label: usize, out: &mut [f64]) -> f64 {
    let (argmax, max) = logits
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| {
            if v > acc.1 {
                (i, v)
            } else {
                acc
            }
        });
    // Sum of exp(z - max) excluding the max term itself (which is exactly 1).
    let mut rest = 0.0;
    for (i, (&z, p)) in logits.iter().zip(out.iter_mut()).enumerate() {
        *p = (z - max).exp();
        if i != argmax {
            rest += *p;
        }
    }
    let log_norm = rest.ln_1p();
    let denom = 1.0 + rest;
    out.iter_mut().for_each(|p| *p /= denom);
    (max - logits[label]) + log_norm
}

/// Cross-entropy loss and `softmax - onehot(label)`.
pub fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; logits.len()];
    let loss = xent_into(logits, label, &mut grad);
    (loss, grad)
}

fn xent_into(logits: &[f64], label: usize, grad: &mut [f64]) -> f64 {
    let loss = softmax_into(logits, label, grad);
    grad[label] -= 1.0;
    loss
}

/// Focal loss `(1 - h)^gamma * (-log h)` with `h` the true-class probability.
pub fn focal(logits: &[f64], label: usize, gamma: f64) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; logits.len()];
    let loss = focal_into(logits, label, gamma, &mut grad);
    (loss, grad)
}

fn focal_into(logits: &[f64], label: usize, gamma: f64, grad: &mut [f64]) -> f64 {
    if gamma == 0.0 {
        return xent_into(logits, label, grad);
    }
    let ce = softmax_into(logits, label, grad);
    let h = (-ce).exp();
    let one_minus_h = -(-ce).exp_m1();
    let weight = one_minus_h.powf(gamma);
    // dL/dz_k = coef * (p_k - onehot_k) where
    // coef = (1-h)^gamma - gamma * h * (1-h)^(gamma-1) * log h
    let coef = if one_minus_h > 0.0 {
        weight + gamma * h * one_minus_h.powf(gamma - 1.0) * ce
    } else {
        0.0
    };
    grad[label] -= 1.0;
    grad.iter_mut().for_each(|g| *g *= coef);
    weight * ce
}

/// `(1 - beta) / (1 - beta^n)`: inverse effective number of samples.
pub fn class_balanced_weight(count: usize, beta: f64) -> f64 {
    if beta == 0.0 || count == 1 {
        return 1.0;
    }
    (1.0 - beta) / (1.0 - beta.powi(count as i32))
}

/// Margins proportional to `n_j^{-1/4}`, scaled so the rarest class gets
/// exactly `max_margin`.
pub fn ldam_margins(counts: &[usize], max_margin: f64) -> Result<Vec<f64>> {
    if !(max_margin > 0.0 && max_margin.is_finite()) {
        return Err(invalid("max_margin", "must be positive and finite"));
    }
    let min = *counts
        .iter()
        .min()
        .ok_or_else(|| invalid("counts", "no classes"))?;
    if min == 0 {
        return Err(invalid("counts", "zero-count class"));
    }
    let anchor = (min as f64).powf(0.25);
    Ok(counts
        .iter()
        .map(|&n| max_margin * anchor / (n as f64).powf(0.25))
        .collect())
}

/// Cross-entropy with the true-class logit lowered by its margin. Only the
/// true class is shifted; the other logits are left as they are.
pub fn ldam(logits: &[f64], label: usize, margins: &[f64]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; logits.len()];
    let mut shifted = logits.to_vec();
    let loss = ldam_into(&mut shifted, label, margins, &mut grad);
    (loss, grad)
}

fn ldam_into(logits: &mut [f64], label: usize, margins: &[f64], grad: &mut [f64]) -> f64 {
    logits[label] -= margins[label];
    xent_into(logits, label, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Ce,
    Focal,
    Ldam,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Ce => "ce",
            LossKind::Focal => "focal",
            LossKind::Ldam => "ldam",
        })
    }
}

impl FromStr for LossKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(Self::Ce),
            "focal" => Ok(Self::Focal),
            "ldam" => Ok(Self::Ldam),
            other => Err(invalid(
                "loss",
                format!("unknown loss {other:?} (ce | focal | ldam)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    pub gamma: f64,
    /// Class-balanced coefficient; 0 disables re-weighting.
    pub beta: f64,
    pub max_margin: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            kind: LossKind::Ce,
            gamma: 2.0,
            beta: 0.0,
            max_margin: 0.5,
        }
    }
}

impl LossSpec {
    pub fn cross_entropy() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(invalid("focal_gamma", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(invalid("cb_beta", "must lie in [0, 1)"));
        }
        if !(self.max_margin > 0.0 && self.max_margin.is_finite()) {
            return Err(invalid("ldam_max_margin", "must be positive"));
        }
        Ok(())
    }

    /// Bind the loss to the training class counts.
    pub fn objective(&self, counts: &[usize]) -> Result<Objective> {
        self.validate()?;
        let class_weights = if self.beta > 0.0 {
            let raw: Vec<f64> = counts
                .iter()
                .map(|&n| class_balanced_weight(n.max(1), self.beta))
                .collect();
            // Normalized to sum to the class count.
            let total: f64 = raw.iter().sum();
            let c = counts.len() as f64;
            Some(raw.into_iter().map(|w| w * c / total).collect())
        } else {
            None
        };
        let margins = match self.kind {
            LossKind::Ldam => Some(ldam_margins(counts, self.max_margin)?),
            _ => None,
        };
        Ok(Objective {
            spec: *self,
            class_weights,
            margins,
        })
    }
}

/// A loss spec bound to per-class weights and margins.
#[derive(Debug, Clone)]
pub struct Objective {
    spec: LossSpec,
    class_weights: Option<Vec<f64>>,
    margins: Option<Vec<f64>>,
}

impl Objective {
    pub fn class_weights(&self) -> Option<&[f64]> {
        self.class_weights.as_deref()
    }

    /// Loss of one sample; `logits` is used as scratch and `grad` receives
    /// the gradient with respect to the original logits.
    pub fn eval_into(&self, logits: &mut [f64], label: usize, grad: &mut [f64]) -> f64 {
        let loss = match self.spec.kind {
            LossKind::Ce => xent_into(logits, label, grad),
            LossKind::Focal => focal_into(logits, label, self.spec.gamma, grad),
            LossKind::Ldam => ldam_into(
                logits,
                label,
                self.margins.as_deref().unwrap_or_default(),
                grad,
            ),
        };
        match &self.class_weights {
            Some(w) => {
                let w = w[label];
                grad.iter_mut().for_each(|g| *g *= w);
                loss * w
            }
            None => loss,
        }
    }

    pub fn eval(&self, logits: &[f64], label: usize) -> (f64, Vec<f64>) {
        let mut scratch = logits.to_vec();
        let mut grad = vec![0.0; logits.len()];
        let loss = self.eval_into(&mut scratch, label, &mut grad);
        (loss, grad)
    }
}
