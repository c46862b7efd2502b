//! Mini-batch SGD with momentum and a cosine learning-rate schedule for
//! classifier heads on fixed features.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::head::{argmax, init_mlp, ClassifierHead, HeadKind};
use crate::losses::LossSpec;
use crate::rng;
use crate::sampling::{EpochSampler, SamplingStrategy};

/// `0.5 * lr0 * (1 + cos(pi * step / total_steps))`, no restarts.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    let total = total_steps.max(1);
    let step = step.min(total);
    if step == total {
        return 0.0;
    }
    0.5 * lr0 * (1.0 + (PI * step as f64 / total as f64).cos())
}

/// Which parameters a training run may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Freeze {
    /// Everything trains.
    #[default]
    Nothing,
    /// Only the per-class scales `f` train.
    AllButScales,
    /// Hidden layers fixed; final weights and bias train.
    AllButClassifier,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub sampler: SamplingStrategy,
    pub loss: LossSpec,
    pub seed: u64,
    pub freeze: Freeze,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 90,
            batch_size: 64,
            lr0: 0.2,
            momentum: 0.9,
            weight_decay: 5e-4,
            sampler: SamplingStrategy::InstanceBalanced,
            loss: LossSpec::default(),
            seed: 0,
            freeze: Freeze::Nothing,
        }
    }
}

impl TrainConfig {
    /// Second-stage recipe: 10 epochs of class-balanced sampling.
    pub fn stage_two(seed: u64) -> Self {
        Self {
            epochs: 10,
            sampler: SamplingStrategy::ClassBalanced,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be at least 1"));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(invalid("lr0", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid("weight_decay", "must be finite and non-negative"));
        }
        if let SamplingStrategy::Progressive { total_epochs } = self.sampler {
            if total_epochs < self.epochs {
                return Err(invalid(
                    "total_epochs",
                    format!("progressive schedule ({total_epochs}) shorter than epochs ({})", self.epochs),
                ));
            }
        }
        self.sampler.validate()?;
        self.loss.validate()
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
    pub mean_loss: f64,
    /// Accuracy on the samples drawn during the epoch, before each update.
    pub train_acc: f64,
}

/// One parameter tensor with its momentum buffer.
struct Param {
    value: Array2<f64>,
    velocity: Array2<f64>,
}

impl Param {
    fn new(value: Array2<f64>) -> Self {
        let velocity = Array2::zeros(value.raw_dim());
        Self { value, velocity }
    }

    fn step(&mut self, grad: &Array2<f64>, lr: f64, momentum: f64, weight_decay: f64) {
        ndarray::Zip::from(&mut self.value)
            .and(&mut self.velocity)
            .and(grad)
            .for_each(|p, v, &g| {
                let g = g + weight_decay * *p;
                *v = momentum * *v + g;
                *p -= lr * *v;
            });
    }
}

fn row_param(v: &Array1<f64>) -> Param {
    Param::new(v.clone().insert_axis(Axis(0)))
}

/// Trainable view of a head: parameter tensors plus which ones update.
struct Trainable {
    hidden_w: Vec<Param>,
    hidden_b: Vec<Param>,
    weights: Param,
    bias: Option<Param>,
    scales: Option<Param>,
    train_hidden: bool,
    train_top: bool,
    train_scales: bool,
}

struct Grads {
    hidden_w: Vec<Array2<f64>>,
    hidden_b: Vec<Array2<f64>>,
    weights: Array2<f64>,
    bias: Option<Array2<f64>>,
    scales: Option<Array2<f64>>,
}

impl Trainable {
    fn new(head: &ClassifierHead, freeze: Freeze) -> Self {
        let scales = match (&head.scales, freeze) {
            (Some(f), _) => Some(row_param(f)),
            (None, Freeze::AllButScales) => Some(Param::new(Array2::ones((1, head.classes())))),
            (None, _) => None,
        };
        Self {
            hidden_w: head.hidden.iter().map(|l| Param::new(l.weights.clone())).collect(),
            hidden_b: head.hidden.iter().map(|l| row_param(&l.bias)).collect(),
            weights: Param::new(head.weights.clone()),
            bias: head.bias.as_ref().map(row_param),
            train_hidden: freeze == Freeze::Nothing,
            train_top: freeze != Freeze::AllButScales,
            train_scales: freeze != Freeze::AllButClassifier && scales.is_some(),
            scales,
        }
    }

    fn into_head(self, template: &ClassifierHead) -> ClassifierHead {
        let mut head = template.clone();
        for ((layer, w), b) in head.hidden.iter_mut().zip(self.hidden_w).zip(self.hidden_b) {
            layer.weights = w.value;
            layer.bias = b.value.row(0).to_owned();
        }
        head.weights = self.weights.value;
        head.bias = self.bias.map(|b| b.value.row(0).to_owned());
        head.scales = self.scales.map(|f| f.value.row(0).to_owned());
        head
    }

    /// Forward and backward pass over one batch; returns the summed loss,
    /// the number of correct predictions and the mean-loss gradients.
    fn batch(
        &self,
        inputs: ArrayView2<'_, f64>,
        labels: &[usize],
        objective: &crate::losses::Objective,
    ) -> (f64, usize, Grads) {
        let batch = labels.len();
        let mut activations = vec![inputs.to_owned()];
        for (w, b) in self.hidden_w.iter().zip(&self.hidden_b) {
            let mut a = activations.last().unwrap().dot(&w.value) + &b.value;
            a.mapv_inplace(|v| v.max(0.0));
            activations.push(a);
        }
        let repr = activations.last().unwrap();
        let raw = repr.dot(&self.weights.value);
        let mut logits = raw.clone();
        if let Some(f) = &self.scales {
            logits *= &f.value;
        }
        if let Some(b) = &self.bias {
            logits += &b.value;
        }

        let inv = 1.0 / batch as f64;
        let mut dlogits = Array2::<f64>::zeros(logits.raw_dim());
        let mut total_loss = 0.0;
        let mut correct = 0;
        let mut scratch = vec![0.0; logits.ncols()];
        let mut grad = vec![0.0; logits.ncols()];
        for ((row, mut drow), &label) in logits.rows().into_iter().zip(dlogits.rows_mut()).zip(labels) {
            if argmax(row.iter().copied()) == label {
                correct += 1;
            }
            scratch.iter_mut().zip(row).for_each(|(s, &v)| *s = v);
            total_loss += objective.eval_into(&mut scratch, label, &mut grad);
            drow.iter_mut().zip(&grad).for_each(|(d, &g)| *d = g * inv);
        }

        let bias = self.bias.as_ref().map(|_| dlogits.sum_axis(Axis(0)).insert_axis(Axis(0)));
        let scales = self
            .scales
            .as_ref()
            .map(|_| (&dlogits * &raw).sum_axis(Axis(0)).insert_axis(Axis(0)));
        let draw = match &self.scales {
            Some(f) => &dlogits * &f.value,
            None => dlogits,
        };
        let weights = repr.t().dot(&draw);

        let mut hidden_w = Vec::with_capacity(self.hidden_w.len());
        let mut hidden_b = Vec::with_capacity(self.hidden_w.len());
        if self.train_hidden && !self.hidden_w.is_empty() {
            let mut upstream = draw.dot(&self.weights.value.t());
            for l in (0..self.hidden_w.len()).rev() {
                let out = &activations[l + 1];
                ndarray::Zip::from(&mut upstream)
                    .and(out)
                    .for_each(|g, &a| if a <= 0.0 { *g = 0.0 });
                hidden_w.push(activations[l].t().dot(&upstream));
                hidden_b.push(upstream.sum_axis(Axis(0)).insert_axis(Axis(0)));
                if l > 0 {
                    upstream = upstream.dot(&self.hidden_w[l].value.t());
                }
            }
            hidden_w.reverse();
            hidden_b.reverse();
        }
        (
            total_loss,
            correct,
            Grads {
                hidden_w,
                hidden_b,
                weights,
                bias,
                scales,
            },
        )
    }

    fn apply(&mut self, grads: &Grads, lr: f64, cfg: &TrainConfig) {
        let (mu, wd) = (cfg.momentum, cfg.weight_decay);
        if self.train_hidden {
            for (p, g) in self.hidden_w.iter_mut().zip(&grads.hidden_w) {
                p.step(g, lr, mu, wd);
            }
            for (p, g) in self.hidden_b.iter_mut().zip(&grads.hidden_b) {
                p.step(g, lr, mu, wd);
            }
        }
        if self.train_top {
            self.weights.step(&grads.weights, lr, mu, wd);
            if let (Some(p), Some(g)) = (self.bias.as_mut(), grads.bias.as_ref()) {
                p.step(g, lr, mu, wd);
            }
        }
        if self.train_scales {
            if let (Some(p), Some(g)) = (self.scales.as_mut(), grads.scales.as_ref()) {
                p.step(g, lr, mu, wd);
            }
        }
    }
}

/// Train `init` (or a fresh linear head) on `train` for `config.epochs`
/// epochs of `ceil(n / batch_size)` steps each. Zero epochs returns the
/// initial head unchanged.
pub fn train_head(
    train: &Dataset,
    config: &TrainConfig,
    init: Option<ClassifierHead>,
) -> Result<(ClassifierHead, Vec<EpochStats>)> {
    config.validate()?;
    let init = match init {
        Some(h) => h,
        None => init_mlp(train.dim(), &[], train.classes(), config.seed)?,
    };
    if init.input_dim() != train.dim() {
        return Err(Error::DimensionMismatch {
            expected: init.input_dim(),
            got: train.dim(),
        });
    }
    if init.classes() != train.classes() {
        return Err(invalid(
            "head",
            format!("head has {} classes, data has {}", init.classes(), train.classes()),
        ));
    }
    if init.kind.is_cosine() {
        return Err(invalid("head", format!("{} heads are not trained by SGD", init.kind)));
    }
    if config.epochs == 0 {
        return Ok((init, Vec::new()));
    }

    let objective = config.loss.objective(&train.counts())?;
    let sampler = EpochSampler::new(train, config.sampler, rng::derive_seed(config.seed, &[0x5A]))?;
    let steps_per_epoch = config.steps_per_epoch(train.len());
    let total_steps = config.epochs * steps_per_epoch;
    let mut params = Trainable::new(&init, config.freeze);
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0;

    for epoch in 0..config.epochs {
        let stream = sampler.epoch(epoch)?;
        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0;
        let mut lr = config.lr0;
        for chunk in stream.chunks(config.batch_size) {
            let inputs = train.features().select(Axis(0), chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels()[i]).collect();
            let (loss, correct, grads) = params.batch(inputs.view(), &labels, &objective);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            lr = cosine_lr(step, total_steps, config.lr0);
            params.apply(&grads, lr, config);
            epoch_loss += loss;
            epoch_correct += correct;
            step += 1;
        }
        history.push(EpochStats {
            epoch,
            lr,
            mean_loss: epoch_loss / stream.len() as f64,
            train_acc: epoch_correct as f64 / stream.len() as f64,
        });
    }
    let mut head = params.into_head(&init);
    if head.kind == HeadKind::Linear && !head.hidden.is_empty() {
        head.kind = HeadKind::Mlp;
    }
    Ok((head, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_longtail, SyntheticSpec};
    use crate::head::{init_head, Predictor};
    use crate::losses::softmax_xent;
    use ndarray::array;

    fn blobs(classes: usize, sep: f64, n: usize, seed: u64) -> Dataset {
        let spec = SyntheticSpec {
            classes,
            n_max: n,
            n_min: n,
            dim: 4,
            class_separation: sep,
            seed,
            ..Default::default()
        };
        generate_longtail(&spec).unwrap().0
    }

    fn accuracy(head: &ClassifierHead, ds: &Dataset) -> f64 {
        let preds = head.predict_batch(ds.features().view());
        preds.iter().zip(ds.labels()).filter(|(p, l)| p == l).count() as f64 / ds.len() as f64
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.2), 0.2);
        assert_eq!(cosine_lr(100, 100, 0.2), 0.0);
        assert!((cosine_lr(50, 100, 0.2) - 0.1).abs() < 1e-15);
        assert!(cosine_lr(30, 100, 1.0) > cosine_lr(31, 100, 1.0));
    }

    #[test]
    fn single_batch_step_is_mean_outer_product() {
        let x = [[0.5, -2.0], [1.5, 0.25]];
        let labels = [1, 0];
        let ds = Dataset::new(array![[0.5, -2.0], [1.5, 0.25]], labels.to_vec(), 2).unwrap();
        let init = ClassifierHead::linear(array![[0.1, -0.3], [0.2, 0.4]], Some(array![0.0, 0.0]));
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            lr0: 0.3,
            momentum: 0.0,
            weight_decay: 0.0,
            ..Default::default()
        };
        let (head, _) = train_head(&ds, &cfg, Some(init.clone())).unwrap();
        let grads: Vec<Vec<f64>> = x
            .iter()
            .zip(labels)
            .map(|(z, l)| {
                let logits = [0.1 * z[0] + 0.2 * z[1], -0.3 * z[0] + 0.4 * z[1]];
                softmax_xent(&logits, l).1
            })
            .collect();
        for (k, (x0, x1)) in x[0].iter().zip(&x[1]).enumerate() {
            for (j, (g0, g1)) in grads[0].iter().zip(&grads[1]).enumerate() {
                let g = (x0 * g0 + x1 * g1) / 2.0;
                let expected = init.weights[[k, j]] - 0.3 * g;
                assert!((head.weights[[k, j]] - expected).abs() < 1e-15);
            }
        }
        let b = head.bias.unwrap();
        assert!((b[0] + 0.3 * (grads[0][0] + grads[1][0]) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_returns_init() {
        let ds = blobs(3, 3.0, 20, 1);
        let init = init_head(4, 3, HeadKind::Linear, 5).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            lr0: 0.0,
            ..Default::default()
        };
        let (head, hist) = train_head(&ds, &cfg, Some(init.clone())).unwrap();
        assert_eq!(head, init);
        assert_eq!(hist.len(), 3);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = blobs(3, 2.0, 30, 2);
        let cfg = TrainConfig {
            epochs: 4,
            sampler: SamplingStrategy::ClassBalanced,
            seed: 17,
            ..Default::default()
        };
        assert_eq!(
            train_head(&ds, &cfg, None).unwrap(),
            train_head(&ds, &cfg, None).unwrap()
        );
    }

    #[test]
    fn separable_blobs_are_learned() {
        let ds = blobs(2, 6.0, 100, 3);
        let cfg = TrainConfig {
            epochs: 10,
            ..Default::default()
        };
        let (head, _) = train_head(&ds, &cfg, None).unwrap();
        assert!(accuracy(&head, &ds) >= 0.99);
    }

    #[test]
    fn small_lr_loss_history_decreases() {
        let ds = blobs(3, 3.0, 60, 4);
        let cfg = TrainConfig {
            epochs: 15,
            lr0: 1e-3,
            ..Default::default()
        };
        let (_, hist) = train_head(&ds, &cfg, None).unwrap();
        assert!(hist.windows(2).all(|w| w[1].mean_loss <= w[0].mean_loss), "{hist:?}");
    }

    #[test]
    fn scales_only_training_leaves_weights_untouched() {
        let ds = blobs(3, 2.0, 30, 5);
        let init = init_head(4, 3, HeadKind::Linear, 6).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            freeze: Freeze::AllButScales,
            ..Default::default()
        };
        let (head, _) = train_head(&ds, &cfg, Some(init.clone())).unwrap();
        assert_eq!(head.weights, init.weights);
        assert_eq!(head.bias, init.bias);
        assert!(head.scales.unwrap().iter().any(|&f| f != 1.0));
    }

    #[test]
    fn mlp_trains_and_classifier_only_freezes_hidden() {
        let ds = blobs(3, 4.0, 60, 7);
        let init = init_mlp(4, &[8], 3, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            ..Default::default()
        };
        let (head, _) = train_head(&ds, &cfg, Some(init.clone())).unwrap();
        assert_eq!(head.kind, HeadKind::Mlp);
        assert!(accuracy(&head, &ds) > 0.9);
        let frozen = TrainConfig {
            freeze: Freeze::AllButClassifier,
            epochs: 2,
            ..cfg
        };
        let (head2, _) = train_head(&ds, &frozen, Some(init.clone())).unwrap();
        assert_eq!(head2.hidden, init.hidden);
        assert_ne!(head2.weights, init.weights);
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let ds = blobs(3, 2.0, 4, 8);
        let init = init_mlp(4, &[5], 3, 2).unwrap();
        let objective = LossSpec::default().objective(&ds.counts()).unwrap();
        let labels = ds.labels().to_vec();
        let params = Trainable::new(&init, Freeze::Nothing);
        let (_, _, grads) = params.batch(ds.features().view(), &labels, &objective);
        let mean_loss = |head: &ClassifierHead| {
            let logits = head.logits(ds.features().view());
            logits
                .rows()
                .into_iter()
                .zip(&labels)
                .map(|(r, &l)| softmax_xent(r.as_slice().unwrap(), l).0)
                .sum::<f64>()
                / labels.len() as f64
        };
        let eps = 1e-6;
        for (k, j) in [(0, 0), (2, 3), (3, 4)] {
            let mut hi = init.clone();
            let mut lo = init.clone();
            hi.hidden[0].weights[[k, j]] += eps;
            lo.hidden[0].weights[[k, j]] -= eps;
            let fd = (mean_loss(&hi) - mean_loss(&lo)) / (2.0 * eps);
            assert!((fd - grads.hidden_w[0][[k, j]]).abs() < 1e-7, "{fd} vs {}", grads.hidden_w[0][[k, j]]);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let ds = Dataset::new(array![[1e200], [-1e200]], vec![1, 0], 2).unwrap();
        let init = ClassifierHead::linear(array![[1.0, -1.0]], Some(array![0.0, 0.0]));
        let cfg = TrainConfig {
            epochs: 2,
            lr0: 1e10,
            momentum: 0.0,
            ..Default::default()
        };
        assert!(matches!(train_head(&ds, &cfg, Some(init)), Err(Error::Diverged { .. })));
    }

    #[test]
    fn rejects_invalid_config() {
        let ds = blobs(2, 2.0, 5, 9);
        for cfg in [
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { momentum: 1.0, ..Default::default() },
            TrainConfig { lr0: -1.0, ..Default::default() },
            TrainConfig {
                sampler: SamplingStrategy::Progressive { total_epochs: 3 },
                epochs: 5,
                ..Default::default()
            },
        ] {
            assert!(train_head(&ds, &cfg, None).is_err());
        }
        let wrong = init_head(3, 2, HeadKind::Linear, 0).unwrap();
        assert!(train_head(&ds, &TrainConfig::default(), Some(wrong)).is_err());
    }
}
