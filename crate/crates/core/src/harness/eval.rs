use std::io::Write;

use crate::data::{ClassProfile, Dataset, Split};
use crate::error::{invalid, Error, Result};
use crate::head::Predictor;

/// Per-class correct and total counts of `predictor` on `dataset`.
pub fn class_correct<P: Predictor + ?Sized>(
    predictor: &P,
    dataset: &Dataset,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if predictor.input_dim() != dataset.dim() {
        return Err(Error::DimensionMismatch {
            expected: predictor.input_dim(),
            got: dataset.dim(),
        });
    }
    if predictor.classes() != dataset.classes() {
        return Err(invalid(
            "predictor",
            format!(
                "predictor has {} classes, data has {}",
                predictor.classes(),
                dataset.classes()
            ),
        ));
    }
    let preds = predictor.predict_batch(dataset.features().view());
    let mut correct = vec![0usize; dataset.classes()];
    let mut total = vec![0usize; dataset.classes()];
    for (&p, &l) in preds.iter().zip(dataset.labels()) {
        total[l] += 1;
        if p == l {
            correct[l] += 1;
        }
    }
    Ok((correct, total))
}

/// Top-1 accuracies (percent) overall, per split and per class.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub n_eval: usize,
    pub correct: usize,
    /// Instance-weighted accuracy over all evaluation instances.
    pub top1_all: f64,
    pub top1_many: Option<f64>,
    pub top1_medium: Option<f64>,
    pub top1_few: Option<f64>,
    /// Mean of the per-class accuracies.
    pub class_avg: f64,
    pub per_class_acc: Vec<Option<f64>>,
    pub per_class_correct: Vec<usize>,
    pub per_class_total: Vec<usize>,
    pub splits: Vec<Split>,
    pub train_counts: Vec<usize>,
}

fn pct(correct: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| 100.0 * correct as f64 / total as f64)
}

/// Render a percentage to one decimal, or `-` for an absent split.
pub fn fmt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.1}"))
}

pub fn evaluate<P: Predictor + ?Sized>(
    predictor: &P,
    dataset: &Dataset,
    profile: &ClassProfile,
) -> Result<EvalReport> {
    if profile.classes() != dataset.classes() {
        return Err(invalid(
            "profile",
            format!(
                "profile covers {} classes, data has {}",
                profile.classes(),
                dataset.classes()
            ),
        ));
    }
    let (per_class_correct, per_class_total) = class_correct(predictor, dataset)?;
    Ok(EvalReport::from_counts(
        per_class_correct,
        per_class_total,
        profile,
    ))
}

impl EvalReport {
    pub fn from_counts(correct: Vec<usize>, total: Vec<usize>, profile: &ClassProfile) -> Self {
        let split_acc = |split: Split| {
            let (c, t) = correct
                .iter()
                .zip(&total)
                .zip(&profile.splits)
                .filter(|(_, &s)| s == split)
                .fold((0, 0), |(c, t), ((&ci, &ti), _)| (c + ci, t + ti));
            pct(c, t)
        };
        let per_class_acc: Vec<Option<f64>> =
            correct.iter().zip(&total).map(|(&c, &t)| pct(c, t)).collect();
        let present: Vec<f64> = per_class_acc.iter().flatten().copied().collect();
        let n_eval = total.iter().sum();
        let n_correct = correct.iter().sum();
        Self {
            method: String::new(),
            n_eval,
            correct: n_correct,
            top1_all: pct(n_correct, n_eval).unwrap_or(0.0),
            top1_many: split_acc(Split::Many),
            top1_medium: split_acc(Split::Medium),
            top1_few: split_acc(Split::Few),
            class_avg: if present.is_empty() {
                0.0
            } else {
                present.iter().sum::<f64>() / present.len() as f64
            },
            per_class_acc,
            per_class_correct: correct,
            per_class_total: total,
            splits: profile.splits.clone(),
            train_counts: profile.counts.clone(),
        }
    }

    pub fn with_method(mut self, method: impl Into<String>) -> Self {
        self.method = method.into();
        self
    }

    pub fn split(&self, split: Split) -> Option<f64> {
        match split {
            Split::Many => self.top1_many,
            Split::Medium => self.top1_medium,
            Split::Few => self.top1_few,
        }
    }

    /// One-line human summary.
    pub fn summary(&self) -> String {
        format!(
            "{}: many {} | medium {} | few {} | all {} (class-avg {:.1}, n={})",
            if self.method.is_empty() { "eval" } else { &self.method },
            fmt_pct(self.top1_many),
            fmt_pct(self.top1_medium),
            fmt_pct(self.top1_few),
            fmt_pct(Some(self.top1_all)),
            self.class_avg,
            self.n_eval
        )
    }

    /// Per-class CSV: `class,train_count,split,n_eval,correct,accuracy`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["class", "train_count", "split", "n_eval", "correct", "accuracy"])?;
        for j in 0..self.per_class_total.len() {
            w.write_record([
                j.to_string(),
                self.train_counts[j].to_string(),
                self.splits[j].to_string(),
                self.per_class_total[j].to_string(),
                self.per_class_correct[j].to_string(),
                self.per_class_acc[j].map_or_else(String::new, |a| format!("{a:.4}")),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::{ClassifierHead, Prediction};
    use ndarray::{array, Array2, ArrayView1};
    use proptest::prelude::*;

    struct Fixed(Vec<usize>, usize);

    impl Predictor for Fixed {
        fn input_dim(&self) -> usize {
            1
        }
        fn classes(&self) -> usize {
            self.1
        }
        // The single feature carries the instance id.
        fn predict_checked(&self, z: ArrayView1<'_, f64>) -> Prediction {
            Prediction {
                class: self.0[z[0] as usize],
                degenerate: false,
            }
        }
    }

    fn balanced(classes: usize, per: usize) -> Dataset {
        let n = classes * per;
        let labels: Vec<usize> = (0..n).map(|i| i / per).collect();
        let feats = Array2::from_shape_fn((n, 1), |(i, _)| i as f64);
        Dataset::new(feats, labels, classes).unwrap()
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let ds = balanced(4, 5);
        let profile = ClassProfile::from_counts(vec![200, 50, 50, 3], 100, 20).unwrap();
        let perfect = Fixed(ds.labels().to_vec(), 4);
        let r = evaluate(&perfect, &ds, &profile).unwrap();
        assert_eq!(
            (r.top1_all, r.top1_many, r.top1_medium, r.top1_few),
            (100.0, Some(100.0), Some(100.0), Some(100.0))
        );
        let constant = Fixed(vec![0; 20], 4);
        let r = evaluate(&constant, &ds, &profile).unwrap();
        assert_eq!(r.top1_all, 25.0);
    }

    #[test]
    fn hand_counted_split_accuracies() {
        let ds = balanced(3, 10);
        let profile = ClassProfile::from_counts(vec![500, 5, 5], 100, 20).unwrap();
        let mut preds = ds.labels().to_vec();
        preds[10..20].iter_mut().for_each(|p| *p = 0);
        let r = evaluate(&Fixed(preds, 3), &ds, &profile).unwrap();
        assert_eq!(fmt_pct(Some(r.top1_all)), "66.7");
        assert_eq!(r.top1_many, Some(100.0));
        assert_eq!(r.top1_few, Some(50.0));
        assert_eq!(r.top1_medium, None);
        assert_eq!(fmt_pct(r.top1_medium), "-");
        assert_eq!(r.per_class_correct.iter().sum::<usize>(), r.correct);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let ds = balanced(2, 2);
        let head = ClassifierHead::linear(array![[1.0, 0.0], [0.0, 1.0]], None);
        let profile = ClassProfile::from_counts(vec![1, 1], 100, 20).unwrap();
        assert!(evaluate(&head, &ds, &profile).is_err());
    }

    #[test]
    fn csv_has_one_row_per_class() {
        let ds = balanced(3, 2);
        let profile = ClassProfile::from_counts(vec![3, 2, 1], 100, 20).unwrap();
        let r = evaluate(&Fixed(ds.labels().to_vec(), 3), &ds, &profile).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.contains("2,1,few,2,2,100.0000"));
    }

    proptest! {
        #[test]
        fn evaluation_is_permutation_invariant(
            preds in proptest::collection::vec(0usize..3, 12),
            perm_seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let ds = balanced(3, 4);
            let profile = ClassProfile::from_counts(vec![300, 30, 3], 100, 20).unwrap();
            let base = evaluate(&Fixed(preds.clone(), 3), &ds, &profile).unwrap();

            let mut order: Vec<usize> = (0..12).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
            let labels: Vec<usize> = order.iter().map(|&i| ds.labels()[i]).collect();
            let feats = Array2::from_shape_fn((12, 1), |(i, _)| i as f64);
            let shuffled = Dataset::new(feats, labels, 3).unwrap();
            let spreds: Vec<usize> = order.iter().map(|&i| preds[i]).collect();
            let r = evaluate(&Fixed(spreds, 3), &shuffled, &profile).unwrap();
            prop_assert_eq!(r, base);
        }
    }
}
