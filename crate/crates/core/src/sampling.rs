//! Class-aware sampling: `p_j = n_j^q / sum_i n_i^q` for instance-balanced
//! (q = 1), square-root (q = 1/2) and class-balanced (q = 0) sampling, and the
//! progressive schedule that slides linearly from the first to the last over
//! training.

use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Instance,
    Class,
    Sqrt,
    Progressive,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 4] = [
        SamplerKind::Instance,
        SamplerKind::Class,
        SamplerKind::Sqrt,
        SamplerKind::Progressive,
    ];
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerKind::Instance => "instance",
            SamplerKind::Class => "class",
            SamplerKind::Sqrt => "sqrt",
            SamplerKind::Progressive => "progressive",
        })
    }
}

impl FromStr for SamplerKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "instance" => Ok(Self::Instance),
            "class" => Ok(Self::Class),
            "sqrt" => Ok(Self::Sqrt),
            "progressive" => Ok(Self::Progressive),
            other => Err(invalid(
                "sampler",
                format!("unknown sampler {other:?} (instance | class | sqrt | progressive)"),
            )),
        }
    }
}

/// A sampler together with the schedule length progressive sampling needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplingStrategy {
    InstanceBalanced,
    ClassBalanced,
    SquareRoot,
    /// Blend from instance- to class-balanced over `total_epochs` epochs.
    Progressive { total_epochs: usize },
}

impl SamplingStrategy {
    pub fn from_kind(kind: SamplerKind, total_epochs: usize) -> Self {
        match kind {
            SamplerKind::Instance => Self::InstanceBalanced,
            SamplerKind::Class => Self::ClassBalanced,
            SamplerKind::Sqrt => Self::SquareRoot,
            SamplerKind::Progressive => Self::Progressive { total_epochs },
        }
    }

    pub fn kind(&self) -> SamplerKind {
        match self {
            Self::InstanceBalanced => SamplerKind::Instance,
            Self::ClassBalanced => SamplerKind::Class,
            Self::SquareRoot => SamplerKind::Sqrt,
            Self::Progressive { .. } => SamplerKind::Progressive,
        }
    }

    /// Exponent of the fixed strategies; `None` for progressive.
    pub fn q(&self) -> Option<f64> {
        match self {
            Self::InstanceBalanced => Some(1.0),
            Self::ClassBalanced => Some(0.0),
            Self::SquareRoot => Some(0.5),
            Self::Progressive { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Self::Progressive { total_epochs: 0 } = self {
            return Err(invalid("total_epochs", "progressive sampling needs T >= 1"));
        }
        Ok(())
    }

    /// Class probabilities used during `epoch`.
    pub fn class_probs(&self, counts: &[usize], epoch: usize) -> Result<Vec<f64>> {
        match *self {
            Self::Progressive { total_epochs } => {
                if epoch >= total_epochs {
                    return Err(invalid(
                        "epoch",
                        format!("epoch {epoch} outside progressive schedule of {total_epochs}"),
                    ));
                }
                progressive_weights(counts, epoch, total_epochs)
            }
            other => sampling_weights(counts, other.q().unwrap_or(1.0)),
        }
    }
}

/// `p_j = n_j^q / sum_i n_i^q`.
pub fn sampling_weights(counts: &[usize], q: f64) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(invalid("counts", "no classes"));
    }
    if let Some(j) = counts.iter().position(|&n| n == 0) {
        return Err(invalid("counts", format!("class {j} has zero instances")));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(invalid("q", format!("{q} outside [0, 1]")));
    }
    let powered: Vec<f64> = counts.iter().map(|&n| (n as f64).powf(q)).collect();
    let total: f64 = powered.iter().sum();
    Ok(powered.into_iter().map(|v| v / total).collect())
}

/// `(1 - t/T) p_IB + (t/T) p_CB`.
pub fn progressive_weights(counts: &[usize], t: usize, total: usize) -> Result<Vec<f64>> {
    if total == 0 || t > total {
        return Err(invalid("t", format!("t = {t} outside [0, {total}]")));
    }
    let instance = sampling_weights(counts, 1.0)?;
    let class = sampling_weights(counts, 0.0)?;
    let mix = t as f64 / total as f64;
    Ok(instance
        .iter()
        .zip(&class)
        .map(|(&ib, &cb)| (1.0 - mix) * ib + mix * cb)
        .collect())
}

/// Produces the per-epoch index streams for one dataset and strategy.
///
/// Instance-balanced epochs are permutations of all `n` indices. Every other
/// strategy draws `n` indices i.i.d.: a class from `p_j`, then an instance
/// uniformly within it.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    members: Vec<Vec<usize>>,
    counts: Vec<usize>,
    len: usize,
    strategy: SamplingStrategy,
    seed: u64,
}

impl EpochSampler {
    pub fn new(dataset: &Dataset, strategy: SamplingStrategy, seed: u64) -> Result<Self> {
        strategy.validate()?;
        if dataset.is_empty() {
            return Err(invalid("dataset", "empty"));
        }
        Ok(Self {
            members: dataset.class_members(),
            counts: dataset.counts(),
            len: dataset.len(),
            strategy,
            seed,
        })
    }

    pub fn strategy(&self) -> SamplingStrategy {
        self.strategy
    }

    pub fn epoch(&self, epoch: usize) -> Result<Vec<usize>> {
        let mut rng = rng::stream(self.seed, &[0x5A4D, epoch as u64]);
        if let SamplingStrategy::InstanceBalanced = self.strategy {
            let mut perm: Vec<usize> = (0..self.len).collect();
            perm.shuffle(&mut rng);
            return Ok(perm);
        }
        let probs = self.strategy.class_probs(&self.counts, epoch)?;
        let classes = WeightedIndex::new(&probs)
            .map_err(|e| invalid("class_probs", e.to_string()))?;
        Ok((0..self.len)
            .map(|_| {
                let members = &self.members[classes.sample(&mut rng)];
                members[rng.random_range(0..members.len())]
            })
            .collect())
    }
}

pub fn make_epoch_stream(
    dataset: &Dataset,
    strategy: SamplingStrategy,
    epoch: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    EpochSampler::new(dataset, strategy, seed)?.epoch(epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn dataset_with_counts(counts: &[usize]) -> Dataset {
        let labels: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(j, &n)| std::iter::repeat_n(j, n))
            .collect();
        Dataset::new(Array2::zeros((labels.len(), 1)), labels, counts.len()).unwrap()
    }

    #[test]
    fn fixed_strategy_weights() {
        let p = sampling_weights(&[4, 2, 1], 1.0).unwrap();
        assert_eq!(p, vec![4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0]);
        let p = sampling_weights(&[4, 2, 1], 0.0).unwrap();
        assert_eq!(p, vec![1.0 / 3.0; 3]);
        let p = sampling_weights(&[4, 1], 0.5).unwrap();
        assert!(close(&p, &[2.0 / 3.0, 1.0 / 3.0], 1e-15));
    }

    #[test]
    fn weights_reject_bad_input() {
        assert!(sampling_weights(&[3, 0], 1.0).is_err());
        assert!(sampling_weights(&[3], 1.5).is_err());
        assert!(sampling_weights(&[], 1.0).is_err());
        assert!(progressive_weights(&[3, 1], 5, 4).is_err());
        assert!(progressive_weights(&[3, 1], 0, 0).is_err());
    }

    #[test]
    fn progressive_endpoints_and_midpoint() {
        let counts = [4, 2, 1];
        assert_eq!(
            progressive_weights(&counts, 0, 10).unwrap(),
            sampling_weights(&counts, 1.0).unwrap()
        );
        assert_eq!(
            progressive_weights(&counts, 10, 10).unwrap(),
            sampling_weights(&counts, 0.0).unwrap()
        );
        let mid = progressive_weights(&counts, 5, 10).unwrap();
        let third = 1.0 / 3.0;
        let expected = [
            (4.0 / 7.0 + third) / 2.0,
            (2.0 / 7.0 + third) / 2.0,
            (1.0 / 7.0 + third) / 2.0,
        ];
        assert!(close(&mid, &expected, 1e-15));
    }

    #[test]
    fn instance_epoch_is_permutation() {
        let ds = dataset_with_counts(&[3, 2]);
        let mut s = make_epoch_stream(&ds, SamplingStrategy::InstanceBalanced, 0, 9).unwrap();
        s.sort_unstable();
        assert_eq!(s, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn non_instance_epochs_have_length_n_and_valid_indices() {
        let ds = dataset_with_counts(&[30, 3, 1]);
        for strategy in [
            SamplingStrategy::ClassBalanced,
            SamplingStrategy::SquareRoot,
            SamplingStrategy::Progressive { total_epochs: 4 },
        ] {
            let s = make_epoch_stream(&ds, strategy, 3, 1).unwrap();
            assert_eq!(s.len(), 34);
            assert!(s.iter().all(|&i| i < 34));
        }
    }

    #[test]
    fn progressive_epoch_past_schedule_is_error() {
        let ds = dataset_with_counts(&[2, 1]);
        let strategy = SamplingStrategy::Progressive { total_epochs: 3 };
        assert!(make_epoch_stream(&ds, strategy, 3, 0).is_err());
        let zero = SamplingStrategy::Progressive { total_epochs: 0 };
        assert!(make_epoch_stream(&ds, zero, 0, 0).is_err());
    }

    #[test]
    fn streams_are_deterministic_per_epoch() {
        let ds = dataset_with_counts(&[20, 5, 2]);
        let s = EpochSampler::new(&ds, SamplingStrategy::ClassBalanced, 4).unwrap();
        assert_eq!(s.epoch(2).unwrap(), s.epoch(2).unwrap());
        assert_ne!(s.epoch(2).unwrap(), s.epoch(3).unwrap());
    }

    proptest! {
        #[test]
        fn weights_sum_to_one_and_preserve_order(
            counts in proptest::collection::vec(1usize..10_000, 1..40),
            q in 0.0f64..=1.0,
        ) {
            let p = sampling_weights(&counts, q).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for i in 0..counts.len() {
                for j in 0..counts.len() {
                    if counts[i] >= counts[j] {
                        prop_assert!(p[i] >= p[j]);
                    }
                }
            }
        }

        #[test]
        fn progressive_moves_head_down_and_tail_up(
            counts in proptest::collection::vec(1usize..1000, 2..20),
            total in 1usize..50,
        ) {
            let ib = sampling_weights(&counts, 1.0).unwrap();
            let cb = sampling_weights(&counts, 0.0).unwrap();
            let mut prev = progressive_weights(&counts, 0, total).unwrap();
            for t in 1..=total {
                let cur = progressive_weights(&counts, t, total).unwrap();
                for j in 0..counts.len() {
                    if ib[j] > cb[j] {
                        prop_assert!(cur[j] <= prev[j] + 1e-15);
                    } else if ib[j] < cb[j] {
                        prop_assert!(cur[j] + 1e-15 >= prev[j]);
                    }
                }
                prev = cur;
            }
        }
    }
}
