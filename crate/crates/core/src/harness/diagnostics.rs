//! Classifier weight-norm profiles and tau sweeps.

use std::io::Write;

use crate::balancing::tau_normalize;
use crate::data::{ClassProfile, Dataset};
use crate::error::{invalid, Result};
use crate::harness::eval::evaluate;
use crate::head::ClassifierHead;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightNormProfile {
    /// Classes sorted by descending training count.
    pub classes: Vec<usize>,
    pub counts: Vec<usize>,
    pub norms: Vec<f64>,
    /// Spearman rank correlation between norms and counts.
    pub spearman: f64,
}

/// Average ranks (1-based), ties share the mean of their positions.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    if x.len() != y.len() || x.len() < 2 {
        return 0.0;
    }
    pearson(&ranks(x), &ranks(y))
}

/// Least-squares slope of `ys` against `xs`.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let num: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn weight_norm_profile(head: &ClassifierHead, profile: &ClassProfile) -> Result<WeightNormProfile> {
    if head.classes() != profile.classes() {
        return Err(invalid("profile", "class count differs from head"));
    }
    let all = head.class_norms();
    let norms: Vec<f64> = profile.order.iter().map(|&j| all[j]).collect();
    let counts = profile.sorted_counts();
    let count_f: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    Ok(WeightNormProfile {
        classes: profile.order.clone(),
        spearman: spearman(&norms, &count_f),
        counts,
        norms,
    })
}

impl WeightNormProfile {
    /// CSV: `rank,class,train_count,norm`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["rank", "class", "train_count", "norm"])?;
        for (r, ((c, n), norm)) in self.classes.iter().zip(&self.counts).zip(&self.norms).enumerate() {
            w.write_record([r.to_string(), c.to_string(), n.to_string(), format!("{norm:.6}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TauSweepRow {
    pub tau: f64,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    pub all: f64,
}

/// One evaluation of the tau-normalized head per grid value.
pub fn tau_sweep(
    head: &ClassifierHead,
    eval: &Dataset,
    profile: &ClassProfile,
    grid: &[f64],
) -> Result<Vec<TauSweepRow>> {
    if grid.is_empty() {
        return Err(invalid("grid", "empty tau grid"));
    }
    grid.iter()
        .map(|&tau| {
            let r = evaluate(&tau_normalize(head, tau)?, eval, profile)?;
            Ok(TauSweepRow {
                tau,
                many: r.top1_many,
                medium: r.top1_medium,
                few: r.top1_few,
                all: r.top1_all,
            })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.4}"))
}

/// CSV: `tau,many,medium,few,all`.
pub fn write_tau_sweep_csv(rows: &[TauSweepRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["tau", "many", "medium", "few", "all"])?;
    for r in rows {
        w.write_record([
            format!("{}", r.tau),
            opt(r.many),
            opt(r.medium),
            opt(r.few),
            format!("{:.4}", r.all),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Parse `a:b:step` into an inclusive grid. Values are rounded to 1e-9 so
/// decimal steps land on the expected lattice.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || invalid("grid", format!("expected a:b:step, got {spec:?}"));
    let [a, b, step] = parts.as_slice() else {
        return Err(bad());
    };
    let (a, b, step): (f64, f64, f64) = (
        a.trim().parse().map_err(|_| bad())?,
        b.trim().parse().map_err(|_| bad())?,
        step.trim().parse().map_err(|_| bad())?,
    );
    if step.is_nan() || step <= 0.0 || !a.is_finite() || !b.is_finite() || b < a {
        return Err(bad());
    }
    let n = ((b - a) / step + 1e-9).floor() as usize + 1;
    Ok((0..n)
        .map(|i| ((a + i as f64 * step) * 1e9).round() / 1e9)
        .collect())
}
