//! Datasets of fixed feature vectors, class statistics and the
//! many/medium/few split assignment, synthetic long-tail generation and the
//! text feature-file format.
//!
//! Feature file layout:
//!
//! ```text
//! # comments and blank lines are skipped
//! n d C
//! label f_1 ... f_d      (n rows)
//! ```

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng;

/// Default split thresholds: many-shot above 100 instances, few-shot below 20.
pub const MANY_THRESHOLD: usize = 100;
pub const FEW_THRESHOLD: usize = 20;

/// Feature matrix (`n x d`) with integer labels in `[0, classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    /// Validates labels, finiteness and that every class is populated.
    pub fn new(features: Array2<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: features.nrows(),
                got: labels.len(),
            });
        }
        if classes == 0 {
            return Err(invalid("classes", "must be at least 1"));
        }
        let mut counts = vec![0usize; classes];
        for &label in &labels {
            if label >= classes {
                return Err(Error::LabelOutOfRange { label, classes });
            }
            counts[label] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::EmptyClass(empty));
        }
        for (i, row) in features.rows().into_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(i));
            }
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Instance indices grouped by class.
    pub fn class_members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            members[l].push(i);
        }
        members
    }

    /// Replace the features while keeping labels, e.g. after passing the
    /// data through a frozen representation.
    pub fn with_features(&self, features: Array2<f64>) -> Result<Self> {
        Self::new(features, self.labels.clone(), self.classes)
    }
}

/// Shot split of a class, decided by its training cardinality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Many,
    Medium,
    Few,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Many, Split::Medium, Split::Few];

    /// Exclusive on both ends: `count == high` and `count == low` are medium.
    pub fn classify(count: usize, high: usize, low: usize) -> Self {
        if count > high {
            Split::Many
        } else if count < low {
            Split::Few
        } else {
            Split::Medium
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Many => "many",
            Split::Medium => "medium",
            Split::Few => "few",
        })
    }
}

/// Per-class training cardinalities with their sorted order and split tags.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProfile {
    pub counts: Vec<usize>,
    /// Class indices sorted by descending count; ties keep index order.
    pub order: Vec<usize>,
    pub splits: Vec<Split>,
}

impl ClassProfile {
    pub fn from_counts(counts: Vec<usize>, high: usize, low: usize) -> Result<Self> {
        if low < 1 || high < low {
            return Err(invalid(
                "thresholds",
                format!("need high >= low >= 1, got high={high} low={low}"),
            ));
        }
        let mut order: Vec<usize> = (0..counts.len()).collect();
        order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        let splits = counts
            .iter()
            .map(|&c| Split::classify(c, high, low))
            .collect();
        Ok(Self {
            counts,
            order,
            splits,
        })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn sorted_counts(&self) -> Vec<usize> {
        self.order.iter().map(|&j| self.counts[j]).collect()
    }
}

pub fn class_profile(dataset: &Dataset, high: usize, low: usize) -> Result<ClassProfile> {
    ClassProfile::from_counts(dataset.counts(), high, low)
}

/// Shape of the per-class count curve from head to tail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decay {
    /// `n_j = n_max * (n_min / n_max)^(j / (C - 1))`
    #[default]
    Exponential,
    /// `n_j = n_max * (j + 1)^(-a)` with `a` chosen to hit `n_min` at the tail.
    PowerLaw,
}

/// Parameters of a synthetic long-tailed Gaussian-blob task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub n_max: usize,
    pub n_min: usize,
    pub decay: Decay,
    pub dim: usize,
    /// Minimum distance between class centroids, in within-class standard
    /// deviations.
    pub class_separation: f64,
    pub seed: u64,
    pub val_per_class: usize,
    pub test_per_class: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 50,
            n_max: 500,
            n_min: 5,
            decay: Decay::Exponential,
            dim: 64,
            class_separation: 4.0,
            seed: 0,
            val_per_class: 20,
            test_per_class: 20,
        }
    }
}

impl SyntheticSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(invalid("classes", "must be at least 1"));
        }
        if self.dim == 0 {
            return Err(invalid("dim", "must be at least 1"));
        }
        if self.n_min < 1 {
            return Err(invalid("n_min", "must be at least 1"));
        }
        if self.n_max < self.n_min {
            return Err(invalid(
                "n_max",
                format!("n_max ({}) < n_min ({})", self.n_max, self.n_min),
            ));
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return Err(invalid("class_separation", "must be positive and finite"));
        }
        if self.val_per_class < 1 || self.test_per_class < 1 {
            return Err(invalid("val_per_class/test_per_class", "must be at least 1"));
        }
        Ok(())
    }

    /// Training counts per class, non-increasing in class index.
    pub fn train_counts(&self) -> Vec<usize> {
        let c = self.classes;
        if c == 1 {
            return vec![self.n_max];
        }
        let (hi, lo) = (self.n_max as f64, self.n_min as f64);
        (0..c)
            .map(|j| {
                let n = match self.decay {
                    Decay::Exponential => hi * (lo / hi).powf(j as f64 / (c - 1) as f64),
                    Decay::PowerLaw => {
                        let a = (hi / lo).ln() / (c as f64).ln();
                        hi * ((j + 1) as f64).powf(-a)
                    }
                };
                (n.round() as usize).clamp(self.n_min, self.n_max)
            })
            .collect()
    }
}

/// Unit-variance Gaussian blobs with long-tailed training counts and
/// balanced validation/test sets. Deterministic in `spec.seed`.
pub fn generate_longtail(spec: &SyntheticSpec) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    let centroids = sample_centroids(spec)?;
    let train_counts = spec.train_counts();
    let train = sample_blobs(&centroids, &train_counts, rng::derive_seed(spec.seed, &[1]))?;
    let val = sample_blobs(
        &centroids,
        &vec![spec.val_per_class; spec.classes],
        rng::derive_seed(spec.seed, &[2]),
    )?;
    let test = sample_blobs(
        &centroids,
        &vec![spec.test_per_class; spec.classes],
        rng::derive_seed(spec.seed, &[3]),
    )?;
    Ok((train, val, test))
}

/// Random directions scaled so the closest pair sits exactly
/// `class_separation` apart.
fn sample_centroids(spec: &SyntheticSpec) -> Result<Array2<f64>> {
    let mut rng = rng::stream(spec.seed, &[0]);
    let (c, d) = (spec.classes, spec.dim);
    let mut dirs = Array2::<f64>::zeros((c, d));
    for mut row in dirs.rows_mut() {
        loop {
            row.iter_mut()
                .for_each(|v| *v = StandardNormal.sample(&mut rng));
            let norm = row.dot(&row).sqrt();
            if norm > 1e-12 {
                row.mapv_inplace(|v| v / norm);
                break;
            }
        }
    }
    if c == 1 {
        return Ok(dirs * spec.class_separation);
    }
    let mut min_dist = f64::INFINITY;
    for a in 0..c {
        for b in a + 1..c {
            let diff = &dirs.row(a) - &dirs.row(b);
            min_dist = min_dist.min(diff.dot(&diff).sqrt());
        }
    }
    if min_dist < 1e-9 {
        return Err(invalid(
            "dim",
            format!("cannot place {c} distinct centroids in {d} dimensions"),
        ));
    }
    Ok(dirs * (spec.class_separation / min_dist))
}

fn sample_blobs(centroids: &Array2<f64>, counts: &[usize], seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = counts.iter().sum();
    let d = centroids.ncols();
    let mut features = Array2::<f64>::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for (class, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let centroid = centroids.row(class);
            for (k, v) in features.row_mut(row).iter_mut().enumerate() {
                let noise: f64 = rng.sample(StandardNormal);
                *v = centroid[k] + noise;
            }
            labels.push(class);
            row += 1;
        }
    }
    Dataset::new(features, labels, counts.len())
}

/// Shortest representation that parses back to the identical `f64`.
pub(crate) fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-5..1e16).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

pub fn load_feature_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_feature_dataset(&text, path)
}

pub(crate) fn parse_feature_dataset(text: &str, path: &Path) -> Result<Dataset> {
    let err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (hline, header) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let parse_dim = |s: &str| s.parse::<usize>().ok();
    let (n, d, c) = match fields.as_slice() {
        [n, d, c] => match (parse_dim(n), parse_dim(d), parse_dim(c)) {
            (Some(n), Some(d), Some(c)) if d > 0 && c > 0 => (n, d, c),
            _ => return Err(err(hline, format!("malformed header {header:?}"))),
        },
        _ => {
            return Err(err(
                hline,
                format!("malformed header {header:?}, expected \"n d C\""),
            ))
        }
    };

    let mut features = Array2::<f64>::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    let mut counts = vec![0usize; c];
    for (lineno, line) in lines {
        let row = labels.len();
        if row == n {
            return Err(err(lineno, format!("more than the declared {n} rows")));
        }
        let mut tokens = line.split_whitespace();
        let label_tok = tokens.next().unwrap_or_default();
        let label: usize = label_tok
            .parse()
            .map_err(|_| err(lineno, format!("invalid label {label_tok:?}")))?;
        if label >= c {
            return Err(err(
                lineno,
                format!("label {label} out of range for {c} classes"),
            ));
        }
        let values: Vec<&str> = tokens.collect();
        if values.len() != d {
            return Err(err(
                lineno,
                format!(
                    "row arity mismatch at line {lineno}: expected {d} features, got {}",
                    values.len()
                ),
            ));
        }
        for (k, tok) in values.iter().enumerate() {
            let v: f64 = tok
                .parse()
                .map_err(|_| err(lineno, format!("invalid feature value {tok:?}")))?;
            if !v.is_finite() {
                return Err(err(lineno, format!("non-finite feature value {tok:?}")));
            }
            features[[row, k]] = v;
        }
        labels.push(label);
        counts[label] += 1;
    }
    if labels.len() != n {
        return Err(err(
            hline,
            format!("header declares {n} rows, found {}", labels.len()),
        ));
    }
    if let Some(empty) = counts.iter().position(|&k| k == 0) {
        return Err(err(hline, format!("empty class {empty}")));
    }
    Dataset::new(features, labels, c)
}

pub fn write_feature_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    write_features_to(dataset, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_features_to(dataset: &Dataset, out: &mut impl Write) -> Result<()> {
    writeln!(
        out,
        "{} {} {}",
        dataset.len(),
        dataset.dim(),
        dataset.classes()
    )?;
    for (row, &label) in dataset.features.rows().into_iter().zip(&dataset.labels) {
        write!(out, "{label}")?;
        for &v in row {
            write!(out, " {}", fmt_f64(v))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<Dataset> {
        parse_feature_dataset(text, Path::new("mem"))
    }

    #[test]
    fn parses_small_file() {
        let ds = parse("3 2 2\n0 1.0 0.0\n0 0.9 0.1\n1 0.0 1.0\n").unwrap();
        assert_eq!((ds.len(), ds.dim(), ds.classes()), (3, 2, 2));
        assert_eq!(ds.counts(), vec![2, 1]);
        assert_eq!(ds.features()[[1, 1]], 0.1);
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let ds = parse("# header next\n2 1 1\n\n0 1.5\n# mid\n0 -2\n").unwrap();
        assert_eq!(ds.len(), 2);
    }

    #[test]
    fn empty_class_is_reported() {
        let e = parse("2 1 3\n0 1\n1 1\n").unwrap_err().to_string();
        assert!(e.contains("empty class 2"), "{e}");
    }

    #[test]
    fn row_arity_mismatch_names_line() {
        let e = parse("2 2 1\n0 1.0 2.0\n0 1.0\n").unwrap_err();
        match e {
            Error::Parse { line, reason, .. } => {
                assert_eq!(line, 3);
                assert!(reason.contains("row arity mismatch at line 3"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn malformed_header_and_bad_label() {
        assert!(matches!(parse("2 x 1\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(
            parse("1 1 2\n5 0.0\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse("3 1 1\n0 0.0\n"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn split_boundaries_are_medium() {
        let p = ClassProfile::from_counts(vec![150, 50, 5], 100, 20).unwrap();
        assert_eq!(p.splits, vec![Split::Many, Split::Medium, Split::Few]);
        let p = ClassProfile::from_counts(vec![100, 20], 100, 20).unwrap();
        assert_eq!(p.splits, vec![Split::Medium, Split::Medium]);
        let p = ClassProfile::from_counts(vec![7, 7, 7], 100, 20).unwrap();
        assert_eq!(p.splits, vec![Split::Few; 3]);
        assert!(ClassProfile::from_counts(vec![1], 10, 20).is_err());
        assert!(ClassProfile::from_counts(vec![1], 10, 0).is_err());
    }

    #[test]
    fn profile_order_is_descending() {
        let p = ClassProfile::from_counts(vec![3, 9, 3, 12], 100, 20).unwrap();
        assert_eq!(p.order, vec![3, 1, 0, 2]);
        assert_eq!(p.sorted_counts(), vec![12, 9, 3, 3]);
        assert_eq!(p.total(), 27);
    }

    #[test]
    fn exponential_counts_hit_endpoints() {
        let spec = SyntheticSpec {
            classes: 3,
            n_max: 8,
            n_min: 2,
            dim: 4,
            ..Default::default()
        };
        assert_eq!(spec.train_counts(), vec![8, 4, 2]);
        let flat = SyntheticSpec {
            n_max: 5,
            n_min: 5,
            ..spec.clone()
        };
        assert_eq!(flat.train_counts(), vec![5, 5, 5]);
        let pl = SyntheticSpec {
            decay: Decay::PowerLaw,
            classes: 10,
            n_max: 100,
            n_min: 10,
            ..spec
        };
        let counts = pl.train_counts();
        assert_eq!((counts[0], counts[9]), (100, 10));
    }

    #[test]
    fn infeasible_spec_rejected() {
        let spec = SyntheticSpec {
            n_min: 0,
            ..Default::default()
        };
        assert!(generate_longtail(&spec).is_err());
        let spec = SyntheticSpec {
            n_max: 3,
            n_min: 4,
            ..Default::default()
        };
        assert!(generate_longtail(&spec).is_err());
    }

    #[test]
    fn generation_is_deterministic_and_balanced_on_eval() {
        let spec = SyntheticSpec {
            classes: 5,
            n_max: 40,
            n_min: 3,
            dim: 6,
            seed: 11,
            ..Default::default()
        };
        let a = generate_longtail(&spec).unwrap();
        let b = generate_longtail(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1.counts(), vec![20; 5]);
        assert_eq!(a.2.counts(), vec![20; 5]);
        assert_eq!(a.0.counts(), spec.train_counts());
    }

    #[test]
    fn centroid_min_distance_matches_separation() {
        let spec = SyntheticSpec {
            classes: 6,
            dim: 5,
            class_separation: 2.5,
            ..Default::default()
        };
        let c = sample_centroids(&spec).unwrap();
        let mut min = f64::INFINITY;
        for a in 0..6 {
            for b in a + 1..6 {
                let diff = &c.row(a) - &c.row(b);
                min = min.min(diff.dot(&diff).sqrt());
            }
        }
        assert!((min - 2.5).abs() < 1e-12);
    }

    #[test]
    fn dataset_rejects_non_finite() {
        let e = Dataset::new(array![[1.0], [f64::NAN]], vec![0, 0], 1).unwrap_err();
        assert!(matches!(e, Error::NonFinite(1)));
    }

    proptest! {
        #[test]
        fn train_counts_monotone_and_bounded(
            classes in 1usize..60, n_min in 1usize..50, extra in 0usize..500, power in any::<bool>()
        ) {
            let spec = SyntheticSpec {
                classes, n_min, n_max: n_min + extra,
                decay: if power { Decay::PowerLaw } else { Decay::Exponential },
                ..Default::default()
            };
            let counts = spec.train_counts();
            prop_assert_eq!(counts[0], spec.n_max);
            prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(counts.iter().all(|&c| c >= spec.n_min && c <= spec.n_max));
        }

        #[test]
        fn file_round_trip_is_exact(
            rows in proptest::collection::vec(
                (0usize..3, proptest::collection::vec(-1e20f64..1e20, 3)), 3..20),
            tiny in -1e-300f64..1e-300,
        ) {
            let mut labels: Vec<usize> = rows.iter().map(|r| r.0).collect();
            labels[0] = 0; labels[1] = 1; labels[2] = 2;
            let mut feats = Array2::zeros((rows.len(), 3));
            for (i, (_, v)) in rows.iter().enumerate() {
                for k in 0..3 { feats[[i, k]] = v[k]; }
            }
            feats[[0, 0]] = tiny;
            let ds = Dataset::new(feats, labels, 3).unwrap();
            let mut buf = Vec::new();
            write_features_to(&ds, &mut buf).unwrap();
            let back = parse(std::str::from_utf8(&buf).unwrap()).unwrap();
            prop_assert_eq!(back, ds);
        }
    }
}
