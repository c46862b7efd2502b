//! Classifier heads on fixed features and their text serialization.
//!
//! A head is an optional stack of ReLU hidden layers followed by a weight
//! matrix `W` (`d x C`, one column per class), an optional bias and optional
//! per-class scales. Logits are `f_j * (w_j . h) + b_j` for the linear
//! family and cosine similarities for the `ncm` and `cosine` kinds.
//!
//! Serialized layout (comments and blank lines skipped):
//!
//! ```text
//! d C kind
//! hidden h_1 ... h_k        # only when hidden layers exist
//! <per hidden layer: `in` rows of `out` weights, then one row of `out` biases>
//! <d_last rows of C weights>
//! b b_1 ... b_C             # optional
//! f f_1 ... f_C             # optional
//! ```

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::fmt_f64;
use crate::error::{invalid, Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Linear,
    TauNormalized,
    Ncm,
    Cosine,
    Mlp,
}

impl HeadKind {
    /// Kinds that score classes by cosine similarity instead of dot products.
    pub fn is_cosine(&self) -> bool {
        matches!(self, HeadKind::Ncm | HeadKind::Cosine)
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Linear => "linear",
            HeadKind::TauNormalized => "tau_normalized",
            HeadKind::Ncm => "ncm",
            HeadKind::Cosine => "cosine",
            HeadKind::Mlp => "mlp",
        })
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "linear" => HeadKind::Linear,
            "tau_normalized" => HeadKind::TauNormalized,
            "ncm" => HeadKind::Ncm,
            "cosine" => HeadKind::Cosine,
            "mlp" => HeadKind::Mlp,
            other => return Err(invalid("kind", format!("unknown head kind {other:?}"))),
        })
    }
}

/// Fully connected layer followed by a ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `in x out`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    pub fn forward(&self, input: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = input.dot(&self.weights) + &self.bias;
        out.mapv_inplace(|v| v.max(0.0));
        out
    }
}

/// Result of a single prediction. `degenerate` marks queries for which the
/// score is undefined (zero vector under a cosine metric); those resolve to
/// class 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prediction {
    pub class: usize,
    pub degenerate: bool,
}

/// Anything that maps a feature vector to a class.
pub trait Predictor: Sync {
    fn input_dim(&self) -> usize;
    fn classes(&self) -> usize;
    fn predict_checked(&self, z: ArrayView1<'_, f64>) -> Prediction;

    fn predict(&self, z: ArrayView1<'_, f64>) -> usize {
        self.predict_checked(z).class
    }

    /// Predictions for every row of `features`.
    fn predict_batch(&self, features: ArrayView2<'_, f64>) -> Vec<usize> {
        features
            .rows()
            .into_iter()
            .map(|r| self.predict(r))
            .collect()
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub kind: HeadKind,
    pub hidden: Vec<DenseLayer>,
    /// `d_last x C`
    pub weights: Array2<f64>,
    pub bias: Option<Array1<f64>>,
    pub scales: Option<Array1<f64>>,
}

impl ClassifierHead {
    pub fn linear(weights: Array2<f64>, bias: Option<Array1<f64>>) -> Self {
        Self {
            kind: HeadKind::Linear,
            hidden: Vec::new(),
            weights,
            bias,
            scales: None,
        }
    }

    pub fn classes(&self) -> usize {
        self.weights.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.hidden
            .first()
            .map_or(self.weights.nrows(), |l| l.weights.nrows())
    }

    /// Dimension of the representation the final layer sees.
    pub fn feature_dim(&self) -> usize {
        self.weights.nrows()
    }

    /// Pass a batch through the hidden layers.
    pub fn represent(&self, features: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut h = features.to_owned();
        for layer in &self.hidden {
            h = layer.forward(h.view());
        }
        h
    }

    /// The hidden stack alone, as a frozen representation.
    pub fn backbone(&self) -> Vec<DenseLayer> {
        self.hidden.clone()
    }

    /// The final classifier without hidden layers.
    pub fn top(&self) -> ClassifierHead {
        ClassifierHead {
            kind: if self.kind == HeadKind::Mlp {
                HeadKind::Linear
            } else {
                self.kind
            },
            hidden: Vec::new(),
            weights: self.weights.clone(),
            bias: self.bias.clone(),
            scales: self.scales.clone(),
        }
    }

    /// Column `j` of `W` with its scale factor applied.
    pub fn effective_weight(&self, j: usize) -> Array1<f64> {
        let w = self.weights.column(j).to_owned();
        match &self.scales {
            Some(f) => w * f[j],
            None => w,
        }
    }

    /// Per-class L2 norms of the effective weights.
    pub fn class_norms(&self) -> Vec<f64> {
        (0..self.classes())
            .map(|j| {
                let w = self.weights.column(j);
                let n = w.dot(&w).sqrt();
                self.scales.as_ref().map_or(n, |f| n * f[j].abs())
            })
            .collect()
    }

    /// Logits for a batch of representations (after hidden layers).
    pub fn logits_from_repr(&self, repr: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = repr.dot(&self.weights);
        if self.kind.is_cosine() {
            let col_norms = self.weights.map_axis(Axis(0), |c| c.dot(&c).sqrt());
            for (mut row, z) in out.rows_mut().into_iter().zip(repr.rows()) {
                let zn = z.dot(&z).sqrt();
                for (v, &wn) in row.iter_mut().zip(&col_norms) {
                    let denom = zn * wn;
                    *v = if denom > 0.0 { *v / denom } else { 0.0 };
                }
            }
            return out;
        }
        if let Some(f) = &self.scales {
            out *= f;
        }
        if let Some(b) = &self.bias {
            out += b;
        }
        out
    }

    pub fn logits(&self, features: ArrayView2<'_, f64>) -> Array2<f64> {
        if self.hidden.is_empty() {
            self.logits_from_repr(features)
        } else {
            self.logits_from_repr(self.represent(features).view())
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "{} {} {}", self.input_dim(), self.classes(), self.kind)?;
        if !self.hidden.is_empty() {
            write!(out, "hidden")?;
            for layer in &self.hidden {
                write!(out, " {}", layer.weights.ncols())?;
            }
            writeln!(out)?;
        }
        let write_row = |out: &mut dyn Write, prefix: Option<&str>, row: ArrayView1<'_, f64>| {
            let mut line = String::new();
            if let Some(p) = prefix {
                line.push_str(p);
            }
            for (i, &v) in row.iter().enumerate() {
                if i > 0 || prefix.is_some() {
                    line.push(' ');
                }
                line.push_str(&fmt_f64(v));
            }
            writeln!(out, "{line}")
        };
        for layer in &self.hidden {
            for row in layer.weights.rows() {
                write_row(out, None, row)?;
            }
            write_row(out, None, layer.bias.view())?;
        }
        for row in self.weights.rows() {
            write_row(out, None, row)?;
        }
        if let Some(b) = &self.bias {
            write_row(out, Some("b"), b.view())?;
        }
        if let Some(f) = &self.scales {
            write_row(out, Some("f"), f.view())?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path)?, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, reason: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
            .peekable();

        let (hline, header) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let [d, c, kind] = fields.as_slice() else {
            return Err(err(hline, format!("malformed header {header:?}, expected \"d C kind\"")));
        };
        let d: usize = d
            .parse()
            .map_err(|_| err(hline, format!("invalid dimension {d:?}")))?;
        let c: usize = c
            .parse()
            .map_err(|_| err(hline, format!("invalid class count {c:?}")))?;
        let kind: HeadKind = kind.parse().map_err(|e: Error| err(hline, e.to_string()))?;
        if d == 0 || c == 0 {
            return Err(err(hline, "dimensions must be positive".into()));
        }

        let mut widths = Vec::new();
        if let Some(&(lno, line)) = lines.peek() {
            if let Some(rest) = line.strip_prefix("hidden") {
                for tok in rest.split_whitespace() {
                    widths.push(
                        tok.parse::<usize>()
                            .ok()
                            .filter(|&w| w > 0)
                            .ok_or_else(|| err(lno, format!("invalid hidden width {tok:?}")))?,
                    );
                }
                lines.next();
            }
        }

        let mut read_row = |expected: usize, prefix: Option<&str>| -> Result<Option<Array1<f64>>> {
            let Some(&(lno, line)) = lines.peek() else {
                return Ok(None);
            };
            let body = match prefix {
                Some(p) => match line.strip_prefix(p) {
                    Some(rest) if rest.starts_with(char::is_whitespace) => rest,
                    _ => return Ok(None),
                },
                None => line,
            };
            lines.next();
            let values = body
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| err(lno, format!("invalid value {t:?}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            if values.len() != expected {
                return Err(err(
                    lno,
                    format!("row arity mismatch at line {lno}: expected {expected}, got {}", values.len()),
                ));
            }
            Ok(Some(Array1::from(values)))
        };
        let mut read_matrix = |rows: usize, cols: usize| -> Result<Array2<f64>> {
            let mut m = Array2::zeros((rows, cols));
            for r in 0..rows {
                let row = read_row(cols, None)?
                    .ok_or_else(|| err(hline, format!("truncated: expected {rows} rows of {cols}")))?;
                m.row_mut(r).assign(&row);
            }
            Ok(m)
        };

        let mut hidden = Vec::with_capacity(widths.len());
        let mut fan_in = d;
        for &w in &widths {
            let weights = read_matrix(fan_in, w)?;
            let bias = read_matrix(1, w)?.row(0).to_owned();
            hidden.push(DenseLayer { weights, bias });
            fan_in = w;
        }
        let weights = read_matrix(fan_in, c)?;
        let bias = read_row(c, Some("b"))?;
        let scales = read_row(c, Some("f"))?;
        if let Some((lno, line)) = lines.next() {
            return Err(err(lno, format!("unexpected trailing content {line:?}")));
        }
        if kind == HeadKind::Mlp && hidden.is_empty() {
            return Err(err(hline, "mlp head without hidden layers".into()));
        }
        Ok(Self {
            kind,
            hidden,
            weights,
            bias,
            scales,
        })
    }
}

impl Predictor for ClassifierHead {
    fn input_dim(&self) -> usize {
        ClassifierHead::input_dim(self)
    }

    fn classes(&self) -> usize {
        ClassifierHead::classes(self)
    }

    fn predict_checked(&self, z: ArrayView1<'_, f64>) -> Prediction {
        let batch = z.insert_axis(Axis(0));
        let repr = if self.hidden.is_empty() {
            batch.to_owned()
        } else {
            self.represent(batch)
        };
        if self.kind.is_cosine() && repr.iter().all(|&v| v == 0.0) {
            return Prediction {
                class: 0,
                degenerate: true,
            };
        }
        let logits = self.logits_from_repr(repr.view());
        Prediction {
            class: argmax(logits.row(0).iter().copied()),
            degenerate: false,
        }
    }

    fn predict_batch(&self, features: ArrayView2<'_, f64>) -> Vec<usize> {
        let logits = self.logits(features);
        logits
            .rows()
            .into_iter()
            .map(|r| argmax(r.iter().copied()))
            .collect()
    }
}

/// Fresh head with `W` uniform in `[-1/sqrt(d), 1/sqrt(d)]` and zero bias.
/// Cosine-scored kinds carry no bias.
pub fn init_head(d: usize, classes: usize, kind: HeadKind, seed: u64) -> Result<ClassifierHead> {
    if kind == HeadKind::Mlp {
        return Err(invalid("kind", "use init_mlp for mlp heads"));
    }
    init_mlp(d, &[], classes, seed).map(|mut h| {
        h.kind = kind;
        if kind.is_cosine() || kind == HeadKind::TauNormalized {
            h.bias = None;
        }
        h
    })
}

/// Head with ReLU hidden layers of the given widths (a plain linear head
/// when `hidden` is empty).
pub fn init_mlp(d: usize, hidden: &[usize], classes: usize, seed: u64) -> Result<ClassifierHead> {
    if d == 0 || classes == 0 || hidden.contains(&0) {
        return Err(invalid("dimensions", "all layer widths must be at least 1"));
    }
    let mut rng = rng::stream(seed, &[0x1417]);
    let mut uniform = |rows: usize, cols: usize| {
        let bound = 1.0 / (rows as f64).sqrt();
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
    };
    let mut layers = Vec::with_capacity(hidden.len());
    let mut fan_in = d;
    for &w in hidden {
        layers.push(DenseLayer {
            weights: uniform(fan_in, w),
            bias: Array1::zeros(w),
        });
        fan_in = w;
    }
    let weights = uniform(fan_in, classes);
    Ok(ClassifierHead {
        kind: if hidden.is_empty() {
            HeadKind::Linear
        } else {
            HeadKind::Mlp
        },
        hidden: layers,
        weights,
        bias: Some(Array1::zeros(classes)),
        scales: None,
    })
}
