//! Encoded datasets: column specs, normalization, splits and empirical CDFs.

mod idx;
mod synthetic;
mod tabular;

pub use idx::{load_idx_dataset, parse_idx_images, parse_idx_labels, standardize_image, IdxImages};
pub use synthetic::{
    digit_images, gaussian_blobs, make_moons, moons_points, ppca_toy, wine_like, PpcaToy,
};
pub use tabular::{load_tabular, parse_tabular, SchemaColumn, SchemaKind, Split};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use clue_tensor::Tensor;

use crate::error::{ClueError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnKind {
    /// Standardized with the stored training mean and std.
    Continuous { mean: f64, std: f64 },
    Categorical { categories: Vec<String> },
    /// Pixel intensity in `[0, 1]`.
    Bernoulli,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ColumnKind,
}

impl ColumnSpec {
    pub fn continuous(name: impl Into<String>, mean: f64, std: f64) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Continuous { mean, std },
        }
    }

    /// Continuous column already on the standardized scale.
    pub fn standard(name: impl Into<String>) -> Self {
        Self::continuous(name, 0.0, 1.0)
    }

    pub fn categorical(name: impl Into<String>, k: usize) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Categorical {
                categories: (0..k).map(|i| i.to_string()).collect(),
            },
        }
    }

    pub fn bernoulli(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Bernoulli,
        }
    }

    /// Number of encoded features.
    pub fn width(&self) -> usize {
        match &self.kind {
            ColumnKind::Categorical { categories } => categories.len(),
            _ => 1,
        }
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, ColumnKind::Categorical { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            ColumnKind::Continuous { std, .. } if !(*std > 0.0) => {
                Err(ClueError::ZeroVariance(self.name.clone()))
            }
            ColumnKind::Categorical { categories } if categories.len() < 2 => Err(
                ClueError::Config(format!("categorical column `{}` needs K >= 2", self.name)),
            ),
            _ => Ok(()),
        }
    }
}

/// Encoded width of a column list.
pub fn encoded_width(columns: &[ColumnSpec]) -> usize {
    columns.iter().map(ColumnSpec::width).sum()
}

/// Start offset of every column in the encoded feature vector.
pub fn column_offsets(columns: &[ColumnSpec]) -> Vec<usize> {
    let mut off = 0;
    columns
        .iter()
        .map(|c| {
            let o = off;
            off += c.width();
            o
        })
        .collect()
}

/// Expands a per-column mask to a per-feature mask.
pub fn expand_column_mask(columns: &[ColumnSpec], mask: &[f64]) -> Vec<f64> {
    columns
        .iter()
        .zip(mask)
        .flat_map(|(c, &m)| std::iter::repeat_n(m, c.width()))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Classification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TargetSpec {
    /// Targets are stored standardized.
    Regression { name: String, mean: f64, std: f64 },
    Classification { name: String, classes: Vec<String> },
}

impl TargetSpec {
    pub fn kind(&self) -> TaskKind {
        match self {
            TargetSpec::Regression { .. } => TaskKind::Regression,
            TargetSpec::Classification { .. } => TaskKind::Classification,
        }
    }

    pub fn n_classes(&self) -> Option<usize> {
        match self {
            TargetSpec::Classification { classes, .. } => Some(classes.len()),
            TargetSpec::Regression { .. } => None,
        }
    }

    /// `(mean, std)` used to standardize regression targets; identity for
    /// classification.
    pub fn scale(&self) -> (f64, f64) {
        match self {
            TargetSpec::Regression { mean, std, .. } => (*mean, *std),
            TargetSpec::Classification { .. } => (0.0, 1.0),
        }
    }
}

/// Training-set order statistics of a continuous column (original units).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalCdf {
    sorted: Vec<f64>,
}

impl EmpiricalCdf {
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(ClueError::Empty("column sample"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(ClueError::NonFinite {
                what: "column value",
                index: i,
            });
        }
        values.sort_by(f64::total_cmp);
        Ok(Self { sorted: values })
    }

    /// Percentile in `[0, 100]`: order statistic `s_i` maps to
    /// `100·i/(n−1)` with linear interpolation in between; ties map to the
    /// highest tied index.
    pub fn percentile(&self, v: f64) -> f64 {
        let s = &self.sorted;
        let n = s.len();
        if n == 1 {
            return if v < s[0] {
                0.0
            } else if v > s[0] {
                100.0
            } else {
                50.0
            };
        }
        let le = s.partition_point(|&x| x <= v);
        if le == 0 {
            return 0.0;
        }
        let i = le - 1;
        if i == n - 1 {
            return 100.0;
        }
        let frac = (v - s[i]) / (s[i + 1] - s[i]);
        100.0 * (i as f64 + frac) / (n - 1) as f64
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct EncodedDataset {
    pub columns: Vec<ColumnSpec>,
    /// Encoded features `[n, d]`.
    pub x: Tensor,
    /// Standardized regression targets or class indices.
    pub y: Vec<f64>,
    pub target: TargetSpec,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Per input column; `Some` for continuous columns.
    pub cdfs: Vec<Option<EmpiricalCdf>>,
}

impl EncodedDataset {
    /// Wraps already-encoded features; CDFs come from the training rows.
    pub fn from_encoded(
        columns: Vec<ColumnSpec>,
        x: Tensor,
        y: Vec<f64>,
        target: TargetSpec,
        train: Vec<usize>,
        test: Vec<usize>,
    ) -> Result<Self> {
        for c in &columns {
            c.validate()?;
        }
        let d = encoded_width(&columns);
        if x.rank() != 2 || x.cols() != d {
            return Err(ClueError::Dimension {
                context: "encoded features",
                expected: d,
                got: x.cols(),
            });
        }
        if y.len() != x.rows() {
            return Err(ClueError::Dimension {
                context: "targets",
                expected: x.rows(),
                got: y.len(),
            });
        }
        let mut ds = Self {
            columns,
            x,
            y,
            target,
            train,
            test,
            cdfs: Vec::new(),
        };
        ds.cdfs = ds.build_cdfs()?;
        Ok(ds)
    }

    fn build_cdfs(&self) -> Result<Vec<Option<EmpiricalCdf>>> {
        let offsets = column_offsets(&self.columns);
        self.columns
            .iter()
            .zip(offsets)
            .map(|(c, off)| match c.kind {
                ColumnKind::Continuous { mean, std } if !self.train.is_empty() => {
                    let vals = self
                        .train
                        .iter()
                        .map(|&r| self.x.row(r)[off] * std + mean)
                        .collect();
                    EmpiricalCdf::new(vals).map(Some)
                }
                _ => Ok(None),
            })
            .collect()
    }

    pub fn n_rows(&self) -> usize {
        self.x.rows()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn task(&self) -> TaskKind {
        self.target.kind()
    }

    pub fn x_train(&self) -> Tensor {
        self.x.select_rows(&self.train)
    }

    pub fn x_test(&self) -> Tensor {
        self.x.select_rows(&self.test)
    }

    pub fn y_train(&self) -> Vec<f64> {
        self.train.iter().map(|&i| self.y[i]).collect()
    }

    pub fn y_test(&self) -> Vec<f64> {
        self.test.iter().map(|&i| self.y[i]).collect()
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| ClueError::MissingColumn(name.to_string()))
    }

    /// Percentile of an original-unit value within a continuous column's
    /// training distribution.
    pub fn percentile(&self, column: usize, value: f64) -> Result<f64> {
        let c = self
            .columns
            .get(column)
            .ok_or_else(|| ClueError::MissingColumn(column.to_string()))?;
        match &self.cdfs[column] {
            Some(cdf) => Ok(cdf.percentile(value)),
            None => Err(ClueError::NotContinuous(c.name.clone())),
        }
    }

    /// Decodes an encoded row into one value per column: original units for
    /// continuous columns, category index for categorical ones (argmax).
    pub fn decode_row(&self, row: &[f64]) -> Vec<f64> {
        decode_row(&self.columns, row)
    }

    /// Encoded row from per-column values (inverse of [`decode_row`]).
    pub fn encode_row(&self, values: &[f64]) -> Vec<f64> {
        encode_row(&self.columns, values)
    }
}

pub fn decode_row(columns: &[ColumnSpec], row: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(columns.len());
    let mut off = 0;
    for c in columns {
        match &c.kind {
            ColumnKind::Continuous { mean, std } => out.push(row[off] * std + mean),
            ColumnKind::Categorical { categories } => {
                let block = &row[off..off + categories.len()];
                out.push(argmax(block) as f64);
            }
            ColumnKind::Bernoulli => out.push(row[off]),
        }
        off += c.width();
    }
    out
}

pub fn encode_row(columns: &[ColumnSpec], values: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoded_width(columns));
    for (c, &v) in columns.iter().zip(values) {
        match &c.kind {
            ColumnKind::Continuous { mean, std } => out.push((v - mean) / std),
            ColumnKind::Categorical { categories } => {
                let k = v as usize;
                out.extend((0..categories.len()).map(|j| if j == k { 1.0 } else { 0.0 }));
            }
            ColumnKind::Bernoulli => out.push(v),
        }
    }
    out
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Deterministic shuffled split into `n_train` and `n_test` row indices.
pub fn split_indices(n: usize, n_train: usize, n_test: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_train + n_test > n || n_train == 0 {
        return Err(ClueError::Config(format!(
            "split {n_train}/{n_test} does not fit {n} rows"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = idx[..n_train].to_vec();
    let test = idx[n_train..n_train + n_test].to_vec();
    Ok((train, test))
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let v = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}
