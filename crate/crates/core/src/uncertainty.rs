//! Predictive uncertainty and its aleatoric/epistemic decomposition.
//!
//! Classification uses entropies in nats; regression uses the variance of
//! the Gaussian mixture formed by the ensemble members. All regression
//! quantities are in original target units.

use serde::{Deserialize, Serialize};

use clue_tensor::{Tape, Tensor, Var};

use crate::datasets::TaskKind;
use crate::error::{ClueError, Result};

/// Rounding slack below zero that is clamped instead of rejected.
pub const NEGATIVE_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum UncertaintyReport {
    Classification {
        probs: Vec<f64>,
        h_total: f64,
        h_aleatoric: f64,
        h_epistemic: f64,
    },
    Regression {
        mean: f64,
        var_total: f64,
        var_aleatoric: f64,
        var_epistemic: f64,
    },
}

/// Which part of the decomposition an objective or policy looks at.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyKind {
    #[default]
    Total,
    Aleatoric,
    Epistemic,
}

impl UncertaintyReport {
    pub fn task(&self) -> TaskKind {
        match self {
            Self::Classification { .. } => TaskKind::Classification,
            Self::Regression { .. } => TaskKind::Regression,
        }
    }

    /// Entropy for classification, standard deviation for regression.
    pub fn metric(&self, kind: UncertaintyKind) -> f64 {
        match (self, kind) {
            (Self::Classification { h_total, .. }, UncertaintyKind::Total) => *h_total,
            (Self::Classification { h_aleatoric, .. }, UncertaintyKind::Aleatoric) => *h_aleatoric,
            (Self::Classification { h_epistemic, .. }, UncertaintyKind::Epistemic) => *h_epistemic,
            (Self::Regression { var_total, .. }, UncertaintyKind::Total) => var_total.sqrt(),
            (Self::Regression { var_aleatoric, .. }, UncertaintyKind::Aleatoric) => {
                var_aleatoric.sqrt()
            }
            (Self::Regression { var_epistemic, .. }, UncertaintyKind::Epistemic) => {
                var_epistemic.sqrt()
            }
        }
    }

    pub fn total(&self) -> f64 {
        self.metric(UncertaintyKind::Total)
    }

    pub fn predicted_class(&self) -> Option<usize> {
        match self {
            Self::Classification { probs, .. } => Some(crate::datasets::argmax(probs)),
            Self::Regression { .. } => None,
        }
    }
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

fn clamp_epistemic(v: f64) -> Result<f64> {
    if v >= 0.0 {
        Ok(v)
    } else if v > -NEGATIVE_TOLERANCE {
        Ok(0.0)
    } else {
        Err(ClueError::NegativeUncertainty(v))
    }
}

/// Decomposes member class probabilities (`M × K`).
pub fn classify_decomposition(member_probs: &[Vec<f64>]) -> Result<UncertaintyReport> {
    let m = member_probs.len();
    if m == 0 {
        return Err(ClueError::Empty("ensemble"));
    }
    let k = member_probs[0].len();
    let mut probs = vec![0.0; k];
    for p in member_probs {
        if p.len() != k {
            return Err(ClueError::Dimension {
                context: "member probabilities",
                expected: k,
                got: p.len(),
            });
        }
        for (a, b) in probs.iter_mut().zip(p) {
            *a += b / m as f64;
        }
    }
    let h_total = entropy(&probs);
    let h_aleatoric = member_probs.iter().map(|p| entropy(p)).sum::<f64>() / m as f64;
    let h_epistemic = clamp_epistemic(h_total - h_aleatoric)?;
    Ok(UncertaintyReport::Classification {
        probs,
        h_total: h_aleatoric + h_epistemic,
        h_aleatoric,
        h_epistemic,
    })
}

/// Decomposes member Gaussian predictions.
pub fn regress_decomposition(means: &[f64], vars: &[f64]) -> Result<UncertaintyReport> {
    let m = means.len();
    if m == 0 {
        return Err(ClueError::Empty("ensemble"));
    }
    if vars.len() != m {
        return Err(ClueError::Dimension {
            context: "member variances",
            expected: m,
            got: vars.len(),
        });
    }
    let mean = means.iter().sum::<f64>() / m as f64;
    let var_aleatoric = vars.iter().sum::<f64>() / m as f64;
    let var_epistemic = means.iter().map(|mu| (mu - mean).powi(2)).sum::<f64>() / m as f64;
    Ok(UncertaintyReport::Regression {
        mean,
        var_total: var_aleatoric + var_epistemic,
        var_aleatoric,
        var_epistemic,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionMetric {
    /// Predictive entropy (classification).
    Entropy,
    /// Predictive standard deviation (regression).
    Sigma,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectionPolicy {
    pub metric: RejectionMetric,
    pub threshold: f64,
    #[serde(default)]
    pub kind: UncertaintyKind,
}

impl RejectionPolicy {
    pub fn new(metric: RejectionMetric, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0) {
            return Err(ClueError::Config(format!("threshold {threshold} must be positive")));
        }
        Ok(Self {
            metric,
            threshold,
            kind: UncertaintyKind::Total,
        })
    }

    pub fn with_kind(mut self, kind: UncertaintyKind) -> Self {
        self.kind = kind;
        self
    }

    /// True iff the metric strictly exceeds the threshold.
    pub fn reject(&self, report: &UncertaintyReport) -> Result<bool> {
        match (self.metric, report.task()) {
            (RejectionMetric::Entropy, TaskKind::Classification)
            | (RejectionMetric::Sigma, TaskKind::Regression) => {
                Ok(report.metric(self.kind) > self.threshold)
            }
            (m, t) => Err(ClueError::TaskMismatch(format!(
                "{m:?} policy applied to a {t:?} report"
            ))),
        }
    }
}

/// Differentiable predictive quantities for a batch `[B, ·]`.
pub struct PredictiveVars<'t> {
    /// Classification: mean probabilities `[B, K]`. Regression: predictive
    /// mean `[B, 1]`.
    pub output: Var<'t>,
    /// Classification: entropies `[B]`. Regression: variances `[B]`.
    pub total: Var<'t>,
    pub aleatoric: Var<'t>,
    pub epistemic: Var<'t>,
}

impl<'t> PredictiveVars<'t> {
    pub fn component(&self, kind: UncertaintyKind) -> Var<'t> {
        match kind {
            UncertaintyKind::Total => self.total,
            UncertaintyKind::Aleatoric => self.aleatoric,
            UncertaintyKind::Epistemic => self.epistemic,
        }
    }

    /// The per-row uncertainty metric `[B]`: entropy for classification,
    /// standard deviation for regression.
    pub fn metric(&self, task: TaskKind, kind: UncertaintyKind) -> Var<'t> {
        let c = self.component(kind);
        match task {
            TaskKind::Classification => c,
            TaskKind::Regression => c.add_scalar(1e-12).sqrt(),
        }
    }
}

/// A model with a predictive distribution whose uncertainty can be
/// differentiated with respect to its input.
pub trait Predictor {
    fn task(&self) -> TaskKind;
    fn input_dim(&self) -> usize;
    fn predictive<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<PredictiveVars<'t>>;

    fn metric_values(&self, x: &Tensor, kind: UncertaintyKind) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let p = self.predictive(&tape, tape.constant(x.clone()))?;
        Ok(p.metric(self.task(), kind).value().into_vec())
    }

    fn reports(&self, x: &Tensor) -> Result<Vec<UncertaintyReport>> {
        let tape = Tape::new();
        let p = self.predictive(&tape, tape.constant(x.clone()))?;
        let out = p.output.value();
        let (al, ep) = (p.aleatoric.value(), p.epistemic.value());
        (0..x.rows())
            .map(|i| {
                let a = al.data()[i];
                let e = clamp_epistemic(ep.data()[i])?;
                Ok(match self.task() {
                    TaskKind::Classification => UncertaintyReport::Classification {
                        probs: out.row(i).to_vec(),
                        h_total: a + e,
                        h_aleatoric: a,
                        h_epistemic: e,
                    },
                    TaskKind::Regression => UncertaintyReport::Regression {
                        mean: out.data()[i],
                        var_total: a + e,
                        var_aleatoric: a,
                        var_epistemic: e,
                    },
                })
            })
            .collect()
    }
}
