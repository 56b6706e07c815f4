//! Gradient-based uncertainty sensitivity and the mask-based U-FIDO
//! counterfactual baseline.

mod ufido;

use serde::{Deserialize, Serialize};

use clue_tensor::{Tape, Tensor};

use crate::error::{ClueError, Result};
use crate::uncertainty::{Predictor, UncertaintyKind};

pub use ufido::{
    mix_counterfactual, ufido_optimize, Imputer, SparsityConvention, UfidoConfig, UfidoResult,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityConfig {
    pub eta: f64,
    pub uncertainty: UncertaintyKind,
}

impl SensitivityConfig {
    pub fn new(eta: f64) -> Result<Self> {
        if !(eta >= 0.0) {
            return Err(ClueError::Config(format!("step size must be non-negative, got {eta}")));
        }
        Ok(Self {
            eta,
            uncertainty: UncertaintyKind::Total,
        })
    }
}

/// Gradient of the per-row uncertainty metric with respect to the input.
pub fn uncertainty_gradient<P: Predictor + ?Sized>(
    predictor: &P,
    x: &Tensor,
    kind: UncertaintyKind,
) -> Result<Tensor> {
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let h = predictor.predictive(&tape, xv)?.metric(predictor.task(), kind);
    let grads = tape.backward(h.sum())?;
    Ok(grads.get_or_zeros(xv))
}

/// One gradient step of size `eta` down the uncertainty, per row. No
/// constraint keeps the result near the data.
pub fn local_sensitivity<P: Predictor + ?Sized>(
    predictor: &P,
    x0: &Tensor,
    config: &SensitivityConfig,
) -> Result<Tensor> {
    if config.eta == 0.0 {
        return Ok(x0.clone());
    }
    let g = uncertainty_gradient(predictor, x0, config.uncertainty)?;
    Ok(x0.zip_map(&g, |x, g| x - config.eta * g)?)
}

/// Mean absolute input gradient of the uncertainty over a set of points.
pub fn global_sensitivity<P: Predictor + ?Sized>(
    predictor: &P,
    x: &Tensor,
    kind: UncertaintyKind,
) -> Result<Vec<f64>> {
    if x.rows() == 0 {
        return Err(ClueError::Empty("sensitivity test set"));
    }
    let g = uncertainty_gradient(predictor, x, kind)?;
    let d = g.cols();
    let mut out = vec![0.0; d];
    for r in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(r)) {
            *o += v.abs();
        }
    }
    Ok(out.into_iter().map(|v| v / x.rows() as f64).collect())
}
