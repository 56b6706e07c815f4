//! Small analytic decoders and predictors for checking optimizers against
//! closed-form answers.

use clue_tensor::{Tape, Tensor, Var};

use crate::datasets::{ColumnSpec, TaskKind};
use crate::dgm::LatentModel;
use crate::error::Result;
use crate::uncertainty::{PredictiveVars, Predictor};

/// Latent space equal to the input space.
pub struct IdentityDecoder {
    pub columns: Vec<ColumnSpec>,
}

impl IdentityDecoder {
    pub fn standard(d: usize) -> Self {
        Self {
            columns: (0..d).map(|i| ColumnSpec::standard(format!("x{i}"))).collect(),
        }
    }
}

impl LatentModel for IdentityDecoder {
    fn columns(&self) -> &[ColumnSpec] {
        &self.columns
    }

    fn latent_dim(&self) -> usize {
        self.columns.len()
    }

    fn encode_mean(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }

    fn decode<'t>(&self, _tape: &'t Tape, z: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        Ok((z, z))
    }
}

fn uniform_output<'t>(tape: &'t Tape, h: Var<'t>, b: usize) -> PredictiveVars<'t> {
    PredictiveVars {
        output: tape.constant(Tensor::full(&[b, 2], 0.5)),
        total: h,
        aleatoric: h,
        epistemic: tape.constant(Tensor::zeros(&[b])),
    }
}

/// Uncertainty `Σ x_i²`, all of it aleatoric.
pub struct QuadraticUncertainty;

impl Predictor for QuadraticUncertainty {
    fn task(&self) -> TaskKind {
        TaskKind::Classification
    }

    fn input_dim(&self) -> usize {
        0
    }

    fn predictive<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<PredictiveVars<'t>> {
        let b = x.shape()[0];
        Ok(uniform_output(tape, x.square().sum_axis(1)?, b))
    }
}

/// Uncertainty `offset + Σ slopes_i x_i`.
pub struct LinearUncertainty {
    pub offset: f64,
    pub slopes: Vec<f64>,
}

impl Predictor for LinearUncertainty {
    fn task(&self) -> TaskKind {
        TaskKind::Classification
    }

    fn input_dim(&self) -> usize {
        self.slopes.len()
    }

    fn predictive<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<PredictiveVars<'t>> {
        let b = x.shape()[0];
        let w = tape.constant(Tensor::matrix(self.slopes.len(), 1, self.slopes.clone())?);
        let h = x.matmul(w)?.reshape(&[b])?.add_scalar(self.offset);
        Ok(uniform_output(tape, h, b))
    }
}

/// Two classes with `p(y=1|x) = sigmoid(slope·x₀)`: entropy is maximal at
/// `x₀ = 0` and falls symmetrically on either side.
pub struct LogisticToy {
    pub slope: f64,
}

impl Predictor for LogisticToy {
    fn task(&self) -> TaskKind {
        TaskKind::Classification
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn predictive<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<PredictiveVars<'t>> {
        let b = x.shape()[0];
        let logits = x.narrow(1, 0, 1)?.scale(self.slope);
        let zero = tape.constant(Tensor::zeros(&[b, 1]));
        let lp = Var::concat(&[zero, logits], 1)?.log_softmax();
        let probs = lp.exp();
        let h = probs.mul(lp)?.sum_axis(1)?.neg();
        Ok(PredictiveVars {
            output: probs,
            total: h,
            aleatoric: h,
            epistemic: tape.constant(Tensor::zeros(&[b])),
        })
    }
}
