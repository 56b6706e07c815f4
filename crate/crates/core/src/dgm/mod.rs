//! Auxiliary generative models: VAE, arbitrary-conditioning VAEAC and
//! two-stage stacks with importance-sampled marginal likelihoods.

mod likelihood;
mod two_stage;
mod vae;
mod vaeac;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use clue_tensor::{Adam, Optimizer, RAdam, Tape, Tensor, Var};

use crate::datasets::ColumnSpec;
use crate::error::{ClueError, Result};

pub use likelihood::{gaussian_kl, standard_kl, ColumnDist, ColumnLayout, DECODER_VARIANCE_FLOOR};
pub use two_stage::{
    log_px_importance, train_two_stage, ImportanceModel, InputMarginal, Outer, TwoStage,
};
pub use vae::{train_vae, Vae, VaeConfig};
pub use vaeac::{train_vaeac, Vaeac, VaeacConfig, DEFAULT_CONDITIONAL_DRAWS};

/// Joint gradient norm above which generative-model updates are rescaled.
pub const GRAD_CLIP_NORM: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    RAdam,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
}

impl TrainConfig {
    pub fn tabular(epochs: usize) -> Self {
        Self {
            epochs,
            batch_size: 128,
            lr: 1e-4,
            optimizer: OptimizerKind::RAdam,
        }
    }

    pub fn image(epochs: usize) -> Self {
        Self {
            lr: 3e-4,
            ..Self::tabular(epochs)
        }
    }

    pub(crate) fn optimizer(&self) -> Box<dyn Optimizer> {
        match self.optimizer {
            OptimizerKind::RAdam => Box::new(RAdam::new(self.lr)),
            OptimizerKind::Adam => Box::new(Adam::new(self.lr)),
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || !(self.lr > 0.0) {
            return Err(ClueError::Config(format!(
                "need batch size ≥ 2 and positive lr, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Mean training ELBO per data point, one entry per epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_elbo: Vec<f64>,
}

impl TrainLog {
    /// Trailing moving average over `window` epochs.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        let w = window.max(1);
        (0..self.epoch_elbo.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(w);
                let s = &self.epoch_elbo[lo..=i];
                s.iter().sum::<f64>() / s.len() as f64
            })
            .collect()
    }

    pub fn final_elbo(&self) -> Option<f64> {
        self.smoothed(10).last().copied()
    }
}

/// Shuffled minibatches; a trailing batch of one row is dropped because
/// batch normalization needs at least two.
pub(crate) fn minibatches<R: Rng + ?Sized>(n: usize, b: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(b)
        .filter(|c| c.len() >= 2 || n < 2)
        .map(<[usize]>::to_vec)
        .collect()
}

pub(crate) fn reparameterize<'t, R: Rng + ?Sized>(
    mu: Var<'t>,
    lv: Var<'t>,
    rng: &mut R,
) -> Result<Var<'t>> {
    let eps = mu.tape().constant(Tensor::randn(&mu.shape(), rng));
    Ok(mu.add(lv.scale(0.5).exp().mul(eps)?)?)
}

pub(crate) fn check_finite(epoch: usize, what: &'static str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(ClueError::TrainingDiverged { epoch, what, value })
    }
}

pub(crate) fn check_width(x: &Tensor, width: usize, context: &'static str) -> Result<()> {
    if x.rank() != 2 || x.cols() != width {
        return Err(ClueError::Dimension {
            context,
            expected: width,
            got: if x.rank() == 2 { x.cols() } else { x.numel() },
        });
    }
    Ok(())
}

/// A generative model with a deterministic encoder mean and a decoder that
/// is differentiable with respect to the latent code.
pub trait LatentModel {
    fn columns(&self) -> &[ColumnSpec];
    fn latent_dim(&self) -> usize;
    fn encode_mean(&self, x: &Tensor) -> Result<Tensor>;
    /// Decoder means for latent rows: `(soft, hard)`, where `hard` carries
    /// straight-through one-hots for categorical columns.
    fn decode<'t>(&self, tape: &'t Tape, z: Var<'t>) -> Result<(Var<'t>, Var<'t>)>;

    fn decode_soft(&self, z: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(self.decode(&tape, tape.constant(z.clone()))?.0.value())
    }

    fn decode_hard(&self, z: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(self.decode(&tape, tape.constant(z.clone()))?.1.value())
    }
}
