//! Counterfactual search in the latent space of an auxiliary generative
//! model: find a nearby decoded input the predictor is confident about.

mod display;
pub mod toys;

use rand::Rng;
use serde::{Deserialize, Serialize};

use clue_tensor::{Tape, Tensor, Var};

use crate::datasets::TaskKind;
use crate::dgm::LatentModel;
use crate::error::{ClueError, Result};
use crate::uncertainty::{Predictor, RejectionPolicy, UncertaintyKind, UncertaintyReport};

pub use display::{display_selected, display_tabular, saliency_image, FeatureChange, HIGHLIGHT_PERCENTILE_GAP};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// Encoder mean of the original input.
    #[default]
    EncoderMean,
    /// The latent origin.
    Origin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClueConfig {
    /// Input-distance weight premultiplied by the encoded dimension; the
    /// objective uses `lambda_x / d` per unit of ℓ1 distance.
    pub lambda_x: f64,
    pub lambda_y: f64,
    pub lr: f64,
    pub min_iters: usize,
    pub max_iters: usize,
    /// Consecutive small decreases needed to stop.
    pub patience: usize,
    /// A decrease is small when below this fraction of the initial loss.
    pub stop_fraction: f64,
    pub init: InitStrategy,
    /// Gaussian noise added to the initial latent by single runs.
    pub init_noise: f64,
    /// Gaussian noise added to the initial latent by diverse restarts.
    pub restart_noise: f64,
    pub restarts: usize,
    pub uncertainty: UncertaintyKind,
}

impl Default for ClueConfig {
    fn default() -> Self {
        Self {
            lambda_x: 1.0,
            lambda_y: 0.0,
            lr: 0.1,
            min_iters: 3,
            max_iters: 35,
            patience: 3,
            stop_fraction: 0.01,
            init: InitStrategy::EncoderMean,
            init_noise: 0.0,
            restart_noise: 0.15,
            restarts: 1,
            uncertainty: UncertaintyKind::Total,
        }
    }
}

impl ClueConfig {
    pub fn with_lambda_x(lambda_x: f64) -> Self {
        Self {
            lambda_x,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda_x >= 0.0
            && self.lambda_y >= 0.0
            && self.lr > 0.0
            && self.min_iters <= self.max_iters
            && self.max_iters >= 1
            && self.restarts >= 1
            && self.init_noise >= 0.0
            && self.restart_noise >= 0.0
            && self.stop_fraction.is_finite();
        if ok {
            Ok(())
        } else {
            Err(ClueError::Config(format!("invalid clue config {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClueResult {
    pub x0: Vec<f64>,
    /// Decoded counterfactual with hard one-hots, as fed to the predictor.
    pub x_clue: Vec<f64>,
    pub x_clue_soft: Vec<f64>,
    /// Latent code of the returned (lowest-loss) iterate.
    pub z: Vec<f64>,
    pub z_trajectory: Vec<Vec<f64>>,
    pub loss_trajectory: Vec<f64>,
    pub best_iteration: usize,
    /// Optimizer steps taken.
    pub iterations: usize,
    pub before: UncertaintyReport,
    pub after: UncertaintyReport,
    /// Whether the counterfactual is accepted by the rejection policy, when
    /// one was supplied.
    pub below_threshold: Option<bool>,
}

impl ClueResult {
    pub fn delta_l1(&self) -> f64 {
        self.x0.iter().zip(&self.x_clue).map(|(a, b)| (a - b).abs()).sum()
    }

    /// Uncertainty explained away: metric before minus after.
    pub fn uncertainty_drop(&self, kind: UncertaintyKind) -> f64 {
        self.before.metric(kind) - self.after.metric(kind)
    }

    pub fn final_loss(&self) -> f64 {
        self.loss_trajectory[self.best_iteration]
    }
}

/// Predictor output at the original inputs, the target of the prediction
/// distance term.
pub fn reference_output<P: Predictor + ?Sized>(predictor: &P, x0: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    Ok(predictor.predictive(&tape, tape.constant(x0.clone()))?.output.value())
}

/// Per-row objective `U(x_hard) + (λ_x/d)‖x_soft − x₀‖₁ + λ_y d_y`, where
/// `x_soft, x_hard` decode `z`. `d_y` is squared error of predictive means
/// (regression) or cross-entropy from the predictive distribution at `x₀`
/// (classification).
pub fn clue_objective<'t, M, P>(
    tape: &'t Tape,
    model: &M,
    predictor: &P,
    config: &ClueConfig,
    z: Var<'t>,
    x0: &Tensor,
    reference: &Tensor,
) -> Result<Var<'t>>
where
    M: LatentModel + ?Sized,
    P: Predictor + ?Sized,
{
    let (soft, hard) = model.decode(tape, z)?;
    let p = predictor.predictive(tape, hard)?;
    let mut loss = p.metric(predictor.task(), config.uncertainty);
    if config.lambda_x > 0.0 {
        let d = x0.cols() as f64;
        let dist = soft.sub(tape.constant(x0.clone()))?.abs().sum_axis(1)?;
        loss = loss.add(dist.scale(config.lambda_x / d))?;
    }
    if config.lambda_y > 0.0 {
        let r = tape.constant(reference.clone());
        let dy = match predictor.task() {
            TaskKind::Regression => p.output.sub(r)?.square().sum_axis(1)?,
            TaskKind::Classification => r.mul(p.output.ln())?.sum_axis(1)?.neg(),
        };
        loss = loss.add(dy.scale(config.lambda_y))?;
    }
    Ok(loss)
}

struct RowState {
    active: bool,
    small: usize,
    iterations: usize,
    z: Vec<Vec<f64>>,
    loss: Vec<f64>,
}

/// Optimizes every row of `x0` independently from initial latents `z0`.
fn optimize_from<M, P>(
    model: &M,
    predictor: &P,
    config: &ClueConfig,
    x0: &Tensor,
    mut z: Tensor,
    policy: Option<&RejectionPolicy>,
) -> Result<Vec<ClueResult>>
where
    M: LatentModel + ?Sized,
    P: Predictor + ?Sized,
{
    config.validate()?;
    let (b, l) = (z.rows(), z.cols());
    let reference = reference_output(predictor, x0)?;
    let eval = |z: &Tensor| -> Result<(Vec<f64>, Tensor)> {
        let tape = Tape::new();
        let zv = tape.leaf(z.clone());
        let loss = clue_objective(&tape, model, predictor, config, zv, x0, &reference)?;
        let values = loss.value().into_vec();
        let grads = tape.backward(loss.sum())?;
        Ok((values, grads.get_or_zeros(zv)))
    };
    let (mut loss, mut grad) = eval(&z)?;
    let mut rows: Vec<RowState> = (0..b)
        .map(|r| RowState {
            active: true,
            small: 0,
            iterations: 0,
            z: vec![z.row(r).to_vec()],
            loss: vec![loss[r]],
        })
        .collect();
    let check = |rows: &[RowState], loss: &[f64], it: usize| -> Result<()> {
        for (r, s) in rows.iter().enumerate() {
            if s.active && !loss[r].is_finite() {
                return Err(ClueError::ClueDiverged {
                    row: r,
                    iteration: it,
                    losses: s.loss.clone(),
                });
            }
        }
        Ok(())
    };
    check(&rows, &loss, 0)?;
    let (mut m, mut v) = (vec![0.0; b * l], vec![0.0; b * l]);
    for it in 1..=config.max_iters {
        if rows.iter().all(|s| !s.active) {
            break;
        }
        let (c1, c2) = (1.0 - ADAM_BETA1.powi(it as i32), 1.0 - ADAM_BETA2.powi(it as i32));
        let zd = z.data_mut();
        let g = grad.data();
        for (r, s) in rows.iter().enumerate() {
            if !s.active {
                continue;
            }
            for j in r * l..(r + 1) * l {
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                zd[j] -= config.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
            }
        }
        (loss, grad) = eval(&z)?;
        check(&rows, &loss, it)?;
        for (r, s) in rows.iter_mut().enumerate() {
            if !s.active {
                continue;
            }
            let prev = *s.loss.last().expect("initial loss");
            s.z.push(z.row(r).to_vec());
            s.loss.push(loss[r]);
            s.iterations = it;
            s.small = if prev - loss[r] < s.loss[0] * config.stop_fraction {
                s.small + 1
            } else {
                0
            };
            if it >= config.min_iters && s.small >= config.patience {
                s.active = false;
            }
        }
    }

    let best: Vec<usize> = rows
        .iter()
        .map(|s| {
            let mut k = 0;
            for (i, &v) in s.loss.iter().enumerate() {
                if v < s.loss[k] {
                    k = i;
                }
            }
            k
        })
        .collect();
    let zb = Tensor::matrix(b, l, rows.iter().zip(&best).flat_map(|(s, &k)| s.z[k].clone()).collect())?;
    let tape = Tape::new();
    let (soft, hard) = model.decode(&tape, tape.constant(zb.clone()))?;
    let (soft, hard) = (soft.value(), hard.value());
    let before = predictor.reports(x0)?;
    let after = predictor.reports(&hard)?;
    let mut out = Vec::with_capacity(b);
    for (r, (s, k)) in rows.into_iter().zip(best).enumerate() {
        let below = match policy {
            Some(p) => Some(!p.reject(&after[r])?),
            None => None,
        };
        out.push(ClueResult {
            x0: x0.row(r).to_vec(),
            x_clue: hard.row(r).to_vec(),
            x_clue_soft: soft.row(r).to_vec(),
            z: zb.row(r).to_vec(),
            z_trajectory: s.z,
            loss_trajectory: s.loss,
            best_iteration: k,
            iterations: s.iterations,
            before: before[r].clone(),
            after: after[r].clone(),
            below_threshold: below,
        });
    }
    Ok(out)
}

fn initial_latent<M: LatentModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    config: &ClueConfig,
    x0: &Tensor,
    noise: f64,
    rng: &mut R,
) -> Result<Tensor> {
    let mut z = match config.init {
        InitStrategy::EncoderMean => model.encode_mean(x0)?,
        InitStrategy::Origin => Tensor::zeros(&[x0.rows(), model.latent_dim()]),
    };
    if noise > 0.0 {
        let e = Tensor::randn(z.shape(), rng);
        for (v, e) in z.data_mut().iter_mut().zip(e.data()) {
            *v += noise * e;
        }
    }
    Ok(z)
}

/// One counterfactual per row of `x0`. Rows are optimized jointly but
/// independently: each has its own early stopping.
pub fn clue_optimize<M, P, R>(
    model: &M,
    predictor: &P,
    config: &ClueConfig,
    x0: &Tensor,
    policy: Option<&RejectionPolicy>,
    rng: &mut R,
) -> Result<Vec<ClueResult>>
where
    M: LatentModel + ?Sized,
    P: Predictor + ?Sized,
    R: Rng + ?Sized,
{
    if x0.rows() == 0 {
        return Ok(Vec::new());
    }
    let z = initial_latent(model, config, x0, config.init_noise, rng)?;
    optimize_from(model, predictor, config, x0, z, policy)
}

/// `config.restarts` runs from independently perturbed initial latents,
/// sorted by final uncertainty, lowest first.
pub fn diverse_clues<M, P, R>(
    model: &M,
    predictor: &P,
    config: &ClueConfig,
    x0: &[f64],
    policy: Option<&RejectionPolicy>,
    rng: &mut R,
) -> Result<Vec<ClueResult>>
where
    M: LatentModel + ?Sized,
    P: Predictor + ?Sized,
    R: Rng + ?Sized,
{
    config.validate()?;
    let r = config.restarts;
    let xs = Tensor::matrix(r, x0.len(), x0.repeat(r))?;
    let z = initial_latent(model, config, &xs, config.restart_noise, rng)?;
    let mut out = optimize_from(model, predictor, config, &xs, z, policy)?;
    out.sort_by(|a, b| {
        a.after
            .metric(config.uncertainty)
            .total_cmp(&b.after.metric(config.uncertainty))
    });
    Ok(out)
}
