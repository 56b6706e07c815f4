//! Residual MLP predictors with Gaussian weight priors, sampled with
//! scale-adapted SG-HMC.

mod sghmc;

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use clue_tensor::nn::{MlpSpec, Module, ResidualMlp};
use clue_tensor::{nn::BoundMlp, Adam, Optimizer, Tape, Tensor, Var};

use crate::checkpoint;
use crate::datasets::{TargetSpec, TaskKind};
use crate::error::{ClueError, Result};
use crate::uncertainty::{PredictiveVars, Predictor};

pub use sghmc::{run_sghmc, Interval, SghmcSampler, SghmcSchedule, DEFAULT_FRICTION, DEFAULT_STEP_SIZE};

/// Added to the softplus output of the variance head.
pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const DEFAULT_ALPHA: f64 = 10.0;
pub const DEFAULT_BETA: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    Categorical { classes: usize },
    HeteroscedasticGaussian,
}

impl Head {
    pub fn output_dim(&self) -> usize {
        match self {
            Head::Categorical { classes } => *classes,
            Head::HeteroscedasticGaussian => 2,
        }
    }

    pub fn task(&self) -> TaskKind {
        match self {
            Head::Categorical { .. } => TaskKind::Classification,
            Head::HeteroscedasticGaussian => TaskKind::Regression,
        }
    }

    pub fn for_target(target: &TargetSpec) -> Self {
        match target {
            TargetSpec::Classification { classes, .. } => Head::Categorical {
                classes: classes.len(),
            },
            TargetSpec::Regression { .. } => Head::HeteroscedasticGaussian,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    /// Number of hidden layers.
    pub depth: usize,
    pub width: usize,
    pub head: Head,
}

impl MlpConfig {
    pub fn new(input_dim: usize, depth: usize, width: usize, head: Head) -> Result<Self> {
        let c = Self {
            input_dim,
            depth,
            width,
            head,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.input_dim == 0 {
            return Err(ClueError::Config(format!(
                "bnn sizes must be positive: {self:?}"
            )));
        }
        if let Head::Categorical { classes } = self.head {
            if classes < 2 {
                return Err(ClueError::Config(format!(
                    "categorical head needs at least 2 classes, got {classes}"
                )));
            }
        }
        Ok(())
    }

    pub fn spec(&self) -> MlpSpec {
        MlpSpec::new(self.input_dim, self.width, self.depth, self.head.output_dim())
    }

    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ResidualMlp> {
        self.validate()?;
        Ok(ResidualMlp::new(self.spec(), rng)?)
    }

    pub fn n_layers(&self) -> usize {
        self.depth + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum HeadOutput {
    Probs(Tensor),
    Gaussian { mean: Vec<f64>, var: Vec<f64> },
}

fn check_input(config: &MlpConfig, x: &Tensor) -> Result<()> {
    if x.rank() != 2 || x.cols() != config.input_dim {
        return Err(ClueError::Dimension {
            context: "bnn input",
            expected: config.input_dim,
            got: if x.rank() == 2 { x.cols() } else { x.numel() },
        });
    }
    Ok(())
}

/// Splits a Gaussian head output `[B, 2]` into mean and variance `[B]`.
pub fn gaussian_params<'t>(out: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let b = out.shape()[0];
    let mean = out.narrow(1, 0, 1)?.reshape(&[b])?;
    let var = out
        .narrow(1, 1, 1)?
        .reshape(&[b])?
        .softplus()
        .add_scalar(VARIANCE_FLOOR);
    Ok((mean, var))
}

/// Eval-mode head output of one network, in standardized target units.
pub fn forward_head(net: &ResidualMlp, config: &MlpConfig, x: &Tensor) -> Result<HeadOutput> {
    check_input(config, x)?;
    let tape = Tape::new();
    let out = net.bind(&tape, false).eval(tape.constant(x.clone()))?;
    Ok(match config.head {
        Head::Categorical { .. } => HeadOutput::Probs(out.softmax().value()),
        Head::HeteroscedasticGaussian => {
            let (m, v) = gaussian_params(out)?;
            HeadOutput::Gaussian {
                mean: m.value().into_vec(),
                var: v.value().into_vec(),
            }
        }
    })
}

/// Per-row log-likelihood `[B]` of targets under a head output.
pub fn log_likelihood<'t>(head: &Head, out: Var<'t>, y: &[f64]) -> Result<Var<'t>> {
    let tape = out.tape();
    let b = out.shape()[0];
    if y.len() != b {
        return Err(ClueError::Dimension {
            context: "targets",
            expected: b,
            got: y.len(),
        });
    }
    match head {
        Head::Categorical { classes } => {
            let mut onehot = vec![0.0; b * classes];
            for (i, &c) in y.iter().enumerate() {
                let c = c as usize;
                if c >= *classes {
                    return Err(ClueError::Config(format!("label {c} out of range")));
                }
                onehot[i * classes + c] = 1.0;
            }
            let oh = tape.constant(Tensor::matrix(b, *classes, onehot)?);
            Ok(out.log_softmax().mul(oh)?.sum_axis(1)?)
        }
        Head::HeteroscedasticGaussian => {
            let (mean, var) = gaussian_params(out)?;
            let yv = tape.constant(Tensor::vector(y.to_vec()));
            let sq = yv.sub(mean)?.square().div(var.scale(2.0))?;
            Ok(var.ln().scale(-0.5).sub(sq)?.add_scalar(-0.5 * (2.0 * PI).ln()))
        }
    }
}

/// `log N(w; 0, σ²)` summed over `w`.
pub fn log_prior_weights(w: &[f64], var: f64) -> f64 {
    let n = w.len() as f64;
    let ss: f64 = w.iter().map(|v| v * v).sum();
    -0.5 * n * (2.0 * PI * var).ln() - ss / (2.0 * var)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorState {
    /// One variance per linear layer, covering its weight and bias.
    pub variances: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
}

impl PriorState {
    /// Starts every layer at the hyperprior's mean precision.
    pub fn new(n_layers: usize, alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0) {
            return Err(ClueError::Config(format!(
                "hyperprior parameters must be positive: α={alpha}, β={beta}"
            )));
        }
        Ok(Self {
            variances: vec![beta / alpha; n_layers],
            alpha,
            beta,
        })
    }

    pub fn default_for(config: &MlpConfig) -> Self {
        Self::new(config.n_layers(), DEFAULT_ALPHA, DEFAULT_BETA).expect("positive defaults")
    }

    fn log_prior_var<'t>(&self, bound: &BoundMlp<'t>) -> Result<Var<'t>> {
        let layers = bound.hidden.iter().chain(std::iter::once(&bound.out));
        let mut total: Option<Var<'t>> = None;
        for (l, &var) in layers.zip(&self.variances) {
            for p in l.vars() {
                let n = p.value().numel() as f64;
                let term = p
                    .square()
                    .sum()
                    .scale(-0.5 / var)
                    .add_scalar(-0.5 * n * (2.0 * PI * var).ln());
                total = Some(match total {
                    Some(t) => t.add(term)?,
                    None => term,
                });
            }
        }
        total.ok_or(ClueError::Empty("network layers"))
    }
}

/// Draws one layer variance from its conjugate posterior given `n` weights
/// with sum of squares `ss`.
pub fn gibbs_layer_variance<R: Rng + ?Sized>(
    n: usize,
    ss: f64,
    alpha: f64,
    beta: f64,
    rng: &mut R,
) -> f64 {
    let shape = alpha + 0.5 * n as f64;
    let rate = beta + 0.5 * ss;
    let precision = Gamma::new(shape, 1.0 / rate)
        .expect("positive gamma parameters")
        .sample(rng);
    1.0 / precision.max(f64::MIN_POSITIVE)
}

pub fn gibbs_prior_update<R: Rng + ?Sized>(
    net: &ResidualMlp,
    prior: &PriorState,
    rng: &mut R,
) -> PriorState {
    let variances = net
        .layers()
        .iter()
        .map(|l| {
            let (n, ss) = l.params().iter().fold((0, 0.0), |(n, ss), p| {
                (
                    n + p.numel(),
                    ss + p.value.data().iter().map(|w| w * w).sum::<f64>(),
                )
            });
            gibbs_layer_variance(n, ss, prior.alpha, prior.beta, rng)
        })
        .collect();
    PriorState {
        variances,
        alpha: prior.alpha,
        beta: prior.beta,
    }
}

/// `(N / B)·Σ log p(y|x,w) + log p(w)` for a bound network and a batch.
pub fn log_joint<'t>(
    bound: &BoundMlp<'t>,
    head: &Head,
    prior: &PriorState,
    x: Var<'t>,
    y: &[f64],
    n_total: usize,
) -> Result<Var<'t>> {
    if y.is_empty() {
        return Err(ClueError::Empty("batch"));
    }
    let out = bound.eval(x)?;
    let ll = log_likelihood(head, out, y)?;
    if let Some(index) = ll.value().data().iter().position(|v| !v.is_finite()) {
        return Err(ClueError::NonFinite {
            what: "log-likelihood",
            index,
        });
    }
    let data = ll.sum().scale(n_total as f64 / y.len() as f64);
    Ok(data.add(prior.log_prior_var(bound)?)?)
}

/// Value of [`log_joint`] for a network on a full data set.
pub fn log_joint_value(
    net: &ResidualMlp,
    config: &MlpConfig,
    prior: &PriorState,
    x: &Tensor,
    y: &[f64],
) -> Result<f64> {
    check_input(config, x)?;
    let tape = Tape::new();
    let bound = net.bind(&tape, false);
    Ok(log_joint(&bound, &config.head, prior, tape.constant(x.clone()), y, y.len())?.item())
}

/// `M` networks approximating the weight posterior.
#[derive(Clone, Debug)]
pub struct PosteriorEnsemble {
    pub config: MlpConfig,
    pub members: Vec<ResidualMlp>,
    pub prior: PriorState,
    pub target: TargetSpec,
}

#[derive(Serialize, Deserialize)]
struct EnsembleManifest {
    config: MlpConfig,
    prior: PriorState,
    target: TargetSpec,
    members: usize,
    #[serde(default)]
    meta: serde_json::Value,
}

impl PosteriorEnsemble {
    pub fn new(
        config: MlpConfig,
        members: Vec<ResidualMlp>,
        prior: PriorState,
        target: TargetSpec,
    ) -> Result<Self> {
        config.validate()?;
        if members.is_empty() {
            return Err(ClueError::Empty("ensemble"));
        }
        let spec = config.spec();
        if members.iter().any(|m| m.spec != spec) {
            return Err(ClueError::Config("ensemble members disagree with config".into()));
        }
        if Head::for_target(&target) != config.head {
            return Err(ClueError::TaskMismatch(format!(
                "head {:?} for target {:?}",
                config.head,
                target.kind()
            )));
        }
        Ok(Self {
            config,
            members,
            prior,
            target,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Writes one tensor file per member and a manifest. `meta` is stored
    /// verbatim (schedule, seed, data provenance).
    pub fn save(&self, dir: &Path, meta: serde_json::Value) -> Result<()> {
        checkpoint::prepare_dir(dir)?;
        for (i, m) in self.members.iter().enumerate() {
            checkpoint::write_tensors(&dir.join(format!("member_{i:04}.bin")), &m.state())?;
        }
        checkpoint::write_manifest(
            dir,
            &EnsembleManifest {
                config: self.config.clone(),
                prior: self.prior.clone(),
                target: self.target.clone(),
                members: self.members.len(),
                meta,
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: EnsembleManifest = checkpoint::read_manifest(dir)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let template = m.config.build(&mut rng)?;
        let members = (0..m.members)
            .map(|i| {
                let state = checkpoint::read_tensors(&dir.join(format!("member_{i:04}.bin")))?;
                let mut net = template.clone();
                net.load_state(&state)?;
                Ok(net)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(m.config, members, m.prior, m.target)
    }
}

impl Predictor for PosteriorEnsemble {
    fn task(&self) -> TaskKind {
        self.config.head.task()
    }

    fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    fn predictive<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<PredictiveVars<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.config.input_dim {
            return Err(ClueError::Dimension {
                context: "bnn input",
                expected: self.config.input_dim,
                got: shape.last().copied().unwrap_or(0),
            });
        }
        let b = shape[0];
        let m = self.members.len() as f64;
        match self.config.head {
            Head::Categorical { classes: k } => {
                let mut logps = Vec::with_capacity(self.members.len());
                let mut ents = Vec::with_capacity(self.members.len());
                for net in &self.members {
                    let lp = net.bind(tape, false).eval(x)?.log_softmax();
                    let h = lp.exp().mul(lp)?.sum_axis(1)?.neg();
                    logps.push(lp.reshape(&[b, k, 1])?);
                    ents.push(h.reshape(&[b, 1])?);
                }
                let log_mean = Var::concat(&logps, 2)?.log_sum_exp().add_scalar(-m.ln());
                let probs = log_mean.exp();
                let total = probs.mul(log_mean)?.sum_axis(1)?.neg();
                let aleatoric = Var::concat(&ents, 1)?.mean_axis(1)?;
                let epistemic = total.sub(aleatoric)?;
                Ok(PredictiveVars {
                    output: probs,
                    total,
                    aleatoric,
                    epistemic,
                })
            }
            Head::HeteroscedasticGaussian => {
                let (mu, sd) = self.target.scale();
                let mut means = Vec::with_capacity(self.members.len());
                let mut vars = Vec::with_capacity(self.members.len());
                for net in &self.members {
                    let (mean, var) = gaussian_params(net.bind(tape, false).eval(x)?)?;
                    means.push(mean.scale(sd).add_scalar(mu).reshape(&[b, 1])?);
                    vars.push(var.scale(sd * sd).reshape(&[b, 1])?);
                }
                let means = Var::concat(&means, 1)?;
                let mean = means.mean_axis(1)?;
                let aleatoric = Var::concat(&vars, 1)?.mean_axis(1)?;
                let epistemic = means
                    .sub(mean.reshape(&[b, 1])?)?
                    .square()
                    .mean_axis(1)?;
                Ok(PredictiveVars {
                    output: mean.reshape(&[b, 1])?,
                    total: aleatoric.add(epistemic)?,
                    aleatoric,
                    epistemic,
                })
            }
        }
    }
}

/// Maximum a posteriori training with Adam, giving a one-member ensemble
/// (a deterministic network).
#[allow(clippy::too_many_arguments)]
pub fn train_map<R: Rng + ?Sized>(
    x: &Tensor,
    y: &[f64],
    target: &TargetSpec,
    config: &MlpConfig,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    rng: &mut R,
) -> Result<PosteriorEnsemble> {
    check_input(config, x)?;
    let n = x.rows();
    if n == 0 || y.len() != n {
        return Err(ClueError::Empty("training set"));
    }
    let prior = PriorState::default_for(config);
    let mut net = config.build(rng)?;
    let mut opt = Adam::new(lr);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size.max(1)) {
            let xb = x.select_rows(chunk);
            let yb: Vec<f64> = chunk.iter().map(|&i| y[i]).collect();
            let tape = Tape::new();
            let bound = net.bind(&tape, true);
            let lj = log_joint(&bound, &config.head, &prior, tape.constant(xb), &yb, n)?;
            let loss = lj.scale(-1.0 / n as f64);
            if !loss.item().is_finite() {
                return Err(ClueError::TrainingDiverged {
                    epoch,
                    what: "map loss",
                    value: loss.item(),
                });
            }
            let grads = tape.backward(loss)?;
            clue_tensor::nn::collect_grads(&mut net, &bound.vars(), &grads)?;
            opt.step(&mut net.params_mut())?;
        }
    }
    PosteriorEnsemble::new(config.clone(), vec![net], prior, target.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clue_tensor::nn::Linear;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_net(config: &MlpConfig) -> ResidualMlp {
        let mut net = config.build(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for l in net.layers_mut() {
            *l = Linear::zeros(l.input_dim(), l.output_dim());
        }
        net
    }

    #[test]
    fn zero_categorical_net_is_uniform() {
        let c = MlpConfig::new(3, 2, 8, Head::Categorical { classes: 4 }).unwrap();
        let HeadOutput::Probs(p) = forward_head(&zero_net(&c), &c, &Tensor::zeros(&[2, 3])).unwrap()
        else {
            unreachable!()
        };
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn head_dimension_mismatch_errors() {
        let c = MlpConfig::new(3, 1, 4, Head::HeteroscedasticGaussian).unwrap();
        let net = c.build(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(matches!(
            forward_head(&net, &c, &Tensor::zeros(&[2, 4])),
            Err(ClueError::Dimension { .. })
        ));
        assert!(MlpConfig::new(3, 1, 4, Head::Categorical { classes: 1 }).is_err());
        assert!(MlpConfig::new(3, 0, 4, Head::HeteroscedasticGaussian).is_err());
    }

    #[test]
    fn likelihood_examples() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::matrix(1, 2, vec![800.0, 0.0]).unwrap());
        let ll = log_likelihood(&Head::Categorical { classes: 2 }, logits, &[0.0]).unwrap();
        assert_eq!(ll.item(), 0.0);
        // softplus(raw) + 1e-6 = 1
        let raw = (1.0f64 - VARIANCE_FLOOR).exp_m1().ln();
        let out = tape.constant(Tensor::matrix(1, 2, vec![0.7, raw]).unwrap());
        let ll = log_likelihood(&Head::HeteroscedasticGaussian, out, &[0.7]).unwrap();
        assert!((ll.item() + 0.5 * (2.0 * PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn prior_term_example() {
        let v = log_prior_weights(&[2.0], 1.0);
        assert!((v - (-0.5 * (2.0 * PI).ln() - 2.0)).abs() < 1e-15);
    }

    #[test]
    fn log_joint_matches_manual_sum() {
        let c = MlpConfig::new(2, 1, 3, Head::HeteroscedasticGaussian).unwrap();
        let net = c.build(&mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let prior = PriorState::new(2, 10.0, 10.0).unwrap();
        let x = Tensor::matrix(2, 2, vec![0.1, -0.3, 0.5, 0.2]).unwrap();
        let y = [0.3, -1.0];
        let tape = Tape::new();
        let bound = net.bind(&tape, false);
        let lj = log_joint(&bound, &c.head, &prior, tape.constant(x.clone()), &y, 10).unwrap();
        let HeadOutput::Gaussian { mean, var } = forward_head(&net, &c, &x).unwrap() else {
            unreachable!()
        };
        let ll: f64 = (0..2)
            .map(|i| -0.5 * (2.0 * PI * var[i]).ln() - (y[i] - mean[i]).powi(2) / (2.0 * var[i]))
            .sum();
        let lp: f64 = net
            .layers()
            .iter()
            .map(|l| {
                l.params()
                    .iter()
                    .map(|p| log_prior_weights(p.value.data(), 1.0))
                    .sum::<f64>()
            })
            .sum();
        assert!((lj.item() - (5.0 * ll + lp)).abs() < 1e-9);
    }

    #[test]
    fn gibbs_zero_weights_mean_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| 1.0 / gibbs_layer_variance(20, 0.0, 10.0, 10.0, &mut rng))
            .sum::<f64>()
            / n as f64;
        assert!((mean - 2.0).abs() / 2.0 < 0.02, "{mean}");
    }

    #[test]
    fn gibbs_empty_layer_is_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| 1.0 / gibbs_layer_variance(0, 0.0, 10.0, 10.0, &mut rng))
            .collect();
        let m = draws.iter().sum::<f64>() / n as f64;
        let v = draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / n as f64;
        // Gamma(10, rate 10): mean 1, variance 0.1
        assert!((m - 1.0).abs() < 0.01);
        assert!((v - 0.1).abs() < 0.005);
    }

    #[test]
    fn gibbs_moments_match_conjugate_posterior_for_fixed_weights() {
        let c = MlpConfig::new(2, 1, 3, Head::Categorical { classes: 2 }).unwrap();
        let net = c.build(&mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let prior = PriorState::default_for(&c);
        let layer = net.layers()[0];
        let n = layer.params().iter().map(|p| p.numel()).sum::<usize>() as f64;
        let ss: f64 = layer
            .params()
            .iter()
            .flat_map(|p| p.value.data().to_vec())
            .map(|w| w * w)
            .sum();
        let (shape, rate) = (10.0 + n / 2.0, 10.0 + ss / 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let k = 50_000;
        let mut state = prior.clone();
        let draws: Vec<f64> = (0..k)
            .map(|_| {
                state = gibbs_prior_update(&net, &state, &mut rng);
                1.0 / state.variances[0]
            })
            .collect();
        let m = draws.iter().sum::<f64>() / k as f64;
        let v = draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / k as f64;
        let (em, ev) = (shape / rate, shape / (rate * rate));
        assert!((m - em).abs() < 4.0 * (ev / k as f64).sqrt(), "{m} vs {em}");
        assert!((v - ev).abs() / ev < 0.05, "{v} vs {ev}");
    }

    #[test]
    fn ensemble_requires_members_and_matching_head() {
        let c = MlpConfig::new(2, 1, 3, Head::HeteroscedasticGaussian).unwrap();
        let t = TargetSpec::Regression {
            name: "y".into(),
            mean: 0.0,
            std: 1.0,
        };
        let prior = PriorState::default_for(&c);
        assert!(PosteriorEnsemble::new(c.clone(), vec![], prior.clone(), t).is_err());
        let net = c.build(&mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let t = TargetSpec::Classification {
            name: "y".into(),
            classes: vec!["a".into(), "b".into()],
        };
        assert!(PosteriorEnsemble::new(c, vec![net], prior, t).is_err());
    }

    #[test]
    fn ensemble_reports_match_decomposition_and_roundtrip() {
        use crate::uncertainty::{classify_decomposition, UncertaintyKind};
        let c = MlpConfig::new(2, 2, 5, Head::Categorical { classes: 3 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let members: Vec<_> = (0..4).map(|_| c.build(&mut rng).unwrap()).collect();
        let t = TargetSpec::Classification {
            name: "y".into(),
            classes: vec!["a".into(), "b".into(), "c".into()],
        };
        let ens = PosteriorEnsemble::new(c.clone(), members, PriorState::default_for(&c), t).unwrap();
        let x = Tensor::matrix(2, 2, vec![0.3, -2.0, 1.5, 0.4]).unwrap();
        let reports = ens.reports(&x).unwrap();
        for (i, r) in reports.iter().enumerate() {
            let per: Vec<Vec<f64>> = ens
                .members
                .iter()
                .map(|m| match forward_head(m, &c, &x.select_rows(&[i])).unwrap() {
                    HeadOutput::Probs(p) => p.into_vec(),
                    _ => unreachable!(),
                })
                .collect();
            let oracle = classify_decomposition(&per).unwrap();
            for k in [UncertaintyKind::Total, UncertaintyKind::Aleatoric, UncertaintyKind::Epistemic] {
                assert!((r.metric(k) - oracle.metric(k)).abs() < 1e-12);
            }
        }
        let dir = std::env::temp_dir().join(format!("clue-ens-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        ens.save(&dir, serde_json::json!({"seed": 8})).unwrap();
        let back = PosteriorEnsemble::load(&dir).unwrap();
        assert_eq!(back.reports(&x).unwrap(), reports);
        assert!(ens.save(&dir, serde_json::Value::Null).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
