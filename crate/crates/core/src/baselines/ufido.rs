use rand::Rng;
use serde::{Deserialize, Serialize};

use clue_tensor::{Adam, Optimizer, Param, Tape, Tensor, Var};

use crate::datasets::{expand_column_mask, ColumnSpec};
use crate::dgm::{Vaeac, DEFAULT_CONDITIONAL_DRAWS};
use crate::error::{ClueError, Result};
use crate::uncertainty::{Predictor, UncertaintyKind, UncertaintyReport};

/// A model of `E[x | x ⊙ b, b]` that is differentiable in a relaxed mask.
pub trait Imputer {
    fn columns(&self) -> &[ColumnSpec];
    /// Width of each noise draw passed to [`Imputer::conditional_mean_var`].
    fn noise_dim(&self) -> usize;
    /// Full-width conditional mean `[B, D]` given per-column mask `b`
    /// (1 observed), averaged over the noise draws in `eps`.
    fn conditional_mean_var<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        b: Var<'t>,
        eps: &[Tensor],
    ) -> Result<Var<'t>>;
}

impl Imputer for Vaeac {
    fn columns(&self) -> &[ColumnSpec] {
        &self.config.columns
    }

    fn noise_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn conditional_mean_var<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        b: Var<'t>,
        eps: &[Tensor],
    ) -> Result<Var<'t>> {
        Vaeac::conditional_mean_var(self, tape, x, b, eps)
    }
}

/// Which mask entries the sparsity term charges for.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityConvention {
    /// `λ_b Σ b`: kept features cost, so larger `λ_b` replaces more.
    #[default]
    Verbatim,
    /// `λ_b Σ (1 − b)`: replaced features cost, so larger `λ_b` keeps more.
    PenalizeMasking,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UfidoConfig {
    pub lambda_b: f64,
    pub temperature: f64,
    /// Relaxed mask samples per step.
    pub samples: usize,
    pub lr: f64,
    pub steps: usize,
    pub convention: SparsityConvention,
    /// Imputer noise draws per relaxed sample during optimization.
    pub optimization_draws: usize,
    /// Imputer noise draws for the final counterfactual.
    pub final_draws: usize,
    pub uncertainty: UncertaintyKind,
}

impl UfidoConfig {
    pub fn new(lambda_b: f64) -> Self {
        Self {
            lambda_b,
            temperature: 0.1,
            samples: 4,
            lr: 0.05,
            steps: 50,
            convention: SparsityConvention::Verbatim,
            optimization_draws: 1,
            final_draws: DEFAULT_CONDITIONAL_DRAWS,
            uncertainty: UncertaintyKind::Total,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.lambda_b >= 0.0
            && self.temperature > 0.0
            && self.samples >= 1
            && self.lr > 0.0
            && self.optimization_draws >= 1
            && self.final_draws >= 1
        {
            Ok(())
        } else {
            Err(ClueError::Config(format!("invalid u-fido config {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UfidoResult {
    pub x0: Vec<f64>,
    pub x_c: Vec<f64>,
    /// Keep probabilities per column.
    pub rho: Vec<f64>,
    /// Hard mask, 1 where the original value is kept.
    pub mask: Vec<f64>,
    pub loss_trajectory: Vec<f64>,
    pub before: UncertaintyReport,
    pub after: UncertaintyReport,
}

impl UfidoResult {
    pub fn delta_l1(&self) -> f64 {
        self.x0.iter().zip(&self.x_c).map(|(a, b)| (a - b).abs()).sum()
    }
}

/// `b ⊙ x0 + (1 − b) ⊙ e` with the column mask expanded to feature width.
/// Kept features are copied, not recomputed.
pub fn mix_counterfactual(columns: &[ColumnSpec], x0: &[f64], mask: &[f64], e: &[f64]) -> Result<Vec<f64>> {
    if mask.len() != columns.len() {
        return Err(ClueError::Dimension {
            context: "u-fido mask",
            expected: columns.len(),
            got: mask.len(),
        });
    }
    let wide = expand_column_mask(columns, mask);
    if x0.len() != wide.len() || e.len() != wide.len() {
        return Err(ClueError::Dimension {
            context: "u-fido input",
            expected: wide.len(),
            got: x0.len(),
        });
    }
    Ok(wide
        .iter()
        .zip(x0.iter().zip(e))
        .map(|(&b, (&x, &e))| if b == 1.0 { x } else { e })
        .collect())
}

fn logistic_noise<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Result<Tensor> {
    let data = (0..rows * cols)
        .map(|_| {
            let u: f64 = rng.random_range(1e-12..1.0 - 1e-12);
            u.ln() - (1.0 - u).ln()
        })
        .collect();
    Ok(Tensor::matrix(rows, cols, data)?)
}

/// Optimizes per-row keep probabilities `ρ = sigmoid(θ)` with a concrete
/// relaxation of the mask, then builds the counterfactual from the hard mask
/// `ρ ≥ 0.5`.
pub fn ufido_optimize<I, P, R>(
    imputer: &I,
    predictor: &P,
    config: &UfidoConfig,
    x0: &Tensor,
    rng: &mut R,
) -> Result<Vec<UfidoResult>>
where
    I: Imputer + ?Sized,
    P: Predictor + ?Sized,
    R: Rng + ?Sized,
{
    config.validate()?;
    let columns = imputer.columns();
    let (b, c, s) = (x0.rows(), columns.len(), config.samples);
    if b == 0 {
        return Ok(Vec::new());
    }
    let n = b * s;
    let mut rep = vec![0.0; n * b];
    for r in 0..n {
        rep[r * b + r / s] = 1.0;
    }
    let rep = Tensor::matrix(n, b, rep)?;
    let x_rep = Tensor::matrix(n, x0.cols(), (0..n).flat_map(|r| x0.row(r / s).to_vec()).collect())?;
    let mut theta = Param::new(Tensor::zeros(&[b, c]));
    let mut opt = Adam::new(config.lr);
    let mut history = vec![Vec::with_capacity(config.steps); b];
    for step in 0..config.steps {
        let tape = Tape::new();
        let th = tape.leaf(theta.value.clone());
        let noise = tape.constant(logistic_noise(n, c, rng)?);
        let mask = tape
            .constant(rep.clone())
            .matmul(th)?
            .add(noise)?
            .scale(1.0 / config.temperature)
            .sigmoid();
        let x = tape.constant(x_rep.clone());
        let eps: Vec<Tensor> = (0..config.optimization_draws)
            .map(|_| Tensor::randn(&[n, imputer.noise_dim()], rng))
            .collect();
        let e = imputer.conditional_mean_var(&tape, x, mask, &eps)?;
        let wide = expand_var(&tape, columns, mask)?;
        let xc = wide.mul(x)?.add(wide.neg().add_scalar(1.0).mul(e)?)?;
        let h = predictor.predictive(&tape, xc)?.metric(predictor.task(), config.uncertainty);
        let sparsity = match config.convention {
            SparsityConvention::Verbatim => mask.sum_axis(1)?,
            SparsityConvention::PenalizeMasking => mask.neg().add_scalar(1.0).sum_axis(1)?,
        };
        let loss = h.add(sparsity.scale(config.lambda_b))?;
        let values = loss.value();
        for (r, hist) in history.iter_mut().enumerate() {
            let m = values.data()[r * s..(r + 1) * s].iter().sum::<f64>() / s as f64;
            if !m.is_finite() {
                return Err(ClueError::NonFinite { what: "u-fido loss", index: step });
            }
            hist.push(m);
        }
        let grads = tape.backward(loss.sum().scale(1.0 / s as f64))?;
        theta.accumulate(&grads.get_or_zeros(th))?;
        opt.step(&mut [&mut theta])?;
    }

    let rho: Vec<f64> = theta.value.data().iter().map(|t| 1.0 / (1.0 + (-t).exp())).collect();
    let hard: Vec<f64> = rho.iter().map(|&p| if p >= 0.5 { 1.0 } else { 0.0 }).collect();
    let hard_t = Tensor::matrix(b, c, hard.clone())?;
    let tape = Tape::new();
    let eps: Vec<Tensor> = (0..config.final_draws)
        .map(|_| Tensor::randn(&[b, imputer.noise_dim()], rng))
        .collect();
    let e = imputer
        .conditional_mean_var(&tape, tape.constant(x0.clone()), tape.constant(hard_t), &eps)?
        .value();
    let mut xc = Vec::with_capacity(b * x0.cols());
    for r in 0..b {
        xc.extend(mix_counterfactual(columns, x0.row(r), &hard[r * c..(r + 1) * c], e.row(r))?);
    }
    let xc = Tensor::matrix(b, x0.cols(), xc)?;
    let before = predictor.reports(x0)?;
    let after = predictor.reports(&xc)?;
    Ok((0..b)
        .map(|r| UfidoResult {
            x0: x0.row(r).to_vec(),
            x_c: xc.row(r).to_vec(),
            rho: rho[r * c..(r + 1) * c].to_vec(),
            mask: hard[r * c..(r + 1) * c].to_vec(),
            loss_trajectory: std::mem::take(&mut history[r]),
            before: before[r].clone(),
            after: after[r].clone(),
        })
        .collect())
}

fn expand_var<'t>(tape: &'t Tape, columns: &[ColumnSpec], b: Var<'t>) -> Result<Var<'t>> {
    let c = columns.len();
    let d: usize = columns.iter().map(ColumnSpec::width).sum();
    let mut e = vec![0.0; c * d];
    let mut off = 0;
    for (i, col) in columns.iter().enumerate() {
        for j in off..off + col.width() {
            e[i * d + j] = 1.0;
        }
        off += col.width();
    }
    Ok(b.matmul(tape.constant(Tensor::matrix(c, d, e)?))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clue::toys::{LinearUncertainty, QuadraticUncertainty};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Imputes fixed values regardless of the observed features.
    struct ConstantImputer {
        columns: Vec<ColumnSpec>,
        values: Vec<f64>,
    }

    impl Imputer for ConstantImputer {
        fn columns(&self) -> &[ColumnSpec] {
            &self.columns
        }

        fn noise_dim(&self) -> usize {
            1
        }

        fn conditional_mean_var<'t>(
            &self,
            tape: &'t Tape,
            x: Var<'t>,
            _b: Var<'t>,
            _eps: &[Tensor],
        ) -> Result<Var<'t>> {
            let n = x.shape()[0];
            Ok(tape.constant(Tensor::matrix(n, self.values.len(), self.values.repeat(n))?))
        }
    }

    fn cols(d: usize) -> Vec<ColumnSpec> {
        (0..d).map(|i| ColumnSpec::standard(format!("x{i}"))).collect()
    }

    #[test]
    fn mixing_examples() {
        let c = cols(2);
        assert_eq!(mix_counterfactual(&c, &[3.0, 5.0], &[1.0, 0.0], &[9.0, -1.0]).unwrap(), vec![3.0, -1.0]);
        assert_eq!(mix_counterfactual(&c, &[3.0, 5.0], &[1.0, 1.0], &[9.0, -1.0]).unwrap(), vec![3.0, 5.0]);
        let cat = vec![ColumnSpec::categorical("k", 3), ColumnSpec::standard("v")];
        assert_eq!(
            mix_counterfactual(&cat, &[1.0, 0.0, 0.0, 2.0], &[0.0, 1.0], &[0.1, 0.7, 0.2, 0.0]).unwrap(),
            vec![0.1, 0.7, 0.2, 2.0]
        );
    }

    #[test]
    fn masks_the_feature_that_carries_uncertainty() {
        // uncertainty comes only from x0; imputing 0 there removes it
        let imp = ConstantImputer { columns: cols(2), values: vec![0.0, 0.0] };
        let p = LinearUncertainty { offset: 0.0, slopes: vec![1.0, 0.0] };
        let x0 = Tensor::matrix(1, 2, vec![2.0, 5.0]).unwrap();
        let mut cfg = UfidoConfig::new(0.1);
        cfg.convention = SparsityConvention::PenalizeMasking;
        let r = &ufido_optimize(&imp, &p, &cfg, &x0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()[0];
        assert_eq!(r.mask, vec![0.0, 1.0]);
        assert_eq!(r.x_c, vec![0.0, 5.0]);
        assert!(r.rho[0] < 0.5 && r.rho[1] >= 0.5);
    }

    #[test]
    fn heavy_masking_penalty_keeps_input() {
        let imp = ConstantImputer { columns: cols(1), values: vec![0.0] };
        let x0 = Tensor::matrix(1, 1, vec![0.8]).unwrap();
        let mut cfg = UfidoConfig::new(100.0);
        cfg.convention = SparsityConvention::PenalizeMasking;
        let r = &ufido_optimize(&imp, &QuadraticUncertainty, &cfg, &x0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()[0];
        assert_eq!(r.mask, vec![1.0]);
        assert_eq!(r.x_c, vec![0.8]);
        // one-feature grid oracle over ρ for the expected loss
        // ρ·0.64 + (1 − ρ)·(0 + λ) is minimized at ρ = 1
        let best = (0..=100)
            .map(|i| i as f64 / 100.0)
            .min_by(|a, b| {
                let f = |p: f64| p * 0.64 + (1.0 - p) * 100.0;
                f(*a).total_cmp(&f(*b))
            })
            .unwrap();
        assert_eq!(best, 1.0);
        assert!(r.rho[0] > 0.5);
        cfg.steps = 300;
        let r = &ufido_optimize(&imp, &QuadraticUncertainty, &cfg, &x0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()[0];
        assert!(r.rho[0] > 0.95, "{:?}", r.rho);
    }

    #[test]
    fn verbatim_sign_pushes_towards_masking() {
        let imp = ConstantImputer { columns: cols(2), values: vec![0.3, 0.3] };
        let x0 = Tensor::matrix(1, 2, vec![0.1, -0.2]).unwrap();
        let cfg = UfidoConfig::new(10.0);
        let r = &ufido_optimize(&imp, &QuadraticUncertainty, &cfg, &x0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap()[0];
        assert_eq!(r.mask, vec![0.0, 0.0]);
        assert_eq!(r.x_c, vec![0.3, 0.3]);
    }
}
