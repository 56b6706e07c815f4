//! Ground-truth evaluation of counterfactual explanations: a joint generative
//! model stands in for the data-generating process, so informativeness and
//! relevance of counterfactuals can be measured against known conditionals
//! and densities.

mod ground_truth;
mod knee;
mod real;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use clue_tensor::Tensor;

use crate::baselines::{local_sensitivity, ufido_optimize, SensitivityConfig, UfidoConfig};
use crate::bnn::{run_sghmc, train_map, Head, MlpConfig, PosteriorEnsemble, SghmcSchedule};
use crate::clue::{clue_optimize, ClueConfig};
use crate::dgm::{train_vae, train_vaeac, TrainConfig, Vae, VaeConfig, Vaeac, VaeacConfig};
use crate::error::{ClueError, Result};
use crate::uncertainty::{Predictor, UncertaintyKind};

pub use ground_truth::{
    build_ground_truth, GroundTruth, GroundTruthConfig, TargetDist, DEFAULT_GT_DRAWS, DEFAULT_LOG_PX_SAMPLES,
};
pub use knee::{knee_point, knee_points, KneePoint, KneeScaling, ParetoCurve};
pub use real::{nearest_neighbor_l2, real_data_eval, RealDataSummary};

pub const MIN_REJECTED: usize = 10;
pub const DEFAULT_REJECT_FRACTION: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Returns the input unchanged; calibrates the metrics.
    Identity,
    Sensitivity,
    Clue,
    Ufido,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Identity => "identity",
            Method::Sensitivity => "sensitivity",
            Method::Clue => "clue",
            Method::Ufido => "ufido",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = ClueError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Method::Identity),
            "sensitivity" => Ok(Method::Sensitivity),
            "clue" => Ok(Method::Clue),
            "ufido" | "u-fido" => Ok(Method::Ufido),
            _ => Err(ClueError::Config(format!("unknown method `{s}`"))),
        }
    }
}

/// Which uncertainty is explained and how informativeness is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Track {
    /// Explains aleatoric uncertainty; informativeness is `ΔH_gt`.
    Aleatoric,
    /// Explains epistemic uncertainty; informativeness is `Δerr_gt`.
    Epistemic,
}

impl Track {
    pub fn kind(self) -> UncertaintyKind {
        match self {
            Track::Aleatoric => UncertaintyKind::Aleatoric,
            Track::Epistemic => UncertaintyKind::Epistemic,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relevance {
    /// `‖Δx‖₁`.
    L1,
    /// `|Δlog p_gt|`.
    LogP,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionRule {
    /// The given fraction of test points with the highest uncertainty.
    TopFraction(f64),
    /// Points whose uncertainty metric exceeds the threshold.
    Threshold(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnnInference {
    Sghmc(SghmcSchedule),
    /// A single deterministic network.
    Map { epochs: usize, batch_size: usize, lr: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxModelConfig {
    pub latent_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameworkConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub track: Track,
    pub rejection: RejectionRule,
    pub bnn_depth: usize,
    pub bnn_width: usize,
    pub inference: BnnInference,
    /// Auxiliary VAE searched by CLUE.
    pub vae: AuxModelConfig,
    /// Auxiliary VAEAC imputer used by U-FIDO.
    pub vaeac: AuxModelConfig,
    /// Template; the grid value replaces `lambda_x`.
    pub clue: ClueConfig,
    /// Template; the grid value replaces `lambda_b`.
    pub ufido: UfidoConfig,
    /// Seed of the common random numbers used for every ground-truth query.
    pub eval_seed: u64,
}

/// Trained models and rejected synthetic test points for one seed.
pub struct FrameworkSetup<'g> {
    pub gt: &'g GroundTruth,
    pub config: FrameworkConfig,
    pub bnn: PosteriorEnsemble,
    pub vae: Vae,
    pub vaeac: Vaeac,
    pub x_test: Tensor,
    pub x_rejected: Tensor,
    baseline: GtQuantities,
}

/// Ground-truth quantities of a set of inputs.
#[derive(Clone, Debug, PartialEq)]
struct GtQuantities {
    h: Vec<f64>,
    err: Vec<f64>,
    log_p: Vec<f64>,
    model_h: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub dh_gt: f64,
    pub derr_gt: f64,
    pub dx_l1: f64,
    pub dlogp_gt: f64,
    pub dh_model: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub method: Method,
    pub hyper: f64,
    pub seed: u64,
    pub dh_gt: Vec<f64>,
    pub derr_gt: Vec<f64>,
    pub dx_l1: Vec<f64>,
    /// `min(0, log p_gt(x_c) − log p_gt(x0))`.
    pub dlogp_gt: Vec<f64>,
    /// Reduction in the explained model's own uncertainty metric.
    pub dh_model: Vec<f64>,
    pub means: MetricMeans,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl EvalRecord {
    pub fn informativeness(&self, track: Track) -> f64 {
        match track {
            Track::Aleatoric => self.means.dh_gt,
            Track::Epistemic => self.means.derr_gt,
        }
    }

    pub fn relevance(&self, relevance: Relevance) -> f64 {
        match relevance {
            Relevance::L1 => self.means.dx_l1,
            Relevance::LogP => -self.means.dlogp_gt,
        }
    }

    pub fn metric_values(&self) -> [(&'static str, f64); 5] {
        [
            ("dh_gt", self.means.dh_gt),
            ("derr_gt", self.means.derr_gt),
            ("dx_l1", self.means.dx_l1),
            ("dlogp_gt", self.means.dlogp_gt),
            ("dh_model", self.means.dh_model),
        ]
    }
}

/// One method's records (one seed) as a curve ordered by hyperparameter.
pub fn pareto_curve(records: &[EvalRecord], track: Track, relevance: Relevance) -> Result<ParetoCurve> {
    let first = records.first().ok_or(ClueError::Empty("evaluation records"))?;
    if records.iter().any(|r| r.method != first.method || r.seed != first.seed) {
        return Err(ClueError::Config("a curve needs records of one method and seed".into()));
    }
    let mut rs: Vec<&EvalRecord> = records.iter().collect();
    rs.sort_by(|a, b| a.hyper.total_cmp(&b.hyper));
    ParetoCurve::new(
        first.method.name(),
        rs.iter().map(|r| r.hyper).collect(),
        rs.iter().map(|r| (r.informativeness(track), r.relevance(relevance))).collect(),
    )
}

fn gt_quantities(gt: &GroundTruth, bnn: &PosteriorEnsemble, x: &Tensor, kind: UncertaintyKind, seed: u64) -> Result<GtQuantities> {
    // identical draws for every input set, so equal inputs give equal values
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dists = gt.conditional_y(x, &mut rng)?;
    let reports = bnn.reports(x)?;
    let h = dists.iter().map(TargetDist::uncertainty).collect();
    let err = dists
        .iter()
        .zip(&reports)
        .map(|(d, r)| ground_truth::err_against(d, r))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let log_p = gt.log_p(x, &mut rng)?;
    let model_h = bnn.metric_values(x, kind)?;
    Ok(GtQuantities { h, err, log_p, model_h })
}

fn select_rejected(values: &[f64], rule: RejectionRule) -> Result<Vec<usize>> {
    let mut idx: Vec<usize> = match rule {
        RejectionRule::TopFraction(f) => {
            if !(f > 0.0 && f <= 1.0) {
                return Err(ClueError::Config(format!("rejection fraction {f} must be in (0, 1]")));
            }
            let mut order: Vec<usize> = (0..values.len()).collect();
            order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
            order.truncate((f * values.len() as f64).round() as usize);
            order
        }
        RejectionRule::Threshold(t) => (0..values.len()).filter(|&i| values[i] > t).collect(),
    };
    idx.sort_unstable();
    if idx.len() < MIN_REJECTED {
        return Err(ClueError::TooFewRejected {
            got: idx.len(),
            need: MIN_REJECTED,
        });
    }
    Ok(idx)
}

/// Samples synthetic train and test sets from the ground truth, trains the
/// explained network and both auxiliary models, and rejects the most
/// uncertain test points.
pub fn prepare_framework<'g, R: Rng + ?Sized>(
    gt: &'g GroundTruth,
    config: &FrameworkConfig,
    rng: &mut R,
) -> Result<FrameworkSetup<'g>> {
    let (x_train, y_train) = gt.sample(config.n_train, rng)?;
    let (x_test, _) = gt.sample(config.n_test, rng)?;
    let mlp = MlpConfig::new(gt.x_width(), config.bnn_depth, config.bnn_width, Head::for_target(&gt.target))?;
    let bnn = match &config.inference {
        BnnInference::Sghmc(s) => run_sghmc(&x_train, &y_train, &gt.target, &mlp, s, rng)?,
        BnnInference::Map { epochs, batch_size, lr } => {
            train_map(&x_train, &y_train, &gt.target, &mlp, *epochs, *batch_size, *lr, rng)?
        }
    };
    let a = &config.vae;
    let (vae, _) = train_vae(
        &x_train,
        VaeConfig::new(gt.x_columns.clone(), a.latent_dim, a.width, a.depth),
        &a.train,
        rng,
    )?;
    let a = &config.vaeac;
    let (vaeac, _) = train_vaeac(
        &x_train,
        VaeacConfig::new(gt.x_columns.clone(), a.latent_dim, a.width, a.depth),
        &a.train,
        rng,
    )?;
    let kind = config.track.kind();
    let h = bnn.metric_values(&x_test, kind)?;
    let idx = select_rejected(&h, config.rejection)?;
    let x_rejected = x_test.select_rows(&idx);
    let baseline = gt_quantities(gt, &bnn, &x_rejected, kind, config.eval_seed)?;
    Ok(FrameworkSetup {
        gt,
        config: config.clone(),
        bnn,
        vae,
        vaeac,
        x_test,
        x_rejected,
        baseline,
    })
}

impl FrameworkSetup<'_> {
    /// Counterfactuals of every rejected point for one hyperparameter value:
    /// `η` for sensitivity, `λ_x` for CLUE, `λ_b` for U-FIDO.
    pub fn counterfactuals<R: Rng + ?Sized>(&self, method: Method, hyper: f64, rng: &mut R) -> Result<Tensor> {
        let x0 = &self.x_rejected;
        let kind = self.config.track.kind();
        match method {
            Method::Identity => Ok(x0.clone()),
            Method::Sensitivity => {
                let mut c = SensitivityConfig::new(hyper)?;
                c.uncertainty = kind;
                local_sensitivity(&self.bnn, x0, &c)
            }
            Method::Clue => {
                let mut c = self.config.clue.clone();
                c.lambda_x = hyper;
                c.uncertainty = kind;
                let res = clue_optimize(&self.vae, &self.bnn, &c, x0, None, rng)?;
                let data = res.into_iter().flat_map(|r| r.x_clue).collect();
                Ok(Tensor::matrix(x0.rows(), x0.cols(), data)?)
            }
            Method::Ufido => {
                let mut c = self.config.ufido.clone();
                c.lambda_b = hyper;
                c.uncertainty = kind;
                let res = ufido_optimize(&self.vaeac, &self.bnn, &c, x0, rng)?;
                let data = res.into_iter().flat_map(|r| r.x_c).collect();
                Ok(Tensor::matrix(x0.rows(), x0.cols(), data)?)
            }
        }
    }

    /// Per-point metrics of counterfactuals `xc` of the rejected points.
    pub fn evaluate(&self, method: Method, hyper: f64, seed: u64, xc: &Tensor) -> Result<EvalRecord> {
        let x0 = &self.x_rejected;
        if xc.shape() != x0.shape() {
            return Err(ClueError::Dimension {
                context: "counterfactual set",
                expected: x0.rows(),
                got: xc.rows(),
            });
        }
        let q = gt_quantities(self.gt, &self.bnn, xc, self.config.track.kind(), self.config.eval_seed)?;
        let b = &self.baseline;
        let diff = |a: &[f64], c: &[f64]| -> Vec<f64> { a.iter().zip(c).map(|(u, v)| u - v).collect() };
        let dh_gt = diff(&b.h, &q.h);
        let derr_gt = diff(&b.err, &q.err);
        let dh_model = diff(&b.model_h, &q.model_h);
        let dlogp_gt: Vec<f64> = b.log_p.iter().zip(&q.log_p).map(|(l0, lc)| (lc - l0).min(0.0)).collect();
        let dx_l1: Vec<f64> = (0..x0.rows())
            .map(|r| x0.row(r).iter().zip(xc.row(r)).map(|(a, c)| (a - c).abs()).sum())
            .collect();
        let means = MetricMeans {
            dh_gt: mean(&dh_gt),
            derr_gt: mean(&derr_gt),
            dx_l1: mean(&dx_l1),
            dlogp_gt: mean(&dlogp_gt),
            dh_model: mean(&dh_model),
        };
        Ok(EvalRecord {
            method,
            hyper,
            seed,
            dh_gt,
            derr_gt,
            dx_l1,
            dlogp_gt,
            dh_model,
            means,
        })
    }
}

/// One record per grid value.
pub fn run_framework<R: Rng + ?Sized>(
    setup: &FrameworkSetup<'_>,
    method: Method,
    grid: &[f64],
    seed: u64,
    rng: &mut R,
) -> Result<Vec<EvalRecord>> {
    if grid.is_empty() {
        return Err(ClueError::Empty("hyperparameter grid"));
    }
    grid.iter()
        .map(|&h| {
            let xc = setup.counterfactuals(method, h, rng)?;
            setup.evaluate(method, h, seed, &xc)
        })
        .collect()
}

/// `n` values spaced evenly in log space from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo) || n == 0 {
        return Err(ClueError::Config(format!("bad log grid {lo}:{hi}:{n}")));
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect())
}
