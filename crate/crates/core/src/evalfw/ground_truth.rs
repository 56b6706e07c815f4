use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use clue_tensor::Tensor;

use crate::checkpoint;
use crate::datasets::{argmax, encoded_width, ColumnSpec, EncodedDataset, TargetSpec, TaskKind};
use crate::dgm::{
    log_px_importance, train_two_stage, train_vaeac, ColumnDist, InputMarginal, Outer, TrainConfig, TwoStage,
    VaeacConfig,
};
use crate::error::{ClueError, Result};
use crate::uncertainty::Predictor;

pub const DEFAULT_LOG_PX_SAMPLES: usize = 256;
pub const DEFAULT_GT_DRAWS: usize = 32;

const TARGET_COLUMN: &str = "__target";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthConfig {
    pub latent_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub inner_latent: usize,
    pub inner_width: usize,
    pub train: TrainConfig,
    pub inner_train: TrainConfig,
    /// Conditional-prior draws averaged for `p_gt(y | x)`.
    pub conditional_draws: usize,
    pub log_px_samples: usize,
    /// Add decoder noise to continuous columns when sampling.
    pub jitter: bool,
}

impl GroundTruthConfig {
    pub fn new(latent_dim: usize, width: usize, depth: usize, inner_latent: usize, inner_width: usize, train: TrainConfig) -> Self {
        Self {
            latent_dim,
            width,
            depth,
            inner_latent,
            inner_width,
            inner_train: train.clone(),
            train,
            conditional_draws: DEFAULT_GT_DRAWS,
            log_px_samples: DEFAULT_LOG_PX_SAMPLES,
            jitter: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conditional_draws == 0 || self.log_px_samples == 0 {
            return Err(ClueError::Config("ground truth needs at least one draw and one importance sample".into()));
        }
        Ok(())
    }
}

/// `p_gt(y | x)` for one input. Regression moments are in original units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TargetDist {
    Classes(Vec<f64>),
    Gaussian { mean: f64, var: f64 },
}

impl TargetDist {
    /// Entropy for classes, standard deviation for a Gaussian.
    pub fn uncertainty(&self) -> f64 {
        match self {
            TargetDist::Classes(p) => -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>(),
            TargetDist::Gaussian { var, .. } => var.max(0.0).sqrt(),
        }
    }
}

/// Joint generative model over inputs and target used as the data-generating
/// process in the evaluation framework.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub model: TwoStage,
    pub x_columns: Vec<ColumnSpec>,
    pub target: TargetSpec,
    pub config: GroundTruthConfig,
}

#[derive(Serialize, Deserialize)]
struct GroundTruthManifest {
    model: String,
    x_columns: Vec<ColumnSpec>,
    target: TargetSpec,
    config: GroundTruthConfig,
}

fn target_column(target: &TargetSpec) -> ColumnSpec {
    match target {
        TargetSpec::Classification { classes, .. } => ColumnSpec::categorical(TARGET_COLUMN, classes.len()),
        TargetSpec::Regression { .. } => ColumnSpec::standard(TARGET_COLUMN),
    }
}

fn encode_target(target: &TargetSpec, y: f64) -> Vec<f64> {
    match target {
        TargetSpec::Classification { classes, .. } => {
            let mut v = vec![0.0; classes.len()];
            v[y as usize] = 1.0;
            v
        }
        TargetSpec::Regression { .. } => vec![y],
    }
}

/// Fits a joint VAEAC over the training rows of `ds` with the target as an
/// extra column, then an inner VAE over its latent space.
pub fn build_ground_truth<R: Rng + ?Sized>(
    ds: &EncodedDataset,
    config: &GroundTruthConfig,
    rng: &mut R,
) -> Result<GroundTruth> {
    config.validate()?;
    let x = ds.x_train();
    let y = ds.y_train();
    if x.rows() < 2 {
        return Err(ClueError::Empty("ground truth training set"));
    }
    let mut columns = ds.columns.clone();
    columns.push(target_column(&ds.target));
    let width = encoded_width(&columns);
    let mut data = Vec::with_capacity(x.rows() * width);
    for (r, &yv) in y.iter().enumerate() {
        data.extend_from_slice(x.row(r));
        data.extend(encode_target(&ds.target, yv));
    }
    let joint = Tensor::matrix(x.rows(), width, data)?;
    let mut vc = VaeacConfig::new(columns, config.latent_dim, config.width, config.depth);
    vc.learned_variance = true;
    let (vaeac, _) = train_vaeac(&joint, vc, &config.train, rng)?;
    let (model, _) = train_two_stage(
        &joint,
        Outer::Vaeac(vaeac),
        config.inner_latent,
        config.inner_width,
        &config.inner_train,
        rng,
    )?;
    Ok(GroundTruth {
        model,
        x_columns: ds.columns.clone(),
        target: ds.target.clone(),
        config: config.clone(),
    })
}

impl GroundTruth {
    pub fn x_width(&self) -> usize {
        encoded_width(&self.x_columns)
    }

    pub fn task(&self) -> TaskKind {
        self.target.kind()
    }

    fn vaeac(&self) -> &crate::dgm::Vaeac {
        match &self.model.outer {
            Outer::Vaeac(m) => m,
            Outer::Vae(_) => unreachable!("ground truth outer model is always a vaeac"),
        }
    }

    fn joint_width(&self) -> usize {
        self.model.layout().width()
    }

    /// Inputs padded with a zero target block.
    fn pad(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.x_width() {
            return Err(ClueError::Dimension {
                context: "ground truth input",
                expected: self.x_width(),
                got: x.cols(),
            });
        }
        let w = self.joint_width();
        let mut data = Vec::with_capacity(x.rows() * w);
        for r in 0..x.rows() {
            data.extend_from_slice(x.row(r));
            data.extend(std::iter::repeat_n(0.0, w - x.cols()));
        }
        Ok(Tensor::matrix(x.rows(), w, data)?)
    }

    fn input_mask(&self) -> Vec<bool> {
        let mut keep = vec![true; self.x_columns.len()];
        keep.push(false);
        keep
    }

    /// Draws `(x, y)` pairs. Targets are class indices or standardized values,
    /// as in an [`EncodedDataset`].
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<(Tensor, Vec<f64>)> {
        let joint = self.model.ancestral_sample(n, self.config.jitter, rng)?;
        let xw = self.x_width();
        let mut data = Vec::with_capacity(n * xw);
        let mut y = Vec::with_capacity(n);
        for r in 0..n {
            let row = joint.row(r);
            data.extend_from_slice(&row[..xw]);
            y.push(match self.target {
                TargetSpec::Classification { .. } => argmax(&row[xw..]) as f64,
                TargetSpec::Regression { .. } => row[xw],
            });
        }
        Ok((Tensor::matrix(n, xw, data)?, y))
    }

    /// Monte Carlo `p_gt(y | x)` from the conditional prior with only the
    /// inputs observed.
    pub fn conditional_y<R: Rng + ?Sized>(&self, x: &Tensor, rng: &mut R) -> Result<Vec<TargetDist>> {
        if x.rows() == 0 {
            return Ok(Vec::new());
        }
        let xj = self.pad(x)?;
        let keep = self.input_mask();
        let flags: Vec<f64> = keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        let b = Tensor::matrix(x.rows(), flags.len(), flags.repeat(x.rows()))?;
        let draws = self.config.conditional_draws;
        let raws = self.vaeac().conditional_raw(&xj, &b, draws, rng)?;
        let layout = self.model.layout();
        let yc = self.x_columns.len();
        let (m, s) = self.target.scale();
        (0..x.rows())
            .map(|r| {
                let dists = raws
                    .iter()
                    .map(|raw| layout.column_dist(raw.row(r), yc))
                    .collect::<Result<Vec<_>>>()?;
                Ok(match &self.target {
                    TargetSpec::Classification { classes, .. } => {
                        let mut p = vec![0.0; classes.len()];
                        for d in &dists {
                            if let ColumnDist::Categorical { probs } = d {
                                for (a, b) in p.iter_mut().zip(probs) {
                                    *a += b / draws as f64;
                                }
                            }
                        }
                        TargetDist::Classes(p)
                    }
                    TargetSpec::Regression { .. } => {
                        let (mut m1, mut m2) = (0.0, 0.0);
                        for d in &dists {
                            if let ColumnDist::Gaussian { mean, var } = d {
                                m1 += mean / draws as f64;
                                m2 += (var + mean * mean) / draws as f64;
                            }
                        }
                        TargetDist::Gaussian {
                            mean: m1 * s + m,
                            var: (m2 - m1 * m1).max(0.0) * s * s,
                        }
                    }
                })
            })
            .collect()
    }

    /// Entropy (classification) or standard deviation (regression) of
    /// `p_gt(y | x)`.
    pub fn h_gt<R: Rng + ?Sized>(&self, x: &Tensor, rng: &mut R) -> Result<Vec<f64>> {
        Ok(self.conditional_y(x, rng)?.iter().map(TargetDist::uncertainty).collect())
    }

    /// Disagreement of `predictor` with the most likely ground-truth target:
    /// negative log probability of the g.t. mode for classification, squared
    /// error of the predictive mean against the g.t. mean for regression.
    pub fn err_gt<P: Predictor + ?Sized, R: Rng + ?Sized>(
        &self,
        predictor: &P,
        x: &Tensor,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let gt = self.conditional_y(x, rng)?;
        let reports = predictor.reports(x)?;
        Ok(gt.iter().zip(&reports).map(|(g, rep)| err_against(g, rep)).collect())
    }

    /// Importance-sampled `log p_gt(x)` with the target marginalized out.
    pub fn log_p<R: Rng + ?Sized>(&self, x: &Tensor, rng: &mut R) -> Result<Vec<f64>> {
        let xj = self.pad(x)?;
        let marginal = InputMarginal {
            model: &self.model,
            keep: self.input_mask(),
        };
        log_px_importance(&marginal, &xj, self.config.log_px_samples, rng)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::prepare_dir(dir)?;
        self.model.save(&dir.join("model"), serde_json::Value::Null)?;
        checkpoint::write_manifest(
            dir,
            &GroundTruthManifest {
                model: "ground_truth".into(),
                x_columns: self.x_columns.clone(),
                target: self.target.clone(),
                config: self.config.clone(),
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: GroundTruthManifest = checkpoint::read_manifest(dir)?;
        if m.model != "ground_truth" {
            return Err(ClueError::Checkpoint(format!("{} is not a ground truth model", dir.display())));
        }
        let model = TwoStage::load(&dir.join("model"))?;
        if !matches!(model.outer, Outer::Vaeac(_)) {
            return Err(ClueError::Checkpoint("ground truth outer model must be a vaeac".into()));
        }
        Ok(Self {
            model,
            x_columns: m.x_columns,
            target: m.target,
            config: m.config,
        })
    }
}

pub(crate) fn err_against(gt: &TargetDist, report: &crate::uncertainty::UncertaintyReport) -> f64 {
    use crate::uncertainty::UncertaintyReport as U;
    match (gt, report) {
        (TargetDist::Classes(p), U::Classification { probs, .. }) => {
            let q = probs[argmax(p)];
            -q.max(f64::MIN_POSITIVE).ln()
        }
        (TargetDist::Gaussian { mean, .. }, U::Regression { mean: m, .. }) => (m - mean).powi(2),
        _ => f64::NAN,
    }
}
