//! Per-dataset defaults: architectures, counterfactual weights, rejection
//! thresholds and training schedules, shipped as JSON under `presets/`.

use serde::{Deserialize, Serialize};

use crate::bnn::{Head, MlpConfig, SghmcSchedule};
use crate::clue::ClueConfig;
use crate::datasets::{ColumnSpec, SchemaColumn, Split, TargetSpec, TaskKind};
use crate::dgm::{OptimizerKind, TrainConfig, VaeConfig, VaeacConfig};
use crate::error::{ClueError, Result};
use crate::evalfw::GroundTruthConfig;
use crate::uncertainty::{RejectionMetric, RejectionPolicy};

const BUILTIN: [(&str, &str); 5] = [
    ("lsat", include_str!("../presets/lsat.json")),
    ("compas", include_str!("../presets/compas.json")),
    ("wine", include_str!("../presets/wine.json")),
    ("credit", include_str!("../presets/credit.json")),
    ("mnist", include_str!("../presets/mnist.json")),
];

/// Width divisor and epoch budget of the desk-scale variant.
pub const DESK_WIDTH_DIVISOR: usize = 4;
pub const DESK_DGM_EPOCHS: usize = 80;
pub const DESK_SGHMC_DIVISOR: usize = 10;
pub const DESK_ENSEMBLE: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectionSpec {
    pub metric: RejectionMetric,
    pub threshold: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BnnShape {
    pub depth: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgmShape {
    pub depth: usize,
    pub vae_width: usize,
    pub vaeac_width: usize,
    pub latent_dim: usize,
    pub inner_latent: usize,
    pub inner_width: usize,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Tabular,
    Image,
}

/// Generator used when no data file is supplied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    WineLike,
    Digits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    pub task: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<Vec<SchemaColumn>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_side: Option<usize>,
    pub rejection: RejectionSpec,
    /// `λ_x · d`.
    pub lambda_x: f64,
    pub bnn: BnnShape,
    pub dgm: DgmShape,
    pub schedule: ScheduleKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticKind>,
    /// SG-HMC schedule and DGM epochs; full scale when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingOverride>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingOverride {
    pub sghmc: SghmcSchedule,
    pub dgm_epochs: usize,
    pub dgm_batch_size: usize,
}

pub fn preset_names() -> Vec<&'static str> {
    BUILTIN.iter().map(|(n, _)| *n).collect()
}

impl Preset {
    pub fn builtin(name: &str) -> Result<Self> {
        let text = BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| *t)
            .ok_or_else(|| ClueError::Config(format!("unknown preset `{name}` (known: {})", preset_names().join(", "))))?;
        let p: Preset = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bnn.width == 0 || self.dgm.vae_width == 0 || self.dgm.latent_dim == 0 {
            return Err(ClueError::Config(format!("preset {} has a zero-sized network", self.name)));
        }
        if !(self.lambda_x >= 0.0) || !(self.rejection.threshold > 0.0) {
            return Err(ClueError::Config(format!("preset {} has invalid λ_x or threshold", self.name)));
        }
        match (self.task, self.rejection.metric) {
            (TaskKind::Classification, RejectionMetric::Entropy) | (TaskKind::Regression, RejectionMetric::Sigma) => Ok(()),
            (t, m) => Err(ClueError::TaskMismatch(format!("preset {}: {m:?} threshold for {t:?}", self.name))),
        }
    }

    /// Narrower networks and shorter schedules that train in minutes on one
    /// core. Table values stay available through [`Preset::builtin`].
    pub fn desk(&self) -> Self {
        let n = |w: usize| (w / DESK_WIDTH_DIVISOR).max(32);
        let mut p = self.clone();
        p.bnn.width = n(self.bnn.width);
        p.dgm.vae_width = n(self.dgm.vae_width);
        p.dgm.vaeac_width = n(self.dgm.vaeac_width);
        p.dgm.inner_width = n(self.dgm.inner_width);
        p.dgm.depth = self.dgm.depth.min(3);
        p.dgm.lr = self.dgm.lr * 10.0;
        let mut s = self.full_sghmc().scaled_down(DESK_SGHMC_DIVISOR, DESK_ENSEMBLE);
        s.batch_size = 128;
        p.training = Some(TrainingOverride {
            sghmc: s,
            dgm_epochs: DESK_DGM_EPOCHS,
            dgm_batch_size: 128,
        });
        p
    }

    fn full_sghmc(&self) -> SghmcSchedule {
        match self.schedule {
            ScheduleKind::Tabular => SghmcSchedule::tabular(),
            ScheduleKind::Image => SghmcSchedule::image(),
        }
    }

    pub fn sghmc(&self) -> SghmcSchedule {
        self.training.as_ref().map_or_else(|| self.full_sghmc(), |t| t.sghmc.clone())
    }

    pub fn rejection_policy(&self) -> Result<RejectionPolicy> {
        RejectionPolicy::new(self.rejection.metric, self.rejection.threshold)
    }

    pub fn clue_config(&self) -> ClueConfig {
        ClueConfig::with_lambda_x(self.lambda_x)
    }

    pub fn mlp(&self, input_dim: usize, target: &TargetSpec) -> Result<MlpConfig> {
        MlpConfig::new(input_dim, self.bnn.depth, self.bnn.width, Head::for_target(target))
    }

    /// RAdam at the preset learning rate.
    pub fn dgm_train(&self) -> TrainConfig {
        let (epochs, batch_size) = self
            .training
            .as_ref()
            .map_or((full_dgm_epochs(self.schedule), 128), |t| (t.dgm_epochs, t.dgm_batch_size));
        TrainConfig {
            epochs,
            batch_size,
            lr: self.dgm.lr,
            optimizer: OptimizerKind::RAdam,
        }
    }

    pub fn vae_config(&self, columns: Vec<ColumnSpec>) -> VaeConfig {
        VaeConfig::new(columns, self.dgm.latent_dim, self.dgm.vae_width, self.dgm.depth)
    }

    pub fn vaeac_config(&self, columns: Vec<ColumnSpec>) -> VaeacConfig {
        VaeacConfig::new(columns, self.dgm.latent_dim, self.dgm.vaeac_width, self.dgm.depth)
    }

    pub fn ground_truth_config(&self) -> GroundTruthConfig {
        GroundTruthConfig::new(
            self.dgm.latent_dim,
            self.dgm.vaeac_width,
            self.dgm.depth,
            self.dgm.inner_latent,
            self.dgm.inner_width,
            self.dgm_train(),
        )
    }
}

/// Epoch budget of full-scale generative model training.
fn full_dgm_epochs(kind: ScheduleKind) -> usize {
    match kind {
        ScheduleKind::Tabular => 2000,
        ScheduleKind::Image => 150,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_values() {
        let expect = [
            ("lsat", 1.5, 1.0, 200, 4, 4),
            ("compas", 2.0, 0.2, 200, 4, 4),
            ("wine", 2.5, 2.0, 200, 6, 6),
            ("credit", 3.0, 0.5, 200, 8, 8),
            ("mnist", 25.0, 0.5, 1200, 20, 8),
        ];
        for (name, lx, th, bw, lat, inner) in expect {
            let p = Preset::builtin(name).unwrap();
            assert_eq!(p.lambda_x, lx, "{name}");
            assert_eq!(p.rejection.threshold, th, "{name}");
            assert_eq!((p.bnn.depth, p.bnn.width), (2, bw));
            assert_eq!((p.dgm.latent_dim, p.dgm.inner_latent), (lat, inner));
            assert_eq!(p.clue_config().lambda_x, lx);
        }
        let w = Preset::builtin("wine").unwrap();
        assert_eq!(w.schema.as_ref().unwrap().iter().filter(|c| !c.target).count(), 11);
        assert_eq!(w.split, Some(Split::Counts { train: 1438, test: 160 }));
        assert_eq!((w.dgm.depth, w.dgm.vae_width, w.dgm.vaeac_width, w.dgm.inner_width), (3, 300, 350, 150));
        assert_eq!(w.dgm_train().lr, 1e-4);
        assert_eq!(Preset::builtin("mnist").unwrap().dgm_train().lr, 3e-4);
        let credit = Preset::builtin("credit").unwrap();
        assert_eq!(credit.schema.unwrap().iter().filter(|c| !c.target).count(), 23);
        assert_eq!(Preset::builtin("compas").unwrap().schema.unwrap().len(), 8);
        assert!(Preset::builtin("none").is_err());
    }

    #[test]
    fn desk_variant_is_smaller() {
        let p = Preset::builtin("wine").unwrap();
        let d = p.desk();
        assert!(d.bnn.width < p.bnn.width && d.dgm.vae_width < p.dgm.vae_width);
        assert_eq!(d.lambda_x, p.lambda_x);
        assert_eq!(d.sghmc().n_samples, DESK_ENSEMBLE);
        assert_eq!(d.dgm_train().epochs, DESK_DGM_EPOCHS);
        assert_eq!(p.sghmc(), SghmcSchedule::tabular());
    }
}
