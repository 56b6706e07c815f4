use std::f64::consts::SQRT_2;

use serde::{Deserialize, Serialize};

use crate::error::{ClueError, Result};

/// `(informativeness, relevance)` per hyperparameter. Informativeness is
/// higher-is-better; relevance is a non-negative cost, lower-is-better.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoCurve {
    pub method: String,
    pub hypers: Vec<f64>,
    pub points: Vec<(f64, f64)>,
}

impl ParetoCurve {
    pub fn new(method: impl Into<String>, hypers: Vec<f64>, points: Vec<(f64, f64)>) -> Result<Self> {
        let method = method.into();
        if hypers.is_empty() || hypers.len() != points.len() {
            return Err(ClueError::Config(format!(
                "curve {method} needs one point per hyperparameter, got {} and {}",
                hypers.len(),
                points.len()
            )));
        }
        if points.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
            return Err(ClueError::Config(format!("curve {method} has non-finite points")));
        }
        let increasing = hypers.windows(2).all(|w| w[0] < w[1]);
        let decreasing = hypers.windows(2).all(|w| w[0] > w[1]);
        if !(increasing || decreasing) {
            return Err(ClueError::Config(format!("curve {method} hyperparameters are not strictly ordered")));
        }
        Ok(Self { method, hypers, points })
    }
}

/// Axis maxima shared by every curve being scored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KneeScaling {
    pub informativeness_max: f64,
    pub relevance_max: f64,
}

impl KneeScaling {
    /// Maxima over all points of the reference curves.
    pub fn from_curves(reference: &[&ParetoCurve]) -> Result<Self> {
        if reference.is_empty() {
            return Err(ClueError::Empty("knee-point reference curves"));
        }
        let pts = reference.iter().flat_map(|c| c.points.iter());
        let (mut im, mut rm) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &(i, r) in pts {
            im = im.max(i);
            rm = rm.max(r);
        }
        Ok(Self {
            informativeness_max: im,
            relevance_max: rm,
        })
    }

    /// Both coordinates in `[0, 1/√2]`, 0 best. An axis whose maximum is not
    /// positive contributes 0; values beyond the shared maxima are clamped.
    pub fn transform(&self, informativeness: f64, relevance: f64) -> (f64, f64) {
        let cap = 1.0 / SQRT_2;
        let a = if self.informativeness_max > 0.0 {
            ((self.informativeness_max - informativeness) / (SQRT_2 * self.informativeness_max)).clamp(0.0, cap)
        } else {
            0.0
        };
        let b = if self.relevance_max > 0.0 {
            (relevance / (SQRT_2 * self.relevance_max)).clamp(0.0, cap)
        } else {
            0.0
        };
        (a, b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KneePoint {
    pub method: String,
    pub hyper: f64,
    pub index: usize,
    pub coords: (f64, f64),
    /// Euclidean distance to the origin, in `[0, 1]`.
    pub distance: f64,
}

/// The grid point nearest the origin after scaling.
pub fn knee_point(curve: &ParetoCurve, scaling: &KneeScaling) -> KneePoint {
    let mut best: Option<KneePoint> = None;
    for (index, (&hyper, &(i, r))) in curve.hypers.iter().zip(&curve.points).enumerate() {
        let coords = scaling.transform(i, r);
        let distance = coords.0.hypot(coords.1);
        if best.as_ref().is_none_or(|b| distance < b.distance) {
            best = Some(KneePoint {
                method: curve.method.clone(),
                hyper,
                index,
                coords,
                distance,
            });
        }
    }
    best.expect("curves are nonempty by construction")
}

/// Knee-points of `reference` and `others`, all scaled by the maxima of the
/// reference curves.
pub fn knee_points(reference: &[ParetoCurve], others: &[ParetoCurve]) -> Result<(KneeScaling, Vec<KneePoint>)> {
    let refs: Vec<&ParetoCurve> = reference.iter().collect();
    let scaling = KneeScaling::from_curves(&refs)?;
    let out = reference
        .iter()
        .chain(others)
        .map(|c| knee_point(c, &scaling))
        .collect();
    Ok((scaling, out))
}
