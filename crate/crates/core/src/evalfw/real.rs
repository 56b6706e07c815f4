use serde::{Deserialize, Serialize};

use clue_tensor::Tensor;

use crate::error::{ClueError, Result};
use crate::uncertainty::{Predictor, UncertaintyKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealDataSummary {
    pub n_points: usize,
    pub mean_delta_h: f64,
    pub mean_nn_distance: f64,
    /// Mean of per-point `ΔH / d_NN`; points at zero distance are skipped.
    pub mean_ratio: Option<f64>,
    pub ratio_points: usize,
}

/// Exhaustive ℓ2 distance from `x` to the closest row of `train`.
pub fn nearest_neighbor_l2(train: &Tensor, x: &[f64]) -> Result<f64> {
    if train.rows() == 0 {
        return Err(ClueError::Empty("nearest-neighbour reference set"));
    }
    if train.cols() != x.len() {
        return Err(ClueError::Dimension {
            context: "nearest-neighbour query",
            expected: train.cols(),
            got: x.len(),
        });
    }
    let best = (0..train.rows())
        .map(|r| train.row(r).iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .fold(f64::INFINITY, f64::min);
    Ok(best.sqrt())
}

/// Uncertainty reduction and distance to the training data for
/// counterfactuals `xc` of real test points `x0`.
pub fn real_data_eval<P: Predictor + ?Sized>(
    predictor: &P,
    kind: UncertaintyKind,
    x_train: &Tensor,
    x0: &Tensor,
    xc: &Tensor,
) -> Result<RealDataSummary> {
    if x0.rows() == 0 {
        return Err(ClueError::Empty("rejected test points"));
    }
    if x0.shape() != xc.shape() {
        return Err(ClueError::Dimension {
            context: "counterfactual rows",
            expected: x0.rows(),
            got: xc.rows(),
        });
    }
    let h0 = predictor.metric_values(x0, kind)?;
    let hc = predictor.metric_values(xc, kind)?;
    let n = x0.rows();
    let (mut dh, mut dnn, mut ratio, mut rn) = (0.0, 0.0, 0.0, 0usize);
    for r in 0..n {
        let d = nearest_neighbor_l2(x_train, xc.row(r))?;
        let delta = h0[r] - hc[r];
        dh += delta;
        dnn += d;
        if d > 0.0 {
            ratio += delta / d;
            rn += 1;
        }
    }
    Ok(RealDataSummary {
        n_points: n,
        mean_delta_h: dh / n as f64,
        mean_nn_distance: dnn / n as f64,
        mean_ratio: (rn > 0).then(|| ratio / rn as f64),
        ratio_points: rn,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clue::toys::QuadraticUncertainty;

    #[test]
    fn identity_and_duplicates() {
        let train = Tensor::matrix(3, 2, vec![0.0, 0.0, 3.0, 4.0, 1.0, 1.0]).unwrap();
        let x0 = Tensor::matrix(2, 2, vec![3.0, 0.0, 1.0, 2.0]).unwrap();
        let s = real_data_eval(&QuadraticUncertainty, UncertaintyKind::Total, &train, &x0, &x0).unwrap();
        assert_eq!(s.mean_delta_h, 0.0);
        assert!((s.mean_nn_distance - (5f64.sqrt() + 1.0) / 2.0).abs() < 1e-12);

        let dup = Tensor::matrix(2, 2, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let s = real_data_eval(&QuadraticUncertainty, UncertaintyKind::Total, &train, &x0, &dup).unwrap();
        assert_eq!(s.mean_nn_distance, 0.0);
        assert_eq!(s.mean_ratio, None);
        assert!((s.mean_delta_h - (9.0 - 2.0 + 5.0) / 2.0).abs() < 1e-12);
        assert!(real_data_eval(&QuadraticUncertainty, UncertaintyKind::Total, &train, &Tensor::zeros(&[0, 2]), &Tensor::zeros(&[0, 2])).is_err());
    }
}
