use serde::{Deserialize, Serialize};

use crate::datasets::{argmax, column_offsets, ColumnKind, EncodedDataset};
use crate::error::{ClueError, Result};

/// Minimum percentile gap for a continuous change to be highlighted.
pub const HIGHLIGHT_PERCENTILE_GAP: f64 = 15.0;

/// Signed quadratic change map `|Δx|·Δx` with `Δx = x_clue − x0`.
pub fn saliency_image(x0: &[f64], x_clue: &[f64]) -> Result<Vec<f64>> {
    if x0.len() != x_clue.len() {
        return Err(ClueError::Dimension {
            context: "saliency",
            expected: x0.len(),
            got: x_clue.len(),
        });
    }
    Ok(x0
        .iter()
        .zip(x_clue)
        .map(|(a, b)| {
            let d = b - a;
            d.abs() * d
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureChange {
    pub column: String,
    pub encoded_original: Vec<f64>,
    pub encoded_counterfactual: Vec<f64>,
    /// Original units for continuous columns, category index otherwise.
    pub original: f64,
    pub counterfactual: f64,
    pub original_label: Option<String>,
    pub counterfactual_label: Option<String>,
    pub percentile_original: Option<f64>,
    pub percentile_counterfactual: Option<f64>,
    pub highlighted: bool,
}

fn change(ds: &EncodedDataset, offsets: &[usize], c: usize, x0: &[f64], xc: &[f64]) -> Result<FeatureChange> {
    let col = &ds.columns[c];
    let (lo, hi) = (offsets[c], offsets[c] + col.width());
    let (e0, ec) = (&x0[lo..hi], &xc[lo..hi]);
    let mut fc = FeatureChange {
        column: col.name.clone(),
        encoded_original: e0.to_vec(),
        encoded_counterfactual: ec.to_vec(),
        original: e0[0],
        counterfactual: ec[0],
        original_label: None,
        counterfactual_label: None,
        percentile_original: None,
        percentile_counterfactual: None,
        highlighted: false,
    };
    match &col.kind {
        ColumnKind::Continuous { mean, std } => {
            fc.original = e0[0] * std + mean;
            fc.counterfactual = ec[0] * std + mean;
            let p0 = ds.percentile(c, fc.original)?;
            let pc = ds.percentile(c, fc.counterfactual)?;
            fc.highlighted = (pc - p0).abs() >= HIGHLIGHT_PERCENTILE_GAP;
            fc.percentile_original = Some(p0);
            fc.percentile_counterfactual = Some(pc);
        }
        ColumnKind::Categorical { categories } => {
            let (a, b) = (argmax(e0), argmax(ec));
            fc.original = a as f64;
            fc.counterfactual = b as f64;
            fc.original_label = Some(categories[a].clone());
            fc.counterfactual_label = Some(categories[b].clone());
            fc.highlighted = a != b;
        }
        ColumnKind::Bernoulli => {
            fc.highlighted = (e0[0] >= 0.5) != (ec[0] >= 0.5);
        }
    }
    Ok(fc)
}

fn check_rows(ds: &EncodedDataset, x0: &[f64], xc: &[f64]) -> Result<()> {
    for r in [x0, xc] {
        if r.len() != ds.dim() {
            return Err(ClueError::Dimension {
                context: "display row",
                expected: ds.dim(),
                got: r.len(),
            });
        }
    }
    Ok(())
}

/// One entry per column. Continuous columns are highlighted when their
/// training-set percentiles differ by at least
/// [`HIGHLIGHT_PERCENTILE_GAP`]; categorical columns whenever the category
/// changes.
pub fn display_tabular(ds: &EncodedDataset, x0: &[f64], x_clue: &[f64]) -> Result<Vec<FeatureChange>> {
    check_rows(ds, x0, x_clue)?;
    let offsets = column_offsets(&ds.columns);
    (0..ds.columns.len())
        .map(|c| change(ds, &offsets, c, x0, x_clue))
        .collect()
}

/// As [`display_tabular`] restricted to the named columns.
pub fn display_selected(
    ds: &EncodedDataset,
    x0: &[f64],
    x_clue: &[f64],
    names: &[&str],
) -> Result<Vec<FeatureChange>> {
    check_rows(ds, x0, x_clue)?;
    let offsets = column_offsets(&ds.columns);
    names
        .iter()
        .map(|n| change(ds, &offsets, ds.column_index(n)?, x0, x_clue))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{ColumnSpec, TargetSpec};
    use clue_tensor::Tensor;

    #[test]
    fn saliency_is_sign_preserving_square() {
        assert_eq!(saliency_image(&[0.0, 0.5, 0.2], &[0.5, 0.0, 0.2]).unwrap(), vec![0.25, -0.25, 0.0]);
        assert!(saliency_image(&[0.0], &[0.0, 1.0]).is_err());
    }

    fn dataset() -> EncodedDataset {
        // continuous column with values 0..=100 (mean 50, std 10 encoding) so
        // percentiles equal raw values; plus a 3-way categorical
        let columns = vec![ColumnSpec::continuous("age", 50.0, 10.0), ColumnSpec::categorical("kind", 3)];
        let mut data = Vec::new();
        for i in 0..=100 {
            data.push((i as f64 - 50.0) / 10.0);
            data.extend([1.0, 0.0, 0.0]);
        }
        let x = Tensor::matrix(101, 4, data).unwrap();
        EncodedDataset::from_encoded(columns, x, vec![0.0; 101], TargetSpec::Classification { name: "y".into(), classes: vec!["a".into(), "b".into()] }, (0..101).collect(), vec![])
            .unwrap()
    }

    #[test]
    fn highlighting_rules() {
        let ds = dataset();
        let x0 = [0.0, 1.0, 0.0, 0.0];
        let up20 = [2.0, 1.0, 0.0, 0.0];
        let up10 = [1.0, 1.0, 0.0, 0.0];
        let flip = [0.0, 0.0, 0.0, 1.0];
        let c = display_tabular(&ds, &x0, &up20).unwrap();
        assert!((c[0].percentile_original.unwrap() - 50.0).abs() < 1e-9);
        assert!((c[0].percentile_counterfactual.unwrap() - 70.0).abs() < 1e-9);
        assert!(c[0].highlighted && !c[1].highlighted);
        assert_eq!(c[0].counterfactual, 70.0);
        assert!(!display_tabular(&ds, &x0, &up10).unwrap()[0].highlighted);
        let c = display_tabular(&ds, &x0, &flip).unwrap();
        assert!(c[1].highlighted && !c[0].highlighted);
        assert_eq!(c[1].counterfactual_label.as_deref(), Some("2"));
        assert!(display_selected(&ds, &x0, &flip, &["height"]).is_err());
        assert_eq!(display_selected(&ds, &x0, &flip, &["kind"]).unwrap().len(), 1);
    }
}
