use clue::datasets::{digit_images, load_idx_dataset, load_tabular, wine_like, EncodedDataset, Split};
use clue::presets::SyntheticKind;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::Scale;

const IDX_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// The preset's dataset: the file given by `--data`, or the preset's
/// synthetic stand-in.
pub fn load_dataset(cfg: &RunConfig) -> Result<EncodedDataset> {
    let preset = cfg.preset()?;
    if let Some(schema) = &preset.schema {
        let split = preset.split.unwrap_or(Split::Fraction { test: 0.1 });
        return match (&cfg.data, preset.synthetic) {
            (Some(path), _) => Ok(load_tabular(path, schema, split, cfg.seed)?),
            (None, Some(SyntheticKind::WineLike)) => {
                let (train, test) = match split {
                    Split::Counts { train, test } => (train, test),
                    Split::Fraction { .. } => (1438, 160),
                };
                Ok(wine_like(train, test, cfg.seed)?)
            }
            (None, _) => Err(CliError::Usage(format!(
                "preset `{}` needs --data <csv>",
                preset.name
            ))),
        };
    }
    match &cfg.data {
        Some(dir) => {
            let p: Vec<_> = IDX_FILES.iter().map(|f| dir.join(f)).collect();
            Ok(load_idx_dataset(&p[0], &p[1], &p[2], &p[3], None)?)
        }
        None => match (preset.synthetic, cfg.scale) {
            (Some(SyntheticKind::Digits), Scale::Desk) => Ok(digit_images(2000, 300, 14, cfg.seed)?),
            (Some(SyntheticKind::Digits), Scale::Full) => {
                Ok(digit_images(10000, 1000, preset.image_side.unwrap_or(28), cfg.seed)?)
            }
            _ => Err(CliError::Usage(format!(
                "preset `{}` needs --data <idx directory>",
                preset.name
            ))),
        },
    }
}
