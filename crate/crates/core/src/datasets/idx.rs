use std::path::Path;

use clue_tensor::Tensor;

use super::{ColumnSpec, EncodedDataset, TargetSpec};
use crate::error::{io_err, ClueError, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    /// Row-major pixels per image, scaled to `[0, 1]`.
    pub pixels: Vec<Vec<f64>>,
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| ClueError::Idx {
            offset,
            reason: "truncated header".into(),
        })
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(ClueError::Idx {
            offset: 0,
            reason: format!("bad image magic {magic:#010x}"),
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let px = rows * cols;
    let need = 16 + n * px;
    if bytes.len() < need {
        return Err(ClueError::Idx {
            offset: bytes.len(),
            reason: format!("truncated pixel data: need {need} bytes"),
        });
    }
    let pixels = (0..n)
        .map(|i| {
            bytes[16 + i * px..16 + (i + 1) * px]
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect()
        })
        .collect();
    Ok(IdxImages { rows, cols, pixels })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(ClueError::Idx {
            offset: 0,
            reason: format!("bad label magic {magic:#010x}"),
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = bytes.get(8..8 + n).ok_or_else(|| ClueError::Idx {
        offset: bytes.len(),
        reason: format!("truncated labels: need {} bytes", 8 + n),
    })?;
    Ok(body.to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(io_err(path))
}

/// Loads IDX train and test pairs. `classes` keeps only the listed labels,
/// remapped to `0..classes.len()` in the given order.
pub fn load_idx_dataset(
    train_images: &Path,
    train_labels: &Path,
    test_images: &Path,
    test_labels: &Path,
    classes: Option<&[u8]>,
) -> Result<EncodedDataset> {
    let load = |ip: &Path, lp: &Path| -> Result<(IdxImages, Vec<u8>)> {
        let imgs = parse_idx_images(&read(ip)?)?;
        let labels = parse_idx_labels(&read(lp)?)?;
        if imgs.pixels.len() != labels.len() {
            return Err(ClueError::Dimension {
                context: "idx labels",
                expected: imgs.pixels.len(),
                got: labels.len(),
            });
        }
        Ok((imgs, labels))
    };
    let (tr, trl) = load(train_images, train_labels)?;
    let (te, tel) = load(test_images, test_labels)?;
    if (tr.rows, tr.cols) != (te.rows, te.cols) {
        return Err(ClueError::Dimension {
            context: "idx image size",
            expected: tr.rows * tr.cols,
            got: te.rows * te.cols,
        });
    }
    images_to_dataset(tr.rows * tr.cols, [(tr.pixels, trl), (te.pixels, tel)], classes)
}

pub(crate) fn images_to_dataset(
    px: usize,
    parts: [(Vec<Vec<f64>>, Vec<u8>); 2],
    classes: Option<&[u8]>,
) -> Result<EncodedDataset> {
    let all_labels: Vec<u8> = match classes {
        Some(c) => c.to_vec(),
        None => {
            let mut l: Vec<u8> = parts.iter().flat_map(|(_, l)| l.iter().copied()).collect();
            l.sort_unstable();
            l.dedup();
            l
        }
    };
    let mut data = Vec::new();
    let mut y = Vec::new();
    let mut counts = [0usize; 2];
    for (k, (pixels, labels)) in parts.into_iter().enumerate() {
        for (img, lab) in pixels.into_iter().zip(labels) {
            if let Some(c) = all_labels.iter().position(|&l| l == lab) {
                data.extend(img);
                y.push(c as f64);
                counts[k] += 1;
            }
        }
    }
    if counts[0] == 0 {
        return Err(ClueError::Empty("image training set"));
    }
    let n = y.len();
    let columns = (0..px).map(|i| ColumnSpec::bernoulli(format!("px{i}"))).collect();
    let x = Tensor::new(vec![n, px], data)?;
    EncodedDataset::from_encoded(
        columns,
        x,
        y,
        TargetSpec::Classification {
            name: "label".into(),
            classes: all_labels.iter().map(|l| l.to_string()).collect(),
        },
        (0..counts[0]).collect(),
        (counts[0]..n).collect(),
    )
}

/// Whole-image standardization (zero mean, unit variance across pixels),
/// used only inside distance computations; model inputs stay in `[0, 1]`.
pub fn standardize_image(pixels: &[f64]) -> Vec<f64> {
    let (m, s) = super::mean_std(pixels);
    let s = if s > 0.0 { s } else { 1.0 };
    pixels.iter().map(|p| (p - m) / s).collect()
}
