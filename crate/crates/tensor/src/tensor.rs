use std::io::{Read, Write};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, TensorError};

/// Dense row-major array of `f64`.
///
/// The value buffer is reference counted so registering the same tensor on
/// many tapes does not copy it; mutation goes through copy-on-write.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidArgument {
                op: "tensor",
                reason: format!("dimensions must be positive, got {shape:?}"),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::InvalidArgument {
                op: "tensor",
                reason: format!("shape {shape:?} needs {n} values, got {}", data.len()),
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    /// Builds a tensor whose shape is known to match `data`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![1], vec![v])
    }

    /// Rank-1 tensor. Panics on empty input.
    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Self::from_parts(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(TensorError::InvalidArgument {
                op: "from_rows",
                reason: "ragged rows".into(),
            });
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![v; n])
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.rank() < 2 {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    /// Row `i` of a rank-2 tensor (or the `i`-th slab along the leading axis).
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data_mut()[i * c..(i + 1) * c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    /// Gathers the given rows of a tensor into a new tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len().max(1);
        if idx.is_empty() {
            return Self::zeros(&shape);
        }
        Self::from_parts(shape, out)
    }

    /// Stacks rank-2 tensors with equal column counts along the leading axis.
    pub fn vstack(parts: &[&Tensor]) -> Result<Self> {
        let first = parts.first().ok_or(TensorError::InvalidArgument {
            op: "vstack",
            reason: "no inputs".into(),
        })?;
        let c = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != c {
                return Err(TensorError::ShapeMismatch {
                    op: "vstack",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            rows += p.rows();
            data.extend_from_slice(p.data());
        }
        Self::new(vec![rows, c], data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "zip_map",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Writes `rank`, each dimension, then the values, all little-endian
    /// 64-bit (`u64` for the header, `f64` for the values).
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.rank() as u64).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in self.data.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(8 * (1 + self.rank() + self.numel()));
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Decodes one tensor from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut off = 0usize;
        let next_u64 = |off: &mut usize, what: &str| -> Result<u64> {
            let end = *off + 8;
            let chunk = bytes.get(*off..end).ok_or_else(|| TensorError::Decode {
                offset: *off,
                reason: format!("truncated while reading {what}"),
            })?;
            *off = end;
            Ok(u64::from_le_bytes(chunk.try_into().expect("8-byte chunk")))
        };
        let rank = next_u64(&mut off, "rank")? as usize;
        if rank == 0 || rank > 16 {
            return Err(TensorError::Decode {
                offset: 0,
                reason: format!("implausible rank {rank}"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(next_u64(&mut off, "dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_bits(next_u64(&mut off, "value")?));
        }
        let t = Self::new(shape, data).map_err(|e| TensorError::Decode {
            offset: 0,
            reason: e.to_string(),
        })?;
        Ok((t, off))
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let (t, used) = Self::from_bytes(&bytes)?;
        if used != bytes.len() {
            return Err(TensorError::Decode {
                offset: used,
                reason: "trailing bytes after tensor".into(),
            });
        }
        Ok(t)
    }
}

/// Encodes a sequence of tensors back to back.
pub fn encode_tensors(tensors: &[&Tensor]) -> Vec<u8> {
    tensors.iter().flat_map(|t| t.to_bytes()).collect()
}

/// Decodes a back-to-back tensor sequence produced by [`encode_tensors`].
pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    let mut off = 0;
    while off < bytes.len() {
        let (t, used) = Tensor::from_bytes(&bytes[off..]).map_err(|e| match e {
            TensorError::Decode { offset, reason } => TensorError::Decode {
                offset: offset + off,
                reason,
            },
            other => other,
        })?;
        out.push(t);
        off += used;
    }
    Ok(out)
}
