//! Per-column decoder likelihoods. Consecutive continuous or Bernoulli
//! columns are handled as one block.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use clue_tensor::{Tensor, Var};

use crate::datasets::{ColumnKind, ColumnSpec};
use crate::error::{ClueError, Result};

/// Added to the softplus output of learned decoder variances.
pub const DECODER_VARIANCE_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
enum Block {
    /// `len` continuous columns at encoded offset `start`; `var_start` indexes
    /// their variance outputs when variances are learned.
    Continuous {
        start: usize,
        len: usize,
        var_start: usize,
    },
    Bernoulli {
        start: usize,
        len: usize,
    },
    Categorical {
        start: usize,
        k: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnLayout {
    blocks: Vec<Block>,
    n_columns: usize,
    width: usize,
    n_continuous: usize,
    pub learned_variance: bool,
}

impl ColumnLayout {
    pub fn new(columns: &[ColumnSpec], learned_variance: bool) -> Result<Self> {
        if columns.is_empty() {
            return Err(ClueError::Empty("column list"));
        }
        let mut blocks: Vec<Block> = Vec::new();
        let (mut off, mut n_cont) = (0, 0);
        for c in columns {
            c.validate()?;
            match (&c.kind, blocks.last_mut()) {
                (ColumnKind::Continuous { .. }, Some(Block::Continuous { len, .. })) => *len += 1,
                (ColumnKind::Continuous { .. }, _) => blocks.push(Block::Continuous {
                    start: off,
                    len: 1,
                    var_start: n_cont,
                }),
                (ColumnKind::Bernoulli, Some(Block::Bernoulli { len, .. })) => *len += 1,
                (ColumnKind::Bernoulli, _) => blocks.push(Block::Bernoulli { start: off, len: 1 }),
                (ColumnKind::Categorical { categories }, _) => blocks.push(Block::Categorical {
                    start: off,
                    k: categories.len(),
                }),
            }
            if matches!(c.kind, ColumnKind::Continuous { .. }) {
                n_cont += 1;
            }
            off += c.width();
        }
        Ok(Self {
            blocks,
            n_columns: columns.len(),
            width: off,
            n_continuous: n_cont,
            learned_variance,
        })
    }

    pub fn n_columns(&self) -> usize {
        self.n_columns
    }

    /// Encoded data width.
    pub fn width(&self) -> usize {
        self.width
    }

    /// Width of the raw decoder output.
    pub fn raw_width(&self) -> usize {
        self.width + if self.learned_variance { self.n_continuous } else { 0 }
    }

    fn check_raw(&self, raw: &Var<'_>) -> Result<usize> {
        let s = raw.shape();
        if s.len() != 2 || s[1] != self.raw_width() {
            return Err(ClueError::Dimension {
                context: "decoder output",
                expected: self.raw_width(),
                got: s.last().copied().unwrap_or(0),
            });
        }
        Ok(s[0])
    }

    fn variance<'t>(&self, raw: Var<'t>, var_start: usize, len: usize) -> Result<Var<'t>> {
        Ok(raw
            .narrow(1, self.width + var_start, len)?
            .softplus()
            .add_scalar(DECODER_VARIANCE_FLOOR))
    }

    /// Log-likelihood of encoded data `x` per column, `[B, n_columns]`.
    pub fn log_lik<'t>(&self, raw: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let b = self.check_raw(&raw)?;
        if x.shape() != [b, self.width] {
            return Err(ClueError::Dimension {
                context: "decoder target",
                expected: self.width,
                got: x.shape().last().copied().unwrap_or(0),
            });
        }
        let half_log_2pi = 0.5 * (2.0 * PI).ln();
        let mut parts = Vec::with_capacity(self.blocks.len());
        for &blk in &self.blocks {
            parts.push(match blk {
                Block::Continuous {
                    start,
                    len,
                    var_start,
                } => {
                    let mu = raw.narrow(1, start, len)?;
                    let sq = x.narrow(1, start, len)?.sub(mu)?.square();
                    if self.learned_variance {
                        let var = self.variance(raw, var_start, len)?;
                        sq.div(var.scale(2.0))?
                            .add(var.ln().scale(0.5))?
                            .neg()
                            .add_scalar(-half_log_2pi)
                    } else {
                        sq.scale(-0.5).add_scalar(-half_log_2pi)
                    }
                }
                Block::Bernoulli { start, len } => {
                    let l = raw.narrow(1, start, len)?;
                    x.narrow(1, start, len)?.mul(l)?.sub(l.softplus())?
                }
                Block::Categorical { start, k } => {
                    let ls = raw.narrow(1, start, k)?.log_softmax();
                    x.narrow(1, start, k)?.mul(ls)?.sum_axis(1)?.reshape(&[b, 1])?
                }
            });
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            Ok(Var::concat(&parts, 1)?)
        }
    }

    /// Decoder mean in encoded space. `hard` replaces categorical
    /// probabilities by straight-through one-hots.
    pub fn mean<'t>(&self, raw: Var<'t>, hard: bool) -> Result<Var<'t>> {
        self.check_raw(&raw)?;
        let mut parts = Vec::with_capacity(self.blocks.len());
        for &blk in &self.blocks {
            parts.push(match blk {
                Block::Continuous { start, len, .. } => raw.narrow(1, start, len)?,
                Block::Bernoulli { start, len } => raw.narrow(1, start, len)?.sigmoid(),
                Block::Categorical { start, k } => {
                    let l = raw.narrow(1, start, k)?;
                    if hard {
                        l.straight_through_one_hot()
                    } else {
                        l.softmax()
                    }
                }
            });
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            Ok(Var::concat(&parts, 1)?)
        }
    }

    /// Draws data from decoder outputs: categorical columns are sampled,
    /// Bernoulli columns keep their probabilities and continuous columns
    /// keep their means unless `jitter` adds decoder noise.
    pub fn sample<R: Rng + ?Sized>(&self, raw: &Tensor, jitter: bool, rng: &mut R) -> Result<Tensor> {
        let (b, p) = (raw.rows(), raw.cols());
        if p != self.raw_width() {
            return Err(ClueError::Dimension {
                context: "decoder output",
                expected: self.raw_width(),
                got: p,
            });
        }
        let mut out = vec![0.0; b * self.width];
        for i in 0..b {
            let r = raw.row(i);
            let o = &mut out[i * self.width..(i + 1) * self.width];
            for &blk in &self.blocks {
                match blk {
                    Block::Continuous {
                        start,
                        len,
                        var_start,
                    } => {
                        for j in 0..len {
                            let mut v = r[start + j];
                            if jitter {
                                let var = if self.learned_variance {
                                    softplus(r[self.width + var_start + j]) + DECODER_VARIANCE_FLOOR
                                } else {
                                    1.0
                                };
                                v += var.sqrt() * rng.sample::<f64, _>(StandardNormal);
                            }
                            o[start + j] = v;
                        }
                    }
                    Block::Bernoulli { start, len } => {
                        for j in start..start + len {
                            o[j] = sigmoid(r[j]);
                        }
                    }
                    Block::Categorical { start, k } => {
                        let l = &r[start..start + k];
                        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let w: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
                        let total: f64 = w.iter().sum();
                        let mut u = rng.random::<f64>() * total;
                        let mut pick = k - 1;
                        for (j, wj) in w.iter().enumerate() {
                            if u < *wj {
                                pick = j;
                                break;
                            }
                            u -= wj;
                        }
                        o[start + pick] = 1.0;
                    }
                }
            }
        }
        Ok(Tensor::matrix(b, self.width, out)?)
    }
}

/// Decoder distribution of one column, in encoded units.
#[derive(Clone, Debug, PartialEq)]
pub enum ColumnDist {
    Gaussian { mean: f64, var: f64 },
    Bernoulli { p: f64 },
    Categorical { probs: Vec<f64> },
}

impl ColumnLayout {
    /// Distribution of `column` given one row of raw decoder output.
    pub fn column_dist(&self, raw: &[f64], column: usize) -> Result<ColumnDist> {
        if raw.len() != self.raw_width() {
            return Err(ClueError::Dimension {
                context: "decoder output",
                expected: self.raw_width(),
                got: raw.len(),
            });
        }
        let mut col = 0;
        for &blk in &self.blocks {
            match blk {
                Block::Continuous {
                    start,
                    len,
                    var_start,
                } => {
                    if column < col + len {
                        let j = column - col;
                        let var = if self.learned_variance {
                            softplus(raw[self.width + var_start + j]) + DECODER_VARIANCE_FLOOR
                        } else {
                            1.0
                        };
                        return Ok(ColumnDist::Gaussian {
                            mean: raw[start + j],
                            var,
                        });
                    }
                    col += len;
                }
                Block::Bernoulli { start, len } => {
                    if column < col + len {
                        return Ok(ColumnDist::Bernoulli {
                            p: sigmoid(raw[start + column - col]),
                        });
                    }
                    col += len;
                }
                Block::Categorical { start, k } => {
                    if column == col {
                        let l = &raw[start..start + k];
                        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let w: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
                        let t: f64 = w.iter().sum();
                        return Ok(ColumnDist::Categorical {
                            probs: w.iter().map(|v| v / t).collect(),
                        });
                    }
                    col += 1;
                }
            }
        }
        Err(ClueError::Dimension {
            context: "column index",
            expected: self.n_columns,
            got: column,
        })
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `KL(N(μ_q, e^{lv_q}) ‖ N(μ_p, e^{lv_p}))` summed over the last axis.
pub fn gaussian_kl<'t>(mu_q: Var<'t>, lv_q: Var<'t>, mu_p: Var<'t>, lv_p: Var<'t>) -> Result<Var<'t>> {
    let ratio = lv_q.sub(lv_p)?.exp();
    let d2 = mu_q.sub(mu_p)?.square().div(lv_p.exp())?;
    let terms = ratio.add(d2)?.sub(lv_q.sub(lv_p)?)?.add_scalar(-1.0).scale(0.5);
    let last = terms.shape().len() - 1;
    Ok(terms.sum_axis(last)?)
}

/// `KL(N(μ, e^{lv}) ‖ N(0, I))` summed over the last axis.
pub fn standard_kl<'t>(mu: Var<'t>, lv: Var<'t>) -> Result<Var<'t>> {
    let terms = mu.square().add(lv.exp())?.sub(lv)?.add_scalar(-1.0).scale(0.5);
    let last = terms.shape().len() - 1;
    Ok(terms.sum_axis(last)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clue_tensor::Tape;
    use rand::SeedableRng;

    fn mixed() -> Vec<ColumnSpec> {
        vec![
            ColumnSpec::standard("a"),
            ColumnSpec::standard("b"),
            ColumnSpec::categorical("c", 3),
            ColumnSpec::bernoulli("d"),
            ColumnSpec::standard("e"),
        ]
    }

    #[test]
    fn layout_widths() {
        let l = ColumnLayout::new(&mixed(), false).unwrap();
        assert_eq!((l.width(), l.raw_width(), l.n_columns()), (7, 7, 5));
        let l = ColumnLayout::new(&mixed(), true).unwrap();
        assert_eq!(l.raw_width(), 10);
    }

    #[test]
    fn unit_variance_perfect_reconstruction() {
        let cols = vec![ColumnSpec::standard("a"), ColumnSpec::standard("b")];
        let l = ColumnLayout::new(&cols, false).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![0.3, -1.2]).unwrap());
        let ll = l.log_lik(x, x).unwrap().value();
        for v in ll.data() {
            assert!((v + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn mixed_log_lik_matches_direct_formulas() {
        let l = ColumnLayout::new(&mixed(), true).unwrap();
        let raw_v = vec![0.1, -0.4, 1.0, 0.0, -1.0, 0.7, 0.2, 0.3, -0.2, 1.1];
        let x_v = vec![0.5, -0.1, 0.0, 0.0, 1.0, 1.0, 2.0];
        let tape = Tape::new();
        let raw = tape.constant(Tensor::matrix(1, 10, raw_v.clone()).unwrap());
        let x = tape.constant(Tensor::matrix(1, 7, x_v.clone()).unwrap());
        let ll = l.log_lik(raw, x).unwrap().value().into_vec();
        let g = |x: f64, m: f64, rv: f64| {
            let v = softplus(rv) + DECODER_VARIANCE_FLOOR;
            -0.5 * (2.0 * PI * v).ln() - (x - m).powi(2) / (2.0 * v)
        };
        let lse = (1.0f64.exp() + 0.0f64.exp() + (-1.0f64).exp()).ln();
        let expect = [
            g(0.5, 0.1, 0.3),
            g(-0.1, -0.4, -0.2),
            -1.0 - lse,
            0.7 - softplus(0.7),
            g(2.0, 0.2, 1.1),
        ];
        assert_eq!(ll.len(), 5);
        for (a, e) in ll.iter().zip(expect) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn hard_mean_is_one_hot() {
        let l = ColumnLayout::new(&mixed(), false).unwrap();
        let tape = Tape::new();
        let raw = tape.constant(Tensor::matrix(1, 7, vec![0.1, 0.2, 0.3, 2.0, -1.0, 0.0, 0.5]).unwrap());
        let hard = l.mean(raw, true).unwrap().value().into_vec();
        assert_eq!(&hard[2..5], &[0.0, 1.0, 0.0]);
        assert!((hard[5] - 0.5).abs() < 1e-15);
        let soft = l.mean(raw, false).unwrap().value().into_vec();
        assert!((soft[2..5].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_identities() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[2, 3]));
        assert_eq!(standard_kl(z, z).unwrap().value().into_vec(), vec![0.0, 0.0]);
        let m = tape.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let lv = tape.constant(Tensor::matrix(1, 1, vec![2.0f64.ln()]).unwrap());
        // KL(N(1,2) || N(0,1)) = ½(1 + 2 − 1 − ln 2)
        let k = standard_kl(m, lv).unwrap().item();
        assert!((k - 0.5 * (2.0 - 2.0f64.ln())).abs() < 1e-14);
        let k2 = gaussian_kl(m, lv, tape.constant(Tensor::zeros(&[1, 1])), tape.constant(Tensor::zeros(&[1, 1])))
            .unwrap()
            .item();
        assert!((k - k2).abs() < 1e-14);
    }

    #[test]
    fn column_dist_lookup() {
        let l = ColumnLayout::new(&mixed(), true).unwrap();
        let raw = [0.1, -0.4, 0.0, 0.0, 0.0, 0.0, 0.2, 0.3, -0.2, 1.1];
        assert_eq!(
            l.column_dist(&raw, 1).unwrap(),
            ColumnDist::Gaussian {
                mean: -0.4,
                var: softplus(-0.2) + DECODER_VARIANCE_FLOOR
            }
        );
        assert_eq!(l.column_dist(&raw, 3).unwrap(), ColumnDist::Bernoulli { p: 0.5 });
        let ColumnDist::Categorical { probs } = l.column_dist(&raw, 2).unwrap() else {
            unreachable!()
        };
        assert!(probs.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
        assert!(l.column_dist(&raw, 5).is_err());
    }

    #[test]
    fn categorical_samples_follow_probabilities() {
        let l = ColumnLayout::new(&[ColumnSpec::categorical("c", 2)], false).unwrap();
        let raw = Tensor::matrix(1, 2, vec![0.0, 3.0f64.ln()]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let n = 20_000;
        let ones: f64 = (0..n).map(|_| l.sample(&raw, false, &mut rng).unwrap().data()[1]).sum();
        assert!((ones / n as f64 - 0.75).abs() < 0.015);
    }
}
