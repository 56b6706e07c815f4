use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use clue_tensor::Tensor;

use super::{mean_std, split_indices, ColumnSpec, EncodedDataset, TargetSpec};
use crate::error::{ClueError, Result};

/// Two interleaved half-circles in original coordinates: the outer arc is
/// centred at (0, 0) and labelled 0, the inner at (1, 0.5) and labelled 1.
pub fn moons_points<R: Rng + ?Sized>(n: usize, noise: f64, rng: &mut R) -> (Vec<[f64; 2]>, Vec<usize>) {
    let n_out = n / 2;
    let n_in = n - n_out;
    let lin = |k: usize, i: usize| if k > 1 { PI * i as f64 / (k - 1) as f64 } else { 0.0 };
    let mut pts = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n_out {
        let t = lin(n_out, i);
        pts.push([t.cos(), t.sin()]);
        labels.push(0);
    }
    for i in 0..n_in {
        let t = lin(n_in, i);
        pts.push([1.0 - t.cos(), 0.5 - t.sin()]);
        labels.push(1);
    }
    if noise > 0.0 {
        for p in &mut pts {
            p[0] += noise * rng.sample::<f64, _>(StandardNormal);
            p[1] += noise * rng.sample::<f64, _>(StandardNormal);
        }
    }
    (pts, labels)
}

/// Moons as a standardized two-feature classification dataset; every row
/// is a training row.
pub fn make_moons(n: usize, noise: f64, seed: u64) -> Result<EncodedDataset> {
    if n < 2 {
        return Err(ClueError::Config("moons needs n >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (pts, labels) = moons_points(n, noise, &mut rng);
    let xs: Vec<f64> = pts.iter().map(|p| p[0]).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p[1]).collect();
    let (mx, sx) = mean_std(&xs);
    let (my, sy) = mean_std(&ys);
    let data = pts
        .iter()
        .flat_map(|p| [(p[0] - mx) / sx, (p[1] - my) / sy])
        .collect();
    EncodedDataset::from_encoded(
        vec![ColumnSpec::continuous("x1", mx, sx), ColumnSpec::continuous("x2", my, sy)],
        Tensor::new(vec![n, 2], data)?,
        labels.iter().map(|&l| l as f64).collect(),
        TargetSpec::Classification {
            name: "moon".into(),
            classes: vec!["0".into(), "1".into()],
        },
        (0..n).collect(),
        Vec::new(),
    )
}

/// Linear-Gaussian generative model `x = W u + μ + ε`, `u ~ N(0, I_q)`,
/// `ε ~ N(0, σ² I_d)`.
#[derive(Clone, Debug)]
pub struct PpcaToy {
    /// `d × q`, row-major.
    pub w: Vec<f64>,
    pub mean: Vec<f64>,
    pub noise_var: f64,
    pub d: usize,
    pub q: usize,
}

impl PpcaToy {
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor {
        let mut data = Vec::with_capacity(n * self.d);
        let sd = self.noise_var.sqrt();
        for _ in 0..n {
            let u: Vec<f64> = (0..self.q).map(|_| rng.sample(StandardNormal)).collect();
            for i in 0..self.d {
                let wu: f64 = (0..self.q).map(|k| self.w[i * self.q + k] * u[k]).sum();
                data.push(self.mean[i] + wu + sd * rng.sample::<f64, _>(StandardNormal));
            }
        }
        Tensor::from_rows(&data.chunks(self.d).map(<[f64]>::to_vec).collect::<Vec<_>>())
            .expect("rectangular")
    }

    /// Covariance `W Wᵀ + σ² I`.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.d;
        let mut c = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                c[i * d + j] = (0..self.q)
                    .map(|k| self.w[i * self.q + k] * self.w[j * self.q + k])
                    .sum::<f64>()
                    + if i == j { self.noise_var } else { 0.0 };
            }
        }
        c
    }

    /// Exact `log p(x)`.
    pub fn log_marginal(&self, x: &[f64]) -> f64 {
        let diff: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        gaussian_log_density(&diff, &self.covariance(), self.d)
    }
}

/// `log N(diff; 0, cov)` via Cholesky.
pub(crate) fn gaussian_log_density(diff: &[f64], cov: &[f64], d: usize) -> f64 {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * d + k] * l[j * d + k]).sum();
            if i == j {
                l[i * d + i] = (cov[i * d + i] - s).sqrt();
            } else {
                l[i * d + j] = (cov[i * d + j] - s) / l[j * d + j];
            }
        }
    }
    let mut y = vec![0.0; d];
    for i in 0..d {
        let s: f64 = (0..i).map(|k| l[i * d + k] * y[k]).sum();
        y[i] = (diff[i] - s) / l[i * d + i];
    }
    let logdet: f64 = (0..d).map(|i| l[i * d + i].ln()).sum::<f64>() * 2.0;
    -0.5 * (d as f64 * (2.0 * PI).ln() + logdet + y.iter().map(|v| v * v).sum::<f64>())
}

/// Probabilistic-PCA toy with a fixed seeded loading matrix.
pub fn ppca_toy(d: usize, q: usize, noise_var: f64, seed: u64) -> PpcaToy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = (0..d * q).map(|_| 1.5 * rng.sample::<f64, _>(StandardNormal)).collect();
    PpcaToy {
        w,
        mean: vec![0.0; d],
        noise_var,
        d,
        q,
    }
}

/// Heteroscedastic regression with 11 continuous features driven by a
/// three-dimensional latent state. The target lives on a wine-quality-like
/// scale; its noise standard deviation exceeds 2 for roughly a fifth of
/// inputs.
pub fn wine_like(n_train: usize, n_test: usize, seed: u64) -> Result<EncodedDataset> {
    const D: usize = 11;
    let n = n_train + n_test;
    let mut mix_rng = ChaCha8Rng::seed_from_u64(0x5eed_0001);
    let mix: Vec<[f64; 5]> = (0..D)
        .map(|_| std::array::from_fn(|_| mix_rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw = vec![vec![0.0; n]; D];
    let mut y = Vec::with_capacity(n);
    for r in 0..n {
        let s: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let basis = [s[0], s[1], s[2], (s[0] * s[1]).tanh(), s[2] * s[2] - 1.0];
        for (j, m) in mix.iter().enumerate() {
            let v: f64 = m.iter().zip(&basis).map(|(a, b)| a * b).sum();
            raw[j][r] = 5.0 + j as f64 + v + 0.25 * rng.sample::<f64, _>(StandardNormal);
        }
        let sd = 0.6 + 2.6 * sigmoid(4.0 * (s[2] - 0.9));
        let mean = 5.6 + 0.9 * s[0] + 0.5 * (s[1] * s[0]).tanh();
        y.push(mean + sd * rng.sample::<f64, _>(StandardNormal));
    }
    let (train, test) = split_indices(n, n_train, n_test, seed ^ 0xa5a5)?;
    let mut columns = Vec::with_capacity(D);
    let mut data = vec![0.0; n * D];
    for (j, col) in raw.iter().enumerate() {
        let tr: Vec<f64> = train.iter().map(|&i| col[i]).collect();
        let (m, s) = mean_std(&tr);
        columns.push(ColumnSpec::continuous(format!("f{j}"), m, s));
        for r in 0..n {
            data[r * D + j] = (col[r] - m) / s;
        }
    }
    let ytr: Vec<f64> = train.iter().map(|&i| y[i]).collect();
    let (ym, ys) = mean_std(&ytr);
    EncodedDataset::from_encoded(
        columns,
        Tensor::new(vec![n, D], data)?,
        y.iter().map(|v| (v - ym) / ys).collect(),
        TargetSpec::Regression {
            name: "quality".into(),
            mean: ym,
            std: ys,
        },
        train,
        test,
    )
}

/// Overlapping Gaussian classes in `d` standardized dimensions: class
/// centres sit on a circle of radius `sep` in the first two coordinates.
pub fn gaussian_blobs(
    n_train: usize,
    n_test: usize,
    d: usize,
    k: usize,
    sep: f64,
    seed: u64,
) -> Result<EncodedDataset> {
    if d < 2 || k < 2 {
        return Err(ClueError::Config("blobs need d >= 2 and k >= 2".into()));
    }
    let n = n_train + n_test;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.random_range(0..k);
        let ang = 2.0 * PI * c as f64 / k as f64;
        for j in 0..d {
            let centre = match j {
                0 => sep * ang.cos(),
                1 => sep * ang.sin(),
                _ => 0.0,
            };
            data.push(centre + rng.sample::<f64, _>(StandardNormal));
        }
        y.push(c as f64);
    }
    let (train, test) = split_indices(n, n_train, n_test, seed ^ 0x5a5a)?;
    let columns = (0..d).map(|j| ColumnSpec::standard(format!("f{j}"))).collect();
    EncodedDataset::from_encoded(
        columns,
        Tensor::new(vec![n, d], data)?,
        y,
        TargetSpec::Classification {
            name: "class".into(),
            classes: (0..k).map(|c| c.to_string()).collect(),
        },
        train,
        test,
    )
}

/// Procedural `side × side` digit-like images for three classes ("0" ring,
/// "1" bar, "7" hook) with random placement, scale, slant, stroke width and
/// partially erased strokes. Pixels are in `[0, 1]`.
pub fn digit_images(n_train: usize, n_test: usize, side: usize, seed: u64) -> Result<EncodedDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_train + n_test;
    let mut imgs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.random_range(0..3u8);
        imgs.push(render_digit(c, side, &mut rng));
        labels.push(c);
    }
    let (tr_imgs, te_imgs) = imgs.split_at(n_train);
    let (tr_l, te_l) = labels.split_at(n_train);
    super::idx::images_to_dataset(
        side * side,
        [
            (tr_imgs.to_vec(), tr_l.to_vec()),
            (te_imgs.to_vec(), te_l.to_vec()),
        ],
        Some(&[0, 1, 2]),
    )
}

fn render_digit<R: Rng + ?Sized>(class: u8, side: usize, rng: &mut R) -> Vec<f64> {
    let s = side as f64;
    let cx = s / 2.0 + rng.random_range(-0.8..0.8);
    let cy = s / 2.0 + rng.random_range(-0.8..0.8);
    let scale = s * rng.random_range(0.30..0.40);
    let slant = rng.random_range(-0.25..0.25);
    let width = rng.random_range(0.7..1.3);
    // strokes as polylines in unit coordinates (y down)
    let strokes: Vec<Vec<(f64, f64)>> = match class {
        0 => vec![(0..=16)
            .map(|i| {
                let t = 2.0 * PI * i as f64 / 16.0;
                (0.6 * t.cos(), 0.95 * t.sin())
            })
            .collect()],
        1 => vec![vec![(0.0, -1.0), (0.0, 1.0)]],
        _ => vec![vec![(-0.7, -1.0), (0.7, -1.0), (-0.15, 1.0)]],
    };
    // erase a random contiguous fraction of the stroke length
    let erase = if rng.random_bool(0.35) {
        let len = rng.random_range(0.15..0.45);
        let start = rng.random_range(0.0..1.0 - len);
        Some((start, start + len))
    } else {
        None
    };
    let mut segs = Vec::new();
    for poly in &strokes {
        let total: f64 = poly.windows(2).map(|w| dist(w[0], w[1])).sum();
        let mut acc = 0.0;
        for w in poly.windows(2) {
            let l = dist(w[0], w[1]);
            let steps = 8;
            for k in 0..steps {
                let t0 = k as f64 / steps as f64;
                let t1 = (k + 1) as f64 / steps as f64;
                let pos = (acc + l * (t0 + t1) / 2.0) / total;
                if erase.is_some_and(|(a, b)| pos >= a && pos <= b) {
                    continue;
                }
                let p = lerp(w[0], w[1], t0);
                let q = lerp(w[0], w[1], t1);
                let map = |(x, y): (f64, f64)| (cx + scale * (x + slant * y), cy + scale * y);
                segs.push((map(p), map(q)));
            }
            acc += l;
        }
    }
    let mut img = vec![0.0; side * side];
    for r in 0..side {
        for c in 0..side {
            let p = (c as f64 + 0.5, r as f64 + 0.5);
            let d = segs
                .iter()
                .map(|&(a, b)| seg_dist(p, a, b))
                .fold(f64::INFINITY, f64::min);
            img[r * side + c] = (1.0 - (d - width / 2.0) / 0.8).clamp(0.0, 1.0);
        }
    }
    img
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn lerp(a: (f64, f64), b: (f64, f64), t: f64) -> (f64, f64) {
    (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t)
}

fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    dist(p, (a.0 + t * dx, a.1 + t * dy))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
