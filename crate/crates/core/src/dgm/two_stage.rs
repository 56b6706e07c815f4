use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use clue_tensor::{Tape, Tensor};

use super::{check_width, ColumnLayout, TrainConfig, TrainLog, Vae, VaeConfig, Vaeac};
use crate::checkpoint;
use crate::datasets::ColumnSpec;
use crate::error::{ClueError, Result};

/// Latent draws per training point used to fit the inner model.
pub const INNER_SAMPLES_PER_POINT: usize = 4;

#[derive(Clone, Debug)]
pub enum Outer {
    Vae(Vae),
    Vaeac(Vaeac),
}

impl Outer {
    pub fn layout(&self) -> &ColumnLayout {
        match self {
            Outer::Vae(m) => m.layout(),
            Outer::Vaeac(m) => m.layout(),
        }
    }

    pub fn columns(&self) -> &[ColumnSpec] {
        match self {
            Outer::Vae(m) => &m.config.columns,
            Outer::Vaeac(m) => &m.config.columns,
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            Outer::Vae(m) => m.config.latent_dim,
            Outer::Vaeac(m) => m.config.latent_dim,
        }
    }

    /// Approximate posterior over the outer latent; a VAEAC uses its
    /// proposal with nothing marked observed.
    pub fn encode_dist(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        match self {
            Outer::Vae(m) => m.encode_dist(x),
            Outer::Vaeac(m) => m.encode_dist(x),
        }
    }

    /// Latent mean given only the columns with `keep[c]`. A VAEAC uses its
    /// conditional prior; a VAE encodes with the other columns zeroed.
    pub fn encode_observed(&self, x: &Tensor, keep: &[bool]) -> Result<Tensor> {
        let layout = self.layout();
        if keep.len() != layout.n_columns() {
            return Err(ClueError::Dimension {
                context: "observed column mask",
                expected: layout.n_columns(),
                got: keep.len(),
            });
        }
        check_width(x, layout.width(), "two-stage input")?;
        let cols = self.columns();
        let flags: Vec<f64> = keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        let wide = crate::datasets::expand_column_mask(cols, &flags);
        let mut xo = x.clone();
        for r in 0..xo.rows() {
            for (v, m) in xo.row_mut(r).iter_mut().zip(&wide) {
                *v *= m;
            }
        }
        match self {
            Outer::Vae(m) => Ok(m.encode_dist(&xo)?.0),
            Outer::Vaeac(m) => {
                let b = Tensor::matrix(x.rows(), flags.len(), flags.repeat(x.rows()))?;
                Ok(m.conditional_prior(&xo, &b)?.0)
            }
        }
    }

    /// Raw generative output with nothing observed.
    pub fn decode_raw(&self, z: &Tensor) -> Result<Tensor> {
        match self {
            Outer::Vae(m) => m.decode_raw(z),
            Outer::Vaeac(m) => m.decode_unconditional(z),
        }
    }

    fn save(&self, dir: &Path) -> Result<()> {
        match self {
            Outer::Vae(m) => m.save(dir, serde_json::Value::Null),
            Outer::Vaeac(m) => m.save(dir, serde_json::Value::Null),
        }
    }

    fn load(dir: &Path) -> Result<Self> {
        let m: serde_json::Value = checkpoint::read_manifest(dir)?;
        match m["model"].as_str() {
            Some("vae") => Ok(Outer::Vae(Vae::load(dir)?)),
            Some("vaeac") => Ok(Outer::Vaeac(Vaeac::load(dir)?)),
            other => Err(ClueError::Checkpoint(format!("unknown outer model {other:?}"))),
        }
    }
}

/// Outer model over the data plus an inner VAE over the outer latent space.
#[derive(Clone, Debug)]
pub struct TwoStage {
    pub outer: Outer,
    pub inner: Vae,
}

impl TwoStage {
    pub fn layout(&self) -> &ColumnLayout {
        self.outer.layout()
    }

    /// Outer latent code from an inner latent code via the inner decoder mean.
    pub fn lift(&self, u: &Tensor) -> Result<Tensor> {
        let raw = self.inner.decode_raw(u)?;
        let tape = Tape::new();
        Ok(self.inner.layout().mean(tape.constant(raw), false)?.value())
    }

    /// `u ~ N(0, I)` mapped through both decoders. Categorical columns are
    /// drawn, Bernoulli columns keep their probabilities and continuous
    /// columns are means, jittered by the decoder variance if asked.
    pub fn ancestral_sample<R: Rng + ?Sized>(&self, n: usize, jitter: bool, rng: &mut R) -> Result<Tensor> {
        if n == 0 {
            return Ok(Tensor::zeros(&[0, self.layout().width()]));
        }
        let u = Tensor::randn(&[n, self.inner.config.latent_dim], rng);
        let raw = self.outer.decode_raw(&self.lift(&u)?)?;
        self.layout().sample(&raw, jitter, rng)
    }

    /// Importance-sampled `log p(x)` per row with `k` draws.
    pub fn log_px<R: Rng + ?Sized>(&self, x: &Tensor, k: usize, rng: &mut R) -> Result<Vec<f64>> {
        let keep = vec![true; self.layout().n_columns()];
        log_px_importance(&InputMarginal { model: self, keep }, x, k, rng)
    }

    pub fn save(&self, dir: &Path, meta: serde_json::Value) -> Result<()> {
        checkpoint::prepare_dir(dir)?;
        self.outer.save(&dir.join("outer"))?;
        self.inner.save(&dir.join("inner"), serde_json::Value::Null)?;
        checkpoint::write_manifest(dir, &serde_json::json!({"model": "two_stage", "meta": meta}))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: serde_json::Value = checkpoint::read_manifest(dir)?;
        if m["model"] != "two_stage" {
            return Err(ClueError::Checkpoint(format!("{} is not a two-stage model", dir.display())));
        }
        Ok(Self {
            outer: Outer::load(&dir.join("outer"))?,
            inner: Vae::load(&dir.join("inner"))?,
        })
    }
}

/// Fits the inner VAE to draws from the outer approximate posterior.
pub fn train_two_stage<R: Rng + ?Sized>(
    x: &Tensor,
    outer: Outer,
    inner_latent: usize,
    inner_width: usize,
    train: &TrainConfig,
    rng: &mut R,
) -> Result<(TwoStage, TrainLog)> {
    let (mu, lv) = outer.encode_dist(x)?;
    let (n, l) = (mu.rows(), mu.cols());
    let mut data = Vec::with_capacity(n * l * INNER_SAMPLES_PER_POINT);
    for _ in 0..INNER_SAMPLES_PER_POINT {
        for (m, v) in mu.data().iter().zip(lv.data()) {
            let e: f64 = rng.sample(StandardNormal);
            data.push(m + (0.5 * v).exp() * e);
        }
    }
    let z = Tensor::matrix(n * INNER_SAMPLES_PER_POINT, l, data)?;
    let columns = (0..l).map(|i| ColumnSpec::standard(format!("z{i}"))).collect();
    let mut cfg = VaeConfig::new(columns, inner_latent, inner_width, 2);
    cfg.learned_variance = true;
    let (inner, log) = super::train_vae(&z, cfg, train, rng)?;
    Ok((TwoStage { outer, inner }, log))
}

/// A latent-variable model with a Gaussian proposal and a standard normal
/// prior over its latent code.
pub trait ImportanceModel {
    fn latent_dim(&self) -> usize;
    /// Proposal mean and log-variance, `[B, U]` each.
    fn proposal(&self, x: &Tensor) -> Result<(Tensor, Tensor)>;
    /// `log p(x_row | u_k)` for each row of `u`.
    fn log_likelihood(&self, x_row: &[f64], u: &Tensor) -> Result<Vec<f64>>;
}

fn log_std_normal(u: &[f64]) -> f64 {
    u.iter().map(|v| -0.5 * (v * v + (2.0 * PI).ln())).sum()
}

fn log_diag_normal(u: &[f64], mean: &[f64], logvar: &[f64]) -> f64 {
    u.iter()
        .zip(mean)
        .zip(logvar)
        .map(|((u, m), lv)| -0.5 * ((u - m).powi(2) / lv.exp() + lv + (2.0 * PI).ln()))
        .sum()
}

/// `log (1/K) Σ_k p(x|u_k) p(u_k) / q(u_k|x)` per row, `u_k ~ q(u|x)`.
pub fn log_px_importance<M: ImportanceModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x: &Tensor,
    k: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if k < 1 {
        return Err(ClueError::Config("importance sample count must be at least 1".into()));
    }
    let (mu, lv) = model.proposal(x)?;
    let d = model.latent_dim();
    check_width(&mu, d, "proposal mean")?;
    let mut out = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let (m, v) = (mu.row(r), lv.row(r));
        let mut draws = Vec::with_capacity(k * d);
        let mut log_w = Vec::with_capacity(k);
        for _ in 0..k {
            let u: Vec<f64> = (0..d)
                .map(|j| m[j] + (0.5 * v[j]).exp() * rng.sample::<f64, _>(StandardNormal))
                .collect();
            log_w.push(log_std_normal(&u) - log_diag_normal(&u, m, v));
            draws.extend(u);
        }
        let ll = model.log_likelihood(x.row(r), &Tensor::matrix(k, d, draws)?)?;
        for (w, l) in log_w.iter_mut().zip(ll) {
            *w += l;
        }
        let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(ClueError::NonFinite { what: "importance weight", index: r });
        }
        let s: f64 = log_w.iter().map(|w| (w - max).exp()).sum();
        out.push(max + (s / k as f64).ln());
    }
    Ok(out)
}

/// Two-stage marginal restricted to the columns with `keep[c]`; the outer
/// latent is inferred from those columns alone.
pub struct InputMarginal<'a> {
    pub model: &'a TwoStage,
    pub keep: Vec<bool>,
}

impl ImportanceModel for InputMarginal<'_> {
    fn latent_dim(&self) -> usize {
        self.model.inner.config.latent_dim
    }

    fn proposal(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let z = if self.keep.iter().all(|&k| k) {
            self.model.outer.encode_dist(x)?.0
        } else {
            self.model.outer.encode_observed(x, &self.keep)?
        };
        self.model.inner.encode_dist(&z)
    }

    fn log_likelihood(&self, x_row: &[f64], u: &Tensor) -> Result<Vec<f64>> {
        let layout = self.model.layout();
        let raw = self.model.outer.decode_raw(&self.model.lift(u)?)?;
        let x = Tensor::matrix(u.rows(), x_row.len(), x_row.repeat(u.rows()))?;
        let tape = Tape::new();
        let ll = layout
            .log_lik(tape.constant(raw), tape.constant(x))?
            .value();
        Ok((0..ll.rows())
            .map(|r| {
                ll.row(r)
                    .iter()
                    .zip(&self.keep)
                    .filter(|(_, &k)| k)
                    .map(|(v, _)| v)
                    .sum()
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgm::{OptimizerKind, VaeacConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// `u ~ N(0,1)`, `x | u ~ N(w u, s2)` with a deliberately poor proposal.
    struct LinearGaussian {
        w: f64,
        s2: f64,
    }

    impl ImportanceModel for LinearGaussian {
        fn latent_dim(&self) -> usize {
            1
        }

        fn proposal(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
            let post_var = 1.0 / (1.0 + self.w * self.w / self.s2);
            let m: Vec<f64> = x.data().iter().map(|v| 0.5 * post_var * self.w * v / self.s2).collect();
            let lv = vec![(2.0 * post_var).ln(); m.len()];
            Ok((Tensor::matrix(m.len(), 1, m)?, Tensor::matrix(lv.len(), 1, lv)?))
        }

        fn log_likelihood(&self, x_row: &[f64], u: &Tensor) -> Result<Vec<f64>> {
            Ok(u.data()
                .iter()
                .map(|u| -0.5 * ((x_row[0] - self.w * u).powi(2) / self.s2 + (2.0 * PI * self.s2).ln()))
                .collect())
        }
    }

    struct Constant;

    impl ImportanceModel for Constant {
        fn latent_dim(&self) -> usize {
            2
        }

        fn proposal(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
            Ok((Tensor::zeros(&[x.rows(), 2]), Tensor::zeros(&[x.rows(), 2])))
        }

        fn log_likelihood(&self, x_row: &[f64], u: &Tensor) -> Result<Vec<f64>> {
            Ok(vec![-0.5 * x_row[0] * x_row[0]; u.rows()])
        }
    }

    #[test]
    fn linear_gaussian_matches_closed_form() {
        let model = LinearGaussian { w: 1.5, s2: 0.5 };
        let xs = [-2.0, 0.3, 1.7];
        let x = Tensor::matrix(3, 1, xs.to_vec()).unwrap();
        let est = log_px_importance(&model, &x, 1024, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let var = model.w * model.w + model.s2;
        for (e, v) in est.iter().zip(xs) {
            let truth = -0.5 * (v * v / var + (2.0 * PI * var).ln());
            assert!((e - truth).abs() < 0.2, "{e} vs {truth}");
        }
    }

    #[test]
    fn constant_decoder_is_exact_for_any_k() {
        let x = Tensor::matrix(2, 1, vec![0.4, -1.0]).unwrap();
        for k in [1, 3, 64] {
            let est = log_px_importance(&Constant, &x, k, &mut ChaCha8Rng::seed_from_u64(k as u64)).unwrap();
            assert!((est[0] + 0.08).abs() < 1e-12);
            assert!((est[1] + 0.5).abs() < 1e-12);
        }
        assert!(log_px_importance(&Constant, &x, 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn estimator_variance_shrinks_with_k() {
        let model = LinearGaussian { w: 1.5, s2: 0.5 };
        let x = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spread = |k: usize, rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..200).map(|_| log_px_importance(&model, &x, k, rng).unwrap()[0]).collect();
            let (_, sd) = crate::datasets::mean_std(&v);
            sd
        };
        let mut prev = f64::INFINITY;
        for k in [2, 4, 8, 16, 32] {
            let s = spread(k, &mut rng);
            assert!(s.is_finite() && s < prev, "k={k}: {s} vs {prev}");
            prev = s;
        }
    }

    fn fast(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 64,
            lr: 2e-3,
            optimizer: OptimizerKind::Adam,
        }
    }

    #[test]
    fn ancestral_samples_match_data_means_and_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 2000;
        let data: Vec<f64> = (0..n)
            .flat_map(|_| {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                [0.8 + a, -0.5 + 0.6 * a + 0.8 * b]
            })
            .collect();
        let x = Tensor::matrix(n, 2, data).unwrap();
        let columns = vec![ColumnSpec::standard("a"), ColumnSpec::standard("b")];
        let (outer, _) =
            super::super::train_vae(&x, VaeConfig::new(columns, 2, 32, 2), &fast(30), &mut rng).unwrap();
        let (ts, _) = train_two_stage(&x, Outer::Vae(outer), 2, 32, &fast(30), &mut rng).unwrap();
        assert_eq!(ts.ancestral_sample(0, false, &mut rng).unwrap().rows(), 0);
        let m = 4000;
        let s = ts.ancestral_sample(m, true, &mut rng).unwrap();
        for j in 0..2 {
            let dcol: Vec<f64> = (0..n).map(|i| x.row(i)[j]).collect();
            let scol: Vec<f64> = (0..m).map(|i| s.row(i)[j]).collect();
            let (dm, _) = crate::datasets::mean_std(&dcol);
            let (sm, sd) = crate::datasets::mean_std(&scol);
            let se = sd / (m as f64).sqrt();
            assert!((sm - dm).abs() < 3.0 * se, "column {j}: {sm} vs {dm} (se {se})");
        }
        let lp = ts.log_px(&x.select_rows(&[0, 1, 2]), 16, &mut rng).unwrap();
        assert!(lp.iter().all(|v| v.is_finite()));

        let dir = std::env::temp_dir().join(format!("clue-two-stage-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        ts.save(&dir, serde_json::Value::Null).unwrap();
        let back = TwoStage::load(&dir).unwrap();
        let u = Tensor::matrix(1, 2, vec![0.2, -0.3]).unwrap();
        assert_eq!(back.lift(&u).unwrap(), ts.lift(&u).unwrap());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn joint_vaeac_outer_emits_all_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let columns = vec![ColumnSpec::standard("x"), ColumnSpec::categorical("y", 2)];
        let data: Vec<f64> = (0..400)
            .flat_map(|i| {
                let c = (i % 2) as f64;
                let v: f64 = rng.sample(StandardNormal);
                [2.0 * c - 1.0 + 0.3 * v, 1.0 - c, c]
            })
            .collect();
        let x = Tensor::matrix(400, 3, data).unwrap();
        let (outer, _) =
            super::super::train_vaeac(&x, VaeacConfig::new(columns, 2, 16, 2), &fast(5), &mut rng).unwrap();
        let (ts, _) = train_two_stage(&x, Outer::Vaeac(outer), 2, 16, &fast(5), &mut rng).unwrap();
        let s = ts.ancestral_sample(10, false, &mut rng).unwrap();
        assert_eq!(s.cols(), 3);
        for r in 0..10 {
            assert_eq!(s.row(r)[1] + s.row(r)[2], 1.0);
        }
        let marg = InputMarginal { model: &ts, keep: vec![true, false] };
        let lp = log_px_importance(&marg, &x.select_rows(&[0, 1]), 8, &mut rng).unwrap();
        assert!(lp.iter().all(|v| v.is_finite()));
    }
}
