use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use clue_tensor::nn::{collect_grads, BoundMlp, MlpSpec, Module, ResidualMlp};
use clue_tensor::{clip_grad_norm, Tape, Tensor, Var};

use super::{
    check_finite, check_width, minibatches, reparameterize, standard_kl, ColumnLayout, LatentModel,
    TrainConfig, TrainLog, GRAD_CLIP_NORM,
};
use crate::checkpoint;
use crate::datasets::ColumnSpec;
use crate::error::{ClueError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub columns: Vec<ColumnSpec>,
    pub latent_dim: usize,
    pub width: usize,
    /// Hidden layers in each of the encoder and decoder.
    pub depth: usize,
    pub batch_norm: bool,
    /// Learn per-column Gaussian variances instead of fixing them to one.
    pub learned_variance: bool,
}

impl VaeConfig {
    pub fn new(columns: Vec<ColumnSpec>, latent_dim: usize, width: usize, depth: usize) -> Self {
        Self {
            columns,
            latent_dim,
            width,
            depth,
            batch_norm: true,
            learned_variance: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.width == 0 || self.depth == 0 {
            return Err(ClueError::Config(format!(
                "vae sizes must be positive: latent {}, width {}, depth {}",
                self.latent_dim, self.width, self.depth
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Vae {
    pub config: VaeConfig,
    pub encoder: ResidualMlp,
    pub decoder: ResidualMlp,
    layout: ColumnLayout,
}

impl Vae {
    pub fn new<R: Rng + ?Sized>(config: VaeConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layout = ColumnLayout::new(&config.columns, config.learned_variance)?;
        let (l, w, d) = (config.latent_dim, config.width, config.depth);
        let encoder = ResidualMlp::new(
            MlpSpec::new(layout.width(), w, d, 2 * l).with_batch_norm(config.batch_norm),
            rng,
        )?;
        let decoder = ResidualMlp::new(
            MlpSpec::new(l, w, d, layout.raw_width()).with_batch_norm(config.batch_norm),
            rng,
        )?;
        Ok(Self {
            config,
            encoder,
            decoder,
            layout,
        })
    }

    pub fn layout(&self) -> &ColumnLayout {
        &self.layout
    }

    fn split<'t>(&self, h: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let l = self.config.latent_dim;
        Ok((h.narrow(1, 0, l)?, h.narrow(1, l, l)?))
    }

    /// Encoder mean and log-variance in eval mode.
    pub fn encode_dist(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        check_width(x, self.layout.width(), "vae input")?;
        let tape = Tape::new();
        let h = self.encoder.bind(&tape, false).eval(tape.constant(x.clone()))?;
        let (m, lv) = self.split(h)?;
        Ok((m.value(), lv.value()))
    }

    /// Raw decoder output in eval mode.
    pub fn decode_raw(&self, z: &Tensor) -> Result<Tensor> {
        check_width(z, self.config.latent_dim, "vae latent")?;
        let tape = Tape::new();
        Ok(self.decoder.bind(&tape, false).eval(tape.constant(z.clone()))?.value())
    }

    pub fn decode_raw_var<'t>(&self, tape: &'t Tape, z: Var<'t>) -> Result<Var<'t>> {
        Ok(self.decoder.bind(tape, false).eval(z)?)
    }

    /// Encode to the mean and decode to soft means.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let (m, _) = self.encode_dist(x)?;
        self.decode_soft(&m)
    }

    /// Per-row `log p(x|z)` summed over columns.
    pub fn log_lik_given_z(&self, x: &Tensor, z: &Tensor) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let raw = self.decode_raw_var(&tape, tape.constant(z.clone()))?;
        Ok(self
            .layout
            .log_lik(raw, tape.constant(x.clone()))?
            .sum_axis(1)?
            .value()
            .into_vec())
    }

    fn elbo_batch<'t, R: Rng + ?Sized>(
        &self,
        enc: &BoundMlp<'t>,
        dec: &BoundMlp<'t>,
        x: Var<'t>,
        train: bool,
        rng: &mut R,
    ) -> Result<(Var<'t>, Vec<clue_tensor::nn::BatchStats>, Vec<clue_tensor::nn::BatchStats>)> {
        let (h, se) = enc.forward(x, train)?;
        let (mu, lv) = self.split(h)?;
        let z = reparameterize(mu, lv, rng)?;
        let (raw, sd) = dec.forward(z, train)?;
        let ll = self.layout.log_lik(raw, x)?.sum_axis(1)?;
        Ok((ll.sub(standard_kl(mu, lv)?)?, se, sd))
    }

    /// Single-sample ELBO per row in eval mode.
    pub fn elbo(&self, x: &Tensor, rng: &mut impl Rng) -> Result<Vec<f64>> {
        check_width(x, self.layout.width(), "vae input")?;
        let tape = Tape::new();
        let (enc, dec) = (self.encoder.bind(&tape, false), self.decoder.bind(&tape, false));
        Ok(self
            .elbo_batch(&enc, &dec, tape.constant(x.clone()), false, rng)?
            .0
            .value()
            .into_vec())
    }

    pub fn save(&self, dir: &Path, meta: serde_json::Value) -> Result<()> {
        checkpoint::prepare_dir(dir)?;
        checkpoint::write_tensors(&dir.join("encoder.bin"), &self.encoder.full_state())?;
        checkpoint::write_tensors(&dir.join("decoder.bin"), &self.decoder.full_state())?;
        checkpoint::write_manifest(
            dir,
            &serde_json::json!({"model": "vae", "config": self.config, "meta": meta}),
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: serde_json::Value = checkpoint::read_manifest(dir)?;
        if m["model"] != "vae" {
            return Err(ClueError::Checkpoint(format!("{} is not a vae", dir.display())));
        }
        let config: VaeConfig = serde_json::from_value(m["config"].clone())?;
        let mut vae = Self::new(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        vae.encoder
            .load_full_state(&checkpoint::read_tensors(&dir.join("encoder.bin"))?)?;
        vae.decoder
            .load_full_state(&checkpoint::read_tensors(&dir.join("decoder.bin"))?)?;
        Ok(vae)
    }
}

impl LatentModel for Vae {
    fn columns(&self) -> &[ColumnSpec] {
        &self.config.columns
    }

    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn encode_mean(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.encode_dist(x)?.0)
    }

    fn decode<'t>(&self, tape: &'t Tape, z: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let raw = self.decode_raw_var(tape, z)?;
        Ok((self.layout.mean(raw, false)?, self.layout.mean(raw, true)?))
    }
}

/// Trains by maximizing the single-sample reparameterized ELBO.
pub fn train_vae<R: Rng + ?Sized>(
    x: &Tensor,
    config: VaeConfig,
    train: &TrainConfig,
    rng: &mut R,
) -> Result<(Vae, TrainLog)> {
    train.validate()?;
    let mut vae = Vae::new(config, rng)?;
    check_width(x, vae.layout.width(), "vae training data")?;
    let n = x.rows();
    if n < 2 {
        return Err(ClueError::Empty("vae training set"));
    }
    let mut opt = train.optimizer();
    let mut log = TrainLog::default();
    for epoch in 0..train.epochs {
        let (mut total, mut count) = (0.0, 0usize);
        for idx in minibatches(n, train.batch_size, rng) {
            let tape = Tape::new();
            let enc = vae.encoder.bind(&tape, true);
            let dec = vae.decoder.bind(&tape, true);
            let (elbo, se, sd) = vae.elbo_batch(&enc, &dec, tape.constant(x.select_rows(&idx)), true, rng)?;
            let sum = elbo.sum();
            check_finite(epoch, "elbo", sum.item())?;
            total += sum.item();
            count += idx.len();
            let grads = tape.backward(sum.scale(-1.0 / idx.len() as f64))?;
            collect_grads(&mut vae.encoder, &enc.vars(), &grads)?;
            collect_grads(&mut vae.decoder, &dec.vars(), &grads)?;
            let mut ps = vae.encoder.params_mut();
            ps.extend(vae.decoder.params_mut());
            clip_grad_norm(&mut ps, GRAD_CLIP_NORM);
            opt.step(&mut ps)?;
            vae.encoder.update_running(&se);
            vae.decoder.update_running(&sd);
        }
        log.epoch_elbo.push(total / count.max(1) as f64);
    }
    Ok((vae, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::PpcaToy;
    use crate::dgm::OptimizerKind;
    use rand_chacha::ChaCha8Rng;

    fn standard_columns(d: usize) -> Vec<ColumnSpec> {
        (0..d).map(|i| ColumnSpec::standard(format!("x{i}"))).collect()
    }

    #[test]
    fn decode_is_deterministic_and_shapes_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cols = vec![ColumnSpec::standard("a"), ColumnSpec::categorical("b", 3)];
        let vae = Vae::new(VaeConfig::new(cols, 2, 8, 2), &mut rng).unwrap();
        let z = Tensor::matrix(2, 2, vec![0.3, -0.1, 0.3, -0.1]).unwrap();
        let x = vae.decode_soft(&z).unwrap();
        assert_eq!(x.row(0), x.row(1));
        let h = vae.decode_hard(&z).unwrap();
        assert_eq!(h.row(0)[1..].iter().sum::<f64>(), 1.0);
        assert!(vae.encode_mean(&Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn linear_gaussian_elbo_near_ppca_marginal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let toy = PpcaToy {
            w: vec![1.2],
            mean: vec![0.0],
            noise_var: 1.0,
            d: 1,
            q: 1,
        };
        let train_x = toy.sample(2000, &mut rng);
        let test_x = toy.sample(500, &mut rng);
        let mut cfg = VaeConfig::new(standard_columns(1), 1, 16, 1);
        cfg.batch_norm = false;
        let tc = TrainConfig {
            epochs: 60,
            batch_size: 64,
            lr: 3e-3,
            optimizer: OptimizerKind::Adam,
        };
        let (vae, log) = train_vae(&train_x, cfg, &tc, &mut rng).unwrap();
        assert!(log.final_elbo().unwrap().is_finite());
        // average several single-sample ELBO draws to reduce MC noise
        let reps = 20;
        let mut elbo = 0.0;
        for _ in 0..reps {
            elbo += vae.elbo(&test_x, &mut rng).unwrap().iter().sum::<f64>();
        }
        elbo /= (reps * test_x.rows()) as f64;
        let marginal: f64 = (0..test_x.rows())
            .map(|i| toy.log_marginal(test_x.row(i)))
            .sum::<f64>()
            / test_x.rows() as f64;
        assert!(elbo <= marginal + 0.02, "elbo {elbo} above marginal {marginal}");
        assert!(marginal - elbo < 0.1, "elbo {elbo} vs marginal {marginal}");
    }

    #[test]
    fn save_load_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vae = Vae::new(VaeConfig::new(standard_columns(3), 2, 8, 2), &mut rng).unwrap();
        let dir = std::env::temp_dir().join(format!("clue-vae-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        vae.save(&dir, serde_json::Value::Null).unwrap();
        let back = Vae::load(&dir).unwrap();
        let x = Tensor::matrix(1, 3, vec![0.1, 0.2, 0.3]).unwrap();
        assert_eq!(back.reconstruct(&x).unwrap(), vae.reconstruct(&x).unwrap());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
