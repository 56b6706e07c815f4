use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use clue_tensor::nn::{collect_grads, BatchStats, BoundMlp, MlpSpec, Module, ResidualMlp};
use clue_tensor::{clip_grad_norm, Tape, Tensor, Var};

use super::{
    check_finite, check_width, gaussian_kl, minibatches, reparameterize, ColumnLayout, TrainConfig,
    TrainLog, GRAD_CLIP_NORM,
};
use crate::checkpoint;
use crate::datasets::ColumnSpec;
use crate::error::{ClueError, Result};

pub const DEFAULT_CONDITIONAL_DRAWS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeacConfig {
    pub columns: Vec<ColumnSpec>,
    pub latent_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub batch_norm: bool,
    pub learned_variance: bool,
    /// Probability that a column is observed in a training mask.
    pub observe_prob: f64,
}

impl VaeacConfig {
    pub fn new(columns: Vec<ColumnSpec>, latent_dim: usize, width: usize, depth: usize) -> Self {
        Self {
            columns,
            latent_dim,
            width,
            depth,
            batch_norm: true,
            learned_variance: false,
            observe_prob: 0.5,
        }
    }
}

/// Masks use one entry per column: 1 observed, 0 unobserved.
#[derive(Clone, Debug)]
pub struct Vaeac {
    pub config: VaeacConfig,
    pub proposal: ResidualMlp,
    pub prior: ResidualMlp,
    pub generative: ResidualMlp,
    layout: ColumnLayout,
    /// `[columns, width]` indicator of which encoded entries belong to each
    /// column.
    expand: Tensor,
}

struct Bound<'t> {
    proposal: BoundMlp<'t>,
    prior: BoundMlp<'t>,
    generative: BoundMlp<'t>,
}

impl Vaeac {
    pub fn new<R: Rng + ?Sized>(config: VaeacConfig, rng: &mut R) -> Result<Self> {
        if config.latent_dim == 0 || config.width == 0 || config.depth == 0 {
            return Err(ClueError::Config("vaeac sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&config.observe_prob) {
            return Err(ClueError::Config(format!(
                "observe probability {} not in [0, 1]",
                config.observe_prob
            )));
        }
        let layout = ColumnLayout::new(&config.columns, config.learned_variance)?;
        let (c, d) = (layout.n_columns(), layout.width());
        let (l, w, depth, bn) = (config.latent_dim, config.width, config.depth, config.batch_norm);
        let net = |i: usize, o: usize, rng: &mut R| {
            ResidualMlp::new(MlpSpec::new(i, w, depth, o).with_batch_norm(bn), rng)
        };
        let proposal = net(d + c, 2 * l, rng)?;
        let prior = net(d + c, 2 * l, rng)?;
        let generative = net(l + d + c, layout.raw_width(), rng)?;
        let mut e = vec![0.0; c * d];
        let mut off = 0;
        for (i, col) in config.columns.iter().enumerate() {
            for j in off..off + col.width() {
                e[i * d + j] = 1.0;
            }
            off += col.width();
        }
        Ok(Self {
            config,
            proposal,
            prior,
            generative,
            layout,
            expand: Tensor::matrix(c, d, e)?,
        })
    }

    pub fn layout(&self) -> &ColumnLayout {
        &self.layout
    }

    pub fn n_columns(&self) -> usize {
        self.layout.n_columns()
    }

    fn bind<'t>(&self, tape: &'t Tape, train: bool) -> Bound<'t> {
        Bound {
            proposal: self.proposal.bind(tape, train),
            prior: self.prior.bind(tape, train),
            generative: self.generative.bind(tape, train),
        }
    }

    fn split<'t>(&self, h: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let l = self.config.latent_dim;
        Ok((h.narrow(1, 0, l)?, h.narrow(1, l, l)?))
    }

    fn check_mask(&self, x: &Tensor, b: &Tensor) -> Result<()> {
        check_width(x, self.layout.width(), "vaeac input")?;
        check_width(b, self.n_columns(), "vaeac mask")?;
        if b.rows() != x.rows() {
            return Err(ClueError::Dimension {
                context: "vaeac mask rows",
                expected: x.rows(),
                got: b.rows(),
            });
        }
        Ok(())
    }

    /// `x ⊙ b` with the column mask expanded to encoded width.
    fn observed<'t>(&self, x: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let e = x.tape().constant(self.expand.clone());
        Ok(x.mul(b.matmul(e)?)?)
    }

    fn prior_dist<'t>(
        &self,
        net: &BoundMlp<'t>,
        xo: Var<'t>,
        b: Var<'t>,
        train: bool,
    ) -> Result<(Var<'t>, Var<'t>, Vec<BatchStats>)> {
        let (h, s) = net.forward(Var::concat(&[xo, b], 1)?, train)?;
        let (m, lv) = self.split(h)?;
        Ok((m, lv, s))
    }

    fn generate<'t>(
        &self,
        net: &BoundMlp<'t>,
        z: Var<'t>,
        xo: Var<'t>,
        b: Var<'t>,
        train: bool,
    ) -> Result<(Var<'t>, Vec<BatchStats>)> {
        Ok(net.forward(Var::concat(&[z, xo, b], 1)?, train)?)
    }

    /// Differentiable conditional mean of all columns given `x ⊙ b`,
    /// averaged over one latent draw per entry of `eps` (each `[B, L]`).
    /// The mask may be relaxed to values in `[0, 1]`.
    pub fn conditional_mean_var<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        b: Var<'t>,
        eps: &[Tensor],
    ) -> Result<Var<'t>> {
        if eps.is_empty() {
            return Err(ClueError::Empty("latent draws"));
        }
        let nets = self.bind(tape, false);
        let xo = self.observed(x, b)?;
        let (mu, lv, _) = self.prior_dist(&nets.prior, xo, b, false)?;
        let sd = lv.scale(0.5).exp();
        let mut acc: Option<Var<'t>> = None;
        for e in eps {
            let z = mu.add(sd.mul(tape.constant(e.clone()))?)?;
            let (raw, _) = self.generate(&nets.generative, z, xo, b, false)?;
            let m = self.layout.mean(raw, false)?;
            acc = Some(match acc {
                Some(a) => a.add(m)?,
                None => m,
            });
        }
        Ok(acc.expect("nonempty").scale(1.0 / eps.len() as f64))
    }

    /// Mean and log-variance of `p(z | x ⊙ b, b)`.
    pub fn conditional_prior(&self, x: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_mask(x, b)?;
        let tape = Tape::new();
        let net = self.prior.bind(&tape, false);
        let (xv, bv) = (tape.constant(x.clone()), tape.constant(b.clone()));
        let (mu, lv, _) = self.prior_dist(&net, self.observed(xv, bv)?, bv, false)?;
        Ok((mu.value(), lv.value()))
    }

    /// Raw generative outputs for `draws` latent samples from the
    /// conditional prior `p(z | x ⊙ b, b)`.
    pub fn conditional_raw<R: Rng + ?Sized>(
        &self,
        x: &Tensor,
        b: &Tensor,
        draws: usize,
        rng: &mut R,
    ) -> Result<Vec<Tensor>> {
        self.check_mask(x, b)?;
        let tape = Tape::new();
        let nets = self.bind(&tape, false);
        let (xv, bv) = (tape.constant(x.clone()), tape.constant(b.clone()));
        let xo = self.observed(xv, bv)?;
        let (mu, lv, _) = self.prior_dist(&nets.prior, xo, bv, false)?;
        (0..draws)
            .map(|_| {
                let z = reparameterize(mu, lv, rng)?;
                Ok(self.generate(&nets.generative, z, xo, bv, false)?.0.value())
            })
            .collect()
    }

    /// Rows of `x` with unobserved columns replaced by the Monte Carlo mean
    /// of the generative means over `draws` latent samples.
    pub fn conditional_expectation<R: Rng + ?Sized>(
        &self,
        x: &Tensor,
        b: &Tensor,
        draws: usize,
        rng: &mut R,
    ) -> Result<Tensor> {
        self.check_mask(x, b)?;
        if b.data().iter().all(|&v| v == 1.0) {
            return Ok(x.clone());
        }
        let eps: Vec<Tensor> = (0..draws.max(1))
            .map(|_| Tensor::randn(&[x.rows(), self.config.latent_dim], rng))
            .collect();
        let tape = Tape::new();
        let (xv, bv) = (tape.constant(x.clone()), tape.constant(b.clone()));
        let mean = self.conditional_mean_var(&tape, xv, bv, &eps)?;
        let be = bv.matmul(tape.constant(self.expand.clone()))?;
        let keep = xv.mul(be)?;
        Ok(keep.add(mean.mul(be.neg().add_scalar(1.0))?)?.value())
    }

    /// Proposal distribution with nothing marked observed, so the latent
    /// code alone has to carry `x`.
    pub fn encode_dist(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        check_width(x, self.layout.width(), "vaeac input")?;
        let tape = Tape::new();
        let nets = self.bind(&tape, false);
        let b = tape.constant(Tensor::zeros(&[x.rows(), self.n_columns()]));
        let (h, _) = nets
            .proposal
            .forward(Var::concat(&[tape.constant(x.clone()), b], 1)?, false)?;
        let (m, lv) = self.split(h)?;
        Ok((m.value(), lv.value()))
    }

    /// Raw generative output with nothing observed.
    pub fn decode_unconditional_var<'t>(&self, tape: &'t Tape, z: Var<'t>) -> Result<Var<'t>> {
        let n = z.shape()[0];
        let net = self.generative.bind(tape, false);
        let xo = tape.constant(Tensor::zeros(&[n, self.layout.width()]));
        let b = tape.constant(Tensor::zeros(&[n, self.n_columns()]));
        Ok(self.generate(&net, z, xo, b, false)?.0)
    }

    pub fn decode_unconditional(&self, z: &Tensor) -> Result<Tensor> {
        check_width(z, self.config.latent_dim, "vaeac latent")?;
        let tape = Tape::new();
        Ok(self.decode_unconditional_var(&tape, tape.constant(z.clone()))?.value())
    }

    /// Encode with the proposal and decode with nothing observed.
    pub fn autoencode(&self, x: &Tensor) -> Result<Tensor> {
        let (m, _) = self.encode_dist(x)?;
        let tape = Tape::new();
        let raw = self.decode_unconditional_var(&tape, tape.constant(m))?;
        Ok(self.layout.mean(raw, false)?.value())
    }

    /// Samples from the model marginal: nothing observed.
    pub fn sample_marginal<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Tensor> {
        if n == 0 {
            return Ok(Tensor::zeros(&[0, self.layout.width()]));
        }
        let x = Tensor::zeros(&[n, self.layout.width()]);
        let b = Tensor::zeros(&[n, self.n_columns()]);
        let raw = self.conditional_raw(&x, &b, 1, rng)?.remove(0);
        self.layout.sample(&raw, false, rng)
    }

    fn elbo_batch<'t, R: Rng + ?Sized>(
        &self,
        nets: &Bound<'t>,
        x: Var<'t>,
        b: Var<'t>,
        train: bool,
        rng: &mut R,
    ) -> Result<(Var<'t>, [Vec<BatchStats>; 3])> {
        let xo = self.observed(x, b)?;
        let (hq, sq) = nets.proposal.forward(Var::concat(&[x, b], 1)?, train)?;
        let (mq, lq) = self.split(hq)?;
        let (mp, lp, sp) = self.prior_dist(&nets.prior, xo, b, train)?;
        let z = reparameterize(mq, lq, rng)?;
        let (raw, sg) = self.generate(&nets.generative, z, xo, b, train)?;
        let ll = self.layout.log_lik(raw, x)?;
        let unobserved = ll.mul(b.neg().add_scalar(1.0))?.sum_axis(1)?;
        let elbo = unobserved.sub(gaussian_kl(mq, lq, mp, lp)?)?;
        Ok((elbo, [sq, sp, sg]))
    }

    fn random_mask<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> Tensor {
        let c = self.n_columns();
        let p = self.config.observe_prob;
        let data = (0..rows * c).map(|_| if rng.random_bool(p) { 1.0 } else { 0.0 }).collect();
        Tensor::matrix(rows, c, data).expect("mask shape")
    }

    pub fn save(&self, dir: &Path, meta: serde_json::Value) -> Result<()> {
        checkpoint::prepare_dir(dir)?;
        for (name, net) in [
            ("proposal", &self.proposal),
            ("prior", &self.prior),
            ("generative", &self.generative),
        ] {
            checkpoint::write_tensors(&dir.join(format!("{name}.bin")), &net.full_state())?;
        }
        checkpoint::write_manifest(
            dir,
            &serde_json::json!({"model": "vaeac", "config": self.config, "meta": meta}),
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: serde_json::Value = checkpoint::read_manifest(dir)?;
        if m["model"] != "vaeac" {
            return Err(ClueError::Checkpoint(format!("{} is not a vaeac", dir.display())));
        }
        let config: VaeacConfig = serde_json::from_value(m["config"].clone())?;
        let mut v = Self::new(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        for (name, net) in [
            ("proposal", &mut v.proposal),
            ("prior", &mut v.prior),
            ("generative", &mut v.generative),
        ] {
            net.load_full_state(&checkpoint::read_tensors(&dir.join(format!("{name}.bin")))?)?;
        }
        Ok(v)
    }
}

/// Trains with independent per-column Bernoulli masks resampled for every
/// row of every batch.
pub fn train_vaeac<R: Rng + ?Sized>(
    x: &Tensor,
    config: VaeacConfig,
    train: &TrainConfig,
    rng: &mut R,
) -> Result<(Vaeac, TrainLog)> {
    train.validate()?;
    let mut model = Vaeac::new(config, rng)?;
    check_width(x, model.layout.width(), "vaeac training data")?;
    let n = x.rows();
    if n < 2 {
        return Err(ClueError::Empty("vaeac training set"));
    }
    let mut opt = train.optimizer();
    let mut log = TrainLog::default();
    for epoch in 0..train.epochs {
        let (mut total, mut count) = (0.0, 0usize);
        for idx in minibatches(n, train.batch_size, rng) {
            let tape = Tape::new();
            let nets = model.bind(&tape, true);
            let b = tape.constant(model.random_mask(idx.len(), rng));
            let (elbo, [sq, sp, sg]) =
                model.elbo_batch(&nets, tape.constant(x.select_rows(&idx)), b, true, rng)?;
            let sum = elbo.sum();
            check_finite(epoch, "vaeac elbo", sum.item())?;
            total += sum.item();
            count += idx.len();
            let grads = tape.backward(sum.scale(-1.0 / idx.len() as f64))?;
            collect_grads(&mut model.proposal, &nets.proposal.vars(), &grads)?;
            collect_grads(&mut model.prior, &nets.prior.vars(), &grads)?;
            collect_grads(&mut model.generative, &nets.generative.vars(), &grads)?;
            let mut ps = model.proposal.params_mut();
            ps.extend(model.prior.params_mut());
            ps.extend(model.generative.params_mut());
            clip_grad_norm(&mut ps, GRAD_CLIP_NORM);
            opt.step(&mut ps)?;
            model.proposal.update_running(&sq);
            model.prior.update_running(&sp);
            model.generative.update_running(&sg);
        }
        log.epoch_elbo.push(total / count.max(1) as f64);
    }
    Ok((model, log))
}
