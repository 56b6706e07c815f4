use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use clue_tensor::nn::Module;
use clue_tensor::{Tape, Tensor};

use super::{check_input, gibbs_prior_update, log_joint, MlpConfig, PosteriorEnsemble, PriorState};
use crate::datasets::TargetSpec;
use crate::error::{ClueError, Result};

pub const DEFAULT_STEP_SIZE: f64 = 0.01;
pub const DEFAULT_FRICTION: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interval {
    Epochs(usize),
    Steps(usize),
}

impl Interval {
    pub fn steps(self, steps_per_epoch: usize) -> usize {
        match self {
            Interval::Epochs(e) => e * steps_per_epoch,
            Interval::Steps(s) => s,
        }
    }

    fn scaled_down(self, divisor: usize) -> Self {
        match self {
            Interval::Epochs(e) => Interval::Epochs((e / divisor).max(1)),
            Interval::Steps(s) => Interval::Steps((s / divisor).max(1)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SghmcSchedule {
    pub step_size: f64,
    pub friction: f64,
    pub batch_size: usize,
    pub burn_in: Interval,
    /// Leading part of burn-in during which the preconditioner and noise
    /// estimates adapt.
    pub estimation: Interval,
    pub save_every: Interval,
    /// Target ensemble size.
    pub n_samples: usize,
    pub resample_momentum: Interval,
    pub gibbs_every: Interval,
}

impl SghmcSchedule {
    pub fn tabular() -> Self {
        Self {
            step_size: DEFAULT_STEP_SIZE,
            friction: DEFAULT_FRICTION,
            batch_size: 512,
            burn_in: Interval::Epochs(400),
            estimation: Interval::Epochs(120),
            save_every: Interval::Epochs(20),
            n_samples: 100,
            resample_momentum: Interval::Epochs(10),
            gibbs_every: Interval::Epochs(50),
        }
    }

    pub fn image() -> Self {
        Self {
            step_size: DEFAULT_STEP_SIZE,
            friction: DEFAULT_FRICTION,
            batch_size: 512,
            burn_in: Interval::Epochs(25),
            estimation: Interval::Epochs(15),
            save_every: Interval::Epochs(2),
            n_samples: 300,
            resample_momentum: Interval::Steps(10),
            gibbs_every: Interval::Steps(45),
        }
    }

    /// Divides every interval by `divisor` (at least 1 each) and sets the
    /// ensemble size.
    pub fn scaled_down(&self, divisor: usize, n_samples: usize) -> Self {
        let d = divisor.max(1);
        Self {
            burn_in: self.burn_in.scaled_down(d),
            estimation: self.estimation.scaled_down(d),
            save_every: self.save_every.scaled_down(d),
            resample_momentum: self.resample_momentum.scaled_down(d),
            gibbs_every: self.gibbs_every.scaled_down(d),
            n_samples,
            ..self.clone()
        }
    }

    pub fn validate(&self, steps_per_epoch: usize) -> Result<()> {
        let bad = |m: String| Err(ClueError::Config(m));
        if self.n_samples == 0 {
            return bad("ensemble size must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.step_size > 0.0) || !(0.0..=1.0).contains(&self.friction) {
            return bad(format!(
                "step size {} must be positive and friction {} in [0, 1]",
                self.step_size, self.friction
            ));
        }
        let s = |i: Interval| i.steps(steps_per_epoch);
        for (name, i) in [
            ("save interval", self.save_every),
            ("momentum interval", self.resample_momentum),
            ("gibbs interval", self.gibbs_every),
        ] {
            if s(i) == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if s(self.estimation) > s(self.burn_in) {
            return bad("estimation phase longer than burn-in".into());
        }
        Ok(())
    }

    pub fn total_steps(&self, steps_per_epoch: usize) -> usize {
        self.burn_in.steps(steps_per_epoch) + self.save_every.steps(steps_per_epoch) * self.n_samples
    }
}

/// Scale-adapted SG-HMC state for a list of parameter tensors.
#[derive(Clone, Debug)]
pub struct SghmcSampler {
    pub step_size: f64,
    pub friction: f64,
    pub inject_noise: bool,
    v: Vec<Vec<f64>>,
    tau: Vec<Vec<f64>>,
    g: Vec<Vec<f64>>,
    v_hat: Vec<Vec<f64>>,
}

impl SghmcSampler {
    pub fn new(sizes: &[usize], step_size: f64, friction: f64) -> Self {
        let fill = |x: f64| sizes.iter().map(|&n| vec![x; n]).collect::<Vec<_>>();
        Self {
            step_size,
            friction,
            inject_noise: true,
            v: fill(0.0),
            tau: fill(1.0),
            g: fill(1.0),
            v_hat: fill(1.0),
        }
    }

    /// Running estimate of the squared gradient, per parameter.
    pub fn v_hat(&self) -> &[Vec<f64>] {
        &self.v_hat
    }

    pub fn momentum(&self) -> &[Vec<f64>] {
        &self.v
    }

    fn inv_sqrt(v_hat: f64) -> f64 {
        1.0 / v_hat.max(1e-16).sqrt()
    }

    /// One update given gradients of the potential `U = −log p(w, D)`.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
        estimating: bool,
        rng: &mut R,
    ) -> Result<()> {
        if params.len() != self.v.len() || grads.len() != self.v.len() {
            return Err(ClueError::Dimension {
                context: "sghmc parameters",
                expected: self.v.len(),
                got: params.len().min(grads.len()),
            });
        }
        let lr2 = self.step_size * self.step_size;
        let lr4 = lr2 * lr2;
        let c = self.friction;
        for (k, (p, gr)) in params.iter_mut().zip(grads).enumerate() {
            let (v, tau, g, vh) = (&mut self.v[k], &mut self.tau[k], &mut self.g[k], &mut self.v_hat[k]);
            if gr.numel() != v.len() || p.numel() != v.len() {
                return Err(ClueError::Dimension {
                    context: "sghmc tensor",
                    expected: v.len(),
                    got: gr.numel(),
                });
            }
            let data = p.data_mut();
            for i in 0..v.len() {
                let d = gr.data()[i];
                if estimating {
                    let r = 1.0 / (tau[i] + 1.0);
                    g[i] += -r * g[i] + r * d;
                    vh[i] += -r * vh[i] + r * d * d;
                    tau[i] = 1.0 + tau[i] * (1.0 - g[i] * g[i] / vh[i].max(1e-16));
                }
                let minv = Self::inv_sqrt(vh[i]);
                let noise = if self.inject_noise {
                    let var = (2.0 * lr2 * minv * c - lr4).max(1e-16);
                    var.sqrt() * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                v[i] += -lr2 * minv * d - c * v[i] + noise;
                data[i] += v[i];
            }
        }
        Ok(())
    }

    pub fn resample_momentum<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let lr2 = self.step_size * self.step_size;
        for (v, vh) in self.v.iter_mut().zip(&self.v_hat) {
            for (vi, &h) in v.iter_mut().zip(vh) {
                *vi = (lr2 * Self::inv_sqrt(h)).sqrt() * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
}

/// Runs the chain on `(x, y)` and returns the saved weight sets. Targets
/// are class indices or standardized regression values.
pub fn run_sghmc<R: Rng + ?Sized>(
    x: &Tensor,
    y: &[f64],
    target: &TargetSpec,
    config: &MlpConfig,
    schedule: &SghmcSchedule,
    rng: &mut R,
) -> Result<PosteriorEnsemble> {
    config.validate()?;
    check_input(config, x)?;
    let n = x.rows();
    if n == 0 {
        return Err(ClueError::Empty("training set"));
    }
    if y.len() != n {
        return Err(ClueError::Dimension {
            context: "targets",
            expected: n,
            got: y.len(),
        });
    }
    let b = schedule.batch_size.min(n).max(1);
    let spe = n.div_ceil(b);
    schedule.validate(spe)?;
    let burn = schedule.burn_in.steps(spe);
    let est = schedule.estimation.steps(spe);
    let save = schedule.save_every.steps(spe);
    let resample = schedule.resample_momentum.steps(spe);
    let gibbs = schedule.gibbs_every.steps(spe);
    let total = schedule.total_steps(spe);

    let mut net = config.build(rng)?;
    let mut prior = PriorState::default_for(config);
    let sizes: Vec<usize> = net.params().iter().map(|p| p.numel()).collect();
    let mut sampler = SghmcSampler::new(&sizes, schedule.step_size, schedule.friction);
    let mut order: Vec<usize> = (0..n).collect();
    let mut members = Vec::with_capacity(schedule.n_samples);

    for t in 0..total {
        let pos = t % spe;
        if pos == 0 {
            order.shuffle(rng);
        }
        let idx = &order[pos * b..((pos + 1) * b).min(n)];
        let xb = x.select_rows(idx);
        let yb: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        let tape = Tape::new();
        let bound = net.bind(&tape, true);
        let lj = match log_joint(&bound, &config.head, &prior, tape.constant(xb), &yb, n) {
            Ok(v) => v,
            Err(ClueError::NonFinite { .. }) => {
                return Err(ClueError::Diverged {
                    step: t,
                    loss: f64::NAN,
                })
            }
            Err(e) => return Err(e),
        };
        let u = lj.neg();
        if !u.item().is_finite() {
            return Err(ClueError::Diverged {
                step: t,
                loss: u.item(),
            });
        }
        let grads = tape.backward(u)?;
        let g: Vec<Tensor> = bound.vars().iter().map(|v| grads.get_or_zeros(*v)).collect();
        {
            let mut ps: Vec<&mut Tensor> = net.params_mut().into_iter().map(|p| &mut p.value).collect();
            sampler.step(&mut ps, &g, t < est, rng)?;
        }
        let s = t + 1;
        if s % resample == 0 {
            sampler.resample_momentum(rng);
        }
        if s % gibbs == 0 {
            prior = gibbs_prior_update(&net, &prior, rng);
        }
        if s > burn && (s - burn) % save == 0 {
            members.push(net.clone());
        }
    }
    PosteriorEnsemble::new(config.clone(), members, prior, target.clone())
}

#[cfg(test)]
mod tests {
    use super::super::Head;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tabular_schedule_counts() {
        let s = SghmcSchedule::tabular();
        s.validate(1).unwrap();
        assert_eq!(s.total_steps(1), 2400);
        let x = Tensor::matrix(4, 1, vec![-1.0, -0.5, 0.5, 1.0]).unwrap();
        let y = [0.0, 0.0, 1.0, 1.0];
        let t = TargetSpec::Classification {
            name: "y".into(),
            classes: vec!["a".into(), "b".into()],
        };
        let c = MlpConfig::new(1, 1, 2, Head::Categorical { classes: 2 }).unwrap();
        let ens = run_sghmc(&x, &y, &t, &c, &s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(ens.len(), 100);
    }

    #[test]
    fn zero_samples_is_config_error() {
        let mut s = SghmcSchedule::tabular();
        s.n_samples = 0;
        assert!(matches!(s.validate(3), Err(ClueError::Config(_))));
        let mut s = SghmcSchedule::tabular();
        s.estimation = Interval::Epochs(500);
        assert!(s.validate(3).is_err());
    }

    #[test]
    fn mixed_units() {
        let s = SghmcSchedule::image();
        assert_eq!(s.resample_momentum.steps(100), 10);
        assert_eq!(s.burn_in.steps(100), 2500);
        let d = SghmcSchedule::tabular().scaled_down(10, 20);
        assert_eq!(d.burn_in, Interval::Epochs(40));
        assert_eq!(d.estimation, Interval::Epochs(12));
        assert_eq!(d.resample_momentum, Interval::Epochs(1));
    }

    #[test]
    fn noiseless_full_friction_is_preconditioned_descent() {
        let a = [1.0, 10.0, 100.0];
        let energy = |t: &Tensor| 0.5 * t.data().iter().zip(&a).map(|(x, a)| a * x * x).sum::<f64>();
        let grad_of = |t: &Tensor| Tensor::vector(t.data().iter().zip(&a).map(|(x, a)| a * x).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for estimating in [true, false] {
            let mut theta = Tensor::vector(vec![1.0, -1.0, 0.5]);
            let mut s = SghmcSampler::new(&[3], 0.1, 1.0);
            s.inject_noise = false;
            let e0 = energy(&theta);
            let mut prev = e0;
            for k in 0..1000 {
                let grad = grad_of(&theta);
                let before = theta.clone();
                s.step(&mut [&mut theta], &[grad.clone()], estimating && k < 10, &mut rng).unwrap();
                for i in 0..3 {
                    let expect = -0.01 / s.v_hat()[0][i].sqrt() * grad.data()[i];
                    assert!((theta.data()[i] - before.data()[i] - expect).abs() < 1e-15);
                }
                if !estimating {
                    let e = energy(&theta);
                    assert!(e <= prev);
                    prev = e;
                }
            }
            if !estimating {
                assert!(prev < 1e-3 * e0);
            }
        }
    }

    #[test]
    fn linear_regression_posterior_matches_conjugate_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, b, noise_sd, prior_var, theta_true) = (50usize, 10usize, 0.5, 1.0, 1.5);
        let xs: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| theta_true * x + noise_sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let nv = noise_sd * noise_sd;
        let precision = 1.0 / prior_var + xs.iter().map(|x| x * x).sum::<f64>() / nv;
        let post_mean = xs.iter().zip(&ys).map(|(x, y)| x * y).sum::<f64>() / nv / precision;
        let post_var = 1.0 / precision;

        let mut theta = Tensor::vector(vec![0.0]);
        let mut s = SghmcSampler::new(&[1], 0.01, DEFAULT_FRICTION);
        let mut order: Vec<usize> = (0..n).collect();
        let (burn, est, keep) = (5_000, 1_500, 200_000);
        let mut draws = Vec::with_capacity(keep);
        for t in 0..burn + keep {
            if t % (n / b) == 0 {
                order.shuffle(&mut rng);
            }
            let pos = t % (n / b);
            let th = theta.data()[0];
            let lik: f64 = order[pos * b..(pos + 1) * b]
                .iter()
                .map(|&i| (th * xs[i] - ys[i]) * xs[i] / nv)
                .sum();
            let grad = (n as f64 / b as f64) * lik + th / prior_var;
            s.step(&mut [&mut theta], &[Tensor::vector(vec![grad])], t < est, &mut rng)
                .unwrap();
            if (t + 1) % 50 == 0 {
                s.resample_momentum(&mut rng);
            }
            if t >= burn {
                draws.push(theta.data()[0]);
            }
        }
        let m = draws.iter().sum::<f64>() / keep as f64;
        let v = draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / keep as f64;
        assert!((m - post_mean).abs() / post_mean.abs() < 0.05, "mean {m} vs {post_mean}");
        assert!((v - post_var).abs() / post_var < 0.2, "var {v} vs {post_var}");
    }

    #[test]
    fn members_have_finite_log_joint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ds = crate::datasets::make_moons(120, 0.1, 3).unwrap();
        let c = MlpConfig::new(2, 2, 16, Head::Categorical { classes: 2 }).unwrap();
        let s = SghmcSchedule {
            batch_size: 32,
            burn_in: Interval::Epochs(20),
            estimation: Interval::Epochs(6),
            save_every: Interval::Epochs(2),
            n_samples: 5,
            resample_momentum: Interval::Epochs(1),
            gibbs_every: Interval::Epochs(5),
            ..SghmcSchedule::tabular()
        };
        let (x, y) = (ds.x_train(), ds.y_train());
        let ens = run_sghmc(&x, &y, &ds.target, &c, &s, &mut rng).unwrap();
        assert_eq!(ens.len(), 5);
        for m in &ens.members {
            assert!(super::super::log_joint_value(m, &c, &ens.prior, &x, &y).unwrap().is_finite());
        }
    }
}
