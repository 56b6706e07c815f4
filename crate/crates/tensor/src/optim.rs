use crate::error::{Result, TensorError};
use crate::param::Param;

/// First-order optimizer over a fixed, ordered list of parameters.
pub trait Optimizer {
    /// Applies one update from the accumulated gradients, then clears them.
    /// Every parameter must carry a gradient.
    fn step(&mut self, params: &mut [&mut Param]) -> Result<()>;
    fn lr(&self) -> f64;
    fn set_lr(&mut self, lr: f64);
}

/// Rescales all gradients so their joint ℓ2 norm is at most `max_norm`.
/// Returns the norm before rescaling. Parameters without a gradient are
/// skipped.
pub fn clip_grad_norm(params: &mut [&mut Param], max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .filter_map(|p| p.grad.as_ref())
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in params.iter_mut().filter_map(|p| p.grad.as_mut()) {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[derive(Clone, Debug)]
struct Moments {
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Moments {
    fn new() -> Self {
        Self {
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    fn ensure(&mut self, params: &[&mut Param]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
            return Ok(());
        }
        let same = self.m.len() == params.len()
            && self.m.iter().zip(params).all(|(m, p)| m.len() == p.numel());
        if same {
            Ok(())
        } else {
            Err(TensorError::InvalidArgument {
                op: "optimizer step",
                reason: "parameter list changed between steps".into(),
            })
        }
    }
}

fn take_grads(params: &mut [&mut Param]) -> Result<Vec<crate::Tensor>> {
    params
        .iter_mut()
        .enumerate()
        .map(|(i, p)| p.grad.take().ok_or(TensorError::MissingGradient(i)))
        .collect()
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: Moments,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: Moments::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.state.t
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [&mut Param]) -> Result<()> {
        self.state.ensure(params)?;
        let grads = take_grads(params)?;
        self.state.t += 1;
        let t = self.state.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(&grads).enumerate() {
            let m = &mut self.state.m[k];
            let v = &mut self.state.v[k];
            for (i, (w, &gi)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    fn lr(&self) -> f64 {
        self.lr
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }
}

/// Adam with variance rectification; falls back to bias-corrected momentum
/// while the variance estimate is unreliable.
#[derive(Clone, Debug)]
pub struct RAdam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: Moments,
}

impl RAdam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: Moments::new(),
        }
    }
}

impl Optimizer for RAdam {
    fn step(&mut self, params: &mut [&mut Param]) -> Result<()> {
        self.state.ensure(params)?;
        let grads = take_grads(params)?;
        self.state.t += 1;
        let t = self.state.t as i32;
        let b2t = self.beta2.powi(t);
        let bc1 = 1.0 - self.beta1.powi(t);
        let rho_inf = 2.0 / (1.0 - self.beta2) - 1.0;
        let rho_t = rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t);
        let rect = if rho_t > 5.0 {
            Some(
                ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf
                    / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                    .sqrt(),
            )
        } else {
            None
        };
        for (k, (p, g)) in params.iter_mut().zip(&grads).enumerate() {
            let m = &mut self.state.m[k];
            let v = &mut self.state.v[k];
            for (i, (w, &gi)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                *w -= match rect {
                    Some(r) => {
                        let vh = (v[i] / (1.0 - b2t)).sqrt();
                        self.lr * r * mh / (vh + self.eps)
                    }
                    None => self.lr * mh,
                };
            }
        }
        Ok(())
    }

    fn lr(&self) -> f64 {
        self.lr
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }
}
