//! Parameter-owning layers. A layer is bound to a tape to obtain `Var`
//! handles for its parameters; after `backward`, gradients flow back into
//! the owning [`Param`]s via [`collect_grads`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::param::Param;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// Anything that owns an ordered list of parameters.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Parameter values in order, for checkpointing.
    fn state(&self) -> Vec<Tensor> {
        self.params().iter().map(|p| p.value.clone()).collect()
    }

    fn load_state(&mut self, state: &[Tensor]) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != state.len() {
            return Err(TensorError::InvalidArgument {
                op: "load_state",
                reason: format!("expected {} tensors, got {}", params.len(), state.len()),
            });
        }
        for (p, t) in params.iter_mut().zip(state) {
            if p.value.shape() != t.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load_state",
                    lhs: p.value.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

/// Accumulates gradients for `vars` (as returned by a bound module's
/// `vars()`, same order as `params_mut()`) into the module's parameters.
/// Parameters the output did not depend on receive a zero gradient.
pub fn collect_grads<M: Module + ?Sized>(
    module: &mut M,
    vars: &[Var<'_>],
    grads: &Gradients,
) -> Result<()> {
    let mut params = module.params_mut();
    if params.len() != vars.len() {
        return Err(TensorError::InvalidArgument {
            op: "collect_grads",
            reason: format!("{} params but {} bound vars", params.len(), vars.len()),
        });
    }
    for (p, v) in params.iter_mut().zip(vars) {
        p.accumulate(&grads.get_or_zeros(*v))?;
    }
    Ok(())
}

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    /// Uniform(±1/√in) initialization for weights and biases.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let k = 1.0 / (input as f64).sqrt();
        Self {
            weight: Param::new(Tensor::uniform(&[input, output], -k, k, rng)),
            bias: Param::new(Tensor::uniform(&[output], -k, k, rng)),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Param::new(Tensor::zeros(&[input, output])),
            bias: Param::new(Tensor::zeros(&[output])),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundLinear<'t> {
        BoundLinear {
            weight: tape.input(self.weight.value.clone(), trainable),
            bias: tape.input(self.bias.value.clone(), trainable),
        }
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

impl<'t> BoundLinear<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(self.weight)?.add(self.bias)
    }

    pub fn vars(&self) -> [Var<'t>; 2] {
        [self.weight, self.bias]
    }
}

/// Per-feature batch normalization with affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Weight of the old running value in each update.
    pub momentum: f64,
    pub eps: f64,
}

/// Batch statistics from a training-mode pass.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance estimate.
    pub var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::ones(&[dim])),
            beta: Param::new(Tensor::zeros(&[dim])),
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundBatchNorm<'t> {
        BoundBatchNorm {
            gamma: tape.input(self.gamma.value.clone(), trainable),
            beta: tape.input(self.beta.value.clone(), trainable),
            running_mean: Tensor::vector(self.running_mean.clone()),
            running_var: Tensor::vector(self.running_var.clone()),
            eps: self.eps,
        }
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, s) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = m * *r + (1.0 - m) * s;
        }
        for (r, s) in self.running_var.iter_mut().zip(&stats.var) {
            *r = m * *r + (1.0 - m) * s;
        }
    }
}

impl Module for BatchNorm {
    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

#[derive(Clone, Debug)]
pub struct BoundBatchNorm<'t> {
    pub gamma: Var<'t>,
    pub beta: Var<'t>,
    running_mean: Tensor,
    running_var: Tensor,
    eps: f64,
}

impl<'t> BoundBatchNorm<'t> {
    /// Training mode normalizes with batch statistics and returns them;
    /// eval mode uses the running statistics.
    pub fn forward(&self, x: Var<'t>, train: bool) -> Result<(Var<'t>, Option<BatchStats>)> {
        let tape = x.tape();
        let (xhat, stats) = if train {
            let n = x.shape()[0];
            let mean = x.mean_axis(0)?;
            let centered = x.sub(mean)?;
            let var = centered.square().mean_axis(0)?;
            let xhat = centered.div(var.add_scalar(self.eps).sqrt())?;
            let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
            let stats = BatchStats {
                mean: mean.value().into_vec(),
                var: var.value().data().iter().map(|v| v * unbias).collect(),
            };
            (xhat, Some(stats))
        } else {
            let mean = tape.constant(self.running_mean.clone());
            let sd = tape.constant(self.running_var.map(|v| (v + self.eps).sqrt()));
            (x.sub(mean)?.div(sd)?, None)
        };
        Ok((xhat.mul(self.gamma)?.add(self.beta)?, stats))
    }

    pub fn vars(&self) -> [Var<'t>; 2] {
        [self.gamma, self.beta]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub width: usize,
    /// Number of hidden layers (≥ 1).
    pub depth: usize,
    pub output_dim: usize,
    pub batch_norm: bool,
    pub leaky_slope: f64,
}

impl MlpSpec {
    pub fn new(input_dim: usize, width: usize, depth: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            width,
            depth,
            output_dim,
            batch_norm: false,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    pub fn with_batch_norm(mut self, on: bool) -> Self {
        self.batch_norm = on;
        self
    }
}

/// Fully connected network with residual hidden blocks:
/// `h₁ = act(L₀ x)`, `hᵢ₊₁ = hᵢ + act(Lᵢ hᵢ)`, `out = L_out h`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualMlp {
    pub spec: MlpSpec,
    pub hidden: Vec<Linear>,
    pub norms: Vec<BatchNorm>,
    pub out: Linear,
}

impl ResidualMlp {
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        if spec.depth == 0 || spec.width == 0 || spec.input_dim == 0 || spec.output_dim == 0 {
            return Err(TensorError::InvalidArgument {
                op: "residual_mlp",
                reason: format!("all sizes must be positive, got {spec:?}"),
            });
        }
        let mut hidden = Vec::with_capacity(spec.depth);
        hidden.push(Linear::new(spec.input_dim, spec.width, rng));
        for _ in 1..spec.depth {
            hidden.push(Linear::new(spec.width, spec.width, rng));
        }
        let norms = if spec.batch_norm {
            (0..spec.depth).map(|_| BatchNorm::new(spec.width)).collect()
        } else {
            Vec::new()
        };
        let out = Linear::new(spec.width, spec.output_dim, rng);
        Ok(Self {
            spec,
            hidden,
            norms,
            out,
        })
    }

    /// Linear layers only, for callers that treat weights layer by layer.
    pub fn layers(&self) -> Vec<&Linear> {
        self.hidden.iter().chain(std::iter::once(&self.out)).collect()
    }

    pub fn layers_mut(&mut self) -> Vec<&mut Linear> {
        self.hidden
            .iter_mut()
            .chain(std::iter::once(&mut self.out))
            .collect()
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundMlp<'t> {
        BoundMlp {
            hidden: self.hidden.iter().map(|l| l.bind(tape, trainable)).collect(),
            norms: self.norms.iter().map(|n| n.bind(tape, trainable)).collect(),
            out: self.out.bind(tape, trainable),
            slope: self.spec.leaky_slope,
        }
    }

    pub fn update_running(&mut self, stats: &[BatchStats]) {
        for (n, s) in self.norms.iter_mut().zip(stats) {
            n.update_running(s);
        }
    }

    /// Parameters followed by the running mean and variance of every
    /// normalization layer.
    pub fn full_state(&self) -> Vec<Tensor> {
        let mut s = self.state();
        for n in &self.norms {
            s.push(Tensor::vector(n.running_mean.clone()));
            s.push(Tensor::vector(n.running_var.clone()));
        }
        s
    }

    pub fn load_full_state(&mut self, state: &[Tensor]) -> Result<()> {
        let np = self.params().len();
        let expected = np + 2 * self.norms.len();
        if state.len() != expected {
            return Err(TensorError::InvalidArgument {
                op: "load_full_state",
                reason: format!("expected {expected} tensors, got {}", state.len()),
            });
        }
        self.load_state(&state[..np])?;
        for (n, pair) in self.norms.iter_mut().zip(state[np..].chunks(2)) {
            if pair[0].numel() != n.running_mean.len() || pair[1].numel() != n.running_var.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "load_full_state",
                    lhs: vec![n.running_mean.len()],
                    rhs: pair[0].shape().to_vec(),
                });
            }
            n.running_mean = pair[0].data().to_vec();
            n.running_var = pair[1].data().to_vec();
        }
        Ok(())
    }

    /// Eval-mode forward pass on a constant input, returning the value.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        Ok(bound.forward(tape.constant(x.clone()), false)?.0.value())
    }
}

impl Module for ResidualMlp {
    fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = Vec::new();
        for l in &self.hidden {
            v.extend(l.params());
        }
        for n in &self.norms {
            v.extend(n.params());
        }
        v.extend(self.out.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = Vec::new();
        for l in &mut self.hidden {
            v.extend(l.params_mut());
        }
        for n in &mut self.norms {
            v.extend(n.params_mut());
        }
        v.extend(self.out.params_mut());
        v
    }
}

#[derive(Clone, Debug)]
pub struct BoundMlp<'t> {
    pub hidden: Vec<BoundLinear<'t>>,
    pub norms: Vec<BoundBatchNorm<'t>>,
    pub out: BoundLinear<'t>,
    slope: f64,
}

impl<'t> BoundMlp<'t> {
    /// Returns the output and, in training mode with batch norm, the batch
    /// statistics of every normalization layer.
    pub fn forward(&self, x: Var<'t>, train: bool) -> Result<(Var<'t>, Vec<BatchStats>)> {
        let mut stats = Vec::new();
        let mut h = x;
        for (i, lin) in self.hidden.iter().enumerate() {
            let mut a = lin.forward(h)?;
            if let Some(bn) = self.norms.get(i) {
                let (y, s) = bn.forward(a, train)?;
                a = y;
                stats.extend(s);
            }
            let a = a.leaky_relu(self.slope);
            h = if i == 0 { a } else { h.add(a)? };
        }
        Ok((self.out.forward(h)?, stats))
    }

    /// Forward pass without batch statistics (eval mode).
    pub fn eval(&self, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward(x, false)?.0)
    }

    /// Parameter handles in the order of [`Module::params_mut`].
    pub fn vars(&self) -> Vec<Var<'t>> {
        let mut v = Vec::new();
        for l in &self.hidden {
            v.extend(l.vars());
        }
        for n in &self.norms {
            v.extend(n.vars());
        }
        v.extend(self.out.vars());
        v
    }
}
