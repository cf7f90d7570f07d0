//! Layers and small networks evaluated on a [`Graph`].
//!
//! Networks own their parameters as plain [`Tensor`]s. A forward pass first
//! binds them into a graph with [`Module::bind`] (as differentiable leaves or,
//! when frozen, as constants) and then threads the bound variables through
//! `forward`. Parameter order is fixed by [`Module::params`].

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::conv::ConvGeom;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub trait Module {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    /// Non-trainable state (e.g. batch-norm running statistics).
    fn buffers(&self) -> Vec<&Tensor> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        Vec::new()
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Bind parameters into `g`; frozen parameters become constants.
    fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> Vec<Var<'g>> {
        self.params()
            .into_iter()
            .map(|p| if trainable { g.leaf(p.clone()) } else { g.constant(p.clone()) })
            .collect()
    }

    /// Flattened copy of every parameter value.
    fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    fn set_flat_params(&mut self, flat: &[f64]) {
        let mut off = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply<'g>(self, x: Var<'g>) -> Var<'g> {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.relu(),
            Activation::LeakyRelu(s) => x.leaky_relu(s),
            Activation::Sigmoid => x.sigmoid(),
            Activation::Tanh => x.tanh(),
        }
    }
}

fn glorot<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("valid range");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, inputs: usize, outputs: usize) -> Self {
        Self { weight: glorot(rng, &[inputs, outputs], inputs, outputs), bias: Tensor::zeros(&[outputs]) }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward<'g>(p: &[Var<'g>], x: Var<'g>) -> Var<'g> {
        x.matmul(p[0]).add(p[1])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with the running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[features]),
            beta: Tensor::zeros(&[features]),
            running_mean: Tensor::zeros(&[features]),
            running_var: Tensor::ones(&[features]),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// `p` holds the bound `(gamma, beta)`.
    pub fn forward<'g>(&self, p: &[Var<'g>], x: Var<'g>, mode: BnMode) -> Var<'g> {
        let g = x.graph();
        let shape = x.shape();
        let (n, d) = (shape[0], shape[1]);
        let normalized = match mode {
            BnMode::Train => {
                let mean = x.sum_to(&[1, d]).scale(1.0 / n as f64);
                let centered = x.sub(mean);
                let var = centered.square().sum_to(&[1, d]).scale(1.0 / n as f64);
                centered.div(var.add_scalar(self.eps).sqrt())
            }
            BnMode::Eval => {
                let mean = g.constant(self.running_mean.clone());
                let std = g.constant(self.running_var.map(|v| (v + self.eps).sqrt()));
                x.sub(mean).div(std)
            }
        };
        normalized.mul(p[0]).add(p[1])
    }

    /// Fold the statistics of a `[N, D]` batch into the running estimates.
    pub fn observe(&mut self, x: &Tensor) {
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v / n as f64;
            }
        }
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m) / n as f64;
            }
        }
        let mom = self.momentum;
        for (rm, m) in self.running_mean.data_mut().iter_mut().zip(&mean) {
            *rm = (1.0 - mom) * *rm + mom * m;
        }
        for (rv, v) in self.running_var.data_mut().iter_mut().zip(&var) {
            *rv = (1.0 - mom) * *rv + mom * v;
        }
    }
}

/// Optional input batch-norm followed by dense layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub batch_norm: Option<BatchNorm>,
    pub layers: Vec<Linear>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        inputs: usize,
        hidden: &[usize],
        outputs: usize,
        hidden_activation: Activation,
        output_activation: Activation,
        batch_norm: bool,
    ) -> Self {
        let mut widths = vec![inputs];
        widths.extend_from_slice(hidden);
        widths.push(outputs);
        let layers = widths.windows(2).map(|w| Linear::new(rng, w[0], w[1])).collect();
        Self {
            batch_norm: batch_norm.then(|| BatchNorm::new(inputs)),
            layers,
            hidden_activation,
            output_activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().expect("at least one layer").outputs()
    }

    pub fn forward<'g>(&self, p: &[Var<'g>], x: Var<'g>, mode: BnMode) -> Var<'g> {
        let mut h = x;
        let mut at = 0;
        if let Some(bn) = &self.batch_norm {
            h = bn.forward(&p[0..2], h, mode);
            at = 2;
        }
        let last = self.layers.len() - 1;
        for i in 0..self.layers.len() {
            h = Linear::forward(&p[at + 2 * i..at + 2 * i + 2], h);
            h = if i == last { self.output_activation.apply(h) } else { self.hidden_activation.apply(h) };
        }
        h
    }

    /// Update batch-norm running statistics from an input batch (no-op without batch-norm).
    pub fn observe_batch(&mut self, x: &Tensor) {
        if let Some(bn) = &mut self.batch_norm {
            bn.observe(x);
        }
    }
}

impl Module for Mlp {
    fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        if let Some(bn) = &self.batch_norm {
            out.push(&bn.gamma);
            out.push(&bn.beta);
        }
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if let Some(bn) = &mut self.batch_norm {
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    fn buffers(&self) -> Vec<&Tensor> {
        self.batch_norm.iter().flat_map(|bn| [&bn.running_mean, &bn.running_var]).collect()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        self.batch_norm.iter_mut().flat_map(|bn| [&mut bn.running_mean, &mut bn.running_var]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    /// `[k * k * c_in, c_out]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        let fan_in = kernel * kernel * c_in;
        let fan_out = kernel * kernel * c_out;
        Self {
            weight: glorot(rng, &[fan_in, c_out], fan_in, fan_out),
            bias: Tensor::zeros(&[c_out]),
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn geom(&self) -> ConvGeom {
        ConvGeom::new(self.kernel, self.stride, self.pad)
    }

    pub fn forward<'g>(&self, p: &[Var<'g>], x: Var<'g>) -> Var<'g> {
        x.conv2d(p[0], p[1], self.geom())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvTranspose2d {
    /// `[k * k * c_out, c_in]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl ConvTranspose2d {
    /// Upsamples spatial dims by exactly `stride`.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        let fan_in = kernel * kernel * c_in;
        let fan_out = kernel * kernel * c_out;
        let pad = kernel / 2;
        // out = (h - 1) * s + k + out_pad - 2 * pad == h * s
        let out_pad = stride + 2 * pad - kernel;
        Self {
            weight: glorot(rng, &[kernel * kernel * c_out, c_in], fan_in, fan_out),
            bias: Tensor::zeros(&[c_out]),
            kernel,
            stride,
            pad,
            out_pad,
        }
    }

    pub fn geom(&self) -> ConvGeom {
        ConvGeom::new(self.kernel, self.stride, self.pad)
    }

    pub fn forward<'g>(&self, p: &[Var<'g>], x: Var<'g>) -> Var<'g> {
        x.conv_transpose2d(p[0], p[1], self.geom(), self.out_pad)
    }
}

macro_rules! weight_bias_module {
    ($t:ty) => {
        impl Module for $t {
            fn params(&self) -> Vec<&Tensor> {
                vec![&self.weight, &self.bias]
            }

            fn params_mut(&mut self) -> Vec<&mut Tensor> {
                vec![&mut self.weight, &mut self.bias]
            }
        }
    };
}

weight_bias_module!(Linear);
weight_bias_module!(Conv2d);
weight_bias_module!(ConvTranspose2d);

/// Adam with bias-corrected moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn update(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch for parameter {i}");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    /// Compute gradients of `loss` w.r.t. the bound `vars` and apply them to `module`.
    pub fn minimize<'g, M: Module + ?Sized>(&mut self, module: &mut M, g: &'g Graph, loss: Var<'g>, vars: &[Var<'g>]) {
        let grads: Vec<Tensor> = g.grad(loss, vars, false).iter().map(|v| (*v.value()).clone()).collect();
        self.update(module.params_mut(), &grads);
    }
}
