//! Minimal dense-network toolkit with hand-written backward passes.
//!
//! Layers store weights as `in x out` matrices so a batch `B x in` maps to
//! `B x out` with a single `dot`. A gradient has the same type as the
//! parameters it belongs to, which keeps optimizers and finite-difference
//! checks generic over models.

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Flat access to every trainable tensor of a model, in a fixed order.
pub trait Parameters<T: Scalar>: Clone {
    fn slices(&self) -> Vec<&[T]>;
    fn slices_mut(&mut self) -> Vec<&mut [T]>;

    fn zeroed(&self) -> Self {
        let mut g = self.clone();
        for s in g.slices_mut() {
            s.fill(T::zero());
        }
        g
    }

    fn scale_(&mut self, factor: T) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn add_(&mut self, other: &Self) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += *y);
        }
    }

    fn parameter_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

pub(crate) fn sample_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> T {
    let z: f64 = StandardNormal.sample(rng);
    T::of(z)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Dense<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Dense<T> {
    /// Glorot-normal weights, zero bias.
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let std = (2.0 / (inputs + outputs) as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((inputs, outputs), || sample_normal::<T, _>(rng) * T::of(std));
        Self { weight, bias: Array1::zeros(outputs) }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { weight: Array2::zeros((inputs, outputs)), bias: Array1::zeros(outputs) }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad`; returns `dL/dx` when asked.
    pub fn backward(&self, x: &Array2<T>, dy: &Array2<T>, grad: &mut Dense<T>, want_input_grad: bool) -> Option<Array2<T>> {
        grad.weight += &x.t().dot(dy);
        grad.bias += &dy.sum_axis(Axis(0));
        want_input_grad.then(|| dy.dot(&self.weight.t()))
    }
}

impl<T: Scalar> Parameters<T> for Dense<T> {
    fn slices(&self) -> Vec<&[T]> {
        vec![
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    /// Slope 0.2 on the negative side.
    LeakyRelu,
    Tanh,
    Softplus,
    Sigmoid,
}

const LEAKY_SLOPE: f64 = 0.2;

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(T::zero()),
            Activation::LeakyRelu => {
                if x > T::zero() {
                    x
                } else {
                    x * T::of(LEAKY_SLOPE)
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Softplus => softplus(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    pub fn derivative<T: Scalar>(self, pre: T, post: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if pre > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu => {
                if pre > T::zero() {
                    T::one()
                } else {
                    T::of(LEAKY_SLOPE)
                }
            }
            Activation::Tanh => T::one() - post * post,
            Activation::Softplus => sigmoid(pre),
            Activation::Sigmoid => post * (T::one() - post),
        }
    }

    pub fn forward<T: Scalar>(self, pre: &Array2<T>) -> Array2<T> {
        pre.mapv(|v| self.apply(v))
    }

    pub fn backward<T: Scalar>(self, pre: &Array2<T>, post: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
        if self == Activation::Identity {
            return dy.clone();
        }
        let mut dx = dy.clone();
        Zip::from(&mut dx).and(pre).and(post).for_each(|d, &p, &q| *d *= self.derivative(p, q));
        dx
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// `ln sigma(x) = -softplus(-x)`.
pub fn log_sigmoid<T: Scalar>(x: T) -> T {
    -softplus(-x)
}

/// Row-wise softmax with max subtraction. Rows whose mask entry is false get
/// weight exactly zero.
pub fn masked_softmax<T: Scalar>(scores: &[T], mask: &[bool]) -> Vec<T> {
    let max = scores
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&s, _)| s)
        .fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = scores
        .iter()
        .zip(mask)
        .map(|(&s, &m)| if m { (s - max).exp() } else { T::zero() })
        .collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Feed-forward stack: `hidden` after every layer but the last, `output` after the last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Mlp<T> {
    pub layers: Vec<Dense<T>>,
    pub hidden: Activation,
    pub output: Activation,
}

pub struct MlpCache<T> {
    inputs: Vec<Array2<T>>,
    pre: Vec<Array2<T>>,
    pub out: Array2<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn new<R: Rng + ?Sized>(widths: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs an input and an output width");
        let layers = widths.windows(2).map(|w| Dense::new(w[0], w[1], rng)).collect();
        Self { layers, hidden, output }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output
        } else {
            self.hidden
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> MlpCache<T> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h);
            let a = self.activation(i).forward(&z);
            inputs.push(h);
            pre.push(z);
            h = a;
        }
        MlpCache { inputs, pre, out: h }
    }

    pub fn predict(&self, x: &Array2<T>) -> Array2<T> {
        self.forward(x).out
    }

    pub fn backward(&self, cache: &MlpCache<T>, dy: &Array2<T>, grad: &mut Mlp<T>, want_input_grad: bool) -> Option<Array2<T>> {
        let last = self.layers.len() - 1;
        let mut upstream = dy.clone();
        for i in (0..=last).rev() {
            let post = if i == last { &cache.out } else { &cache.inputs[i + 1] };
            let dz = self.activation(i).backward(&cache.pre[i], post, &upstream);
            let need = i > 0 || want_input_grad;
            match self.layers[i].backward(&cache.inputs[i], &dz, &mut grad.layers[i], need) {
                Some(dx) => upstream = dx,
                None => return None,
            }
        }
        Some(upstream)
    }
}

impl<T: Scalar> Parameters<T> for Mlp<T> {
    fn slices(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|l| l.slices()).collect()
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        self.layers.iter_mut().flat_map(|l| l.slices_mut()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

pub struct Adam<T> {
    config: AdamConfig,
    step: i32,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: Vec::new(), second: Vec::new() }
    }

    /// One descent step. A zero gradient leaves its parameter bit-identical.
    pub fn step<P: Parameters<T>>(&mut self, params: &mut P, grads: &P) {
        let grads = grads.slices();
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let corr1 = T::one() - b1.powi(self.step);
        let corr2 = T::one() - b2.powi(self.step);
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        for (k, p) in params.slices_mut().into_iter().enumerate() {
            let g = grads[k];
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let delta = lr * (m[i] / corr1) / ((v[i] / corr2).sqrt() + eps);
                if delta != T::zero() {
                    p[i] -= delta;
                }
            }
        }
    }
}

/// Stack row vectors into a batch matrix.
pub fn stack_rows<T: Scalar>(rows: &[&[T]]) -> Array2<T> {
    let width = rows.first().map_or(0, |r| r.len());
    let mut out = Array2::zeros((rows.len(), width));
    for (mut dst, src) in out.rows_mut().into_iter().zip(rows) {
        dst.assign(&ndarray::ArrayView1::from(*src));
    }
    out
}
