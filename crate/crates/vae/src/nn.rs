//! Dense layers and multilayer perceptrons with explicit backward passes.
//!
//! Activations are row-major `(batch, features)` matrices. Every trainable
//! tensor is an `Array2<f64>`; biases are `1 × out` rows so that parameter
//! and gradient lists share one element type.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Identity => {}
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Sigmoid => z.mapv_inplace(sigmoid),
        }
    }

    /// Multiplies `grad` by the derivative, using the post-activation output.
    fn backprop(self, grad: &mut Array2<f64>, out: &Array2<f64>) {
        match self {
            Activation::Identity => {}
            Activation::Relu => grad.zip_mut_with(out, |g, &a| {
                if a <= 0.0 {
                    *g = 0.0;
                }
            }),
            Activation::Sigmoid => grad.zip_mut_with(out, |g, &a| *g *= a * (1.0 - a)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in × out`.
    pub w: Array2<f64>,
    /// `1 × out`.
    pub b: Array2<f64>,
}

impl Linear {
    /// Gaussian weights with std `gain / sqrt(fan_in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, gain: f64, rng: &mut R) -> Self {
        let std = gain / (input as f64).sqrt();
        let w = Array2::from_shape_simple_fn((input, output), || std * rng.sample::<f64, _>(StandardNormal));
        Self { w, b: Array2::zeros((1, output)) }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self { w: Array2::zeros((input, output)), b: Array2::zeros((1, output)) }
    }

    pub fn input_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Returns `(dx, dw, db)` for upstream gradient `dy`.
    pub fn backward(&self, x: &ArrayView2<f64>, dy: &Array2<f64>, need_dx: bool) -> (Option<Array2<f64>>, Array2<f64>, Array2<f64>) {
        let dw = x.t().dot(dy);
        let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dx = need_dx.then(|| dy.dot(&self.w.t()));
        (dx, dw, db)
    }
}

/// Stack of linear layers with ReLU between them and a configurable output
/// activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub output: Activation,
}

/// Layer inputs recorded during the forward pass; `activations[i]` feeds
/// layer `i` and the last entry is the network output.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub activations: Vec<Array2<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("cache holds the input at least")
    }
}

impl Mlp {
    /// `widths = [in, hidden.., out]`. Hidden layers use He scaling; the
    /// output layer uses unit gain.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], output: Activation, rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let gain = if i < last || output == Activation::Relu { 2f64.sqrt() } else { 1.0 };
                Linear::new(w[0], w[1], gain, rng)
            })
            .collect();
        Self { layers, output }
    }

    pub fn from_layers(layers: Vec<Linear>, output: Activation) -> Self {
        Self { layers, output }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim()
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim()).chain(self.layers.iter().map(Linear::output_dim)).collect()
    }

    fn activation(&self, i: usize) -> Activation {
        if i + 1 == self.layers.len() {
            self.output
        } else {
            Activation::Relu
        }
    }

    pub fn forward(&self, x: Array2<f64>) -> MlpCache {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x);
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.forward(&activations[i].view());
            self.activation(i).apply(&mut z);
            activations.push(z);
        }
        MlpCache { activations }
    }

    pub fn predict(&self, x: Array2<f64>) -> Array2<f64> {
        self.forward(x).activations.pop().expect("non-empty")
    }

    /// Backpropagates `dy` (gradient w.r.t. the output). Parameter gradients
    /// are appended to `grads` in `[w0, b0, w1, b1, ..]` order; the input
    /// gradient is returned when requested.
    pub fn backward(&self, cache: &MlpCache, dy: Array2<f64>, need_dx: bool, grads: &mut Vec<Array2<f64>>) -> Option<Array2<f64>> {
        let n = self.layers.len();
        let mut layer_grads = Vec::with_capacity(2 * n);
        let mut d = dy;
        let mut dx = None;
        for i in (0..n).rev() {
            self.activation(i).backprop(&mut d, &cache.activations[i + 1]);
            let want = i > 0 || need_dx;
            let (g_in, dw, db) = self.layers[i].backward(&cache.activations[i].view(), &d, want);
            layer_grads.push((dw, db));
            match g_in {
                Some(g) if i > 0 => d = g,
                g => dx = g,
            }
        }
        for (dw, db) in layer_grads.into_iter().rev() {
            grads.push(dw);
            grads.push(db);
        }
        dx
    }

    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect()
    }

    pub fn tensor_names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers.len()).flat_map(|i| [format!("{prefix}.{i}.w"), format!("{prefix}.{i}.b")]).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    sfgs_core::primitives::sigmoid(x)
}
