//! Fully connected network with hand-written reverse mode.
//!
//! Batches are stored column-wise: a batch of `B` samples with `n` features
//! is an `n x B` matrix.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu { alpha: f64 },
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(&self, z: f64) -> f64 {
        match *self {
            Activation::Relu => z.max(0.0),
            Activation::LeakyRelu { alpha } => {
                if z > 0.0 {
                    z
                } else {
                    alpha * z
                }
            }
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative given the pre-activation `z` and the activation `a`.
    /// ReLU uses 0 at the kink.
    #[inline]
    pub fn derivative(&self, z: f64, a: f64) -> f64 {
        match *self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { alpha } => {
                if z > 0.0 {
                    1.0
                } else {
                    alpha
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }

    pub fn tag(&self) -> String {
        match self {
            Activation::Relu => "relu".into(),
            Activation::LeakyRelu { alpha } => format!("leaky_relu({alpha})"),
            Activation::Tanh => "tanh".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// out x in
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Hidden layers use `activation`, the output layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpCore {
    layers: Vec<Dense>,
    activation: Activation,
}

/// Intermediate values of a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: DMatrix<f64>,
    pre: Vec<DMatrix<f64>>,
    post: Vec<DMatrix<f64>>,
}

/// Parameter gradients, laid out like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub bias: Vec<DVector<f64>>,
}

impl Gradients {
    pub fn zeros_like(core: &MlpCore) -> Self {
        Self {
            weights: core.layers.iter().map(|l| DMatrix::zeros(l.weights.nrows(), l.weights.ncols())).collect(),
            bias: core.layers.iter().map(|l| DVector::zeros(l.bias.len())).collect(),
        }
    }

    /// Entry `idx` in the flat order of [`MlpCore::param`].
    pub fn get(&self, idx: usize) -> f64 {
        let mut idx = idx;
        for (w, b) in self.weights.iter().zip(&self.bias) {
            let nw = w.len();
            if idx < nw {
                let cols = w.ncols();
                return w[(idx / cols, idx % cols)];
            }
            idx -= nw;
            if idx < b.len() {
                return b[idx];
            }
            idx -= b.len();
        }
        panic!("gradient index out of range");
    }

    pub fn max_abs(&self) -> f64 {
        self.weights
            .iter()
            .map(|w| w.amax())
            .chain(self.bias.iter().map(|b| b.amax()))
            .fold(0.0, f64::max)
    }
}

impl MlpCore {
    /// Uniform fan-in initialisation: weights and biases drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        Self::check_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                // row-major draw order, matching the artifact layout
                let mut weights = DMatrix::zeros(fan_out, fan_in);
                for r in 0..fan_out {
                    for c in 0..fan_in {
                        weights[(r, c)] = rng.random_range(-bound..bound);
                    }
                }
                let bias = DVector::from_fn(fan_out, |_, _| rng.random_range(-bound..bound));
                Dense { weights, bias }
            })
            .collect();
        Ok(Self { layers, activation })
    }

    /// All weights and biases zero.
    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        Self::check_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .map(|w| Dense {
                weights: DMatrix::zeros(w[1], w[0]),
                bias: DVector::zeros(w[1]),
            })
            .collect();
        Ok(Self { layers, activation })
    }

    pub fn from_layers(layers: Vec<Dense>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weights.nrows() {
                return Err(Error::Shape(format!("layer {i}: bias length does not match weight rows")));
            }
            if i > 0 && l.weights.ncols() != layers[i - 1].weights.nrows() {
                return Err(Error::Shape(format!("layer {i}: input width does not match previous layer")));
            }
        }
        Ok(Self { layers, activation })
    }

    /// Two hidden ReLU layers of width `hidden` that compute `x -> A x_s` exactly,
    /// where `x_s` are the first `A.ncols()` inputs. The remaining inputs get
    /// zero weights. Needs `hidden >= 2 * A.ncols()`.
    pub fn from_linear_map(a: &DMatrix<f64>, n_in: usize, hidden: usize) -> Result<Self> {
        let n_x = a.ncols();
        let n_out = a.nrows();
        if n_x > n_in || 2 * n_x > hidden {
            return Err(Error::Shape(format!(
                "cannot embed a {n_out}x{n_x} map into {n_in} inputs and hidden width {hidden}"
            )));
        }
        // h1 = relu([x_s; -x_s]); h2 = h1; out = A (h2_+ - h2_-)
        let mut w1 = DMatrix::zeros(hidden, n_in);
        for i in 0..n_x {
            w1[(i, i)] = 1.0;
            w1[(n_x + i, i)] = -1.0;
        }
        let w2 = DMatrix::from_fn(hidden, hidden, |r, c| if r == c && r < 2 * n_x { 1.0 } else { 0.0 });
        let mut w3 = DMatrix::zeros(n_out, hidden);
        for r in 0..n_out {
            for c in 0..n_x {
                w3[(r, c)] = a[(r, c)];
                w3[(r, n_x + c)] = -a[(r, c)];
            }
        }
        Self::from_layers(
            vec![
                Dense {
                    weights: w1,
                    bias: DVector::zeros(hidden),
                },
                Dense {
                    weights: w2,
                    bias: DVector::zeros(hidden),
                },
                Dense {
                    weights: w3,
                    bias: DVector::zeros(n_out),
                },
            ],
            Activation::Relu,
        )
    }

    fn check_sizes(sizes: &[usize]) -> Result<()> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Shape(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// `(n_in, hidden..., n_out)`
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].weights.ncols()];
        s.extend(self.layers.iter().map(|l| l.weights.nrows()));
        s
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().map(|l| l.weights.nrows()).unwrap_or(0)
    }

    /// Total number of trainable scalars.
    pub fn n_weights(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Flat parameter order: per layer, weights row-major, then the bias.
    pub fn param(&self, idx: usize) -> f64 {
        let (l, w, pos) = self.locate(idx);
        let layer = &self.layers[l];
        if w {
            layer.weights[pos]
        } else {
            layer.bias[pos.0]
        }
    }

    pub fn set_param(&mut self, idx: usize, value: f64) {
        let (l, w, pos) = self.locate(idx);
        let layer = &mut self.layers[l];
        if w {
            layer.weights[pos] = value;
        } else {
            layer.bias[pos.0] = value;
        }
    }

    fn locate(&self, idx: usize) -> (usize, bool, (usize, usize)) {
        let mut idx = idx;
        for (l, layer) in self.layers.iter().enumerate() {
            let nw = layer.weights.len();
            if idx < nw {
                let cols = layer.weights.ncols();
                return (l, true, (idx / cols, idx % cols));
            }
            idx -= nw;
            if idx < layer.bias.len() {
                return (l, false, (idx, 0));
            }
            idx -= layer.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// All parameters in flat order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_weights());
        for l in &self.layers {
            for r in 0..l.weights.nrows() {
                for c in 0..l.weights.ncols() {
                    out.push(l.weights[(r, c)]);
                }
            }
            out.extend(l.bias.iter());
        }
        out
    }

    /// Inverse of [`MlpCore::to_flat`] for the given layer sizes.
    pub fn from_flat(sizes: &[usize], activation: Activation, flat: &[f64]) -> Result<Self> {
        let mut core = Self::zeros(sizes, activation)?;
        if flat.len() != core.n_weights() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                core.n_weights(),
                flat.len()
            )));
        }
        let mut it = flat.iter().copied();
        for l in &mut core.layers {
            for r in 0..l.weights.nrows() {
                for c in 0..l.weights.ncols() {
                    l.weights[(r, c)] = it.next().unwrap();
                }
            }
            for v in l.bias.iter_mut() {
                *v = it.next().unwrap();
            }
        }
        Ok(core)
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut a = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.weights * &a;
            add_bias(&mut z, &layer.bias);
            if i < last {
                z.apply(|v| *v = self.activation.apply(*v));
            }
            a = z;
        }
        a
    }

    pub fn forward_cached(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, ForwardCache) {
        let last = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<DMatrix<f64>> = Vec::with_capacity(last);
        for (i, layer) in self.layers.iter().enumerate() {
            let prev = if i == 0 { x } else { &post[i - 1] };
            let mut z = &layer.weights * prev;
            add_bias(&mut z, &layer.bias);
            if i < last {
                let act = z.map(|v| self.activation.apply(v));
                pre.push(z);
                post.push(act);
            } else {
                pre.push(z);
            }
        }
        let out = pre[last].clone();
        (
            out,
            ForwardCache {
                input: x.clone(),
                pre,
                post,
            },
        )
    }

    /// Accumulates parameter gradients for the upstream gradient `d_out` into
    /// `grads` and returns the gradient with respect to the input batch.
    pub fn backward(&self, cache: &ForwardCache, d_out: &DMatrix<f64>, grads: &mut Gradients) -> DMatrix<f64> {
        let last = self.layers.len() - 1;
        let mut delta = d_out.clone();
        for i in (0..=last).rev() {
            if i < last {
                let z = &cache.pre[i];
                let a = &cache.post[i];
                for ((d, zv), av) in delta.iter_mut().zip(z.iter()).zip(a.iter()) {
                    *d *= self.activation.derivative(*zv, *av);
                }
            }
            let prev = if i == 0 { &cache.input } else { &cache.post[i - 1] };
            grads.weights[i] += &delta * prev.transpose();
            for (r, gb) in grads.bias[i].iter_mut().enumerate() {
                *gb += delta.row(r).sum();
            }
            delta = self.layers[i].weights.transpose() * &delta;
        }
        delta
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }
}

fn add_bias(z: &mut DMatrix<f64>, b: &DVector<f64>) {
    for mut col in z.column_iter_mut() {
        col += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let core = MlpCore::new(&[3, 5, 4, 2], Activation::Tanh, &mut rng).unwrap();
        let flat = core.to_flat();
        assert_eq!(flat.len(), core.n_weights());
        for (i, v) in flat.iter().enumerate() {
            assert_eq!(core.param(i), *v);
        }
        let back = MlpCore::from_flat(&[3, 5, 4, 2], Activation::Tanh, &flat).unwrap();
        assert_eq!(back, core);
    }

    #[test]
    fn cached_forward_matches_plain_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let core = MlpCore::new(&[4, 32, 32, 3], Activation::Relu, &mut rng).unwrap();
        let x = DMatrix::from_fn(4, 9, |i, j| (i as f64 - 1.5) * 0.3 + j as f64 * 0.1);
        let (a, _) = core.forward_cached(&x);
        assert_eq!(a, core.forward(&x));
    }

    #[test]
    fn linear_map_embedding_is_exact() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 0.25, -2.0]);
        let core = MlpCore::from_linear_map(&a, 3, 32).unwrap();
        let x = DMatrix::from_row_slice(3, 3, &[1.0, -2.0, 0.5, 3.0, 0.0, -1.0, 7.0, 7.0, 7.0]);
        let y = core.forward(&x);
        let expect = &a * x.rows(0, 2);
        assert_eq!(y, expect);
        assert!(MlpCore::from_linear_map(&a, 3, 3).is_err());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let core = MlpCore::new(&[3, 6, 6, 2], Activation::Tanh, &mut rng).unwrap();
        let x = DMatrix::from_column_slice(3, 1, &[0.2, -0.4, 0.9]);
        let (_, cache) = core.forward_cached(&x);
        let upstream = DMatrix::from_column_slice(2, 1, &[1.0, -0.5]);
        let mut g = Gradients::zeros_like(&core);
        let dx = core.backward(&cache, &upstream, &mut g);
        let f = |x: &DMatrix<f64>| {
            let y = core.forward(x);
            y[(0, 0)] - 0.5 * y[(1, 0)]
        };
        for i in 0..3 {
            let eps = 1e-6;
            let mut xp = x.clone();
            xp[(i, 0)] += eps;
            let mut xm = x.clone();
            xm[(i, 0)] -= eps;
            let fd = (f(&xp) - f(&xm)) / (2.0 * eps);
            assert!((fd - dx[(i, 0)]).abs() < 1e-8, "{fd} vs {}", dx[(i, 0)]);
        }
    }
}
