use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Negative slope of the leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    LeakyRelu,
    Tanh,
    Softplus,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::LeakyRelu => 1,
            Activation::Tanh => 2,
            Activation::Softplus => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Activation::Identity,
            1 => Activation::LeakyRelu,
            2 => Activation::Tanh,
            3 => Activation::Softplus,
            _ => return None,
        })
    }

    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::LeakyRelu => {
                if v > 0.0 {
                    v
                } else {
                    LEAKY_SLOPE * v
                }
            }
            Activation::Tanh => v.tanh(),
            Activation::Softplus => softplus(v),
        }
    }

    /// Derivative given the pre-activation `v`.
    #[inline]
    fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::LeakyRelu => {
                if v > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Tanh => {
                let t = v.tanh();
                1.0 - t * t
            }
            Activation::Softplus => sigmoid(v),
        }
    }
}

#[inline]
pub fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub out_dim: usize,
    pub activation: Activation,
}

/// Architecture of a dense network plus the seed of its initialization.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
    pub seed: u64,
}

impl NetworkSpec {
    /// Hidden layers with leaky ReLU followed by a linear output layer.
    pub fn mlp(input_dim: usize, hidden: &[usize], output_dim: usize, seed: u64) -> Self {
        let mut layers: Vec<_> = hidden
            .iter()
            .map(|&out_dim| LayerSpec {
                out_dim,
                activation: Activation::LeakyRelu,
            })
            .collect();
        layers.push(LayerSpec {
            out_dim: output_dim,
            activation: Activation::Identity,
        });
        Self {
            input_dim,
            layers,
            seed,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, |l| l.out_dim)
    }

    pub fn param_count(&self) -> usize {
        let mut fan_in = self.input_dim;
        let mut n = 0;
        for l in &self.layers {
            n += fan_in * l.out_dim + l.out_dim;
            fan_in = l.out_dim;
        }
        n
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.layers.is_empty() || self.layers.iter().any(|l| l.out_dim == 0) {
            return Err(Error::Config(format!("degenerate network spec {self:?}")));
        }
        Ok(())
    }
}

/// Fully connected layer, `out = act(x W + b)` with `W` stored `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: NetworkSpec,
    layers: Vec<Dense>,
}

/// Per-layer inputs and pre-activations recorded by [`Mlp::forward`].
#[derive(Clone, Debug)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl MlpCache {
    /// Sign pattern of every leaky-ReLU pre-activation. Two evaluations with
    /// equal signatures lie in the same linear region of the network.
    pub fn kink_signature(&self, net: &Mlp) -> Vec<bool> {
        net.layers
            .iter()
            .zip(&self.pre)
            .filter(|(l, _)| l.activation == Activation::LeakyRelu)
            .flat_map(|(_, p)| p.iter().map(|&v| v > 0.0).collect::<Vec<_>>())
            .collect()
    }
}

/// Parameter gradients laid out like the network's layers.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weight.raw_dim()), Array1::zeros(l.bias.len())))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *w += ow;
            *b += ob;
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn slices(&self) -> impl Iterator<Item = &[f64]> + Clone {
        self.layers.iter().flat_map(|(w, b)| {
            [
                w.as_slice().expect("standard layout"),
                b.as_slice().expect("standard layout"),
            ]
        })
    }
}

impl Mlp {
    /// Initializes weights from `spec.seed`: normal with variance
    /// `2 / fan_in` ahead of a leaky ReLU and `1 / fan_in` otherwise; zero biases.
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::seed_from_u64(spec.seed);
        let mut fan_in = spec.input_dim;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for l in &spec.layers {
            let gain = if l.activation == Activation::LeakyRelu { 2.0 } else { 1.0 };
            let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("valid std");
            let weight = Array2::from_shape_fn((fan_in, l.out_dim), |_| normal.sample(&mut rng));
            layers.push(Dense {
                weight,
                bias: Array1::zeros(l.out_dim),
                activation: l.activation,
            });
            fan_in = l.out_dim;
        }
        Ok(Self { spec, layers })
    }

    /// Network with every parameter set to zero.
    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        let mut net = Self::new(spec)?;
        net.visit_params_mut(|p| p.fill(0.0));
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    /// Row-major weights then bias, layer by layer.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::ShapeMismatch {
                context: "flat parameters",
                expected: vec![self.param_count()],
                actual: vec![flat.len()],
            });
        }
        let mut off = 0;
        self.visit_params_mut(|p| {
            p.copy_from_slice(&flat[off..off + p.len()]);
            off += p.len();
        });
        Ok(())
    }

    /// Visits weight and bias buffers in the [`Mlp::params`] order.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        for l in &mut self.layers {
            f(l.weight.as_slice_mut().expect("standard layout"));
            f(l.bias.as_slice_mut().expect("standard layout"));
        }
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.spec.input_dim {
            return Err(Error::ShapeMismatch {
                context: "network input",
                expected: vec![x.nrows(), self.spec.input_dim],
                actual: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Batch forward pass, one sample per row.
    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for l in &self.layers {
            let mut z = h.dot(&l.weight);
            z += &l.bias;
            let out = z.mapv(|v| l.activation.apply(v));
            inputs.push(h);
            pre.push(z);
            h = out;
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network output"));
        }
        Ok((h, MlpCache { inputs, pre }))
    }

    /// Forward pass without keeping the cache.
    pub fn predict(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.forward(x).map(|(y, _)| y)
    }

    fn check_cache(&self, cache: &MlpCache, grad_out: &Array2<f64>) -> Result<()> {
        let rows = cache.inputs.first().map_or(0, |i| i.nrows());
        if cache.pre.len() != self.layers.len() {
            return Err(Error::ShapeMismatch {
                context: "backward cache",
                expected: vec![self.layers.len()],
                actual: vec![cache.pre.len()],
            });
        }
        if grad_out.nrows() != rows || grad_out.ncols() != self.output_dim() {
            return Err(Error::ShapeMismatch {
                context: "upstream gradient",
                expected: vec![rows, self.output_dim()],
                actual: grad_out.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Reverse pass: parameter gradients and the gradient w.r.t. the input.
    pub fn backward(&self, cache: &MlpCache, grad_out: &Array2<f64>) -> Result<(MlpGrads, Array2<f64>)> {
        self.check_cache(cache, grad_out)?;
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.to_owned();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let pre = &cache.pre[i];
            ndarray::Zip::from(&mut g)
                .and(pre)
                .for_each(|g, &v| *g *= l.activation.derivative(v));
            let gw = cache.inputs[i].t().dot(&g);
            let gb = g.sum_axis(Axis(0));
            grads.push((gw, gb));
            g = g.dot(&l.weight.t());
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, g))
    }

    /// Reverse pass that only propagates to the input; parameters are
    /// treated as constants.
    pub fn backward_input(&self, cache: &MlpCache, grad_out: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_cache(cache, grad_out)?;
        let mut g = grad_out.to_owned();
        for (i, l) in self.layers.iter().enumerate().rev() {
            ndarray::Zip::from(&mut g)
                .and(&cache.pre[i])
                .for_each(|g, &v| *g *= l.activation.derivative(v));
            g = g.dot(&l.weight.t());
        }
        Ok(g)
    }
}
