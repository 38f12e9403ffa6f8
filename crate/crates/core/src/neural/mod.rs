//! Dense networks with hand-written reverse-mode gradients, the Gaussian
//! encoder head, and Adam.

mod adam;
mod latent;
mod mlp;

pub use adam::{Adam, AdamConfig};
pub use latent::{
    draw_eps, sample_latent, sample_with, EncoderCache, GaussianEncoder, GaussianLatent,
    LatentSample, SIGMA_FLOOR,
};
pub use mlp::{
    sigmoid, softplus, Activation, Dense, LayerSpec, Mlp, MlpCache, MlpGrads, NetworkSpec,
    LEAKY_SLOPE,
};

use crate::error::Result;

/// A network together with its optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainable {
    pub net: Mlp,
    pub adam: Adam,
}

impl Trainable {
    pub fn new(net: Mlp, config: AdamConfig) -> Self {
        let adam = Adam::new(config, net.param_count());
        Self { net, adam }
    }

    pub fn step(&mut self, grads: &MlpGrads, label: &str) -> Result<()> {
        adam_step(&mut self.net, &mut self.adam, grads, label)
    }
}

/// One Adam update of every parameter of `net`.
pub fn adam_step(net: &mut Mlp, adam: &mut Adam, grads: &MlpGrads, label: &str) -> Result<()> {
    let mut bufs: Vec<&mut [f64]> = Vec::new();
    for l in net.layers_mut() {
        bufs.push(l.weight.as_slice_mut().expect("standard layout"));
        bufs.push(l.bias.as_slice_mut().expect("standard layout"));
    }
    adam.step(bufs, grads.slices(), label)
}
