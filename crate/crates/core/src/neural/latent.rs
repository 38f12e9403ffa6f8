//! Stochastic Gaussian encoder head and reparameterized sampling.

use ndarray::{s, Array2, Zip};
use rand::Rng as _;
use rand_distr::StandardNormal;

use super::mlp::{sigmoid, softplus, Mlp, MlpCache, MlpGrads, NetworkSpec};
use crate::constellation::SymbolBlock;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Floor added to the softplus so that sigma stays strictly positive.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Per-sample mean and standard deviation of `k` complex symbols, stored as
/// `2k` interleaved reals per row (`2i` real part, `2i+1` imaginary part).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianLatent {
    pub mu: Array2<f64>,
    pub sigma: Array2<f64>,
}

impl GaussianLatent {
    /// Latent from explicit means and positive standard deviations.
    pub fn new(mu: Array2<f64>, sigma: Array2<f64>) -> Result<Self> {
        if mu.shape() != sigma.shape() || mu.ncols() % 2 != 0 {
            return Err(Error::ShapeMismatch {
                context: "gaussian latent",
                expected: mu.shape().to_vec(),
                actual: sigma.shape().to_vec(),
            });
        }
        if let Some(&bad) = sigma.iter().find(|&&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidSigma(bad));
        }
        Ok(Self { mu, sigma })
    }

    pub fn batch(&self) -> usize {
        self.mu.nrows()
    }

    /// Number of complex symbols per sample.
    pub fn k(&self) -> usize {
        self.mu.ncols() / 2
    }

    /// Row `i` as a block of complex means.
    pub fn mean_block(&self, i: usize) -> Result<SymbolBlock> {
        SymbolBlock::from_interleaved(self.mu.row(i).as_slice().expect("standard layout"))
    }
}

/// Reparameterized draw `z = mu + sigma * eps` together with `eps`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub z: Array2<f64>,
    pub eps: Array2<f64>,
}

impl LatentSample {
    pub fn block(&self, i: usize) -> Result<SymbolBlock> {
        SymbolBlock::from_interleaved(self.z.row(i).as_slice().expect("standard layout"))
    }

    pub fn blocks(&self) -> Result<Vec<SymbolBlock>> {
        (0..self.z.nrows()).map(|i| self.block(i)).collect()
    }
}

/// Standard-normal noise, row-major, for a batch of latents.
pub fn draw_eps(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

pub fn sample_with(lat: &GaussianLatent, eps: &Array2<f64>) -> Result<LatentSample> {
    if eps.shape() != lat.mu.shape() {
        return Err(Error::ShapeMismatch {
            context: "reparameterization noise",
            expected: lat.mu.shape().to_vec(),
            actual: eps.shape().to_vec(),
        });
    }
    let mut z = lat.mu.clone();
    Zip::from(&mut z)
        .and(&lat.sigma)
        .and(eps)
        .for_each(|z, &s, &e| *z += s * e);
    Ok(LatentSample {
        z,
        eps: eps.clone(),
    })
}

pub fn sample_latent(lat: &GaussianLatent, rng: &mut Rng) -> LatentSample {
    let eps = draw_eps(lat.mu.nrows(), lat.mu.ncols(), rng);
    sample_with(lat, &eps).expect("eps drawn with matching shape")
}

/// Maps `x` to a Gaussian over `k` complex symbols: the network emits `4k`
/// values, the first `2k` are means and the last `2k` feed the softplus that
/// produces the standard deviations.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianEncoder {
    pub net: Mlp,
    k: usize,
}

pub struct EncoderCache {
    net: MlpCache,
    raw: Array2<f64>,
}

impl EncoderCache {
    pub fn kink_signature(&self, enc: &GaussianEncoder) -> Vec<bool> {
        self.net.kink_signature(&enc.net)
    }
}

impl GaussianEncoder {
    pub fn new(input_dim: usize, hidden: &[usize], k: usize, seed: u64) -> Result<Self> {
        Self::from_net(Mlp::new(NetworkSpec::mlp(input_dim, hidden, 4 * k, seed))?)
    }

    pub fn from_net(net: Mlp) -> Result<Self> {
        let out = net.output_dim();
        if out % 4 != 0 || out == 0 {
            return Err(Error::Config(format!(
                "encoder output width {out} is not 4k for any k >= 1"
            )));
        }
        Ok(Self { k: out / 4, net })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn encode(&self, x: &Array2<f64>) -> Result<(GaussianLatent, EncoderCache)> {
        let (out, cache) = self.net.forward(x)?;
        let w = 2 * self.k;
        let mu = out.slice(s![.., ..w]).to_owned();
        let raw = out.slice(s![.., w..]).to_owned();
        let sigma = raw.mapv(|v| softplus(v) + SIGMA_FLOOR);
        Ok((GaussianLatent { mu, sigma }, EncoderCache { net: cache, raw }))
    }

    /// Parameter gradients given `dL/dmu` and `dL/dsigma`.
    pub fn backward(
        &self,
        cache: &EncoderCache,
        grad_mu: &Array2<f64>,
        grad_sigma: &Array2<f64>,
    ) -> Result<MlpGrads> {
        let w = 2 * self.k;
        let mut g = Array2::zeros((grad_mu.nrows(), 2 * w));
        g.slice_mut(s![.., ..w]).assign(grad_mu);
        let mut gs = g.slice_mut(s![.., w..]);
        Zip::from(&mut gs)
            .and(grad_sigma)
            .and(&cache.raw)
            .for_each(|o, &gsig, &r| *o = gsig * sigmoid(r));
        Ok(self.net.backward(&cache.net, &g)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    #[test]
    fn zero_head_gives_ln2_sigma() {
        let enc = GaussianEncoder::from_net(Mlp::zeros(NetworkSpec::mlp(5, &[7], 8, 0)).unwrap()).unwrap();
        let (lat, _) = enc.encode(&Array2::ones((3, 5))).unwrap();
        assert!(lat.mu.iter().all(|&m| m == 0.0));
        for &s in &lat.sigma {
            assert!((s - (std::f64::consts::LN_2 + 1e-6)).abs() < 1e-15);
        }
        assert_eq!(enc.k(), 2);
    }

    #[test]
    fn sigma_is_positive_for_extreme_parameters() {
        let mut enc = GaussianEncoder::new(3, &[4], 2, 1).unwrap();
        let p: Vec<f64> = enc.net.params().iter().map(|v| v * 1e3).collect();
        enc.net.set_params(&p).unwrap();
        let x = ndarray::array![[5.0, -5.0, 3.0], [-9.0, 2.0, 8.0]];
        let (lat, _) = enc.encode(&x).unwrap();
        assert!(lat.sigma.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn zero_sigma_limit_returns_mean() {
        let mu = ndarray::array![[0.3, -1.2, 4.0, 0.5]];
        let lat = GaussianLatent::new(mu.clone(), Array2::from_elem((1, 4), 1e-300)).unwrap();
        let s = sample_latent(&lat, &mut stream(1, Purpose::PretrainLatent));
        assert_eq!(s.z, mu);
        assert_eq!(s.block(0).unwrap().symbols()[1], num_complex::Complex64::new(4.0, 0.5));
    }

    #[test]
    fn same_seed_same_sample() {
        let lat = GaussianLatent::new(Array2::zeros((2, 6)), Array2::ones((2, 6))).unwrap();
        let a = sample_latent(&lat, &mut stream(4, Purpose::PretrainLatent));
        let b = sample_latent(&lat, &mut stream(4, Purpose::PretrainLatent));
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_sigma_rejected() {
        assert!(GaussianLatent::new(Array2::zeros((1, 2)), Array2::zeros((1, 2))).is_err());
        assert!(GaussianLatent::new(Array2::zeros((1, 2)), Array2::ones((1, 4))).is_err());
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let mut enc = GaussianEncoder::new(3, &[6], 2, 8).unwrap();
        let x = ndarray::array![[0.2, -0.7, 1.1], [0.9, 0.4, -0.3]];
        let eps = draw_eps(2, 4, &mut stream(2, Purpose::PretrainLatent));
        let w = draw_eps(2, 4, &mut stream(3, Purpose::PretrainLatent));
        // L = sum(w * z) with z = mu + sigma * eps
        let loss = |e: &GaussianEncoder| {
            let (lat, _) = e.encode(&x).unwrap();
            (&sample_with(&lat, &eps).unwrap().z * &w).sum()
        };
        let (_, cache) = enc.encode(&x).unwrap();
        let g_sigma = &w * &eps;
        let grads = enc.backward(&cache, &w, &g_sigma).unwrap().flatten();
        let base = enc.net.params();
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += 1e-5;
            enc.net.set_params(&p).unwrap();
            let lp = loss(&enc);
            p[i] -= 2e-5;
            enc.net.set_params(&p).unwrap();
            let lm = loss(&enc);
            enc.net.set_params(&base).unwrap();
            let fd = (lp - lm) / 2e-5;
            let sig_a = enc.encode(&x).unwrap().1.kink_signature(&enc);
            let denom = fd.abs().max(grads[i].abs()).max(1e-8);
            if (fd - grads[i]).abs() / denom >= 1e-4 {
                // only acceptable when the perturbation crossed a ReLU kink
                let mut p = base.clone();
                p[i] += 1e-5;
                enc.net.set_params(&p).unwrap();
                let sig_b = enc.encode(&x).unwrap().1.kink_signature(&enc);
                enc.net.set_params(&base).unwrap();
                assert_ne!(sig_a, sig_b, "param {i}: {fd} vs {}", grads[i]);
            }
        }
    }
}
