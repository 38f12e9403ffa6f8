//! Transmit-side power normalization, AWGN / block-Rayleigh channel,
//! equalization with full CSI, rescaling and hard detection.

use num_complex::Complex64;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::constellation::{quantize_block, ComplexSymbol, Constellation, SymbolBlock};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Below this magnitude the equalizer refuses to divide by `h`.
pub const MIN_CHANNEL_GAIN: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Awgn,
    Rayleigh,
}

impl ChannelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ChannelKind::Awgn => "awgn",
            ChannelKind::Rayleigh => "rayleigh",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub kind: ChannelKind,
    pub snr_db: f64,
    pub p_target: f64,
}

impl ChannelConfig {
    pub fn new(kind: ChannelKind, snr_db: f64, p_target: f64) -> Result<Self> {
        if !(p_target.is_finite() && p_target > 0.0) {
            return Err(Error::Config(format!("p_target must be positive, got {p_target}")));
        }
        if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
            return Err(Error::Config(format!("snr must be a number or +inf, got {snr_db}")));
        }
        Ok(Self {
            kind,
            snr_db,
            p_target,
        })
    }

    pub fn noise_variance(&self) -> f64 {
        snr_to_noise_variance(self.snr_db, self.p_target)
    }

    /// Same link with the noise switched off. Used by noiseless debug paths.
    pub fn noiseless(&self) -> Self {
        Self {
            snr_db: f64::INFINITY,
            ..*self
        }
    }
}

/// `sigma_n^2 = p_target * 10^(-snr_db / 10)`. An infinite SNR yields zero.
pub fn snr_to_noise_variance(snr_db: f64, p_target: f64) -> f64 {
    p_target * 10f64.powf(-snr_db / 10.0)
}

/// Power-normalized block plus the pre-normalization power the receiver
/// is told about.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub symbols: SymbolBlock,
    pub p_zbar: f64,
}

pub fn normalize_power(z_bar: &SymbolBlock, p_target: f64) -> Result<Normalized> {
    let p_zbar = z_bar.power();
    if p_zbar == 0.0 {
        return Err(Error::ZeroPower);
    }
    if !p_zbar.is_finite() {
        return Err(Error::NonFinite("block power"));
    }
    let scale = (p_target / p_zbar).sqrt();
    let symbols = z_bar.symbols().iter().map(|&z| z * scale).collect();
    Ok(Normalized {
        symbols: SymbolBlock::new(symbols)?,
        p_zbar,
    })
}

/// Random quantities of one block transmission, drawn before the block is
/// known so that a forward pass can be replayed exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelDraw {
    pub h: ComplexSymbol,
    /// Already scaled to the configured noise variance.
    pub noise: Vec<ComplexSymbol>,
}

impl ChannelDraw {
    /// Rayleigh draws `h` first, then `k` noise symbols (real then imaginary
    /// part). AWGN skips the `h` draw. The noise normals are consumed even
    /// when the variance is zero so stream positions do not depend on SNR.
    pub fn sample(cfg: &ChannelConfig, k: usize, rng: &mut Rng) -> Self {
        let h = match cfg.kind {
            ChannelKind::Awgn => Complex64::new(1.0, 0.0),
            ChannelKind::Rayleigh => {
                let s = std::f64::consts::FRAC_1_SQRT_2;
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                Complex64::new(re * s, im * s)
            }
        };
        let sd = (cfg.noise_variance() / 2.0).sqrt();
        let noise = (0..k)
            .map(|_| {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                Complex64::new(re * sd, im * sd)
            })
            .collect();
        Self { h, noise }
    }
}

/// What the receiver knows about one transmitted block.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization {
    pub h: ComplexSymbol,
    pub noise: SymbolBlock,
    pub p_zbar: f64,
}

/// `z_out = h * z_in + n` with the given draw.
pub fn transmit_with(z_in: &Normalized, draw: &ChannelDraw) -> Result<(SymbolBlock, ChannelRealization)> {
    let k = z_in.symbols.len();
    if draw.noise.len() != k {
        return Err(Error::ShapeMismatch {
            context: "channel noise",
            expected: vec![k],
            actual: vec![draw.noise.len()],
        });
    }
    let out = z_in
        .symbols
        .symbols()
        .iter()
        .zip(&draw.noise)
        .map(|(&z, &n)| draw.h * z + n)
        .collect();
    Ok((
        SymbolBlock::new(out)?,
        ChannelRealization {
            h: draw.h,
            noise: SymbolBlock::from_vec_unchecked(draw.noise.clone()),
            p_zbar: z_in.p_zbar,
        },
    ))
}

/// One block through the channel: one `h` per block, i.i.d. circular noise.
pub fn transmit(
    z_in: &Normalized,
    cfg: &ChannelConfig,
    rng: &mut Rng,
) -> Result<(SymbolBlock, ChannelRealization)> {
    let draw = ChannelDraw::sample(cfg, z_in.symbols.len(), rng);
    transmit_with(z_in, &draw)
}

/// Equalize with `h* / |h|^2`, undo the power normalization, and detect
/// against `constellation` when one is given (analog mode otherwise).
pub fn receive(
    z_out: &SymbolBlock,
    real: &ChannelRealization,
    p_target: f64,
    constellation: Option<&Constellation>,
) -> Result<SymbolBlock> {
    let gain = real.h.norm_sqr();
    if real.h.norm() < MIN_CHANNEL_GAIN {
        return Err(Error::DegenerateChannel(real.h.norm()));
    }
    let eq = real.h.conj() / gain;
    let scale = (real.p_zbar / p_target).sqrt();
    let scaled: Vec<_> = z_out
        .symbols()
        .iter()
        .map(|&z| (eq * z) * scale)
        .collect();
    let z_tilde = SymbolBlock::new(scaled)?;
    Ok(match constellation {
        Some(c) => quantize_block(&z_tilde, c),
        None => z_tilde,
    })
}

/// Analog path: normalize, transmit, equalize and rescale, no detection.
pub fn analog_pass(
    z: &SymbolBlock,
    cfg: &ChannelConfig,
    rng: &mut Rng,
) -> Result<(SymbolBlock, ChannelRealization)> {
    let draw = ChannelDraw::sample(cfg, z.len(), rng);
    analog_pass_with(z, cfg.p_target, &draw)
}

pub fn analog_pass_with(
    z: &SymbolBlock,
    p_target: f64,
    draw: &ChannelDraw,
) -> Result<(SymbolBlock, ChannelRealization)> {
    let normalized = normalize_power(z, p_target)?;
    let (out, real) = transmit_with(&normalized, draw)?;
    Ok((receive(&out, &real, p_target, None)?, real))
}

/// Vector-Jacobian product of the analog path with `h` and `n` held fixed.
///
/// Algebraically `z_hat = z + s(z) * m` with `s = sqrt(P_z / p_target)` and
/// `m = (h* / |h|^2) n`, so
/// `dL/dz = g + (g . m) * z / (k * p_target * s)` over interleaved reals.
pub fn analog_vjp(
    grad_out: &[f64],
    z: &SymbolBlock,
    real: &ChannelRealization,
    p_target: f64,
) -> Vec<f64> {
    let k = z.len() as f64;
    let s = (real.p_zbar / p_target).sqrt();
    let eq = real.h.conj() / real.h.norm_sqr();
    let gm: f64 = real
        .noise
        .symbols()
        .iter()
        .zip(grad_out.chunks_exact(2))
        .map(|(&n, g)| {
            let m = eq * n;
            g[0] * m.re + g[1] * m.im
        })
        .sum();
    let coef = gm / (k * p_target * s);
    z.symbols()
        .iter()
        .zip(grad_out.chunks_exact(2))
        .flat_map(|(&zi, g)| [g[0] + coef * zi.re, g[1] + coef * zi.im])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constellation::build_qam;
    use crate::rng::{stream, Purpose};
    use rand::SeedableRng;

    fn c(a: f64, b: f64) -> Complex64 {
        Complex64::new(a, b)
    }

    fn rng(seed: u64) -> Rng {
        Rng::seed_from_u64(seed)
    }

    #[test]
    fn noise_variance_examples() {
        assert!((snr_to_noise_variance(10.0, 1.0) - 0.1).abs() < 1e-15);
        assert_eq!(snr_to_noise_variance(0.0, 1.0), 1.0);
        assert!((snr_to_noise_variance(-10.0, 1.0) - 10.0).abs() < 1e-13);
        assert_eq!(snr_to_noise_variance(f64::INFINITY, 1.0), 0.0);
    }

    #[test]
    fn normalize_examples() {
        let b = SymbolBlock::new(vec![c(1., 1.), c(1., -1.)]).unwrap();
        let n = normalize_power(&b, 1.0).unwrap();
        assert_eq!(n.p_zbar, 2.0);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        for (got, want) in n.symbols.symbols().iter().zip([c(h, h), c(h, -h)]) {
            assert!((got - want).norm() < 1e-15);
        }
        let one = normalize_power(&SymbolBlock::new(vec![c(2., 0.)]).unwrap(), 1.0).unwrap();
        assert_eq!(one.p_zbar, 4.0);
        assert_eq!(one.symbols.symbols()[0], c(1.0, 0.0));
        let unit = SymbolBlock::new(vec![c(1., 0.), c(0., -1.)]).unwrap();
        assert_eq!(normalize_power(&unit, 1.0).unwrap().symbols, unit);
    }

    #[test]
    fn zero_block_cannot_be_normalized() {
        let z = SymbolBlock::new(vec![c(0., 0.); 3]).unwrap();
        assert!(matches!(normalize_power(&z, 1.0), Err(Error::ZeroPower)));
    }

    #[test]
    fn noiseless_channels_are_exact() {
        let b = SymbolBlock::new(vec![c(0.3, -0.2), c(-1.0, 0.5)]).unwrap();
        let n = normalize_power(&b, 1.0).unwrap();
        let awgn = ChannelConfig::new(ChannelKind::Awgn, f64::INFINITY, 1.0).unwrap();
        let (out, real) = transmit(&n, &awgn, &mut rng(1)).unwrap();
        assert_eq!(out, n.symbols);
        assert_eq!(real.h, c(1.0, 0.0));

        let ray = ChannelConfig::new(ChannelKind::Rayleigh, f64::INFINITY, 1.0).unwrap();
        let (out, real) = transmit(&n, &ray, &mut rng(2)).unwrap();
        for (o, z) in out.symbols().iter().zip(n.symbols.symbols()) {
            assert_eq!(*o, real.h * z);
        }
    }

    #[test]
    fn fixed_h_with_detection_recovers_grid_block() {
        let q = build_qam(16, 3.0).unwrap();
        let z_bar = SymbolBlock::new(vec![q.points()[3], q.points()[9], q.points()[14]]).unwrap();
        let n = normalize_power(&z_bar, 1.0).unwrap();
        let draw = ChannelDraw {
            h: c(0.6, 0.8),
            noise: vec![c(0.0, 0.0); 3],
        };
        let (out, real) = transmit_with(&n, &draw).unwrap();
        assert_eq!(receive(&out, &real, 1.0, Some(&q)).unwrap(), z_bar);
    }

    #[test]
    fn analog_noiseless_is_identity() {
        let z = SymbolBlock::new(vec![c(0.7, -2.0), c(0.1, 0.4), c(-3.0, 1.0)]).unwrap();
        let cfg = ChannelConfig::new(ChannelKind::Awgn, f64::INFINITY, 1.0).unwrap();
        let (zhat, _) = analog_pass(&z, &cfg, &mut rng(5)).unwrap();
        for (a, b) in zhat.symbols().iter().zip(z.symbols()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn degenerate_channel_is_rejected() {
        let z = SymbolBlock::new(vec![c(1.0, 0.0)]).unwrap();
        let real = ChannelRealization {
            h: c(1e-13, 0.0),
            noise: z.clone(),
            p_zbar: 1.0,
        };
        assert!(matches!(
            receive(&z, &real, 1.0, None),
            Err(Error::DegenerateChannel(_))
        ));
    }

    #[test]
    fn seeded_transmission_is_deterministic() {
        let z = SymbolBlock::new(vec![c(0.5, 0.5); 8]).unwrap();
        let n = normalize_power(&z, 1.0).unwrap();
        let cfg = ChannelConfig::new(ChannelKind::Rayleigh, 3.0, 1.0).unwrap();
        let a = transmit(&n, &cfg, &mut stream(11, Purpose::Evaluation)).unwrap();
        let b = transmit(&n, &cfg, &mut stream(11, Purpose::Evaluation)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn analog_vjp_matches_finite_differences() {
        let cfg = ChannelConfig::new(ChannelKind::Rayleigh, 2.0, 1.3).unwrap();
        let z = SymbolBlock::new(vec![c(0.4, -1.1), c(2.0, 0.3), c(-0.6, 0.9)]).unwrap();
        let draw = ChannelDraw::sample(&cfg, 3, &mut rng(9));
        let weights = [0.3, -1.2, 0.8, 0.5, -0.4, 1.7];
        let objective = |v: &[f64]| -> f64 {
            let zb = SymbolBlock::from_interleaved(v).unwrap();
            let (out, _) = analog_pass_with(&zb, cfg.p_target, &draw).unwrap();
            out.to_interleaved().iter().zip(weights).map(|(a, w)| a * w).sum()
        };
        let (_, real) = analog_pass_with(&z, cfg.p_target, &draw).unwrap();
        let g = analog_vjp(&weights, &z, &real, cfg.p_target);
        let x = z.to_interleaved();
        for i in 0..x.len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (objective(&p) - objective(&m)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-7 * (1.0 + g[i].abs()), "i={i}: {fd} vs {}", g[i]);
        }
    }
}
