//! Monte Carlo VIB loss of the full link
//! `x -> encoder -> sample -> channel path -> reshaper -> frozen agent`,
//! with exact reverse-mode gradients for the encoder and reshaper.

use std::ops::Range;

use ndarray::Array2;

use super::{kl_diag_gauss_to_std, neg_log_gauss, LossBreakdown, MCConfig, VibWeights};
use crate::channel::{
    analog_pass_with, analog_vjp, normalize_power, receive, transmit_with, ChannelConfig,
    ChannelDraw, ChannelRealization,
};
use crate::constellation::{
    quantization_loss, quantization_loss_grad_z, quantize_block, quantize_indices, Constellation,
    SymbolBlock,
};
use crate::error::{Error, Result};
use crate::neural::{draw_eps, sample_with, GaussianEncoder, Mlp, MlpGrads};
use crate::rng::Rng;
use crate::task_env::FrozenAgent;

/// How encoder symbols reach the reshaper.
#[derive(Clone, Debug, PartialEq)]
pub enum ChannelPath {
    /// Continuous symbols, no constellation (pre-training).
    Analog,
    /// Quantize to the grid, transmit, detect. With `quantize == false` the
    /// symbols travel the analog path but the quantization loss against
    /// `constellation` is still reported; a debugging aid.
    Modulated {
        constellation: Constellation,
        quantize: bool,
    },
}

impl ChannelPath {
    pub fn constellation(&self) -> Option<&Constellation> {
        match self {
            ChannelPath::Analog => None,
            ChannelPath::Modulated { constellation, .. } => Some(constellation),
        }
    }
}

/// What the first loss term measures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistortionKind {
    /// Negative log-likelihood of the true action under the frozen agent.
    Task,
    /// Negative log-likelihood of the input under `N(y, sigma_c^2 I)`.
    Reconstruction,
}

/// One mini-batch, a row per sample.
#[derive(Clone, Copy, Debug)]
pub struct VibBatch<'a> {
    pub x: &'a Array2<f64>,
    pub a: &'a Array2<f64>,
}

/// Latent noise and channel draws of one Monte Carlo sample set.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleDraw {
    pub eps: Array2<f64>,
    pub channel: Vec<ChannelDraw>,
}

/// All random inputs of one loss evaluation, drawn up front so the
/// evaluation is a deterministic function that can be replayed.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkDraws {
    pub sets: Vec<SampleDraw>,
}

impl LinkDraws {
    pub fn sample(
        n_sets: usize,
        omega: usize,
        k: usize,
        channel: &ChannelConfig,
        latent_rng: &mut Rng,
        channel_rng: &mut Rng,
    ) -> Self {
        let sets = (0..n_sets)
            .map(|_| SampleDraw {
                eps: draw_eps(omega, 2 * k, latent_rng),
                channel: (0..omega)
                    .map(|_| ChannelDraw::sample(channel, k, channel_rng))
                    .collect(),
            })
            .collect();
        Self { sets }
    }

    /// Zero latent noise: the encoder mean is transmitted.
    pub fn with_zero_eps(mut self) -> Self {
        for s in &mut self.sets {
            s.eps.fill(0.0);
        }
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinkGrads {
    pub encoder: MlpGrads,
    pub reshaper: MlpGrads,
}

#[derive(Clone, Debug)]
pub struct LinkOutput {
    pub loss: LossBreakdown,
    pub grads: Option<LinkGrads>,
    /// Reshaper output of the first sample set.
    pub y: Array2<f64>,
    /// Agent output of the first sample set.
    pub a_hat: Array2<f64>,
    /// Channel realizations of the first sample set, one per row.
    pub channel: Vec<ChannelRealization>,
    /// Detected symbols differing from the transmitted grid symbols, over
    /// the task sample sets (0 on the analog path).
    pub symbol_errors: usize,
    pub symbols_sent: usize,
    /// Leaky-ReLU sign patterns and quantizer decisions. Equal signatures
    /// mean two evaluations share the same differentiable piece.
    pub signature: Vec<u64>,
}

/// The composed link and its objective.
#[derive(Clone, Copy, Debug)]
pub struct Link<'a> {
    pub encoder: &'a GaussianEncoder,
    pub reshaper: &'a Mlp,
    pub agent: &'a FrozenAgent,
    pub path: &'a ChannelPath,
    pub p_target: f64,
    pub weights: VibWeights,
    pub mc: MCConfig,
    pub sigma_c: f64,
    pub distortion: DistortionKind,
}

struct PathOut {
    z_hat: Vec<f64>,
    realization: ChannelRealization,
    /// Input of the power normalizer (quantized block when detecting).
    tx_block: SymbolBlock,
    errors: usize,
    decisions: Vec<usize>,
}

impl<'a> Link<'a> {
    /// Checks that the pieces fit together: reshaper input `2k`, reshaper
    /// output equal to the agent's input width.
    pub fn validate(&self) -> Result<()> {
        let k = self.encoder.k();
        if self.reshaper.input_dim() != 2 * k {
            return Err(Error::ShapeMismatch {
                context: "reshaper input",
                expected: vec![2 * k],
                actual: vec![self.reshaper.input_dim()],
            });
        }
        if self.reshaper.output_dim() != self.agent.input_dim() {
            return Err(Error::ShapeMismatch {
                context: "reshaper output vs agent input",
                expected: vec![self.agent.input_dim()],
                actual: vec![self.reshaper.output_dim()],
            });
        }
        if self.encoder.net.input_dim() != self.agent.input_dim() {
            return Err(Error::ShapeMismatch {
                context: "encoder input vs agent input",
                expected: vec![self.agent.input_dim()],
                actual: vec![self.encoder.net.input_dim()],
            });
        }
        self.mc.validate()
    }

    fn task_sets(&self) -> Range<usize> {
        0..self.mc.j2
    }

    fn align_sets(&self) -> Range<usize> {
        if self.mc.resample_alignment {
            self.mc.j2..self.mc.j2 + self.mc.j1
        } else {
            0..self.mc.j1
        }
    }

    pub fn draw(&self, channel: &ChannelConfig, omega: usize, latent_rng: &mut Rng, channel_rng: &mut Rng) -> LinkDraws {
        LinkDraws::sample(
            self.mc.sample_sets(),
            omega,
            self.encoder.k(),
            channel,
            latent_rng,
            channel_rng,
        )
    }

    /// Loss only.
    pub fn loss(&self, batch: VibBatch<'_>, draws: &LinkDraws) -> Result<LinkOutput> {
        self.run(batch, draws, false, false)
    }

    /// Loss and parameter gradients.
    pub fn loss_and_grads(&self, batch: VibBatch<'_>, draws: &LinkDraws) -> Result<LinkOutput> {
        self.run(batch, draws, true, false)
    }

    /// Loss plus the piecewise signature used by finite-difference checks.
    pub fn loss_with_signature(&self, batch: VibBatch<'_>, draws: &LinkDraws) -> Result<LinkOutput> {
        self.run(batch, draws, false, true)
    }

    fn path_forward(&self, z: &SymbolBlock, draw: &ChannelDraw) -> Result<PathOut> {
        match self.path {
            ChannelPath::Modulated {
                constellation,
                quantize: true,
            } => {
                let z_bar = quantize_block(z, constellation);
                let normalized = normalize_power(&z_bar, self.p_target)?;
                let (out, real) = transmit_with(&normalized, draw)?;
                let z_tilde = receive(&out, &real, self.p_target, None)?;
                let detected = quantize_indices(&z_tilde, constellation);
                let sent = quantize_indices(&z_bar, constellation);
                let errors = detected.iter().zip(&sent).filter(|(d, s)| d != s).count();
                let pts = constellation.points();
                let z_hat = detected.iter().flat_map(|&j| [pts[j].re, pts[j].im]).collect();
                let mut decisions = quantize_indices(z, constellation);
                decisions.extend(detected);
                Ok(PathOut {
                    z_hat,
                    realization: real,
                    tx_block: z_bar,
                    errors,
                    decisions,
                })
            }
            _ => {
                let (z_hat, real) = analog_pass_with(z, self.p_target, draw)?;
                let decisions = self
                    .path
                    .constellation()
                    .map(|c| quantize_indices(z, c))
                    .unwrap_or_default();
                Ok(PathOut {
                    z_hat: z_hat.to_interleaved(),
                    realization: real,
                    tx_block: z.clone(),
                    errors: 0,
                    decisions,
                })
            }
        }
    }

    fn run(&self, batch: VibBatch<'_>, draws: &LinkDraws, want_grads: bool, want_sig: bool) -> Result<LinkOutput> {
        self.validate()?;
        let omega = batch.x.nrows();
        if batch.a.nrows() != omega || batch.a.ncols() != self.agent.output_dim() {
            return Err(Error::ShapeMismatch {
                context: "action batch",
                expected: vec![omega, self.agent.output_dim()],
                actual: batch.a.shape().to_vec(),
            });
        }
        let n_sets = self.mc.sample_sets();
        if draws.sets.len() < n_sets {
            return Err(Error::ShapeMismatch {
                context: "monte carlo draws",
                expected: vec![n_sets],
                actual: vec![draws.sets.len()],
            });
        }
        let k = self.encoder.k();
        let inv_omega = 1.0 / omega as f64;
        let w = self.weights;
        let w_align = w.alignment_weight();
        let s2 = self.sigma_c * self.sigma_c;

        let (lat, enc_cache) = self.encoder.encode(batch.x)?;
        let mut signature: Vec<u64> = Vec::new();
        if want_sig {
            push_bits(&mut signature, enc_cache.kink_signature(self.encoder));
        }

        let mut rate = 0.0;
        for i in 0..omega {
            rate += kl_diag_gauss_to_std(
                lat.mu.row(i).as_slice().expect("standard layout"),
                lat.sigma.row(i).as_slice().expect("standard layout"),
            )?;
        }
        rate *= inv_omega;

        let mut g_mu = Array2::<f64>::zeros(lat.mu.raw_dim());
        let mut g_sigma = Array2::<f64>::zeros(lat.mu.raw_dim());
        let mut reshaper_grads = want_grads.then(|| MlpGrads::zeros_like(self.reshaper));

        let task_sets = self.task_sets();
        let align_sets = self.align_sets();
        let c_task = 1.0 / task_sets.len() as f64;
        let c_align = 1.0 / align_sets.len() as f64;
        let (mut task_sum, mut align_sum, mut quant_sum) = (0.0, 0.0, 0.0);
        let (mut errors, mut sent) = (0usize, 0usize);
        let mut first: Option<(Array2<f64>, Array2<f64>, Vec<ChannelRealization>)> = None;

        for s in 0..n_sets {
            let in_task = task_sets.contains(&s);
            let in_align = align_sets.contains(&s);
            if !in_task && !in_align {
                continue;
            }
            let draw = &draws.sets[s];
            if draw.channel.len() != omega {
                return Err(Error::ShapeMismatch {
                    context: "channel draws",
                    expected: vec![omega],
                    actual: vec![draw.channel.len()],
                });
            }
            let sample = sample_with(&lat, &draw.eps)?;
            let mut z_hat = Array2::<f64>::zeros((omega, 2 * k));
            let mut paths = Vec::with_capacity(omega);
            for i in 0..omega {
                let z_block = sample.block(i)?;
                let p = self.path_forward(&z_block, &draw.channel[i])?;
                z_hat
                    .row_mut(i)
                    .as_slice_mut()
                    .expect("standard layout")
                    .copy_from_slice(&p.z_hat);
                if in_task {
                    if let Some(c) = self.path.constellation() {
                        quant_sum += c_task * quantization_loss(&z_block, c);
                    }
                    errors += p.errors;
                    sent += if matches!(self.path, ChannelPath::Modulated { quantize: true, .. }) { k } else { 0 };
                }
                if want_sig {
                    signature.extend(p.decisions.iter().map(|&d| d as u64));
                }
                paths.push((z_block, p));
            }

            let (y, r_cache) = self.reshaper.forward(&z_hat)?;
            let (a_hat, a_cache) = self.agent.forward(&y)?;
            if want_sig {
                push_bits(&mut signature, r_cache.kink_signature(self.reshaper));
                push_bits(&mut signature, self.agent.kink_signature(&a_cache));
            }

            let mut g_a_hat = Array2::<f64>::zeros(a_hat.raw_dim());
            let mut g_y = Array2::<f64>::zeros(y.raw_dim());
            for i in 0..omega {
                let a_i = batch.a.row(i);
                let a_s = a_i.as_slice().expect("standard layout");
                let ah = a_hat.row(i);
                let ah_s = ah.as_slice().expect("standard layout");
                let agent_nll = neg_log_gauss(a_s, ah_s, self.sigma_c)?;
                // d nll / d a_hat = (a_hat - a) / sigma_c^2
                let mut coef_a = 0.0;
                if in_align {
                    align_sum += c_align * inv_omega * agent_nll;
                    coef_a += w_align * c_align * inv_omega;
                }
                if in_task {
                    match self.distortion {
                        DistortionKind::Task => {
                            task_sum += c_task * inv_omega * agent_nll;
                            coef_a += c_task * inv_omega;
                        }
                        DistortionKind::Reconstruction => {
                            let x_i = batch.x.row(i);
                            let y_i = y.row(i);
                            task_sum += c_task
                                * inv_omega
                                * neg_log_gauss(
                                    x_i.as_slice().expect("standard layout"),
                                    y_i.as_slice().expect("standard layout"),
                                    self.sigma_c,
                                )?;
                            if want_grads {
                                let c = c_task * inv_omega / s2;
                                for ((g, &yv), &xv) in g_y.row_mut(i).iter_mut().zip(y_i).zip(x_i) {
                                    *g += c * (yv - xv);
                                }
                            }
                        }
                    }
                }
                if want_grads && coef_a != 0.0 {
                    let c = coef_a / s2;
                    for ((g, &ahv), &av) in g_a_hat.row_mut(i).iter_mut().zip(ah).zip(a_i) {
                        *g = c * (ahv - av);
                    }
                }
            }

            if want_grads {
                let g_y_agent = self.agent.input_gradient(&a_cache, &g_a_hat)?;
                g_y += &g_y_agent;
                let (rg, g_zhat) = self.reshaper.backward(&r_cache, &g_y)?;
                if let Some(acc) = reshaper_grads.as_mut() {
                    acc.add_assign(&rg);
                }
                for (i, (z_block, p)) in paths.iter().enumerate() {
                    let g_row = g_zhat.row(i);
                    let mut g_z = analog_vjp(
                        g_row.as_slice().expect("standard layout"),
                        &p.tx_block,
                        &p.realization,
                        self.p_target,
                    );
                    if in_task && w.beta_q != 0.0 {
                        if let Some(c) = self.path.constellation() {
                            let gq = quantization_loss_grad_z(z_block, c);
                            let cq = w.beta_q * c_task * inv_omega;
                            for (g, q) in g_z.iter_mut().zip(gq) {
                                *g += cq * q;
                            }
                        }
                    }
                    let eps_row = draw.eps.row(i);
                    for (j, g) in g_z.into_iter().enumerate() {
                        g_mu[[i, j]] += g;
                        g_sigma[[i, j]] += g * eps_row[j];
                    }
                }
            }

            if first.is_none() {
                let real = paths.into_iter().map(|(_, p)| p.realization).collect();
                first = Some((y, a_hat, real));
            }
        }

        let quant = if self.path.constellation().is_some() { quant_sum * inv_omega } else { 0.0 };
        let loss = LossBreakdown::compose(task_sum, rate, align_sum, quant, &w);
        if !loss.total.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {loss:?}")));
        }

        let grads = if want_grads {
            let b1 = w.beta1_hat * inv_omega;
            if b1 != 0.0 {
                g_mu.scaled_add(b1, &lat.mu);
                ndarray::Zip::from(&mut g_sigma)
                    .and(&lat.sigma)
                    .for_each(|g, &s| *g += b1 * (s - 1.0 / s));
            }
            let encoder = self.encoder.backward(&enc_cache, &g_mu, &g_sigma)?;
            Some(LinkGrads {
                encoder,
                reshaper: reshaper_grads.expect("allocated when gradients are requested"),
            })
        } else {
            None
        };
        let (y, a_hat, channel) = first.expect("at least one sample set");
        Ok(LinkOutput {
            loss,
            grads,
            y,
            a_hat,
            channel,
            symbol_errors: errors,
            symbols_sent: sent,
            signature,
        })
    }
}

fn push_bits(signature: &mut Vec<u64>, bits: Vec<bool>) {
    signature.extend(
        bits.chunks(64)
            .map(|c| c.iter().enumerate().fold(0u64, |acc, (i, &b)| acc | ((b as u64) << i))),
    );
}
