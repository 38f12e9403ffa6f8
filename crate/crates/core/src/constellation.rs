//! Square QAM grids controlled by a single side-length parameter `r`.
//!
//! Point `j` (0-based) of a `u`-point grid with `m = sqrt(u)` points per side:
//!
//! ```text
//! Re(e_j) = -r/2 + (j mod m) * r / (m - 1)
//! Im(e_j) =  r/2 - floor(j / m) * r / (m - 1)
//! ```
//!
//! so `r` is the distance between the two corner points of one side. The
//! grid is always regenerated from `(u, r)`; points are never stored.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ComplexSymbol = Complex64;

/// Non-empty block of finite complex channel symbols.
#[derive(Clone, Debug, PartialEq)]
pub struct SymbolBlock(Vec<ComplexSymbol>);

impl SymbolBlock {
    pub fn new(symbols: Vec<ComplexSymbol>) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::EmptyBlock);
        }
        if symbols.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite("symbol block"));
        }
        Ok(Self(symbols))
    }

    /// Pairs `(2i, 2i+1)` of a real vector become the real and imaginary
    /// parts of symbol `i`.
    pub fn from_interleaved(values: &[f64]) -> Result<Self> {
        if values.len() % 2 != 0 {
            return Err(Error::ShapeMismatch {
                context: "interleaved symbols",
                expected: vec![values.len() + 1],
                actual: vec![values.len()],
            });
        }
        Self::new(
            values
                .chunks_exact(2)
                .map(|p| Complex64::new(p[0], p[1]))
                .collect(),
        )
    }

    pub fn to_interleaved(&self) -> Vec<f64> {
        self.0.iter().flat_map(|z| [z.re, z.im]).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn symbols(&self) -> &[ComplexSymbol] {
        &self.0
    }

    pub fn into_symbols(self) -> Vec<ComplexSymbol> {
        self.0
    }

    /// Average symbol power `(1/k) sum |z_i|^2`.
    pub fn power(&self) -> f64 {
        self.0.iter().map(|z| z.norm_sqr()).sum::<f64>() / self.0.len() as f64
    }

    pub(crate) fn from_vec_unchecked(symbols: Vec<ComplexSymbol>) -> Self {
        debug_assert!(!symbols.is_empty());
        Self(symbols)
    }
}

/// Supported orders: perfect squares that are powers of four.
pub const SUPPORTED_ORDERS: [usize; 4] = [4, 16, 64, 256];

/// A `u`-point square QAM grid with side-corner distance `r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ConstellationParams", into = "ConstellationParams")]
pub struct Constellation {
    order: usize,
    side: usize,
    r: f64,
    points: Vec<ComplexSymbol>,
}

/// The serialized form: order and parameter only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstellationParams {
    pub order: usize,
    pub r: f64,
}

impl TryFrom<ConstellationParams> for Constellation {
    type Error = Error;

    fn try_from(p: ConstellationParams) -> Result<Self> {
        build_qam(p.order, p.r)
    }
}

impl From<Constellation> for ConstellationParams {
    fn from(c: Constellation) -> Self {
        Self {
            order: c.order,
            r: c.r,
        }
    }
}

/// Side length `sqrt(u)` for a supported order.
pub fn side_len(order: usize) -> Result<usize> {
    match order {
        4 => Ok(2),
        16 => Ok(4),
        64 => Ok(8),
        256 => Ok(16),
        other => Err(Error::UnsupportedOrder(other)),
    }
}

pub fn build_qam(order: usize, r: f64) -> Result<Constellation> {
    let side = side_len(order)?;
    if !(r.is_finite() && r > 0.0) {
        return Err(Error::InvalidRadius(r));
    }
    let points = (0..order).map(|j| grid_point(j, side, r)).collect();
    Ok(Constellation {
        order,
        side,
        r,
        points,
    })
}

#[inline]
fn grid_point(j: usize, side: usize, r: f64) -> ComplexSymbol {
    let denom = (side - 1) as f64;
    let re = -r / 2.0 + (j % side) as f64 * r / denom;
    let im = r / 2.0 - (j / side) as f64 * r / denom;
    Complex64::new(re, im)
}

impl Constellation {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn points(&self) -> &[ComplexSymbol] {
        &self.points
    }

    pub fn params(&self) -> ConstellationParams {
        ConstellationParams {
            order: self.order,
            r: self.r,
        }
    }

    /// Same order, different parameter.
    pub fn with_r(&self, r: f64) -> Result<Self> {
        build_qam(self.order, r)
    }

    /// Grid spacing `r / (sqrt(u) - 1)` along either axis.
    pub fn spacing(&self) -> f64 {
        self.r / (self.side - 1) as f64
    }

    /// Index of the nearest point under squared Euclidean distance, with
    /// ties resolved towards the lowest index.
    pub fn nearest_index(&self, z: ComplexSymbol) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, e) in self.points.iter().enumerate() {
            let dr = z.re - e.re;
            let di = z.im - e.im;
            let d = dr * dr + di * di;
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        best
    }
}

/// Hard decision of one symbol: `argmin_j |z - e_j|^2`.
pub fn quantize_symbol(z: ComplexSymbol, c: &Constellation) -> (usize, ComplexSymbol) {
    let j = c.nearest_index(z);
    (j, c.points[j])
}

/// Element-wise [`quantize_symbol`].
pub fn quantize_block(z: &SymbolBlock, c: &Constellation) -> SymbolBlock {
    SymbolBlock::from_vec_unchecked(z.0.iter().map(|&s| quantize_symbol(s, c).1).collect())
}

/// Indices of the nearest points for every symbol of a block.
pub fn quantize_indices(z: &SymbolBlock, c: &Constellation) -> Vec<usize> {
    z.0.iter().map(|&s| c.nearest_index(s)).collect()
}

/// Mean un-squared distance from each symbol to its nearest grid point.
pub fn quantization_loss(z: &SymbolBlock, c: &Constellation) -> f64 {
    let total: f64 = z
        .0
        .iter()
        .map(|&s| (s - quantize_symbol(s, c).1).norm())
        .sum();
    total / z.len() as f64
}

/// Derivative of [`quantization_loss`] with respect to `r`, holding each
/// symbol's assigned point fixed. Since every grid point is linear in `r`,
/// `d e_j / d r = e_j / r`. Symbols sitting exactly on their point contribute 0.
pub fn quantization_loss_grad_r(z: &SymbolBlock, c: &Constellation) -> f64 {
    let unit = |j: usize| grid_point(j, c.side, 1.0);
    let total: f64 = z
        .0
        .iter()
        .map(|&s| {
            let j = c.nearest_index(s);
            let diff = s - c.points[j];
            let dist = diff.norm();
            if dist == 0.0 {
                return 0.0;
            }
            let de = unit(j);
            -(diff.re * de.re + diff.im * de.im) / dist
        })
        .sum();
    total / z.len() as f64
}

/// Gradient of [`quantization_loss`] with respect to the interleaved real
/// coordinates of `z`, for a fixed `r`.
pub fn quantization_loss_grad_z(z: &SymbolBlock, c: &Constellation) -> Vec<f64> {
    let k = z.len() as f64;
    z.0.iter()
        .flat_map(|&s| {
            let diff = s - quantize_symbol(s, c).1;
            let dist = diff.norm();
            if dist == 0.0 {
                [0.0, 0.0]
            } else {
                [diff.re / (dist * k), diff.im / (dist * k)]
            }
        })
        .collect()
}

fn batch_loss_and_grad(blocks: &[SymbolBlock], c: &Constellation) -> (f64, f64) {
    let n = blocks.len() as f64;
    let (l, g) = blocks.iter().fold((0.0, 0.0), |(l, g), b| {
        (
            l + quantization_loss(b, c),
            g + quantization_loss_grad_r(b, c),
        )
    });
    (l / n, g / n)
}

/// Batch-mean quantization loss over several blocks.
pub fn batch_quantization_loss(blocks: &[SymbolBlock], c: &Constellation) -> f64 {
    batch_loss_and_grad(blocks, c).0
}

/// Stopping rule and step size for [`fit_constellation`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSchedule {
    pub lr: f64,
    /// Converged once `|delta r| < tol` for `patience` consecutive steps.
    pub tol: f64,
    pub patience: usize,
    pub max_steps: usize,
    pub r_min: f64,
    pub r_max: f64,
}

impl Default for FitSchedule {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            tol: 1e-5,
            patience: 50,
            max_steps: 10_000,
            r_min: 1e-3,
            r_max: 1e3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitStep {
    pub step: usize,
    pub r: f64,
    /// Batch-mean loss at the `r` used for this step's gradient.
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub r_star: f64,
    pub steps: usize,
    pub converged: bool,
    pub trajectory: Vec<FitStep>,
}

/// Gradient descent on the batch-mean quantization loss over `r`.
///
/// `next_batch` is called once per step and must yield the encoder symbols
/// of one mini-batch.
pub fn fit_constellation<F>(
    mut next_batch: F,
    order: usize,
    r_init: f64,
    schedule: &FitSchedule,
) -> Result<FitOutcome>
where
    F: FnMut(usize) -> Vec<SymbolBlock>,
{
    let mut c = build_qam(order, r_init)?;
    if !(schedule.lr > 0.0 && schedule.r_min < r_init && r_init < schedule.r_max) {
        return Err(Error::Config(format!(
            "fit schedule rejects r_init = {r_init} with lr = {} and bounds ({}, {})",
            schedule.lr, schedule.r_min, schedule.r_max
        )));
    }
    let mut trajectory = Vec::new();
    let mut calm = 0;
    let mut converged = false;
    let mut steps = 0;
    while steps < schedule.max_steps {
        let batch = next_batch(steps);
        if batch.is_empty() {
            return Err(Error::EmptyBlock);
        }
        let (loss, grad) = batch_loss_and_grad(&batch, &c);
        if !grad.is_finite() {
            return Err(Error::NonFiniteGradient("constellation parameter".into()));
        }
        trajectory.push(FitStep {
            step: steps,
            r: c.r,
            loss,
        });
        let r_next = c.r - schedule.lr * grad;
        if !(r_next > schedule.r_min && r_next < schedule.r_max) {
            return Err(Error::Diverged(r_next));
        }
        let delta = (r_next - c.r).abs();
        c = c.with_r(r_next)?;
        steps += 1;
        calm = if delta < schedule.tol { calm + 1 } else { 0 };
        if calm >= schedule.patience {
            converged = true;
            break;
        }
    }
    Ok(FitOutcome {
        r_star: c.r,
        steps,
        converged,
        trajectory,
    })
}
