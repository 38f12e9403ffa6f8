//! Synthetic task environment: seeded `(x, a)` pairs whose inputs mix
//! task-relevant structure with task-agnostic clutter, and the frozen agent
//! that maps inputs to actions.
//!
//! Generation, per sample:
//!
//! ```text
//! t ~ N(0, I_latent)
//! x = [A t ; c] + noise_std * n,   c ~ N(0, I_clutter), n ~ N(0, I_l)
//! a = tanh(B t)
//! ```
//!
//! `A` has unit-norm columns and `B` unit-norm rows, both drawn from the
//! dataset seed before any sample.

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::neural::{AdamConfig, Mlp, MlpCache, NetworkSpec, Trainable};
use crate::objectives::neg_log_gauss;
use crate::rng::{stream, Purpose, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    /// Input dimension.
    pub l: usize,
    /// Action dimension.
    pub d: usize,
    pub latent_dim: usize,
    /// Fraction of the input carrying task-agnostic clutter, in `[0, 1)`.
    pub clutter_ratio: f64,
    pub noise_std: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            n_train: 4096,
            n_test: 1024,
            l: 64,
            d: 4,
            latent_dim: 4,
            clutter_ratio: 0.5,
            noise_std: 0.01,
        }
    }
}

impl DatasetSpec {
    pub fn clutter_dims(&self) -> usize {
        (self.l as f64 * self.clutter_ratio).floor() as usize
    }

    pub fn task_dims(&self) -> usize {
        self.l - self.clutter_dims()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.latent_dim == 0 || self.latent_dim > self.d || self.d > self.l {
            return bad(format!(
                "need 1 <= latent_dim <= d <= l, got latent_dim={}, d={}, l={}",
                self.latent_dim, self.d, self.l
            ));
        }
        if !(0.0..1.0).contains(&self.clutter_ratio) {
            return bad(format!("clutter_ratio must lie in [0, 1), got {}", self.clutter_ratio));
        }
        if self.task_dims() < self.latent_dim {
            return bad(format!(
                "task block of {} dims cannot carry {} latent factors",
                self.task_dims(),
                self.latent_dim
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be non-negative, got {}", self.noise_std));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return bad("dataset splits must be non-empty".into());
        }
        Ok(())
    }
}

/// One `(x, a)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub x: Array1<f64>,
    pub a: Array1<f64>,
}

/// Inputs and actions of one split, a row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub x: Array2<f64>,
    pub a: Array2<f64>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn pair(&self, i: usize) -> SamplePair {
        SamplePair {
            x: self.x.row(i).to_owned(),
            a: self.a.row(i).to_owned(),
        }
    }

    pub fn select(&self, idx: &[usize]) -> Split {
        Split {
            x: self.x.select(Axis(0), idx),
            a: self.a.select(Axis(0), idx),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Split,
    pub test: Split,
}

fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = stream(spec.seed, Purpose::Dataset);
    let (td, cd, ld) = (spec.task_dims(), spec.clutter_dims(), spec.latent_dim);

    let mut mix = Array2::from_shape_simple_fn((td, ld), || normal(&mut rng));
    for mut col in mix.columns_mut() {
        let n = col.dot(&col).sqrt();
        col /= n;
    }
    let mut head = Array2::from_shape_simple_fn((spec.d, ld), || normal(&mut rng));
    for mut row in head.rows_mut() {
        let n = row.dot(&row).sqrt();
        row /= n;
    }

    let mut split = |n: usize| {
        let mut x = Array2::zeros((n, spec.l));
        let mut a = Array2::zeros((n, spec.d));
        for i in 0..n {
            let t = Array1::from_shape_simple_fn(ld, || normal(&mut rng));
            x.slice_mut(s![i, ..td]).assign(&mix.dot(&t));
            for j in td..td + cd {
                x[[i, j]] = normal(&mut rng);
            }
            for j in 0..spec.l {
                x[[i, j]] += spec.noise_std * normal(&mut rng);
            }
            a.row_mut(i).assign(&head.dot(&t).mapv(f64::tanh));
        }
        Split { x, a }
    };
    let train = split(spec.n_train);
    let test = split(spec.n_test);
    Ok(Dataset {
        spec: spec.clone(),
        train,
        test,
    })
}

/// Inference network with immutable parameters. There is deliberately no
/// way to obtain mutable access once frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenAgent {
    net: Mlp,
}

impl FrozenAgent {
    pub fn freeze(net: Mlp) -> Self {
        Self { net }
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn forward(&self, y: &Array2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        self.net.forward(y)
    }

    /// Gradient with respect to the agent input only.
    pub fn input_gradient(&self, cache: &MlpCache, grad_out: &Array2<f64>) -> Result<Array2<f64>> {
        self.net.backward_input(cache, grad_out)
    }

    pub fn kink_signature(&self, cache: &MlpCache) -> Vec<bool> {
        cache.kink_signature(&self.net)
    }

    /// SHA-256 over the little-endian parameter bytes.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in self.net.params() {
            h.update(p.to_le_bytes());
        }
        h.finalize().into()
    }
}

/// Deterministic forward pass of the agent on a batch of task data.
pub fn agent_infer(agent: &FrozenAgent, y: &Array2<f64>) -> Result<Array2<f64>> {
    agent.net.predict(y)
}

/// Stand-in for the agent's training loss: Gaussian negative log-likelihood.
pub fn agent_loss(a: &[f64], a_hat: &[f64], sigma_c: f64) -> Result<f64> {
    neg_log_gauss(a, a_hat, sigma_c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentSchedule {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Group-lasso strength on the input columns of the first layer; drives
    /// the weights of inputs that carry no task information to exactly zero.
    pub group_lasso: f64,
    /// After `prune_at * steps` steps the first-layer input row norms are
    /// sorted; if the largest ratio between neighbours exceeds `prune_gap`,
    /// every row below that gap is zeroed and held at zero for the rest of
    /// training. `prune_gap = 0` disables pruning.
    pub prune_gap: f64,
    pub prune_at: f64,
    pub mse_threshold: f64,
}

impl Default for AgentSchedule {
    fn default() -> Self {
        Self {
            hidden: vec![128],
            steps: 20000,
            batch: 64,
            lr: 2e-3,
            group_lasso: 0.05,
            prune_gap: 1.5,
            prune_at: 0.75,
            mse_threshold: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentReport {
    pub train_mse: f64,
    pub test_mse: f64,
    /// Input columns of the first layer that ended exactly zero.
    pub zeroed_inputs: usize,
}

pub fn mean_squared_error(a: &Array2<f64>, a_hat: &Array2<f64>) -> f64 {
    let diff = a - a_hat;
    diff.mapv(|v| v * v).mean().unwrap_or(0.0)
}

fn group_shrink(net: &mut Mlp, threshold: f64) {
    let w = &mut net.layers_mut()[0].weight;
    for mut row in w.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n <= threshold {
            row.fill(0.0);
        } else {
            row *= 1.0 - threshold / n;
        }
    }
}

/// Input rows of the first layer that are already zero, plus those below
/// the widest multiplicative gap in the sorted non-zero row norms when that
/// gap exceeds `min_gap`.
fn weak_inputs(net: &Mlp, min_gap: f64) -> Vec<usize> {
    let w = &net.layers()[0].weight;
    let norms: Vec<f64> = w.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let (mut weak, mut live): (Vec<usize>, Vec<usize>) = (0..norms.len()).partition(|&i| norms[i] == 0.0);
    live.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]));
    let mut best = (0.0, 0);
    for i in 1..live.len() {
        let ratio = norms[live[i]] / norms[live[i - 1]];
        if ratio > best.0 {
            best = (ratio, i);
        }
    }
    if best.0 > min_gap {
        weak.extend_from_slice(&live[..best.1]);
    }
    weak.sort_unstable();
    weak
}

fn zero_inputs(net: &mut Mlp, rows: &[usize]) {
    let w = &mut net.layers_mut()[0].weight;
    for &i in rows {
        w.row_mut(i).fill(0.0);
    }
}

/// Trains the agent on clean `x -> a` pairs with a proximal group-lasso step
/// after each Adam update, prunes the inputs it learned to ignore, then
/// freezes it. Fails when the test MSE stays above `schedule.mse_threshold`.
pub fn pretrain_agent(data: &Dataset, schedule: &AgentSchedule, seed: u64) -> Result<(FrozenAgent, AgentReport)> {
    let spec = NetworkSpec::mlp(data.spec.l, &schedule.hidden, data.spec.d, seed);
    let mut model = Trainable::new(
        Mlp::new(spec)?,
        AdamConfig {
            lr: schedule.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = stream(seed, Purpose::AgentBatches);
    let n = data.train.len();
    let batch = schedule.batch.min(n).max(1);
    let prune_step = (schedule.prune_at * schedule.steps as f64) as usize;
    let mut pruned: Vec<usize> = Vec::new();
    for step in 0..schedule.steps {
        let idx = sample_indices(&mut rng, n, batch).into_vec();
        let mb = data.train.select(&idx);
        let (out, cache) = model.net.forward(&mb.x)?;
        let scale = 2.0 / (batch * data.spec.d) as f64;
        let g = (&out - &mb.a) * scale;
        let (grads, _) = model.net.backward(&cache, &g)?;
        model.step(&grads, "agent")?;
        // cosine decay of the learning rate keeps the final iterates quiet
        let progress = (step + 1) as f64 / schedule.steps as f64;
        model.adam.config.lr = schedule.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        if schedule.group_lasso > 0.0 && pruned.is_empty() {
            group_shrink(&mut model.net, schedule.lr * schedule.group_lasso);
        }
        if schedule.prune_gap > 0.0 && step + 1 == prune_step {
            pruned = weak_inputs(&model.net, schedule.prune_gap);
        }
        zero_inputs(&mut model.net, &pruned);
    }
    let agent = FrozenAgent::freeze(model.net);
    let train_mse = mean_squared_error(&data.train.a, &agent_infer(&agent, &data.train.x)?);
    let test_mse = mean_squared_error(&data.test.a, &agent_infer(&agent, &data.test.x)?);
    if !(test_mse < schedule.mse_threshold) {
        return Err(Error::AgentNotConverged {
            mse: test_mse,
            threshold: schedule.mse_threshold,
        });
    }
    Ok((
        agent,
        AgentReport {
            train_mse,
            test_mse,
            zeroed_inputs: pruned.len(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        DatasetSpec {
            n_train: 64,
            n_test: 16,
            l: 12,
            d: 3,
            latent_dim: 2,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        assert_eq!(generate_dataset(&small()).unwrap(), generate_dataset(&small()).unwrap());
        let other = DatasetSpec { seed: 2, ..small() };
        assert_ne!(generate_dataset(&small()).unwrap(), generate_dataset(&other).unwrap());
    }

    #[test]
    fn no_clutter_means_inputs_are_linear_in_factors() {
        // Without clutter and noise, x spans at most latent_dim directions.
        let spec = DatasetSpec {
            clutter_ratio: 0.0,
            noise_std: 0.0,
            ..small()
        };
        let ds = generate_dataset(&spec).unwrap();
        assert_eq!(spec.clutter_dims(), 0);
        let gram = ds.train.x.t().dot(&ds.train.x);
        // rank <= 2: every 3x3 principal minor vanishes (up to rounding)
        let m = |i: usize, j: usize| gram[[i, j]];
        let det3 = m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1))
            - m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0))
            + m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0));
        let scale = m(0, 0) * m(1, 1) * m(2, 2);
        assert!(det3.abs() < 1e-9 * scale.max(1.0));
    }

    #[test]
    fn actions_are_bounded() {
        let ds = generate_dataset(&small()).unwrap();
        assert!(ds.train.a.iter().all(|v| v.abs() < 1.0));
        assert_eq!(ds.train.pair(3).x.len(), 12);
    }

    #[test]
    fn spec_validation() {
        assert!(DatasetSpec { clutter_ratio: 1.0, ..small() }.validate().is_err());
        assert!(DatasetSpec { latent_dim: 4, ..small() }.validate().is_err());
        assert!(DatasetSpec { d: 20, ..small() }.validate().is_err());
        assert!(DatasetSpec { clutter_ratio: 0.95, ..small() }.validate().is_err());
    }

    #[test]
    fn agent_loss_delegates_to_gaussian_nll() {
        let a = [0.1, -0.5, 0.3];
        let b = [0.0, -0.4, 0.9];
        assert_eq!(agent_loss(&a, &b, 0.7).unwrap(), neg_log_gauss(&a, &b, 0.7).unwrap());
        let c0 = agent_loss(&a, &a, 1.0).unwrap();
        let e1 = agent_loss(&a, &b, 1.0).unwrap() - c0;
        let doubled: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + 2.0 * (y - x)).collect();
        let e2 = agent_loss(&a, &doubled, 1.0).unwrap() - c0;
        assert!((e2 - 4.0 * e1).abs() < 1e-12);
    }

    #[test]
    fn agent_rejects_misaligned_input() {
        let agent = FrozenAgent::freeze(Mlp::new(NetworkSpec::mlp(8, &[4], 2, 0)).unwrap());
        let y = Array2::zeros((2, 6));
        assert!(matches!(agent_infer(&agent, &y), Err(Error::ShapeMismatch { .. })));
        let ok = Array2::zeros((2, 8));
        assert_eq!(agent_infer(&agent, &ok).unwrap(), agent_infer(&agent, &ok).unwrap());
    }

    #[test]
    fn group_shrink_zeroes_small_rows() {
        let mut net = Mlp::new(NetworkSpec::mlp(3, &[], 2, 0)).unwrap();
        net.layers_mut()[0].weight = ndarray::array![[3.0, 4.0], [0.1, 0.0], [0.0, 1.0]];
        group_shrink(&mut net, 0.5);
        let w = &net.layers()[0].weight;
        assert_eq!(w.row(1).to_vec(), vec![0.0, 0.0]);
        assert!((w[[0, 0]] - 3.0 * 0.9).abs() < 1e-15);
        assert!((w[[2, 1]] - 0.5).abs() < 1e-15);
        // norms after shrinking: 4.5, 0, 0.5
        assert_eq!(weak_inputs(&net, 1.5), vec![1, 2]);
        net.layers_mut()[0].weight = ndarray::array![[3.0, 4.0], [0.0, 1.0], [0.0, 2.0]];
        assert_eq!(weak_inputs(&net, 1.5), vec![1, 2]);
        assert_eq!(weak_inputs(&net, 3.0), Vec::<usize>::new());
        net.layers_mut()[0].weight = ndarray::array![[3.0, 4.0], [0.0, 0.0], [0.0, 4.0]];
        assert_eq!(weak_inputs(&net, 1.5), vec![1]);
    }
}
