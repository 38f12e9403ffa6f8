//! Enumerable discrete joint distributions, used to check that the
//! variational cross-entropy upper-bounds the true conditional entropy.

use crate::error::{Error, Result};

/// Joint probability table `p[y][a]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteJoint {
    table: Vec<Vec<f64>>,
}

impl DiscreteJoint {
    pub fn new(table: Vec<Vec<f64>>) -> Result<Self> {
        let width = table.first().map_or(0, Vec::len);
        if width == 0 || table.iter().any(|r| r.len() != width) {
            return Err(Error::Config("joint table must be a non-empty rectangle".into()));
        }
        if table.iter().flatten().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Config("joint probabilities must be finite and non-negative".into()));
        }
        let total: f64 = table.iter().flatten().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("joint probabilities sum to {total}")));
        }
        Ok(Self { table })
    }

    pub fn n_y(&self) -> usize {
        self.table.len()
    }

    pub fn n_a(&self) -> usize {
        self.table[0].len()
    }

    pub fn p(&self, y: usize, a: usize) -> f64 {
        self.table[y][a]
    }

    pub fn marginal_y(&self, y: usize) -> f64 {
        self.table[y].iter().sum()
    }
}

/// `H(A|Y) = -sum p(a, y) ln p(a|y)` by enumeration.
pub fn conditional_entropy(joint: &DiscreteJoint) -> f64 {
    let mut h = 0.0;
    for y in 0..joint.n_y() {
        let py = joint.marginal_y(y);
        for a in 0..joint.n_a() {
            let p = joint.p(y, a);
            if p > 0.0 {
                h -= p * (p / py).ln();
            }
        }
    }
    h
}

/// `-sum p(a, y) ln q(a|y)` for a variational conditional `q[y][a]`.
pub fn variational_cross_entropy(joint: &DiscreteJoint, q: &[Vec<f64>]) -> Result<f64> {
    if q.len() != joint.n_y() || q.iter().any(|r| r.len() != joint.n_a()) {
        return Err(Error::ShapeMismatch {
            context: "variational conditional",
            expected: vec![joint.n_y(), joint.n_a()],
            actual: vec![q.len(), q.first().map_or(0, Vec::len)],
        });
    }
    let mut ce = 0.0;
    for (y, row) in q.iter().enumerate() {
        for (a, &qa) in row.iter().enumerate() {
            let p = joint.p(y, a);
            if p > 0.0 {
                ce -= p * qa.ln();
            }
        }
    }
    Ok(ce)
}
