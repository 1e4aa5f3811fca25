//! Probability distributions over the discrete action set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `sum(probs) == 1` for a valid policy.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A distribution over `A` ordered actions at one state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Policy(Vec<f64>);

impl Policy {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Input("policy over zero actions".into()));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Input(format!("probability {p} outside [0, 1]")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Input(format!("probabilities sum to {sum}")));
        }
        Ok(Policy(probs))
    }

    pub fn uniform(actions: usize) -> Self {
        Policy(vec![1.0 / actions as f64; actions])
    }

    /// Unit mass on `action` with `epsilon` spread on every other action.
    pub fn smoothed_one_hot(actions: usize, action: usize, epsilon: f64) -> Self {
        let mut probs = vec![epsilon; actions];
        probs[action] = 1.0 - epsilon * (actions - 1) as f64;
        Policy(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        self.0
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
            .0
    }

    pub fn cdf(&self) -> Vec<f64> {
        self.0
            .iter()
            .scan(0.0, |acc, p| {
                *acc += p;
                Some(*acc)
            })
            .collect()
    }

    pub fn total_variation(&self, other: &Policy) -> f64 {
        0.5 * self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }

    pub(crate) fn from_raw_unchecked(probs: Vec<f64>) -> Self {
        Policy(probs)
    }
}

impl TryFrom<Vec<f64>> for Policy {
    type Error = Error;

    fn try_from(probs: Vec<f64>) -> Result<Self> {
        Policy::new(probs)
    }
}

impl From<Policy> for Vec<f64> {
    fn from(p: Policy) -> Self {
        p.0
    }
}
