//! Discrete level-k policies: a rule-based level 0 and Q-learned levels
//! `1..=n`, each trained against homogeneous traffic of the level below.

pub mod env;
pub mod qlearn;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use env::{Action, ActionSet, EnvConfig, EnvState, Highway, Level0Rule, Observation};
pub use qlearn::{evaluate, train_level_k, QTable, RewardWeights, RlConfig, TrainOutcome};

use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::StateId;

pub const QTABLE_FORMAT_VERSION: u32 = 1;

/// `π(a_i) = exp(Q_i) / Σ_j exp(Q_j)`, evaluated with the maximum subtracted.
pub fn softmax_policy(q_values: &[f64]) -> Result<Policy> {
    if q_values.is_empty() {
        return Err(Error::Input("softmax over zero actions".into()));
    }
    if q_values.iter().any(|q| !q.is_finite()) {
        return Err(Error::Input(format!("non-finite Q-values: {q_values:?}")));
    }
    let max = q_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = q_values.iter().map(|q| (q - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    Policy::new(exp.into_iter().map(|e| e / total).collect())
}

/// The hand-crafted level-0 action at `state`.
pub fn level0_action(state: &EnvState, rule: &Level0Rule) -> Action {
    if state.front_gap <= rule.hard_brake_gap_bin {
        Action::HardBrake
    } else if state.front_gap <= rule.decelerate_gap_bin {
        Action::Decelerate
    } else if state.front_gap >= rule.free_gap_bin && state.speed < rule.speed_cap_bin {
        Action::Accelerate
    } else {
        Action::Maintain
    }
}

/// Level-0 action smoothed with `rule.epsilon` on every other action.
pub fn level0_policy(state: &EnvState, rule: &Level0Rule) -> Policy {
    Policy::smoothed_one_hot(Action::ALL.len(), level0_action(state, rule).index(), rule.epsilon)
}

/// A policy for every state id of an environment.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyMap(Vec<Policy>);

impl PolicyMap {
    pub fn policy(&self, state: StateId) -> &Policy {
        &self.0[state as usize]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn level0_policy_map(env: &EnvConfig) -> PolicyMap {
    PolicyMap(
        (0..env.state_count() as StateId)
            .map(|id| level0_policy(&EnvState::from_id(id, env).expect("id below state count"), &env.level0))
            .collect(),
    )
}

/// Softmax policies of a trained table, unvisited states borrowing their
/// nearest populated neighbour.
pub fn qtable_policy_map(table: &QTable, env: &EnvConfig) -> Result<PolicyMap> {
    (0..env.state_count() as StateId)
        .map(|id| softmax_policy(table.resolve(id, env)?.1))
        .collect::<Result<Vec<_>>>()
        .map(PolicyMap)
}

/// Level-0 rule plus the trained tables for levels `1..=n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelTables {
    pub version: u32,
    pub actions: ActionSet,
    pub env: EnvConfig,
    /// Table `k − 1` holds level `k`.
    pub tables: Vec<QTable>,
    #[serde(default)]
    pub converged: Vec<bool>,
}

impl LevelTables {
    pub fn max_level(&self) -> usize {
        self.tables.len()
    }

    /// States populated in every level's table, ordered by total visits
    /// (descending) then id.
    pub fn common_states(&self) -> Vec<StateId> {
        let Some(first) = self.tables.first() else {
            return Vec::new();
        };
        let mut states: Vec<(u64, StateId)> = first
            .values
            .keys()
            .filter(|s| self.tables.iter().all(|t| t.values.contains_key(s)))
            .map(|&s| (self.tables.iter().map(|t| t.visits.get(&s).copied().unwrap_or(0)).sum(), s))
            .collect();
        states.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        states.into_iter().map(|(_, s)| s).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tables: LevelTables = serde_json::from_str(&text)?;
        if tables.version != QTABLE_FORMAT_VERSION {
            return Err(Error::Input(format!("unsupported Q-table format version {}", tables.version)));
        }
        tables.actions.ensure_matches(&ActionSet::default())?;
        Ok(tables)
    }
}

/// Trains levels `1..=max_level` in sequence, each against the previous
/// level's policies.
pub fn train_levels(env: &EnvConfig, rl: &RlConfig, max_level: usize, seed: u64) -> Result<LevelTables> {
    env.validate()?;
    let mut opponents = level0_policy_map(env);
    let mut tables = Vec::with_capacity(max_level);
    let mut converged = Vec::with_capacity(max_level);
    for level in 1..=max_level {
        let out = train_level_k(env, &opponents, rl, level, seed)?;
        log::info!(
            "level {level}: {} states after {} episodes (converged: {})",
            out.table.values.len(),
            out.episodes,
            out.converged
        );
        opponents = qtable_policy_map(&out.table, env)?;
        converged.push(out.converged);
        tables.push(out.table);
    }
    Ok(LevelTables {
        version: QTABLE_FORMAT_VERSION,
        actions: ActionSet::default(),
        env: env.clone(),
        tables,
        converged,
    })
}

/// `[π_0(s), π_1(s), …, π_n(s)]` for one state.
pub fn build_observation_set(state: StateId, levels: &LevelTables) -> Result<Vec<Policy>> {
    let env = &levels.env;
    let s = EnvState::from_id(state, env)?;
    let mut out = Vec::with_capacity(levels.tables.len() + 1);
    out.push(level0_policy(&s, &env.level0));
    for table in &levels.tables {
        let (resolved, q) = table.resolve(state, env)?;
        if resolved != state {
            log::warn!("state {state} missing from level-{} table; using state {resolved}", table.level);
        }
        out.push(softmax_policy(q)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_policy(&[1.0; 4]).unwrap(), Policy::uniform(4));
        let p = softmax_policy(&[2f64.ln(), 0.0]).unwrap();
        assert_abs_diff_eq!(p.probs()[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.probs()[1], 1.0 / 3.0, epsilon = 1e-15);
        let q = [0.3, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = q.iter().map(|v| v + 100.0).collect();
        assert_abs_diff_eq!(softmax_policy(&q).unwrap().probs(), softmax_policy(&shifted).unwrap().probs(), epsilon = 1e-15);
        assert!(softmax_policy(&[1.0, f64::NAN]).is_err());
        assert!(softmax_policy(&[1000.0, -1000.0]).is_ok());
    }

    #[test]
    fn level0_rules() {
        let rule = Level0Rule::default();
        let tight = EnvState { lane: 1, front_gap: 0, rel_speed: 0, side_gap: 1, speed: 3 };
        let p = level0_policy(&tight, &rule);
        assert_abs_diff_eq!(p.probs()[Action::HardBrake.index()], 1.0 - 0.01 * 4.0, epsilon = 1e-15);

        let free = EnvState { lane: 0, front_gap: 3, rel_speed: 1, side_gap: 2, speed: 0 };
        assert_eq!(level0_policy(&free, &rule).argmax(), Action::Accelerate.index());

        let deterministic = Level0Rule { epsilon: 0.0, ..rule };
        let p = level0_policy(&free, &deterministic);
        assert_eq!(p.probs()[Action::Accelerate.index()], 1.0);
        assert_eq!(p.probs().iter().filter(|&&v| v == 0.0).count(), 4);
    }

    #[test]
    fn observation_set_has_one_policy_per_level() {
        let env = EnvConfig::default();
        let rl = RlConfig {
            episodes: 200,
            min_episodes: 200,
            ..Default::default()
        };
        let levels = train_levels(&env, &rl, 3, 9).unwrap();
        let state = levels.common_states()[0];
        let set = build_observation_set(state, &levels).unwrap();
        assert_eq!(set.len(), 4);
        assert_eq!(set[0], level0_policy(&EnvState::from_id(state, &env).unwrap(), &env.level0));
        for p in &set {
            assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        // unvisited states still resolve through the nearest neighbour
        for id in [0, env.state_count() as StateId - 1] {
            assert_eq!(build_observation_set(id, &levels).unwrap().len(), 4);
        }
    }

    #[test]
    fn tables_round_trip_through_json() {
        let env = EnvConfig::default();
        let rl = RlConfig {
            episodes: 50,
            min_episodes: 50,
            ..Default::default()
        };
        let levels = train_levels(&env, &rl, 2, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.json");
        levels.save(&path).unwrap();
        assert_eq!(LevelTables::load(&path).unwrap(), levels);
    }
}
