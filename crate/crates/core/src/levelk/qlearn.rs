//! Tabular Q-learning of level-k best responses.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::env::{Action, EnvConfig, EnvState, Highway};
use super::PolicyMap;
use crate::error::{Error, Result};
use crate::rng;
use crate::StateId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    /// Per-step reward for normalized speed `v / v_max`.
    pub speed: f64,
    pub collision: f64,
    pub lane_change: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            speed: 1.0,
            collision: 10.0,
            lane_change: 0.1,
        }
    }
}

impl RewardWeights {
    pub fn reward(&self, speed_fraction: f64, collided: bool, changed_lane: bool) -> f64 {
        self.speed * speed_fraction - self.collision * f64::from(u8::from(collided))
            - self.lane_change * f64::from(u8::from(changed_lane))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RlConfig {
    pub episodes: usize,
    pub max_steps: usize,
    pub learning_rate: f64,
    pub discount: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Episodes always run before the convergence test applies.
    pub min_episodes: usize,
    /// Converged once the moving average of |TD error| drops below this.
    pub td_threshold: f64,
    /// Per-update weight of the newest |TD error| in the moving average.
    pub td_smoothing: f64,
    pub reward: RewardWeights,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            episodes: 1500,
            max_steps: 100,
            learning_rate: 0.1,
            discount: 0.8,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            min_episodes: 500,
            td_threshold: 0.02,
            td_smoothing: 1e-3,
            reward: RewardWeights::default(),
        }
    }
}

/// Learned action values for one level. Only visited states are stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub level: usize,
    pub actions: usize,
    pub values: BTreeMap<StateId, Vec<f64>>,
    #[serde(default)]
    pub visits: BTreeMap<StateId, u64>,
}

impl QTable {
    pub fn new(level: usize, actions: usize) -> Self {
        QTable {
            level,
            actions,
            values: BTreeMap::new(),
            visits: BTreeMap::new(),
        }
    }

    pub fn get(&self, state: StateId) -> Option<&[f64]> {
        self.values.get(&state).map(Vec::as_slice)
    }

    /// Values at `state`, or at the nearest populated state under Hamming
    /// distance on the bin tuple (lowest id on ties).
    pub fn resolve(&self, state: StateId, cfg: &EnvConfig) -> Result<(StateId, &[f64])> {
        if let Some(v) = self.get(state) {
            return Ok((state, v));
        }
        let target = EnvState::from_id(state, cfg)?;
        let mut best: Option<(usize, StateId)> = None;
        for &id in self.values.keys() {
            let d = EnvState::from_id(id, cfg)?.hamming(&target);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, id));
            }
        }
        let (_, id) = best.ok_or(Error::MissingState(state))?;
        log::debug!("level-{} table lacks state {state}; using neighbour {id}", self.level);
        Ok((id, &self.values[&id]))
    }

    fn entry(&mut self, state: StateId) -> &mut Vec<f64> {
        let actions = self.actions;
        self.values.entry(state).or_insert_with(|| vec![0.0; actions])
    }

    pub fn greedy(&self, state: StateId) -> Option<Action> {
        self.get(state).map(|q| Action::from_index(argmax(q)).expect("table width matches action set"))
    }
}

fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub table: QTable,
    pub converged: bool,
    pub episodes: usize,
    pub td_average: f64,
}

fn sample_action(policy: &[f64], rng: &mut impl Rng) -> Action {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in policy.iter().enumerate() {
        acc += p;
        if u < acc {
            return Action::from_index(i).expect("policy width matches action set");
        }
    }
    Action::from_index(policy.len() - 1).expect("policy width matches action set")
}

fn background_actions(hw: &Highway, opponents: &PolicyMap, rng: &mut impl Rng, actions: &mut Vec<Action>) {
    let cfg = hw.config();
    actions.truncate(1);
    for i in 1..hw.vehicles().len() {
        let s = hw.state(i).id(cfg);
        actions.push(sample_action(opponents.policy(s).probs(), rng));
    }
}

/// ε-greedy Q-learning for the ego vehicle while all other vehicles follow
/// `opponents` (the level-(k−1) policies). Deterministic given `seed`.
pub fn train_level_k(env: &EnvConfig, opponents: &PolicyMap, rl: &RlConfig, level: usize, seed: u64) -> Result<TrainOutcome> {
    if level == 0 {
        return Err(Error::Input("level 0 is rule-based, not trained".into()));
    }
    if !(0.0..=1.0).contains(&rl.discount) || rl.learning_rate < 0.0 {
        return Err(Error::Configuration("discount must be in [0, 1] and learning rate ≥ 0".into()));
    }
    let mut rng = rng::stream(seed, &[level as u64]);
    let mut hw = Highway::new(env.clone(), &mut rng)?;
    let mut table = QTable::new(level, Action::ALL.len());
    let mut td_average = f64::NAN;
    let mut actions = Vec::with_capacity(env.vehicles);
    let mut episodes = 0;
    let mut converged = false;

    for episode in 0..rl.episodes {
        episodes = episode + 1;
        let progress = episode as f64 / rl.episodes.max(2).saturating_sub(1) as f64;
        let epsilon = rl.epsilon_start + (rl.epsilon_end - rl.epsilon_start) * progress;
        hw.reset(&mut rng);
        let mut state = hw.state(0).id(env);
        for _ in 0..rl.max_steps {
            let q = table.entry(state).clone();
            let ego = if rng.random::<f64>() < epsilon {
                Action::ALL[rng.random_range(0..Action::ALL.len())]
            } else {
                Action::from_index(argmax(&q)).expect("table width matches action set")
            };
            actions.clear();
            actions.push(ego);
            background_actions(&hw, opponents, &mut rng, &mut actions);
            let step = hw.step(&actions);
            let reward = rl.reward.reward(step.ego_speed / env.max_speed, step.ego_collided, step.ego_changed_lane);
            let next = hw.state(0).id(env);
            let bootstrap = if step.ego_collided {
                0.0
            } else {
                table.entry(next).iter().copied().fold(f64::NEG_INFINITY, f64::max)
            };
            let td = reward + rl.discount * bootstrap - q[ego.index()];
            table.entry(state)[ego.index()] += rl.learning_rate * td;
            *table.visits.entry(state).or_insert(0) += 1;
            td_average = if td_average.is_nan() {
                td.abs()
            } else {
                (1.0 - rl.td_smoothing) * td_average + rl.td_smoothing * td.abs()
            };
            if step.ego_collided {
                break;
            }
            state = next;
        }
        if episodes >= rl.min_episodes && td_average < rl.td_threshold {
            converged = true;
            break;
        }
    }
    if !converged {
        log::info!("level-{level} training hit the episode cap with TD average {td_average:.4}");
    }
    Ok(TrainOutcome {
        table,
        converged,
        episodes,
        td_average,
    })
}

/// Mean undiscounted episode reward of `ego` against `opponents`.
pub fn evaluate<F>(env: &EnvConfig, opponents: &PolicyMap, rl: &RlConfig, episodes: usize, seed: u64, mut ego: F) -> Result<f64>
where
    F: FnMut(StateId, &mut dyn rand::RngCore) -> Action,
{
    let mut rng = rng::stream(seed, &[u64::MAX]);
    let mut hw = Highway::new(env.clone(), &mut rng)?;
    let mut total = 0.0;
    let mut actions = Vec::with_capacity(env.vehicles);
    for _ in 0..episodes {
        hw.reset(&mut rng);
        for _ in 0..rl.max_steps {
            let s = hw.state(0).id(env);
            actions.clear();
            actions.push(ego(s, &mut rng));
            background_actions(&hw, opponents, &mut rng, &mut actions);
            let step = hw.step(&actions);
            total += rl.reward.reward(step.ego_speed / env.max_speed, step.ego_collided, step.ego_changed_lane);
            if step.ego_collided {
                break;
            }
        }
    }
    Ok(total / episodes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levelk::{level0_policy_map, softmax_policy};

    fn small_rl() -> RlConfig {
        RlConfig {
            episodes: 300,
            min_episodes: 300,
            ..Default::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_initial_values() {
        let env = EnvConfig::default();
        let rl = RlConfig {
            learning_rate: 0.0,
            episodes: 20,
            ..Default::default()
        };
        let out = train_level_k(&env, &level0_policy_map(&env), &rl, 1, 3).unwrap();
        assert!(!out.table.values.is_empty());
        assert!(out.table.values.values().all(|q| q.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn same_seed_same_table() {
        let env = EnvConfig::default();
        let opp = level0_policy_map(&env);
        let a = train_level_k(&env, &opp, &small_rl(), 1, 42).unwrap();
        let b = train_level_k(&env, &opp, &small_rl(), 1, 42).unwrap();
        assert_eq!(a, b);
        let c = train_level_k(&env, &opp, &small_rl(), 1, 43).unwrap();
        assert_ne!(a.table, c.table);
    }

    #[test]
    fn level_zero_is_not_trainable() {
        let env = EnvConfig::default();
        assert!(train_level_k(&env, &level0_policy_map(&env), &small_rl(), 0, 1).is_err());
    }

    #[test]
    fn nearest_populated_state_fallback() {
        let env = EnvConfig::default();
        let mut t = QTable::new(1, 5);
        let near = EnvState { lane: 1, front_gap: 2, rel_speed: 1, side_gap: 2, speed: 2 };
        let far = EnvState { lane: 0, front_gap: 0, rel_speed: 0, side_gap: 0, speed: 0 };
        t.values.insert(near.id(&env), vec![1.0; 5]);
        t.values.insert(far.id(&env), vec![2.0; 5]);
        let query = EnvState { speed: 3, ..near };
        let (id, q) = t.resolve(query.id(&env), &env).unwrap();
        assert_eq!(id, near.id(&env));
        assert_eq!(q, &[1.0; 5]);
        assert!(matches!(QTable::new(1, 5).resolve(0, &env), Err(Error::MissingState(0))));
    }

    #[test]
    fn trained_policy_is_a_distribution() {
        let env = EnvConfig::default();
        let out = train_level_k(&env, &level0_policy_map(&env), &small_rl(), 1, 5).unwrap();
        for q in out.table.values.values() {
            let p = softmax_policy(q).unwrap();
            assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
