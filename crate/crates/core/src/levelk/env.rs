//! Toy ring-road highway and its state discretization.
//!
//! Vehicles drive on `lanes` parallel circular lanes of length
//! `ring_length`. Each step every vehicle picks one of five actions; the ego
//! vehicle (index 0) is the learner and everyone else follows a fixed
//! opponent policy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::StateId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    Maintain,
    Accelerate,
    Decelerate,
    HardBrake,
    ChangeLane,
}

impl Action {
    pub const ALL: [Action; 5] = [
        Action::Maintain,
        Action::Accelerate,
        Action::Decelerate,
        Action::HardBrake,
        Action::ChangeLane,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    pub fn label(self) -> &'static str {
        match self {
            Action::Maintain => "maintain",
            Action::Accelerate => "accelerate",
            Action::Decelerate => "decelerate",
            Action::HardBrake => "hard-brake",
            Action::ChangeLane => "change-lane",
        }
    }
}

/// Ordered action labels. Stored with every artifact because the K-S
/// statistic depends on the order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionSet(Vec<String>);

impl Default for ActionSet {
    fn default() -> Self {
        ActionSet(Action::ALL.iter().map(|a| a.label().to_string()).collect())
    }
}

impl ActionSet {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::Configuration("need at least two actions".into()));
        }
        Ok(ActionSet(labels))
    }

    pub fn labels(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Errors unless `other` lists the same actions in the same order.
    pub fn ensure_matches(&self, other: &ActionSet) -> Result<()> {
        if self != other {
            return Err(Error::Configuration(format!(
                "action order mismatch: {:?} vs {:?}",
                self.0, other.0
            )));
        }
        Ok(())
    }
}

/// Returns the bin of `value` given ascending interior edges.
fn bin(value: f64, edges: &[f64]) -> u8 {
    edges.iter().take_while(|&&e| value >= e).count() as u8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub lanes: usize,
    pub vehicles: usize,
    /// Metres.
    pub ring_length: f64,
    /// Seconds per step.
    pub dt: f64,
    pub vehicle_length: f64,
    pub max_speed: f64,
    /// Acceleration (m/s²) of maintain, accelerate, decelerate, hard-brake.
    pub accelerations: [f64; 4],
    /// Interior speed-bin edges (m/s); 5 bins.
    pub speed_edges: Vec<f64>,
    /// Interior front-gap edges (m); 4 bins.
    pub gap_edges: Vec<f64>,
    /// Interior leader-minus-ego speed edges (m/s); 3 bins.
    pub rel_speed_edges: Vec<f64>,
    /// Interior target-lane gap edges (m); 3 bins.
    pub side_gap_edges: Vec<f64>,
    pub initial_speed: (f64, f64),
    pub level0: Level0Rule,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            lanes: 3,
            vehicles: 10,
            ring_length: 200.0,
            dt: 0.5,
            vehicle_length: 5.0,
            max_speed: 30.0,
            accelerations: [0.0, 2.0, -2.0, -5.0],
            speed_edges: vec![6.0, 12.0, 18.0, 24.0],
            gap_edges: vec![5.0, 15.0, 40.0],
            rel_speed_edges: vec![-2.0, 2.0],
            side_gap_edges: vec![5.0, 15.0],
            initial_speed: (10.0, 25.0),
            level0: Level0Rule::default(),
        }
    }
}

/// Hand-crafted non-strategic policy: brake when close, speed up when free.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Level0Rule {
    /// Front-gap bins at or below this hard-brake.
    pub hard_brake_gap_bin: u8,
    /// Front-gap bins at or below this (and above the hard-brake bin) decelerate.
    pub decelerate_gap_bin: u8,
    /// Front-gap bins at or above this allow accelerating.
    pub free_gap_bin: u8,
    /// Accelerate only below this speed bin.
    pub speed_cap_bin: u8,
    /// Probability placed on each non-chosen action.
    pub epsilon: f64,
}

impl Default for Level0Rule {
    fn default() -> Self {
        Level0Rule {
            hard_brake_gap_bin: 0,
            decelerate_gap_bin: 1,
            free_gap_bin: 3,
            speed_cap_bin: 3,
            epsilon: 0.01,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let ascending = |e: &[f64]| e.windows(2).all(|w| w[0] < w[1]) && e.iter().all(|v| v.is_finite());
        if self.lanes < 2 {
            return Err(Error::Configuration("need at least two lanes".into()));
        }
        if self.vehicles < 1 {
            return Err(Error::Configuration("need at least one vehicle".into()));
        }
        if !(self.ring_length > self.vehicle_length * self.vehicles as f64) {
            return Err(Error::Configuration("ring too short for the vehicles".into()));
        }
        if !(self.dt > 0.0 && self.max_speed > 0.0) {
            return Err(Error::Configuration("dt and max speed must be positive".into()));
        }
        for (name, edges) in [
            ("speed", &self.speed_edges),
            ("gap", &self.gap_edges),
            ("relative speed", &self.rel_speed_edges),
            ("side gap", &self.side_gap_edges),
        ] {
            if !ascending(edges) {
                return Err(Error::Configuration(format!("{name} edges must be ascending")));
            }
        }
        let eps = self.level0.epsilon;
        if !(0.0..=1.0 / (Action::ALL.len() as f64)).contains(&eps) {
            return Err(Error::Configuration(format!("level-0 ε = {eps} out of range")));
        }
        Ok(())
    }

    pub fn cardinalities(&self) -> [usize; 5] {
        [
            self.lanes,
            self.gap_edges.len() + 1,
            self.rel_speed_edges.len() + 1,
            self.side_gap_edges.len() + 1,
            self.speed_edges.len() + 1,
        ]
    }

    pub fn state_count(&self) -> usize {
        self.cardinalities().iter().product()
    }

    pub fn discretize(&self, obs: &Observation) -> EnvState {
        EnvState {
            lane: obs.lane.min(self.lanes - 1) as u8,
            front_gap: bin(obs.front_gap, &self.gap_edges),
            rel_speed: if obs.front_gap.is_finite() {
                bin(obs.front_rel_speed, &self.rel_speed_edges)
            } else {
                // no leader: treat as steady
                bin(0.0, &self.rel_speed_edges)
            },
            side_gap: bin(obs.target_gap, &self.side_gap_edges),
            speed: bin(obs.speed, &self.speed_edges),
        }
    }

    /// A representative continuous value inside each bin, used to realize
    /// a state as a concrete scene.
    pub(crate) fn bin_center(edges: &[f64], bin: u8, open_width: f64) -> f64 {
        let b = bin as usize;
        match (b.checked_sub(1).map(|i| edges[i]), edges.get(b)) {
            (None, Some(&hi)) if hi > 0.0 => (hi - open_width).max(hi * 0.5),
            (None, Some(&hi)) => hi - open_width,
            (Some(lo), Some(&hi)) => 0.5 * (lo + hi),
            (Some(lo), None) => lo + open_width,
            (None, None) => 0.0,
        }
    }
}

/// Continuous quantities seen by one vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub lane: usize,
    /// Bumper-to-bumper distance to the leader; infinite without one.
    pub front_gap: f64,
    /// Leader speed minus own speed.
    pub front_rel_speed: f64,
    /// Smaller of the front and rear gaps in the lane-change target lane.
    pub target_gap: f64,
    pub speed: f64,
}

/// Discretized state. Bijective with [`StateId`] through mixed-radix encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EnvState {
    pub lane: u8,
    pub front_gap: u8,
    pub rel_speed: u8,
    pub side_gap: u8,
    pub speed: u8,
}

impl EnvState {
    fn digits(&self) -> [usize; 5] {
        [
            self.lane as usize,
            self.front_gap as usize,
            self.rel_speed as usize,
            self.side_gap as usize,
            self.speed as usize,
        ]
    }

    pub fn id(&self, cfg: &EnvConfig) -> StateId {
        let card = cfg.cardinalities();
        self.digits()
            .iter()
            .zip(card)
            .fold(0usize, |acc, (&d, c)| acc * c + d) as StateId
    }

    pub fn from_id(id: StateId, cfg: &EnvConfig) -> Result<Self> {
        let card = cfg.cardinalities();
        if id as usize >= cfg.state_count() {
            return Err(Error::Input(format!("state id {id} ≥ {}", cfg.state_count())));
        }
        let mut rest = id as usize;
        let mut digits = [0usize; 5];
        for i in (0..5).rev() {
            digits[i] = rest % card[i];
            rest /= card[i];
        }
        Ok(EnvState {
            lane: digits[0] as u8,
            front_gap: digits[1] as u8,
            rel_speed: digits[2] as u8,
            side_gap: digits[3] as u8,
            speed: digits[4] as u8,
        })
    }

    pub fn hamming(&self, other: &EnvState) -> usize {
        self.digits().iter().zip(other.digits()).filter(|(a, b)| **a != *b).count()
    }
}

/// Lane a lane change from `lane` heads to: the only neighbour at the edge,
/// otherwise the neighbour with the larger gap (lower index on ties).
pub fn target_lane(lane: usize, lanes: usize, gap_in: impl Fn(usize) -> f64) -> usize {
    if lane == 0 {
        1
    } else if lane + 1 == lanes {
        lane - 1
    } else if gap_in(lane + 1) > gap_in(lane - 1) {
        lane + 1
    } else {
        lane - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vehicle {
    pub lane: usize,
    pub position: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub ego_speed: f64,
    pub ego_collided: bool,
    pub ego_changed_lane: bool,
}

#[derive(Debug, Clone)]
pub struct Highway {
    cfg: EnvConfig,
    vehicles: Vec<Vehicle>,
}

impl Highway {
    pub fn new(cfg: EnvConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut hw = Highway {
            cfg,
            vehicles: Vec::new(),
        };
        hw.reset(rng);
        Ok(hw)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn vehicles(&self) -> &[Vehicle] {
        &self.vehicles
    }

    /// Spreads vehicles over evenly spaced slots with random lanes, offsets
    /// and speeds.
    pub fn reset(&mut self, rng: &mut impl Rng) {
        let cfg = &self.cfg;
        let per_lane = cfg.vehicles.div_ceil(cfg.lanes);
        let slot = cfg.ring_length / per_lane as f64;
        let jitter = (slot - cfg.vehicle_length - 1.0).max(0.0) * 0.5;
        let mut slots: Vec<(usize, usize)> = (0..cfg.lanes).flat_map(|l| (0..per_lane).map(move |s| (l, s))).collect();
        // partial Fisher–Yates for a random subset of slots
        for i in 0..cfg.vehicles {
            let j = rng.random_range(i..slots.len());
            slots.swap(i, j);
        }
        self.vehicles = slots[..cfg.vehicles]
            .iter()
            .map(|&(lane, s)| Vehicle {
                lane,
                position: s as f64 * slot + rng.random_range(0.0..=jitter),
                speed: rng.random_range(cfg.initial_speed.0..=cfg.initial_speed.1),
            })
            .collect();
    }

    fn forward(&self, from: f64, to: f64) -> f64 {
        (to - from).rem_euclid(self.cfg.ring_length)
    }

    /// Front gap, leader speed, and rear gap of a hypothetical vehicle at
    /// `position` in `lane`, ignoring vehicle `skip`.
    fn neighbours(&self, lane: usize, position: f64, skip: usize) -> (f64, Option<f64>, f64) {
        let len = self.cfg.vehicle_length;
        let mut front = (f64::INFINITY, None);
        let mut rear = f64::INFINITY;
        for (j, v) in self.vehicles.iter().enumerate() {
            if j == skip || v.lane != lane {
                continue;
            }
            let ahead = self.forward(position, v.position);
            let behind = self.forward(v.position, position);
            if ahead - len < front.0 {
                front = (ahead - len, Some(v.speed));
            }
            rear = rear.min(behind - len);
        }
        (front.0, front.1, rear)
    }

    pub fn observe(&self, i: usize) -> Observation {
        let v = self.vehicles[i];
        let (front_gap, leader_speed, _) = self.neighbours(v.lane, v.position, i);
        let side = |lane: usize| {
            let (f, _, r) = self.neighbours(lane, v.position, i);
            f.min(r)
        };
        let target = target_lane(v.lane, self.cfg.lanes, side);
        Observation {
            lane: v.lane,
            front_gap,
            front_rel_speed: leader_speed.map_or(0.0, |s| s - v.speed),
            target_gap: side(target),
            speed: v.speed,
        }
    }

    pub fn state(&self, i: usize) -> EnvState {
        self.cfg.discretize(&self.observe(i))
    }

    /// Applies one action per vehicle and advances time by `dt`.
    ///
    /// Only the ego vehicle can crash; other vehicles that would overlap
    /// their leader are pushed back behind it and matched to its speed.
    pub fn step(&mut self, actions: &[Action]) -> StepResult {
        let cfg = self.cfg.clone();
        let targets: Vec<usize> = (0..self.vehicles.len())
            .map(|i| {
                let v = self.vehicles[i];
                target_lane(v.lane, cfg.lanes, |lane| {
                    let (f, _, r) = self.neighbours(lane, v.position, i);
                    f.min(r)
                })
            })
            .collect();
        let mut ego_changed_lane = false;
        for (i, (v, &a)) in self.vehicles.iter_mut().zip(actions).enumerate() {
            let accel = match a {
                Action::ChangeLane => {
                    v.lane = targets[i];
                    ego_changed_lane |= i == 0;
                    0.0
                }
                other => cfg.accelerations[other.index()],
            };
            v.speed = (v.speed + accel * cfg.dt).clamp(0.0, cfg.max_speed);
            v.position = (v.position + v.speed * cfg.dt).rem_euclid(cfg.ring_length);
        }

        let len = cfg.vehicle_length;
        let ego = self.vehicles[0];
        let ego_collided = self.vehicles.iter().skip(1).any(|v| {
            v.lane == ego.lane && self.forward(ego.position, v.position).min(self.forward(v.position, ego.position)) < len
        });

        // settle overlaps among background traffic, back to front
        let mut order: Vec<usize> = (1..self.vehicles.len()).collect();
        order.sort_by(|&a, &b| self.vehicles[a].position.total_cmp(&self.vehicles[b].position));
        for _ in 0..self.vehicles.len() {
            let mut moved = false;
            for &i in &order {
                let v = self.vehicles[i];
                let (gap, leader_speed, _) = self.neighbours(v.lane, v.position, i);
                if gap < 0.5 && gap.is_finite() {
                    let push = 0.5 - gap;
                    let w = &mut self.vehicles[i];
                    w.position = (w.position - push).rem_euclid(cfg.ring_length);
                    w.speed = w.speed.min(leader_speed.unwrap_or(w.speed));
                    moved = true;
                }
            }
            if !moved {
                break;
            }
        }

        StepResult {
            ego_speed: self.vehicles[0].speed,
            ego_collided,
            ego_changed_lane,
        }
    }
}
