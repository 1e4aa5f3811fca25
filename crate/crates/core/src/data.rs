//! Trajectory ingestion, action labeling, and synthetic drivers with known
//! levels.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitting::DriverRecord;
use crate::game::{mixed_policy, MixedStrategy};
use crate::gp::ModelCache;
use crate::levelk::env::target_lane;
use crate::levelk::{Action, EnvConfig, EnvState, Observation};
use crate::policy::Policy;
use crate::rng;
use crate::StateId;

pub const REQUIRED_COLUMNS: [&str; 6] = ["vehicle_id", "frame", "local_x", "local_y", "lane_id", "velocity"];

const FEET_TO_METRES: f64 = 0.3048;

/// One trajectory sample. `local_y` is the longitudinal coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub vehicle_id: u64,
    pub frame: u64,
    pub local_x: f64,
    pub local_y: f64,
    pub lane_id: i64,
    pub velocity: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    #[default]
    Metres,
    /// NGSIM-native feet and feet per second.
    Feet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    /// Seconds between consecutive frames.
    pub frame_dt: f64,
    pub units: Units,
    /// `|a|` below this (m/s²) is maintain.
    pub maintain_threshold: f64,
    /// `a` at or below minus this is hard-brake.
    pub hard_brake_threshold: f64,
    /// Lane index = `lane_id − lane_offset`, clamped to the configured lanes.
    pub lane_offset: i64,
    /// Consecutive samples further apart than this many frames are a track
    /// break, not a transition.
    pub max_frame_gap: u64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            frame_dt: 0.1,
            units: Units::Metres,
            maintain_threshold: 0.5,
            hard_brake_threshold: 2.5,
            lane_offset: 1,
            max_frame_gap: 1,
        }
    }
}

impl IngestConfig {
    fn validate(&self) -> Result<()> {
        if !(self.frame_dt > 0.0) || self.max_frame_gap == 0 {
            return Err(Error::Configuration("frame_dt and max_frame_gap must be positive".into()));
        }
        if !(self.maintain_threshold > 0.0 && self.hard_brake_threshold > self.maintain_threshold) {
            return Err(Error::Configuration(
                "need 0 < maintain threshold < hard-brake threshold".into(),
            ));
        }
        Ok(())
    }

    /// Action taken between two samples of one vehicle.
    pub fn label(&self, accel: f64, lane_changed: bool) -> Action {
        if lane_changed {
            Action::ChangeLane
        } else if accel <= -self.hard_brake_threshold {
            Action::HardBrake
        } else if accel <= -self.maintain_threshold {
            Action::Decelerate
        } else if accel >= self.maintain_threshold {
            Action::Accelerate
        } else {
            Action::Maintain
        }
    }

    /// An acceleration labeled as `action` with margin from every threshold.
    fn representative_accel(&self, action: Action) -> f64 {
        match action {
            Action::Maintain | Action::ChangeLane => 0.0,
            Action::Accelerate => 2.0 * self.maintain_threshold,
            Action::Decelerate => -0.5 * (self.maintain_threshold + self.hard_brake_threshold),
            Action::HardBrake => -2.0 * self.hard_brake_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub records: Vec<DriverRecord>,
    pub rows: usize,
    /// Rows whose frame did not increase for their vehicle.
    pub rejected_rows: usize,
    pub transitions: usize,
    pub track_breaks: usize,
}

#[derive(Debug, Clone, Copy)]
struct Car {
    lane: usize,
    y: f64,
    speed: f64,
}

/// Observation on an open road: same gap conventions as the ring
/// environment, without wrap-around.
fn open_road_observation(ego: usize, cars: &[Car], env: &EnvConfig) -> Observation {
    let me = cars[ego];
    let len = env.vehicle_length;
    let lane_gaps = |lane: usize| {
        let mut front = (f64::INFINITY, None);
        let mut rear = f64::INFINITY;
        for (j, c) in cars.iter().enumerate() {
            if j == ego || c.lane != lane {
                continue;
            }
            let ahead = c.y - me.y;
            if ahead >= 0.0 && ahead - len < front.0 {
                front = (ahead - len, Some(c.speed));
            }
            if ahead <= 0.0 {
                rear = rear.min(-ahead - len);
            }
        }
        (front.0, front.1, rear)
    };
    let (front_gap, leader_speed, _) = lane_gaps(me.lane);
    let side = |lane: usize| {
        let (f, _, r) = lane_gaps(lane);
        f.min(r)
    };
    let target = target_lane(me.lane, env.lanes, side);
    Observation {
        lane: me.lane,
        front_gap,
        front_rel_speed: leader_speed.map_or(0.0, |s| s - me.speed),
        target_gap: side(target),
        speed: me.speed,
    }
}

fn read_rows<R: Read>(reader: R) -> Result<Vec<TrajectoryRow>> {
    let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = csv.headers()?.clone();
    let missing: Vec<String> = REQUIRED_COLUMNS
        .iter()
        .filter(|c| !headers.iter().any(|h| h == **c))
        .map(|c| c.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Schema(missing));
    }
    csv.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Parses a trajectory CSV into per-vehicle action counts.
pub fn ingest_trajectories(path: &Path, env: &EnvConfig, cfg: &IngestConfig) -> Result<IngestSummary> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(file, env, cfg)
}

pub fn ingest_reader<R: Read>(reader: R, env: &EnvConfig, cfg: &IngestConfig) -> Result<IngestSummary> {
    env.validate()?;
    cfg.validate()?;
    let rows = read_rows(reader)?;
    let scale = match cfg.units {
        Units::Metres => 1.0,
        Units::Feet => FEET_TO_METRES,
    };

    let mut last_frame: HashMap<u64, u64> = HashMap::new();
    let mut accepted = Vec::with_capacity(rows.len());
    let mut rejected_rows = 0;
    for row in &rows {
        if !(row.local_y.is_finite() && row.velocity.is_finite()) {
            return Err(Error::Input(format!(
                "vehicle {} frame {}: non-finite position or speed",
                row.vehicle_id, row.frame
            )));
        }
        match last_frame.get(&row.vehicle_id) {
            Some(&f) if row.frame <= f => rejected_rows += 1,
            _ => {
                last_frame.insert(row.vehicle_id, row.frame);
                accepted.push(*row);
            }
        }
    }
    if rejected_rows > 0 {
        log::warn!("rejected {rejected_rows} rows with non-increasing frames");
    }

    let car = |r: &TrajectoryRow| Car {
        lane: (r.lane_id - cfg.lane_offset).clamp(0, env.lanes as i64 - 1) as usize,
        y: r.local_y * scale,
        speed: r.velocity * scale,
    };
    let mut frames: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, r) in accepted.iter().enumerate() {
        frames.entry(r.frame).or_default().push(i);
    }
    let mut states = vec![0 as StateId; accepted.len()];
    for members in frames.values() {
        let cars: Vec<Car> = members.iter().map(|&i| car(&accepted[i])).collect();
        for (k, &i) in members.iter().enumerate() {
            states[i] = env.discretize(&open_road_observation(k, &cars, env)).id(env);
        }
    }

    let mut tracks: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, r) in accepted.iter().enumerate() {
        tracks.entry(r.vehicle_id).or_default().push(i);
    }
    let mut records = Vec::new();
    let (mut transitions, mut track_breaks) = (0, 0);
    for (&vehicle, idx) in &tracks {
        let mut record = DriverRecord::new(vehicle);
        for w in idx.windows(2) {
            let (a, b) = (&accepted[w[0]], &accepted[w[1]]);
            let gap = b.frame - a.frame;
            if gap > cfg.max_frame_gap {
                track_breaks += 1;
                continue;
            }
            let accel = (b.velocity - a.velocity) * scale / (gap as f64 * cfg.frame_dt);
            let action = cfg.label(accel, a.lane_id != b.lane_id);
            record.record(states[w[0]], action.index(), Action::ALL.len());
            transitions += 1;
        }
        if !record.counts.is_empty() {
            records.push(record);
        }
    }
    Ok(IngestSummary {
        records,
        rows: rows.len(),
        rejected_rows,
        transitions,
        track_breaks,
    })
}

/// Writes records as trajectories that [`ingest_trajectories`] maps back to
/// the same counts. Every sample is a two-frame scene of its own: the ego at
/// a representative point of its state bins, plus one-frame helper vehicles
/// that set the gaps.
pub fn export_records<W: Write>(records: &[DriverRecord], env: &EnvConfig, cfg: &IngestConfig, out: W) -> Result<()> {
    env.validate()?;
    cfg.validate()?;
    if cfg.units != Units::Metres {
        return Err(Error::Configuration("export writes metres only".into()));
    }
    let mut csv = csv::Writer::from_writer(out);
    let mut next_helper = records.iter().map(|r| r.driver_id).max().map_or(0, |m| m + 1);
    let mut frame = 0u64;
    let len = env.vehicle_length;
    let y0 = 1000.0;
    for record in records {
        for (&state, counts) in &record.counts {
            let s = EnvState::from_id(state, env)?;
            let lane = s.lane as usize;
            let speed = EnvConfig::bin_center(&env.speed_edges, s.speed, 3.0);
            let gap = EnvConfig::bin_center(&env.gap_edges, s.front_gap, 20.0);
            let rel = EnvConfig::bin_center(&env.rel_speed_edges, s.rel_speed, 1.0);
            let side = EnvConfig::bin_center(&env.side_gap_edges, s.side_gap, 10.0);
            let lane_id = |l: usize| l as i64 + cfg.lane_offset;
            for (a, &n) in counts.iter().enumerate() {
                let action = Action::from_index(a)
                    .ok_or_else(|| Error::Input(format!("record {} has {} actions", record.driver_id, counts.len())))?;
                for _ in 0..n {
                    let mut row = |vehicle_id, frame, lane, y, velocity| {
                        csv.serialize(TrajectoryRow {
                            vehicle_id,
                            frame,
                            local_x: 0.0,
                            local_y: y,
                            lane_id: lane_id(lane),
                            velocity,
                        })
                    };
                    row(record.driver_id, frame, lane, y0, speed)?;
                    row(next_helper, frame, lane, y0 + gap + len, speed + rel)?;
                    next_helper += 1;
                    for l in [lane.checked_sub(1), (lane + 1 < env.lanes).then_some(lane + 1)].into_iter().flatten() {
                        row(next_helper, frame, l, y0 + side + len, speed)?;
                        next_helper += 1;
                    }
                    let (next_lane, next_speed) = match action {
                        Action::ChangeLane => (if lane == 0 { 1 } else { lane - 1 }, speed),
                        other => (lane, speed + cfg.representative_accel(other) * cfg.frame_dt),
                    };
                    row(record.driver_id, frame + 1, next_lane, y0 + speed * cfg.frame_dt, next_speed)?;
                    // a two-frame hole closes the track segment
                    frame += cfg.max_frame_gap + 2;
                }
            }
        }
    }
    csv.flush().map_err(|e| Error::io("<export>", e))
}

pub fn export_trajectories(records: &[DriverRecord], env: &EnvConfig, cfg: &IngestConfig, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    export_records(records, env, cfg, std::io::BufWriter::new(file))
}

pub fn save_records(records: &[DriverRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer(std::io::BufWriter::new(file), records)?;
    Ok(())
}

pub fn load_records(path: &Path) -> Result<Vec<DriverRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

/// A driver whose actions are drawn from a known level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDriverSpec {
    pub driver_id: u64,
    pub level: f64,
    pub states: Vec<StateId>,
    pub samples: u64,
    pub seed: u64,
}

/// Where a synthetic driver's policy at a state comes from.
#[derive(Debug, Clone, Copy)]
pub enum DriverSource<'a> {
    /// Shift-normalized GP prediction at the spec's level.
    Gp(&'a ModelCache),
    /// Mixture of the exact integer-level training policies.
    Mixture(&'a ModelCache, &'a MixedStrategy),
}

impl DriverSource<'_> {
    fn policy(&self, state: StateId, level: f64) -> Result<Policy> {
        let (DriverSource::Gp(cache) | DriverSource::Mixture(cache, _)) = self;
        let gp = cache.get(state).ok_or(Error::UnfittedState(state))?;
        match self {
            DriverSource::Gp(_) => Ok(gp.predict_normalized(level)),
            DriverSource::Mixture(_, coeffs) => mixed_policy(coeffs, gp.policies()),
        }
    }
}

/// I.i.d. samples per state; state `s` draws from the stream
/// `(seed, driver, s)`.
pub fn synthesize_driver(spec: &SyntheticDriverSpec, source: DriverSource<'_>) -> Result<DriverRecord> {
    if spec.samples == 0 {
        return Err(Error::Input("synthetic driver needs at least one sample per state".into()));
    }
    let mut record = DriverRecord::new(spec.driver_id);
    for &state in &spec.states {
        let policy = source.policy(state, spec.level)?;
        let dist = WeightedIndex::new(policy.probs()).map_err(|e| Error::Numerical(e.to_string()))?;
        let mut rng = rng::stream(spec.seed, &[spec.driver_id, u64::from(state)]);
        let mut counts = vec![0u64; policy.len()];
        for _ in 0..spec.samples {
            counts[dist.sample(&mut rng)] += 1;
        }
        record.counts.insert(state, counts);
    }
    Ok(record)
}
