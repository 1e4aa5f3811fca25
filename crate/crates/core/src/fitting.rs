//! Matching observed driver behaviour to a level: empirical policies,
//! Kolmogorov–Smirnov scoring, simulated-annealing level search and the
//! per-driver comparison loops for continuous and integer levels.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::StateGP;
use crate::policy::Policy;
use crate::rng;
use crate::StateId;

/// Smallest probability an empirical policy may assign to any action.
pub const PROBABILITY_FLOOR: f64 = 0.01;

/// Action frequencies with every entry floored at [`PROBABILITY_FLOOR`] and
/// the result renormalized once.
pub fn empirical_policy(counts: &[u64]) -> Result<Policy> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Input("empirical policy of zero observations".into()));
    }
    let floored: Vec<f64> = counts
        .iter()
        .map(|&c| (c as f64 / total as f64).max(PROBABILITY_FLOOR))
        .collect();
    let sum: f64 = floored.iter().sum();
    Policy::new(floored.into_iter().map(|p| p / sum).collect())
}

/// Kolmogorov distribution tail `Q_KS(λ) = 2 Σ_{j≥1} (−1)^{j−1} e^{−2j²λ²}`.
///
/// Small arguments use the dual theta-function series, which converges where
/// the alternating one does not.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda.is_nan() {
        return f64::NAN;
    }
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        let y = (-PI * PI / (8.0 * lambda * lambda)).exp();
        let p = (2.0 * PI).sqrt() / lambda * (y + y.powi(9) + y.powi(25) + y.powi(49));
        (1.0 - p).clamp(0.0, 1.0)
    } else {
        let x = (-2.0 * lambda * lambda).exp();
        (2.0 * (x - x.powi(4) + x.powi(9))).clamp(0.0, 1.0)
    }
}

/// `max_i |F_model(i) − F_data(i)|` over prefix sums in action order.
pub fn ks_statistic(model: &Policy, data: &Policy) -> Result<f64> {
    if model.len() != data.len() {
        return Err(Error::Input(format!(
            "policies over {} and {} actions",
            model.len(),
            data.len()
        )));
    }
    let mut fm = 0.0;
    let mut fd = 0.0;
    let mut d: f64 = 0.0;
    for (m, o) in model.probs().iter().zip(data.probs()) {
        fm += m;
        fd += o;
        d = d.max((fm - fd).abs());
    }
    Ok(d)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum KsMode {
    /// Model policy is the reference distribution; `n_eff` is the data size.
    #[default]
    OneSample,
    /// Model treated as an empirical sample of `model_samples` draws.
    TwoSample { model_samples: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsScore {
    pub statistic: f64,
    /// Asymptotic p-value; higher is a better fit.
    pub cv: f64,
}

impl KsScore {
    /// Higher p-value first; on equal p-values (saturation at 1) the smaller
    /// statistic wins.
    pub fn beats(&self, other: &KsScore) -> bool {
        self.cv > other.cv || (self.cv == other.cv && self.statistic < other.statistic)
    }
}

pub fn ks_compare(model: &Policy, data: &Policy, n_eff: u64) -> Result<KsScore> {
    ks_compare_with(model, data, n_eff, KsMode::OneSample)
}

pub fn ks_compare_with(model: &Policy, data: &Policy, n_eff: u64, mode: KsMode) -> Result<KsScore> {
    if n_eff == 0 {
        return Err(Error::Input("K-S test with zero observations".into()));
    }
    let statistic = ks_statistic(model, data)?;
    let n = match mode {
        KsMode::OneSample => n_eff as f64,
        KsMode::TwoSample { model_samples } => {
            if model_samples == 0 {
                return Err(Error::Configuration("two-sample K-S needs model_samples ≥ 1".into()));
            }
            let (a, b) = (n_eff as f64, model_samples as f64);
            a * b / (a + b)
        }
    };
    let sqrt_n = n.sqrt();
    let cv = kolmogorov_q(statistic * (sqrt_n + 0.12 + 0.11 / sqrt_n));
    Ok(KsScore { statistic, cv })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AcceptanceRule {
    /// Improvements always accepted, regressions with `exp(−Δ/T)`.
    #[default]
    Standard,
    /// `exp(−(cv_new − cv)/T)`: improvements accepted with probability < 1.
    AsPrinted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaConfig {
    pub initial_temperature: f64,
    pub cooling: f64,
    pub max_steps: usize,
    /// Proposal s.d. at the initial temperature, as a fraction of the level span.
    pub neighbor_scale: f64,
    pub restart_levels: Vec<f64>,
    pub acceptance: AcceptanceRule,
}

impl Default for SaConfig {
    fn default() -> Self {
        SaConfig {
            initial_temperature: 2.0,
            cooling: 0.9,
            max_steps: 50,
            neighbor_scale: 0.25,
            restart_levels: vec![0.0, 1.0, 2.0, 3.0],
            acceptance: AcceptanceRule::Standard,
        }
    }
}

impl SaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cooling > 0.0 && self.cooling < 1.0) {
            return Err(Error::Configuration(format!("cooling {} outside (0, 1)", self.cooling)));
        }
        if self.max_steps == 0 {
            return Err(Error::Configuration("max_steps must be ≥ 1".into()));
        }
        if !(self.initial_temperature > 0.0) || !(self.neighbor_scale > 0.0) {
            return Err(Error::Configuration("temperature and neighbour scale must be positive".into()));
        }
        if self.restart_levels.is_empty() {
            return Err(Error::Configuration("at least one restart level required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub level: f64,
    #[serde(flatten)]
    pub score: KsScore,
}

/// Simulated annealing over `[lo, hi]`, returning the best point visited.
pub fn anneal<F, R>(mut score: F, init: f64, (lo, hi): (f64, f64), cfg: &SaConfig, rng: &mut R) -> Result<Visit>
where
    F: FnMut(f64) -> Result<KsScore>,
    R: Rng + ?Sized,
{
    let span = hi - lo;
    let mut level = init.clamp(lo, hi);
    let mut current = score(level)?;
    let mut best = Visit { level, score: current };
    let mut t = cfg.initial_temperature;
    for _ in 0..cfg.max_steps {
        let sd = cfg.neighbor_scale * t / cfg.initial_temperature * span;
        let step = Normal::new(0.0, sd).map_err(|e| Error::Numerical(e.to_string()))?;
        let candidate = (level + step.sample(rng)).clamp(lo, hi);
        let next = score(candidate)?;
        let delta = match cfg.acceptance {
            AcceptanceRule::Standard if next.cv == current.cv => next.statistic - current.statistic,
            AcceptanceRule::Standard => current.cv - next.cv,
            AcceptanceRule::AsPrinted => next.cv - current.cv,
        };
        if delta <= 0.0 || rng.random::<f64>() < (-delta / t).exp() {
            level = candidate;
            current = next;
            if current.beats(&best.score) {
                best = Visit { level, score: current };
            }
        }
        t *= cfg.cooling;
    }
    Ok(best)
}

/// Annealed search for the level whose predicted policy best explains
/// `data` at one state.
pub fn sa_fit_level<R: Rng + ?Sized>(
    model: &StateGP,
    data: &Policy,
    n_eff: u64,
    init_level: f64,
    cfg: &SaConfig,
    mode: KsMode,
    rng: &mut R,
) -> Result<Visit> {
    anneal(
        |l| ks_compare_with(&model.predict_normalized(l), data, n_eff, mode),
        init_level,
        model.level_range(),
        cfg,
        rng,
    )
}

/// Exhaustive search on an evenly spaced grid (the SA adequacy oracle).
pub fn grid_fit_level(model: &StateGP, data: &Policy, n_eff: u64, step: f64, mode: KsMode) -> Result<Visit> {
    let (lo, hi) = model.level_range();
    grid_search(|l| ks_compare_with(&model.predict_normalized(l), data, n_eff, mode), (lo, hi), step)
}

pub fn grid_search<F>(mut score: F, (lo, hi): (f64, f64), step: f64) -> Result<Visit>
where
    F: FnMut(f64) -> Result<KsScore>,
{
    if !(step > 0.0) {
        return Err(Error::Parameter(format!("grid step {step}")));
    }
    let points = ((hi - lo) / step).round() as usize;
    let mut best: Option<Visit> = None;
    for i in 0..=points {
        let level = (lo + i as f64 * step).min(hi);
        let s = score(level)?;
        if best.is_none_or(|b| s.beats(&b.score)) {
            best = Some(Visit { level, score: s });
        }
    }
    Ok(best.expect("grid has at least one point"))
}

/// Observed action counts of one driver.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriverRecord {
    pub driver_id: u64,
    pub counts: BTreeMap<StateId, Vec<u64>>,
}

impl DriverRecord {
    pub fn new(driver_id: u64) -> Self {
        DriverRecord {
            driver_id,
            counts: BTreeMap::new(),
        }
    }

    pub fn n_visits(&self, state: StateId) -> u64 {
        self.counts.get(&state).map_or(0, |c| c.iter().sum())
    }

    pub fn record(&mut self, state: StateId, action: usize, actions: usize) {
        let row = self.counts.entry(state).or_insert_with(|| vec![0; actions]);
        row[action] += 1;
    }

    /// States with at least `n_th` visits, ascending.
    pub fn qualifying_states(&self, n_th: u64) -> Vec<StateId> {
        self.counts
            .keys()
            .copied()
            .filter(|&s| self.n_visits(s) >= n_th)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RestartResult {
    pub init: f64,
    pub level: f64,
    pub cv: f64,
    pub statistic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub state_id: StateId,
    pub n_visits: u64,
    pub l_opt: f64,
    pub crit_opt: f64,
    pub statistic: f64,
    pub success: bool,
    pub restarts: Vec<RestartResult>,
}

impl FitResult {
    fn from_restarts(state_id: StateId, n_visits: u64, restarts: Vec<RestartResult>, theta: f64) -> Self {
        let best = restarts
            .iter()
            .copied()
            .reduce(|a, b| {
                let (sa, sb) = (
                    KsScore { statistic: a.statistic, cv: a.cv },
                    KsScore { statistic: b.statistic, cv: b.cv },
                );
                if sb.beats(&sa) {
                    b
                } else {
                    a
                }
            })
            .expect("at least one restart");
        FitResult {
            state_id,
            n_visits,
            l_opt: best.level,
            crit_opt: best.cv,
            statistic: best.statistic,
            success: best.cv > theta,
            restarts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverReport {
    pub driver_id: u64,
    pub n_comparisons: usize,
    pub n_success: usize,
    /// `None` when no state qualified.
    pub percent: Option<f64>,
    pub states: Vec<FitResult>,
}

impl DriverReport {
    fn from_states(driver_id: u64, states: Vec<FitResult>) -> Self {
        let n_comparisons = states.len();
        let n_success = states.iter().filter(|s| s.success).count();
        let percent = (n_comparisons > 0).then(|| 100.0 * n_success as f64 / n_comparisons as f64);
        if percent.is_none() {
            log::warn!("driver {driver_id}: no state reached the visit threshold");
        }
        DriverReport {
            driver_id,
            n_comparisons,
            n_success,
            percent,
            states,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum LevelSearch {
    Annealing,
    Grid { step: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub n_th: u64,
    pub theta: f64,
    pub sa: SaConfig,
    pub ks: KsMode,
    pub search: LevelSearch,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            n_th: 30,
            theta: 0.05,
            sa: SaConfig::default(),
            ks: KsMode::OneSample,
            search: LevelSearch::Annealing,
        }
    }
}

/// Continuous-level comparison of one driver. `models` yields the fitted GP
/// for a state (typically through a cache). Restart `j` at state `s` draws
/// from the stream `(seed, driver, s, j)`.
pub fn compare_driver<M>(record: &DriverRecord, models: M, cfg: &FitConfig, seed: u64) -> Result<DriverReport>
where
    M: Fn(StateId) -> Result<Arc<StateGP>> + Sync,
{
    cfg.sa.validate()?;
    let states = record.qualifying_states(cfg.n_th);
    let fits = states
        .par_iter()
        .map(|&state| {
            let gp = models(state)?;
            let n = record.n_visits(state);
            let data = empirical_policy(&record.counts[&state])?;
            let restarts = match cfg.search {
                LevelSearch::Annealing => cfg
                    .sa
                    .restart_levels
                    .iter()
                    .enumerate()
                    .map(|(j, &init)| {
                        let mut rng = rng::stream(seed, &[record.driver_id, u64::from(state), j as u64]);
                        let v = sa_fit_level(&gp, &data, n, init, &cfg.sa, cfg.ks, &mut rng)?;
                        Ok(RestartResult {
                            init,
                            level: v.level,
                            cv: v.score.cv,
                            statistic: v.score.statistic,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
                LevelSearch::Grid { step } => {
                    let v = grid_fit_level(&gp, &data, n, step, cfg.ks)?;
                    vec![RestartResult {
                        init: gp.level_range().0,
                        level: v.level,
                        cv: v.score.cv,
                        statistic: v.score.statistic,
                    }]
                }
            };
            Ok(FitResult::from_restarts(state, n, restarts, cfg.theta))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DriverReport::from_states(record.driver_id, fits))
}

/// Integer-level baseline: each state scored against its exact training
/// policies only.
pub fn compare_driver_dgt<M>(record: &DriverRecord, models: M, cfg: &FitConfig) -> Result<DriverReport>
where
    M: Fn(StateId) -> Result<Arc<StateGP>> + Sync,
{
    let states = record.qualifying_states(cfg.n_th);
    let fits = states
        .par_iter()
        .map(|&state| {
            let gp = models(state)?;
            let n = record.n_visits(state);
            let data = empirical_policy(&record.counts[&state])?;
            let restarts = gp
                .levels()
                .iter()
                .zip(gp.policies())
                .map(|(&level, policy)| {
                    let s = ks_compare_with(policy, &data, n, cfg.ks)?;
                    Ok(RestartResult {
                        init: level,
                        level,
                        cv: s.cv,
                        statistic: s.statistic,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(FitResult::from_restarts(state, n, restarts, cfg.theta))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DriverReport::from_states(record.driver_id, fits))
}
