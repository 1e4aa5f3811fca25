//! Per-state multi-output Gaussian processes over the reasoning-level axis.
//!
//! A [`StateGP`] is trained on the discrete-level policies `π_0..π_n` of one
//! state (one output per action) and predicts a policy at any real level in
//! the training range.
//!
//! By default the prior is centred on the uniform policy and every
//! coregionalization matrix is restricted to the zero-sum subspace, so each
//! predicted mean sums to exactly one (up to rounding). The bias component
//! carries the per-action offsets. With `simplex_prior` off the prior mean is
//! zero and the matrices are unrestricted; the sum is then only approximately
//! preserved.

mod cache;
pub mod optim;

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use cache::ModelCache;

use crate::error::{Error, Result};
use crate::kernels::{
    centering, lmc_covariance_unchecked, BankConfig, BankEntry, BaseKernel, BiasKernel, CoregionalizationMatrix,
    KernelBank, KernelKind, Matern32Kernel,
};
use crate::policy::Policy;
use crate::StateId;

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Hyperparameter search settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub restarts: usize,
    pub max_iters: usize,
    pub tolerance: f64,
    pub jitter: f64,
    pub max_jitter: f64,
    /// Uniform prior mean with zero-sum coregionalization matrices.
    pub simplex_prior: bool,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            restarts: 4,
            max_iters: 200,
            tolerance: 1e-6,
            jitter: 1e-6,
            max_jitter: 1e-2,
            simplex_prior: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitDiagnostics {
    /// Log marginal likelihood at the first restart's starting point.
    pub initial_lml: f64,
    pub final_lml: f64,
    pub iterations: usize,
}

/// Raw GP posterior for the policy at one level.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyPrediction {
    pub level: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// A fitted GP for one state.
#[derive(Debug, Clone)]
pub struct StateGP {
    levels: Vec<f64>,
    policies: Vec<Policy>,
    bank: KernelBank,
    jitter: f64,
    prior_mean: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    targets: DVector<f64>,
    diagnostics: Option<FitDiagnostics>,
}

fn validate_training(levels: &[f64], policies: &[Policy]) -> Result<usize> {
    if levels.len() < 2 {
        return Err(Error::Input(format!("need at least 2 training levels, got {}", levels.len())));
    }
    if levels.len() != policies.len() {
        return Err(Error::Input(format!(
            "{} levels but {} policies",
            levels.len(),
            policies.len()
        )));
    }
    if levels.iter().any(|l| !l.is_finite()) || levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Input("training levels must be finite and strictly increasing".into()));
    }
    let actions = policies[0].len();
    if policies.iter().any(|p| p.len() != actions) {
        return Err(Error::Input("training policies disagree on the action count".into()));
    }
    Ok(actions)
}

/// Output-major flattening of `π − prior_mean`: entry `d·N + i` is action
/// `d` at level `i`.
fn flatten_targets(policies: &[Policy], prior_mean: f64) -> DVector<f64> {
    let n = policies.len();
    let d = policies[0].len();
    DVector::from_fn(n * d, |idx, _| policies[idx % n].probs()[idx / n] - prior_mean)
}

fn gaussian_lml(chol: &Cholesky<f64, Dyn>, targets: &DVector<f64>, alpha: &DVector<f64>) -> f64 {
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
    -0.5 * targets.dot(alpha) - 0.5 * log_det - 0.5 * targets.len() as f64 * (2.0 * PI).ln()
}

/// `log N(targets | 0, sigma)` through a Cholesky factorization.
pub fn gaussian_log_likelihood(sigma: &DMatrix<f64>, targets: &DVector<f64>) -> Result<f64> {
    if sigma.nrows() != targets.len() || !sigma.is_square() {
        return Err(Error::Input("covariance and target dimensions disagree".into()));
    }
    let chol = Cholesky::new(sigma.clone()).ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))?;
    let alpha = chol.solve(targets);
    Ok(gaussian_lml(&chol, targets, &alpha))
}

impl StateGP {
    /// Conditions a GP with fixed hyperparameters on the training policies.
    ///
    /// The diagonal jitter starts at `jitter` and grows tenfold until the
    /// covariance factorizes or `max_jitter` is exceeded.
    pub fn from_parts(
        levels: Vec<f64>,
        policies: Vec<Policy>,
        bank: KernelBank,
        prior_mean: f64,
        jitter: f64,
        max_jitter: f64,
    ) -> Result<Self> {
        let actions = validate_training(&levels, &policies)?;
        if bank.outputs() != actions {
            return Err(Error::Configuration(format!(
                "bank has {} outputs but policies have {actions} actions",
                bank.outputs()
            )));
        }
        let sigma = lmc_covariance_unchecked(&levels, &levels, &bank);
        let mut current = jitter;
        loop {
            let shifted = &sigma + DMatrix::identity(sigma.nrows(), sigma.ncols()) * current;
            if let Some(chol) = Cholesky::new(shifted) {
                let targets = flatten_targets(&policies, prior_mean);
                let alpha = chol.solve(&targets);
                return Ok(StateGP {
                    levels,
                    policies,
                    bank,
                    jitter: current,
                    prior_mean,
                    chol,
                    alpha,
                    targets,
                    diagnostics: None,
                });
            }
            current *= 10.0;
            if current > max_jitter * (1.0 + 1e-9) {
                return Err(Error::Numerical(format!(
                    "covariance not factorizable with jitter up to {max_jitter}"
                )));
            }
            log::warn!("escalating GP jitter to {current:e}");
        }
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn policies(&self) -> &[Policy] {
        &self.policies
    }

    pub fn bank(&self) -> &KernelBank {
        &self.bank
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn prior_mean(&self) -> f64 {
        self.prior_mean
    }

    pub fn actions(&self) -> usize {
        self.bank.outputs()
    }

    pub fn diagnostics(&self) -> Option<FitDiagnostics> {
        self.diagnostics
    }

    pub fn level_range(&self) -> (f64, f64) {
        (self.levels[0], self.levels[self.levels.len() - 1])
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        gaussian_lml(&self.chol, &self.targets, &self.alpha)
    }

    fn clamp_level(&self, level: f64) -> f64 {
        let (lo, hi) = self.level_range();
        let clamped = level.clamp(lo, hi);
        if clamped != level {
            log::warn!("level {level} outside [{lo}, {hi}], clamped to {clamped}");
        }
        clamped
    }

    /// Posterior mean of the policy outputs at `level` (clamped to the
    /// training range).
    pub fn predict_mean(&self, level: f64) -> DVector<f64> {
        let level = self.clamp_level(level);
        let cross = lmc_covariance_unchecked(&[level], &self.levels, &self.bank);
        (cross * &self.alpha).add_scalar(self.prior_mean)
    }

    pub fn predict_policy(&self, level: f64) -> PolicyPrediction {
        let level = self.clamp_level(level);
        let cross = lmc_covariance_unchecked(&[level], &self.levels, &self.bank);
        let mean = (&cross * &self.alpha).add_scalar(self.prior_mean);
        let prior = lmc_covariance_unchecked(&[level], &[level], &self.bank);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&cross.transpose())
            .expect("Cholesky factor has a positive diagonal");
        let mut cov = prior - v.transpose() * v;
        cov = (&cov + cov.transpose()) * 0.5;
        PolicyPrediction { level, mean, cov }
    }

    /// The predicted mean, repaired onto the simplex.
    pub fn predict_normalized(&self, level: f64) -> Policy {
        shift_normalize(self.predict_mean(level).as_slice())
            .expect("GP predictive mean is finite")
    }

    pub fn to_record(&self, state_id: Option<StateId>) -> StateGpRecord {
        StateGpRecord {
            version: MODEL_FORMAT_VERSION,
            state_id,
            levels: self.levels.clone(),
            policies: self.policies.clone(),
            bank: self.bank.clone(),
            prior_mean: self.prior_mean,
            jitter: self.jitter,
        }
    }

    pub fn from_record(record: StateGpRecord) -> Result<Self> {
        if record.version != MODEL_FORMAT_VERSION {
            return Err(Error::Input(format!("unsupported model format version {}", record.version)));
        }
        // the stored jitter already factorized once; allow no further growth
        StateGP::from_parts(
            record.levels,
            record.policies,
            record.bank,
            record.prior_mean,
            record.jitter,
            record.jitter,
        )
    }
}

/// On-disk form of a [`StateGP`]; the factorization is rebuilt on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateGpRecord {
    pub version: u32,
    pub state_id: Option<StateId>,
    pub levels: Vec<f64>,
    pub policies: Vec<Policy>,
    pub bank: KernelBank,
    #[serde(default)]
    pub prior_mean: f64,
    pub jitter: f64,
}

const LOG_VAR_BOUNDS: (f64, f64) = (-18.420_680_743_952_367, 4.605_170_185_988_092); // ln 1e-8, ln 1e2
const LOG_BETA_BOUNDS: (f64, f64) = (-2.995_732_273_553_991, std::f64::consts::LN_10); // ln 0.05, ln 10
const W_BOUNDS: (f64, f64) = (-5.0, 5.0);
const KAPPA_RAW_BOUNDS: (f64, f64) = (-12.0, 3.0);

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone)]
struct EntryLayout {
    kind: KernelKind,
    fixed_beta: Option<f64>,
    rank: usize,
    offset: usize,
    zero_sum: bool,
}

impl EntryLayout {
    fn len(&self, d: usize) -> usize {
        1 + usize::from(self.trainable_beta()) + d * self.rank + d
    }

    fn trainable_beta(&self) -> bool {
        self.kind == KernelKind::Matern32 && self.fixed_beta.is_none()
    }

    fn w_offset(&self) -> usize {
        self.offset + 1 + usize::from(self.trainable_beta())
    }
}

/// Maps an unconstrained-ish parameter vector onto a [`KernelBank`]:
/// per entry `[ln σ², (ln β), W (row-major), κ_raw]` with `κ = softplus(κ_raw)`.
#[derive(Debug, Clone)]
struct ParamLayout {
    entries: Vec<EntryLayout>,
    outputs: usize,
    len: usize,
}

impl ParamLayout {
    fn new(cfg: &BankConfig, outputs: usize, zero_sum: bool) -> Self {
        let mut offset = 0;
        let entries = cfg
            .0
            .iter()
            .map(|spec| {
                let entry = EntryLayout {
                    kind: spec.kind,
                    fixed_beta: spec.beta,
                    rank: BankConfig::rank_for(spec, outputs),
                    offset,
                    zero_sum,
                };
                offset += entry.len(outputs);
                entry
            })
            .collect();
        ParamLayout {
            entries,
            outputs,
            len: offset,
        }
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![0.0; self.len];
        let mut hi = vec![0.0; self.len];
        let d = self.outputs;
        for e in &self.entries {
            let mut set = |i: usize, b: (f64, f64)| {
                lo[i] = b.0;
                hi[i] = b.1;
            };
            set(e.offset, LOG_VAR_BOUNDS);
            if e.trainable_beta() {
                set(e.offset + 1, LOG_BETA_BOUNDS);
            }
            let w0 = e.w_offset();
            for i in w0..w0 + d * e.rank {
                set(i, W_BOUNDS);
            }
            for i in w0 + d * e.rank..w0 + d * e.rank + d {
                set(i, KAPPA_RAW_BOUNDS);
            }
        }
        (lo, hi)
    }

    fn initial(&self, rng: &mut impl Rng) -> Vec<f64> {
        let d = self.outputs;
        let mut theta = vec![0.0; self.len];
        let kappa_raw = (0.1f64.exp() - 1.0).ln();
        for e in &self.entries {
            theta[e.offset] = 0.0;
            if e.trainable_beta() {
                theta[e.offset + 1] = 0.0;
            }
            let w0 = e.w_offset();
            let scale = 1.0 / (e.rank as f64).sqrt();
            for v in &mut theta[w0..w0 + d * e.rank] {
                *v = scale * rng.sample::<f64, _>(StandardNormal);
            }
            for v in &mut theta[w0 + d * e.rank..w0 + d * e.rank + d] {
                *v = kappa_raw;
            }
        }
        theta
    }

    fn bank(&self, theta: &[f64]) -> Result<KernelBank> {
        let d = self.outputs;
        let entries = self
            .entries
            .iter()
            .map(|e| {
                let variance = theta[e.offset].exp();
                let kernel = match e.kind {
                    KernelKind::Bias => BaseKernel::Bias(BiasKernel::new(variance)?),
                    KernelKind::Matern32 => {
                        let beta = match e.fixed_beta {
                            Some(b) => b,
                            None => theta[e.offset + 1].exp(),
                        };
                        BaseKernel::Matern32(Matern32Kernel::new(variance, beta)?)
                    }
                };
                let w0 = e.w_offset();
                let w = DMatrix::from_row_slice(d, e.rank, &theta[w0..w0 + d * e.rank]);
                let kappa = DVector::from_iterator(d, theta[w0 + d * e.rank..w0 + d * e.rank + d].iter().map(|&v| softplus(v)));
                let coregionalization = CoregionalizationMatrix::new(w, kappa)?.with_zero_sum(e.zero_sum);
                Ok(BankEntry {
                    kernel,
                    coregionalization,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        KernelBank::new(entries)
    }
}

/// Negative log marginal likelihood and its gradient in the packed parameters.
struct Objective<'a> {
    layout: &'a ParamLayout,
    levels: &'a [f64],
    targets: &'a DVector<f64>,
    jitter: f64,
}

impl Objective<'_> {
    fn lml(&self, theta: &[f64]) -> Option<f64> {
        let bank = self.layout.bank(theta).ok()?;
        let sigma = lmc_covariance_unchecked(self.levels, self.levels, &bank);
        let n = sigma.nrows();
        let chol = Cholesky::new(sigma + DMatrix::identity(n, n) * self.jitter)?;
        let alpha = chol.solve(self.targets);
        Some(gaussian_lml(&chol, self.targets, &alpha))
    }

    fn eval(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let infeasible = (f64::INFINITY, vec![0.0; theta.len()]);
        let Ok(bank) = self.layout.bank(theta) else {
            return infeasible;
        };
        let n = self.levels.len();
        let d = self.layout.outputs;
        let sigma = lmc_covariance_unchecked(self.levels, self.levels, &bank);
        let nd = sigma.nrows();
        let Some(chol) = Cholesky::new(sigma + DMatrix::identity(nd, nd) * self.jitter) else {
            return infeasible;
        };
        let alpha = chol.solve(self.targets);
        let lml = gaussian_lml(&chol, self.targets, &alpha);
        // dL/dθ = ½ tr((ααᵀ − Σ⁻¹) ∂Σ/∂θ)
        let g = &alpha * alpha.transpose() - chol.inverse();
        let block_traces = |k: &DMatrix<f64>| {
            DMatrix::from_fn(d, d, |a, b| g.view((a * n, b * n), (n, n)).component_mul(k).sum())
        };

        let mut grad = vec![0.0; theta.len()];
        for (layout, entry) in self.layout.entries.iter().zip(bank.entries()) {
            let k = entry.kernel.gram(self.levels, self.levels);
            let m = block_traces(&k);
            let b = entry.coregionalization.b();
            // ∂Σ/∂ln σ² = B ⊗ K
            grad[layout.offset] = 0.5 * b.component_mul(&m).sum();
            if layout.trainable_beta() {
                let BaseKernel::Matern32(matern) = entry.kernel else {
                    unreachable!("only Matérn kernels carry a length scale")
                };
                let dk = DMatrix::from_fn(n, n, |i, j| matern.d_log_length_scale(self.levels[i] - self.levels[j]));
                grad[layout.offset + 1] = 0.5 * b.component_mul(&block_traces(&dk)).sum();
            }
            let mut h = m * 0.5;
            if layout.zero_sum {
                let p = centering(d);
                h = &p * h * &p;
            }
            let w = entry.coregionalization.w();
            let dw = (&h + h.transpose()) * w;
            let w0 = layout.w_offset();
            for r in 0..d {
                for c in 0..layout.rank {
                    grad[w0 + r * layout.rank + c] = dw[(r, c)];
                }
            }
            let k0 = w0 + d * layout.rank;
            for i in 0..d {
                grad[k0 + i] = h[(i, i)] * sigmoid(theta[k0 + i]);
            }
        }
        (-lml, grad.into_iter().map(|v| -v).collect())
    }
}

/// Fits bank hyperparameters (variances, `W`, `κ`, and any free `β`) by
/// maximizing the log marginal likelihood from several random starts, then
/// conditions the GP on the training policies.
pub fn fit_state_gp(levels: &[f64], policies: &[Policy], bank_config: &BankConfig, opt: &OptimizerConfig) -> Result<StateGP> {
    let actions = validate_training(levels, policies)?;
    bank_config.validate()?;
    if opt.restarts == 0 {
        return Err(Error::Configuration("optimizer needs at least one restart".into()));
    }
    let layout = ParamLayout::new(bank_config, actions, opt.simplex_prior);
    let (lower, upper) = layout.bounds();
    let prior_mean = if opt.simplex_prior { 1.0 / actions as f64 } else { 0.0 };
    let targets = flatten_targets(policies, prior_mean);
    let objective = Objective {
        layout: &layout,
        levels,
        targets: &targets,
        jitter: opt.jitter,
    };
    let lbfgs = optim::LbfgsOptions {
        max_iters: opt.max_iters,
        tolerance: opt.tolerance,
        ..Default::default()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut initial_lml = f64::NEG_INFINITY;
    let mut best: Option<optim::Minimum> = None;
    let mut iterations = 0;
    for restart in 0..opt.restarts {
        let start = layout.initial(&mut rng);
        if restart == 0 {
            initial_lml = objective.lml(&start).unwrap_or(f64::NEG_INFINITY);
        }
        let result = optim::minimize(|t| objective.eval(t), &start, &lower, &upper, lbfgs);
        iterations += result.iterations;
        if result.value.is_finite() && best.as_ref().is_none_or(|b| result.value < b.value) {
            best = Some(result);
        }
    }
    let best = best.ok_or_else(|| Error::Numerical("no restart reached a factorizable covariance".into()))?;
    let bank = layout.bank(&best.x)?;
    let mut model = StateGP::from_parts(levels.to_vec(), policies.to_vec(), bank, prior_mean, opt.jitter, opt.max_jitter)?;
    model.diagnostics = Some(FitDiagnostics {
        initial_lml,
        final_lml: model.log_marginal_likelihood(),
        iterations,
    });
    Ok(model)
}

/// Smallest shifted sum accepted before falling back to the uniform policy.
pub const DEGENERATE_SUM: f64 = 1e-12;

/// Maps a raw predictive mean onto the simplex.
///
/// Non-negative input is only rescaled. Otherwise every entry is shifted up
/// by `|min|` before rescaling. A vanishing shifted sum yields the uniform
/// policy.
pub fn shift_normalize(raw: &[f64]) -> Result<Policy> {
    if raw.is_empty() || raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("raw policy must be non-empty and finite".into()));
    }
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let shift = if min >= 0.0 { 0.0 } else { min.abs() };
    let total: f64 = raw.iter().map(|v| v + shift).sum();
    if total < DEGENERATE_SUM {
        log::warn!("degenerate policy {raw:?}; using uniform");
        return Ok(Policy::uniform(raw.len()));
    }
    let probs: Vec<f64> = raw.iter().map(|v| ((v + shift) / total).clamp(0.0, 1.0)).collect();
    Ok(Policy::from_raw_unchecked(probs))
}
