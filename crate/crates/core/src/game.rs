//! Mixed strategies over pure level-k policies and their best responses.
//!
//! A level-k strategy earns utility 1 against a level-(k−1) opponent and 0
//! otherwise. Against a mixture `c` over levels `0..n−1`, the best responses
//! are exactly the mixtures supported on `{i + 1 : c_i = max c}`, and they
//! earn `max c`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::Policy;

/// Absolute tolerance on the maximum coefficient for best-response membership.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Tolerance on `sum(coeffs) == 1`.
pub const SIMPLEX_TOLERANCE: f64 = 1e-12;

/// Default cap on the number of grid points enumerated by the brute-force oracle.
pub const DEFAULT_GRID_CAP: u64 = 5_000_000;

/// Convex weights over pure level strategies `π_0, π_1, …`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MixedStrategy(Vec<f64>);

impl MixedStrategy {
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::Input("mixed strategy over zero levels".into()));
        }
        if coeffs.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
            return Err(Error::Input(format!("coefficients must be finite and ≥ 0: {coeffs:?}")));
        }
        let sum: f64 = coeffs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::Input(format!("coefficients sum to {sum}, not 1")));
        }
        Ok(MixedStrategy(coeffs))
    }

    /// Rescales non-negative weights onto the simplex.
    pub fn normalized(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0 && sum.is_finite()) {
            return Err(Error::Input("weights must have a positive finite sum".into()));
        }
        MixedStrategy::new(weights.into_iter().map(|w| w / sum).collect())
    }

    pub fn pure(level: usize, levels: usize) -> Result<Self> {
        if level >= levels {
            return Err(Error::Input(format!("level {level} outside 0..{levels}")));
        }
        let mut c = vec![0.0; levels];
        c[level] = 1.0;
        Ok(MixedStrategy(c))
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The same strategy over `levels` levels, zero on the added ones.
    pub fn padded(&self, levels: usize) -> Result<Self> {
        if levels < self.0.len() {
            if self.0[levels..].iter().any(|&c| c != 0.0) {
                return Err(Error::Input(format!("cannot truncate to {levels} levels: mass would be dropped")));
            }
            return Ok(MixedStrategy(self.0[..levels].to_vec()));
        }
        let mut c = self.0.clone();
        c.resize(levels, 0.0);
        Ok(MixedStrategy(c))
    }
}

impl TryFrom<Vec<f64>> for MixedStrategy {
    type Error = Error;

    fn try_from(c: Vec<f64>) -> Result<Self> {
        MixedStrategy::new(c)
    }
}

impl From<MixedStrategy> for Vec<f64> {
    fn from(m: MixedStrategy) -> Self {
        m.0
    }
}

/// 1 if a level-`k` player faces a level-`(k−1)` opponent, else 0.
pub fn pure_utility(k: i64, j: i64) -> Result<u8> {
    if k < 0 || j < 0 {
        return Err(Error::Input(format!("levels must be ≥ 0, got ({k}, {j})")));
    }
    Ok(u8::from(k == j + 1))
}

/// Expected utility `Σ_k Σ_j a_k b_j u(k, j) = Σ_j a_{j+1} b_j`.
pub fn mixed_utility(a: &MixedStrategy, b: &MixedStrategy) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Input(format!(
            "strategies over {} and {} levels",
            a.len(),
            b.len()
        )));
    }
    Ok(b.0.iter().zip(a.0.iter().skip(1)).map(|(bj, ak)| ak * bj).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestResponseResult {
    /// Levels `i + 1` for every opponent level `i` carrying the maximum weight.
    pub levels: Vec<usize>,
    /// Best response over levels `0..=n`, uniform over `levels`.
    pub strategy: MixedStrategy,
    /// The utility every best response earns, `max c`.
    pub value: f64,
}

impl BestResponseResult {
    /// Another optimal strategy, weighting the response levels by `gamma`.
    pub fn with_weights(&self, gamma: &[f64]) -> Result<MixedStrategy> {
        if gamma.len() != self.levels.len() {
            return Err(Error::Input(format!(
                "{} weights for {} response levels",
                gamma.len(),
                self.levels.len()
            )));
        }
        let weights = MixedStrategy::new(gamma.to_vec())?;
        let mut c = vec![0.0; self.strategy.len()];
        for (&level, &g) in self.levels.iter().zip(weights.coeffs()) {
            c[level] = g;
        }
        MixedStrategy::new(c)
    }
}

/// Best responses to an opponent mixing over levels `0..top_level−1`.
///
/// The opponent may be given over more levels as long as every coefficient
/// from `top_level` on is zero.
pub fn best_response_set(opponent: &MixedStrategy, top_level: usize) -> Result<BestResponseResult> {
    best_response_set_with_tolerance(opponent, top_level, TIE_TOLERANCE)
}

pub fn best_response_set_with_tolerance(opponent: &MixedStrategy, top_level: usize, tolerance: f64) -> Result<BestResponseResult> {
    if top_level == 0 {
        return Err(Error::Domain("top level must be ≥ 1".into()));
    }
    if let Some((level, _)) = opponent.0.iter().enumerate().skip(top_level).find(|(_, &c)| c != 0.0) {
        return Err(Error::Domain(format!(
            "opponent puts mass on level {level} ≥ n = {top_level}; no level-{} response exists",
            level + 1
        )));
    }
    let support = &opponent.0[..opponent.len().min(top_level)];
    let max = support.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let levels: Vec<usize> = support
        .iter()
        .enumerate()
        .filter(|(_, &c)| (c - max).abs() <= tolerance)
        .map(|(i, _)| i + 1)
        .collect();
    let mut coeffs = vec![0.0; top_level + 1];
    let weight = 1.0 / levels.len() as f64;
    for &l in &levels {
        coeffs[l] = weight;
    }
    Ok(BestResponseResult {
        levels,
        strategy: MixedStrategy::normalized(coeffs)?,
        value: max,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOptimum {
    pub value: f64,
    /// Every grid strategy (over levels `0..=n`) attaining `value` within [`TIE_TOLERANCE`].
    pub argmax: Vec<MixedStrategy>,
    pub points: u64,
}

fn binomial(n: u64, k: u64) -> Option<u64> {
    let k = k.min(n - k);
    (0..k).try_fold(1u64, |acc, i| acc.checked_mul(n - i).map(|v| v / (i + 1)))
}

/// Enumerates every responder strategy on the simplex grid with spacing
/// `grid_step` over levels `1..=top_level` and returns the best utilities.
pub fn brute_force_best_response(opponent: &MixedStrategy, top_level: usize, grid_step: f64, cap: u64) -> Result<GridOptimum> {
    if top_level == 0 {
        return Err(Error::Domain("top level must be ≥ 1".into()));
    }
    let divisions = (1.0 / grid_step).round();
    if !(grid_step > 0.0 && grid_step <= 1.0) || ((1.0 / grid_step) - divisions).abs() > 1e-9 {
        return Err(Error::Input(format!("grid step {grid_step} does not divide 1")));
    }
    let m = divisions as u64;
    let parts = top_level as u64;
    let points = binomial(m + parts - 1, parts - 1).unwrap_or(u64::MAX);
    if points > cap {
        return Err(Error::Input(format!("{points} grid points exceed the cap of {cap}")));
    }
    let opponent = opponent.padded(top_level + 1)?;

    let mut best = f64::NEG_INFINITY;
    let mut argmax: Vec<Vec<u64>> = Vec::new();
    let mut counts = vec![0u64; top_level];
    let mut visit = |counts: &[u64]| {
        // utility of grid point: Σ_{k=1..n} (count_k / m) · b_{k−1}
        let value: f64 = counts
            .iter()
            .enumerate()
            .map(|(i, &c)| c as f64 / m as f64 * opponent.0[i])
            .sum();
        if value > best + TIE_TOLERANCE {
            best = value;
            argmax.clear();
            argmax.push(counts.to_vec());
        } else if (value - best).abs() <= TIE_TOLERANCE {
            argmax.push(counts.to_vec());
        }
    };
    compositions(m, 0, &mut counts, &mut visit);

    let argmax = argmax
        .into_iter()
        .map(|counts| {
            let mut c = vec![0.0; top_level + 1];
            for (i, n) in counts.into_iter().enumerate() {
                c[i + 1] = n as f64 / m as f64;
            }
            MixedStrategy::normalized(c)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GridOptimum {
        value: best,
        argmax,
        points,
    })
}

fn compositions(remaining: u64, idx: usize, counts: &mut [u64], visit: &mut impl FnMut(&[u64])) {
    if idx + 1 == counts.len() {
        counts[idx] = remaining;
        visit(counts);
        return;
    }
    for c in 0..=remaining {
        counts[idx] = c;
        compositions(remaining - c, idx + 1, counts, visit);
    }
}

/// The convex combination `Σ_k c_k π_k`.
pub fn mixed_policy(coeffs: &MixedStrategy, policies: &[Policy]) -> Result<Policy> {
    if coeffs.len() != policies.len() {
        return Err(Error::Input(format!(
            "{} coefficients for {} policies",
            coeffs.len(),
            policies.len()
        )));
    }
    let actions = policies[0].len();
    if policies.iter().any(|p| p.len() != actions) {
        return Err(Error::Input("policies disagree on the action count".into()));
    }
    let mut probs = vec![0.0; actions];
    for (c, p) in coeffs.coeffs().iter().zip(policies) {
        for (acc, v) in probs.iter_mut().zip(p.probs()) {
            *acc += c * v;
        }
    }
    let sum: f64 = probs.iter().sum();
    Policy::new(probs.into_iter().map(|v| (v / sum).clamp(0.0, 1.0)).collect())
}

/// Euclidean projection onto the probability simplex.
fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (i, &s) in sorted.iter().enumerate() {
        cumulative += s;
        let t = (cumulative - 1.0) / (i + 1) as f64;
        if s - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Distance from `target` to the closest convex combination of `pure`, found
/// by projected gradient descent. Measures how far a predicted policy is from
/// being an exact mixture of the discrete-level policies.
pub fn mixture_residual(target: &Policy, pure: &[Policy]) -> Result<(MixedStrategy, f64)> {
    if pure.is_empty() || pure.iter().any(|p| p.len() != target.len()) {
        return Err(Error::Input("pure policies must match the target's action count".into()));
    }
    let k = pure.len();
    let a = target.len();
    let residual = |c: &[f64]| -> Vec<f64> {
        (0..a)
            .map(|i| c.iter().zip(pure).map(|(ck, p)| ck * p.probs()[i]).sum::<f64>() - target.probs()[i])
            .collect()
    };
    // step 1/L with L bounding the largest eigenvalue of PᵀP
    let lipschitz: f64 = pure.iter().map(|p| p.probs().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().max(1e-12);
    let step = 1.0 / lipschitz;
    let mut c = vec![1.0 / k as f64; k];
    for _ in 0..5000 {
        let r = residual(&c);
        let grad: Vec<f64> = pure.iter().map(|p| p.probs().iter().zip(&r).map(|(v, ri)| v * ri).sum()).collect();
        let next = project_simplex(&c.iter().zip(&grad).map(|(ci, gi)| ci - step * gi).collect::<Vec<_>>());
        let moved: f64 = next.iter().zip(&c).map(|(x, y)| (x - y).abs()).sum();
        c = next;
        if moved < 1e-13 {
            break;
        }
    }
    let norm = residual(&c).iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok((MixedStrategy::normalized(c)?, norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ms(c: &[f64]) -> MixedStrategy {
        MixedStrategy::new(c.to_vec()).unwrap()
    }

    #[test]
    fn pure_utilities() {
        assert_eq!(pure_utility(1, 0).unwrap(), 1);
        assert_eq!(pure_utility(0, 1).unwrap(), 0);
        assert_eq!(pure_utility(2, 0).unwrap(), 0);
        assert!(pure_utility(-1, 0).is_err());
    }

    #[test]
    fn mixed_utilities() {
        let a = MixedStrategy::pure(1, 4).unwrap();
        let b = MixedStrategy::pure(0, 4).unwrap();
        assert_eq!(mixed_utility(&a, &b).unwrap(), 1.0);
        assert!((mixed_utility(&ms(&[0.0, 0.5, 0.5, 0.0]), &ms(&[0.5, 0.0, 0.5, 0.0])).unwrap() - 0.25).abs() < 1e-15);
        let u = ms(&[0.25; 4]);
        assert!((mixed_utility(&u, &u).unwrap() - 0.1875).abs() < 1e-15);
        assert!(mixed_utility(&u, &ms(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn best_response_examples() {
        let br = best_response_set(&ms(&[0.2, 0.5, 0.3, 0.0]), 4).unwrap();
        assert_eq!(br.levels, vec![2]);
        assert_eq!(br.value, 0.5);
        assert_eq!(br.strategy, MixedStrategy::pure(2, 5).unwrap());

        let br = best_response_set(&MixedStrategy::pure(0, 4).unwrap(), 4).unwrap();
        assert_eq!(br.levels, vec![1]);
        assert_eq!(br.value, 1.0);

        let cb = ms(&[0.5, 0.5, 0.0, 0.0]);
        let br = best_response_set(&cb, 4).unwrap();
        assert_eq!(br.levels, vec![1, 2]);
        let padded = cb.padded(5).unwrap();
        for g in 0..=20 {
            let g = g as f64 / 20.0;
            let s = br.with_weights(&[g, 1.0 - g]).unwrap();
            assert!((mixed_utility(&s, &padded).unwrap() - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn mass_on_top_level_is_domain_error() {
        let err = best_response_set(&ms(&[0.2, 0.3, 0.5]), 2);
        assert!(matches!(err, Err(Error::Domain(_))));
        assert!(best_response_set(&ms(&[0.5, 0.5, 0.0]), 2).is_ok());
    }

    #[test]
    fn brute_force_pure_opponent() {
        let opt = brute_force_best_response(&MixedStrategy::pure(0, 4).unwrap(), 4, 0.25, DEFAULT_GRID_CAP).unwrap();
        assert_eq!(opt.value, 1.0);
        assert_eq!(opt.argmax, vec![MixedStrategy::pure(1, 5).unwrap()]);
        assert_eq!(opt.points, 35);
    }

    #[test]
    fn brute_force_uniform_opponent() {
        let cb = ms(&[0.25; 4]);
        let br = best_response_set(&cb, 4).unwrap();
        let opt = brute_force_best_response(&cb, 4, 0.05, DEFAULT_GRID_CAP).unwrap();
        assert_eq!(br.levels, vec![1, 2, 3, 4]);
        assert!((opt.value - br.value).abs() <= 1e-12);
        // every grid point is supported on 𝓜 = {1..4} and attains the maximum
        assert_eq!(opt.argmax.len() as u64, opt.points);
    }

    #[test]
    fn grid_guards() {
        let cb = ms(&[0.5, 0.5]);
        assert!(brute_force_best_response(&cb, 2, 0.3, DEFAULT_GRID_CAP).is_err());
        assert!(brute_force_best_response(&cb, 2, 0.01, 10).is_err());
    }

    #[test]
    fn mixed_policy_examples() {
        let p = |v: &[f64]| Policy::new(v.to_vec()).unwrap();
        let pures = [p(&[0.7, 0.3]), p(&[0.1, 0.9]), p(&[0.5, 0.5])];
        assert_eq!(mixed_policy(&MixedStrategy::pure(1, 3).unwrap(), &pures).unwrap(), pures[1]);
        let same = [pures[0].clone(), pures[0].clone()];
        let out = mixed_policy(&ms(&[0.5, 0.5]), &same).unwrap();
        assert!(out.total_variation(&pures[0]) < 1e-15);
        let out = mixed_policy(&ms(&[0.5, 0.5]), &[p(&[1.0, 0.0]), p(&[0.0, 1.0])]).unwrap();
        assert_eq!(out.probs(), &[0.5, 0.5]);
    }

    #[test]
    fn mixture_residual_zero_for_exact_mixture() {
        let p = |v: &[f64]| Policy::new(v.to_vec()).unwrap();
        let pures = [p(&[0.7, 0.2, 0.1]), p(&[0.1, 0.1, 0.8]), p(&[0.2, 0.6, 0.2])];
        let target = mixed_policy(&ms(&[0.2, 0.3, 0.5]), &pures).unwrap();
        let (_, r) = mixture_residual(&target, &pures).unwrap();
        assert!(r < 1e-8, "{r}");
        let (_, r) = mixture_residual(&p(&[1.0, 0.0, 0.0]), &pures).unwrap();
        assert!(r > 0.1);
    }

    fn simplex(n: usize) -> impl Strategy<Value = MixedStrategy> {
        proptest::collection::vec(0.001f64..1.0, n).prop_map(|w| MixedStrategy::normalized(w).unwrap())
    }

    proptest! {
        #[test]
        fn utility_is_bilinear(a in simplex(4), a2 in simplex(4), b in simplex(4), lambda in 0.0f64..1.0) {
            let mix = MixedStrategy::normalized(
                a.coeffs().iter().zip(a2.coeffs()).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect(),
            ).unwrap();
            let lhs = mixed_utility(&mix, &b).unwrap();
            let rhs = lambda * mixed_utility(&a, &b).unwrap() + (1.0 - lambda) * mixed_utility(&a2, &b).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn best_response_levels_scale_invariant(b in simplex(4), scale in 0.1f64..10.0) {
            let scaled = MixedStrategy::normalized(b.coeffs().iter().map(|c| c * scale).collect()).unwrap();
            prop_assert_eq!(best_response_set(&b, 4).unwrap().levels, best_response_set(&scaled, 4).unwrap().levels);
        }

        #[test]
        fn best_response_beats_challengers(b in simplex(4), x in simplex(5)) {
            let br = best_response_set(&b, 4).unwrap();
            let padded = b.padded(5).unwrap();
            prop_assert!(mixed_utility(&br.strategy, &padded).unwrap() >= mixed_utility(&x, &padded).unwrap() - 1e-15);
        }
    }
}
