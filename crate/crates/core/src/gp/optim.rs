//! Box-constrained limited-memory BFGS used for hyperparameter fitting.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy)]
pub struct LbfgsOptions {
    pub max_iters: usize,
    /// Stop once accepted steps lower the objective by less than this for
    /// `patience` consecutive iterations.
    pub tolerance: f64,
    pub patience: usize,
    pub memory: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            max_iters: 200,
            tolerance: 1e-6,
            patience: 3,
            memory: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `objective` over the box `[lower, upper]`.
///
/// `objective` returns the value and gradient; a non-finite value marks the
/// point infeasible and makes the line search back off.
pub fn minimize<F>(mut objective: F, x0: &[f64], lower: &[f64], upper: &[f64], opts: LbfgsOptions) -> Minimum
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let clamp = |x: &mut [f64]| {
        for i in 0..n {
            x[i] = x[i].clamp(lower[i], upper[i]);
        }
    };
    let mut x = x0.to_vec();
    clamp(&mut x);
    let (mut fx, mut g) = objective(&x);
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut iterations = 0;
    let mut stalled = 0;
    if !fx.is_finite() {
        return Minimum { x, value: fx, iterations };
    }

    while iterations < opts.max_iters {
        iterations += 1;
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            for i in 0..n {
                q[i] -= a * y[i];
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for i in 0..n {
                q[i] += s[i] * (a - b);
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        if dot(&dir, &g) >= 0.0 {
            history.clear();
            dir = g.iter().map(|v| -v).collect();
        }
        // freeze coordinates pinned against their bound
        for i in 0..n {
            if (x[i] <= lower[i] && dir[i] < 0.0) || (x[i] >= upper[i] && dir[i] > 0.0) {
                dir[i] = 0.0;
            }
        }
        let dir_norm = dot(&dir, &dir).sqrt();
        if dir_norm == 0.0 {
            break;
        }
        let mut step = if history.is_empty() { (1.0 / dir_norm).min(1.0) } else { 1.0 };

        let mut accepted = None;
        for _ in 0..40 {
            let mut trial: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            clamp(&mut trial);
            let moved: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
            let (ft, gt) = objective(&trial);
            if ft.is_finite() && ft <= fx + 1e-4 * dot(&g, &moved) {
                accepted = Some((trial, ft, gt, moved));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new, g_new, s)) = accepted else {
            break;
        };
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        let improvement = fx - f_new;
        x = x_new;
        fx = f_new;
        g = g_new;
        if improvement < opts.tolerance {
            stalled += 1;
            if stalled >= opts.patience {
                break;
            }
        } else {
            stalled = 0;
        }
    }
    Minimum { x, value: fx, iterations }
}
