//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any of them fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use levelk::data::{synthesize_driver, DriverSource, SyntheticDriverSpec};
use levelk::fitting::{
    compare_driver, empirical_policy, grid_fit_level, kolmogorov_q, ks_compare, ks_statistic, sa_fit_level, FitConfig,
    KsMode, SaConfig,
};
use levelk::game::{best_response_set, brute_force_best_response, mixed_utility, MixedStrategy, DEFAULT_GRID_CAP};
use levelk::gp::{fit_state_gp, ModelCache, OptimizerConfig};
use levelk::kernels::{
    lmc_covariance, BankConfig, BankEntry, BaseKernel, BiasKernel, CoregionalizationMatrix, KernelBank, Matern32Kernel,
};
use levelk::levelk::{softmax_policy, train_levels};
use levelk::nalgebra::{DMatrix, DVector};
use levelk::pipeline::{build_models, run_pipeline, PipelineConfig, PipelineOptions};
use anyhow::Result;
use levelk::Policy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn desk_config() -> Result<PipelineConfig> {
    Ok(PipelineConfig::load(&workspace_root().join("configs/desk.json"))?)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn random_simplex(rng: &mut impl Rng, k: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|x| x / total).collect()
}

fn random_policy_set(rng: &mut impl Rng, levels: usize, actions: usize) -> Vec<Policy> {
    let q = Normal::new(0.0, 1.5).unwrap();
    (0..levels)
        .map(|_| softmax_policy(&(0..actions).map(|_| q.sample(rng)).collect::<Vec<_>>()).unwrap())
        .collect()
}

fn best_response_matches_grid() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let start = Instant::now();
    let (mut value_err, mut attain_err) = (0.0f64, 0.0f64);
    for _ in 0..500 {
        let opponent = MixedStrategy::new(random_simplex(&mut rng, 4))?;
        let br = best_response_set(&opponent, 4)?;
        let grid = brute_force_best_response(&opponent, 4, 0.05, DEFAULT_GRID_CAP)?;
        let attained = mixed_utility(&br.strategy, &opponent.padded(5)?)?;
        value_err = value_err.max((br.value - grid.value).abs());
        attain_err = attain_err.max((attained - br.value).abs());
    }
    let elapsed = start.elapsed();
    outcome(
        value_err <= 1e-12 && attain_err <= 1e-12 && elapsed < Duration::from_secs(60),
        format!("500 opponents, max |value − grid| {value_err:.1e}, max |attained − value| {attain_err:.1e}, {elapsed:.1?}"),
    )
}

fn fitted_random_states(count: usize, seed: u64) -> Result<Vec<(Vec<Policy>, levelk::gp::StateGP)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let levels = [0.0, 1.0, 2.0, 3.0];
    (0..count)
        .map(|i| {
            let actions = rng.random_range(3..=6);
            let set = random_policy_set(&mut rng, 4, actions);
            let opt = OptimizerConfig { seed: i as u64, ..Default::default() };
            let gp = fit_state_gp(&levels, &set, &BankConfig::default(), &opt)?;
            Ok::<_, anyhow::Error>((set, gp))
        })
        .collect()
}

fn interpolation_and_simplex(states: &[(Vec<Policy>, levelk::gp::StateGP)]) -> Result<(Outcome, Outcome)> {
    let mut interp = 0.0f64;
    for (set, gp) in states {
        for (k, target) in set.iter().enumerate() {
            let mean = gp.predict_mean(k as f64);
            let err = mean.iter().zip(target.probs()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            interp = interp.max(err);
        }
    }
    let (mut norm_sum, mut raw_sum, mut min_entry) = (0.0f64, 0.0f64, f64::INFINITY);
    for (_, gp) in states {
        for i in 0..=300 {
            let l = i as f64 / 100.0;
            let p = gp.predict_normalized(l);
            norm_sum = norm_sum.max((p.probs().iter().sum::<f64>() - 1.0).abs());
            min_entry = min_entry.min(p.probs().iter().copied().fold(f64::INFINITY, f64::min));
            raw_sum = raw_sum.max((gp.predict_mean(l).sum() - 1.0).abs());
        }
    }
    Ok((
        Outcome {
            pass: interp <= 1e-3,
            detail: format!("{} states, max error at training levels {interp:.1e}", states.len()),
        },
        Outcome {
            pass: norm_sum <= 1e-9 && min_entry >= 0.0 && raw_sum <= 1e-6,
            detail: format!(
                "normalized |Σ−1| ≤ {norm_sum:.1e}, min entry {min_entry:.2e}, raw |Σ−1| ≤ {raw_sum:.1e}"
            ),
        },
    ))
}

fn level_recovery() -> Result<Outcome> {
    let cfg = desk_config()?;
    let start = Instant::now();
    let tables = train_levels(&cfg.env, &cfg.rl, cfg.max_level, cfg.seed)?;
    let states: Vec<_> = tables.common_states().into_iter().take(20).collect();
    let models = build_models(&cfg, &tables, &states)?;
    let fit = FitConfig::default();
    let lookup = |s| models.get(s).ok_or(levelk::Error::UnfittedState(s));
    let mut worst = (0.0, 0.0f64);
    for (i, level) in (0..8).map(|k| k as f64 * 0.25).enumerate() {
        let spec = SyntheticDriverSpec { driver_id: i as u64, level, states: states.clone(), samples: 500, seed: 11 };
        let record = synthesize_driver(&spec, DriverSource::Gp(&models))?;
        let report = compare_driver(&record, lookup, &fit, 13)?;
        let m = median(report.states.iter().map(|f| (f.l_opt - level).abs()).collect());
        if m >= worst.1 {
            worst = (level, m);
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst.1 <= 0.25 && elapsed < Duration::from_secs(600),
        format!("levels 0–1.75 on {} states, worst median error {:.3} at level {}, {elapsed:.1?}", states.len(), worst.1, worst.0),
    )
}

fn method_ordering() -> Result<Outcome> {
    let cfg = desk_config()?;
    let dir = tempfile::tempdir()?;
    let bundle = run_pipeline(&cfg, dir.path(), &PipelineOptions::default())?;
    let c = &bundle.comparison;
    outcome(
        c.cgt_mean_percent > c.dgt_mean_percent,
        format!("{} drivers, CGT {:.2}% vs DGT {:.2}%", c.drivers, c.cgt_mean_percent, c.dgt_mean_percent),
    )
}

/// True when the K-S statistic over the 0.01 grid falls to one minimum and
/// rises after it.
fn unimodal(curve: &[f64]) -> bool {
    let peak = curve.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap_or(0);
    curve[..=peak].windows(2).all(|w| w[1] <= w[0] + 1e-12) && curve[peak..].windows(2).all(|w| w[1] >= w[0] - 1e-12)
}

fn annealing_adequacy() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let q = Normal::new(0.0, 1.5).unwrap();
    let sa = SaConfig::default();
    let (mut hits, mut total, mut rejected) = (0, 0u64, 0);
    while total < 100 {
        // Policies along a straight line in Q space move monotonically, which
        // keeps the fit landscape single-troughed for most draws.
        let qa: Vec<f64> = (0..5).map(|_| q.sample(&mut rng)).collect();
        let qb: Vec<f64> = (0..5).map(|_| q.sample(&mut rng)).collect();
        let set = (0..4)
            .map(|k| {
                let t = k as f64 / 3.0;
                softmax_policy(&qa.iter().zip(&qb).map(|(a, b)| a + t * (b - a)).collect::<Vec<_>>())
            })
            .collect::<levelk::Result<Vec<_>>>()?;
        let opt = OptimizerConfig { seed: total, ..Default::default() };
        let gp = fit_state_gp(&[0.0, 1.0, 2.0, 3.0], &set, &BankConfig::default(), &opt)?;
        let level: f64 = rng.random_range(0.0..3.0);
        let cache = ModelCache::new();
        cache.insert(0, gp);
        let spec = SyntheticDriverSpec { driver_id: 0, level, states: vec![0], samples: 500, seed: rng.random() };
        let record = synthesize_driver(&spec, DriverSource::Gp(&cache))?;
        let gp = cache.get(0).expect("model was just inserted");
        let data = empirical_policy(&record.counts[&0])?;
        let curve = (0..=300)
            .map(|i| ks_compare(&gp.predict_normalized(i as f64 / 100.0), &data, 500).map(|s| s.statistic))
            .collect::<levelk::Result<Vec<_>>>()?;
        if !unimodal(&curve) {
            rejected += 1;
            continue;
        }
        total += 1;
        let grid = grid_fit_level(&gp, &data, 500, 0.01, KsMode::OneSample)?;
        let mut best = None::<levelk::fitting::Visit>;
        for (j, &init) in sa.restart_levels.iter().enumerate() {
            let mut r = levelk::rng::stream(total, &[j as u64]);
            let v = sa_fit_level(&gp, &data, 500, init, &sa, KsMode::OneSample, &mut r)?;
            if best.is_none_or(|b| v.score.beats(&b.score)) {
                best = Some(v);
            }
        }
        if best.is_some_and(|b| (b.level - grid.level).abs() <= 0.15) {
            hits += 1;
        }
    }
    outcome(
        hits >= 90,
        format!("{hits}/{total} unimodal instances within 0.15 of the grid optimum ({rejected} multimodal draws skipped)"),
    )
}

fn random_bank(rng: &mut impl Rng, outputs: usize) -> Result<KernelBank> {
    let n01: Normal<f64> = Normal::new(0.0, 1.0).unwrap();
    let entries = (0..rng.random_range(1..=7))
        .map(|_| {
            let kernel = if rng.random_bool(0.2) {
                BaseKernel::Bias(BiasKernel::new(rng.random_range(0.01..2.0))?)
            } else {
                BaseKernel::Matern32(Matern32Kernel::new(rng.random_range(0.01..2.0), rng.random_range(0.05..3.0))?)
            };
            let rank = rng.random_range(1..=outputs);
            let w = DMatrix::from_fn(outputs, rank, |_, _| n01.sample(rng));
            let kappa = DVector::from_fn(outputs, |_, _| (1.0 + n01.sample(rng).exp()).ln());
            let b = CoregionalizationMatrix::new(w, kappa)?.with_zero_sum(rng.random_bool(0.5));
            Ok(BankEntry { kernel, coregionalization: b })
        })
        .collect::<levelk::Result<Vec<_>>>()?;
    Ok(KernelBank::new(entries)?)
}

fn kernel_validity() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut asym, mut factored) = (0.0f64, 0);
    for _ in 0..1000 {
        let outputs = rng.random_range(2..=6);
        let n = rng.random_range(2..=8);
        let levels: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        let bank = random_bank(&mut rng, outputs)?;
        let sigma = lmc_covariance(&levels, &levels, &bank)?;
        asym = asym.max((&sigma - sigma.transpose()).abs().max());
        let mut jitter = 1e-9;
        while jitter <= 1e-6 {
            let dim = sigma.nrows();
            if (&sigma + DMatrix::identity(dim, dim) * jitter).cholesky().is_some() {
                factored += 1;
                break;
            }
            jitter *= 10.0;
        }
    }
    outcome(
        asym <= 1e-10 && factored >= 990,
        format!("1000 draws, max asymmetry {asym:.1e}, {factored} factor with jitter ≤ 1e-6"),
    )
}

/// The statistic computed independently from explicit prefix sums.
fn ks_oracle(a: &[f64], b: &[f64]) -> f64 {
    let (mut fa, mut fb, mut d) = (0.0, 0.0, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        fa += x;
        fb += y;
        d = d.max((fa - fb).abs());
    }
    d
}

fn ks_correctness() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let k = rng.random_range(2..=8);
        let a = Policy::new(random_simplex(&mut rng, k))?;
        let b = Policy::new(random_simplex(&mut rng, k))?;
        if ks_statistic(&a, &b)? != ks_oracle(a.probs(), b.probs()) {
            mismatches += 1;
        }
    }
    let mut monotone = true;
    for n in [1.0f64, 10.0, 30.0, 500.0, 1e4] {
        let scale = n.sqrt() + 0.12 + 0.11 / n.sqrt();
        let p: Vec<f64> = (0..=10_000).map(|i| kolmogorov_q(i as f64 / 10_000.0 * scale)).collect();
        monotone &= p.windows(2).all(|w| w[1] <= w[0]);
    }
    outcome(
        mismatches == 0 && monotone,
        format!("{mismatches}/1000 statistic mismatches, p-value non-increasing in D: {monotone}"),
    )
}

fn determinism() -> Result<Outcome> {
    let bin = env!("CARGO_BIN_EXE_levelk");
    let config = workspace_root().join("configs/desk.json");
    let dir = tempfile::tempdir()?;
    let mut summaries = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let status = Command::new(bin)
            .arg("--config")
            .arg(&config)
            .arg("--out-dir")
            .arg(&out)
            .arg("pipeline")
            .output()
            ?;
        if !status.status.success() {
            return outcome(false, format!("run {run} failed: {}", String::from_utf8_lossy(&status.stderr)));
        }
        let path = out.join("report/summary.json");
        summaries.push(std::fs::read(&path)?);
    }
    outcome(
        summaries[0] == summaries[1],
        format!("two runs, summary.json {} bytes, identical: {}", summaries[0].len(), summaries[0] == summaries[1]),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, result: Result<Outcome>| {
        let (pass, detail) = match result {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!("criterion {n} {name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    };

    report(1, "best response", best_response_matches_grid());
    match fitted_random_states(100, 2) {
        Ok(states) => match interpolation_and_simplex(&states) {
            Ok((interp, simplex)) => {
                report(2, "interpolation", Ok(interp));
                report(3, "simplex validity", Ok(simplex));
            }
            Err(e) => {
                report(2, "interpolation", Err(anyhow::anyhow!("{e}")));
                report(3, "simplex validity", Err(e));
            }
        },
        Err(e) => {
            report(2, "interpolation", Err(anyhow::anyhow!("{e}")));
            report(3, "simplex validity", Err(e));
        }
    }
    report(4, "level recovery", level_recovery());
    report(5, "method ordering", method_ordering());
    report(6, "annealing adequacy", annealing_adequacy());
    report(7, "kernel validity", kernel_validity());
    report(8, "K-S correctness", ks_correctness());
    report(9, "determinism", determinism());

    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
