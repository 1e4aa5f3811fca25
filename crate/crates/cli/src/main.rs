use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use levelk::data::{
    export_trajectories, ingest_trajectories, load_records, save_records, synthesize_driver, DriverSource,
    SyntheticDriverSpec, Units,
};
use levelk::fitting::{DriverRecord, DriverReport};
use levelk::game::{best_response_set, brute_force_best_response, mixed_utility, MixedStrategy, DEFAULT_GRID_CAP};
use levelk::gp::ModelCache;
use levelk::levelk::{train_levels, LevelTables};
use levelk::pipeline::{build_models, fit_drivers, run_pipeline, synthesize_corpus, Corpus, PipelineConfig, PipelineOptions};
use levelk::report::build_report;
use levelk::StateId;

#[derive(Parser)]
#[command(name = "levelk", version, about = "Continuous level-k driver models")]
struct Cli {
    /// Master JSON config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train Q-tables for levels 1..=max-level against level-(k-1) traffic.
    TrainLevels {
        #[arg(long)]
        max_level: Option<usize>,
    },
    /// Fit one multi-output GP per state from trained level tables.
    BuildGp {
        /// Defaults to <out-dir>/levels.json.
        #[arg(long)]
        levels: Option<PathBuf>,
        #[command(flatten)]
        states: StateSelection,
        #[arg(long)]
        model_dir: Option<PathBuf>,
    },
    /// Sample a driver with a known level from fitted models.
    Synthesize {
        #[arg(long)]
        level: f64,
        #[arg(long, default_value_t = 500)]
        samples: u64,
        #[arg(long, default_value_t = 0)]
        driver_id: u64,
        #[command(flatten)]
        states: StateSelection,
        #[arg(long)]
        model_dir: Option<PathBuf>,
        /// Defaults to <out-dir>/drivers.json.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the samples as a trajectory CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Turn a trajectory CSV into per-driver action counts.
    Ingest {
        csv: PathBuf,
        #[arg(long, value_enum, default_value_t = UnitsArg::Metres)]
        units: UnitsArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit continuous (CGT) and integer (DGT) levels for every driver.
    FitDrivers {
        /// A records JSON, a trajectory CSV, or `synthetic`.
        #[arg(long, default_value = "synthetic")]
        data: String,
        #[arg(long = "models")]
        model_dir: Option<PathBuf>,
        #[arg(long)]
        n_th: Option<u64>,
        #[arg(long)]
        theta: Option<f64>,
        /// CGT report; defaults to <out-dir>/cgt.json.
        #[arg(long)]
        out: Option<PathBuf>,
        /// DGT report; defaults to <out-dir>/dgt.json.
        #[arg(long)]
        dgt_out: Option<PathBuf>,
    },
    /// Best responses to a mixed opponent over levels 0..n-1.
    BestResponse {
        #[arg(long, value_delimiter = ',', required = true)]
        coeffs: Vec<f64>,
        /// n; defaults to the number of coefficients.
        #[arg(long)]
        top_level: Option<usize>,
        #[arg(long, default_value_t = 0.05)]
        grid: f64,
        /// Check the result against brute-force grid enumeration.
        #[arg(long)]
        verify: bool,
    },
    /// Summaries and plot data from CGT and DGT reports.
    Report {
        #[arg(long)]
        cgt: Option<PathBuf>,
        #[arg(long)]
        dgt: Option<PathBuf>,
        /// JSON map of driver id to true level.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Defaults to <out-dir>/report.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// All stages end to end.
    Pipeline {
        /// Reuse fitted models instead of training.
        #[arg(long)]
        no_train: bool,
        #[arg(long)]
        model_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct StateSelection {
    /// Explicit state ids.
    #[arg(long, value_delimiter = ',')]
    states: Vec<StateId>,
    /// The N most visited states (build-gp) or the first N fitted states.
    #[arg(long)]
    top: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum UnitsArg {
    Metres,
    Feet,
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_models(dir: &Path) -> Result<ModelCache> {
    if !dir.is_dir() {
        bail!("model directory {} does not exist; run build-gp first", dir.display());
    }
    let models = ModelCache::load_dir(dir)?;
    if models.is_empty() {
        bail!("no models in {}", dir.display());
    }
    Ok(models)
}

fn select(sel: &StateSelection, ranked: Vec<StateId>) -> Vec<StateId> {
    if !sel.states.is_empty() {
        return sel.states.clone();
    }
    let mut out: Vec<StateId> = ranked.into_iter().take(sel.top.unwrap_or(usize::MAX)).collect();
    out.sort_unstable();
    out
}

fn records_from(data: &str, cfg: &PipelineConfig, models: &ModelCache, out_dir: &Path) -> Result<(Vec<DriverRecord>, BTreeMap<u64, f64>)> {
    if data == "synthetic" {
        let Corpus::Synthetic(corpus) = &cfg.corpus else {
            bail!("`--data synthetic` needs a synthetic corpus in the config");
        };
        let pool = models.states();
        let corpus = levelk::pipeline::SyntheticCorpus {
            state_pool: pool.len(),
            states_per_driver: corpus.states_per_driver.min(pool.len()),
            ..corpus.clone()
        };
        let (records, truth) = synthesize_corpus(cfg, &corpus, &pool, models)?;
        write_json(&out_dir.join("truth.json"), &truth)?;
        return Ok((records, truth));
    }
    let path = Path::new(data);
    let records = match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => {
            let ingest = match &cfg.corpus {
                Corpus::Trajectories { ingest, .. } => ingest.clone(),
                Corpus::Synthetic(_) => Default::default(),
            };
            ingest_trajectories(path, &cfg.env, &ingest)?.records
        }
        _ => load_records(path)?,
    };
    Ok((records, BTreeMap::new()))
}

fn run(cli: Cli, mut cfg: PipelineConfig) -> Result<()> {
    let out = cli.out_dir.clone();
    let models_in = |dir: &Option<PathBuf>| dir.clone().unwrap_or_else(|| out.join("models"));
    match cli.command {
        Command::TrainLevels { max_level } => {
            let max_level = max_level.unwrap_or(cfg.max_level);
            let levels = train_levels(&cfg.env, &cfg.rl, max_level, cfg.seed)?;
            fs::create_dir_all(&out)?;
            let path = out.join("levels.json");
            levels.save(&path)?;
            for (t, converged) in levels.tables.iter().zip(&levels.converged) {
                println!("level {}: {} states, converged: {converged}", t.level, t.values.len());
            }
            println!("wrote {}", path.display());
        }
        Command::BuildGp { levels, states, model_dir } => {
            let levels = LevelTables::load(&levels.unwrap_or_else(|| out.join("levels.json")))?;
            cfg.max_level = levels.max_level();
            let chosen = select(&states, levels.common_states());
            if chosen.is_empty() {
                bail!("no states selected");
            }
            let models = build_models(&cfg, &levels, &chosen)?;
            let dir = models_in(&model_dir);
            models.save_dir(&dir)?;
            println!("fitted {} state models into {}", models.len(), dir.display());
        }
        Command::Synthesize {
            level,
            samples,
            driver_id,
            states,
            model_dir,
            out: path,
            csv,
        } => {
            let models = load_models(&models_in(&model_dir))?;
            let spec = SyntheticDriverSpec {
                driver_id,
                level,
                states: select(&states, models.states()),
                samples,
                seed: cfg.seed,
            };
            let record = synthesize_driver(&spec, DriverSource::Gp(&models))?;
            let path = path.unwrap_or_else(|| out.join("drivers.json"));
            fs::create_dir_all(path.parent().unwrap_or(Path::new(".")))?;
            save_records(std::slice::from_ref(&record), &path)?;
            if let Some(csv) = csv {
                export_trajectories(std::slice::from_ref(&record), &cfg.env, &Default::default(), &csv)?;
            }
            println!("driver {driver_id} at level {level}: {} states x {samples} samples -> {}", spec.states.len(), path.display());
        }
        Command::Ingest { csv, units, out: path } => {
            let mut ingest = match &cfg.corpus {
                Corpus::Trajectories { ingest, .. } => ingest.clone(),
                Corpus::Synthetic(_) => Default::default(),
            };
            ingest.units = match units {
                UnitsArg::Metres => Units::Metres,
                UnitsArg::Feet => Units::Feet,
            };
            let summary = ingest_trajectories(&csv, &cfg.env, &ingest)?;
            let path = path.unwrap_or_else(|| out.join("drivers.json"));
            fs::create_dir_all(path.parent().unwrap_or(Path::new(".")))?;
            save_records(&summary.records, &path)?;
            println!(
                "{} rows, {} rejected, {} transitions, {} track breaks; {} drivers -> {}",
                summary.rows,
                summary.rejected_rows,
                summary.transitions,
                summary.track_breaks,
                summary.records.len(),
                path.display()
            );
        }
        Command::FitDrivers {
            data,
            model_dir,
            n_th,
            theta,
            out: cgt_path,
            dgt_out,
        } => {
            if let Some(n) = n_th {
                cfg.fit.n_th = n;
            }
            if let Some(t) = theta {
                cfg.fit.theta = t;
            }
            let models = load_models(&models_in(&model_dir))?;
            fs::create_dir_all(&out)?;
            let (records, _) = records_from(&data, &cfg, &models, &out)?;
            let (cgt, dgt) = fit_drivers(&cfg, &records, &models)?;
            write_json(&cgt_path.unwrap_or_else(|| out.join("cgt.json")), &cgt)?;
            write_json(&dgt_out.unwrap_or_else(|| out.join("dgt.json")), &dgt)?;
            for (c, d) in cgt.iter().zip(&dgt) {
                let pct = |p: Option<f64>| p.map_or("n/a".to_string(), |v| format!("{v:.1}%"));
                println!("driver {}: {} states, CGT {}, DGT {}", c.driver_id, c.n_comparisons, pct(c.percent), pct(d.percent));
            }
        }
        Command::BestResponse {
            coeffs,
            top_level,
            grid,
            verify,
        } => {
            let n = top_level.unwrap_or(coeffs.len());
            let opponent = MixedStrategy::new(coeffs)?;
            let br = best_response_set(&opponent, n)?;
            let mut report = serde_json::json!({
                "levels": br.levels,
                "strategy": br.strategy,
                "value": br.value,
            });
            if verify {
                let oracle = brute_force_best_response(&opponent, n, grid, DEFAULT_GRID_CAP)?;
                let achieved = mixed_utility(&br.strategy, &opponent.padded(n + 1)?)?;
                let agrees = (oracle.value - br.value).abs() <= 1e-12 && achieved == br.value;
                report["oracle"] = serde_json::json!({
                    "grid_step": grid,
                    "points": oracle.points,
                    "max": oracle.value,
                    "argmax_count": oracle.argmax.len(),
                    "strategy_utility": achieved,
                    "agrees": agrees,
                });
                println!("{}", serde_json::to_string_pretty(&report)?);
                if !agrees {
                    bail!("best response disagrees with the grid oracle");
                }
            } else {
                println!("{}", serde_json::to_string_pretty(&report)?);
            }
        }
        Command::Report { cgt, dgt, truth, dir } => {
            let cgt: Vec<DriverReport> = read_json(&cgt.unwrap_or_else(|| out.join("cgt.json")))?;
            let dgt: Vec<DriverReport> = read_json(&dgt.unwrap_or_else(|| out.join("dgt.json")))?;
            let truth: BTreeMap<u64, f64> = match truth {
                Some(p) => read_json(&p)?,
                None => BTreeMap::new(),
            };
            let bundle = build_report(&cgt, &dgt, &truth)?;
            let dir = dir.unwrap_or_else(|| out.join("report"));
            bundle.write(&dir)?;
            print_comparison(&bundle.comparison);
            println!("wrote {}", dir.display());
        }
        Command::Pipeline { no_train, model_dir } => {
            let bundle = run_pipeline(&cfg, &out, &PipelineOptions { no_train, model_dir })?;
            print_comparison(&bundle.comparison);
            println!("wrote {}", out.join("report").display());
        }
    }
    Ok(())
}

fn print_comparison(c: &levelk::report::MethodComparison) {
    println!(
        "{} drivers: mean success CGT {:.2}%, DGT {:.2}% (difference {:.2})",
        c.drivers, c.cgt_mean_percent, c.dgt_mean_percent, c.difference
    );
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build()?;
    pool.install(|| run(cli, cfg))
}
