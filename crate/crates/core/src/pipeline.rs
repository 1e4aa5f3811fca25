//! End-to-end orchestration: train levels, fit per-state GPs, obtain driver
//! records (synthetic or ingested), fit CGT and DGT levels, and summarize.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ingest_trajectories, synthesize_driver, DriverSource, IngestConfig, SyntheticDriverSpec};
use crate::error::{Error, Result};
use crate::fitting::{compare_driver, compare_driver_dgt, DriverRecord, DriverReport, FitConfig};
use crate::gp::{fit_state_gp, ModelCache, OptimizerConfig};
use crate::kernels::BankConfig;
use crate::levelk::{build_observation_set, train_levels, EnvConfig, LevelTables, RlConfig};
use crate::report::{build_report, ReportBundle};
use crate::rng;
use crate::StateId;

// stream tags keeping stage RNGs apart
const GP_STREAM: u64 = 1;
const SYNTH_STREAM: u64 = 2;
const FIT_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    TrainLevels,
    BuildGp,
    Synthesize,
    Ingest,
    FitDrivers,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::TrainLevels => "train-levels",
            Stage::BuildGp => "build-gp",
            Stage::Synthesize => "synthesize",
            Stage::Ingest => "ingest",
            Stage::FitDrivers => "fit-drivers",
            Stage::Report => "report",
        })
    }
}

#[derive(Debug, thiserror::Error)]
#[error("stage {stage} failed: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticCorpus {
    pub drivers: usize,
    /// Most-visited states (across all level tables) that get a GP.
    pub state_pool: usize,
    pub states_per_driver: usize,
    pub samples: u64,
    /// Driver `i` has true level `levels[i mod len]`.
    pub levels: Vec<f64>,
}

impl Default for SyntheticCorpus {
    fn default() -> Self {
        SyntheticCorpus {
            drivers: 50,
            state_pool: 40,
            states_per_driver: 20,
            samples: 500,
            levels: (0..=12).map(|i| i as f64 * 0.25).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum Corpus {
    Synthetic(SyntheticCorpus),
    Trajectories {
        path: PathBuf,
        #[serde(default)]
        ingest: IngestConfig,
    },
}

impl Default for Corpus {
    fn default() -> Self {
        Corpus::Synthetic(SyntheticCorpus::default())
    }
}

/// Master configuration shared by every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub max_level: usize,
    pub env: EnvConfig,
    pub rl: RlConfig,
    pub kernels: BankConfig,
    pub optimizer: OptimizerConfig,
    pub fit: FitConfig,
    pub corpus: Corpus,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            max_level: 3,
            env: EnvConfig::default(),
            rl: RlConfig::default(),
            kernels: BankConfig::default(),
            optimizer: OptimizerConfig::default(),
            fit: FitConfig::default(),
            corpus: Corpus::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PipelineConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.kernels.validate()?;
        self.fit.sa.validate()?;
        if self.max_level == 0 {
            return Err(Error::Configuration("max_level must be ≥ 1".into()));
        }
        if let Corpus::Synthetic(c) = &self.corpus {
            if c.levels.is_empty() || c.states_per_driver > c.state_pool || c.samples == 0 {
                return Err(Error::Configuration(
                    "synthetic corpus needs levels, samples ≥ 1 and states_per_driver ≤ state_pool".into(),
                ));
            }
            if let Some(l) = c.levels.iter().find(|l| !(0.0..=self.max_level as f64).contains(*l)) {
                return Err(Error::Configuration(format!("synthetic level {l} outside [0, max_level]")));
            }
        }
        Ok(())
    }

    /// Integer training levels `0..=max_level`.
    pub fn training_levels(&self) -> Vec<f64> {
        (0..=self.max_level).map(|k| k as f64).collect()
    }
}

/// Fits one GP per state in parallel; state `s` seeds its restarts from
/// `(seed, s)`.
pub fn build_models(cfg: &PipelineConfig, levels: &LevelTables, states: &[StateId]) -> Result<ModelCache> {
    let xs = cfg.training_levels();
    let fitted = states
        .par_iter()
        .map(|&s| {
            let set = build_observation_set(s, levels)?;
            let opt = OptimizerConfig {
                seed: rng::derive_seed(cfg.seed, &[GP_STREAM, u64::from(s)]),
                ..cfg.optimizer.clone()
            };
            Ok((s, fit_state_gp(&xs, &set, &cfg.kernels, &opt)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let cache = ModelCache::new();
    for (s, gp) in fitted {
        cache.insert(s, gp);
    }
    Ok(cache)
}

/// Synthetic drivers over a fixed state pool, with their true levels.
pub fn synthesize_corpus(
    cfg: &PipelineConfig,
    corpus: &SyntheticCorpus,
    pool: &[StateId],
    models: &ModelCache,
) -> Result<(Vec<DriverRecord>, BTreeMap<u64, f64>)> {
    if pool.len() < corpus.states_per_driver {
        return Err(Error::Input(format!(
            "state pool has {} states, drivers need {}",
            pool.len(),
            corpus.states_per_driver
        )));
    }
    let drivers: Vec<(DriverRecord, f64)> = (0..corpus.drivers as u64)
        .into_par_iter()
        .map(|id| {
            let level = corpus.levels[id as usize % corpus.levels.len()];
            let mut states = pool.to_vec();
            states.shuffle(&mut rng::stream(cfg.seed, &[SYNTH_STREAM, id]));
            states.truncate(corpus.states_per_driver);
            states.sort_unstable();
            let spec = SyntheticDriverSpec {
                driver_id: id,
                level,
                states,
                samples: corpus.samples,
                seed: rng::derive_seed(cfg.seed, &[SYNTH_STREAM]),
            };
            Ok((synthesize_driver(&spec, DriverSource::Gp(models))?, level))
        })
        .collect::<Result<Vec<_>>>()?;
    let truth = drivers.iter().map(|(r, l)| (r.driver_id, *l)).collect();
    Ok((drivers.into_iter().map(|(r, _)| r).collect(), truth))
}

/// CGT and DGT reports for every driver, in input order.
pub fn fit_drivers(cfg: &PipelineConfig, records: &[DriverRecord], models: &ModelCache) -> Result<(Vec<DriverReport>, Vec<DriverReport>)> {
    let lookup = |s: StateId| models.get(s).ok_or(Error::UnfittedState(s));
    let seed = rng::derive_seed(cfg.seed, &[FIT_STREAM]);
    let pairs = records
        .par_iter()
        .map(|r| Ok((compare_driver(r, lookup, &cfg.fit, seed)?, compare_driver_dgt(r, lookup, &cfg.fit)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(pairs.into_iter().unzip())
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOptions {
    /// Reuse models from the model directory instead of training.
    pub no_train: bool,
    /// Defaults to `<out>/models`.
    pub model_dir: Option<PathBuf>,
}

/// Runs every stage, writing artifacts under `out`:
/// `levels.json`, `models/`, `drivers.json`, `cgt.json`, `dgt.json`, and
/// the report files.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path, opts: &PipelineOptions) -> std::result::Result<ReportBundle, StageError> {
    cfg.validate().at(Stage::TrainLevels)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e)).at(Stage::TrainLevels)?;
    let model_dir = opts.model_dir.clone().unwrap_or_else(|| out.join("models"));

    let records_from_csv = match &cfg.corpus {
        Corpus::Trajectories { path, ingest } => {
            let summary = ingest_trajectories(path, &cfg.env, ingest).at(Stage::Ingest)?;
            log::info!(
                "ingested {} rows ({} rejected) into {} drivers",
                summary.rows,
                summary.rejected_rows,
                summary.records.len()
            );
            Some(summary.records)
        }
        Corpus::Synthetic(_) => None,
    };

    let (models, pool) = if opts.no_train {
        if !model_dir.is_dir() {
            return Err(StageError {
                stage: Stage::BuildGp,
                source: Error::Input(format!("model directory {} does not exist", model_dir.display())),
            });
        }
        let models = ModelCache::load_dir(&model_dir).at(Stage::BuildGp)?;
        if models.is_empty() {
            return Err(StageError {
                stage: Stage::BuildGp,
                source: Error::Input(format!("no models in {}", model_dir.display())),
            });
        }
        let pool = models.states();
        (models, pool)
    } else {
        let levels = train_levels(&cfg.env, &cfg.rl, cfg.max_level, cfg.seed).at(Stage::TrainLevels)?;
        levels.save(&out.join("levels.json")).at(Stage::TrainLevels)?;
        let states: Vec<StateId> = match (&cfg.corpus, &records_from_csv) {
            (Corpus::Synthetic(c), _) => {
                let mut top: Vec<StateId> = levels.common_states().into_iter().take(c.state_pool).collect();
                top.sort_unstable();
                top
            }
            (_, Some(records)) => records
                .iter()
                .flat_map(|r| r.qualifying_states(cfg.fit.n_th))
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect(),
            (_, None) => unreachable!("trajectory corpus always ingests"),
        };
        let models = build_models(cfg, &levels, &states).at(Stage::BuildGp)?;
        models.save_dir(&model_dir).at(Stage::BuildGp)?;
        (models, states)
    };

    let (records, truth) = match (&cfg.corpus, records_from_csv) {
        (Corpus::Synthetic(c), _) => synthesize_corpus(cfg, c, &pool, &models).at(Stage::Synthesize)?,
        (_, Some(records)) => (records, BTreeMap::new()),
        (_, None) => unreachable!("trajectory corpus always ingests"),
    };
    write_json(&out.join("drivers.json"), &records).at(Stage::Synthesize)?;

    let (cgt, dgt) = fit_drivers(cfg, &records, &models).at(Stage::FitDrivers)?;
    write_json(&out.join("cgt.json"), &cgt).at(Stage::FitDrivers)?;
    write_json(&out.join("dgt.json"), &dgt).at(Stage::FitDrivers)?;

    let bundle = build_report(&cgt, &dgt, &truth).at(Stage::Report)?;
    bundle.write(&out.join("report")).at(Stage::Report)?;
    Ok(bundle)
}
