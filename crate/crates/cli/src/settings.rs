//! Merges the config file with command-line flags into concrete settings.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use poolal::classifier::TrainConfig;
use poolal::dataset::{
    generate_synthetic, irrelevant_for_fraction, load_csv, read_class_list, CsvSchema, Dataset,
    SyntheticSpec,
};
use poolal::engine::{LoopConfig, Strategy};

use crate::args::{DataArgs, LoopArgs, SyntheticArgs};
use crate::config::{parse_list, ConfigError, ConfigFile};
use crate::CliError;

pub const DEFAULT_OUT_DIR: &str = "poolal-out";
pub const DEFAULT_SAVE_EVERY: usize = 50;

/// Flag value if given, else the config file's, else `None`.
fn pick<T: FromStr>(flag: Option<T>, file: &ConfigFile, key: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: fmt::Display,
{
    match flag {
        Some(v) => Ok(Some(v)),
        None => file.get(key),
    }
}

fn pick_list<T: FromStr>(flag: Option<&str>, file: &ConfigFile, key: &str) -> Result<Option<Vec<T>>, CliError>
where
    T::Err: fmt::Display,
{
    match flag {
        Some(text) => parse_list(text).map(Some).map_err(|e| CliError::Usage(format!("--{}: {e}", flag_name(key)))),
        None => Ok(file.get_list(key)?),
    }
}

fn flag_name(key: &str) -> String {
    key.rsplit('.').next().unwrap_or(key).replace('_', "-")
}

pub struct Global {
    pub file: ConfigFile,
    pub out_dir: PathBuf,
    pub rng_seed: u64,
    pub verbose: bool,
}

impl Global {
    pub fn new(
        config: Option<&Path>,
        out_dir: Option<PathBuf>,
        rng_seed: Option<u64>,
        verbose: bool,
    ) -> Result<Self, CliError> {
        let file = match config {
            Some(path) => ConfigFile::load(path)?,
            None => ConfigFile::default(),
        };
        let rng_seed = pick(rng_seed, &file, "experiment.rng_seed")?.unwrap_or(0);
        Ok(Global {
            file,
            out_dir: out_dir.unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR)),
            rng_seed,
            verbose,
        })
    }

    pub fn synthetic_spec(&self, classes: Option<usize>, args: &SyntheticArgs) -> Result<SyntheticSpec, CliError> {
        let f = &self.file;
        let d = SyntheticSpec::default();
        let num_classes = pick(classes, f, "dataset.num_classes")?.unwrap_or(d.num_classes);
        let pool_per_class = pick(args.pool_per_class, f, "dataset.pool_per_class")?.unwrap_or(d.pool_per_class);
        let count = pick(args.irrelevant, f, "dataset.irrelevant_count")?;
        let fraction = pick(args.irrelevant_fraction, f, "dataset.irrelevant_fraction")?;
        let irrelevant_count = match (count, fraction) {
            (Some(_), Some(_)) => {
                return Err(CliError::Usage(
                    "give either an irrelevant count or an irrelevant fraction, not both".into(),
                ))
            }
            (Some(n), None) => n,
            (None, Some(p)) if (0.0..1.0).contains(&p) => irrelevant_for_fraction(num_classes * pool_per_class, p),
            (None, Some(p)) => return Err(CliError::Usage(format!("irrelevant fraction {p} is outside [0, 1)"))),
            (None, None) => irrelevant_for_fraction(num_classes * pool_per_class, 0.3),
        };
        Ok(SyntheticSpec {
            num_classes,
            dim: pick(args.dim, f, "dataset.dim")?.unwrap_or(d.dim),
            seed_per_class: pick(args.seed_per_class, f, "dataset.seed_per_class")?.unwrap_or(d.seed_per_class),
            pool_per_class,
            irrelevant_count,
            test_per_class: pick(args.test_per_class, f, "dataset.test_per_class")?.unwrap_or(d.test_per_class),
            cluster_separation: pick(args.separation, f, "dataset.separation")?.unwrap_or(d.cluster_separation),
            rng_seed: self.rng_seed,
        })
    }

    pub fn data_source(&self, args: &DataArgs) -> Result<DataSource, CliError> {
        let csv = match &args.data {
            Some(p) => Some(p.clone()),
            None => self.file.raw("dataset.csv").map(PathBuf::from),
        };
        match csv {
            Some(path) => {
                let classes = args
                    .classes_file
                    .clone()
                    .or_else(|| self.file.raw("dataset.classes").map(PathBuf::from))
                    .or_else(|| {
                        let sidecar = path.with_file_name("classes.txt");
                        sidecar.exists().then_some(sidecar)
                    });
                Ok(DataSource::Csv { path, classes })
            }
            None => Ok(DataSource::Synthetic(self.synthetic_spec(args.classes, &args.synthetic)?)),
        }
    }

    pub fn loop_config(&self, args: &LoopArgs) -> Result<(LoopConfig, usize), CliError> {
        let f = &self.file;
        let d = LoopConfig::default();
        let t = TrainConfig::default();
        let max_iterations = pick(args.max_iterations, f, "loop.max_iterations")?.unwrap_or(d.max_iterations);
        let explicit = pick_list::<usize>(args.checkpoints.as_deref(), f, "loop.checkpoints")?;
        let cfg = LoopConfig {
            strategy: d.strategy,
            batch_size: pick(args.batch_size, f, "loop.batch_size")?.unwrap_or(d.batch_size),
            max_iterations,
            checkpoint_iterations: explicit.clone().unwrap_or(d.checkpoint_iterations),
            committee_size: pick(args.committee_size, f, "loop.committee_size")?.unwrap_or(d.committee_size),
            classifier: TrainConfig {
                l2_penalty: pick(args.l2_penalty, f, "classifier.l2_penalty")?.unwrap_or(t.l2_penalty),
                learning_rate: pick(args.learning_rate, f, "classifier.learning_rate")?.unwrap_or(t.learning_rate),
                max_epochs: pick(args.max_epochs, f, "classifier.max_epochs")?.unwrap_or(t.max_epochs),
                convergence_tol: f.get("classifier.convergence_tol")?.unwrap_or(t.convergence_tol),
                rng_seed: t.rng_seed,
            },
            retrain_every: pick(args.retrain_every, f, "loop.retrain_every")?.unwrap_or(d.retrain_every),
            rng_seed: self.rng_seed,
            log_base: pick(args.log_base, f, "loop.log_base")?.unwrap_or(d.log_base),
        };
        // Defaults adapt to a shorter budget; explicit lists must be valid as given.
        let cfg = if explicit.is_none() {
            let mut c = cfg.clamp_checkpoints();
            if c.checkpoint_iterations.last() != Some(&max_iterations) && max_iterations > 0 {
                c.checkpoint_iterations.push(max_iterations);
            }
            c
        } else {
            cfg
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        let save_every = pick(args.save_every, f, "loop.save_every")?.unwrap_or(DEFAULT_SAVE_EVERY);
        if save_every == 0 {
            return Err(CliError::Usage("save_every must be positive".into()));
        }
        Ok((cfg, save_every))
    }

    pub fn strategies(&self, flag: Option<&str>, allow_empty: bool) -> Result<Vec<Strategy>, CliError> {
        let list = pick_list::<Strategy>(flag, &self.file, "experiment.strategies")?
            .unwrap_or_else(|| Strategy::ALL.into_iter().filter(|s| *s != Strategy::Random).collect());
        if list.is_empty() && !allow_empty {
            return Err(CliError::Usage("the strategy list is empty".into()));
        }
        Ok(list)
    }

    pub fn repetitions(&self, flag: Option<usize>) -> Result<usize, CliError> {
        let n = pick(flag, &self.file, "experiment.repetitions")?.unwrap_or(1);
        if n == 0 {
            return Err(CliError::Usage("repetitions must be at least 1".into()));
        }
        Ok(n)
    }

    pub fn log(&self, message: impl fmt::Display) {
        if self.verbose {
            eprintln!("{message}");
        }
    }
}

#[derive(Debug, Clone)]
pub enum DataSource {
    Csv { path: PathBuf, classes: Option<PathBuf> },
    Synthetic(SyntheticSpec),
}

impl DataSource {
    /// The dataset for repetition `rep`. Synthetic data is redrawn with seed
    /// `rng_seed + rep`; a CSV is the same for every repetition.
    pub fn load(&self, rep: usize) -> Result<Arc<Dataset>, CliError> {
        let ds = match self {
            DataSource::Csv { path, classes } => {
                let schema = match classes {
                    Some(p) => CsvSchema::with_classes(read_class_list(p).map_err(runtime)?),
                    None => CsvSchema::default(),
                };
                load_csv(path, &schema).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?
            }
            DataSource::Synthetic(spec) => generate_synthetic(&SyntheticSpec {
                rng_seed: spec.rng_seed.wrapping_add(rep as u64),
                ..spec.clone()
            })
            .map_err(runtime)?,
        };
        Ok(Arc::new(ds))
    }

    pub fn varies_per_repetition(&self) -> bool {
        matches!(self, DataSource::Synthetic(_))
    }
}

pub fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}
