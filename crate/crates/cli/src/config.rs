//! Flat `key = value` config files with `[section]` headers.
//!
//! ```text
//! # comments start with '#' or ';'
//! [dataset]
//! num_classes = 8
//! [experiment]
//! strategies = lc, ms, es
//! ```
//!
//! Keys are addressed as `section.key`. Unknown sections or keys are errors so
//! that typos surface instead of silently falling back to defaults.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

const KNOWN_KEYS: &[&str] = &[
    "dataset.csv",
    "dataset.classes",
    "dataset.num_classes",
    "dataset.dim",
    "dataset.seed_per_class",
    "dataset.pool_per_class",
    "dataset.irrelevant_count",
    "dataset.irrelevant_fraction",
    "dataset.test_per_class",
    "dataset.separation",
    "loop.batch_size",
    "loop.max_iterations",
    "loop.checkpoints",
    "loop.committee_size",
    "loop.retrain_every",
    "loop.log_base",
    "loop.save_every",
    "classifier.l2_penalty",
    "classifier.learning_rate",
    "classifier.max_epochs",
    "classifier.convergence_tol",
    "experiment.strategies",
    "experiment.repetitions",
    "experiment.rng_seed",
    "serve.bind",
    "serve.strategy",
    "serve.static_dir",
    "serve.query_timeout_secs",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    fn at(line: usize, message: impl Into<String>) -> Self {
        ConfigError {
            line: Some(line),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(n) => write!(f, "line {n}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    /// `section.key` → (raw value, 1-based line).
    entries: BTreeMap<String, (String, usize)>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError::at(n, "unterminated section header"))?
                    .trim();
                let prefix = format!("{name}.");
                if !KNOWN_KEYS.iter().any(|k| k.starts_with(&prefix)) {
                    return Err(ConfigError::at(n, format!("unknown section [{name}]")));
                }
                section = Some(name.to_owned());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::at(n, "expected `key = value`"))?;
            let section = section
                .as_deref()
                .ok_or_else(|| ConfigError::at(n, "key outside of any [section]"))?;
            let full = format!("{section}.{}", key.trim());
            if !KNOWN_KEYS.contains(&full.as_str()) {
                return Err(ConfigError::at(n, format!("unknown key {full}")));
            }
            if entries.insert(full.clone(), (value.trim().to_owned(), n)).is_some() {
                return Err(ConfigError::at(n, format!("duplicate key {full}")));
            }
        }
        Ok(ConfigFile { entries })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            line: None,
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        Self::parse(&text).map_err(|e| ConfigError {
            message: format!("{}: {}", path.display(), e.message),
            ..e
        })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        debug_assert!(KNOWN_KEYS.contains(&key), "{key}");
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let Some((value, line)) = self.entries.get(key) else {
            debug_assert!(KNOWN_KEYS.contains(&key), "{key}");
            return Ok(None);
        };
        value
            .parse()
            .map(Some)
            .map_err(|e| ConfigError::at(*line, format!("{key}: {e}")))
    }

    /// Comma-separated list; an empty value is an empty list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let Some((value, line)) = self.entries.get(key) else {
            return Ok(None);
        };
        parse_list(value)
            .map(Some)
            .map_err(|e| ConfigError::at(*line, format!("{key}: {e}")))
    }
}

pub fn parse_list<T: FromStr>(value: &str) -> Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| format!("{s:?}: {e}")))
        .collect()
}
