//! Uncertainty sampling: least confidence, margin and entropy scores over a
//! posterior matrix, and top-k selection of the most uncertain instances.

use std::fmt;
use std::str::FromStr;

use crate::classifier::PosteriorMatrix;
use crate::dataset::InstanceId;
use crate::selection::{check_log_base, entropy, top_k, Preference, SelectionError};

/// Default entropy base. Base 10 reproduces the textbook worked values;
/// the selected instances are the same for every base.
pub const DEFAULT_LOG_BASE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UncertaintyKind {
    LeastConfidence,
    MarginSampling,
    EntropySampling,
}

impl UncertaintyKind {
    pub const ALL: [UncertaintyKind; 3] = [
        UncertaintyKind::LeastConfidence,
        UncertaintyKind::MarginSampling,
        UncertaintyKind::EntropySampling,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UncertaintyKind::LeastConfidence => "lc",
            UncertaintyKind::MarginSampling => "ms",
            UncertaintyKind::EntropySampling => "es",
        }
    }

    /// Margins are queried smallest-first; the other scores largest-first.
    pub fn preference(self) -> Preference {
        match self {
            UncertaintyKind::MarginSampling => Preference::Lowest,
            _ => Preference::Highest,
        }
    }
}

impl fmt::Display for UncertaintyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for UncertaintyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        UncertaintyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown uncertainty strategy {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintyStrategy {
    pub kind: UncertaintyKind,
    /// Only used by entropy sampling.
    pub entropy_log_base: f64,
}

impl UncertaintyStrategy {
    pub fn new(kind: UncertaintyKind) -> Self {
        UncertaintyStrategy {
            kind,
            entropy_log_base: DEFAULT_LOG_BASE,
        }
    }

    pub fn with_log_base(mut self, base: f64) -> Self {
        self.entropy_log_base = base;
        self
    }

    pub fn scores(&self, posteriors: &PosteriorMatrix) -> Result<Vec<f64>, SelectionError> {
        match self.kind {
            UncertaintyKind::LeastConfidence => lc_scores(posteriors),
            UncertaintyKind::MarginSampling => ms_scores(posteriors),
            UncertaintyKind::EntropySampling => es_scores(posteriors, self.entropy_log_base),
        }
    }
}

fn nonempty(posteriors: &PosteriorMatrix) -> Result<(), SelectionError> {
    if posteriors.is_empty() {
        Err(SelectionError::EmptyPool)
    } else {
        Ok(())
    }
}

/// `1 − max_y p(y|x)` per row.
pub fn lc_scores(posteriors: &PosteriorMatrix) -> Result<Vec<f64>, SelectionError> {
    nonempty(posteriors)?;
    Ok(posteriors
        .values()
        .outer_iter()
        .map(|row| 1.0 - row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

/// Gap between the two largest posteriors per row.
pub fn ms_scores(posteriors: &PosteriorMatrix) -> Result<Vec<f64>, SelectionError> {
    nonempty(posteriors)?;
    if posteriors.cols() < 2 {
        return Err(SelectionError::TooFewClasses {
            needed: 2,
            found: posteriors.cols(),
        });
    }
    Ok(posteriors
        .values()
        .outer_iter()
        .map(|row| {
            let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for &p in row {
                if p > first {
                    second = first;
                    first = p;
                } else if p > second {
                    second = p;
                }
            }
            first - second
        })
        .collect())
}

/// Shannon entropy of each row in the given base.
pub fn es_scores(posteriors: &PosteriorMatrix, log_base: f64) -> Result<Vec<f64>, SelectionError> {
    let ln_base = check_log_base(log_base)?;
    nonempty(posteriors)?;
    Ok(posteriors
        .values()
        .outer_iter()
        .map(|row| entropy(row, ln_base))
        .collect())
}

/// Row positions and scores of the `k` most uncertain instances, in
/// selection order.
pub fn rank_uncertain(
    posteriors: &PosteriorMatrix,
    strategy: &UncertaintyStrategy,
    k: usize,
) -> Result<Vec<(usize, f64)>, SelectionError> {
    let scores = strategy.scores(posteriors)?;
    let picked = top_k(&scores, k, strategy.kind.preference())?;
    Ok(picked.into_iter().map(|i| (i, scores[i])).collect())
}

pub fn select_uncertain(
    posteriors: &PosteriorMatrix,
    strategy: &UncertaintyStrategy,
    k: usize,
) -> Result<Vec<InstanceId>, SelectionError> {
    Ok(rank_uncertain(posteriors, strategy, k)?
        .into_iter()
        .map(|(i, _)| posteriors.ids()[i].clone())
        .collect())
}
