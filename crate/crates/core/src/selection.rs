//! Top-k selection over per-instance scores with deterministic tie-breaking.

use std::cmp::Ordering;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SelectionError {
    #[error("the pool is empty")]
    EmptyPool,
    #[error("asked for {k} instances from a pool of {n}")]
    TooMany { k: usize, n: usize },
    #[error("invalid log base {0}")]
    InvalidLogBase(String),
    #[error("strategy needs at least {needed} classes, found {found}")]
    TooFewClasses { needed: usize, found: usize },
    #[error("committee members disagree on shape: {0}")]
    CommitteeShape(String),
    #[error("committee needs at least 2 members, got {0}")]
    CommitteeTooSmall(usize),
}

/// Whether larger or smaller scores are more informative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preference {
    Highest,
    Lowest,
}

/// Positions of the `k` best scores in selection order. Equal scores keep
/// pool order (earliest first).
pub fn top_k(scores: &[f64], k: usize, pref: Preference) -> Result<Vec<usize>, SelectionError> {
    if scores.is_empty() {
        return Err(SelectionError::EmptyPool);
    }
    if k > scores.len() {
        return Err(SelectionError::TooMany { k, n: scores.len() });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let cmp = |a: &usize, b: &usize| -> Ordering {
        let by_score = match pref {
            Preference::Highest => scores[*b].total_cmp(&scores[*a]),
            Preference::Lowest => scores[*a].total_cmp(&scores[*b]),
        };
        by_score.then(a.cmp(b))
    };
    if k < order.len() {
        order.select_nth_unstable_by(k, cmp);
        order.truncate(k);
    }
    order.sort_unstable_by(cmp);
    Ok(order)
}

pub(crate) fn check_log_base(base: f64) -> Result<f64, SelectionError> {
    if base > 0.0 && base.is_finite() && base != 1.0 {
        Ok(base.ln())
    } else {
        Err(SelectionError::InvalidLogBase(base.to_string()))
    }
}

/// Shannon entropy `-Σ p log_b p` with the `0 · log 0 = 0` convention;
/// `ln_base` is `ln(b)`.
pub(crate) fn entropy<'a>(probs: impl IntoIterator<Item = &'a f64>, ln_base: f64) -> f64 {
    let terms = probs
        .into_iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .collect();
    order_free_sum(terms) / ln_base
}

/// Sums in ascending order, so rows that are permutations of each other
/// score bit-identically and tie-breaking by pool order stays exact.
pub(crate) fn order_free_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}
