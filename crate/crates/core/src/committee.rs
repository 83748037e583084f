//! Query-by-committee: a bagged committee of softmax models and the three
//! disagreement measures (vote entropy, consensus entropy, max
//! disagreement).

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::classifier::{
    self, argmax, ClassifierError, ModelParams, PosteriorMatrix, ProbabilisticClassifier,
    TrainConfig,
};
use crate::dataset::InstanceId;
use crate::selection::{check_log_base, entropy, order_free_sum, top_k, Preference, SelectionError};
use crate::uncertainty::{es_scores, DEFAULT_LOG_BASE};

pub const DEFAULT_COMMITTEE_SIZE: usize = 3;

/// Bootstrap redraws before a member falls back to the full labeled set.
pub const MAX_BOOTSTRAP_RETRIES: usize = 10;

/// Lower clamp on probabilities inside the logarithm of the KL divergence.
pub const KL_CLAMP: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum CommitteeError {
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
}

pub type Result<T, E = CommitteeError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct Committee {
    members: Vec<ModelParams>,
    member_rng_seeds: Vec<u64>,
}

impl Committee {
    pub fn new(members: Vec<ModelParams>, member_rng_seeds: Vec<u64>) -> Result<Self> {
        if members.len() < 2 {
            return Err(SelectionError::CommitteeTooSmall(members.len()).into());
        }
        if member_rng_seeds.len() != members.len() {
            return Err(SelectionError::CommitteeShape(format!(
                "{} members but {} seeds",
                members.len(),
                member_rng_seeds.len()
            ))
            .into());
        }
        let shape = members[0].weights.dim();
        if members.iter().any(|m| m.weights.dim() != shape) {
            return Err(SelectionError::CommitteeShape("members differ in m or d".into()).into());
        }
        Ok(Committee {
            members,
            member_rng_seeds,
        })
    }

    pub fn members(&self) -> &[ModelParams] {
        &self.members
    }

    pub fn member_rng_seeds(&self) -> &[u64] {
        &self.member_rng_seeds
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    /// Each member's posteriors for the rows of `x`.
    pub fn member_posteriors(
        &self,
        x: ArrayView2<'_, f64>,
        ids: &[InstanceId],
    ) -> Result<Vec<PosteriorMatrix>> {
        self.members
            .iter()
            .map(|m| m.predict_proba(x, ids).map_err(CommitteeError::from))
            .collect()
    }

    /// Concatenated `alm1` blocks, one per member.
    pub fn to_checkpoint(&self) -> String {
        self.members.iter().map(ModelParams::to_checkpoint).collect()
    }

    pub fn from_checkpoint(text: &str, member_rng_seeds: Vec<u64>) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty()).peekable();
        let mut members = Vec::new();
        while lines.peek().is_some() {
            members.push(classifier::parse_checkpoint(&mut lines)?);
        }
        Committee::new(members, member_rng_seeds)
    }
}

impl ProbabilisticClassifier for Committee {
    fn num_classes(&self) -> usize {
        self.members[0].num_classes()
    }

    fn dim(&self) -> usize {
        self.members[0].dim()
    }

    /// Consensus posteriors.
    fn predict_proba(
        &self,
        x: ArrayView2<'_, f64>,
        ids: &[InstanceId],
    ) -> classifier::Result<PosteriorMatrix> {
        let members = self
            .members
            .iter()
            .map(|m| m.predict_proba(x, ids))
            .collect::<classifier::Result<Vec<_>>>()?;
        consensus_of(&members).map_err(|e| match e {
            CommitteeError::Classifier(c) => c,
            CommitteeError::Selection(s) => ClassifierError::Shape(s.to_string()),
        })
    }
}

/// Trains `size` members, member `i` on a bootstrap resample drawn with seed
/// `base_seed + i`. A resample that misses a class present in `y` is redrawn
/// up to [`MAX_BOOTSTRAP_RETRIES`] times, then the member trains on the full
/// set.
pub fn train_committee(
    x: ArrayView2<'_, f64>,
    y: &[usize],
    num_classes: usize,
    size: usize,
    cfg: &TrainConfig,
    base_seed: u64,
) -> Result<Committee> {
    if size < 2 {
        return Err(SelectionError::CommitteeTooSmall(size).into());
    }
    if x.nrows() != y.len() {
        return Err(ClassifierError::Shape(format!(
            "{} feature rows but {} labels",
            x.nrows(),
            y.len()
        ))
        .into());
    }
    let n = y.len();
    let mut present = vec![false; num_classes];
    for &c in y {
        if c >= num_classes {
            return Err(ClassifierError::Shape(format!("label {c} outside 0..{num_classes}")).into());
        }
        present[c] = true;
    }
    let needed = present.iter().filter(|&&p| p).count();

    let mut members = Vec::with_capacity(size);
    let mut seeds = Vec::with_capacity(size);
    for i in 0..size {
        let seed = base_seed.wrapping_add(i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sample = None;
        for _ in 0..=MAX_BOOTSTRAP_RETRIES {
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n.max(1))).collect();
            let mut covered = vec![false; num_classes];
            for &j in &idx {
                covered[y[j]] = true;
            }
            if covered.iter().filter(|&&c| c).count() == needed {
                sample = Some(idx);
                break;
            }
        }
        let model = match sample {
            Some(idx) => {
                let xs = x.select(ndarray::Axis(0), &idx);
                let ys: Vec<usize> = idx.iter().map(|&j| y[j]).collect();
                classifier::train(xs.view(), &ys, num_classes, cfg)?
            }
            None => classifier::train(x, y, num_classes, cfg)?,
        };
        members.push(model);
        seeds.push(seed);
    }
    Committee::new(members, seeds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DisagreementKind {
    VoteEntropy,
    ConsensusEntropy,
    MaxDisagreement,
}

impl DisagreementKind {
    pub const ALL: [DisagreementKind; 3] = [
        DisagreementKind::VoteEntropy,
        DisagreementKind::ConsensusEntropy,
        DisagreementKind::MaxDisagreement,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DisagreementKind::VoteEntropy => "ve",
            DisagreementKind::ConsensusEntropy => "ce",
            DisagreementKind::MaxDisagreement => "md",
        }
    }
}

impl fmt::Display for DisagreementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DisagreementKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        DisagreementKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown disagreement strategy {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisagreementStrategy {
    pub kind: DisagreementKind,
    /// Base for vote and consensus entropy. Max disagreement is in nats.
    pub log_base: f64,
}

impl DisagreementStrategy {
    pub fn new(kind: DisagreementKind) -> Self {
        DisagreementStrategy {
            kind,
            log_base: DEFAULT_LOG_BASE,
        }
    }

    pub fn with_log_base(mut self, base: f64) -> Self {
        self.log_base = base;
        self
    }

    /// Scores computed from precomputed member posteriors.
    pub fn scores_from(&self, members: &[PosteriorMatrix]) -> Result<Vec<f64>> {
        match self.kind {
            DisagreementKind::VoteEntropy => vote_entropy_from(members, self.log_base),
            DisagreementKind::ConsensusEntropy => {
                Ok(es_scores(&consensus_of(members)?, self.log_base)?)
            }
            DisagreementKind::MaxDisagreement => max_disagreement_from(members),
        }
    }
}

fn check_members(members: &[PosteriorMatrix]) -> Result<(usize, usize)> {
    let first = members
        .first()
        .ok_or(SelectionError::CommitteeTooSmall(0))?;
    let shape = (first.rows(), first.cols());
    if members.iter().any(|p| (p.rows(), p.cols()) != shape) {
        return Err(SelectionError::CommitteeShape("member posteriors differ in shape".into()).into());
    }
    if shape.0 == 0 {
        return Err(SelectionError::EmptyPool.into());
    }
    Ok(shape)
}

/// Fraction of members voting for each class, per instance. Each member
/// votes its argmax class (ties to the lowest index).
pub fn vote_distribution(members: &[PosteriorMatrix]) -> Result<Array2<f64>> {
    let (n, m) = check_members(members)?;
    let mut votes = Array2::<f64>::zeros((n, m));
    for member in members {
        for (i, row) in member.values().outer_iter().enumerate() {
            votes[[i, argmax(row)]] += 1.0;
        }
    }
    votes /= members.len() as f64;
    Ok(votes)
}

fn vote_entropy_from(members: &[PosteriorMatrix], log_base: f64) -> Result<Vec<f64>> {
    let ln_base = check_log_base(log_base)?;
    let votes = vote_distribution(members)?;
    Ok(votes.outer_iter().map(|row| entropy(row, ln_base)).collect())
}

/// Element-wise mean of member posteriors.
pub fn consensus_of(members: &[PosteriorMatrix]) -> Result<PosteriorMatrix> {
    let (n, m) = check_members(members)?;
    let mut sum = Array2::<f64>::zeros((n, m));
    for member in members {
        sum += &member.values();
    }
    sum /= members.len() as f64;
    Ok(PosteriorMatrix::new(sum, members[0].ids().to_vec())?)
}

/// `KL(p ‖ q)` in nats with both sides clamped below by [`KL_CLAMP`] inside
/// the logarithm; zero-probability terms of `p` contribute nothing.
pub fn kl_divergence<'a>(
    p: impl IntoIterator<Item = &'a f64>,
    q: impl IntoIterator<Item = &'a f64>,
) -> f64 {
    let terms = p
        .into_iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.max(KL_CLAMP).ln() - qi.max(KL_CLAMP).ln()))
        .collect();
    order_free_sum(terms).max(0.0)
}

/// Member `j`'s divergence from the consensus, with the consensus expressed
/// as `p_j + d` where `d` averages the exact differences `p_k - p_j`. Then
/// `ln p - ln q = -ln_1p(d / p)`, which is exactly zero when all members
/// agree and keeps full precision when they nearly do. Components below
/// [`KL_CLAMP`] fall back to the clamped form of [`kl_divergence`].
fn member_divergence(members: &[PosteriorMatrix], j: usize, i: usize) -> f64 {
    let c = members.len() as f64;
    let p_j = members[j].row(i);
    let terms = p_j
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(col, &p)| {
            let d = members.iter().map(|m| m.values()[[i, col]] - p).sum::<f64>() / c;
            let q = p + d;
            if p >= KL_CLAMP && q >= KL_CLAMP {
                -p * (d / p).ln_1p()
            } else {
                p * (p.max(KL_CLAMP).ln() - q.max(KL_CLAMP).ln())
            }
        })
        .collect();
    order_free_sum(terms).max(0.0)
}

fn max_disagreement_from(members: &[PosteriorMatrix]) -> Result<Vec<f64>> {
    let (n, _) = check_members(members)?;
    Ok((0..n)
        .map(|i| {
            (0..members.len())
                .map(|j| member_divergence(members, j, i))
                .fold(0.0, f64::max)
        })
        .collect())
}

pub fn vote_entropy_scores(
    committee: &Committee,
    x: ArrayView2<'_, f64>,
    log_base: f64,
) -> Result<Vec<f64>> {
    let members = committee.member_posteriors(x, &positional_ids(x.nrows()))?;
    vote_entropy_from(&members, log_base)
}

pub fn consensus_proba(
    committee: &Committee,
    x: ArrayView2<'_, f64>,
    ids: &[InstanceId],
) -> Result<PosteriorMatrix> {
    consensus_of(&committee.member_posteriors(x, ids)?)
}

pub fn consensus_entropy_scores(
    committee: &Committee,
    x: ArrayView2<'_, f64>,
    log_base: f64,
) -> Result<Vec<f64>> {
    let consensus = consensus_proba(committee, x, &positional_ids(x.nrows()))?;
    Ok(es_scores(&consensus, log_base)?)
}

/// Largest member KL divergence from the consensus, per instance (nats).
pub fn max_disagreement_scores(committee: &Committee, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    let members = committee.member_posteriors(x, &positional_ids(x.nrows()))?;
    max_disagreement_from(&members)
}

fn positional_ids(n: usize) -> Vec<InstanceId> {
    (0..n).map(|i| InstanceId::new(i.to_string())).collect()
}

/// Positions and scores of the `k` instances with the most disagreement,
/// computed from member posteriors over the pool.
pub fn rank_by_disagreement(
    members: &[PosteriorMatrix],
    strategy: &DisagreementStrategy,
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    let scores = strategy.scores_from(members)?;
    let picked = top_k(&scores, k, Preference::Highest)?;
    Ok(picked.into_iter().map(|i| (i, scores[i])).collect())
}

pub fn select_by_committee(
    committee: &Committee,
    pool_ids: &[InstanceId],
    pool_x: ArrayView2<'_, f64>,
    strategy: &DisagreementStrategy,
    k: usize,
) -> Result<Vec<InstanceId>> {
    if pool_ids.is_empty() {
        return Err(SelectionError::EmptyPool.into());
    }
    let members = committee.member_posteriors(pool_x, pool_ids)?;
    Ok(rank_by_disagreement(&members, strategy, k)?
        .into_iter()
        .map(|(i, _)| pool_ids[i].clone())
        .collect())
}
