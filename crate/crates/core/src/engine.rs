//! The pool-based acquisition loop: train on the labeled set, pick the most
//! informative pool instances, ask an oracle for their labels, grow the
//! labeled set and repeat, recording test accuracy at fixed checkpoints.
//!
//! [`ActiveLearner`] exposes the loop one iteration at a time
//! ([`ActiveLearner::propose`] then [`ActiveLearner::apply`]); [`run_loop`]
//! drives it with an [`Oracle`], and the annotation service drives it with a
//! human.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classifier::{
    self, accuracy, ClassifierError, ModelParams, PosteriorMatrix, ProbabilisticClassifier,
    TrainConfig,
};
use crate::committee::{
    rank_by_disagreement, train_committee, Committee, CommitteeError, DisagreementKind,
    DisagreementStrategy, DEFAULT_COMMITTEE_SIZE,
};
use crate::dataset::{feature_matrix, Dataset, DatasetError, Example, InstanceId};
use crate::selection::{check_log_base, SelectionError};
use crate::uncertainty::{rank_uncertain, UncertaintyKind, UncertaintyStrategy, DEFAULT_LOG_BASE};

/// Oracle attempts per instance before the loop aborts.
pub const ORACLE_ATTEMPTS: usize = 3;

pub const DEFAULT_CHECKPOINTS: [usize; 8] = [1, 250, 500, 750, 1000, 1250, 1500, 2000];

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("the pool is empty")]
    EmptyPool,
    #[error("the test set is empty")]
    EmptyTestSet,
    #[error("no more queries: {0}")]
    Exhausted(&'static str),
    #[error("{0} is not in the remaining pool")]
    NotInPool(InstanceId),
    #[error("class {class} is outside 0..{num_classes}")]
    InvalidClass { class: usize, num_classes: usize },
    #[error("invalid loop configuration: {0}")]
    InvalidConfig(String),
    #[error("oracle failed for {id}: {message}")]
    Oracle { id: InstanceId, message: String },
    #[error("loop checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Committee(#[from] CommitteeError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EngineError> = std::result::Result<T, E>;

// ---------------------------------------------------------------------------
// Strategies and configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Uncertainty(UncertaintyKind),
    Committee(DisagreementKind),
    /// Uniform sampling without replacement; the control arm.
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Uncertainty(UncertaintyKind::LeastConfidence),
        Strategy::Uncertainty(UncertaintyKind::MarginSampling),
        Strategy::Uncertainty(UncertaintyKind::EntropySampling),
        Strategy::Committee(DisagreementKind::VoteEntropy),
        Strategy::Committee(DisagreementKind::ConsensusEntropy),
        Strategy::Committee(DisagreementKind::MaxDisagreement),
        Strategy::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Uncertainty(k) => k.name(),
            Strategy::Committee(k) => k.name(),
            Strategy::Random => "random",
        }
    }

    pub fn is_committee(self) -> bool {
        matches!(self, Strategy::Committee(_))
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                format!("unknown strategy {s:?} (expected one of lc, ms, es, ve, ce, md, random)")
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopConfig {
    pub strategy: Strategy,
    pub batch_size: usize,
    pub max_iterations: usize,
    /// Strictly increasing, within `1..=max_iterations`.
    pub checkpoint_iterations: Vec<usize>,
    pub committee_size: usize,
    pub classifier: TrainConfig,
    pub retrain_every: usize,
    pub rng_seed: u64,
    /// Base for entropy-type scores (es, ve, ce).
    pub log_base: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            strategy: Strategy::Uncertainty(UncertaintyKind::LeastConfidence),
            batch_size: 1,
            max_iterations: 2000,
            checkpoint_iterations: DEFAULT_CHECKPOINTS.to_vec(),
            committee_size: DEFAULT_COMMITTEE_SIZE,
            classifier: TrainConfig::default(),
            retrain_every: 1,
            rng_seed: 0,
            log_base: DEFAULT_LOG_BASE,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EngineError::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.retrain_every == 0 {
            return bad("retrain_every must be at least 1".into());
        }
        if self.strategy.is_committee() && self.committee_size < 2 {
            return bad("committee size must be at least 2".into());
        }
        if self.checkpoint_iterations.windows(2).any(|w| w[0] >= w[1]) {
            return bad("checkpoint iterations must be strictly increasing".into());
        }
        if let Some(&c) = self
            .checkpoint_iterations
            .iter()
            .find(|&&c| c == 0 || c > self.max_iterations)
        {
            return bad(format!(
                "checkpoint {c} is outside 1..={}",
                self.max_iterations
            ));
        }
        check_log_base(self.log_base)?;
        self.classifier.validate()?;
        Ok(())
    }

    /// Drops checkpoints beyond `max_iterations`, then sorts and dedups.
    pub fn clamp_checkpoints(mut self) -> Self {
        let max = self.max_iterations;
        self.checkpoint_iterations.retain(|&c| c >= 1 && c <= max);
        self.checkpoint_iterations.sort_unstable();
        self.checkpoint_iterations.dedup();
        self
    }
}

// ---------------------------------------------------------------------------
// Oracles
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Label(usize),
    Reject,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResponse {
    pub outcome: Outcome,
    pub latency_hint: Option<std::time::Duration>,
}

impl From<Outcome> for OracleResponse {
    fn from(outcome: Outcome) -> Self {
        OracleResponse {
            outcome,
            latency_hint: None,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OracleError {
    #[error("unknown instance {0}")]
    UnknownId(InstanceId),
    #[error("{0}")]
    Unavailable(String),
}

/// A source of labels for pool instances.
pub trait Oracle {
    fn query(&mut self, example: &Example) -> Result<OracleResponse, OracleError>;
}

impl<F> Oracle for F
where
    F: FnMut(&Example) -> Result<OracleResponse, OracleError>,
{
    fn query(&mut self, example: &Example) -> Result<OracleResponse, OracleError> {
        self(example)
    }
}

/// Answers from ground truth: the stored class for relevant items, a reject
/// for irrelevant ones.
#[derive(Debug, Clone)]
pub struct SimulatedOracle {
    truth: HashMap<InstanceId, (bool, Option<usize>)>,
}

pub fn simulated_oracle(ds: &Dataset) -> SimulatedOracle {
    SimulatedOracle {
        truth: ds
            .pool()
            .iter()
            .map(|e| (e.id.clone(), (e.relevant, e.true_class)))
            .collect(),
    }
}

impl SimulatedOracle {
    pub fn answer(&self, id: &InstanceId) -> Result<OracleResponse, OracleError> {
        match self.truth.get(id) {
            Some((false, _)) => Ok(Outcome::Reject.into()),
            Some((true, Some(c))) => Ok(Outcome::Label(*c).into()),
            Some((true, None)) => Err(OracleError::Unavailable(format!("{id} has no ground truth"))),
            None => Err(OracleError::UnknownId(id.clone())),
        }
    }
}

impl Oracle for SimulatedOracle {
    fn query(&mut self, example: &Example) -> Result<OracleResponse, OracleError> {
        self.answer(&example.id)
    }
}

// ---------------------------------------------------------------------------
// Learning curves
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub labeled_size: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LearningCurve {
    pub points: Vec<CurvePoint>,
}

impl LearningCurve {
    pub fn last(&self) -> Option<&CurvePoint> {
        self.points.last()
    }

    pub fn at(&self, iteration: usize) -> Option<&CurvePoint> {
        self.points.iter().find(|p| p.iteration == iteration)
    }

    fn push(&mut self, point: CurvePoint) {
        debug_assert!(self.points.last().is_none_or(|p| p.iteration < point.iteration));
        self.points.push(point);
    }
}

pub const CURVE_HEADER: &str = "iteration,labeled_size,accuracy";

pub fn write_curve_to<W: Write>(curve: &LearningCurve, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{CURVE_HEADER}")?;
    for p in &curve.points {
        writeln!(out, "{},{},{}", p.iteration, p.labeled_size, p.accuracy)?;
    }
    out.flush()
}

pub fn export_curve(curve: &LearningCurve, path: impl AsRef<Path>) -> Result<()> {
    write_curve_to(curve, BufWriter::new(File::create(path)?))?;
    Ok(())
}

pub fn read_curve_from<R: BufRead>(input: R) -> Result<LearningCurve> {
    let mut lines = input.lines();
    let bad = |m: String| EngineError::Checkpoint(format!("curve: {m}"));
    match lines.next().transpose()? {
        Some(h) if h.trim() == CURVE_HEADER => {}
        other => return Err(bad(format!("unexpected header {other:?}"))),
    }
    let mut curve = LearningCurve::default();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(bad(format!("expected 3 fields in {line:?}")));
        }
        let parse_err = |_| bad(format!("bad number in {line:?}"));
        curve.points.push(CurvePoint {
            iteration: fields[0].parse().map_err(|e: std::num::ParseIntError| parse_err(e.to_string()))?,
            labeled_size: fields[1].parse().map_err(|e: std::num::ParseIntError| parse_err(e.to_string()))?,
            accuracy: fields[2].parse().map_err(|e: std::num::ParseFloatError| parse_err(e.to_string()))?,
        });
    }
    Ok(curve)
}

pub fn read_curve(path: impl AsRef<Path>) -> Result<LearningCurve> {
    read_curve_from(BufReader::new(File::open(path)?))
}

// ---------------------------------------------------------------------------
// Loop state
// ---------------------------------------------------------------------------

/// The current trained artifact: one model, or a committee whose consensus
/// is used for accuracy.
#[derive(Debug, Clone, PartialEq)]
pub enum Learner {
    Single(ModelParams),
    Committee(Committee),
}

impl Learner {
    pub fn as_classifier(&self) -> &dyn ProbabilisticClassifier {
        match self {
            Learner::Single(m) => m,
            Learner::Committee(c) => c,
        }
    }

    pub fn to_checkpoint(&self) -> String {
        match self {
            Learner::Single(m) => m.to_checkpoint(),
            Learner::Committee(c) => c.to_checkpoint(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Seed(usize),
    Pool(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledItem {
    pub id: InstanceId,
    pub class: usize,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopState {
    pub labeled: Vec<LabeledItem>,
    /// Remaining pool as positions into the dataset pool, in pool order.
    pub pool: Vec<usize>,
    /// Completed acquisition iterations.
    pub iteration: usize,
    pub learner: Learner,
    pub curve: LearningCurve,
    pub discarded: Vec<InstanceId>,
}

impl LoopState {
    pub fn labeled_size(&self) -> usize {
        self.labeled.len()
    }

    /// SHA-256 over the labeled set, remaining pool, discards, iteration,
    /// curve and learner parameters. Equal digests mean equal loop states.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"loopstate1\n");
        h.update((self.iteration as u64).to_le_bytes());
        for item in &self.labeled {
            h.update(item.id.as_str().as_bytes());
            h.update([0]);
            h.update((item.class as u64).to_le_bytes());
        }
        h.update(b"|pool");
        for &p in &self.pool {
            h.update((p as u64).to_le_bytes());
        }
        h.update(b"|discarded");
        for id in &self.discarded {
            h.update(id.as_str().as_bytes());
            h.update([0]);
        }
        h.update(b"|curve");
        for p in &self.curve.points {
            h.update((p.iteration as u64).to_le_bytes());
            h.update((p.labeled_size as u64).to_le_bytes());
            h.update(p.accuracy.to_bits().to_le_bytes());
        }
        h.update(b"|learner");
        h.update(self.learner.to_checkpoint().as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A pool instance chosen for labeling.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub id: InstanceId,
    /// Position in the dataset pool.
    pub pool_index: usize,
    /// Strategy score (0 for random sampling).
    pub score: f64,
}

/// Seed for the committee trained after `iteration` completed iterations.
fn committee_seed(rng_seed: u64, iteration: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = rng_seed ^ (iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A single-writer active learning loop over a shared dataset.
#[derive(Debug, Clone)]
pub struct ActiveLearner {
    dataset: Arc<Dataset>,
    cfg: LoopConfig,
    state: LoopState,
    pool_x: Array2<f64>,
    test_x: Array2<f64>,
    test_y: Vec<usize>,
    pool_lookup: HashMap<InstanceId, usize>,
    /// Labeled-set size the current learner was trained on.
    trained_on: usize,
    train_generation: u64,
}

impl ActiveLearner {
    /// Trains on the seed set and records the iteration-1 checkpoint (the
    /// seed-only model) if it is scheduled.
    pub fn new(dataset: Arc<Dataset>, cfg: LoopConfig) -> Result<Self> {
        cfg.validate()?;
        if dataset.test_set().is_empty() {
            return Err(EngineError::EmptyTestSet);
        }
        if dataset.pool().is_empty() {
            return Err(EngineError::EmptyPool);
        }
        let labeled: Vec<LabeledItem> = dataset
            .seed_set()
            .iter()
            .enumerate()
            .map(|(i, e)| LabeledItem {
                id: e.id.clone(),
                class: e.true_class.expect("seed examples carry a class"),
                origin: Origin::Seed(i),
            })
            .collect();
        let mut learner = Self::bare(dataset, cfg);
        learner.state.labeled = labeled;
        learner.state.learner = learner.fit(0)?;
        learner.trained_on = learner.state.labeled.len();
        if learner.cfg.checkpoint_iterations.first() == Some(&1) {
            learner.record_checkpoint(1)?;
        }
        Ok(learner)
    }

    fn bare(dataset: Arc<Dataset>, cfg: LoopConfig) -> Self {
        let dim = dataset.dim();
        let pool_x = feature_matrix(dataset.pool().iter().map(|e| e.features.as_slice()), dim);
        let test_x = feature_matrix(dataset.test_set().iter().map(|e| e.features.as_slice()), dim);
        let test_y = dataset
            .test_set()
            .iter()
            .map(|e| e.true_class.expect("test examples carry a class"))
            .collect();
        let pool_lookup = dataset
            .pool()
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.clone(), i))
            .collect();
        let pool = (0..dataset.pool().len()).collect();
        let m = dataset.num_classes();
        ActiveLearner {
            state: LoopState {
                labeled: Vec::new(),
                pool,
                iteration: 0,
                learner: Learner::Single(ModelParams::zeros(m, dim)),
                curve: LearningCurve::default(),
                discarded: Vec::new(),
            },
            dataset,
            cfg,
            pool_x,
            test_x,
            test_y,
            pool_lookup,
            trained_on: 0,
            train_generation: 0,
        }
    }

    pub fn dataset(&self) -> &Arc<Dataset> {
        &self.dataset
    }

    pub fn config(&self) -> &LoopConfig {
        &self.cfg
    }

    pub fn state(&self) -> &LoopState {
        &self.state
    }

    pub fn into_state(self) -> LoopState {
        self.state
    }

    pub fn iteration(&self) -> usize {
        self.state.iteration
    }

    /// Bumped every time the learner is retrained.
    pub fn train_generation(&self) -> u64 {
        self.train_generation
    }

    pub fn is_complete(&self) -> bool {
        self.state.iteration >= self.cfg.max_iterations || self.state.pool.is_empty()
    }

    pub fn pool_ids(&self) -> impl Iterator<Item = &InstanceId> {
        self.state.pool.iter().map(|&i| &self.dataset.pool()[i].id)
    }

    pub fn example(&self, pool_index: usize) -> &Example {
        &self.dataset.pool()[pool_index]
    }

    fn labeled_xy(&self) -> (Array2<f64>, Vec<usize>) {
        let ds = &self.dataset;
        let rows = self.state.labeled.iter().map(|item| match item.origin {
            Origin::Seed(i) => ds.seed_set()[i].features.as_slice(),
            Origin::Pool(i) => ds.pool()[i].features.as_slice(),
        });
        let x = feature_matrix(rows, ds.dim());
        let y = self.state.labeled.iter().map(|item| item.class).collect();
        (x, y)
    }

    fn fit(&self, iteration: usize) -> Result<Learner> {
        let (x, y) = self.labeled_xy();
        let m = self.dataset.num_classes();
        Ok(match self.cfg.strategy {
            Strategy::Committee(_) => Learner::Committee(train_committee(
                x.view(),
                &y,
                m,
                self.cfg.committee_size,
                &self.cfg.classifier,
                committee_seed(self.cfg.rng_seed, iteration),
            )?),
            _ => Learner::Single(classifier::train(x.view(), &y, m, &self.cfg.classifier)?),
        })
    }

    fn retrain(&mut self) -> Result<()> {
        self.state.learner = self.fit(self.state.iteration)?;
        self.trained_on = self.state.labeled.len();
        self.train_generation += 1;
        Ok(())
    }

    /// Test-set accuracy of the current learner (consensus for committees).
    pub fn test_accuracy(&self) -> Result<f64> {
        Ok(accuracy(
            self.state.learner.as_classifier(),
            self.test_x.view(),
            &self.test_y,
        )?)
    }

    fn record_checkpoint(&mut self, iteration: usize) -> Result<()> {
        let acc = self.test_accuracy()?;
        self.state.curve.push(CurvePoint {
            iteration,
            labeled_size: self.state.labeled.len(),
            accuracy: acc,
        });
        Ok(())
    }

    fn remaining_matrix(&self) -> (Array2<f64>, Vec<InstanceId>) {
        let x = self.pool_x.select(Axis(0), &self.state.pool);
        let ids = self.pool_ids().cloned().collect();
        (x, ids)
    }

    /// Posteriors of the current learner over the remaining pool.
    pub fn pool_posteriors(&self) -> Result<PosteriorMatrix> {
        let (x, ids) = self.remaining_matrix();
        Ok(self.state.learner.as_classifier().predict_proba(x.view(), &ids)?)
    }

    /// Selects the next `min(batch_size, |pool|)` instances without changing
    /// any state.
    pub fn propose(&self) -> Result<Vec<Candidate>> {
        if self.state.pool.is_empty() {
            return Err(EngineError::Exhausted("pool exhausted"));
        }
        if self.state.iteration >= self.cfg.max_iterations {
            return Err(EngineError::Exhausted("iteration budget reached"));
        }
        let k = self.cfg.batch_size.min(self.state.pool.len());
        let ranked: Vec<(usize, f64)> = match (self.cfg.strategy, &self.state.learner) {
            (Strategy::Random, _) => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.rng_seed);
                rng.set_stream(self.state.iteration as u64);
                rand::seq::index::sample(&mut rng, self.state.pool.len(), k)
                    .into_iter()
                    .map(|i| (i, 0.0))
                    .collect()
            }
            (Strategy::Uncertainty(kind), Learner::Single(model)) => {
                let (x, ids) = self.remaining_matrix();
                let posteriors = model.predict_proba(x.view(), &ids)?;
                let strategy = UncertaintyStrategy::new(kind).with_log_base(self.cfg.log_base);
                rank_uncertain(&posteriors, &strategy, k)?
            }
            (Strategy::Committee(kind), Learner::Committee(committee)) => {
                let (x, ids) = self.remaining_matrix();
                let members = committee.member_posteriors(x.view(), &ids)?;
                let strategy = DisagreementStrategy::new(kind).with_log_base(self.cfg.log_base);
                rank_by_disagreement(&members, &strategy, k)?
            }
            (strategy, _) => {
                return Err(EngineError::InvalidConfig(format!(
                    "learner does not match strategy {strategy}"
                )))
            }
        };
        Ok(ranked
            .into_iter()
            .map(|(pos, score)| {
                let pool_index = self.state.pool[pos];
                Candidate {
                    id: self.dataset.pool()[pool_index].id.clone(),
                    pool_index,
                    score,
                }
            })
            .collect())
    }

    /// Completes one iteration: applies the oracle outcomes, retrains on
    /// schedule and records a checkpoint if one falls on this iteration.
    /// Nothing is mutated if any decision is invalid.
    pub fn apply(&mut self, decisions: &[(InstanceId, Outcome)]) -> Result<()> {
        if self.is_complete() {
            return Err(EngineError::Exhausted("loop is complete"));
        }
        let m = self.dataset.num_classes();
        let mut positions = Vec::with_capacity(decisions.len());
        for (id, outcome) in decisions {
            let idx = *self
                .pool_lookup
                .get(id)
                .ok_or_else(|| EngineError::NotInPool(id.clone()))?;
            if !self.state.pool.contains(&idx) || positions.contains(&idx) {
                return Err(EngineError::NotInPool(id.clone()));
            }
            if let Outcome::Label(c) = *outcome {
                if c >= m {
                    return Err(EngineError::InvalidClass {
                        class: c,
                        num_classes: m,
                    });
                }
            }
            positions.push(idx);
        }

        for ((id, outcome), idx) in decisions.iter().zip(positions) {
            self.state.pool.retain(|&p| p != idx);
            match *outcome {
                Outcome::Label(class) => self.state.labeled.push(LabeledItem {
                    id: id.clone(),
                    class,
                    origin: Origin::Pool(idx),
                }),
                Outcome::Reject => self.state.discarded.push(id.clone()),
            }
        }
        self.state.iteration += 1;
        let t = self.state.iteration;
        let checkpoint = t > 1 && self.cfg.checkpoint_iterations.binary_search(&t).is_ok();
        let stale = self.trained_on != self.state.labeled.len();
        if stale && (t.is_multiple_of(self.cfg.retrain_every) || checkpoint) {
            self.retrain()?;
        }
        if checkpoint {
            self.record_checkpoint(t)?;
        }
        Ok(())
    }

    /// Serializable snapshot for resuming the loop later.
    pub fn checkpoint(&self) -> LoopCheckpoint {
        LoopCheckpoint {
            strategy: self.cfg.strategy,
            iteration: self.state.iteration,
            trained_on: self.trained_on,
            acquired: self
                .state
                .labeled
                .iter()
                .filter(|i| matches!(i.origin, Origin::Pool(_)))
                .map(|i| (i.id.clone(), i.class))
                .collect(),
            discarded: self.state.discarded.clone(),
            curve: self.state.curve.clone(),
            learner: self.state.learner.clone(),
        }
    }

    /// Rebuilds a loop from `ckpt` without retraining.
    pub fn resume(dataset: Arc<Dataset>, cfg: LoopConfig, ckpt: LoopCheckpoint) -> Result<Self> {
        cfg.validate()?;
        if ckpt.strategy != cfg.strategy {
            return Err(EngineError::Checkpoint(format!(
                "checkpoint was written for strategy {}, config asks for {}",
                ckpt.strategy, cfg.strategy
            )));
        }
        if dataset.test_set().is_empty() {
            return Err(EngineError::EmptyTestSet);
        }
        let mut learner = Self::bare(dataset, cfg);
        let ds = Arc::clone(&learner.dataset);
        learner.state.labeled = ds
            .seed_set()
            .iter()
            .enumerate()
            .map(|(i, e)| LabeledItem {
                id: e.id.clone(),
                class: e.true_class.expect("seed examples carry a class"),
                origin: Origin::Seed(i),
            })
            .collect();
        let mut removed = vec![false; ds.pool().len()];
        let lookup = |id: &InstanceId| {
            learner
                .pool_lookup
                .get(id)
                .copied()
                .ok_or_else(|| EngineError::Checkpoint(format!("{id} is not a pool instance")))
        };
        let mut acquired = Vec::with_capacity(ckpt.acquired.len());
        for (id, class) in &ckpt.acquired {
            let idx = lookup(id)?;
            if std::mem::replace(&mut removed[idx], true) {
                return Err(EngineError::Checkpoint(format!("{id} appears twice")));
            }
            if *class >= ds.num_classes() {
                return Err(EngineError::InvalidClass {
                    class: *class,
                    num_classes: ds.num_classes(),
                });
            }
            acquired.push(LabeledItem {
                id: id.clone(),
                class: *class,
                origin: Origin::Pool(idx),
            });
        }
        for id in &ckpt.discarded {
            let idx = lookup(id)?;
            if std::mem::replace(&mut removed[idx], true) {
                return Err(EngineError::Checkpoint(format!("{id} appears twice")));
            }
        }
        learner.state.labeled.extend(acquired);
        learner.state.pool.retain(|&i| !removed[i]);
        learner.state.discarded = ckpt.discarded;
        learner.state.iteration = ckpt.iteration;
        learner.state.curve = ckpt.curve;
        let matches = matches!(
            (&ckpt.learner, learner.cfg.strategy.is_committee()),
            (Learner::Committee(_), true) | (Learner::Single(_), false)
        );
        if !matches {
            return Err(EngineError::Checkpoint("learner kind does not match strategy".into()));
        }
        learner.state.learner = ckpt.learner;
        learner.trained_on = ckpt.trained_on;
        Ok(learner)
    }
}

// ---------------------------------------------------------------------------
// Running the loop
// ---------------------------------------------------------------------------

/// A run that stopped early, with the curve recorded so far.
#[derive(Debug)]
pub struct LoopAbort {
    pub error: EngineError,
    pub curve: LearningCurve,
}

impl fmt::Display for LoopAbort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (after {} checkpoints)",
            self.error,
            self.curve.points.len()
        )
    }
}

impl std::error::Error for LoopAbort {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<EngineError> for LoopAbort {
    fn from(error: EngineError) -> Self {
        LoopAbort {
            error,
            curve: LearningCurve::default(),
        }
    }
}

/// Runs the loop from the seed set until the iteration budget is spent or
/// the pool runs dry.
pub fn run_loop<O: Oracle + ?Sized>(
    ds: Arc<Dataset>,
    cfg: LoopConfig,
    oracle: &mut O,
) -> Result<(LearningCurve, LoopState), LoopAbort> {
    let learner = ActiveLearner::new(ds, cfg)?;
    run_learner(learner, oracle, |_| Ok(()))
}

/// Drives `learner` to completion, calling `after_iteration` after every
/// iteration (used for periodic checkpointing).
pub fn run_learner<O, F>(
    mut learner: ActiveLearner,
    oracle: &mut O,
    mut after_iteration: F,
) -> Result<(LearningCurve, LoopState), LoopAbort>
where
    O: Oracle + ?Sized,
    F: FnMut(&ActiveLearner) -> Result<()>,
{
    let abort = |error: EngineError, learner: &ActiveLearner| LoopAbort {
        error,
        curve: learner.state.curve.clone(),
    };
    while !learner.is_complete() {
        let candidates = learner.propose().map_err(|e| abort(e, &learner))?;
        let mut decisions = Vec::with_capacity(candidates.len());
        for cand in candidates {
            let example = learner.example(cand.pool_index);
            let mut last_err = None;
            let mut response = None;
            for _ in 0..ORACLE_ATTEMPTS {
                match oracle.query(example) {
                    Ok(r) => {
                        response = Some(r);
                        break;
                    }
                    Err(e) => last_err = Some(e),
                }
            }
            let Some(response) = response else {
                let message = last_err.map_or_else(String::new, |e| e.to_string());
                return Err(abort(
                    EngineError::Oracle {
                        id: cand.id,
                        message,
                    },
                    &learner,
                ));
            };
            decisions.push((cand.id, response.outcome));
        }
        learner.apply(&decisions).map_err(|e| abort(e, &learner))?;
        after_iteration(&learner).map_err(|e| abort(e, &learner))?;
    }
    let state = learner.into_state();
    Ok((state.curve.clone(), state))
}

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

fn train_and_score(ds: &Dataset, train: &[(&[f64], usize)], cfg: &TrainConfig) -> Result<f64> {
    if ds.test_set().is_empty() {
        return Err(EngineError::EmptyTestSet);
    }
    let x = feature_matrix(train.iter().map(|(f, _)| *f), ds.dim());
    let y: Vec<usize> = train.iter().map(|(_, c)| *c).collect();
    let model = classifier::train(x.view(), &y, ds.num_classes(), cfg)?;
    let test_x = feature_matrix(ds.test_set().iter().map(|e| e.features.as_slice()), ds.dim());
    let test_y: Vec<usize> = ds.test_set().iter().filter_map(|e| e.true_class).collect();
    Ok(accuracy(&model, test_x.view(), &test_y)?)
}

fn seed_pairs(ds: &Dataset) -> Vec<(&[f64], usize)> {
    ds.seed_set()
        .iter()
        .filter_map(|e| e.true_class.map(|c| (e.features.as_slice(), c)))
        .collect()
}

/// Test accuracy of a model trained on the seed set alone.
pub fn baseline_seed_only(ds: &Dataset, cfg: &TrainConfig) -> Result<f64> {
    train_and_score(ds, &seed_pairs(ds), cfg)
}

/// Test accuracy of a model trained on the seed set plus every relevant pool
/// item with its true class (a fully annotated pool).
pub fn baseline_supervised(ds: &Dataset, cfg: &TrainConfig) -> Result<f64> {
    let mut train = seed_pairs(ds);
    for e in ds.pool().iter().filter(|e| e.relevant) {
        let c = e.true_class.ok_or_else(|| {
            EngineError::Dataset(DatasetError::Integrity(format!(
                "relevant pool item {} has no class",
                e.id
            )))
        })?;
        train.push((e.features.as_slice(), c));
    }
    train_and_score(ds, &train, cfg)
}

/// Test accuracy of a model trained on the seed set plus the entire pool,
/// irrelevant items included with their noisy classes.
pub fn baseline_noisy_pool(ds: &Dataset, cfg: &TrainConfig) -> Result<f64> {
    let mut train = seed_pairs(ds);
    for e in ds.pool() {
        let c = e.true_class.ok_or_else(|| {
            EngineError::Dataset(DatasetError::Integrity(format!(
                "pool item {} has no class",
                e.id
            )))
        })?;
        train.push((e.features.as_slice(), c));
    }
    train_and_score(ds, &train, cfg)
}

// ---------------------------------------------------------------------------
// Loop checkpoints
// ---------------------------------------------------------------------------

/// Everything needed to resume a loop over the same dataset: acquired and
/// discarded ids, the curve and the trained learner.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopCheckpoint {
    pub strategy: Strategy,
    pub iteration: usize,
    pub trained_on: usize,
    /// Pool instances moved into the labeled set, in acquisition order.
    pub acquired: Vec<(InstanceId, usize)>,
    pub discarded: Vec<InstanceId>,
    pub curve: LearningCurve,
    pub learner: Learner,
}

const LOOP_HEADER: &str = "alloop1";

fn check_id(id: &InstanceId) -> Result<&str> {
    let s = id.as_str();
    if s.contains(['\n', '\r', '\t']) {
        return Err(EngineError::Checkpoint(format!(
            "id {s:?} contains a tab or newline"
        )));
    }
    Ok(s)
}

impl LoopCheckpoint {
    /// Line-oriented text: `key value` headers, tab-separated records, then
    /// the learner's `alm1` block(s).
    pub fn to_text(&self) -> Result<String> {
        use std::fmt::Write as _;
        let mut out = String::new();
        let _ = writeln!(out, "{LOOP_HEADER}");
        let _ = writeln!(out, "strategy {}", self.strategy);
        let _ = writeln!(out, "iteration {}", self.iteration);
        let _ = writeln!(out, "trained_on {}", self.trained_on);
        let _ = writeln!(out, "acquired {}", self.acquired.len());
        for (id, class) in &self.acquired {
            let _ = writeln!(out, "{class}\t{}", check_id(id)?);
        }
        let _ = writeln!(out, "discarded {}", self.discarded.len());
        for id in &self.discarded {
            let _ = writeln!(out, "{}", check_id(id)?);
        }
        let _ = writeln!(out, "curve {}", self.curve.points.len());
        for p in &self.curve.points {
            let _ = writeln!(out, "{} {} {:e}", p.iteration, p.labeled_size, p.accuracy);
        }
        match &self.learner {
            Learner::Single(m) => {
                let _ = writeln!(out, "learner single");
                out.push_str(&m.to_checkpoint());
            }
            Learner::Committee(c) => {
                let seeds: Vec<String> = c.member_rng_seeds().iter().map(u64::to_string).collect();
                let _ = writeln!(out, "learner committee {}", seeds.join(" "));
                out.push_str(&c.to_checkpoint());
            }
        }
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| EngineError::Checkpoint(m);
        let mut lines = text.lines();
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| bad(format!("truncated before {what}")))
        };
        if next("header")?.trim() != LOOP_HEADER {
            return Err(bad("missing alloop1 header".into()));
        }
        fn field<'a>(line: &'a str, key: &str) -> Result<&'a str> {
            line.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix(' '))
                .ok_or_else(|| EngineError::Checkpoint(format!("expected {key:?}, found {line:?}")))
        }
        fn num<T: FromStr>(s: &str) -> Result<T> {
            s.trim()
                .parse()
                .map_err(|_| EngineError::Checkpoint(format!("bad number {s:?}")))
        }
        let strategy: Strategy = field(next("strategy")?, "strategy")?
            .parse()
            .map_err(bad)?;
        let iteration = num(field(next("iteration")?, "iteration")?)?;
        let trained_on = num(field(next("trained_on")?, "trained_on")?)?;
        let n_acq: usize = num(field(next("acquired")?, "acquired")?)?;
        let mut acquired = Vec::with_capacity(n_acq);
        for _ in 0..n_acq {
            let line = next("acquired record")?;
            let (class, id) = line
                .split_once('\t')
                .ok_or_else(|| bad(format!("bad acquired record {line:?}")))?;
            acquired.push((InstanceId::new(id), num(class)?));
        }
        let n_disc: usize = num(field(next("discarded")?, "discarded")?)?;
        let mut discarded = Vec::with_capacity(n_disc);
        for _ in 0..n_disc {
            discarded.push(InstanceId::new(next("discarded record")?));
        }
        let n_curve: usize = num(field(next("curve")?, "curve")?)?;
        let mut curve = LearningCurve::default();
        for _ in 0..n_curve {
            let line = next("curve record")?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(bad(format!("bad curve record {line:?}")));
            }
            curve.points.push(CurvePoint {
                iteration: num(parts[0])?,
                labeled_size: num(parts[1])?,
                accuracy: num(parts[2])?,
            });
        }
        let learner_line = next("learner")?;
        let rest: String = lines.map(|l| format!("{l}\n")).collect();
        let kind = field(learner_line, "learner")?;
        let learner = if kind == "single" {
            Learner::Single(ModelParams::from_checkpoint(&rest)?)
        } else if let Some(seeds) = kind.strip_prefix("committee") {
            let seeds = seeds
                .split_whitespace()
                .map(num)
                .collect::<Result<Vec<u64>>>()?;
            Learner::Committee(Committee::from_checkpoint(&rest, seeds)?)
        } else {
            return Err(bad(format!("unknown learner kind {kind:?}")));
        };
        Ok(LoopCheckpoint {
            strategy,
            iteration,
            trained_on,
            acquired,
            discarded,
            curve,
            learner,
        })
    }

    /// Writes atomically (temp file then rename).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_text()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Convenience for tests and tools: the labeled set's feature matrix view
/// is not exposed, but its size and the remaining pool are.
pub fn conservation_holds(ds: &Dataset, state: &LoopState) -> bool {
    ds.seed_set().len() + ds.pool().len()
        == state.labeled.len() + state.pool.len() + state.discarded.len()
}

/// Rows of `x` restricted to `rows`, for callers that score subsets.
pub fn select_rows(x: ArrayView2<'_, f64>, rows: &[usize]) -> Array2<f64> {
    x.select(Axis(0), rows)
}
