//! Pool-based active learning: uncertainty sampling, query-by-committee and
//! the label-acquisition loop around a multinomial logistic regression
//! classifier.

pub mod classifier;
pub mod committee;
pub mod dataset;
pub mod engine;
pub mod selection;
pub mod uncertainty;

pub use classifier::{ModelParams, PosteriorMatrix, ProbabilisticClassifier, TrainConfig};
pub use committee::{Committee, DisagreementKind, DisagreementStrategy};
pub use dataset::{Dataset, Example, InstanceId, Partition, SyntheticSpec};
pub use engine::{
    run_loop, ActiveLearner, LearningCurve, LoopCheckpoint, LoopConfig, LoopState, Oracle,
    OracleResponse, Outcome, SimulatedOracle, Strategy,
};
pub use uncertainty::{UncertaintyKind, UncertaintyStrategy};
