//! Regime-conditional adversarial robustness auditing for credit-scoring models.
//!
//! Data is split into calm and stress regimes by an external stress index,
//! a model is trained per regime, attacked with bounded PGD, and compared on
//! discrimination, threshold error rates, credit-risk losses and the stability
//! of its Shapley explanations.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod dataset;
pub mod explain;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod risk;
pub mod semantic;

pub use attack::{pgd_attack, AdversarialBatch, AttackConfig, AttackError, GradientMode};
pub use dataset::{
    classify_regime, segment_regimes, stratified_split, Dataset, DatasetError, Instance, JoinMode, Regime,
    RegimeConfig, ScalingSpec, Schema, SplitPair, StressSeries,
};
pub use explain::{exact_shapley, Attribution, BackgroundSet, ExplainError, OutputSpace};
pub use metrics::{amplification, auroc, AmplificationResult, MetricError, ScoredSet, ThresholdName};
pub use model::{train, ModelError, ModelFamily, ModelSpec, TrainedModel};
pub use pipeline::{
    emit_report, replicate, run_protocol, EvaluationReport, PipelineError, ReplicateSummary, RunConfig, Stage,
};
pub use risk::{ExposureProfile, LossDistribution, RiskError};
pub use semantic::{
    GovernanceLevel, GovernanceVerdict, NarrativeScorer, RemoteScorer, ScorerError, SemanticError, SurrogateScorer,
};
