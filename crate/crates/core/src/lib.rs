//! Step-wise, position-aware uncertainty estimation over token log-probabilities,
//! with a knowledge bridge to a small domain model and an iterative
//! regeneration loop for multiple-choice chemistry reasoning.
//!
//! The estimator math in [`estimators`] is generic over [`Real`] (`f32`/`f64`);
//! everything driven by model responses runs on `f64`, exposed through the
//! aliases below.

pub mod chain;
pub mod controller;
pub mod estimators;
pub mod gateway;
pub mod harness;
pub mod knowledge;
pub mod scalar;
pub mod templates;

pub use scalar::Real;

/// Estimator parameters over `f64`, the precision used by the pipeline.
pub type EstimatorConfig = estimators::EstimatorParams<f64>;
/// Estimator parameters over `f32`.
pub type EstimatorConfig32 = estimators::EstimatorParams<f32>;
/// A scored reasoning step over `f64`.
pub type StepScore = estimators::StepScore<f64>;
/// All five estimator values for one step over `f64`.
pub type EstimatorReadout = estimators::EstimatorReadout<f64>;

pub use chain::{extract_answer, parse_chain, Answer, ReasoningChain, ReasoningStep};
pub use controller::{run_question, Backends, ControllerConfig, Mode, QuestionOutcome};
pub use estimators::{EstimatorKind, SignConvention};
pub use gateway::{
    ChatMessage, GatewayError, ModelBackend, ModelResponse, ModelRole, SamplingConfig,
    TokenObservation,
};
pub use knowledge::{KnowledgeBlock, KnowledgeUnit, Verdict};
