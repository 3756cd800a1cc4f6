//! Deterministic simulator for a Byzantine scalar-consensus game played over
//! a synchronous all-to-all network.
//!
//! Honest agents start from values drawn uniformly over a range and exchange
//! one broadcast per round; Byzantine agents may say anything but must send
//! the same message to everyone. The game ends once at least two thirds of
//! all agents vote to stop, or when the round cap is reached.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`). The
//! aliases at the crate root fix the scalar to `f64`, which is what the
//! command-line tooling and on-disk logs use.

pub mod engine;
pub mod game;
pub mod metrics;
pub mod policies;
pub mod scalar;
pub mod seed;

pub use engine::{build_policies, init_game, run_game, summarize_history, Engine, EngineError};
pub use game::{
    check_termination, classify_outcome, quorum_threshold, validate_config, AgentId, ConfigError, OutcomeKind,
    PromptVariant, QuorumRule, Role, TerminationVote,
};
pub use metrics::{aggregate, wilson_interval, ConfigKey, MetricsError, OutcomeStats};
pub use policies::{
    list_policies, Policy, PolicyContext, PolicyDecision, PolicyError, PolicyFactory, PolicySpec, ScriptedPolicies,
};
pub use scalar::Scalar;

pub type GameConfig = game::GameConfig<f64>;
pub type ValidatedConfig = game::ValidatedConfig<f64>;
pub type AgentMessage = game::AgentMessage<f64>;
pub type AgentState = game::AgentState<f64>;
pub type Outcome = game::Outcome<f64>;
pub type GameState = engine::GameState<f64>;
pub type RoundRecord = engine::RoundRecord<f64>;
pub type RunLog = engine::RunLog<f64>;
pub type DynPolicy = Box<dyn Policy<f64>>;

pub type GameConfigF32 = game::GameConfig<f32>;
pub type RunLogF32 = engine::RunLog<f32>;
