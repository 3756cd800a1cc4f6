//! Domain types of the consensus game and the pure rules over them:
//! configuration validation, the stop-vote quorum, and outcome classification.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policies::{self, PolicySpec};
use crate::scalar::{canonical_key, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub u32);

impl AgentId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Honest,
    Byzantine,
}

/// Whether honest agents are told that adversaries may be present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    #[default]
    ByzantineMayExist,
    NoByzantineMentioned,
}

impl PromptVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptVariant::ByzantineMayExist => "byzantine_may_exist",
            PromptVariant::NoByzantineMentioned => "no_byzantine_mentioned",
        }
    }
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_max_rounds() -> u32 {
    50
}
fn default_value_min<S: Scalar>() -> S {
    S::zero()
}
fn default_value_max<S: Scalar>() -> S {
    S::from_f64_lossy(50.0)
}
fn default_quorum_numerator() -> u32 {
    2
}
fn default_quorum_denominator() -> u32 {
    3
}
fn default_precision() -> u32 {
    6
}
fn default_truncate() -> usize {
    200
}
fn default_model() -> String {
    "scripted".to_string()
}

/// Full parameterization of one game.
///
/// Agents `0..n_agents - n_byzantine` are honest, the remaining `n_byzantine`
/// agents are Byzantine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct GameConfig<S> {
    pub n_agents: u32,
    pub n_byzantine: u32,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: u32,
    #[serde(default = "default_value_min::<S>")]
    pub value_min: S,
    #[serde(default = "default_value_max::<S>")]
    pub value_max: S,
    #[serde(default = "default_quorum_numerator")]
    pub quorum_numerator: u32,
    #[serde(default = "default_quorum_denominator")]
    pub quorum_denominator: u32,
    #[serde(default)]
    pub prompt_variant: PromptVariant,
    pub policy_assignment: BTreeMap<u32, PolicySpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_precision")]
    pub value_precision: u32,
    /// Characters of each peer justification kept in history summaries.
    #[serde(default = "default_truncate")]
    pub justification_truncate_chars: usize,
    /// Model label used as part of the aggregation key.
    #[serde(default = "default_model")]
    pub model: String,
}

impl<S: Scalar> GameConfig<S> {
    /// Defaults everywhere, no policies assigned yet.
    pub fn new(n_agents: u32, n_byzantine: u32) -> Self {
        GameConfig {
            n_agents,
            n_byzantine,
            max_rounds: default_max_rounds(),
            value_min: default_value_min(),
            value_max: default_value_max(),
            quorum_numerator: default_quorum_numerator(),
            quorum_denominator: default_quorum_denominator(),
            prompt_variant: PromptVariant::default(),
            policy_assignment: BTreeMap::new(),
            seed: 0,
            value_precision: default_precision(),
            justification_truncate_chars: default_truncate(),
            model: default_model(),
        }
    }

    /// Assigns `honest` to every honest agent and `byzantine` to every Byzantine one.
    pub fn with_profile(mut self, honest: PolicySpec, byzantine: PolicySpec) -> Self {
        self.policy_assignment = (0..self.n_agents)
            .map(|i| {
                let spec = match self.role_of(AgentId(i)) {
                    Role::Honest => honest.clone(),
                    Role::Byzantine => byzantine.clone(),
                };
                (i, spec)
            })
            .collect();
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn n_honest(&self) -> u32 {
        self.n_agents.saturating_sub(self.n_byzantine)
    }

    pub fn role_of(&self, agent: AgentId) -> Role {
        if agent.0 < self.n_honest() {
            Role::Honest
        } else {
            Role::Byzantine
        }
    }

    pub fn roles(&self) -> Vec<Role> {
        (0..self.n_agents).map(|i| self.role_of(AgentId(i))).collect()
    }

    pub fn quorum(&self) -> QuorumRule {
        QuorumRule {
            numerator: self.quorum_numerator,
            denominator: self.quorum_denominator,
        }
    }

    pub fn clamp(&self, value: S) -> S {
        value.max(self.value_min).min(self.value_max)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("at least 2 agents are required, got {0}")]
    TooFewAgents(u32),
    #[error("{n_byzantine} Byzantine agents exceed the bound floor(N/3) = {max} for N = {n_agents}")]
    ByzantineFractionExceeded { n_agents: u32, n_byzantine: u32, max: u32 },
    #[error("value range is empty: value_min must be < value_max")]
    InvalidRange,
    #[error("max_rounds must be at least 1")]
    ZeroRounds,
    #[error("quorum fraction {numerator}/{denominator} is not in (0, 1]")]
    InvalidQuorum { numerator: u32, denominator: u32 },
    #[error("value_precision {0} is out of range (max 12)")]
    InvalidPrecision(u32),
    #[error("agent {agent}: {detail}")]
    MissingPolicy { agent: u32, detail: String },
    #[error("policy assigned to agent {0}, which is outside [0, N)")]
    UnknownAgent(u32),
}

/// A [`GameConfig`] whose invariants have been checked.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedConfig<S>(GameConfig<S>);

impl<S> ValidatedConfig<S> {
    pub fn into_inner(self) -> GameConfig<S> {
        self.0
    }
}

impl<S> Deref for ValidatedConfig<S> {
    type Target = GameConfig<S>;

    fn deref(&self) -> &GameConfig<S> {
        &self.0
    }
}

pub fn validate_config<S: Scalar>(config: GameConfig<S>) -> Result<ValidatedConfig<S>, ConfigError> {
    if config.n_agents < 2 {
        return Err(ConfigError::TooFewAgents(config.n_agents));
    }
    let max = config.n_agents / 3;
    if config.n_byzantine > max {
        return Err(ConfigError::ByzantineFractionExceeded {
            n_agents: config.n_agents,
            n_byzantine: config.n_byzantine,
            max,
        });
    }
    if config.value_min >= config.value_max || !config.value_min.is_finite() || !config.value_max.is_finite() {
        return Err(ConfigError::InvalidRange);
    }
    if config.max_rounds == 0 {
        return Err(ConfigError::ZeroRounds);
    }
    if config.quorum_denominator == 0
        || config.quorum_numerator == 0
        || config.quorum_numerator > config.quorum_denominator
    {
        return Err(ConfigError::InvalidQuorum {
            numerator: config.quorum_numerator,
            denominator: config.quorum_denominator,
        });
    }
    if config.value_precision > 12 {
        return Err(ConfigError::InvalidPrecision(config.value_precision));
    }
    if let Some(&extra) = config.policy_assignment.keys().find(|&&k| k >= config.n_agents) {
        return Err(ConfigError::UnknownAgent(extra));
    }
    for i in 0..config.n_agents {
        let spec = config
            .policy_assignment
            .get(&i)
            .ok_or_else(|| ConfigError::MissingPolicy {
                agent: i,
                detail: "no policy assigned".to_string(),
            })?;
        let info = policies::lookup(&spec.name).ok_or_else(|| ConfigError::MissingPolicy {
            agent: i,
            detail: format!("unknown policy {:?}", spec.name),
        })?;
        let role = config.role_of(AgentId(i));
        if !info.supports(role) {
            return Err(ConfigError::MissingPolicy {
                agent: i,
                detail: format!("policy {:?} cannot play the {:?} role", spec.name, role),
            });
        }
    }
    Ok(ValidatedConfig(config))
}

/// Stop-vote fraction needed to end the game, as `numerator / denominator`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuorumRule {
    pub numerator: u32,
    pub denominator: u32,
}

impl Default for QuorumRule {
    fn default() -> Self {
        QuorumRule {
            numerator: 2,
            denominator: 3,
        }
    }
}

impl QuorumRule {
    /// Smallest vote count `v` with `v / n >= numerator / denominator`.
    pub fn threshold(self, n_agents: u32) -> u32 {
        let num = n_agents as u64 * self.numerator as u64;
        num.div_ceil(self.denominator as u64) as u32
    }

    pub fn reached(self, stop_votes: u32, n_agents: u32) -> bool {
        stop_votes >= self.threshold(n_agents)
    }
}

/// `ceil(2n/3)`: the minimum number of stop votes that ends a game of `n` agents.
pub fn quorum_threshold(n_agents: u32) -> u32 {
    QuorumRule::default().threshold(n_agents)
}

pub fn check_termination(stop_votes: u32, n_agents: u32) -> bool {
    QuorumRule::default().reached(stop_votes, n_agents)
}

/// One broadcast: the same message is delivered to every agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct AgentMessage<S> {
    pub sender: AgentId,
    pub round: u32,
    pub proposal: S,
    pub justification: String,
    /// The out-of-range value the policy returned, when the engine clamped it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clamped_from: Option<S>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationVote {
    Vote,
    Continue,
}

impl TerminationVote {
    pub fn is_stop(self) -> bool {
        self == TerminationVote::Vote
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct AgentState<S> {
    pub id: AgentId,
    pub role: Role,
    /// Absent only for Byzantine agents before their first broadcast.
    pub current_proposal: Option<S>,
    pub history_summary: String,
    pub private_strategy: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    ValidConsensus,
    InvalidConsensus,
    PrematureStop,
    NoConsensus,
}

impl OutcomeKind {
    pub const ALL: [OutcomeKind; 4] = [
        OutcomeKind::ValidConsensus,
        OutcomeKind::InvalidConsensus,
        OutcomeKind::PrematureStop,
        OutcomeKind::NoConsensus,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OutcomeKind::ValidConsensus => "valid_consensus",
            OutcomeKind::InvalidConsensus => "invalid_consensus",
            OutcomeKind::PrematureStop => "premature_stop",
            OutcomeKind::NoConsensus => "no_consensus",
        }
    }

    /// True for every kind reached by a stop-vote quorum.
    pub fn terminated(self) -> bool {
        self != OutcomeKind::NoConsensus
    }
}

impl fmt::Display for OutcomeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Outcome<S> {
    pub kind: OutcomeKind,
    /// Set for valid and invalid consensus, rounded to the canonical precision.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_value: Option<S>,
    pub rounds_used: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClassifyError {
    #[error("no honest agents to classify")]
    EmptyHonestSet,
    #[error("{initial} initial honest proposals but {finals} final values")]
    LengthMismatch { initial: usize, finals: usize },
}

pub fn classify_outcome<S: Scalar>(
    initial_honest: &[S],
    final_honest: &[S],
    terminated_by_quorum: bool,
    rounds_used: u32,
    precision: u32,
) -> Result<Outcome<S>, ClassifyError> {
    if initial_honest.is_empty() || final_honest.is_empty() {
        return Err(ClassifyError::EmptyHonestSet);
    }
    if initial_honest.len() != final_honest.len() {
        return Err(ClassifyError::LengthMismatch {
            initial: initial_honest.len(),
            finals: final_honest.len(),
        });
    }
    let outcome = |kind, final_value| Outcome {
        kind,
        final_value,
        rounds_used,
    };
    if !terminated_by_quorum {
        return Ok(outcome(OutcomeKind::NoConsensus, None));
    }
    let key = canonical_key(final_honest[0], precision);
    if final_honest.iter().any(|&v| canonical_key(v, precision) != key) {
        return Ok(outcome(OutcomeKind::PrematureStop, None));
    }
    let common = S::from_f64_lossy(key as f64 / 10f64.powi(precision as i32));
    let kind = if initial_honest.iter().any(|&v| canonical_key(v, precision) == key) {
        OutcomeKind::ValidConsensus
    } else {
        OutcomeKind::InvalidConsensus
    };
    Ok(outcome(kind, Some(common)))
}
