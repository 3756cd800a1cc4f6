//! Agent policies: the interface the engine queries twice per round, the
//! name registry used by configs, and the scripted strategies.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{AgentId, AgentMessage, AgentState, GameConfig, Role, TerminationVote};
use crate::scalar::{canonical_key, Scalar};

/// A policy name plus numeric parameters, as written in config files:
/// `{"name": "MeanStep", "alpha": 0.5}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub name: String,
    #[serde(flatten)]
    pub params: BTreeMap<String, f64>,
}

impl PolicySpec {
    pub fn new(name: impl Into<String>) -> Self {
        PolicySpec {
            name: name.into(),
            params: BTreeMap::new(),
        }
    }

    pub fn with_param(mut self, key: impl Into<String>, value: f64) -> Self {
        self.params.insert(key.into(), value);
        self
    }

    pub fn param(&self, key: &str) -> Option<f64> {
        self.params.get(key).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyInfo {
    pub name: &'static str,
    pub honest: bool,
    pub byzantine: bool,
    pub summary: &'static str,
}

impl PolicyInfo {
    pub fn supports(&self, role: Role) -> bool {
        match role {
            Role::Honest => self.honest,
            Role::Byzantine => self.byzantine,
        }
    }
}

pub const LLM_POLICY: &str = "LLM";

const REGISTRY: &[PolicyInfo] = &[
    PolicyInfo {
        name: "Echo",
        honest: true,
        byzantine: false,
        summary: "re-proposes its own current value; votes stop when all proposals agree",
    },
    PolicyInfo {
        name: "MedianAdopt",
        honest: true,
        byzantine: false,
        summary: "adopts the lower median of last round's proposals; votes stop when all agree",
    },
    PolicyInfo {
        name: "MeanStep",
        honest: true,
        byzantine: false,
        summary: "moves a fraction alpha (default 0.5) toward last round's mean; votes stop when all agree",
    },
    PolicyInfo {
        name: "Stubborn",
        honest: true,
        byzantine: false,
        summary: "never changes its value and votes stop every round",
    },
    PolicyInfo {
        name: "Staller",
        honest: false,
        byzantine: true,
        summary: "proposes the range endpoint farthest from the peer median; never votes stop",
    },
    PolicyInfo {
        name: "ExtremePuller",
        honest: false,
        byzantine: true,
        summary: "always proposes `target` (default value_min) and votes stop every round",
    },
    PolicyInfo {
        name: "Oscillator",
        honest: false,
        byzantine: true,
        summary: "alternates between the range endpoints; votes stop on even rounds",
    },
    PolicyInfo {
        name: LLM_POLICY,
        honest: true,
        byzantine: true,
        summary: "queries a chat-completions model with role-specific prompts",
    },
];

pub fn list_policies() -> &'static [PolicyInfo] {
    REGISTRY
}

pub fn lookup(name: &str) -> Option<&'static PolicyInfo> {
    REGISTRY.iter().find(|p| p.name == name)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyDecision<S> {
    pub proposal: S,
    pub justification: String,
    pub private_strategy: String,
}

/// Everything a policy may look at when it is queried.
pub struct PolicyContext<'a, S> {
    pub own_state: &'a AgentState<S>,
    /// All N messages of the previous round; empty in round 1.
    pub peer_messages_last_round: &'a [AgentMessage<S>],
    /// The round being played (1-based).
    pub round: u32,
    pub n_agents: u32,
    pub value_min: S,
    pub value_max: S,
    pub precision: u32,
    /// Text summary of the previous round from this agent's point of view.
    pub summary: &'a str,
    /// Generator seeded from (game seed, agent, round, phase).
    pub rng: ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct PolicyError(pub String);

pub trait Policy<S: Scalar>: Send + Sync {
    fn name(&self) -> &str;

    fn propose(&self, ctx: &mut PolicyContext<'_, S>) -> Result<PolicyDecision<S>, PolicyError>;

    /// Called after every agent has broadcast; `current_round` holds all N messages.
    fn vote(
        &self,
        ctx: &mut PolicyContext<'_, S>,
        current_round: &[AgentMessage<S>],
    ) -> Result<TerminationVote, PolicyError>;
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BuildError {
    #[error("unknown policy {0:?}")]
    Unknown(String),
    #[error("policy {0:?} needs an external backend that this factory does not provide")]
    Unsupported(String),
    #[error("policy {name:?}: invalid parameter {param} = {value}")]
    BadParam { name: String, param: String, value: f64 },
}

/// Turns a [`PolicySpec`] from a config into a runnable policy.
pub trait PolicyFactory<S: Scalar>: Sync {
    fn build(
        &self,
        agent: AgentId,
        role: Role,
        spec: &PolicySpec,
        config: &GameConfig<S>,
    ) -> Result<Box<dyn Policy<S>>, BuildError>;
}

/// Factory for every scripted policy in the registry.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedPolicies;

impl<S: Scalar> PolicyFactory<S> for ScriptedPolicies {
    fn build(
        &self,
        _agent: AgentId,
        _role: Role,
        spec: &PolicySpec,
        _config: &GameConfig<S>,
    ) -> Result<Box<dyn Policy<S>>, BuildError> {
        build_scripted(spec)
    }
}

pub fn build_scripted<S: Scalar>(spec: &PolicySpec) -> Result<Box<dyn Policy<S>>, BuildError> {
    Ok(match spec.name.as_str() {
        "Echo" => Box::new(Echo),
        "MedianAdopt" => Box::new(MedianAdopt),
        "MeanStep" => {
            let alpha = spec.param("alpha").unwrap_or(MeanStep::DEFAULT_ALPHA);
            if !(alpha > 0.0 && alpha <= 1.0) {
                return Err(BuildError::BadParam {
                    name: spec.name.clone(),
                    param: "alpha".into(),
                    value: alpha,
                });
            }
            Box::new(MeanStep { alpha })
        }
        "Stubborn" => Box::new(Stubborn),
        "Staller" => Box::new(Staller),
        "ExtremePuller" => Box::new(ExtremePuller {
            target: spec.param("target"),
        }),
        "Oscillator" => Box::new(Oscillator),
        LLM_POLICY => return Err(BuildError::Unsupported(spec.name.clone())),
        other => return Err(BuildError::Unknown(other.to_string())),
    })
}

/// Honest scripted vote rule: stop iff every proposal of the round is the
/// same canonical value.
pub fn all_equal<S: Scalar>(messages: &[AgentMessage<S>], precision: u32) -> bool {
    match messages.split_first() {
        None => false,
        Some((first, rest)) => {
            let key = canonical_key(first.proposal, precision);
            rest.iter().all(|m| canonical_key(m.proposal, precision) == key)
        }
    }
}

/// Lower-middle element of the proposals; always one of them.
pub fn lower_median<S: Scalar>(messages: &[AgentMessage<S>]) -> Option<S> {
    if messages.is_empty() {
        return None;
    }
    let mut values: Vec<S> = messages.iter().map(|m| m.proposal).collect();
    values.sort_by(|a, b| a.partial_cmp(b).expect("proposals are finite"));
    Some(values[(values.len() - 1) / 2])
}

fn mean<S: Scalar>(messages: &[AgentMessage<S>]) -> Option<S> {
    if messages.is_empty() {
        return None;
    }
    let sum = messages.iter().fold(S::zero(), |acc, m| acc + m.proposal);
    Some(sum / S::from_usize(messages.len())?)
}

fn own_value<S: Scalar>(ctx: &PolicyContext<'_, S>) -> Result<S, PolicyError> {
    ctx.own_state
        .current_proposal
        .ok_or_else(|| PolicyError(format!("agent {} has no current proposal", ctx.own_state.id)))
}

fn decision<S>(proposal: S, justification: &str, strategy: &str) -> PolicyDecision<S> {
    PolicyDecision {
        proposal,
        justification: justification.to_string(),
        private_strategy: strategy.to_string(),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Echo;

impl<S: Scalar> Policy<S> for Echo {
    fn name(&self) -> &str {
        "Echo"
    }

    fn propose(&self, ctx: &mut PolicyContext<'_, S>) -> Result<PolicyDecision<S>, PolicyError> {
        Ok(decision(own_value(ctx)?, "I keep my current value.", ""))
    }

    fn vote(
        &self,
        ctx: &mut PolicyContext<'_, S>,
        current_round: &[AgentMessage<S>],
    ) -> Result<TerminationVote, PolicyError> {
        Ok(equal_vote(current_round, ctx.precision))
    }
}

fn equal_vote<S: Scalar>(messages: &[AgentMessage<S>], precision: u32) -> TerminationVote {
    if all_equal(messages, precision) {
        TerminationVote::Vote
    } else {
        TerminationVote::Continue
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MedianAdopt;

impl<S: Scalar> Policy<S> for MedianAdopt {
    fn name(&self) -> &str {
        "MedianAdopt"
    }

    fn propose(&self, ctx: &mut PolicyContext<'_, S>) -> Result<PolicyDecision<S>, PolicyError> {
        match lower_median(ctx.peer_messages_last_round) {
            Some(m) => Ok(decision(m, "Adopting the median of the last round.", "")),
            None => Ok(decision(own_value(ctx)?, "Opening with my initial value.", "")),
        }
    }

    fn vote(
        &self,
        ctx: &mut PolicyContext<'_, S>,
        current_round: &[AgentMessage<S>],
    ) -> Result<TerminationVote, PolicyError> {
        Ok(equal_vote(current_round, ctx.precision))
    }
}

/// `v <- v + alpha * (mean(last round) - v)`.
#[derive(Debug, Clone, Copy)]
pub struct MeanStep {
    pub alpha: f64,
}

impl MeanStep {
    pub const DEFAULT_ALPHA: f64 = 0.5;
}

impl<S: Scalar> Policy<S> for MeanStep {
    fn name(&self) -> &str {
        "MeanStep"
    }

    fn propose(&self, ctx: &mut PolicyContext<'_, S>) -> Result<PolicyDecision<S>, PolicyError> {
        let v = own_value(ctx)?;
        match mean(ctx.peer_messages_last_round) {
            Some(m) => {
                let alpha = S::from_f64_lossy(self.alpha);
                Ok(decision(v + alpha * (m - v), "Stepping toward the group mean.", ""))
            }
            None => Ok(decision(v, "Opening with my initial value.", "")),
        }
    }

    fn vote(
        &self,
        ctx: &mut PolicyContext<'_, S>,
        current_round: &[AgentMessage<S>],
    ) -> Result<TerminationVote, PolicyError> {
        Ok(equal_vote(current_round, ctx.precision))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Stubborn;

impl<S: Scalar> Policy<S> for Stubborn {
    fn name(&self) -> &str {
        "Stubborn"
    }

    fn propose(&self, ctx: &mut PolicyContext<'_, S>) -> Result<PolicyDecision<S>, PolicyError> {
        Ok(decision(own_value(ctx)?, "My value is final.", "hold"))
    }

    fn vote(
        &self,
        _ctx: &mut PolicyContext<'_, S>,
        _current_round: &[AgentMessage<S>],
    ) -> Result<TerminationVote, PolicyError> {
        Ok(TerminationVote::Vote)
    }
}

/// Liveness attacker: sits at whichever endpoint is farthest from the median
/// of the previous round and never votes to stop.
#[derive(Debug, Clone, Copy)]
pub struct Staller;

impl<S: Scalar> Policy<S> for Staller {
    fn name(&self) -> &str {
        "Staller"
    }

    fn propose(&self, ctx: &mut PolicyContext<'_, S>) -> Result<PolicyDecision<S>, PolicyError> {
        let two = S::one() + S::one();
        let mid = (ctx.value_min + ctx.value_max) / two;
        let median = lower_median(ctx.peer_messages_last_round).unwrap_or(mid);
        let proposal = if median <= mid { ctx.value_max } else { ctx.value_min };
        Ok(decision(
            proposal,
            "The evidence points firmly to this value.",
            "stall: stay far from the median, never vote",
        ))
    }

    fn vote(
        &self,
        _ctx: &mut PolicyContext<'_, S>,
        _current_round: &[AgentMessage<S>],
    ) -> Result<TerminationVote, PolicyError> {
        Ok(TerminationVote::Continue)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ExtremePuller {
    pub target: Option<f64>,
}

impl<S: Scalar> Policy<S> for ExtremePuller {
    fn name(&self) -> &str {
        "ExtremePuller"
    }

    fn propose(&self, ctx: &mut PolicyContext<'_, S>) -> Result<PolicyDecision<S>, PolicyError> {
        let target = self.target.map(S::from_f64_lossy).unwrap_or(ctx.value_min);
        Ok(decision(target, "Everyone should move here.", "pull toward target"))
    }

    fn vote(
        &self,
        _ctx: &mut PolicyContext<'_, S>,
        _current_round: &[AgentMessage<S>],
    ) -> Result<TerminationVote, PolicyError> {
        Ok(TerminationVote::Vote)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Oscillator;

impl<S: Scalar> Policy<S> for Oscillator {
    fn name(&self) -> &str {
        "Oscillator"
    }

    fn propose(&self, ctx: &mut PolicyContext<'_, S>) -> Result<PolicyDecision<S>, PolicyError> {
        let proposal = if ctx.round % 2 == 1 {
            ctx.value_min
        } else {
            ctx.value_max
        };
        Ok(decision(proposal, "Reconsidering.", "alternate endpoints"))
    }

    fn vote(
        &self,
        ctx: &mut PolicyContext<'_, S>,
        _current_round: &[AgentMessage<S>],
    ) -> Result<TerminationVote, PolicyError> {
        Ok(if ctx.round.is_multiple_of(2) {
            TerminationVote::Vote
        } else {
            TerminationVote::Continue
        })
    }
}
