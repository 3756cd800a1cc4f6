use std::sync::Arc;

use consensus_core::game::{AgentId, AgentMessage, GameConfig, Role, TerminationVote};
use consensus_core::policies::{build_scripted, BuildError, LLM_POLICY};
use consensus_core::{Policy, PolicyContext, PolicyDecision, PolicyError, PolicyFactory, PolicySpec, Scalar};
use thiserror::Error;

use crate::gateway::{Gateway, GatewayError};
use crate::prompt::{build_round_prompt, build_vote_prompt, ChatMessage, GameFacts, PromptBundle, TemplateError};
use crate::reply::{
    agent_reply_schema, parse_agent_reply, parse_vote_reply, vote_reply_schema, ParseFailure, ReplySchema, VoteDecision,
};

pub const DEFAULT_RETRY_LIMIT: u32 = 2;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("no usable reply after {attempts} attempts: {last}")]
    PolicyFailure { attempts: u32, last: ParseFailure },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

fn correction(err: &ParseFailure, fields: &str) -> ChatMessage {
    ChatMessage::user(format!(
        "Your previous reply could not be used ({err}). Reply again with only a JSON object with the fields {fields}."
    ))
}

/// Sends `messages`, parsing with `parse`; on a parse failure the bad reply
/// and a correction are appended and the query is retried, up to
/// `retry_limit` extra attempts.
fn query_with_retries<T>(
    gateway: &Gateway,
    mut messages: Vec<ChatMessage>,
    schema: &ReplySchema,
    retry_limit: u32,
    fields: &str,
    parse: impl Fn(&str) -> Result<T, ParseFailure>,
) -> Result<T, LlmError> {
    let mut attempt = 0;
    loop {
        attempt += 1;
        let raw = gateway.complete(&messages, Some(schema))?;
        match parse(&raw) {
            Ok(v) => return Ok(v),
            Err(e) if attempt > retry_limit => {
                return Err(LlmError::PolicyFailure {
                    attempts: attempt,
                    last: e,
                })
            }
            Err(e) => {
                messages.push(ChatMessage::assistant(raw));
                messages.push(correction(&e, fields));
            }
        }
    }
}

pub fn llm_propose<S: Scalar>(
    ctx: &PolicyContext<'_, S>,
    bundle: &PromptBundle,
    facts: GameFacts,
    gateway: &Gateway,
    retry_limit: u32,
) -> Result<PolicyDecision<S>, LlmError> {
    let messages = build_round_prompt(bundle, ctx, facts)?;
    let reply = query_with_retries(
        gateway,
        messages,
        &agent_reply_schema(),
        retry_limit,
        "proposal (number), justification (string), private_strategy (string)",
        parse_agent_reply,
    )?;
    Ok(PolicyDecision {
        proposal: S::from_f64_lossy(reply.proposal),
        justification: reply.justification,
        private_strategy: reply.private_strategy,
    })
}

pub fn llm_vote<S: Scalar>(
    ctx: &PolicyContext<'_, S>,
    current_round: &[AgentMessage<S>],
    bundle: &PromptBundle,
    facts: GameFacts,
    gateway: &Gateway,
    retry_limit: u32,
) -> Result<TerminationVote, LlmError> {
    let messages = build_vote_prompt(bundle, ctx, current_round, facts)?;
    let reply = query_with_retries(
        gateway,
        messages,
        &vote_reply_schema(),
        retry_limit,
        "decision (\"vote\" or \"continue\")",
        parse_vote_reply,
    )?;
    Ok(match reply.decision {
        VoteDecision::Vote => TerminationVote::Vote,
        VoteDecision::Continue => TerminationVote::Continue,
    })
}

/// A policy answered by a chat model: one query for the proposal and one for
/// the vote, every round.
pub struct LlmPolicy {
    pub gateway: Arc<Gateway>,
    pub bundle: PromptBundle,
    pub facts: GameFacts,
    pub retry_limit: u32,
}

impl<S: Scalar> Policy<S> for LlmPolicy {
    fn name(&self) -> &str {
        LLM_POLICY
    }

    fn propose(&self, ctx: &mut PolicyContext<'_, S>) -> Result<PolicyDecision<S>, PolicyError> {
        llm_propose(ctx, &self.bundle, self.facts, &self.gateway, self.retry_limit)
            .map_err(|e| PolicyError(e.to_string()))
    }

    fn vote(
        &self,
        ctx: &mut PolicyContext<'_, S>,
        current_round: &[AgentMessage<S>],
    ) -> Result<TerminationVote, PolicyError> {
        llm_vote(
            ctx,
            current_round,
            &self.bundle,
            self.facts,
            &self.gateway,
            self.retry_limit,
        )
        .map_err(|e| PolicyError(e.to_string()))
    }
}

/// Builds `LLM` agents on a shared gateway and everything else as scripted policies.
#[derive(Debug, Clone)]
pub struct LlmPolicies {
    pub gateway: Arc<Gateway>,
    pub retry_limit: u32,
}

impl LlmPolicies {
    pub fn new(gateway: Arc<Gateway>) -> Self {
        LlmPolicies {
            gateway,
            retry_limit: DEFAULT_RETRY_LIMIT,
        }
    }
}

impl<S: Scalar> PolicyFactory<S> for LlmPolicies {
    fn build(
        &self,
        _agent: AgentId,
        role: Role,
        spec: &PolicySpec,
        config: &GameConfig<S>,
    ) -> Result<Box<dyn Policy<S>>, BuildError> {
        if spec.name != LLM_POLICY {
            return build_scripted(spec);
        }
        let retry_limit = match spec.param("retry_limit") {
            None => self.retry_limit,
            Some(r) if r >= 0.0 && r.fract() == 0.0 => r as u32,
            Some(r) => {
                return Err(BuildError::BadParam {
                    name: spec.name.clone(),
                    param: "retry_limit".into(),
                    value: r,
                })
            }
        };
        Ok(Box::new(LlmPolicy {
            gateway: self.gateway.clone(),
            bundle: PromptBundle::for_agent(role, config.prompt_variant),
            facts: GameFacts {
                max_rounds: config.max_rounds,
                max_faulty: config.n_agents / 3,
                quorum: config.quorum().threshold(config.n_agents),
            },
            retry_limit,
        }))
    }
}
