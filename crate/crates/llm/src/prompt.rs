//! Prompt templates and their rendering.
//!
//! Templates are plain text with `{name}` placeholders. Rendering is a single
//! pass, so braces that appear inside substituted values (peer
//! justifications, for instance) are never interpreted.

use std::collections::BTreeMap;

use consensus_core::game::{AgentMessage, PromptVariant, Role};
use consensus_core::scalar::{format_value, Scalar};
use consensus_core::PolicyContext;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Words honest agents must never see in the no-adversary variant.
/// Matched case-insensitively as substrings.
pub const ADVERSARY_VOCABULARY: &[&str] = &[
    "byzantine",
    "adversar",
    "malicious",
    "attacker",
    "traitor",
    "faulty",
    "dishonest",
];

/// Returns the vocabulary entries found in `text`.
pub fn adversary_hits(text: &str) -> Vec<&'static str> {
    let lower = text.to_lowercase();
    ADVERSARY_VOCABULARY
        .iter()
        .copied()
        .filter(|w| lower.contains(w))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("unresolved placeholder {{{0}}}")]
    Unresolved(String),
    #[error("stray '{{' at byte {0}")]
    Malformed(usize),
}

/// Substitutes every `{name}` in `template` from `vars`.
pub fn render(template: &str, vars: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    let mut offset = 0;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let after = &rest[start + 1..];
        let end = after.find('}').ok_or(TemplateError::Malformed(offset + start))?;
        let name = &after[..end];
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_lowercase() || c == '_') {
            return Err(TemplateError::Malformed(offset + start));
        }
        let value = vars
            .get(name)
            .ok_or_else(|| TemplateError::Unresolved(name.to_string()))?;
        out.push_str(value);
        let consumed = start + 1 + end + 1;
        rest = &rest[consumed..];
        offset += consumed;
    }
    out.push_str(rest);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BundleVariant {
    HonestMayAware,
    HonestNoneExist,
    Byzantine,
}

impl BundleVariant {
    pub fn for_agent(role: Role, variant: PromptVariant) -> Self {
        match (role, variant) {
            (Role::Byzantine, _) => BundleVariant::Byzantine,
            (Role::Honest, PromptVariant::ByzantineMayExist) => BundleVariant::HonestMayAware,
            (Role::Honest, PromptVariant::NoByzantineMentioned) => BundleVariant::HonestNoneExist,
        }
    }
}

/// The four templates one agent uses: proposal system/user and vote system/user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBundle {
    pub system_prompt: String,
    pub round_prompt: String,
    pub vote_system_prompt: String,
    pub vote_round_prompt: String,
    pub variant: BundleVariant,
}

/// Version tag of the shipped templates, recorded in run provenance.
pub const PROMPT_VERSION: &str = "v1";

impl PromptBundle {
    pub fn builtin(variant: BundleVariant) -> Self {
        let (system, round, vote_system, vote_round) = match variant {
            BundleVariant::HonestMayAware => (
                include_str!("../prompts/honest_system_may_aware.txt"),
                include_str!("../prompts/honest_round.txt"),
                include_str!("../prompts/honest_vote_system_may_exist.txt"),
                include_str!("../prompts/honest_vote_round.txt"),
            ),
            BundleVariant::HonestNoneExist => (
                include_str!("../prompts/honest_system_none_exist.txt"),
                include_str!("../prompts/honest_round.txt"),
                include_str!("../prompts/honest_vote_system_none_exist.txt"),
                include_str!("../prompts/honest_vote_round.txt"),
            ),
            BundleVariant::Byzantine => (
                include_str!("../prompts/byzantine_system.txt"),
                include_str!("../prompts/byzantine_round.txt"),
                include_str!("../prompts/byzantine_vote_system.txt"),
                include_str!("../prompts/byzantine_vote_round.txt"),
            ),
        };
        PromptBundle {
            system_prompt: system.to_string(),
            round_prompt: round.to_string(),
            vote_system_prompt: vote_system.to_string(),
            vote_round_prompt: vote_round.to_string(),
            variant,
        }
    }

    pub fn for_agent(role: Role, variant: PromptVariant) -> Self {
        Self::builtin(BundleVariant::for_agent(role, variant))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "user".into(),
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "assistant".into(),
            content: content.into(),
        }
    }
}

/// Game-level facts the templates mention that a [`PolicyContext`] does not carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GameFacts {
    pub max_rounds: u32,
    /// Largest tolerated number of Byzantine agents, floor(N/3).
    pub max_faulty: u32,
    pub quorum: u32,
}

fn common_vars<S: Scalar>(ctx: &PolicyContext<'_, S>, facts: GameFacts) -> BTreeMap<&'static str, String> {
    let p = ctx.precision;
    let mut vars = BTreeMap::new();
    vars.insert("agent_id", ctx.own_state.id.to_string());
    vars.insert("n_agents", ctx.n_agents.to_string());
    vars.insert("round", ctx.round.to_string());
    vars.insert("value_min", format_value(ctx.value_min, p));
    vars.insert("value_max", format_value(ctx.value_max, p));
    vars.insert("max_rounds", facts.max_rounds.to_string());
    vars.insert("max_faulty", facts.max_faulty.to_string());
    vars.insert("quorum", facts.quorum.to_string());
    vars.insert("summary", ctx.summary.to_string());
    vars.insert(
        "current_proposal",
        ctx.own_state
            .current_proposal
            .map_or_else(|| "none".to_string(), |v| format_value(v, p)),
    );
    vars.insert(
        "private_strategy",
        if ctx.own_state.private_strategy.is_empty() {
            "(none)".to_string()
        } else {
            ctx.own_state.private_strategy.clone()
        },
    );
    vars
}

/// System + user messages for the proposal query.
pub fn build_round_prompt<S: Scalar>(
    bundle: &PromptBundle,
    ctx: &PolicyContext<'_, S>,
    facts: GameFacts,
) -> Result<Vec<ChatMessage>, TemplateError> {
    let vars = common_vars(ctx, facts);
    Ok(vec![
        ChatMessage::system(render(&bundle.system_prompt, &vars)?),
        ChatMessage::user(render(&bundle.round_prompt, &vars)?),
    ])
}

/// System + user messages for the termination vote.
pub fn build_vote_prompt<S: Scalar>(
    bundle: &PromptBundle,
    ctx: &PolicyContext<'_, S>,
    current_round: &[AgentMessage<S>],
    facts: GameFacts,
) -> Result<Vec<ChatMessage>, TemplateError> {
    let mut vars = common_vars(ctx, facts);
    let candidates = current_round
        .iter()
        .map(|m| format!("- Agent {}: {}", m.sender, format_value(m.proposal, ctx.precision)))
        .collect::<Vec<_>>()
        .join("\n");
    vars.insert("candidates", candidates);
    Ok(vec![
        ChatMessage::system(render(&bundle.vote_system_prompt, &vars)?),
        ChatMessage::user(render(&bundle.vote_round_prompt, &vars)?),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(pairs: &[(&'static str, &str)]) -> BTreeMap<&'static str, String> {
        pairs.iter().map(|(k, v)| (*k, v.to_string())).collect()
    }

    #[test]
    fn render_substitutes_once() {
        let v = vars(&[("a", "{b}"), ("b", "x")]);
        assert_eq!(render("[{a}] {b}", &v).unwrap(), "[{b}] x");
    }

    #[test]
    fn render_errors() {
        let v = vars(&[("a", "1")]);
        assert_eq!(render("{a} {zz}", &v), Err(TemplateError::Unresolved("zz".into())));
        assert_eq!(render("{a} {", &v), Err(TemplateError::Malformed(4)));
        assert!(matches!(render(r#"{"json": 1}"#, &v), Err(TemplateError::Malformed(0))));
    }

    #[test]
    fn builtin_templates_use_known_placeholders() {
        let mut all = vars(&[
            ("agent_id", "0"),
            ("n_agents", "4"),
            ("round", "1"),
            ("value_min", "0"),
            ("value_max", "50"),
            ("max_rounds", "50"),
            ("max_faulty", "1"),
            ("quorum", "3"),
            ("summary", "s"),
            ("current_proposal", "1"),
            ("private_strategy", "p"),
        ]);
        all.insert("candidates", "c".into());
        for v in [
            BundleVariant::HonestMayAware,
            BundleVariant::HonestNoneExist,
            BundleVariant::Byzantine,
        ] {
            let b = PromptBundle::builtin(v);
            for t in [
                &b.system_prompt,
                &b.round_prompt,
                &b.vote_system_prompt,
                &b.vote_round_prompt,
            ] {
                render(t, &all).unwrap();
            }
        }
    }

    #[test]
    fn none_exist_templates_are_clean() {
        let b = PromptBundle::builtin(BundleVariant::HonestNoneExist);
        for t in [
            &b.system_prompt,
            &b.round_prompt,
            &b.vote_system_prompt,
            &b.vote_round_prompt,
        ] {
            assert!(adversary_hits(t).is_empty(), "{t}");
        }
        let b = PromptBundle::builtin(BundleVariant::HonestMayAware);
        assert!(!adversary_hits(&b.system_prompt).is_empty());
        let b = PromptBundle::builtin(BundleVariant::Byzantine);
        assert!(b.system_prompt.contains("you are a Byzantine agent"));
        assert!(b.system_prompt.contains("Allowed actions"));
    }
}
