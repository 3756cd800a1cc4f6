//! Chat-model agents for the consensus game: prompt templates, reply
//! parsing with retries, and a chat-completions gateway with a scripted mock.

pub mod gateway;
pub mod policy;
pub mod prompt;
pub mod reply;

pub use gateway::{
    install_mock, Gateway, GatewayConfig, GatewayError, Matcher, MockHandle, MockReply, MockTransport, SchemaField,
    Transport,
};
pub use policy::{llm_propose, llm_vote, LlmError, LlmPolicies, LlmPolicy, DEFAULT_RETRY_LIMIT};
pub use prompt::{
    adversary_hits, build_round_prompt, build_vote_prompt, BundleVariant, ChatMessage, GameFacts, PromptBundle,
    TemplateError, ADVERSARY_VOCABULARY,
};
pub use reply::{parse_agent_reply, parse_vote_reply, AgentReply, ParseFailure, VoteDecision, VoteReply};
