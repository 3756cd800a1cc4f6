//! Structured replies the model must produce, their JSON schemas, and a
//! tolerant extractor for the first JSON object in free text.

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentReply {
    pub proposal: f64,
    pub justification: String,
    pub private_strategy: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteDecision {
    Vote,
    Continue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteReply {
    pub decision: VoteDecision,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseFailure {
    #[error("no JSON object found in reply")]
    NoJsonObject,
    #[error("missing field {0:?}")]
    MissingField(&'static str),
    #[error("field {field:?} has the wrong type: expected {expected}")]
    WrongType {
        field: &'static str,
        expected: &'static str,
    },
    #[error("proposal is not a finite number")]
    NonFinite,
    #[error("decision must be \"vote\" or \"continue\", got {0:?}")]
    BadDecision(String),
}

/// The first `{...}` in `raw` that parses as a JSON object.
pub fn first_json_object(raw: &str) -> Option<Map<String, Value>> {
    raw.match_indices('{').find_map(|(i, _)| {
        let mut stream = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(map))) => Some(map),
            _ => None,
        }
    })
}

fn string_field(obj: &Map<String, Value>, field: &'static str) -> Result<Option<String>, ParseFailure> {
    match obj.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(ParseFailure::WrongType {
            field,
            expected: "string",
        }),
    }
}

pub fn parse_agent_reply(raw: &str) -> Result<AgentReply, ParseFailure> {
    let obj = first_json_object(raw).ok_or(ParseFailure::NoJsonObject)?;
    let proposal = match obj.get("proposal") {
        None => return Err(ParseFailure::MissingField("proposal")),
        Some(Value::Number(n)) => n.as_f64().ok_or(ParseFailure::NonFinite)?,
        Some(_) => {
            return Err(ParseFailure::WrongType {
                field: "proposal",
                expected: "number",
            })
        }
    };
    if !proposal.is_finite() {
        return Err(ParseFailure::NonFinite);
    }
    let justification = string_field(&obj, "justification")?.ok_or(ParseFailure::MissingField("justification"))?;
    let private_strategy = string_field(&obj, "private_strategy")?.unwrap_or_default();
    Ok(AgentReply {
        proposal,
        justification,
        private_strategy,
    })
}

pub fn parse_vote_reply(raw: &str) -> Result<VoteReply, ParseFailure> {
    let obj = first_json_object(raw).ok_or(ParseFailure::NoJsonObject)?;
    let decision = string_field(&obj, "decision")?.ok_or(ParseFailure::MissingField("decision"))?;
    let decision = match decision.trim().to_ascii_lowercase().as_str() {
        "vote" => VoteDecision::Vote,
        "continue" => VoteDecision::Continue,
        _ => return Err(ParseFailure::BadDecision(decision)),
    };
    Ok(VoteReply { decision })
}

/// A named JSON schema sent with a request for guided decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplySchema {
    pub name: &'static str,
    pub schema: Value,
}

pub fn agent_reply_schema() -> ReplySchema {
    ReplySchema {
        name: "agent_reply",
        schema: json!({
            "type": "object",
            "properties": {
                "proposal": {"type": "number"},
                "justification": {"type": "string"},
                "private_strategy": {"type": "string"}
            },
            "required": ["proposal", "justification", "private_strategy"],
            "additionalProperties": false
        }),
    }
}

pub fn vote_reply_schema() -> ReplySchema {
    ReplySchema {
        name: "vote_reply",
        schema: json!({
            "type": "object",
            "properties": {
                "decision": {"type": "string", "enum": ["vote", "continue"]}
            },
            "required": ["decision"],
            "additionalProperties": false
        }),
    }
}
