//! Human-readable replay of a stored run log.

use std::fmt::Write;

use consensus_core::scalar::format_value;
use consensus_core::{Role, RunLog};

use crate::RunnerError;

/// Renders `log` round by round and checks that the outcome recomputed from
/// the recorded rounds matches the stored one.
pub fn render(log: &RunLog) -> Result<String, RunnerError> {
    let c = &log.config;
    let p = c.value_precision;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "game: N={} B={} model={} variant={} seed={} rounds<={} range=[{}, {}]",
        c.n_agents,
        c.n_byzantine,
        c.model,
        c.prompt_variant.as_str(),
        log.seed,
        c.max_rounds,
        format_value(c.value_min, p),
        format_value(c.value_max, p),
    );
    let initial: Vec<String> = log
        .initial_honest_proposals
        .iter()
        .map(|v| format_value(*v, p))
        .collect();
    let _ = writeln!(out, "initial honest proposals: [{}]", initial.join(", "));
    let quorum = c.quorum().threshold(c.n_agents);
    for r in &log.rounds {
        let _ = writeln!(
            out,
            "\nround {}  (stop votes {}/{}, quorum {})",
            r.round,
            r.stop_votes(),
            c.n_agents,
            quorum
        );
        for (i, m) in r.messages.iter().enumerate() {
            let role = match log.roles.get(i) {
                Some(Role::Byzantine) => "byz",
                _ => "hon",
            };
            let clamped = m
                .clamped_from
                .map(|v| format!(" (clamped from {})", format_value(v, p)))
                .unwrap_or_default();
            let vote = r
                .votes
                .get(i)
                .map_or("?", |v| if v.is_stop() { "vote" } else { "continue" });
            let _ = writeln!(
                out,
                "  agent {:>3} [{role}] {:>12}{clamped}  {vote:<8}  {}",
                m.sender.0,
                format_value(m.proposal, p),
                m.justification.replace('\n', " ")
            );
        }
    }
    let o = &log.outcome;
    let value = o.final_value.map(|v| format_value(v, p)).unwrap_or_else(|| "-".into());
    let _ = writeln!(
        out,
        "\noutcome: {} after {} rounds, final value {value}",
        o.kind.as_str(),
        o.rounds_used
    );
    if let Some(e) = &log.error {
        let _ = writeln!(out, "error: {e}");
    }
    let replayed = log
        .replay_outcome()
        .map_err(|e| RunnerError::Validation(format!("log cannot be replayed: {e}")))?;
    if &replayed != o {
        return Err(RunnerError::Validation(format!(
            "stored outcome {} does not match replayed outcome {} ({} rounds)",
            o.kind.as_str(),
            replayed.kind.as_str(),
            replayed.rounds_used
        )));
    }
    let _ = writeln!(out, "replay check: ok");
    Ok(out)
}
