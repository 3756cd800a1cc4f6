//! The synchronous round loop.
//!
//! Each round every agent (in `AgentId` order) receives a summary of the
//! previous round, asks its policy for a proposal, and broadcasts exactly one
//! message. Once all N messages exist, every policy is asked for a
//! termination vote that can see the whole round. The game ends when the
//! stop votes reach the quorum or the round cap is hit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{
    classify_outcome, AgentId, AgentMessage, AgentState, ClassifyError, GameConfig, Outcome, Role, TerminationVote,
    ValidatedConfig,
};
use crate::policies::{BuildError, Policy, PolicyContext, PolicyFactory};
use crate::scalar::{format_value, Scalar};
use crate::seed;

const PHASE_PROPOSE: u64 = 0;
const PHASE_VOTE: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct RoundRecord<S> {
    pub round: u32,
    /// One message per agent, indexed by `AgentId`.
    pub messages: Vec<AgentMessage<S>>,
    /// One vote per agent, indexed by `AgentId`.
    pub votes: Vec<TerminationVote>,
    pub private_strategies: Vec<String>,
}

impl<S> RoundRecord<S> {
    pub fn stop_votes(&self) -> u32 {
        self.votes.iter().filter(|v| v.is_stop()).count() as u32
    }
}

/// Complete, self-contained record of one game.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct RunLog<S> {
    pub config: GameConfig<S>,
    pub seed: u64,
    pub roles: Vec<Role>,
    pub initial_honest_proposals: Vec<S>,
    pub rounds: Vec<RoundRecord<S>>,
    pub outcome: Outcome<S>,
    /// Only recorded when timing is enabled; left out otherwise so that logs
    /// are byte-identical across reruns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

impl<S: Scalar> RunLog<S> {
    /// Final value held by each honest agent: its last broadcast, or its
    /// initial proposal if no round completed.
    pub fn final_honest_values(&self) -> Vec<S> {
        match self.rounds.last() {
            Some(last) => last
                .messages
                .iter()
                .zip(&self.roles)
                .filter(|(_, r)| **r == Role::Honest)
                .map(|(m, _)| m.proposal)
                .collect(),
            None => self.initial_honest_proposals.clone(),
        }
    }

    /// Re-derives the outcome from the recorded rounds alone.
    pub fn replay_outcome(&self) -> Result<Outcome<S>, ClassifyError> {
        let quorum = self.config.quorum();
        let terminated = self.error.is_none()
            && self
                .rounds
                .last()
                .is_some_and(|r| quorum.reached(r.stop_votes(), self.config.n_agents));
        classify_outcome(
            &self.initial_honest_proposals,
            &self.final_honest_values(),
            terminated,
            self.rounds.len() as u32,
            self.config.value_precision,
        )
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("agent {agent}: policy failed: {cause}")]
    PolicyFailure { agent: AgentId, cause: String },
    #[error("expected {expected} policies, got {got}")]
    PolicyCount { expected: usize, got: usize },
    #[error("agent {agent}: {source}")]
    Build { agent: AgentId, source: BuildError },
    #[error("game already finished")]
    Finished,
    #[error(transparent)]
    Classify(#[from] ClassifyError),
}

/// Mutable state of a game in progress.
#[derive(Debug, Clone)]
pub struct GameState<S> {
    pub config: ValidatedConfig<S>,
    /// Number of completed rounds.
    pub round: u32,
    pub agents: Vec<AgentState<S>>,
    pub initial_honest_proposals: Vec<S>,
    pub history: Vec<RoundRecord<S>>,
    pub terminated: bool,
}

impl<S: Scalar> GameState<S> {
    pub fn last_record(&self) -> Option<&RoundRecord<S>> {
        self.history.last()
    }

    pub fn honest_values(&self) -> Vec<S> {
        self.agents
            .iter()
            .filter(|a| a.role == Role::Honest)
            .filter_map(|a| a.current_proposal)
            .collect()
    }
}

/// Draws honest proposals i.i.d. uniform over the value range, in `AgentId`
/// order, from a generator seeded with `config.seed`.
pub fn init_game<S: Scalar>(config: ValidatedConfig<S>) -> GameState<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dist =
        Uniform::new_inclusive(config.value_min, config.value_max).expect("validated range is finite and non-empty");
    let mut initial = Vec::with_capacity(config.n_honest() as usize);
    let agents = (0..config.n_agents)
        .map(|i| {
            let id = AgentId(i);
            let role = config.role_of(id);
            let current_proposal = match role {
                Role::Honest => {
                    let v = dist.sample(&mut rng);
                    initial.push(v);
                    Some(v)
                }
                Role::Byzantine => None,
            };
            AgentState {
                id,
                role,
                current_proposal,
                history_summary: String::new(),
                private_strategy: String::new(),
            }
        })
        .collect();
    GameState {
        config,
        round: 0,
        agents,
        initial_honest_proposals: initial,
        history: Vec::new(),
        terminated: false,
    }
}

fn truncate_chars(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((idx, _)) => &s[..idx],
        None => s,
    }
}

/// Text summary of the previous round as seen by `agent`.
///
/// With a previous round: one line per agent with its proposal and a
/// truncated justification, then the focal agent's own value and private
/// strategy. Before round 1 only the agent's own state is described.
pub fn summarize_history<S: Scalar>(
    state: &GameState<S>,
    agent: AgentId,
    last_record: Option<&RoundRecord<S>>,
    truncate: usize,
) -> String {
    let precision = state.config.value_precision;
    let own = &state.agents[agent.index()];
    let mut out = String::new();
    match last_record {
        None => match (own.role, own.current_proposal) {
            (_, Some(v)) => {
                let _ = writeln!(out, "No messages have been exchanged yet.");
                let _ = writeln!(out, "Your initial proposal: {}", format_value(v, precision));
            }
            (_, None) => {
                let _ = writeln!(
                    out,
                    "No messages have been exchanged yet. You have no initial proposal; \
                     you may open with any value in the allowed range."
                );
            }
        },
        Some(record) => {
            let _ = writeln!(out, "Messages from round {}:", record.round);
            for m in &record.messages {
                let _ = writeln!(
                    out,
                    "- Agent {}: proposal {} | justification: {}",
                    m.sender,
                    format_value(m.proposal, precision),
                    truncate_chars(&m.justification, truncate)
                );
            }
            match own.current_proposal {
                Some(v) => {
                    let _ = writeln!(out, "Your current proposal: {}", format_value(v, precision));
                }
                None => {
                    let _ = writeln!(out, "Your current proposal: none");
                }
            }
        }
    }
    let strategy = if own.private_strategy.is_empty() {
        "(none)"
    } else {
        own.private_strategy.as_str()
    };
    let _ = write!(out, "Your private strategy: {strategy}");
    out
}

/// Runs games. Scripted games are deterministic whichever mode is used.
#[derive(Debug, Clone, Copy, Default)]
pub struct Engine {
    /// Query the agents' policies of one phase on separate threads.
    pub parallel: bool,
    /// Record wall-clock duration in the log (makes logs non-reproducible).
    pub record_timing: bool,
}

fn agent_rng(game_seed: u64, agent: AgentId, round: u32, phase: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed::mix(&[game_seed, agent.0 as u64, round as u64, phase]))
}

impl Engine {
    pub fn parallel(mut self, on: bool) -> Self {
        self.parallel = on;
        self
    }

    pub fn record_timing(mut self, on: bool) -> Self {
        self.record_timing = on;
        self
    }

    /// Applies `f` to every agent index, in parallel if enabled; results come
    /// back in `AgentId` order either way.
    fn per_agent<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync,
    {
        if !self.parallel || n < 2 {
            return (0..n).map(f).collect();
        }
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..n)
                .map(|i| {
                    scope.spawn({
                        let f = &f;
                        move || f(i)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("policy thread panicked"))
                .collect()
        })
    }

    /// Plays one round and appends its record to `state.history`.
    pub fn run_round<'s, S: Scalar>(
        &self,
        state: &'s mut GameState<S>,
        policies: &[Box<dyn Policy<S>>],
    ) -> Result<&'s RoundRecord<S>, EngineError> {
        let n = state.config.n_agents as usize;
        if policies.len() != n {
            return Err(EngineError::PolicyCount {
                expected: n,
                got: policies.len(),
            });
        }
        if state.terminated || state.round >= state.config.max_rounds {
            return Err(EngineError::Finished);
        }
        let round = state.round + 1;
        let truncate = state.config.justification_truncate_chars;
        let summaries: Vec<String> = (0..n)
            .map(|i| summarize_history(state, AgentId(i as u32), state.last_record(), truncate))
            .collect();

        let config = &state.config;
        let no_messages: &[AgentMessage<S>] = &[];
        let last_messages = state.history.last().map_or(no_messages, |r| &r.messages);
        let agents = &state.agents;
        let decisions = self.per_agent(n, |i| {
            let id = AgentId(i as u32);
            let mut ctx = PolicyContext {
                own_state: &agents[i],
                peer_messages_last_round: last_messages,
                round,
                n_agents: config.n_agents,
                value_min: config.value_min,
                value_max: config.value_max,
                precision: config.value_precision,
                summary: &summaries[i],
                rng: agent_rng(config.seed, id, round, PHASE_PROPOSE),
            };
            policies[i].propose(&mut ctx)
        });

        let mut messages = Vec::with_capacity(n);
        let mut strategies = Vec::with_capacity(n);
        for (i, decision) in decisions.into_iter().enumerate() {
            let id = AgentId(i as u32);
            let d = decision.map_err(|e| EngineError::PolicyFailure {
                agent: id,
                cause: e.to_string(),
            })?;
            if !d.proposal.is_finite() {
                return Err(EngineError::PolicyFailure {
                    agent: id,
                    cause: format!("non-finite proposal {}", d.proposal),
                });
            }
            let proposal = config.clamp(d.proposal);
            messages.push(AgentMessage {
                sender: id,
                round,
                proposal,
                justification: d.justification,
                clamped_from: (proposal != d.proposal).then_some(d.proposal),
            });
            strategies.push(d.private_strategy);
        }

        for (i, agent) in state.agents.iter_mut().enumerate() {
            agent.current_proposal = Some(messages[i].proposal);
            agent.private_strategy = strategies[i].clone();
            agent.history_summary = summaries[i].clone();
        }

        let config = &state.config;
        let agents = &state.agents;
        let votes = self.per_agent(n, |i| {
            let id = AgentId(i as u32);
            let mut ctx = PolicyContext {
                own_state: &agents[i],
                peer_messages_last_round: last_messages,
                round,
                n_agents: config.n_agents,
                value_min: config.value_min,
                value_max: config.value_max,
                precision: config.value_precision,
                summary: &summaries[i],
                rng: agent_rng(config.seed, id, round, PHASE_VOTE),
            };
            policies[i].vote(&mut ctx, &messages)
        });
        let votes = votes
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                v.map_err(|e| EngineError::PolicyFailure {
                    agent: AgentId(i as u32),
                    cause: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;

        let record = RoundRecord {
            round,
            messages,
            votes,
            private_strategies: strategies,
        };
        state.terminated = state
            .config
            .quorum()
            .reached(record.stop_votes(), state.config.n_agents);
        state.round = round;
        state.history.push(record);
        Ok(state.history.last().expect("just pushed"))
    }

    /// Plays a full game. A policy failure ends the game early with
    /// `NoConsensus` and the error recorded in the log.
    pub fn run_game<S: Scalar>(
        &self,
        config: ValidatedConfig<S>,
        policies: &[Box<dyn Policy<S>>],
    ) -> Result<RunLog<S>, EngineError> {
        let started = Instant::now();
        let mut state = init_game(config);
        let mut error = None;
        while !state.terminated && state.round < state.config.max_rounds {
            match self.run_round(&mut state, policies) {
                Ok(_) => {}
                Err(e @ EngineError::PolicyFailure { .. }) => {
                    error = Some(e.to_string());
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let finals = state.honest_values();
        let outcome = classify_outcome(
            &state.initial_honest_proposals,
            &finals,
            state.terminated && error.is_none(),
            state.round,
            state.config.value_precision,
        )?;
        let mut provenance = BTreeMap::new();
        provenance.insert(
            "engine".to_string(),
            format!("consensus-core {}", env!("CARGO_PKG_VERSION")),
        );
        provenance.insert(
            "policies".to_string(),
            policies.iter().map(|p| p.name()).collect::<Vec<_>>().join(","),
        );
        let config = state.config.into_inner();
        Ok(RunLog {
            seed: config.seed,
            roles: config.roles(),
            config,
            initial_honest_proposals: state.initial_honest_proposals,
            rounds: state.history,
            outcome,
            wall_time_ms: self.record_timing.then(|| started.elapsed().as_millis() as u64),
            error,
            provenance,
        })
    }
}

/// Builds one policy per agent from the config's assignment.
pub fn build_policies<S: Scalar>(
    config: &GameConfig<S>,
    factory: &dyn PolicyFactory<S>,
) -> Result<Vec<Box<dyn Policy<S>>>, EngineError> {
    (0..config.n_agents)
        .map(|i| {
            let id = AgentId(i);
            let spec = config.policy_assignment.get(&i).ok_or_else(|| EngineError::Build {
                agent: id,
                source: BuildError::Unknown("<unassigned>".into()),
            })?;
            factory
                .build(id, config.role_of(id), spec, config)
                .map_err(|source| EngineError::Build { agent: id, source })
        })
        .collect()
}

/// Builds policies with `factory` and plays with the default engine.
pub fn run_game<S: Scalar>(
    config: ValidatedConfig<S>,
    factory: &dyn PolicyFactory<S>,
) -> Result<RunLog<S>, EngineError> {
    let policies = build_policies(&config, factory)?;
    Engine::default().run_game(config, &policies)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{validate_config, OutcomeKind};
    use crate::policies::{PolicyDecision, PolicyError, PolicySpec, ScriptedPolicies};

    fn cfg(n: u32, b: u32, honest: &str, byz: &str, seed: u64) -> ValidatedConfig<f64> {
        validate_config(
            GameConfig::new(n, b)
                .with_profile(PolicySpec::new(honest), PolicySpec::new(byz))
                .with_seed(seed),
        )
        .unwrap()
    }

    #[test]
    fn init_is_seeded_and_in_range() {
        let a = init_game(cfg(4, 0, "Echo", "Staller", 11));
        let b = init_game(cfg(4, 0, "Echo", "Staller", 11));
        let c = init_game(cfg(4, 0, "Echo", "Staller", 12));
        assert_eq!(a.initial_honest_proposals.len(), 4);
        assert_eq!(a.initial_honest_proposals, b.initial_honest_proposals);
        assert_ne!(a.initial_honest_proposals, c.initial_honest_proposals);
        assert!(a.initial_honest_proposals.iter().all(|v| (0.0..=50.0).contains(v)));

        let s = init_game(cfg(9, 1, "Echo", "Staller", 1));
        assert_eq!(s.initial_honest_proposals.len(), 8);
        assert!(s.agents[8].current_proposal.is_none());
        assert_eq!(s.round, 0);
    }

    #[test]
    fn round_zero_summary() {
        let mut state = init_game(cfg(4, 1, "Echo", "Staller", 3));
        state.agents[0].current_proposal = Some(17.25);
        let s = summarize_history(&state, AgentId(0), None, 200);
        assert!(s.contains("17.25"));
        assert!(!s.contains("Agent "));
        let s = summarize_history(&state, AgentId(3), None, 200);
        assert!(s.contains("no initial proposal"));
    }

    #[test]
    fn summary_lines_and_truncation() {
        let mut state = init_game(cfg(4, 0, "Echo", "Staller", 3));
        let long: String = (0..500).map(|i| char::from(b'a' + (i % 26) as u8)).collect();
        let record = RoundRecord {
            round: 1,
            messages: (0..4)
                .map(|i| AgentMessage {
                    sender: AgentId(i),
                    round: 1,
                    proposal: 10.0 + i as f64,
                    justification: if i == 2 { long.clone() } else { "short".into() },
                    clamped_from: None,
                })
                .collect(),
            votes: vec![TerminationVote::Continue; 4],
            private_strategies: vec![String::new(); 4],
        };
        state.agents[1].private_strategy = "hold steady".into();
        let s = summarize_history(&state, AgentId(1), Some(&record), 200);
        assert_eq!(s.lines().filter(|l| l.starts_with("- Agent ")).count(), 4);
        assert!(s.contains(&long[..200]));
        assert!(!s.contains(&long[..201]));
        assert!(s.contains("hold steady"));
    }

    #[test]
    fn echo_round_keeps_values_and_continues() {
        let config = cfg(4, 0, "Echo", "Staller", 5);
        let policies = build_policies(&config, &ScriptedPolicies).unwrap();
        let mut state = init_game(config);
        let initial = state.initial_honest_proposals.clone();
        let record = Engine::default().run_round(&mut state, &policies).unwrap();
        let sent: Vec<f64> = record.messages.iter().map(|m| m.proposal).collect();
        assert_eq!(sent, initial);
        assert!(record.votes.iter().all(|v| *v == TerminationVote::Continue));
        assert_eq!(state.round, 1);
    }

    struct Fixed(f64);

    impl Policy<f64> for Fixed {
        fn name(&self) -> &str {
            "Fixed"
        }
        fn propose(&self, _: &mut PolicyContext<'_, f64>) -> Result<PolicyDecision<f64>, PolicyError> {
            Ok(PolicyDecision {
                proposal: self.0,
                justification: String::new(),
                private_strategy: String::new(),
            })
        }
        fn vote(
            &self,
            _: &mut PolicyContext<'_, f64>,
            _: &[AgentMessage<f64>],
        ) -> Result<TerminationVote, PolicyError> {
            Ok(TerminationVote::Continue)
        }
    }

    #[test]
    fn out_of_range_proposals_are_clamped() {
        let config = cfg(4, 0, "Echo", "Staller", 5);
        let policies: Vec<Box<dyn Policy<f64>>> = vec![
            Box::new(Fixed(73.0)),
            Box::new(Fixed(-4.0)),
            Box::new(Fixed(20.0)),
            Box::new(Fixed(50.0)),
        ];
        let mut state = init_game(config);
        let r = Engine::default().run_round(&mut state, &policies).unwrap();
        assert_eq!(r.messages[0].proposal, 50.0);
        assert_eq!(r.messages[0].clamped_from, Some(73.0));
        assert_eq!(r.messages[1].proposal, 0.0);
        assert_eq!(r.messages[2].clamped_from, None);
        assert_eq!(r.messages[3].clamped_from, None);
    }

    #[test]
    fn non_finite_proposal_aborts_run() {
        let config = cfg(4, 0, "Echo", "Staller", 5);
        let policies: Vec<Box<dyn Policy<f64>>> = vec![
            Box::new(Fixed(1.0)),
            Box::new(Fixed(f64::NAN)),
            Box::new(Fixed(1.0)),
            Box::new(Fixed(1.0)),
        ];
        let log = Engine::default().run_game(config, &policies).unwrap();
        assert_eq!(log.outcome.kind, OutcomeKind::NoConsensus);
        assert_eq!(log.outcome.rounds_used, 0);
        assert!(log.rounds.is_empty());
        assert!(log.error.as_deref().unwrap().contains("agent 1"));
    }

    #[test]
    fn continue_forever_times_out() {
        let config = cfg(4, 0, "Echo", "Staller", 9);
        let policies: Vec<Box<dyn Policy<f64>>> =
            (0..4).map(|_| Box::new(Fixed(5.0)) as Box<dyn Policy<f64>>).collect();
        let log = Engine::default().run_game(config, &policies).unwrap();
        assert_eq!(log.outcome.kind, OutcomeKind::NoConsensus);
        assert_eq!(log.outcome.rounds_used, 50);
        assert_eq!(log.rounds.len(), 50);
    }

    #[test]
    fn median_adopt_n5_hand_trace() {
        let config = cfg(5, 0, "MedianAdopt", "Staller", 77);
        let log = run_game(config, &ScriptedPolicies).unwrap();
        let mut init = log.initial_honest_proposals.clone();
        init.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(log.outcome.kind, OutcomeKind::ValidConsensus);
        assert_eq!(log.outcome.rounds_used, 2);
        // Round 1 broadcasts the initial values, round 2 everyone adopts their median.
        let expected = (init[2] * 1e6).round() / 1e6;
        assert_eq!(log.outcome.final_value, Some(expected));
        assert_eq!(log.replay_outcome().unwrap(), log.outcome);
    }

    #[test]
    fn parallel_matches_sequential() {
        let config = cfg(12, 4, "MeanStep", "Staller", 21);
        let policies = build_policies(&config, &ScriptedPolicies).unwrap();
        let a = Engine::default().run_game(config.clone(), &policies).unwrap();
        let b = Engine::default().parallel(true).run_game(config, &policies).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn f32_games_run() {
        let config = validate_config(
            GameConfig::<f32>::new(8, 0)
                .with_profile(PolicySpec::new("MedianAdopt"), PolicySpec::new("Staller"))
                .with_seed(4),
        )
        .unwrap();
        let log = run_game(config, &ScriptedPolicies).unwrap();
        assert_eq!(log.outcome.kind, OutcomeKind::ValidConsensus);
        assert_eq!(log.outcome.rounds_used, 2);
    }
}
