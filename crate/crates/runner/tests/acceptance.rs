//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Run with `cargo test --test acceptance`.

use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use consensus_core::game::{classify_outcome, OutcomeKind, PromptVariant};
use consensus_core::metrics::{wilson_interval, Z_95};
use consensus_core::{
    build_policies, check_termination, quorum_threshold, validate_config, Engine, GameConfig, PolicySpec, RunLog,
    ScriptedPolicies,
};
use consensus_llm::gateway::GatewayConfig;
use consensus_llm::{adversary_hits, Gateway, GatewayError, LlmPolicies, MockTransport};
use consensus_runner::report;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Check = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn play(config: GameConfig) -> RunLog {
    let config = validate_config(config).expect("valid config");
    let policies = build_policies(&config, &ScriptedPolicies).expect("scripted policies");
    Engine::default().run_game(config, &policies).expect("game runs")
}

fn quorum_oracle() -> Check {
    for n in 1..=1000u32 {
        // Smallest v with 3v >= 2n, found by counting.
        let q = (0..=n).find(|&v| 3 * v >= 2 * n).unwrap();
        for v in 0..=n {
            ensure(check_termination(v, n) == (v >= q), || format!("N={n} v={v}"))?;
        }
    }
    Ok("N in [1, 1000], all vote counts".into())
}

fn honest_liveness() -> Check {
    for n in 2..=300u32 {
        for b in 0..=n / 3 {
            ensure(n - b >= quorum_threshold(n), || format!("N={n} B={b}"))?;
        }
    }
    let mut games = 0;
    for n in 3..=30u32 {
        let b = n / 3;
        let config = GameConfig::new(n, b)
            .with_profile(PolicySpec::new("Stubborn"), PolicySpec::new("Staller"))
            .with_seed(n as u64);
        let log = play(config);
        ensure(log.outcome.kind.terminated() && log.outcome.rounds_used == 1, || {
            format!(
                "N={n} B={b}: {:?} after {} rounds",
                log.outcome.kind, log.outcome.rounds_used
            )
        })?;
        games += 1;
    }
    Ok(format!("bound holds for N in [2, 300]; {games} games stop in round 1"))
}

fn benign_reproduction() -> Check {
    let mut valid = 0;
    for n in [4u32, 8, 16] {
        for seed in 0..25u64 {
            let log = play(
                GameConfig::new(n, 0)
                    .with_profile(PolicySpec::new("MedianAdopt"), PolicySpec::new("Staller"))
                    .with_seed(seed),
            );
            let o = &log.outcome;
            ensure(o.kind == OutcomeKind::ValidConsensus && o.rounds_used == 2, || {
                format!("N={n} seed={seed}: {:?} in {} rounds", o.kind, o.rounds_used)
            })?;
            let v = o.final_value.unwrap();
            ensure(
                log.initial_honest_proposals
                    .iter()
                    .any(|p| format!("{p:.6}") == format!("{v:.6}")),
                || format!("N={n} seed={seed}: {v} not an initial proposal"),
            )?;
            valid += 1;
        }
    }
    Ok(format!("{valid}/75 valid in 2 rounds"))
}

fn byzantine_degradation() -> Check {
    let mut rows = Vec::new();
    for b in 0..=2u32 {
        let (mut valid, mut invalid) = (0, 0);
        for seed in 0..25u64 {
            let log = play(
                GameConfig::new(8 + b, b)
                    .with_profile(
                        PolicySpec::new("MeanStep").with_param("alpha", 0.5),
                        PolicySpec::new("Staller"),
                    )
                    .with_seed(seed),
            );
            match log.outcome.kind {
                OutcomeKind::ValidConsensus => valid += 1,
                OutcomeKind::InvalidConsensus => invalid += 1,
                _ => {}
            }
        }
        rows.push((b, valid, invalid));
    }
    let detail = rows
        .iter()
        .map(|(b, v, i)| format!("B={b}: valid {v}/25 invalid {i}"))
        .collect::<Vec<_>>()
        .join("; ");
    let monotone = rows.windows(2).all(|w| w[1].1 <= w[0].1);
    let no_invalid = rows.iter().all(|r| r.2 == 0);
    if monotone && no_invalid {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn brute_classify(initial: &[f64], finals: &[f64], quorum: bool) -> OutcomeKind {
    let text = |v: f64| format!("{v:.6}");
    if !quorum {
        OutcomeKind::NoConsensus
    } else if finals.iter().any(|f| text(*f) != text(finals[0])) {
        OutcomeKind::PrematureStop
    } else if initial.iter().any(|i| text(*i) == text(finals[0])) {
        OutcomeKind::ValidConsensus
    } else {
        OutcomeKind::InvalidConsensus
    }
}

fn classifier_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // Grid values plus sub-resolution nudges that never land on a rounding tie.
    let value = |rng: &mut ChaCha8Rng| {
        let base = rng.random_range(0..6) as f64 * 12.5;
        (base + [0.0, 2e-8, -2e-8, 4e-9][rng.random_range(0..4)]).max(0.0)
    };
    let mut counts = [0usize; 4];
    for i in 0..10_000 {
        let len = rng.random_range(1..=6);
        let initial: Vec<f64> = (0..len).map(|_| value(&mut rng)).collect();
        let finals: Vec<f64> = if rng.random_bool(0.5) {
            let v = value(&mut rng);
            vec![v; len]
        } else {
            (0..len).map(|_| value(&mut rng)).collect()
        };
        let quorum = rng.random_bool(0.75);
        let got = classify_outcome(&initial, &finals, quorum, 1, 6)
            .map_err(|e| e.to_string())?
            .kind;
        let want = brute_classify(&initial, &finals, quorum);
        ensure(got == want, || format!("instance {i}: {got:?} vs oracle {want:?}"))?;
        counts[OutcomeKind::ALL.iter().position(|k| *k == got).unwrap()] += 1;
    }
    ensure(counts.iter().all(|&c| c > 0), || {
        format!("kinds not all exercised: {counts:?}")
    })?;
    Ok(format!("10000 instances agree, per-kind counts {counts:?}"))
}

fn wilson() -> Check {
    let (lo, hi) = wilson_interval(0, 25, Z_95).map_err(|e| e.to_string())?;
    ensure(lo == 0.0 && (hi - 0.1332).abs() <= 0.001, || {
        format!("(0,25) -> ({lo}, {hi})")
    })?;
    let (lo, hi) = wilson_interval(25, 25, Z_95).map_err(|e| e.to_string())?;
    ensure(hi == 1.0 && (lo - 0.8668).abs() <= 0.001, || {
        format!("(25,25) -> ({lo}, {hi})")
    })?;
    for n in 1..=200u64 {
        let mut prev = (-1.0, -1.0);
        for k in 0..=n {
            let (lo, hi) = wilson_interval(k, n, Z_95).unwrap();
            ensure(lo >= prev.0 && hi >= prev.1, || format!("not monotone at n={n} k={k}"))?;
            prev = (lo, hi);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let trials = 20_000;
    let mut worst: f64 = 1.0;
    for p in [0.1, 0.5, 0.9] {
        let covered = (0..trials)
            .filter(|_| {
                let k = (0..25).filter(|_| rng.random_bool(p)).count() as u64;
                let (lo, hi) = wilson_interval(k, 25, Z_95).unwrap();
                lo <= p && p <= hi
            })
            .count();
        let coverage = covered as f64 / trials as f64;
        ensure(coverage >= 0.93, || format!("coverage {coverage} at p={p}"))?;
        worst = worst.min(coverage);
    }
    Ok(format!("reference values match; minimum simulated coverage {worst:.4}"))
}

fn determinism() -> Check {
    let mk = || {
        GameConfig::new(10, 3)
            .with_profile(PolicySpec::new("MeanStep"), PolicySpec::new("Oscillator"))
            .with_seed(4242)
    };
    let a = serde_json::to_vec_pretty(&play(mk())).unwrap();
    let b = serde_json::to_vec_pretty(&play(mk())).unwrap();
    ensure(a == b, || "two runs of the same config differ".into())?;
    let parsed: RunLog = serde_json::from_slice(&a).unwrap();
    ensure(serde_json::to_vec_pretty(&parsed).unwrap() == a, || {
        "log does not round-trip".into()
    })?;
    ensure(parsed.replay_outcome().ok().as_ref() == Some(&parsed.outcome), || {
        "replay disagrees".into()
    })?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for seed in 0..6u64 {
        let log = play(mk().with_seed(seed));
        report::write_log(&dir.path().join(format!("run_{seed}.json")), &log).map_err(|e| e.to_string())?;
    }
    let first = report::analyze_dir(dir.path()).map_err(|e| e.to_string())?;
    let second = report::analyze_dir(dir.path()).map_err(|e| e.to_string())?;
    ensure(first == second, || "analyze output changed between calls".into())?;
    Ok(format!(
        "{} byte log identical; analyze stable ({} bytes)",
        a.len(),
        first.len()
    ))
}

fn llm_pipeline() -> Check {
    // Proposal and vote queries are told apart by the schema name; agents
    // vote to stop from round 3 on (8 calls per round, sequential engine).
    let calls = Arc::new(AtomicUsize::new(0));
    let counter = calls.clone();
    let (transport, handle) = MockTransport::from_fn(move |body: &Value| -> Result<String, GatewayError> {
        let i = counter.fetch_add(1, Ordering::SeqCst);
        if body["response_format"]["json_schema"]["name"] == "vote_reply" {
            let decision = if i / 8 >= 2 { "vote" } else { "continue" };
            Ok(format!(r#"{{"decision": "{decision}"}}"#))
        } else {
            Ok(r#"{"proposal": 25, "justification": "middle of the range", "private_strategy": ""}"#.into())
        }
    });
    let gw = Arc::new(Gateway::with_transport(GatewayConfig::new("http://mock", "mock"), Box::new(transport)).unwrap());
    let mut config = GameConfig::new(4, 0)
        .with_profile(PolicySpec::new("LLM"), PolicySpec::new("LLM"))
        .with_seed(1);
    config.prompt_variant = PromptVariant::NoByzantineMentioned;
    let config = validate_config(config).unwrap();
    let policies = build_policies(&config, &LlmPolicies::new(gw.clone())).map_err(|e| e.to_string())?;
    let log = Engine::default()
        .run_game(config, &policies)
        .map_err(|e| e.to_string())?;
    let rounds = log.outcome.rounds_used as u64;
    ensure(log.outcome.kind.terminated() && rounds == 3, || {
        format!("game ended {:?}", log.outcome)
    })?;
    ensure(gw.call_count() == 2 * 4 * rounds, || {
        format!("{} calls for {rounds} rounds", gw.call_count())
    })?;
    let hits: usize = handle
        .requests()
        .iter()
        .flat_map(|r| r["messages"].as_array().cloned().unwrap_or_default())
        .map(|m| adversary_hits(m["content"].as_str().unwrap_or("")).len())
        .sum();
    ensure(hits == 0, || format!("{hits} adversary-vocabulary hits"))?;

    // One malformed reply, then good ones: the game recovers after one retry.
    let bad_once = Arc::new(AtomicUsize::new(0));
    let flag = bad_once.clone();
    let (transport, handle) = MockTransport::from_fn(move |body: &Value| -> Result<String, GatewayError> {
        if flag.fetch_add(1, Ordering::SeqCst) == 0 {
            return Ok("I think 25 is good.".into());
        }
        if body["response_format"]["json_schema"]["name"] == "vote_reply" {
            Ok(r#"{"decision": "vote"}"#.into())
        } else {
            Ok(r#"{"proposal": 25, "justification": "x"}"#.into())
        }
    });
    let gw = Arc::new(Gateway::with_transport(GatewayConfig::new("http://mock", "mock"), Box::new(transport)).unwrap());
    let config = validate_config(
        GameConfig::new(4, 0)
            .with_profile(PolicySpec::new("LLM"), PolicySpec::new("LLM"))
            .with_seed(2),
    )
    .unwrap();
    let policies = build_policies(&config, &LlmPolicies::new(gw.clone())).map_err(|e| e.to_string())?;
    let log = Engine::default()
        .run_game(config, &policies)
        .map_err(|e| e.to_string())?;
    ensure(log.error.is_none() && gw.call_count() == 9, || {
        format!("retry run: error {:?}, {} calls", log.error, gw.call_count())
    })?;
    let retried = handle.requests()[1].to_string();
    ensure(retried.contains("could not be used"), || {
        "retry lacks a correction message".into()
    })?;

    // Only malformed replies: retries exhaust into a policy failure.
    let (transport, _) = MockTransport::from_fn(|_: &Value| Ok("no json here".to_string()));
    let gw = Arc::new(Gateway::with_transport(GatewayConfig::new("http://mock", "mock"), Box::new(transport)).unwrap());
    let config = validate_config(
        GameConfig::new(4, 0)
            .with_profile(PolicySpec::new("LLM"), PolicySpec::new("LLM"))
            .with_seed(3),
    )
    .unwrap();
    let policies = build_policies(&config, &LlmPolicies::new(gw.clone())).map_err(|e| e.to_string())?;
    let log = Engine::default()
        .run_game(config, &policies)
        .map_err(|e| e.to_string())?;
    let err = log.error.clone().unwrap_or_default();
    ensure(
        err.contains("3 attempts") && log.outcome.kind == OutcomeKind::NoConsensus,
        || format!("exhaustion run: {err:?} {:?}", log.outcome.kind),
    )?;
    Ok(format!(
        "{rounds} rounds, {} calls, 0 hygiene hits, retry and failure paths exercised",
        2 * 4 * rounds
    ))
}

fn main() {
    let checks: [Criterion; 8] = [
        ("quorum oracle", Duration::from_secs(1), quorum_oracle),
        ("honest liveness", Duration::from_secs(5), honest_liveness),
        (
            "benign scripted reproduction",
            Duration::from_secs(10),
            benign_reproduction,
        ),
        (
            "byzantine liveness degradation",
            Duration::from_secs(30),
            byzantine_degradation,
        ),
        ("outcome classifier oracle", Duration::from_secs(5), classifier_oracle),
        ("wilson interval", Duration::from_secs(30), wilson),
        ("determinism and replay", Duration::from_secs(5), determinism),
        ("llm pipeline with mock gateway", Duration::from_secs(5), llm_pipeline),
    ];
    let mut failed = 0;
    for (name, budget, check) in checks {
        let started = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into())));
        let elapsed = started.elapsed();
        let result = match result {
            Ok(detail) if elapsed > budget => Err(format!("{detail} (over the {budget:?} budget)")),
            other => other,
        };
        match result {
            Ok(detail) => println!("PASS  {name:<32} {:>8.2?}  {detail}", elapsed),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name:<32} {:>8.2?}  {detail}", elapsed);
            }
        }
    }
    println!("\nacceptance: {} passed, {failed} failed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
