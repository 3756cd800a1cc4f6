//! Outcome-rate statistics over collections of run logs.

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::RunLog;
use crate::game::{OutcomeKind, PromptVariant};
use crate::scalar::Scalar;

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("invalid counts: {successes} successes out of {trials} trials")]
    InvalidCounts { successes: u64, trials: u64 },
    #[error("logs mix configurations: {0} and {1}")]
    MixedConfigs(String, String),
    #[error("no logs to aggregate")]
    Empty,
}

/// Wilson score interval for `successes` out of `trials`, clamped to [0, 1].
pub fn wilson_interval<F: Float>(successes: u64, trials: u64, z: F) -> Result<(F, F), MetricsError> {
    if trials == 0 || successes > trials {
        return Err(MetricsError::InvalidCounts { successes, trials });
    }
    let n = F::from(trials).expect("u64 fits a float");
    let p = F::from(successes).expect("u64 fits a float") / n;
    let z2 = z * z;
    let one = F::one();
    let two = one + one;
    let four = two + two;
    let denom = one + z2 / n;
    let center = (p + z2 / (two * n)) / denom;
    let half = (z / denom) * (p * (one - p) / n + z2 / (four * n * n)).sqrt();
    let low = if successes == 0 {
        F::zero()
    } else {
        (center - half).max(F::zero())
    };
    let high = if successes == trials {
        one
    } else {
        (center + half).min(one)
    };
    Ok((low, high))
}

/// Identifies which logs may be aggregated together.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConfigKey {
    pub model: String,
    pub n_agents: u32,
    pub n_byzantine: u32,
    pub variant: String,
}

impl ConfigKey {
    pub fn of<S: Scalar>(log: &RunLog<S>) -> Self {
        ConfigKey {
            model: log.config.model.clone(),
            n_agents: log.config.n_agents,
            n_byzantine: log.config.n_byzantine,
            variant: log.config.prompt_variant.as_str().to_string(),
        }
    }

    pub fn new(model: &str, n_agents: u32, n_byzantine: u32, variant: PromptVariant) -> Self {
        ConfigKey {
            model: model.to_string(),
            n_agents,
            n_byzantine,
            variant: variant.as_str().to_string(),
        }
    }

    /// File-name friendly form, e.g. `scripted_n8_b2_byzantine_may_exist`.
    pub fn slug(&self) -> String {
        let model: String = self
            .model
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                    c
                } else {
                    '-'
                }
            })
            .collect();
        format!("{}_n{}_b{}_{}", model, self.n_agents, self.n_byzantine, self.variant)
    }
}

impl std::fmt::Display for ConfigKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "model={} N={} B={} variant={}",
            self.model, self.n_agents, self.n_byzantine, self.variant
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateStats {
    pub count: u64,
    pub rate: f64,
    pub wilson_low: f64,
    pub wilson_high: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub mean: f64,
    pub median: f64,
    pub min: u32,
    pub max: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityStats {
    /// Mean over runs of the population std-dev of final honest values.
    pub final_value_spread: f64,
    /// Fraction of quorum-terminated runs whose final value (common value, or
    /// mean of honest finals) lies in the run's initial honest range.
    /// `None` when no run terminated.
    pub in_initial_range_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeStats {
    pub key: ConfigKey,
    pub n_runs: u64,
    pub valid: RateStats,
    pub invalid: RateStats,
    pub premature: RateStats,
    pub no_consensus: RateStats,
    /// Over quorum-terminated runs only; timeouts are excluded.
    pub rounds_to_termination: Option<RoundStats>,
    pub quality: QualityStats,
}

impl OutcomeStats {
    pub fn rate(&self, kind: OutcomeKind) -> &RateStats {
        match kind {
            OutcomeKind::ValidConsensus => &self.valid,
            OutcomeKind::InvalidConsensus => &self.invalid,
            OutcomeKind::PrematureStop => &self.premature,
            OutcomeKind::NoConsensus => &self.no_consensus,
        }
    }
}

fn rate_stats(count: u64, n: u64) -> RateStats {
    let (wilson_low, wilson_high) = wilson_interval(count, n, Z_95).expect("count <= n, n >= 1");
    RateStats {
        count,
        rate: count as f64 / n as f64,
        wilson_low,
        wilson_high,
    }
}

fn median_sorted(v: &[f64]) -> f64 {
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

fn std_dev(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Summarizes logs that share one [`ConfigKey`].
///
/// Every sum is taken over values sorted first, so the result does not
/// depend on the order of `logs`.
pub fn aggregate<S: Scalar>(logs: &[RunLog<S>]) -> Result<OutcomeStats, MetricsError> {
    let first = logs.first().ok_or(MetricsError::Empty)?;
    let key = ConfigKey::of(first);
    if let Some(other) = logs.iter().map(ConfigKey::of).find(|k| *k != key) {
        return Err(MetricsError::MixedConfigs(key.to_string(), other.to_string()));
    }
    let n = logs.len() as u64;
    let count = |kind| logs.iter().filter(|l| l.outcome.kind == kind).count() as u64;

    let mut rounds: Vec<f64> = logs
        .iter()
        .filter(|l| l.outcome.kind.terminated())
        .map(|l| l.outcome.rounds_used as f64)
        .collect();
    rounds.sort_by(f64::total_cmp);
    let rounds_to_termination = (!rounds.is_empty()).then(|| RoundStats {
        mean: rounds.iter().sum::<f64>() / rounds.len() as f64,
        median: median_sorted(&rounds),
        min: rounds[0] as u32,
        max: rounds[rounds.len() - 1] as u32,
    });

    let mut spreads: Vec<f64> = logs
        .iter()
        .map(|l| {
            let finals: Vec<f64> = l.final_honest_values().into_iter().map(Scalar::as_f64).collect();
            std_dev(&finals)
        })
        .collect();
    spreads.sort_by(f64::total_cmp);
    let final_value_spread = spreads.iter().sum::<f64>() / n as f64;

    let terminated: Vec<&RunLog<S>> = logs.iter().filter(|l| l.outcome.kind.terminated()).collect();
    let in_initial_range_rate = (!terminated.is_empty()).then(|| {
        let inside = terminated
            .iter()
            .filter(|l| {
                let init: Vec<f64> = l.initial_honest_proposals.iter().map(|v| v.as_f64()).collect();
                let lo = init.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = init.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let value = match l.outcome.final_value {
                    Some(v) => v.as_f64(),
                    None => {
                        let finals: Vec<f64> = l.final_honest_values().into_iter().map(Scalar::as_f64).collect();
                        finals.iter().sum::<f64>() / finals.len() as f64
                    }
                };
                let tol = 0.5 * 10f64.powi(-(l.config.value_precision as i32));
                value >= lo - tol && value <= hi + tol
            })
            .count();
        inside as f64 / terminated.len() as f64
    });

    Ok(OutcomeStats {
        key,
        n_runs: n,
        valid: rate_stats(count(OutcomeKind::ValidConsensus), n),
        invalid: rate_stats(count(OutcomeKind::InvalidConsensus), n),
        premature: rate_stats(count(OutcomeKind::PrematureStop), n),
        no_consensus: rate_stats(count(OutcomeKind::NoConsensus), n),
        rounds_to_termination,
        quality: QualityStats {
            final_value_spread,
            in_initial_range_rate,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_small_cases() {
        let (lo, hi) = wilson_interval(0, 1, Z_95).unwrap();
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0 && hi < 1.0);
        let (lo, hi) = wilson_interval(1, 1, Z_95).unwrap();
        assert_eq!(hi, 1.0);
        assert!(lo > 0.0);
        assert!(wilson_interval(3, 2, Z_95).is_err());
        assert!(wilson_interval(0, 0, Z_95).is_err());
    }

    #[test]
    fn wilson_f32_agrees_with_f64() {
        let (a, b) = wilson_interval(7u64, 25, 1.96f32).unwrap();
        let (c, d) = wilson_interval(7u64, 25, 1.96f64).unwrap();
        assert!((a as f64 - c).abs() < 1e-6 && (b as f64 - d).abs() < 1e-6);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median_sorted(&[1.0, 2.0, 10.0]), 2.0);
        assert_eq!(median_sorted(&[1.0, 2.0, 4.0, 10.0]), 3.0);
    }
}
