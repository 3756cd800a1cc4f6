//! Experiment grids: expansion into game configs, seed derivation, and
//! resumable execution.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use consensus_core::game::{GameConfig, PromptVariant, ValidatedConfig};
use consensus_core::metrics::{ConfigKey, OutcomeStats};
use consensus_core::policies::LLM_POLICY;
use consensus_core::{build_policies, seed, validate_config, Engine, PolicySpec, RunLog, ScriptedPolicies};
use consensus_llm::gateway::{Sampling, SchemaField};
use consensus_llm::{prompt::PROMPT_VERSION, Gateway, GatewayConfig, LlmPolicies};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::report::{self, IndexEntry, AGGREGATE_FILE, INDEX_FILE};
use crate::RunnerError;

/// Seed of run `run_index` of grid point `config_index`.
pub fn derive_seed(base_seed: u64, config_index: u64, run_index: u64) -> u64 {
    seed::mix(&[base_seed, config_index, run_index])
}

/// Policies for honest and Byzantine agents at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub honest: PolicySpec,
    pub byzantine: PolicySpec,
}

impl Profile {
    pub fn uses_llm(&self) -> bool {
        self.honest.name == LLM_POLICY || self.byzantine.name == LLM_POLICY
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    /// Total group sizes. Exactly one of `n_agents` / `n_honest` is given.
    #[serde(default)]
    pub n_agents: Vec<u32>,
    /// Honest counts; the group size is `n_honest + n_byzantine`.
    #[serde(default)]
    pub n_honest: Vec<u32>,
    pub n_byzantine: Vec<u32>,
    pub prompt_variant: Vec<PromptVariant>,
    pub model_name: Vec<String>,
    pub profile: Vec<Profile>,
}

/// Optional gateway settings; the endpoint falls back to `LLM_ENDPOINT` and
/// the model name comes from the grid.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GatewaySettings {
    #[serde(default)]
    pub endpoint_url: Option<String>,
    #[serde(default)]
    pub request_timeout_s: Option<f64>,
    #[serde(default)]
    pub max_concurrent_requests: Option<usize>,
    #[serde(default)]
    pub sampling: Option<Sampling>,
    #[serde(default)]
    pub schema_field: Option<SchemaField>,
    #[serde(default)]
    pub retry_limit: Option<u32>,
}

fn default_runs() -> u32 {
    25
}
fn default_max_rounds() -> u32 {
    50
}
fn default_value_max() -> f64 {
    50.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    #[serde(default)]
    pub name: String,
    pub grid: Grid,
    #[serde(default = "default_runs")]
    pub runs_per_config: u32,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: u32,
    #[serde(default)]
    pub value_min: f64,
    #[serde(default = "default_value_max")]
    pub value_max: f64,
    #[serde(default)]
    pub gateway: GatewaySettings,
}

/// One validated configuration of the grid.
#[derive(Debug, Clone)]
pub struct GridPoint {
    pub index: u64,
    pub key: ConfigKey,
    pub config: ValidatedConfig<f64>,
    pub uses_llm: bool,
}

impl SweepSpec {
    pub fn from_file(path: &Path) -> Result<Self, RunnerError> {
        let text = std::fs::read_to_string(path).map_err(|e| RunnerError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| RunnerError::Validation(format!("{}: invalid sweep file: {e}", path.display())))
    }

    /// Expands the grid in a fixed nesting order (model, variant, size,
    /// Byzantine count, profile) and validates every point.
    pub fn grid_points(&self) -> Result<Vec<GridPoint>, RunnerError> {
        if self.runs_per_config == 0 {
            return Err(RunnerError::Validation("runs_per_config must be at least 1".into()));
        }
        let g = &self.grid;
        let sizes: Vec<(bool, u32)> = match (g.n_agents.is_empty(), g.n_honest.is_empty()) {
            (false, true) => g.n_agents.iter().map(|&n| (false, n)).collect(),
            (true, false) => g.n_honest.iter().map(|&n| (true, n)).collect(),
            _ => {
                return Err(RunnerError::Validation(
                    "grid must list exactly one of n_agents or n_honest".into(),
                ))
            }
        };
        for (what, empty) in [
            ("n_byzantine", g.n_byzantine.is_empty()),
            ("prompt_variant", g.prompt_variant.is_empty()),
            ("model_name", g.model_name.is_empty()),
            ("profile", g.profile.is_empty()),
        ] {
            if empty {
                return Err(RunnerError::Validation(format!("grid.{what} is empty")));
            }
        }
        let mut points = Vec::new();
        let mut seen = HashSet::new();
        for model in &g.model_name {
            for &variant in &g.prompt_variant {
                for &(honest_count, size) in &sizes {
                    for &b in &g.n_byzantine {
                        for profile in &g.profile {
                            let n = if honest_count { size + b } else { size };
                            let mut config =
                                GameConfig::new(n, b).with_profile(profile.honest.clone(), profile.byzantine.clone());
                            config.max_rounds = self.max_rounds;
                            config.value_min = self.value_min;
                            config.value_max = self.value_max;
                            config.prompt_variant = variant;
                            config.model = model.clone();
                            let index = points.len() as u64;
                            let config = validate_config(config).map_err(|e| {
                                RunnerError::Validation(format!("grid point {index} (N={n}, B={b}): {e}"))
                            })?;
                            let key = ConfigKey::new(&config.model, n, b, variant);
                            if !seen.insert(key.clone()) {
                                return Err(RunnerError::Validation(format!(
                                    "grid produces {key} twice; give each profile its own model_name"
                                )));
                            }
                            points.push(GridPoint {
                                index,
                                key,
                                config,
                                uses_llm: profile.uses_llm(),
                            });
                        }
                    }
                }
            }
        }
        Ok(points)
    }

    fn gateway_config(&self, model: &str) -> Result<GatewayConfig, RunnerError> {
        let mut cfg = crate::gateway_config(model, self.gateway.endpoint_url.as_deref())?;
        let s = &self.gateway;
        if let Some(t) = s.request_timeout_s {
            cfg.request_timeout_s = t;
        }
        if let Some(m) = s.max_concurrent_requests {
            cfg.max_concurrent_requests = m;
        }
        if let Some(sampling) = s.sampling {
            cfg.sampling = sampling;
        }
        if let Some(f) = s.schema_field {
            cfg.schema_field = f;
        }
        cfg.validate().map_err(|e| RunnerError::Validation(e.to_string()))?;
        Ok(cfg)
    }
}

pub fn run_path(output_dir: &Path, key: &ConfigKey, run_index: u32) -> PathBuf {
    output_dir
        .join("runs")
        .join(key.slug())
        .join(format!("run_{run_index:03}.json"))
}

#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    pub jobs: usize,
    pub quiet: bool,
}

#[derive(Debug, Clone, Default)]
pub struct SweepReport {
    pub executed: usize,
    pub skipped: usize,
    /// Runs that could not produce a log at all, with the reason.
    pub failures: Vec<(PathBuf, String)>,
    /// Runs whose log records an aborted game (policy failure).
    pub aborted: usize,
    pub stats: Vec<OutcomeStats>,
}

struct Task<'a> {
    point: &'a GridPoint,
    run_index: u32,
    seed: u64,
    path: PathBuf,
}

fn is_complete(path: &Path, seed: u64) -> bool {
    report::read_log(path).is_ok_and(|log| log.seed == seed)
}

/// Runs every missing game of the sweep, then rewrites the index and the
/// aggregate CSV from all run files of the grid.
pub fn run_sweep(spec: &SweepSpec, output_dir: &Path, options: &SweepOptions) -> Result<SweepReport, RunnerError> {
    let points = spec.grid_points()?;

    let mut gateways: BTreeMap<String, Arc<Gateway>> = BTreeMap::new();
    for p in points.iter().filter(|p| p.uses_llm) {
        if !gateways.contains_key(&p.config.model) {
            let cfg = spec.gateway_config(&p.config.model)?;
            let gw = Gateway::http(cfg).map_err(|e| RunnerError::Validation(e.to_string()))?;
            gateways.insert(p.config.model.clone(), Arc::new(gw));
        }
    }

    std::fs::create_dir_all(output_dir).map_err(|e| RunnerError::io(output_dir, e))?;
    let mut tasks = Vec::new();
    let mut skipped = 0;
    for p in &points {
        for r in 0..spec.runs_per_config {
            let seed = derive_seed(spec.base_seed, p.index, r as u64);
            let path = run_path(output_dir, &p.key, r);
            if is_complete(&path, seed) {
                skipped += 1;
            } else {
                tasks.push(Task {
                    point: p,
                    run_index: r,
                    seed,
                    path,
                });
            }
        }
    }

    let total = tasks.len();
    let run_one = |task: &Task<'_>| -> Result<RunLog, String> {
        let mut config = (*task.point.config).clone();
        config.seed = task.seed;
        let config = validate_config(config).map_err(|e| e.to_string())?;
        let mut provenance = BTreeMap::new();
        provenance.insert("sweep".to_string(), spec.name.clone());
        provenance.insert("config_index".to_string(), task.point.index.to_string());
        provenance.insert("run_index".to_string(), task.run_index.to_string());
        let policies = match gateways.get(&task.point.config.model).filter(|_| task.point.uses_llm) {
            Some(gw) => {
                let mut factory = LlmPolicies::new(gw.clone());
                if let Some(r) = spec.gateway.retry_limit {
                    factory.retry_limit = r;
                }
                let gc = gw.config();
                provenance.insert("prompt_version".into(), PROMPT_VERSION.into());
                provenance.insert("gateway_model".into(), gc.model_name.clone());
                provenance.insert("temperature".into(), gc.sampling.temperature.to_string());
                provenance.insert("max_tokens".into(), gc.sampling.max_tokens.to_string());
                provenance.insert("retry_limit".into(), factory.retry_limit.to_string());
                build_policies(&config, &factory)
            }
            None => build_policies(&config, &ScriptedPolicies),
        }
        .map_err(|e| e.to_string())?;
        let mut log = Engine::default()
            .record_timing(true)
            .run_game(config, &policies)
            .map_err(|e| e.to_string())?;
        log.provenance.extend(provenance);
        Ok(log)
    };

    let execute = || -> Vec<(PathBuf, Result<bool, String>)> {
        tasks
            .par_iter()
            .map(|task| {
                let result = run_one(task).and_then(|log| {
                    report::write_log(&task.path, &log).map_err(|e| e.to_string())?;
                    Ok(log.error.is_some())
                });
                if !options.quiet {
                    match &result {
                        Ok(_) => eprintln!("done {} run {}", task.point.key, task.run_index),
                        Err(e) => eprintln!("FAILED {} run {}: {e}", task.point.key, task.run_index),
                    }
                }
                (task.path.clone(), result)
            })
            .collect()
    };
    let results = if options.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(options.jobs)
            .build()
            .map_err(|e| RunnerError::Runtime(e.to_string()))?
            .install(execute)
    } else {
        execute()
    };

    let mut report = SweepReport {
        skipped,
        ..Default::default()
    };
    for (path, r) in results {
        match r {
            Ok(aborted) => {
                report.executed += 1;
                report.aborted += aborted as usize;
            }
            Err(e) => report.failures.push((path, e)),
        }
    }
    debug_assert_eq!(report.executed + report.failures.len(), total);

    let mut entries = Vec::new();
    let mut logs = Vec::new();
    for p in &points {
        for r in 0..spec.runs_per_config {
            let path = run_path(output_dir, &p.key, r);
            if let Ok(log) = report::read_log(&path) {
                entries.push(IndexEntry::new(&path, output_dir, &log));
                logs.push(log);
            }
        }
    }
    report::write_index(&output_dir.join(INDEX_FILE), &entries)?;
    report.stats = report::aggregate_by_key(&logs)?;
    report::write_bytes(&output_dir.join(AGGREGATE_FILE), &report::render_csv(&report.stats))?;
    Ok(report)
}
