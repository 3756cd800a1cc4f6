//! On-disk formats: run-log files, the JSONL index, and the aggregate CSV.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use consensus_core::metrics::{aggregate, ConfigKey, OutcomeStats};
use consensus_core::RunLog;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::RunnerError;

pub const INDEX_FILE: &str = "index.jsonl";
pub const AGGREGATE_FILE: &str = "aggregate.csv";

pub const CSV_HEADER: [&str; 15] = [
    "model",
    "N",
    "B",
    "variant",
    "n_runs",
    "valid_rate",
    "valid_lo",
    "valid_hi",
    "invalid_rate",
    "premature_rate",
    "timeout_rate",
    "rounds_mean",
    "rounds_median",
    "spread_mean",
    "in_range_rate",
];

pub fn read_log(path: &Path) -> Result<RunLog, RunnerError> {
    let bytes = fs::read(path).map_err(|e| RunnerError::io(path, e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| RunnerError::Validation(format!("{}: not a run log: {e}", path.display())))
}

/// Writes `log` atomically (temp file + rename) so an interrupted sweep never
/// leaves a half-written run behind.
pub fn write_log(path: &Path, log: &RunLog) -> Result<(), RunnerError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| RunnerError::io(dir, e))?;
    }
    let tmp = path.with_extension("json.tmp");
    let mut bytes = serde_json::to_vec_pretty(log).expect("run logs serialize");
    bytes.push(b'\n');
    fs::write(&tmp, bytes).map_err(|e| RunnerError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| RunnerError::io(path, e))
}

/// All `*.json` run logs under `dir`, sorted by path.
pub fn collect_logs(dir: &Path) -> Result<Vec<(PathBuf, RunLog)>, RunnerError> {
    if !dir.is_dir() {
        return Err(RunnerError::Validation(format!("{} is not a directory", dir.display())));
    }
    let mut paths: Vec<PathBuf> = WalkDir::new(dir)
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file() && e.path().extension().is_some_and(|x| x == "json"))
        .map(|e| e.into_path())
        .collect();
    paths.sort();
    paths.into_iter().map(|p| read_log(&p).map(|log| (p, log))).collect()
}

/// One line of the JSONL index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub path: String,
    pub config_key: ConfigKey,
    pub seed: u64,
    pub outcome: String,
    pub rounds_used: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl IndexEntry {
    pub fn new(path: &Path, root: &Path, log: &RunLog) -> Self {
        let rel = path.strip_prefix(root).unwrap_or(path);
        IndexEntry {
            path: rel.to_string_lossy().replace('\\', "/"),
            config_key: ConfigKey::of(log),
            seed: log.seed,
            outcome: log.outcome.kind.as_str().to_string(),
            rounds_used: log.outcome.rounds_used,
            error: log.error.clone(),
        }
    }
}

pub fn write_index(path: &Path, entries: &[IndexEntry]) -> Result<(), RunnerError> {
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e).expect("index entries serialize");
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| RunnerError::io(path, e))
}

/// Aggregates per configuration key, in key order.
pub fn aggregate_by_key<'a>(logs: impl IntoIterator<Item = &'a RunLog>) -> Result<Vec<OutcomeStats>, RunnerError> {
    let mut groups: BTreeMap<ConfigKey, Vec<RunLog>> = BTreeMap::new();
    for log in logs {
        groups.entry(ConfigKey::of(log)).or_default().push(log.clone());
    }
    groups
        .values()
        .map(|g| aggregate(g).map_err(|e| RunnerError::Runtime(e.to_string())))
        .collect()
}

fn fixed(v: f64) -> String {
    format!("{v:.6}")
}

pub fn csv_row(s: &OutcomeStats) -> Vec<String> {
    let rounds = s.rounds_to_termination;
    vec![
        s.key.model.clone(),
        s.key.n_agents.to_string(),
        s.key.n_byzantine.to_string(),
        s.key.variant.clone(),
        s.n_runs.to_string(),
        fixed(s.valid.rate),
        fixed(s.valid.wilson_low),
        fixed(s.valid.wilson_high),
        fixed(s.invalid.rate),
        fixed(s.premature.rate),
        fixed(s.no_consensus.rate),
        rounds.map(|r| fixed(r.mean)).unwrap_or_default(),
        rounds.map(|r| fixed(r.median)).unwrap_or_default(),
        fixed(s.quality.final_value_spread),
        s.quality.in_initial_range_rate.map(fixed).unwrap_or_default(),
    ]
}

pub fn render_csv(stats: &[OutcomeStats]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for s in stats {
        w.write_record(csv_row(s)).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// Aggregate CSV for every run log under `dir`.
pub fn analyze_dir(dir: &Path) -> Result<Vec<u8>, RunnerError> {
    let logs = collect_logs(dir)?;
    if logs.is_empty() {
        return Err(RunnerError::Validation(format!("no run logs under {}", dir.display())));
    }
    let stats = aggregate_by_key(logs.iter().map(|(_, l)| l))?;
    Ok(render_csv(&stats))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), RunnerError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| RunnerError::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| RunnerError::io(path, e))?;
    f.write_all(bytes).map_err(|e| RunnerError::io(path, e))
}
