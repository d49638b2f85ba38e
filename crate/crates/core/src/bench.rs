//! Benchmark harness: runs every (instance, seed, config) combination and
//! aggregates with shifted geometric means relative to a baseline config.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::mipsearch::{solve, Event, NodeAction, SolveConfig, SolveStatus};
use crate::mps::read_mps;

pub const TIME_SHIFT: f64 = 1.0;
pub const NODE_SHIFT: f64 = 100.0;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("no run of config `{config}` for instance `{instance}` with seed {seed}")]
    MissingPair { config: String, instance: String, seed: u64 },
    #[error("unknown baseline config `{0}`")]
    UnknownBaseline(String),
    #[error("invalid bench configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub name: String,
    pub solve: SolveConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRow {
    pub instance: String,
    pub seed: u64,
    pub config: String,
    pub status: String,
    pub time: f64,
    pub nodes: u64,
    pub objective: Option<f64>,
    /// Hash of the branching decisions, used to tell affected instances.
    pub path_hash: String,
    pub error: Option<String>,
}

impl RunRow {
    pub fn solved(&self) -> bool {
        self.status == "optimal" || self.status == "infeasible"
    }

    fn key(&self) -> (String, u64) {
        (self.instance.clone(), self.seed)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Suite {
    pub rows: Vec<RunRow>,
    pub warnings: Vec<String>,
}

/// Hash of the (node, variable, value) sequence of branching events.
pub fn branching_hash(events: &[Event]) -> u64 {
    let mut h = DefaultHasher::new();
    for e in events.iter().filter(|e| e.action == NodeAction::Branch) {
        e.node.hash(&mut h);
        if let Some(b) = e.branch {
            b.var.hash(&mut h);
            b.value.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

fn status_name(status: SolveStatus) -> String {
    serde_json::to_value(status)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Runs all combinations sequentially. Failing runs become rows with status
/// `error`; only an unreadable directory aborts the suite.
pub fn run_suite(dir: &Path, configs: &[BenchConfig], seeds: &[u64]) -> Result<Suite, BenchError> {
    if configs.is_empty() {
        return Err(BenchError::Config("at least one config is needed".into()));
    }
    if seeds.is_empty() {
        return Err(BenchError::Config("at least one seed is needed".into()));
    }
    let io = |source| BenchError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .is_some_and(|x| x.eq_ignore_ascii_case("mps"))
        })
        .collect();
    files.sort();
    let mut suite = Suite::default();
    if files.is_empty() {
        suite.warnings.push(format!("no .mps files in {}", dir.display()));
        return Ok(suite);
    }
    for file in &files {
        let instance_name = file
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let parsed = read_mps(file);
        for &seed in seeds {
            for cfg in configs {
                let mut row = RunRow {
                    instance: instance_name.clone(),
                    seed,
                    config: cfg.name.clone(),
                    status: "error".into(),
                    time: 0.0,
                    nodes: 0,
                    objective: None,
                    path_hash: String::new(),
                    error: None,
                };
                match &parsed {
                    Err(e) => row.error = Some(e.to_string()),
                    Ok((inst, diag)) => {
                        let mut solve_cfg = cfg.solve.clone();
                        solve_cfg.rapid.base_seed = seed;
                        let started = Instant::now();
                        match solve(inst, &solve_cfg) {
                            Err(e) => row.error = Some(e.to_string()),
                            Ok(res) => {
                                row.time = started.elapsed().as_secs_f64();
                                if res.status == SolveStatus::TimeLimit {
                                    row.time = solve_cfg.time_limit.unwrap_or(row.time);
                                }
                                row.status = status_name(res.status);
                                row.nodes = res.stats.nodes;
                                let sign = if diag.maximize { -1.0 } else { 1.0 };
                                row.objective = res.objective().map(|v| sign * v);
                                row.path_hash = format!("{:016x}", branching_hash(&res.events));
                            }
                        }
                    }
                }
                suite.rows.push(row);
            }
        }
    }
    Ok(suite)
}

/// `exp(mean(ln(v + shift))) − shift`; 0 for an empty slice.
pub fn shifted_geomean(values: &[f64], shift: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mean = values.iter().map(|v| (v + shift).ln()).sum::<f64>() / values.len() as f64;
    mean.exp() - shift
}

/// Splits the (instance, seed) keys into those whose branching path
/// differs between the two row sets and those whose path is the same.
pub fn affected_split(
    baseline: &[RunRow],
    treatment: &[RunRow],
) -> Result<(Vec<(String, u64)>, Vec<(String, u64)>), BenchError> {
    let base: BTreeMap<(String, u64), &RunRow> = baseline.iter().map(|r| (r.key(), r)).collect();
    let treat: BTreeMap<(String, u64), &RunRow> = treatment.iter().map(|r| (r.key(), r)).collect();
    let missing = |(instance, seed): (String, u64), rows: &[RunRow]| BenchError::MissingPair {
        config: rows.first().map(|r| r.config.clone()).unwrap_or_default(),
        instance,
        seed,
    };
    if let Some(k) = treat.keys().find(|k| !base.contains_key(*k)) {
        return Err(missing(k.clone(), baseline));
    }
    if let Some(k) = base.keys().find(|k| !treat.contains_key(*k)) {
        return Err(missing(k.clone(), treatment));
    }
    let (mut affected, mut unaffected) = (Vec::new(), Vec::new());
    for (k, b) in &base {
        if treat[k].path_hash != b.path_hash {
            affected.push(k.clone());
        } else {
            unaffected.push(k.clone());
        }
    }
    Ok((affected, unaffected))
}

/// Linear-interpolation quartiles (25%, 50%, 75%).
pub fn quartiles(values: &[f64]) -> [f64; 3] {
    if values.is_empty() {
        return [0.0; 3];
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let at = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    [at(0.25), at(0.5), at(0.75)]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    /// `all`, `affected` or `unaffected`.
    pub group: String,
    pub config: String,
    pub runs: usize,
    pub solved: usize,
    pub time: f64,
    pub nodes: f64,
    pub time_q: f64,
    pub nodes_q: f64,
    pub time_quartiles: [f64; 3],
    pub nodes_quartiles: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub baseline: String,
    pub rows: Vec<SummaryRow>,
}

fn summarize(group: &str, config: &str, rows: &[&RunRow], base: &[&RunRow]) -> SummaryRow {
    let times: Vec<f64> = rows.iter().map(|r| r.time).collect();
    let nodes: Vec<f64> = rows.iter().map(|r| r.nodes as f64).collect();
    let time = shifted_geomean(&times, TIME_SHIFT);
    let node = shifted_geomean(&nodes, NODE_SHIFT);
    let base_time = shifted_geomean(&base.iter().map(|r| r.time).collect::<Vec<_>>(), TIME_SHIFT);
    let base_nodes = shifted_geomean(&base.iter().map(|r| r.nodes as f64).collect::<Vec<_>>(), NODE_SHIFT);
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else if a > 0.0 { f64::INFINITY } else { 1.0 };
    SummaryRow {
        group: group.to_string(),
        config: config.to_string(),
        runs: rows.len(),
        solved: rows.iter().filter(|r| r.solved()).count(),
        time,
        nodes: node,
        time_q: ratio(time, base_time),
        nodes_q: ratio(node, base_nodes),
        time_quartiles: quartiles(&times),
        nodes_quartiles: quartiles(&nodes),
    }
}

impl Report {
    /// One `all` row per config; every other config also gets `affected`
    /// and `unaffected` rows against the baseline.
    pub fn build(rows: &[RunRow], baseline: &str) -> Result<Report, BenchError> {
        let configs: Vec<String> = {
            let mut seen = BTreeSet::new();
            rows.iter()
                .filter(|r| seen.insert(r.config.clone()))
                .map(|r| r.config.clone())
                .collect()
        };
        if !rows.is_empty() && !configs.iter().any(|c| c == baseline) {
            return Err(BenchError::UnknownBaseline(baseline.to_string()));
        }
        let of = |c: &str| -> Vec<RunRow> { rows.iter().filter(|r| r.config == c).cloned().collect() };
        let base_rows = of(baseline);
        let mut out = Vec::new();
        for c in &configs {
            let mine = of(c);
            let all: Vec<&RunRow> = mine.iter().collect();
            let base_all: Vec<&RunRow> = base_rows.iter().collect();
            out.push(summarize("all", c, &all, &base_all));
            if c == baseline {
                continue;
            }
            let (affected, unaffected) = affected_split(&base_rows, &mine)?;
            for (group, keys) in [("affected", affected), ("unaffected", unaffected)] {
                let keys: BTreeSet<(String, u64)> = keys.into_iter().collect();
                let pick = |rs: &[RunRow]| -> Vec<RunRow> { rs.iter().filter(|r| keys.contains(&r.key())).cloned().collect() };
                let (m, b) = (pick(&mine), pick(&base_rows));
                out.push(summarize(group, c, &m.iter().collect::<Vec<_>>(), &b.iter().collect::<Vec<_>>()));
            }
        }
        Ok(Report {
            baseline: baseline.to_string(),
            rows: out,
        })
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "baseline: {}\n", self.baseline);
        s.push_str("| group | config | runs | solved | time | nodes | time_Q | nodes_Q | time q1/med/q3 | nodes q1/med/q3 |\n");
        s.push_str("|---|---|---:|---:|---:|---:|---:|---:|---|---|\n");
        for r in &self.rows {
            let q = |v: [f64; 3], p: usize| format!("{:.*}/{:.*}/{:.*}", p, v[0], p, v[1], p, v[2]);
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {:.3} | {:.1} | {:.3} | {:.3} | {} | {} |",
                r.group,
                r.config,
                r.runs,
                r.solved,
                r.time,
                r.nodes,
                r.time_q,
                r.nodes_q,
                q(r.time_quartiles, 3),
                q(r.nodes_quartiles, 1)
            );
        }
        s
    }

    pub fn to_csv(&self) -> Result<String, BenchError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "group", "config", "runs", "solved", "time", "nodes", "time_Q", "nodes_Q", "time_q1", "time_med", "time_q3",
            "nodes_q1", "nodes_med", "nodes_q3",
        ])?;
        for r in &self.rows {
            let mut rec = vec![
                r.group.clone(),
                r.config.clone(),
                r.runs.to_string(),
                r.solved.to_string(),
                r.time.to_string(),
                r.nodes.to_string(),
                r.time_q.to_string(),
                r.nodes_q.to_string(),
            ];
            rec.extend(r.time_quartiles.iter().map(f64::to_string));
            rec.extend(r.nodes_quartiles.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        csv_string(w)
    }
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String, BenchError> {
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

/// Per-run rows as CSV.
pub fn rows_to_csv(rows: &[RunRow]) -> Result<String, BenchError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["instance", "seed", "config", "status", "time", "nodes", "objective", "path_hash", "error"])?;
    for r in rows {
        w.write_record([
            r.instance.clone(),
            r.seed.to_string(),
            r.config.clone(),
            r.status.clone(),
            r.time.to_string(),
            r.nodes.to_string(),
            r.objective.map(|v| v.to_string()).unwrap_or_default(),
            r.path_hash.clone(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    csv_string(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(instance: &str, seed: u64, config: &str, hash: &str, time: f64, nodes: u64) -> RunRow {
        RunRow {
            instance: instance.into(),
            seed,
            config: config.into(),
            status: "optimal".into(),
            time,
            nodes,
            objective: Some(0.0),
            path_hash: hash.into(),
            error: None,
        }
    }

    #[test]
    fn geomean_cases() {
        assert!((shifted_geomean(&[7.0, 7.0, 7.0], 1.0) - 7.0).abs() < 1e-12);
        assert_eq!(shifted_geomean(&[0.0, 0.0], 1.0), 0.0);
        // sqrt(11 · 1001) − 1
        assert!((shifted_geomean(&[10.0, 1000.0], 1.0) - 103.933).abs() < 0.01);
    }

    #[test]
    fn split_cases() {
        let base = vec![row("a", 0, "d", "1", 1.0, 1), row("b", 0, "d", "2", 1.0, 1)];
        let same = vec![row("a", 0, "r", "1", 1.0, 1), row("b", 0, "r", "2", 1.0, 1)];
        let (aff, un) = affected_split(&base, &same).unwrap();
        assert!(aff.is_empty());
        assert_eq!(un.len(), 2);
        let diff = vec![row("a", 0, "r", "9", 1.0, 1), row("b", 0, "r", "2", 1.0, 1)];
        let (aff, _) = affected_split(&base, &diff).unwrap();
        assert_eq!(aff, vec![("a".to_string(), 0)]);
        let extra = vec![row("a", 0, "r", "1", 1.0, 1), row("c", 0, "r", "2", 1.0, 1)];
        assert!(matches!(affected_split(&base, &extra), Err(BenchError::MissingPair { .. })));
    }

    #[test]
    fn report_layout() {
        let rows = vec![
            row("a", 0, "d", "1", 2.0, 10),
            row("a", 0, "r", "2", 1.0, 5),
            row("b", 0, "d", "3", 1.0, 10),
            row("b", 0, "r", "3", 1.0, 10),
        ];
        let rep = Report::build(&rows, "d").unwrap();
        assert_eq!(rep.rows.len(), 4);
        assert_eq!(rep.rows[0].time_q, 1.0);
        let affected = rep.rows.iter().find(|r| r.group == "affected").unwrap();
        assert_eq!(affected.runs, 1);
        assert!(affected.time_q < 1.0);
        let md = rep.to_markdown();
        assert!(md.contains("time_Q") && md.contains("nodes_Q"));
        assert_eq!(rep.to_csv().unwrap().lines().count(), 5);
        assert!(matches!(Report::build(&rows, "zz"), Err(BenchError::UnknownBaseline(_))));
    }

    #[test]
    fn quartile_values() {
        assert_eq!(quartiles(&[1.0, 2.0, 3.0, 4.0, 5.0]), [2.0, 3.0, 4.0]);
    }

    #[test]
    fn empty_dir_warns() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = BenchConfig {
            name: "d".into(),
            solve: SolveConfig::default(),
        };
        let suite = run_suite(dir.path(), &[cfg], &[0]).unwrap();
        assert!(suite.rows.is_empty());
        assert_eq!(suite.warnings.len(), 1);
    }
}
