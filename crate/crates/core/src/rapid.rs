//! Rapid Learning control: when to run the CP search inside the tree search
//! and how its results are handed back.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conflict::{LearnedConstraint, Scope};
use crate::cpsearch::{node_limit_from_iters, CpConfig, CpError, CpOutcome, CpSearch, CpStatus};
use crate::lp::DegeneracyInfo;
use crate::mipsearch::SearchStats;
use crate::model::{classify, BoundBox, Instance, Side};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    DualBound,
    Leaves,
    Degeneracy,
    Obj,
    NSols,
    SbLps,
}

impl Criterion {
    pub const ALL: [Criterion; 6] = [
        Criterion::DualBound,
        Criterion::Leaves,
        Criterion::Degeneracy,
        Criterion::Obj,
        Criterion::NSols,
        Criterion::SbLps,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::DualBound => "dualbound",
            Criterion::Leaves => "leaves",
            Criterion::Degeneracy => "degeneracy",
            Criterion::Obj => "obj",
            Criterion::NSols => "nsols",
            Criterion::SbLps => "sblps",
        }
    }

    /// Criteria that are also consulted at the root node.
    pub fn applies_at_root(self) -> bool {
        matches!(self, Criterion::Degeneracy | Criterion::Obj | Criterion::NSols)
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = RapidConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.name() == s.trim())
            .ok_or_else(|| RapidConfigError::UnknownCriterion(s.to_string()))
    }
}

/// Parses a comma separated criterion list; an empty string is the empty set.
pub fn parse_criteria(list: &str) -> Result<BTreeSet<Criterion>, RapidConfigError> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RapidMode {
    Off,
    Root,
    Local,
}

impl FromStr for RapidMode {
    type Err = RapidConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" => Ok(RapidMode::Off),
            "root" => Ok(RapidMode::Root),
            "local" => Ok(RapidMode::Local),
            other => Err(RapidConfigError::UnknownMode(other.to_string())),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RapidConfigError {
    #[error("unknown criterion `{0}`")]
    UnknownCriterion(String),
    #[error("unknown rapid learning mode `{0}`")]
    UnknownMode(String),
    #[error("frequency f must be a positive integer")]
    Frequency,
    #[error("frequency base beta must be a finite number > 1, got {0}")]
    Beta(f64),
    #[error("threshold `{0}` must be positive")]
    Threshold(&'static str),
    #[error("max_conflict_frac must lie in (0, 1], got {0}")]
    ConflictFraction(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RapidConfig {
    pub mode: RapidMode,
    pub criteria: BTreeSet<Criterion>,
    pub f: u64,
    pub beta: f64,
    pub max_transferred_conflicts: usize,
    pub ratio_threshold: f64,
    pub degeneracy_share_threshold: f64,
    pub face_ratio_threshold: f64,
    pub base_seed: u64,
    /// Unfixed objective variables tolerated by the obj criterion.
    pub obj_extra_support: usize,
    pub max_conflict_frac: f64,
}

impl Default for RapidConfig {
    fn default() -> Self {
        RapidConfig {
            mode: RapidMode::Local,
            criteria: BTreeSet::from([Criterion::Degeneracy]),
            f: 5,
            beta: 4.0,
            max_transferred_conflicts: 10,
            ratio_threshold: 10.0,
            degeneracy_share_threshold: 0.80,
            face_ratio_threshold: 2.0,
            base_seed: 0,
            obj_extra_support: 0,
            max_conflict_frac: 0.05,
        }
    }
}

impl RapidConfig {
    pub fn off() -> Self {
        RapidConfig {
            mode: RapidMode::Off,
            ..RapidConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), RapidConfigError> {
        if self.f == 0 {
            return Err(RapidConfigError::Frequency);
        }
        if !(self.beta.is_finite() && self.beta > 1.0) {
            return Err(RapidConfigError::Beta(self.beta));
        }
        for (name, v) in [
            ("ratio_threshold", self.ratio_threshold),
            ("degeneracy_share_threshold", self.degeneracy_share_threshold),
            ("face_ratio_threshold", self.face_ratio_threshold),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(RapidConfigError::Threshold(name));
            }
        }
        if !(self.max_conflict_frac > 0.0 && self.max_conflict_frac <= 1.0) {
            return Err(RapidConfigError::ConflictFraction(self.max_conflict_frac));
        }
        Ok(())
    }
}

/// True iff `depth` is 0 or `f·β^k` for an integer `k ≥ 0`.
///
/// Integer bases are checked in exact integer arithmetic. Other bases walk
/// the sequence `f, fβ, fβ², …` and accept only terms that are integers.
pub fn is_rl_depth(depth: u64, f: u64, beta: f64) -> bool {
    if depth == 0 {
        return true;
    }
    if f == 0 || !beta.is_finite() || beta <= 1.0 {
        return false;
    }
    if beta.fract() == 0.0 && beta < u64::MAX as f64 {
        let beta = beta as u64;
        let mut term = f;
        loop {
            if term == depth {
                return true;
            }
            if term > depth {
                return false;
            }
            match term.checked_mul(beta) {
                Some(t) => term = t,
                None => return false,
            }
        }
    }
    let mut term = f as f64;
    let target = depth as f64;
    while term <= target + 0.5 {
        if (term - term.round()).abs() <= 1e-9 * term.max(1.0) && term.round() == target {
            return true;
        }
        term *= beta;
    }
    false
}

/// Inputs to the six criteria at one node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriterionInputs {
    pub dual_bound: f64,
    pub root_dual_bound: f64,
    pub leaves_infeasible: u64,
    pub leaves_cutoff: u64,
    pub degeneracy: DegeneracyInfo,
    /// Variables with a nonzero objective coefficient that are not fixed.
    pub objective_support: usize,
    pub n_solutions: u64,
    pub sb_no_improvement: u64,
    pub sb_objective_changed: u64,
}

impl CriterionInputs {
    pub fn gather(stats: &SearchStats, instance: &Instance, bounds: &BoundBox, degeneracy: DegeneracyInfo) -> Self {
        CriterionInputs {
            dual_bound: stats.dual_bound,
            root_dual_bound: stats.root_dual_bound,
            leaves_infeasible: stats.leaves_infeasible,
            leaves_cutoff: stats.leaves_cutoff,
            degeneracy,
            objective_support: objective_support(instance, bounds),
            n_solutions: stats.n_solutions,
            sb_no_improvement: stats.sb.no_improvement,
            sb_objective_changed: stats.sb.objective_changed,
        }
    }
}

pub fn objective_support(instance: &Instance, bounds: &BoundBox) -> usize {
    instance
        .objective()
        .iter()
        .enumerate()
        .filter(|&(j, &c)| c != 0.0 && !bounds.is_fixed(j))
        .count()
}

/// Ratio with a zero denominator read as +∞ (or 0 when both are zero).
fn count_ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        if num == 0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriterionReport {
    pub dual_bound_delta: f64,
    pub leaf_ratio: f64,
    pub degenerate_share: f64,
    pub face_ratio: f64,
    pub objective_support: usize,
    pub n_solutions: u64,
    pub sb_ratio: f64,
    fired: [bool; 6],
}

impl CriterionReport {
    pub fn fired(&self, c: Criterion) -> bool {
        self.fired[c.index()]
    }

    pub fn fired_set(&self) -> impl Iterator<Item = Criterion> + '_ {
        Criterion::ALL.into_iter().filter(|c| self.fired(*c))
    }
}

/// Evaluates every criterion, enabled or not.
pub fn evaluate_criteria(inputs: &CriterionInputs, config: &RapidConfig) -> CriterionReport {
    let t = config.ratio_threshold;
    let delta = inputs.dual_bound - inputs.root_dual_bound;
    let share = inputs.degeneracy.degenerate_share;
    let face = inputs.degeneracy.face_var_constraint_ratio;
    let sb_total = inputs.sb_no_improvement + inputs.sb_objective_changed;
    let mut fired = [false; 6];
    fired[Criterion::DualBound.index()] = delta.abs() <= 1e-9 || inputs.dual_bound == inputs.root_dual_bound;
    fired[Criterion::Leaves.index()] = inputs.leaves_infeasible as f64 > t * inputs.leaves_cutoff as f64;
    fired[Criterion::Degeneracy.index()] =
        share > config.degeneracy_share_threshold || face > config.face_ratio_threshold;
    fired[Criterion::Obj.index()] = inputs.objective_support <= config.obj_extra_support;
    fired[Criterion::NSols.index()] = inputs.n_solutions == 0;
    fired[Criterion::SbLps.index()] =
        sb_total >= 1 && inputs.sb_no_improvement as f64 > t * inputs.sb_objective_changed as f64;
    CriterionReport {
        dual_bound_delta: delta,
        leaf_ratio: count_ratio(inputs.leaves_infeasible, inputs.leaves_cutoff),
        degenerate_share: share,
        face_ratio: face,
        objective_support: inputs.objective_support,
        n_solutions: inputs.n_solutions,
        sb_ratio: count_ratio(inputs.sb_no_improvement, inputs.sb_objective_changed),
        fired,
    }
}

/// Whether the CP search should run at this node, and which enabled
/// criteria fired.
pub fn decide(report: &CriterionReport, depth: u64, at_root: bool, config: &RapidConfig) -> (bool, Vec<Criterion>) {
    let allowed = match config.mode {
        RapidMode::Off => false,
        RapidMode::Root => at_root,
        RapidMode::Local => true,
    };
    let fired: Vec<Criterion> = config
        .criteria
        .iter()
        .copied()
        .filter(|c| report.fired(*c) && (!at_root || c.applies_at_root()))
        .collect();
    let run = allowed && is_rl_depth(depth, config.f, config.beta) && !fired.is_empty();
    (run, fired)
}

/// The node a CP search is run on.
pub struct NodeScope<'a> {
    pub id: usize,
    pub depth: u64,
    pub at_root: bool,
    pub bounds: &'a BoundBox,
    /// Constraints valid inside the node box (global and inherited local).
    pub constraints: Vec<LearnedConstraint>,
}

/// Runs the CP search on the node box if the schedule and criteria allow it.
pub fn maybe_run(
    node: &NodeScope<'_>,
    report: &CriterionReport,
    stats: &SearchStats,
    instance: &Instance,
    config: &RapidConfig,
    record_traces: bool,
) -> Result<Option<CpOutcome>, CpError> {
    if !classify(instance).is_pure_integer() {
        return Ok(None);
    }
    let (run, _) = decide(report, node.depth, node.at_root, config);
    if !run {
        return Ok(None);
    }
    let cp = CpConfig {
        node_limit: node_limit_from_iters(stats.iter_lp),
        max_conflict_frac: config.max_conflict_frac,
        seed: config.base_seed ^ node.id as u64,
        incumbent_bound: stats.incumbent_value(),
        record_traces,
    };
    CpSearch::new(instance, node.bounds, cp)
        .with_constraints(node.constraints.iter().cloned())
        .with_stats(stats.inference.clone())
        .run()
        .map(Some)
}

#[derive(Debug, Error, Clone, PartialEq, Serialize, Deserialize)]
pub enum TransferError {
    #[error("CP solution rejected: violates the original instance")]
    SolutionRejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolutionTransfer {
    None,
    Installed(f64),
    NotImproving(f64),
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSummary {
    pub node: usize,
    pub cp_nodes: u64,
    pub cp_status: CpStatus,
    pub conflicts_found: usize,
    pub conflicts_attached: usize,
    pub linear_attached: usize,
    pub bounds_tightened: usize,
    pub solution: SolutionTransfer,
    /// The node is done: CP proved optimality or infeasibility for it.
    pub finalized: bool,
}

/// What the tree search has to apply after a transfer.
#[derive(Debug, Clone, PartialEq)]
pub struct Transfer {
    pub constraints: Vec<LearnedConstraint>,
    pub tightenings: Vec<(usize, Side, f64)>,
    pub summary: TransferSummary,
    pub error: Option<TransferError>,
}

/// Hands a CP outcome back to the tree search.
///
/// Conflicts with a linear form come first, then shorter ones; at most
/// `max_transferred_conflicts` are kept, scoped to the node (global at the
/// root). The solution is verified against the original instance before it
/// becomes the incumbent. Inference statistics are merged into `stats`.
pub fn transfer(
    outcome: CpOutcome,
    node: &NodeScope<'_>,
    instance: &Instance,
    stats: &mut SearchStats,
    config: &RapidConfig,
) -> Transfer {
    let scope = if node.at_root {
        Scope::Global
    } else {
        Scope::Local(node.id)
    };
    let conflicts_found = outcome.conflicts.len();
    let mut conflicts = outcome.conflicts;
    conflicts.sort_by_key(|c| (!c.is_linear(), c.len()));
    conflicts.truncate(config.max_transferred_conflicts);
    for c in &mut conflicts {
        c.scope = scope;
    }
    let linear_attached = conflicts.iter().filter(|c| c.is_linear()).count();

    let mut tightenings = Vec::new();
    for j in 0..node.bounds.len() {
        if outcome.bounds.lower(j) > node.bounds.lower(j) {
            tightenings.push((j, Side::Lower, outcome.bounds.lower(j)));
        }
        if outcome.bounds.upper(j) < node.bounds.upper(j) {
            tightenings.push((j, Side::Upper, outcome.bounds.upper(j)));
        }
    }

    let mut error = None;
    let solution = match outcome.solution {
        None => SolutionTransfer::None,
        Some((x, value)) => {
            if !instance.is_feasible(&x) || !instance.global_box().contains(&x) {
                error = Some(TransferError::SolutionRejected);
                SolutionTransfer::Rejected
            } else if stats.offer_solution(&x, value) {
                SolutionTransfer::Installed(value)
            } else {
                SolutionTransfer::NotImproving(value)
            }
        }
    };
    stats.inference.merge(&outcome.inference_stats);
    let finalized = match outcome.status {
        CpStatus::NodeLimitReached => false,
        CpStatus::SolvedInfeasible => true,
        CpStatus::SolvedOptimal => error.is_none(),
    };
    Transfer {
        summary: TransferSummary {
            node: node.id,
            cp_nodes: outcome.nodes,
            cp_status: outcome.status,
            conflicts_found,
            conflicts_attached: conflicts.len(),
            linear_attached,
            bounds_tightened: tightenings.len(),
            solution,
            finalized,
        },
        constraints: conflicts,
        tightenings,
        error,
    }
}
