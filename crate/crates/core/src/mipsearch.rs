//! LP-based branch-and-bound with best-bound selection, bounded plunging,
//! hybrid branching and the Rapid Learning hook.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conflict::{analyze_1uip, upgrade_singleton, AnalysisAbort, BoundDisjunction, ConflictTrace, LearnedConstraint, Scope};
use crate::cpsearch::{CpStatus, InferenceStats};
use crate::lp::{measure_degeneracy, solve_lp, strong_branch, BasisStatus, ChildBound, LpResult, LpStatus, StrongBranchCounters};
use crate::model::{BoundBox, Instance, Side, INT_TOL};
use crate::propagation::{Domain, Propagator};
use crate::rapid::{self, Criterion, CriterionInputs, NodeScope, RapidConfig, RapidConfigError, RapidMode, TransferSummary};

/// Gap below which a node is pruned against the incumbent.
pub const CUTOFF_TOL: f64 = 1e-6;
const PLUNGE_LIMIT: u32 = 10;
const STRONG_BRANCH_DEPTH: u32 = 4;
const STRONG_BRANCH_CANDIDATES: usize = 5;
const VSIDS_DECAY: f64 = 0.95;
const VSIDS_PERIOD: u64 = 100;
const HYBRID_SHIFT_RATIO: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error(transparent)]
    Rapid(#[from] RapidConfigError),
    #[error("time limit must be a nonnegative number of seconds, got {0}")]
    TimeLimit(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveConfig {
    pub rapid: RapidConfig,
    pub node_limit: Option<u64>,
    /// Seconds.
    pub time_limit: Option<f64>,
    pub strong_branching: bool,
    /// Keep learned constraints, their node boxes and conflict traces.
    pub audit: bool,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            rapid: RapidConfig::off(),
            node_limit: None,
            time_limit: None,
            strong_branching: true,
            audit: false,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<(), SolveError> {
        self.rapid.validate()?;
        if let Some(t) = self.time_limit {
            if t.is_nan() || t < 0.0 {
                return Err(SolveError::TimeLimit(t));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NodeLimit,
    TimeLimit,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoCost {
    pub sum: f64,
    pub count: u64,
}

impl PseudoCost {
    pub fn update(&mut self, unit_gain: f64) {
        self.sum += unit_gain.max(0.0);
        self.count += 1;
    }

    pub fn average(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }
}

/// Conflict activity per bound literal (`[lower, upper]` per variable).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Vsids {
    activity: Vec<[f64; 2]>,
    conflicts: u64,
}

fn side_index(side: Side) -> usize {
    match side {
        Side::Lower => 0,
        Side::Upper => 1,
    }
}

impl Vsids {
    pub fn new(num_vars: usize) -> Self {
        Vsids {
            activity: vec![[0.0; 2]; num_vars],
            conflicts: 0,
        }
    }

    /// +1 for every literal of a new conflict; all activities decay every
    /// 100 conflicts.
    pub fn bump(&mut self, conflict: &BoundDisjunction) {
        for lit in conflict.literals() {
            self.activity[lit.var][side_index(lit.side)] += 1.0;
        }
        self.conflicts += 1;
        if self.conflicts.is_multiple_of(VSIDS_PERIOD) {
            self.decay();
        }
    }

    pub fn decay(&mut self) {
        for a in &mut self.activity {
            a[0] *= VSIDS_DECAY;
            a[1] *= VSIDS_DECAY;
        }
    }

    pub fn literal(&self, var: usize, side: Side) -> f64 {
        self.activity[var][side_index(side)]
    }

    pub fn variable(&self, var: usize) -> f64 {
        self.activity[var][0] + self.activity[var][1]
    }

    pub fn num_conflicts(&self) -> u64 {
        self.conflicts
    }

    #[cfg(test)]
    fn set(&mut self, var: usize, value: f64) {
        self.activity[var] = [value, 0.0];
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Leaf {
    Infeasible,
    Cutoff,
    Improving(Vec<f64>, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchStats {
    pub dual_bound: f64,
    pub root_dual_bound: f64,
    pub incumbent: Option<(Vec<f64>, f64)>,
    pub n_solutions: u64,
    pub leaves_infeasible: u64,
    pub leaves_cutoff: u64,
    pub sb: StrongBranchCounters,
    /// `[down, up]` per variable.
    pub pseudo_costs: Vec<[PseudoCost; 2]>,
    pub inference: InferenceStats,
    pub vsids: Vsids,
    pub iter_lp: u64,
    pub switching_time: Duration,
    pub nodes: u64,
    pub rl_calls: u64,
    pub criterion_counts: BTreeMap<Criterion, u64>,
    pub conflicts_learned: u64,
}

impl SearchStats {
    pub fn new(num_vars: usize) -> Self {
        SearchStats {
            dual_bound: f64::NEG_INFINITY,
            root_dual_bound: f64::NEG_INFINITY,
            incumbent: None,
            n_solutions: 0,
            leaves_infeasible: 0,
            leaves_cutoff: 0,
            sb: StrongBranchCounters::default(),
            pseudo_costs: vec![[PseudoCost::default(); 2]; num_vars],
            inference: InferenceStats::new(),
            vsids: Vsids::new(num_vars),
            iter_lp: 0,
            switching_time: Duration::ZERO,
            nodes: 0,
            rl_calls: 0,
            criterion_counts: BTreeMap::new(),
            conflicts_learned: 0,
        }
    }

    pub fn incumbent_value(&self) -> f64 {
        self.incumbent.as_ref().map_or(f64::INFINITY, |(_, v)| *v)
    }

    /// Installs `x` if it is strictly better than the incumbent.
    pub fn offer_solution(&mut self, x: &[f64], value: f64) -> bool {
        if value < self.incumbent_value() - 1e-9 {
            self.incumbent = Some((x.to_vec(), value));
            self.n_solutions += 1;
            true
        } else {
            false
        }
    }

    pub fn record_leaf(&mut self, leaf: Leaf) {
        match leaf {
            Leaf::Infeasible => self.leaves_infeasible += 1,
            Leaf::Cutoff => self.leaves_cutoff += 1,
            Leaf::Improving(x, value) => {
                self.offer_solution(&x, value);
            }
        }
    }

    pub fn bump_conflict(&mut self, conflict: &BoundDisjunction) {
        self.vsids.bump(conflict);
        self.conflicts_learned += 1;
    }

    pub fn pseudo_cost_product(&self, var: usize) -> f64 {
        let [down, up] = self.pseudo_costs[var];
        down.average().max(1e-6) * up.average().max(1e-6)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridWeights {
    pub pseudo_cost: f64,
    pub inference: f64,
    pub vsids: f64,
}

/// Default weights, shifted towards conflict information once infeasible
/// leaves outnumber cutoff leaves more than tenfold.
pub fn hybrid_weights(stats: &SearchStats) -> HybridWeights {
    let ratio = stats.leaves_infeasible as f64 / stats.leaves_cutoff.max(1) as f64;
    if ratio > HYBRID_SHIFT_RATIO {
        HybridWeights {
            pseudo_cost: 0.1,
            inference: 0.5,
            vsids: 1.0,
        }
    } else {
        HybridWeights {
            pseudo_cost: 1.0,
            inference: 0.1,
            vsids: 0.1,
        }
    }
}

pub fn hybrid_branching_score(var: usize, stats: &SearchStats) -> f64 {
    let w = hybrid_weights(stats);
    w.pseudo_cost * stats.pseudo_cost_product(var)
        + w.inference * stats.inference.var_score(var)
        + w.vsids * stats.vsids.variable(var)
}

/// Argmax of the hybrid score; the lowest index wins ties.
pub fn select_branching(fractional: &[usize], stats: &SearchStats) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &j in fractional {
        let s = hybrid_branching_score(j, stats);
        match best {
            Some((bj, bs)) if s < bs || (s == bs && j > bj) => {}
            _ => best = Some((j, s)),
        }
    }
    best.map(|(j, _)| j)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeAction {
    Branch,
    Infeasible,
    Cutoff,
    Incumbent,
    /// Closed by a Rapid Learning CP search.
    Finalized,
    /// The LP gave no usable answer and nothing was left to branch on.
    Abandoned,
    Unbounded,
    /// Root bound computed, search stopped by a zero node limit.
    Limit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchRecord {
    pub var: usize,
    pub value: f64,
}

/// One record per processed node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub node: usize,
    pub parent: Option<usize>,
    pub depth: u32,
    pub action: NodeAction,
    pub lp: Option<f64>,
    pub dual_bound: f64,
    pub incumbent: Option<f64>,
    pub branch: Option<BranchRecord>,
    /// Enabled criteria that fired at a node on the depth schedule.
    pub criteria: Vec<Criterion>,
    pub rapid: Option<TransferSummary>,
    /// Nodes whose local constraints or bounds were active here.
    pub local_scopes: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Audit {
    pub global: Vec<LearnedConstraint>,
    /// Local constraints with the box of the node they were attached to.
    pub local: Vec<(LearnedConstraint, BoundBox)>,
    pub traces: Vec<ConflictTrace>,
    pub cp_traces: Vec<ConflictTrace>,
    pub global_box: Option<BoundBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub status: SolveStatus,
    pub incumbent: Option<(Vec<f64>, f64)>,
    pub dual_bound: f64,
    pub stats: SearchStats,
    pub events: Vec<Event>,
    pub audit: Option<Audit>,
}

impl SolveResult {
    pub fn objective(&self) -> Option<f64> {
        self.incumbent.as_ref().map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone)]
struct Node {
    parent: Option<usize>,
    depth: u32,
    branch: Option<(usize, Side, f64)>,
    local_bounds: Vec<(usize, Side, f64)>,
    local: Vec<LearnedConstraint>,
    lower_bound: f64,
    /// Branching variable, direction, distance moved, parent LP value.
    pc_info: Option<(usize, Side, f64, f64)>,
    warm: Option<Vec<BasisStatus>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OpenEntry {
    bound: f64,
    id: usize,
}

impl Eq for OpenEntry {}

impl Ord for OpenEntry {
    // reversed: the heap pops the smallest bound, then the smallest id
    fn cmp(&self, other: &Self) -> Ordering {
        other.bound.total_cmp(&self.bound).then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for OpenEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

enum Outcome {
    Leaf,
    Branched(Vec<usize>),
    GlobalInfeasible,
    Unbounded,
}

/// Solves `instance` by branch-and-bound.
pub fn solve(instance: &Instance, config: &SolveConfig) -> Result<SolveResult, SolveError> {
    config.validate()?;
    let mut tree = Tree::new(instance, config);
    let status = tree.run();
    Ok(tree.finish(status))
}

struct Tree<'a> {
    inst: &'a Instance,
    config: &'a SolveConfig,
    stats: SearchStats,
    global_box: BoundBox,
    global: Vec<LearnedConstraint>,
    gprop: Propagator,
    nodes: Vec<Node>,
    open: BinaryHeap<OpenEntry>,
    events: Vec<Event>,
    audit: Option<Audit>,
    start: Instant,
}

impl<'a> Tree<'a> {
    fn new(inst: &'a Instance, config: &'a SolveConfig) -> Self {
        Tree {
            inst,
            config,
            stats: SearchStats::new(inst.num_vars()),
            global_box: inst.global_box(),
            global: Vec::new(),
            gprop: Propagator::new(inst),
            nodes: vec![Node {
                parent: None,
                depth: 0,
                branch: None,
                local_bounds: Vec::new(),
                local: Vec::new(),
                lower_bound: f64::NEG_INFINITY,
                pc_info: None,
                warm: None,
            }],
            open: BinaryHeap::new(),
            events: Vec::new(),
            audit: config.audit.then(Audit::default),
            start: Instant::now(),
        }
    }

    fn cutoff(&self) -> f64 {
        self.stats.incumbent_value() - CUTOFF_TOL
    }

    fn run(&mut self) -> SolveStatus {
        let mut next = Some(0usize);
        let mut plunge = 0u32;
        loop {
            let id = match next.take() {
                Some(id) => id,
                None => {
                    plunge = 0;
                    match self.open.pop() {
                        None => break,
                        Some(e) if e.bound >= self.cutoff() => {
                            self.open.clear();
                            break;
                        }
                        Some(e) => e.id,
                    }
                }
            };
            if self.nodes[id].lower_bound >= self.cutoff() {
                continue;
            }
            let limit_hit = self.config.node_limit.is_some_and(|l| self.stats.nodes >= l);
            if limit_hit || self.time_exceeded() {
                self.open.push(OpenEntry {
                    bound: self.nodes[id].lower_bound,
                    id,
                });
                if limit_hit && self.stats.nodes == 0 {
                    self.root_bound_only();
                }
                self.update_dual_bound(None);
                return if limit_hit {
                    SolveStatus::NodeLimit
                } else {
                    SolveStatus::TimeLimit
                };
            }
            self.stats.nodes += 1;
            match self.process(id) {
                Outcome::GlobalInfeasible => {
                    self.open.clear();
                    break;
                }
                Outcome::Unbounded => return SolveStatus::Unbounded,
                Outcome::Leaf => {}
                Outcome::Branched(children) => {
                    if plunge < PLUNGE_LIMIT {
                        plunge += 1;
                        next = Some(children[0]);
                        for &c in &children[1..] {
                            self.push_open(c);
                        }
                    } else {
                        for &c in &children {
                            self.push_open(c);
                        }
                    }
                }
            }
            let plunge_bound = next.map(|n| self.nodes[n].lower_bound);
            self.update_dual_bound(plunge_bound);
            if let Some(ev) = self.events.last_mut() {
                ev.dual_bound = self.stats.dual_bound;
            }
        }
        self.update_dual_bound(None);
        if self.stats.incumbent.is_some() {
            SolveStatus::Optimal
        } else {
            SolveStatus::Infeasible
        }
    }

    fn time_exceeded(&self) -> bool {
        self.config
            .time_limit
            .is_some_and(|t| self.start.elapsed().as_secs_f64() >= t)
    }

    fn push_open(&mut self, id: usize) {
        self.open.push(OpenEntry {
            bound: self.nodes[id].lower_bound,
            id,
        });
    }

    /// Raises the dual bound to the smallest open bound, counting the node
    /// being plunged into.
    fn update_dual_bound(&mut self, plunge: Option<f64>) {
        let inc = self.stats.incumbent_value();
        let open_min = self.open.peek().map_or(f64::INFINITY, |e| e.bound);
        let bound = open_min.min(plunge.unwrap_or(f64::INFINITY)).min(inc);
        if bound > self.stats.dual_bound {
            self.stats.dual_bound = bound;
        }
    }

    /// With a zero node limit only the root LP bound is computed.
    fn root_bound_only(&mut self) {
        let mut domain = Domain::for_instance(self.inst, self.global_box.clone());
        let _ = self.gprop.propagate(&mut domain);
        let (action, lp) = if domain.is_failed() {
            (NodeAction::Infeasible, None)
        } else {
            let res = solve_lp(self.inst, domain.bounds(), None);
            self.stats.iter_lp += res.iterations as u64;
            match res.status {
                LpStatus::Optimal => {
                    self.stats.root_dual_bound = res.objective;
                    self.nodes[0].lower_bound = res.objective;
                    (NodeAction::Limit, Some(res.objective))
                }
                LpStatus::Infeasible => {
                    self.nodes[0].lower_bound = f64::INFINITY;
                    (NodeAction::Infeasible, None)
                }
                _ => (NodeAction::Limit, None),
            }
        };
        self.open.clear();
        self.push_open(0);
        self.update_dual_bound(None);
        self.events.push(Event {
            node: 0,
            parent: None,
            depth: 0,
            action,
            lp,
            dual_bound: self.stats.dual_bound,
            incumbent: None,
            branch: None,
            criteria: Vec::new(),
            rapid: None,
            local_scopes: Vec::new(),
        });
    }

    fn path(&self, id: usize) -> Vec<usize> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    fn add_global(&mut self, c: LearnedConstraint) {
        self.gprop.add_learned(self.global.len(), &c);
        self.stats.bump_conflict(&c.disjunction);
        if let Some(a) = self.audit.as_mut() {
            a.global.push(c.clone());
        }
        self.global.push(c);
    }

    /// Builds the node domain. `None` means the node is infeasible; the flag
    /// says whether the whole problem is.
    fn build_domain(&mut self, path: &[usize]) -> Result<(Domain, Vec<usize>), bool> {
        let started = Instant::now();
        let result = self.build_domain_inner(path);
        self.stats.switching_time += started.elapsed();
        result
    }

    fn build_domain_inner(&mut self, path: &[usize]) -> Result<(Domain, Vec<usize>), bool> {
        let mut domain = Domain::for_instance(self.inst, self.global_box.clone());
        let _ = self.gprop.propagate(&mut domain);
        if domain.is_failed() {
            return Err(true);
        }
        // level-0 deductions use global information only
        self.global_box = domain.bounds().clone();

        // path decisions, one level each: conflicts found here are global
        for &n in &path[1..] {
            let (var, side, value) = self.nodes[n].branch.expect("non-root node has a branching");
            domain.new_level();
            if domain.decide(var, side, value).is_err() {
                return Err(false);
            }
            let _ = self.gprop.propagate(&mut domain);
            if domain.is_failed() {
                return Err(self.learn_from(&domain));
            }
        }

        // local bounds and constraints on top; failures here are not analysed
        let mut scopes = Vec::new();
        let mut local_bounds = Vec::new();
        let mut local_cons = Vec::new();
        for &n in path {
            let node = &self.nodes[n];
            if !node.local_bounds.is_empty() || !node.local.is_empty() {
                scopes.push(n);
            }
            local_bounds.extend(node.local_bounds.iter().copied());
            local_cons.extend(node.local.iter().cloned());
        }
        if !scopes.is_empty() {
            domain.new_level();
            for (var, side, value) in local_bounds {
                if domain.decide(var, side, value).is_err() {
                    return Err(false);
                }
            }
            let base = self.gprop.len();
            for (k, c) in local_cons.iter().enumerate() {
                self.gprop.add_learned(self.global.len() + k, c);
            }
            let _ = self.gprop.propagate(&mut domain);
            self.gprop.truncate(base);
            if domain.is_failed() {
                return Err(false);
            }
        }
        Ok((domain, scopes))
    }

    /// Conflict analysis on a failed domain; returns true when the problem
    /// is proved infeasible.
    fn learn_from(&mut self, domain: &Domain) -> bool {
        match analyze_1uip(domain.graph(), domain.level()) {
            Ok(conflict) => {
                if let Some(a) = self.audit.as_mut() {
                    a.traces.push(ConflictTrace::new(&conflict, domain.bounds()));
                }
                let d = conflict.disjunction;
                if d.is_empty() {
                    return true;
                }
                let singleton = d.len() == 1;
                let learned = LearnedConstraint::new(d, &self.global_box, Scope::Global);
                if singleton && upgrade_singleton(&learned.disjunction, &mut self.global_box).is_err() {
                    self.add_global(learned);
                    return true;
                }
                self.add_global(learned);
                false
            }
            Err(AnalysisAbort::RootFailure) => true,
            Err(_) => false,
        }
    }

    fn local_constraints(&self, path: &[usize]) -> Vec<LearnedConstraint> {
        path.iter().flat_map(|&n| self.nodes[n].local.iter().cloned()).collect()
    }

    fn process(&mut self, id: usize) -> Outcome {
        let path = self.path(id);
        let mut rapid_done = false;
        let mut criteria = Vec::new();
        let mut rapid_summary = None;
        loop {
            let (domain, scopes) = match self.build_domain(&path) {
                Ok(d) => d,
                Err(global) => {
                    self.stats.record_leaf(Leaf::Infeasible);
                    self.log(id, NodeAction::Infeasible, None, None, criteria, rapid_summary, Vec::new());
                    return if global {
                        Outcome::GlobalInfeasible
                    } else {
                        Outcome::Leaf
                    };
                }
            };
            let bounds = domain.bounds().clone();
            let warm = self.nodes[id].warm.clone();
            let res = solve_lp(self.inst, &bounds, warm.as_deref());
            self.stats.iter_lp += res.iterations as u64;
            let node_bound = self.nodes[id].lower_bound;

            match res.status {
                LpStatus::Infeasible => {
                    self.stats.record_leaf(Leaf::Infeasible);
                    self.log(id, NodeAction::Infeasible, None, None, criteria, rapid_summary, scopes);
                    return Outcome::Leaf;
                }
                LpStatus::Unbounded => {
                    self.log(id, NodeAction::Unbounded, None, None, criteria, rapid_summary, scopes);
                    return Outcome::Unbounded;
                }
                LpStatus::IterationLimit => {
                    return self.branch_without_lp(id, &bounds, node_bound, criteria, rapid_summary, scopes);
                }
                LpStatus::Optimal => {}
            }

            let lp_value = res.objective.max(node_bound);
            if id == 0 {
                self.stats.root_dual_bound = res.objective;
            }
            if !rapid_done {
                if let Some((var, side, dist, parent_obj)) = self.nodes[id].pc_info {
                    let gain = (res.objective - parent_obj).max(0.0) / dist.max(INT_TOL);
                    self.stats.pseudo_costs[var][pc_dir(side)].update(gain);
                }
            }

            if lp_value >= self.cutoff() {
                self.stats.record_leaf(Leaf::Cutoff);
                self.log(id, NodeAction::Cutoff, Some(res.objective), None, criteria, rapid_summary, scopes);
                return Outcome::Leaf;
            }

            let fractional = self.fractional(&res, &bounds);
            if fractional.is_empty() {
                if let Some(x) = self.integral_point(&res) {
                    let value = self.inst.objective_value(&x);
                    self.stats.record_leaf(Leaf::Improving(x, value));
                    self.log(id, NodeAction::Incumbent, Some(res.objective), None, criteria, rapid_summary, scopes);
                    return Outcome::Leaf;
                }
            }

            if !rapid_done && self.config.rapid.mode != RapidMode::Off {
                rapid_done = true;
                let depth = self.nodes[id].depth as u64;
                let degeneracy = measure_degeneracy(&res, self.inst.num_rows());
                let inputs = CriterionInputs::gather(&self.stats, self.inst, &bounds, degeneracy);
                let report = rapid::evaluate_criteria(&inputs, &self.config.rapid);
                let on_schedule = rapid::is_rl_depth(depth, self.config.rapid.f, self.config.rapid.beta);
                let (run, fired) = rapid::decide(&report, depth, id == 0, &self.config.rapid);
                if on_schedule {
                    for c in &fired {
                        *self.stats.criterion_counts.entry(*c).or_default() += 1;
                    }
                    criteria = fired;
                }
                if run {
                    match self.run_rapid(id, &path, &bounds, &report) {
                        None => {}
                        Some(RapidStep::Finalized(summary)) => {
                            self.log(id, NodeAction::Finalized, Some(res.objective), None, criteria, Some(summary), scopes);
                            return Outcome::Leaf;
                        }
                        Some(RapidStep::GlobalInfeasible(summary)) => {
                            self.log(id, NodeAction::Finalized, Some(res.objective), None, criteria, Some(summary), scopes);
                            return Outcome::GlobalInfeasible;
                        }
                        Some(RapidStep::Changed(summary)) => {
                            rapid_summary = Some(summary);
                            continue;
                        }
                        Some(RapidStep::Unchanged(summary)) => rapid_summary = Some(summary),
                    }
                }
            }

            if fractional.is_empty() {
                // integral LP point that failed the exact check: split a free variable
                return self.branch_without_lp(id, &bounds, lp_value, criteria, rapid_summary, scopes);
            }
            let (var, value) = self.choose_branching(id, &bounds, &res, &fractional);
            let frac = value - value.floor();
            let down = self.add_child(id, (var, Side::Upper, value.floor()), lp_value, frac, res.objective, &res);
            let up = self.add_child(id, (var, Side::Lower, value.ceil()), lp_value, 1.0 - frac, res.objective, &res);
            let children = if frac >= 0.5 { vec![up, down] } else { vec![down, up] };
            let record = BranchRecord { var, value };
            self.log(id, NodeAction::Branch, Some(res.objective), Some(record), criteria, rapid_summary, scopes);
            return Outcome::Branched(children);
        }
    }

    fn fractional(&self, res: &LpResult, bounds: &BoundBox) -> Vec<usize> {
        (0..self.inst.num_vars())
            .filter(|&j| {
                let v = res.primal[j];
                self.inst.is_integer(j) && !bounds.is_fixed(j) && (v - v.round()).abs() > INT_TOL
            })
            .collect()
    }

    fn integral_point(&self, res: &LpResult) -> Option<Vec<f64>> {
        let x: Vec<f64> = (0..self.inst.num_vars())
            .map(|j| {
                if self.inst.is_integer(j) {
                    res.primal[j].round()
                } else {
                    res.primal[j]
                }
            })
            .collect();
        if self.inst.is_feasible(&x) {
            Some(x)
        } else if self.inst.is_feasible(&res.primal) {
            Some(res.primal.clone())
        } else {
            None
        }
    }

    fn choose_branching(&mut self, id: usize, bounds: &BoundBox, res: &LpResult, fractional: &[usize]) -> (usize, f64) {
        let depth = self.nodes[id].depth;
        if !(self.config.strong_branching && depth <= STRONG_BRANCH_DEPTH && fractional.len() > 1) {
            let var = select_branching(fractional, &self.stats).expect("fractional set is nonempty");
            return (var, res.primal[var]);
        }
        let mut ranked: Vec<(usize, f64)> = fractional
            .iter()
            .map(|&j| (j, hybrid_branching_score(j, &self.stats)))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(STRONG_BRANCH_CANDIDATES);
        let mut best: Option<(usize, f64)> = None;
        for &(j, _) in &ranked {
            let sb = strong_branch(self.inst, bounds, j, res, &mut self.stats.sb);
            self.stats.iter_lp += sb.iterations as u64;
            let x = res.primal[j];
            let frac = x - x.floor();
            let gain = |child: ChildBound| match child {
                ChildBound::Objective(v) => (v - res.objective).max(0.0),
                ChildBound::Infeasible => 1e9,
                ChildBound::Unknown => 0.0,
            };
            let (gd, gu) = (gain(sb.down), gain(sb.up));
            if let ChildBound::Objective(_) = sb.down {
                self.stats.pseudo_costs[j][0].update(gd / frac.max(INT_TOL));
            }
            if let ChildBound::Objective(_) = sb.up {
                self.stats.pseudo_costs[j][1].update(gu / (1.0 - frac).max(INT_TOL));
            }
            let score = gd.max(1e-6) * gu.max(1e-6);
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((j, score));
            }
        }
        let var = best.expect("at least one candidate").0;
        (var, res.primal[var])
    }

    fn add_child(
        &mut self,
        parent: usize,
        branch: (usize, Side, f64),
        bound: f64,
        dist: f64,
        parent_obj: f64,
        res: &LpResult,
    ) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node {
            parent: Some(parent),
            depth: self.nodes[parent].depth + 1,
            branch: Some(branch),
            local_bounds: Vec::new(),
            local: Vec::new(),
            lower_bound: bound,
            pc_info: Some((branch.0, branch.1, dist, parent_obj)),
            warm: Some(res.structural_basis(self.inst.num_vars()).to_vec()),
        });
        id
    }

    /// Splits the first unfixed integer variable at its midpoint when the LP
    /// cannot guide branching.
    fn branch_without_lp(
        &mut self,
        id: usize,
        bounds: &BoundBox,
        bound: f64,
        criteria: Vec<Criterion>,
        rapid_summary: Option<TransferSummary>,
        scopes: Vec<usize>,
    ) -> Outcome {
        let Some(var) = (0..self.inst.num_vars()).find(|&j| self.inst.is_integer(j) && !bounds.is_fixed(j)) else {
            self.log(id, NodeAction::Abandoned, None, None, criteria, rapid_summary, scopes);
            return Outcome::Leaf;
        };
        let mid = ((bounds.lower(var) + bounds.upper(var)) / 2.0).floor();
        let empty = LpResult {
            status: LpStatus::IterationLimit,
            primal: Vec::new(),
            objective: bound,
            basis: Vec::new(),
            reduced_costs: Vec::new(),
            iterations: 0,
        };
        let down = self.add_child(id, (var, Side::Upper, mid), bound, 1.0, bound, &empty);
        let up = self.add_child(id, (var, Side::Lower, mid + 1.0), bound, 1.0, bound, &empty);
        for c in [down, up] {
            self.nodes[c].pc_info = None;
            self.nodes[c].warm = None;
        }
        let record = BranchRecord {
            var,
            value: mid + 0.5,
        };
        self.log(id, NodeAction::Branch, None, Some(record), criteria, rapid_summary, scopes);
        Outcome::Branched(vec![down, up])
    }

    fn run_rapid(
        &mut self,
        id: usize,
        path: &[usize],
        bounds: &BoundBox,
        report: &rapid::CriterionReport,
    ) -> Option<RapidStep> {
        let at_root = id == 0;
        let mut constraints = self.global.clone();
        constraints.extend(self.local_constraints(path));
        let scope = NodeScope {
            id,
            depth: self.nodes[id].depth as u64,
            at_root,
            bounds,
            constraints,
        };
        let record = self.audit.is_some();
        let Ok(Some(outcome)) = rapid::maybe_run(&scope, report, &self.stats, self.inst, &self.config.rapid, record)
        else {
            return None;
        };
        self.stats.rl_calls += 1;
        if let Some(a) = self.audit.as_mut() {
            a.cp_traces.extend(outcome.traces.iter().cloned());
        }
        let proved_infeasible = outcome.status == CpStatus::SolvedInfeasible;
        let transfer = rapid::transfer(outcome, &scope, self.inst, &mut self.stats, &self.config.rapid);
        let summary = transfer.summary.clone();
        let changed = !transfer.constraints.is_empty()
            || !transfer.tightenings.is_empty()
            || matches!(summary.solution, rapid::SolutionTransfer::Installed(_));

        if at_root {
            for c in transfer.constraints {
                self.add_global(c);
            }
            for (var, side, value) in transfer.tightenings {
                if self.global_box.tighten(var, side, value).is_err() {
                    return Some(RapidStep::GlobalInfeasible(summary));
                }
            }
        } else {
            for c in &transfer.constraints {
                self.stats.bump_conflict(&c.disjunction);
                if let Some(a) = self.audit.as_mut() {
                    a.local.push((c.clone(), bounds.clone()));
                }
            }
            let node = &mut self.nodes[id];
            node.local.extend(transfer.constraints);
            node.local_bounds.extend(transfer.tightenings);
        }

        if summary.finalized {
            if proved_infeasible {
                self.stats.record_leaf(Leaf::Infeasible);
                if at_root {
                    return Some(RapidStep::GlobalInfeasible(summary));
                }
            }
            return Some(RapidStep::Finalized(summary));
        }
        Some(if changed {
            RapidStep::Changed(summary)
        } else {
            RapidStep::Unchanged(summary)
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn log(
        &mut self,
        id: usize,
        action: NodeAction,
        lp: Option<f64>,
        branch: Option<BranchRecord>,
        criteria: Vec<Criterion>,
        rapid: Option<TransferSummary>,
        local_scopes: Vec<usize>,
    ) {
        let node = &self.nodes[id];
        self.events.push(Event {
            node: id,
            parent: node.parent,
            depth: node.depth,
            action,
            lp,
            dual_bound: self.stats.dual_bound,
            incumbent: self.stats.incumbent.as_ref().map(|(_, v)| *v),
            branch,
            criteria,
            rapid,
            local_scopes,
        });
    }

    fn finish(mut self, status: SolveStatus) -> SolveResult {
        if matches!(status, SolveStatus::Optimal | SolveStatus::Infeasible) {
            self.stats.dual_bound = self.stats.incumbent_value();
        }
        if let Some(a) = self.audit.as_mut() {
            a.global_box = Some(self.global_box.clone());
        }
        SolveResult {
            status,
            incumbent: self.stats.incumbent.clone(),
            dual_bound: self.stats.dual_bound,
            stats: self.stats,
            events: self.events,
            audit: self.audit,
        }
    }
}

enum RapidStep {
    Finalized(TransferSummary),
    GlobalInfeasible(TransferSummary),
    Changed(TransferSummary),
    Unchanged(TransferSummary),
}

fn pc_dir(side: Side) -> usize {
    match side {
        Side::Upper => 0,
        Side::Lower => 1,
    }
}

/// Serializes events as line-delimited JSON.
pub fn events_to_jsonl(events: &[Event]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("events serialize"));
        out.push('\n');
    }
    out
}
