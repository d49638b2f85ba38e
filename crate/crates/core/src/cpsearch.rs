//! Node-limited depth-first CP search over a pure integer program.
//!
//! No LP is solved: nodes are bounded by the pseudo-solution (every variable
//! at the bound its objective sign prefers), infeasible nodes are analysed
//! with 1-UIP, and branching uses value-based inference history. Learned
//! conflicts are propagated for the rest of the search and returned to the
//! caller together with the tightened scope box and any solution found.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conflict::{analyze_1uip, upgrade_singleton, AnalysisAbort, ConflictTrace, LearnedConstraint, Scope};
use crate::model::{classify, BoundBox, Instance, Side, FEAS_TOL};
use crate::propagation::{Domain, Propagator};

/// `min{5000, max{500, iter_lp}}`.
pub fn node_limit_from_iters(iter_lp: u64) -> u64 {
    iter_lp.clamp(500, 5000)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CpError {
    #[error("CP search needs a pure integer program")]
    NotPureInteger,
    #[error("invalid CP configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpConfig {
    pub node_limit: u64,
    /// Conflicts longer than `⌈max_conflict_frac · n⌉` literals are dropped.
    pub max_conflict_frac: f64,
    pub seed: u64,
    /// Primal bound; only strictly better solutions are accepted.
    pub incumbent_bound: f64,
    /// Keep a [`ConflictTrace`] per analysed conflict.
    pub record_traces: bool,
}

impl Default for CpConfig {
    fn default() -> Self {
        CpConfig {
            node_limit: 500,
            max_conflict_frac: 0.05,
            seed: 0,
            incumbent_bound: f64::INFINITY,
            record_traces: false,
        }
    }
}

impl CpConfig {
    pub fn validate(&self) -> Result<(), CpError> {
        if self.node_limit < 1 {
            return Err(CpError::InvalidConfig("node_limit must be at least 1".into()));
        }
        if !(self.max_conflict_frac > 0.0 && self.max_conflict_frac <= 1.0) {
            return Err(CpError::InvalidConfig(format!(
                "max_conflict_frac must lie in (0, 1], got {}",
                self.max_conflict_frac
            )));
        }
        Ok(())
    }

    pub fn max_conflict_len(&self, num_vars: usize) -> usize {
        (self.max_conflict_frac * num_vars as f64 - 1e-9).ceil().max(1.0) as usize
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceCount {
    pub inferences: u64,
    pub branchings: u64,
}

impl InferenceCount {
    fn add(&mut self, other: InferenceCount) {
        self.inferences += other.inferences;
        self.branchings += other.branchings;
    }

    pub fn average(&self) -> f64 {
        if self.branchings == 0 {
            0.0
        } else {
            self.inferences as f64 / self.branchings as f64
        }
    }
}

/// How many deductions followed each branching, per (variable, value,
/// direction) and aggregated per variable. `Side::Upper` is the down branch
/// `x ≤ v`, `Side::Lower` the up branch `x ≥ v + 1`; both are keyed by `v`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InferenceStats {
    by_value: BTreeMap<(usize, i64, Side), InferenceCount>,
    by_var: BTreeMap<usize, InferenceCount>,
}

impl InferenceStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.by_var.is_empty()
    }

    pub fn record(&mut self, var: usize, value: i64, direction: Side, inferences: u64) {
        let c = InferenceCount {
            inferences,
            branchings: 1,
        };
        self.by_value.entry((var, value, direction)).or_default().add(c);
        self.by_var.entry(var).or_default().add(c);
    }

    pub fn value_count(&self, var: usize, value: i64, direction: Side) -> InferenceCount {
        self.by_value.get(&(var, value, direction)).copied().unwrap_or_default()
    }

    pub fn var_count(&self, var: usize) -> InferenceCount {
        self.by_var.get(&var).copied().unwrap_or_default()
    }

    /// Average inferences per branching on `var`, over all values.
    pub fn var_score(&self, var: usize) -> f64 {
        self.var_count(var).average()
    }

    /// Score for branching on `var` at `value`: the summed per-direction
    /// averages observed at this value, or the per-variable average when the
    /// value has never been branched on.
    pub fn score(&self, var: usize, value: i64) -> f64 {
        let down = self.value_count(var, value, Side::Upper);
        let up = self.value_count(var, value, Side::Lower);
        if down.branchings + up.branchings == 0 {
            self.var_score(var)
        } else {
            down.average() + up.average()
        }
    }

    /// Adds every counter of `other`.
    pub fn merge(&mut self, other: &InferenceStats) {
        for (k, c) in &other.by_value {
            self.by_value.entry(*k).or_default().add(*c);
        }
        for (k, c) in &other.by_var {
            self.by_var.entry(*k).or_default().add(*c);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CpStatus {
    NodeLimitReached,
    /// Search space exhausted with a solution: it is optimal for the scope.
    SolvedOptimal,
    /// Search space exhausted without a solution better than the bound.
    SolvedInfeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpOutcome {
    /// Conflicts valid for the scope problem, all with `Scope::Global`
    /// relative to the scope; the caller decides their final scope.
    pub conflicts: Vec<LearnedConstraint>,
    /// Scope box after singleton upgrades and root propagation.
    pub bounds: BoundBox,
    pub solution: Option<(Vec<f64>, f64)>,
    /// Statistics gathered during this search only.
    pub inference_stats: InferenceStats,
    pub status: CpStatus,
    pub nodes: u64,
    pub traces: Vec<ConflictTrace>,
}

/// Box-relaxation optimum: lower bound for `c_j ≥ 0`, upper bound otherwise.
pub fn pseudo_solution(bounds: &BoundBox, objective: &[f64]) -> Vec<f64> {
    objective
        .iter()
        .enumerate()
        .map(|(j, &c)| if c < 0.0 { bounds.upper(j) } else { bounds.lower(j) })
        .collect()
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("every integer variable is fixed")]
pub struct AllFixed;

/// Picks the unfixed integer variable with the best value-based inference
/// score; exact ties are broken by `rng`. The value is the pseudo-solution
/// value clamped into `[l, u − 1]`, so both children `x ≤ v` and `x ≥ v + 1`
/// are nonempty.
pub fn select_inference_branching<R: Rng>(
    bounds: &BoundBox,
    integer: &[bool],
    stats: &InferenceStats,
    pseudo: &[f64],
    rng: &mut R,
) -> Result<(usize, i64), AllFixed> {
    let mut best = f64::NEG_INFINITY;
    let mut tied: Vec<(usize, i64)> = Vec::new();
    for j in 0..bounds.len() {
        if !integer[j] || bounds.is_fixed(j) {
            continue;
        }
        let (l, u) = (bounds.lower(j), bounds.upper(j));
        let v = pseudo[j].clamp(l, u - 1.0).round() as i64;
        let score = stats.score(j, v);
        if score > best {
            best = score;
            tied.clear();
            tied.push((j, v));
        } else if score == best {
            tied.push((j, v));
        }
    }
    match tied.len() {
        0 => Err(AllFixed),
        1 => Ok(tied[0]),
        k => Ok(tied[rng.gen_range(0..k)]),
    }
}

type Decision = (usize, Side, f64);

/// One CP search run. Build with [`CpSearch::new`], optionally add extra
/// constraints valid for the scope and seed statistics, then [`CpSearch::run`].
pub struct CpSearch<'a> {
    instance: &'a Instance,
    scope: BoundBox,
    config: CpConfig,
    extra: Vec<LearnedConstraint>,
    seed_stats: InferenceStats,
}

enum NodeState {
    Open,
    /// Infeasible; the scope may have been tightened.
    Pruned,
    ScopeInfeasible,
}

impl<'a> CpSearch<'a> {
    pub fn new(instance: &'a Instance, scope: &BoundBox, config: CpConfig) -> Self {
        CpSearch {
            instance,
            scope: scope.clone(),
            config,
            extra: Vec::new(),
            seed_stats: InferenceStats::new(),
        }
    }

    /// Constraints (e.g. previously learned ones) that hold in the scope.
    pub fn with_constraints(mut self, constraints: impl IntoIterator<Item = LearnedConstraint>) -> Self {
        self.extra.extend(constraints);
        self
    }

    /// Branching history to start from; it is not part of the returned delta.
    pub fn with_stats(mut self, stats: InferenceStats) -> Self {
        self.seed_stats = stats;
        self
    }

    pub fn run(self) -> Result<CpOutcome, CpError> {
        self.config.validate()?;
        if !classify(self.instance).is_pure_integer() && self.instance.num_vars() > 0 {
            return Err(CpError::NotPureInteger);
        }
        let mut run = Run::new(self);
        run.search();
        Ok(run.into_outcome())
    }
}

/// Runs [`CpSearch`] with no extra constraints or seeded statistics.
pub fn cp_search(instance: &Instance, scope_box: &BoundBox, config: CpConfig) -> Result<CpOutcome, CpError> {
    CpSearch::new(instance, scope_box, config).run()
}

struct Run<'a> {
    instance: &'a Instance,
    config: CpConfig,
    scope: BoundBox,
    propagator: Propagator,
    domain: Domain,
    path: Vec<Decision>,
    next_id: usize,
    max_len: usize,
    stats: InferenceStats,
    delta: InferenceStats,
    rng: ChaCha8Rng,
    conflicts: Vec<LearnedConstraint>,
    traces: Vec<ConflictTrace>,
    solution: Option<(Vec<f64>, f64)>,
    cutoff: f64,
    nodes: u64,
    exhausted: bool,
}

impl<'a> Run<'a> {
    fn new(search: CpSearch<'a>) -> Self {
        let CpSearch {
            instance,
            scope,
            config,
            extra,
            seed_stats,
        } = search;
        let mut propagator = Propagator::new(instance);
        for (id, c) in extra.iter().enumerate() {
            propagator.add_learned(id, c);
        }
        let domain = Domain::for_instance(instance, scope.clone());
        Run {
            instance,
            max_len: config.max_conflict_len(instance.num_vars()),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            cutoff: config.incumbent_bound,
            config,
            scope,
            propagator,
            domain,
            path: Vec::new(),
            next_id: extra.len(),
            stats: seed_stats,
            delta: InferenceStats::new(),
            conflicts: Vec::new(),
            traces: Vec::new(),
            solution: None,
            nodes: 0,
            exhausted: false,
        }
    }

    fn reset_domain(&mut self) {
        self.domain = Domain::for_instance(self.instance, self.scope.clone());
        self.path.clear();
    }

    fn propagate(&mut self) -> bool {
        // the guard only trips on a propagation bug; the box stays sound either way
        let _ = self.propagator.propagate(&mut self.domain);
        !self.domain.is_failed()
    }

    /// Learns from the failure recorded on the domain.
    fn analyze(&mut self) -> NodeState {
        match analyze_1uip(self.domain.graph(), self.domain.level()) {
            Ok(conflict) => {
                if self.config.record_traces {
                    self.traces.push(ConflictTrace::new(&conflict, self.domain.bounds()));
                }
                let d = conflict.disjunction;
                if d.is_empty() || d.len() > self.max_len {
                    return NodeState::Pruned;
                }
                let learned = LearnedConstraint::new(d, &self.scope, Scope::Global);
                self.propagator.add_learned(self.next_id, &learned);
                self.next_id += 1;
                let singleton = learned.len() == 1;
                if singleton {
                    match upgrade_singleton(&learned.disjunction, &mut self.scope) {
                        Ok(_) => {
                            self.conflicts.push(learned);
                            self.reset_domain();
                            if !self.propagate() {
                                return NodeState::ScopeInfeasible;
                            }
                        }
                        Err(_) => {
                            self.conflicts.push(learned);
                            return NodeState::ScopeInfeasible;
                        }
                    }
                } else {
                    self.conflicts.push(learned);
                }
                NodeState::Pruned
            }
            Err(AnalysisAbort::RootFailure) => NodeState::ScopeInfeasible,
            Err(_) => NodeState::Pruned,
        }
    }

    /// Brings the domain to the node given by `target`, propagating every
    /// level on the way.
    fn sync(&mut self, target: &[Decision]) -> NodeState {
        let common = self
            .path
            .iter()
            .zip(target)
            .take_while(|(a, b)| a == b)
            .count();
        self.domain.backtrack_to(common as u32);
        self.path.truncate(common);
        if !self.propagate() {
            return self.analyze();
        }
        for (k, &(var, side, value)) in target.iter().enumerate().skip(common) {
            self.domain.new_level();
            self.path.push((var, side, value));
            let before = self.domain.num_changes();
            match self.domain.decide(var, side, value) {
                Ok(_) => {}
                // dominated by a scope tightening learned after the node was created
                Err(_) => return NodeState::Pruned,
            }
            let ok = self.propagate();
            if k + 1 == target.len() {
                let inferred = self.domain.num_changes().saturating_sub(before + 1) as u64;
                let branch_value = match side {
                    Side::Upper => value as i64,
                    Side::Lower => value as i64 - 1,
                };
                self.stats.record(var, branch_value, side, inferred);
                self.delta.record(var, branch_value, side, inferred);
            }
            if !ok {
                return self.analyze();
            }
        }
        NodeState::Open
    }

    fn search(&mut self) {
        let mut stack: Vec<Vec<Decision>> = vec![Vec::new()];
        while self.nodes < self.config.node_limit {
            let Some(node) = stack.pop() else {
                break;
            };
            self.nodes += 1;
            match self.sync(&node) {
                NodeState::Open => {}
                NodeState::Pruned => continue,
                NodeState::ScopeInfeasible => {
                    stack.clear();
                    break;
                }
            }
            let bounds = self.domain.bounds();
            let pseudo = pseudo_solution(bounds, self.instance.objective());
            let value = self.instance.objective_value(&pseudo);
            if value > self.cutoff - 1e-6 {
                continue;
            }
            if self.instance.rows().iter().all(|r| r.activity(&pseudo) <= r.rhs + FEAS_TOL) {
                self.cutoff = value;
                self.solution = Some((pseudo, value));
                continue;
            }
            let Ok((var, v)) = select_inference_branching(
                bounds,
                self.instance.integer_mask(),
                &self.stats,
                &pseudo,
                &mut self.rng,
            ) else {
                continue;
            };
            let mut down = node.clone();
            down.push((var, Side::Upper, v as f64));
            let mut up = node;
            up.push((var, Side::Lower, (v + 1) as f64));
            // the child holding the pseudo-solution value is explored first
            if pseudo[var] <= v as f64 {
                stack.push(up);
                stack.push(down);
            } else {
                stack.push(down);
                stack.push(up);
            }
        }
        self.exhausted = stack.is_empty();
    }

    fn into_outcome(self) -> CpOutcome {
        let status = if !self.exhausted {
            CpStatus::NodeLimitReached
        } else if self.solution.is_some() {
            CpStatus::SolvedOptimal
        } else {
            CpStatus::SolvedInfeasible
        };
        CpOutcome {
            conflicts: self.conflicts,
            bounds: self.scope,
            solution: self.solution,
            inference_stats: self.delta,
            status,
            nodes: self.nodes,
            traces: self.traces,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InstanceBuilder;

    #[test]
    fn node_limit_formula() {
        assert_eq!(node_limit_from_iters(2000), 2000);
        assert_eq!(node_limit_from_iters(10), 500);
        assert_eq!(node_limit_from_iters(1_000_000), 5000);
    }

    #[test]
    fn pseudo_solution_sign_rule() {
        let b = BoundBox::new(vec![0.0, 0.0], vec![5.0, 5.0]);
        assert_eq!(pseudo_solution(&b, &[1.0, -1.0]), vec![0.0, 5.0]);
        assert_eq!(pseudo_solution(&b, &[0.0, 0.0]), vec![0.0, 0.0]);
        let b = BoundBox::new(vec![-3.0], vec![7.0]);
        assert_eq!(pseudo_solution(&b, &[2.0]), vec![-3.0]);
    }

    #[test]
    fn inference_argmax_and_clamp() {
        let b = BoundBox::new(vec![0.0; 3], vec![4.0; 3]);
        let mut stats = InferenceStats::new();
        stats.record(2, 1, Side::Upper, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (var, v) = select_inference_branching(&b, &[true; 3], &stats, &[0.0, 0.0, 4.0], &mut rng).unwrap();
        assert_eq!(var, 2);
        assert_eq!(v, 3);
    }

    #[test]
    fn inference_ties_are_seeded() {
        let b = BoundBox::new(vec![0.0; 3], vec![1.0; 3]);
        let stats = InferenceStats::new();
        let pick = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            select_inference_branching(&b, &[true; 3], &stats, &[0.0; 3], &mut rng).unwrap()
        };
        assert_eq!(pick(7), pick(7));
    }

    #[test]
    fn all_fixed_reports_error() {
        let b = BoundBox::new(vec![1.0], vec![1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            select_inference_branching(&b, &[true], &InferenceStats::new(), &[1.0], &mut rng),
            Err(AllFixed)
        );
    }

    #[test]
    fn infeasible_toy_is_proved() {
        let mut b = InstanceBuilder::new("inf");
        let x = b.add_var("x1", 0.0, 1.0, true, 0.0);
        let y = b.add_var("x2", 0.0, 1.0, true, 0.0);
        b.add_ge("ge", &[(x, 1.0), (y, 1.0)], 3.0);
        b.add_le("le", &[(x, 1.0), (y, 1.0)], 1.0);
        let inst = b.build().unwrap();
        let out = cp_search(&inst, &inst.global_box(), CpConfig::default()).unwrap();
        assert_eq!(out.status, CpStatus::SolvedInfeasible);
        assert!(out.nodes <= 5);
        assert!(out.solution.is_none());
    }

    #[test]
    fn node_limit_one() {
        let mut b = InstanceBuilder::new("nl");
        let vars: Vec<usize> = (0..4).map(|j| b.add_var(format!("x{j}"), 0.0, 3.0, true, 0.0)).collect();
        let coefs: Vec<(usize, f64)> = vars.iter().map(|&j| (j, 1.0)).collect();
        b.add_eq("sum", &coefs, 5.0);
        let inst = b.build().unwrap();
        let cfg = CpConfig {
            node_limit: 1,
            ..CpConfig::default()
        };
        let out = cp_search(&inst, &inst.global_box(), cfg).unwrap();
        assert_eq!(out.status, CpStatus::NodeLimitReached);
        assert_eq!(out.nodes, 1);
    }

    #[test]
    fn rejects_continuous() {
        let mut b = InstanceBuilder::new("c");
        b.add_var("x", 0.0, 1.0, false, 1.0);
        b.add_var("y", 0.0, 1.0, true, 1.0);
        let inst = b.build().unwrap();
        assert_eq!(
            cp_search(&inst, &inst.global_box(), CpConfig::default()),
            Err(CpError::NotPureInteger)
        );
    }

    #[test]
    fn conflict_cap() {
        let cfg = CpConfig::default();
        assert_eq!(cfg.max_conflict_len(100), 5);
        assert_eq!(cfg.max_conflict_len(10), 1);
        assert_eq!(cfg.max_conflict_len(21), 2);
    }

    fn small_ip() -> Instance {
        // min -x - 2y - z  s.t. x + y + z <= 4, 2y - z <= 3, x <= 2y + 1, x,y,z in [0,3]
        let mut b = InstanceBuilder::new("small");
        let x = b.add_var("x", 0.0, 3.0, true, -1.0);
        let y = b.add_var("y", 0.0, 3.0, true, -2.0);
        let z = b.add_var("z", 0.0, 3.0, true, -1.0);
        b.add_le("cap", &[(x, 1.0), (y, 1.0), (z, 1.0)], 4.0);
        b.add_le("mix", &[(y, 2.0), (z, -1.0)], 3.0);
        b.add_le("link", &[(x, 1.0), (y, -2.0)], 1.0);
        b.build().unwrap()
    }

    fn brute_force(inst: &Instance) -> Option<f64> {
        let n = inst.num_vars();
        let mut best: Option<f64> = None;
        let mut x = inst.lower().to_vec();
        loop {
            if inst.is_feasible(&x) {
                let v = inst.objective_value(&x);
                best = Some(best.map_or(v, |b: f64| b.min(v)));
            }
            let mut j = 0;
            while j < n {
                if x[j] < inst.upper()[j] {
                    x[j] += 1.0;
                    break;
                }
                x[j] = inst.lower()[j];
                j += 1;
            }
            if j == n {
                return best;
            }
        }
    }

    #[test]
    fn exhausts_to_optimum() {
        let inst = small_ip();
        let cfg = CpConfig {
            node_limit: 100_000,
            ..CpConfig::default()
        };
        let out = cp_search(&inst, &inst.global_box(), cfg).unwrap();
        assert_eq!(out.status, CpStatus::SolvedOptimal);
        let (x, v) = out.solution.unwrap();
        assert!(inst.is_feasible(&x));
        assert!((v - brute_force(&inst).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn zero_objective_feasibility() {
        let mut b = InstanceBuilder::new("feas");
        let x = b.add_var("x", 0.0, 3.0, true, 0.0);
        let y = b.add_var("y", 0.0, 3.0, true, 0.0);
        b.add_ge("a", &[(x, 1.0), (y, 1.0)], 4.0);
        b.add_le("b", &[(x, 1.0), (y, -1.0)], 0.0);
        let inst = b.build().unwrap();
        let cfg = CpConfig {
            node_limit: 1000,
            ..CpConfig::default()
        };
        let out = cp_search(&inst, &inst.global_box(), cfg).unwrap();
        let (sol, v) = out.solution.expect("feasible");
        assert!(inst.is_feasible(&sol));
        assert_eq!(v, 0.0);
    }

    #[test]
    fn seeded_runs_match() {
        let inst = small_ip();
        let cfg = CpConfig {
            node_limit: 40,
            seed: 11,
            record_traces: true,
            ..CpConfig::default()
        };
        let a = cp_search(&inst, &inst.global_box(), cfg.clone()).unwrap();
        let b = cp_search(&inst, &inst.global_box(), cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn conflicts_hold_for_all_feasible_points() {
        let inst = small_ip();
        let cfg = CpConfig {
            node_limit: 100_000,
            max_conflict_frac: 1.0,
            ..CpConfig::default()
        };
        let out = cp_search(&inst, &inst.global_box(), cfg).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    let x = [a as f64, b as f64, c as f64];
                    if inst.is_feasible(&x) {
                        assert!(out.bounds.contains(&x));
                        for k in &out.conflicts {
                            assert!(k.is_satisfied_by(&x));
                        }
                    }
                }
            }
        }
    }
}
