//! Domain propagation with explanations.
//!
//! Linear rows use residual-activity bound strengthening, knapsack rows an
//! integer single pass over weight-sorted items, and set-cover rows as well as
//! learned bound disjunctions a two-watched-literal scheme. Every deduction is
//! pushed onto the [`Domain`] trail together with the bounds it read, which is
//! what conflict analysis later walks backwards.

use thiserror::Error;

use crate::conflict::{
    BoundChange, BoundDisjunction, BoundLiteral, ConflictGraph, ConstraintRef, LearnedConstraint,
    LiteralStatus, Reason,
};
use crate::model::{BoundBox, EmptyBox, Instance, Row, RowKind, Side, FEAS_TOL, INT_TOL};

/// Bounds of the search node plus the trail that produced them.
#[derive(Debug, Clone)]
pub struct Domain {
    bounds: BoundBox,
    graph: ConflictGraph,
    lb_src: Vec<Option<usize>>,
    ub_src: Vec<Option<usize>>,
    // previous (value, source) per trail entry, for backtracking
    undo: Vec<(f64, Option<usize>)>,
    level_starts: Vec<usize>,
    integer: Vec<bool>,
}

/// The domain became empty; the failure is recorded on the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("domain wipe-out")]
pub struct Wipeout;

impl Domain {
    pub fn new(bounds: BoundBox, integer: Vec<bool>) -> Domain {
        let n = bounds.len();
        assert_eq!(integer.len(), n);
        Domain {
            bounds,
            graph: ConflictGraph::new(integer.clone()),
            lb_src: vec![None; n],
            ub_src: vec![None; n],
            undo: Vec::new(),
            level_starts: Vec::new(),
            integer,
        }
    }

    pub fn for_instance(instance: &Instance, bounds: BoundBox) -> Domain {
        Domain::new(bounds, instance.integer_mask().to_vec())
    }

    pub fn bounds(&self) -> &BoundBox {
        &self.bounds
    }

    pub fn graph(&self) -> &ConflictGraph {
        &self.graph
    }

    pub fn integer(&self) -> &[bool] {
        &self.integer
    }

    pub fn level(&self) -> u32 {
        self.level_starts.len() as u32
    }

    pub fn num_changes(&self) -> usize {
        self.graph.len()
    }

    pub fn is_failed(&self) -> bool {
        self.graph.has_failure()
    }

    /// Trail position that set the current bound, if any.
    pub fn source(&self, var: usize, side: Side) -> Option<usize> {
        match side {
            Side::Lower => self.lb_src[var],
            Side::Upper => self.ub_src[var],
        }
    }

    pub fn new_level(&mut self) {
        self.level_starts.push(self.graph.len());
    }

    /// Undoes every change above `level`.
    pub fn backtrack_to(&mut self, level: u32) {
        if level >= self.level() {
            self.graph.clear_failure();
            return;
        }
        let start = self.level_starts[level as usize];
        for pos in (start..self.graph.len()).rev() {
            let change = self.graph.change(pos).clone();
            let (prev, prev_src) = self.undo[pos];
            self.restore(change.var, change.side, prev, prev_src);
        }
        self.graph.truncate(start);
        self.undo.truncate(start);
        self.level_starts.truncate(level as usize);
    }

    fn restore(&mut self, var: usize, side: Side, value: f64, src: Option<usize>) {
        self.bounds.restore(var, side, value);
        match side {
            Side::Lower => self.lb_src[var] = src,
            Side::Upper => self.ub_src[var] = src,
        }
    }

    fn record(&mut self, var: usize, side: Side, value: f64, reason: Reason, antecedents: Vec<usize>) {
        let prev = (self.bounds.bound(var, side), self.source(var, side));
        let changed = self.bounds.tighten(var, side, value);
        debug_assert!(matches!(changed, Ok(true)));
        let pos = self
            .graph
            .push(var, side, self.bounds.bound(var, side), self.level(), reason, antecedents);
        self.undo.push(prev);
        match side {
            Side::Lower => self.lb_src[var] = Some(pos),
            Side::Upper => self.ub_src[var] = Some(pos),
        }
    }

    fn would_change(&self, var: usize, side: Side, value: f64) -> Result<bool, EmptyBox> {
        let mut probe = BoundBox::new(
            vec![self.bounds.lower(var)],
            vec![self.bounds.upper(var)],
        );
        probe.tighten(0, side, value).map_err(|e| EmptyBox { var, ..e })
    }

    /// Applies a branching decision at the current level.
    ///
    /// A decision that crosses the opposite bound returns the error without
    /// recording a failure: the node is dominated by a tighter scope box.
    pub fn decide(&mut self, var: usize, side: Side, value: f64) -> Result<bool, EmptyBox> {
        if !self.would_change(var, side, value)? {
            return Ok(false);
        }
        self.record(var, side, value, Reason::Branching, Vec::new());
        Ok(true)
    }

    /// Applies a deduction explained by the bounds in `explanation`.
    pub fn infer(
        &mut self,
        var: usize,
        side: Side,
        value: f64,
        reason: ConstraintRef,
        explanation: &[(usize, Side)],
    ) -> Result<bool, Wipeout> {
        match self.would_change(var, side, value) {
            Ok(false) => Ok(false),
            Ok(true) => {
                let ante = self.sources(explanation);
                self.record(var, side, value, Reason::Propagation(reason), ante);
                Ok(true)
            }
            Err(_) => {
                let mut ante = self.sources(explanation);
                ante.extend(self.source(var, side.opposite()));
                self.graph.set_failure(ante);
                Err(Wipeout)
            }
        }
    }

    /// Records a failure read off the bounds in `explanation`.
    pub fn fail(&mut self, explanation: &[(usize, Side)]) -> Wipeout {
        let ante = self.sources(explanation);
        self.graph.set_failure(ante);
        Wipeout
    }

    fn sources(&self, explanation: &[(usize, Side)]) -> Vec<usize> {
        explanation
            .iter()
            .filter_map(|&(k, s)| self.source(k, s))
            .collect()
    }

    /// Tightens the box at level 0 without creating a decision.
    ///
    /// Only valid while no decision level is open.
    pub fn tighten_root(&mut self, var: usize, side: Side, value: f64) -> Result<bool, EmptyBox> {
        assert_eq!(self.level(), 0);
        if !self.would_change(var, side, value)? {
            return Ok(false);
        }
        self.record(var, side, value, Reason::Initial, Vec::new());
        Ok(true)
    }
}

/// A single bound tightening with the bounds it was read from.
#[derive(Debug, Clone, PartialEq)]
pub struct Deduction {
    pub var: usize,
    pub side: Side,
    pub value: f64,
    pub explanation: Vec<(usize, Side)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RowOutcome {
    Deductions(Vec<Deduction>),
    /// The row cannot be satisfied inside the box; the explanation lists the
    /// bounds whose residual activity proves it.
    Infeasible(Vec<(usize, Side)>),
}

impl RowOutcome {
    pub fn deductions(&self) -> &[Deduction] {
        match self {
            RowOutcome::Deductions(d) => d,
            RowOutcome::Infeasible(_) => &[],
        }
    }

    pub fn is_infeasible(&self) -> bool {
        matches!(self, RowOutcome::Infeasible(_))
    }
}

fn read_side(a: f64) -> Side {
    if a > 0.0 {
        Side::Lower
    } else {
        Side::Upper
    }
}

fn min_contribution(a: f64, bounds: &BoundBox, k: usize) -> f64 {
    if a > 0.0 {
        a * bounds.lower(k)
    } else {
        a * bounds.upper(k)
    }
}

/// Smallest continuous bound move worth recording.
fn min_improvement(bounds: &BoundBox, j: usize) -> f64 {
    let range = bounds.upper(j) - bounds.lower(j);
    if range.is_finite() {
        (1e-3 * range).max(FEAS_TOL)
    } else {
        // any finite value improves an infinite bound
        FEAS_TOL
    }
}

/// Bound strengthening on `row·x ≤ rhs` from residual minimum activities.
pub fn propagate_linear_row(row: &Row, bounds: &BoundBox, integer: &[bool]) -> RowOutcome {
    let mut finite_sum = 0.0;
    let mut inf_count = 0usize;
    for &(k, a) in &row.coefs {
        let c = min_contribution(a, bounds, k);
        if c.is_finite() {
            finite_sum += c;
        } else {
            inf_count += 1;
        }
    }
    let all_read = || -> Vec<(usize, Side)> { row.coefs.iter().map(|&(k, a)| (k, read_side(a))).collect() };
    if inf_count == 0 && finite_sum > row.rhs + FEAS_TOL {
        return RowOutcome::Infeasible(all_read());
    }
    if inf_count > 1 {
        return RowOutcome::Deductions(Vec::new());
    }
    let mut out = Vec::new();
    for &(j, a) in &row.coefs {
        let cj = min_contribution(a, bounds, j);
        let residual = if cj.is_finite() {
            if inf_count > 0 {
                continue;
            }
            finite_sum - cj
        } else {
            finite_sum
        };
        let slack = (row.rhs - residual) / a;
        let explanation: Vec<(usize, Side)> = row
            .coefs
            .iter()
            .filter(|&&(k, _)| k != j)
            .map(|&(k, ak)| (k, read_side(ak)))
            .collect();
        if a > 0.0 {
            let value = if integer[j] { (slack + INT_TOL).floor() } else { slack };
            let u = bounds.upper(j);
            let improves = if integer[j] { value < u } else { u - value > min_improvement(bounds, j) };
            if improves {
                out.push(Deduction {
                    var: j,
                    side: Side::Upper,
                    value,
                    explanation,
                });
            }
        } else {
            let value = if integer[j] { (slack - INT_TOL).ceil() } else { slack };
            let l = bounds.lower(j);
            let improves = if integer[j] { value > l } else { value - l > min_improvement(bounds, j) };
            if improves {
                out.push(Deduction {
                    var: j,
                    side: Side::Lower,
                    value,
                    explanation,
                });
            }
        }
    }
    RowOutcome::Deductions(out)
}

/// `Σ w_j x_j ≤ C` over binaries with integer weights, items sorted by
/// decreasing weight.
#[derive(Debug, Clone, PartialEq)]
pub struct KnapsackRow {
    items: Vec<(usize, i64)>,
    capacity: i64,
}

impl KnapsackRow {
    /// Returns `None` unless the row is classified as a knapsack.
    pub fn from_row(row: &Row) -> Option<KnapsackRow> {
        if row.kind != RowKind::Knapsack {
            return None;
        }
        let mut items: Vec<(usize, i64)> = row.coefs.iter().map(|&(j, w)| (j, w as i64)).collect();
        items.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        Some(KnapsackRow {
            items,
            capacity: (row.rhs + FEAS_TOL).floor() as i64,
        })
    }

    pub fn propagate(&self, bounds: &BoundBox) -> RowOutcome {
        let mut min_weight = 0i64;
        let mut fixed_one = Vec::new();
        for &(j, w) in &self.items {
            if bounds.lower(j) >= 1.0 {
                min_weight += w;
                fixed_one.push((j, Side::Lower));
            }
        }
        if min_weight > self.capacity {
            return RowOutcome::Infeasible(fixed_one);
        }
        let mut out = Vec::new();
        for &(j, w) in &self.items {
            if min_weight + w <= self.capacity {
                break;
            }
            if bounds.lower(j) < 1.0 && bounds.upper(j) > 0.0 {
                out.push(Deduction {
                    var: j,
                    side: Side::Upper,
                    value: 0.0,
                    explanation: fixed_one.clone(),
                });
            }
        }
        RowOutcome::Deductions(out)
    }
}

/// Knapsack propagation of a row classified as a knapsack.
pub fn propagate_knapsack(row: &Row, bounds: &BoundBox) -> RowOutcome {
    match KnapsackRow::from_row(row) {
        Some(k) => k.propagate(bounds),
        None => RowOutcome::Deductions(Vec::new()),
    }
}

/// Disjunction of bound literals with two watched positions.
#[derive(Debug, Clone, PartialEq)]
pub struct WatchedClause {
    lits: Vec<BoundLiteral>,
    watch: [usize; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClauseOutcome {
    None,
    Deduce(Deduction),
    Conflict(Vec<(usize, Side)>),
}

impl WatchedClause {
    pub fn new(lits: Vec<BoundLiteral>) -> WatchedClause {
        let watch = [0, if lits.len() > 1 { 1 } else { 0 }];
        WatchedClause { lits, watch }
    }

    /// `Σ x_j ≥ 1` rows become clauses of `x_j ≥ 1` literals.
    pub fn from_setcover(row: &Row) -> WatchedClause {
        WatchedClause::new(row.coefs.iter().map(|&(j, _)| BoundLiteral::at_least(j, 1)).collect())
    }

    pub fn from_disjunction(d: &BoundDisjunction) -> WatchedClause {
        WatchedClause::new(d.literals().collect())
    }

    pub fn literals(&self) -> &[BoundLiteral] {
        &self.lits
    }

    pub fn watches(&self) -> [usize; 2] {
        self.watch
    }

    fn explanation_except(&self, keep: Option<usize>) -> Vec<(usize, Side)> {
        self.lits
            .iter()
            .enumerate()
            .filter(|&(i, _)| Some(i) != keep)
            .map(|(_, l)| (l.var, l.falsifying_side()))
            .collect()
    }

    fn deduce(&self, i: usize) -> ClauseOutcome {
        let lit = self.lits[i];
        ClauseOutcome::Deduce(Deduction {
            var: lit.var,
            side: lit.side,
            value: lit.value as f64,
            explanation: self.explanation_except(Some(i)),
        })
    }

    pub fn propagate(&mut self, bounds: &BoundBox) -> ClauseOutcome {
        match self.lits.len() {
            0 => return ClauseOutcome::Conflict(Vec::new()),
            1 => {
                return match self.lits[0].status(bounds) {
                    LiteralStatus::True => ClauseOutcome::None,
                    LiteralStatus::False => ClauseOutcome::Conflict(self.explanation_except(None)),
                    LiteralStatus::Unfixed => self.deduce(0),
                }
            }
            _ => {}
        }
        let status = |c: &Self, i: usize| c.lits[i].status(bounds);
        if status(self, self.watch[0]) == LiteralStatus::True
            || status(self, self.watch[1]) == LiteralStatus::True
        {
            return ClauseOutcome::None;
        }
        for w in 0..2 {
            if status(self, self.watch[w]) != LiteralStatus::False {
                continue;
            }
            let other = self.watch[1 - w];
            let replacement = (0..self.lits.len())
                .find(|&k| k != self.watch[w] && k != other && status(self, k) != LiteralStatus::False);
            if let Some(k) = replacement {
                self.watch[w] = k;
                if status(self, k) == LiteralStatus::True {
                    return ClauseOutcome::None;
                }
            }
        }
        match (status(self, self.watch[0]), status(self, self.watch[1])) {
            (LiteralStatus::False, LiteralStatus::False) => {
                ClauseOutcome::Conflict(self.explanation_except(None))
            }
            (LiteralStatus::False, LiteralStatus::Unfixed) => self.deduce(self.watch[1]),
            (LiteralStatus::Unfixed, LiteralStatus::False) => self.deduce(self.watch[0]),
            _ => ClauseOutcome::None,
        }
    }
}

/// Two-watched propagation of a set-cover row or a learned disjunction.
pub fn propagate_setcover(clause: &mut WatchedClause, bounds: &BoundBox) -> ClauseOutcome {
    clause.propagate(bounds)
}

#[derive(Debug, Clone, PartialEq)]
enum Compiled {
    Linear(Row),
    Knapsack(KnapsackRow),
    Clause(WatchedClause),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropagationOutcome {
    Reduced,
    Fixpoint,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropagationResult {
    pub outcome: PropagationOutcome,
    pub deductions: Vec<BoundChange>,
    pub infeasible_row: Option<ConstraintRef>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PropagationError {
    /// More row evaluations than a terminating propagation can need.
    #[error("propagation did not reach a fixpoint after {0} row evaluations")]
    IterationGuard(usize),
}

/// Constraint set compiled for propagation.
///
/// Learned constraints are appended after the instance rows; local ones can
/// be removed again with [`Propagator::truncate`].
#[derive(Debug, Clone)]
pub struct Propagator {
    entries: Vec<(ConstraintRef, Compiled)>,
    integer: Vec<bool>,
}

impl Propagator {
    pub fn new(instance: &Instance) -> Propagator {
        let mut p = Propagator {
            entries: Vec::with_capacity(instance.num_rows()),
            integer: instance.integer_mask().to_vec(),
        };
        for (i, row) in instance.rows().iter().enumerate() {
            p.push_row(ConstraintRef::Row(i), row);
        }
        p
    }

    /// Builds a propagator over rows in the given order; used to check that
    /// the fixpoint does not depend on it.
    pub fn with_order(instance: &Instance, order: &[usize]) -> Propagator {
        let mut p = Propagator {
            entries: Vec::with_capacity(order.len()),
            integer: instance.integer_mask().to_vec(),
        };
        for &i in order {
            p.push_row(ConstraintRef::Row(i), instance.row(i));
        }
        p
    }

    fn push_row(&mut self, id: ConstraintRef, row: &Row) {
        let compiled = match row.kind {
            RowKind::Knapsack => Compiled::Knapsack(KnapsackRow::from_row(row).unwrap()),
            RowKind::SetCover => Compiled::Clause(WatchedClause::from_setcover(row)),
            RowKind::Linear => Compiled::Linear(row.clone()),
        };
        self.entries.push((id, compiled));
    }

    /// Adds a learned constraint, as a row when it has a linear form.
    pub fn add_learned(&mut self, id: usize, constraint: &LearnedConstraint) {
        let id = ConstraintRef::Learned(id);
        match &constraint.linear {
            Some(row) => self.push_row(id, row),
            None => self
                .entries
                .push((id, Compiled::Clause(WatchedClause::from_disjunction(&constraint.disjunction)))),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn truncate(&mut self, len: usize) {
        self.entries.truncate(len);
    }

    /// Round-robin over all constraints until a full pass deduces nothing or
    /// the domain is wiped out.
    pub fn propagate(&mut self, domain: &mut Domain) -> Result<PropagationResult, PropagationError> {
        let start = domain.num_changes();
        let guard = 1000 * self.entries.len().max(1);
        let mut evaluations = 0usize;
        let finish = |domain: &Domain, infeasible: Option<ConstraintRef>| {
            let deductions: Vec<BoundChange> = domain.graph().trail()[start..].to_vec();
            let outcome = if infeasible.is_some() {
                PropagationOutcome::Infeasible
            } else if deductions.is_empty() {
                PropagationOutcome::Fixpoint
            } else {
                PropagationOutcome::Reduced
            };
            PropagationResult {
                outcome,
                deductions,
                infeasible_row: infeasible,
            }
        };
        if domain.bounds().is_empty() {
            return Ok(finish(domain, None));
        }
        loop {
            let mut changed = false;
            for (id, compiled) in self.entries.iter_mut() {
                evaluations += 1;
                if evaluations > guard {
                    return Err(PropagationError::IterationGuard(evaluations));
                }
                let (deductions, failure) = match compiled {
                    Compiled::Linear(row) => match propagate_linear_row(row, domain.bounds(), &self.integer) {
                        RowOutcome::Deductions(d) => (d, None),
                        RowOutcome::Infeasible(e) => (Vec::new(), Some(e)),
                    },
                    Compiled::Knapsack(k) => match k.propagate(domain.bounds()) {
                        RowOutcome::Deductions(d) => (d, None),
                        RowOutcome::Infeasible(e) => (Vec::new(), Some(e)),
                    },
                    Compiled::Clause(c) => match c.propagate(domain.bounds()) {
                        ClauseOutcome::None => (Vec::new(), None),
                        ClauseOutcome::Deduce(d) => (vec![d], None),
                        ClauseOutcome::Conflict(e) => (Vec::new(), Some(e)),
                    },
                };
                if let Some(expl) = failure {
                    domain.fail(&expl);
                    return Ok(finish(domain, Some(*id)));
                }
                for d in deductions {
                    match domain.infer(d.var, d.side, d.value, *id, &d.explanation) {
                        Ok(true) => changed = true,
                        Ok(false) => {}
                        Err(Wipeout) => return Ok(finish(domain, Some(*id))),
                    }
                }
            }
            if !changed {
                return Ok(finish(domain, None));
            }
        }
    }
}

/// Propagates the instance rows on `domain` until fixpoint.
pub fn propagate_to_fixpoint(
    instance: &Instance,
    domain: &mut Domain,
) -> Result<PropagationResult, PropagationError> {
    Propagator::new(instance).propagate(domain)
}
