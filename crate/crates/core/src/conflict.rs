//! Conflict graphs, 1-UIP analysis and bound disjunction constraints.
//!
//! The trail of bound changes doubles as the conflict graph: every propagated
//! change stores the positions of the bound changes it was derived from, so
//! arcs always point from lower to higher positions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BoundBox, EmptyBox, Row, RowKind, Side};

/// Identifies the constraint that justified a deduction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConstraintRef {
    /// A row of the instance.
    Row(usize),
    /// A learned constraint, by id in the owning store.
    Learned(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reason {
    /// Bound of the scope box the search started from.
    Initial,
    Branching,
    Propagation(ConstraintRef),
}

/// One vertex of the conflict graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundChange {
    pub var: usize,
    pub side: Side,
    pub value: f64,
    pub level: u32,
    pub reason: Reason,
    pub position: usize,
}

/// Trail of bound changes plus the antecedent arcs and the failure vertex.
#[derive(Debug, Clone, Default)]
pub struct ConflictGraph {
    trail: Vec<BoundChange>,
    antecedents: Vec<Vec<usize>>,
    false_antecedents: Vec<usize>,
    failed: bool,
    integer: Vec<bool>,
}

impl ConflictGraph {
    /// `integer[j]` tells the analysis which variables may appear in a
    /// bound disjunction.
    pub fn new(integer: Vec<bool>) -> Self {
        ConflictGraph {
            integer,
            ..Default::default()
        }
    }

    pub fn trail(&self) -> &[BoundChange] {
        &self.trail
    }

    pub fn len(&self) -> usize {
        self.trail.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trail.is_empty()
    }

    pub fn change(&self, pos: usize) -> &BoundChange {
        &self.trail[pos]
    }

    pub fn antecedents(&self, pos: usize) -> &[usize] {
        &self.antecedents[pos]
    }

    pub fn false_antecedents(&self) -> &[usize] {
        &self.false_antecedents
    }

    pub fn has_failure(&self) -> bool {
        self.failed
    }

    pub fn is_integer(&self, var: usize) -> bool {
        self.integer[var]
    }

    /// Appends a vertex and returns its position.
    ///
    /// Panics if an antecedent does not precede the new vertex.
    pub fn push(
        &mut self,
        var: usize,
        side: Side,
        value: f64,
        level: u32,
        reason: Reason,
        mut antecedents: Vec<usize>,
    ) -> usize {
        let position = self.trail.len();
        assert!(antecedents.iter().all(|&a| a < position));
        if matches!(reason, Reason::Branching | Reason::Initial) {
            antecedents.clear();
        }
        antecedents.sort_unstable();
        antecedents.dedup();
        self.trail.push(BoundChange {
            var,
            side,
            value,
            level,
            reason,
            position,
        });
        self.antecedents.push(antecedents);
        position
    }

    /// Records the `false` vertex.
    pub fn set_failure(&mut self, mut antecedents: Vec<usize>) {
        antecedents.sort_unstable();
        antecedents.dedup();
        self.false_antecedents = antecedents;
        self.failed = true;
    }

    pub fn clear_failure(&mut self) {
        self.false_antecedents.clear();
        self.failed = false;
    }

    /// Drops every vertex at or after `position`.
    pub fn truncate(&mut self, position: usize) {
        self.trail.truncate(position);
        self.antecedents.truncate(position);
        self.clear_failure();
    }
}

/// A bound predicate: `x ≥ value` for [`Side::Lower`], `x ≤ value` for
/// [`Side::Upper`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BoundLiteral {
    pub var: usize,
    pub side: Side,
    pub value: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LiteralStatus {
    True,
    False,
    Unfixed,
}

impl BoundLiteral {
    pub fn at_least(var: usize, value: i64) -> Self {
        BoundLiteral {
            var,
            side: Side::Lower,
            value,
        }
    }

    pub fn at_most(var: usize, value: i64) -> Self {
        BoundLiteral {
            var,
            side: Side::Upper,
            value,
        }
    }

    /// Integer negation: `¬(x ≤ μ) = (x ≥ μ+1)`, `¬(x ≥ λ) = (x ≤ λ-1)`.
    pub fn negated(self) -> Self {
        match self.side {
            Side::Lower => BoundLiteral::at_most(self.var, self.value - 1),
            Side::Upper => BoundLiteral::at_least(self.var, self.value + 1),
        }
    }

    pub fn holds_at(&self, point: &[f64]) -> bool {
        let v = point[self.var];
        match self.side {
            Side::Lower => v >= self.value as f64 - 1e-9,
            Side::Upper => v <= self.value as f64 + 1e-9,
        }
    }

    pub fn status(&self, bounds: &BoundBox) -> LiteralStatus {
        let (l, u) = (bounds.lower(self.var), bounds.upper(self.var));
        let val = self.value as f64;
        match self.side {
            Side::Lower if l >= val => LiteralStatus::True,
            Side::Lower if u < val => LiteralStatus::False,
            Side::Upper if u <= val => LiteralStatus::True,
            Side::Upper if l > val => LiteralStatus::False,
            _ => LiteralStatus::Unfixed,
        }
    }

    /// The bound whose value makes this literal false: the upper bound for
    /// `x ≥ λ`, the lower bound for `x ≤ μ`.
    pub fn falsifying_side(&self) -> Side {
        self.side.opposite()
    }
}

/// `∨_{i∈L} (x_i ≥ λ_i) ∨ ∨_{i∈U} (x_i ≤ μ_i)` over integer variables, with
/// `L ∩ U = ∅`. Literal lists are sorted by variable.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundDisjunction {
    lower_lits: Vec<(usize, i64)>,
    upper_lits: Vec<(usize, i64)>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DisjunctionError {
    #[error("variable {0} appears with both a lower and an upper literal")]
    MixedSides(usize),
}

impl BoundDisjunction {
    /// Builds a disjunction, merging literals on the same variable and side
    /// into the weakest one.
    pub fn new(literals: impl IntoIterator<Item = BoundLiteral>) -> Result<Self, DisjunctionError> {
        let mut lower: BTreeMap<usize, i64> = BTreeMap::new();
        let mut upper: BTreeMap<usize, i64> = BTreeMap::new();
        for lit in literals {
            match lit.side {
                Side::Lower => {
                    let e = lower.entry(lit.var).or_insert(lit.value);
                    *e = (*e).min(lit.value);
                }
                Side::Upper => {
                    let e = upper.entry(lit.var).or_insert(lit.value);
                    *e = (*e).max(lit.value);
                }
            }
        }
        if let Some(&var) = lower.keys().find(|v| upper.contains_key(v)) {
            return Err(DisjunctionError::MixedSides(var));
        }
        Ok(BoundDisjunction {
            lower_lits: lower.into_iter().collect(),
            upper_lits: upper.into_iter().collect(),
        })
    }

    pub fn empty() -> Self {
        BoundDisjunction {
            lower_lits: Vec::new(),
            upper_lits: Vec::new(),
        }
    }

    pub fn lower_lits(&self) -> &[(usize, i64)] {
        &self.lower_lits
    }

    pub fn upper_lits(&self) -> &[(usize, i64)] {
        &self.upper_lits
    }

    pub fn len(&self) -> usize {
        self.lower_lits.len() + self.upper_lits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn literals(&self) -> impl Iterator<Item = BoundLiteral> + '_ {
        self.lower_lits
            .iter()
            .map(|&(v, x)| BoundLiteral::at_least(v, x))
            .chain(self.upper_lits.iter().map(|&(v, x)| BoundLiteral::at_most(v, x)))
    }

    /// Every literal value lies within its variable's bounds in `bounds`.
    pub fn is_within(&self, bounds: &BoundBox) -> bool {
        self.literals().all(|lit| {
            let v = lit.value as f64;
            v >= bounds.lower(lit.var) && v <= bounds.upper(lit.var)
        })
    }

    /// Every literal is false under `bounds`.
    pub fn is_violated_by(&self, bounds: &BoundBox) -> bool {
        self.literals()
            .all(|lit| lit.status(bounds) == LiteralStatus::False)
    }
}

/// True iff some literal holds at `point`.
pub fn check_disjunction(d: &BoundDisjunction, point: &[f64]) -> bool {
    d.literals().any(|lit| lit.holds_at(point))
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AnalysisAbort {
    #[error("no failure recorded")]
    NoFailure,
    #[error("conflict cut contains a bound on continuous variable {0}")]
    Continuous(usize),
    /// Every reason sits at level 0: the scope problem itself is infeasible.
    #[error("failure derived without branching; scope infeasible")]
    RootFailure,
    #[error(transparent)]
    Unrepresentable(#[from] DisjunctionError),
}

/// Result of a successful analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct Conflict {
    pub disjunction: BoundDisjunction,
    /// Each cut literal (already negated) with the level of the bound change
    /// it came from. One entry per disjunction literal.
    pub cut: Vec<(BoundLiteral, u32)>,
    pub failure_level: u32,
}

fn to_integer_literal(change: &BoundChange) -> BoundLiteral {
    BoundLiteral {
        var: change.var,
        side: change.side,
        value: change.value.round() as i64,
    }
}

/// First-UIP analysis of the recorded failure.
///
/// Resolution runs at the deepest level touched by the failure, which is at
/// most `current_level`. Level-0 bound changes are facts of the scope box and
/// are dropped from the cut.
pub fn analyze_1uip(graph: &ConflictGraph, current_level: u32) -> Result<Conflict, AnalysisAbort> {
    if !graph.has_failure() {
        return Err(AnalysisAbort::NoFailure);
    }
    let mut cut: Vec<usize> = graph
        .false_antecedents()
        .iter()
        .copied()
        .filter(|&p| graph.change(p).level > 0)
        .collect();
    if cut.is_empty() {
        return Err(AnalysisAbort::RootFailure);
    }
    let deepest = cut
        .iter()
        .map(|&p| graph.change(p).level)
        .max()
        .unwrap();
    debug_assert!(deepest <= current_level);
    let mut in_cut = vec![false; graph.len()];
    for &p in &cut {
        in_cut[p] = true;
    }
    loop {
        let at_level: Vec<usize> = cut
            .iter()
            .copied()
            .filter(|&p| graph.change(p).level == deepest)
            .collect();
        if at_level.len() <= 1 {
            break;
        }
        let latest = *at_level.iter().max().unwrap();
        let ante = graph.antecedents(latest);
        if ante.is_empty() {
            // only the first change of a level is a decision, so this is unreachable
            // for well-formed trails
            break;
        }
        in_cut[latest] = false;
        cut.retain(|&p| p != latest);
        for &a in ante {
            if graph.change(a).level > 0 && !in_cut[a] {
                in_cut[a] = true;
                cut.push(a);
            }
        }
    }
    cut.sort_unstable();
    for &p in &cut {
        let c = graph.change(p);
        if !graph.is_integer(c.var) {
            return Err(AnalysisAbort::Continuous(c.var));
        }
    }
    let negated: Vec<(BoundLiteral, u32)> = cut
        .iter()
        .map(|&p| {
            let c = graph.change(p);
            (to_integer_literal(c).negated(), c.level)
        })
        .collect();
    let disjunction = BoundDisjunction::new(negated.iter().map(|&(l, _)| l))?;
    // keep the level of the literal that survived merging
    let cut_levels = disjunction
        .literals()
        .map(|lit| {
            let level = negated
                .iter()
                .filter(|(l, _)| *l == lit)
                .map(|&(_, lv)| lv)
                .max()
                .unwrap_or(0);
            (lit, level)
        })
        .collect();
    Ok(Conflict {
        disjunction,
        cut: cut_levels,
        failure_level: deepest,
    })
}

/// Linear form `Σ_{U} x_i − Σ_{L} x_i ≤ Σ_{U} u_i − Σ_{L} l_i − 1`.
///
/// Only exists when the disjunction forbids exactly one corner of the box,
/// i.e. every upper literal reads `x_i ≤ u_i − 1` and every lower literal
/// reads `x_i ≥ l_i + 1` against `global_box`. Otherwise the two forms cut
/// off different points and `None` is returned.
pub fn to_knapsack(d: &BoundDisjunction, global_box: &BoundBox) -> Option<Row> {
    if d.is_empty() {
        return None;
    }
    let mut coefs = Vec::with_capacity(d.len());
    let mut rhs = -1.0;
    for &(i, mu) in d.upper_lits() {
        let u = global_box.upper(i);
        if mu as f64 != u - 1.0 {
            return None;
        }
        coefs.push((i, 1.0));
        rhs += u;
    }
    for &(i, lambda) in d.lower_lits() {
        let l = global_box.lower(i);
        if lambda as f64 != l + 1.0 {
            return None;
        }
        coefs.push((i, -1.0));
        rhs -= l;
    }
    let mut row = Row::new(coefs, rhs);
    row.kind = linear_row_kind(&row, global_box);
    Some(row)
}

fn linear_row_kind(row: &Row, bounds: &BoundBox) -> RowKind {
    let binary = row
        .coefs
        .iter()
        .all(|&(j, _)| bounds.lower(j) == 0.0 && bounds.upper(j) == 1.0);
    if !binary || row.coefs.is_empty() {
        RowKind::Linear
    } else if row.rhs == -1.0 && row.coefs.iter().all(|&(_, a)| a == -1.0) {
        RowKind::SetCover
    } else if row.rhs >= 0.0 && row.coefs.iter().all(|&(_, a)| a > 0.0) {
        RowKind::Knapsack
    } else {
        RowKind::Linear
    }
}

/// Applies a single-literal conflict as a bound change on `bounds`.
///
/// Returns whether the box changed; an empty box means the scope problem is
/// infeasible.
pub fn upgrade_singleton(d: &BoundDisjunction, bounds: &mut BoundBox) -> Result<bool, EmptyBox> {
    assert_eq!(d.len(), 1, "upgrade_singleton needs exactly one literal");
    let lit = d.literals().next().unwrap();
    bounds.tighten(lit.var, lit.side, lit.value as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scope {
    Global,
    /// Valid in the subtree of the given MIP node.
    Local(usize),
}

/// A conflict kept for propagation, with its linear form when one
/// exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedConstraint {
    pub disjunction: BoundDisjunction,
    pub linear: Option<Row>,
    pub scope: Scope,
}

impl LearnedConstraint {
    pub fn new(disjunction: BoundDisjunction, reference: &BoundBox, scope: Scope) -> Self {
        let linear = to_knapsack(&disjunction, reference);
        LearnedConstraint {
            disjunction,
            linear,
            scope,
        }
    }

    pub fn len(&self) -> usize {
        self.disjunction.len()
    }

    pub fn is_empty(&self) -> bool {
        self.disjunction.is_empty()
    }

    pub fn is_linear(&self) -> bool {
        self.linear.is_some()
    }

    pub fn is_satisfied_by(&self, point: &[f64]) -> bool {
        check_disjunction(&self.disjunction, point)
    }
}

/// What the analysis saw when it produced a conflict; kept for auditing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictTrace {
    pub disjunction: BoundDisjunction,
    pub literal_levels: Vec<u32>,
    pub failure_level: u32,
    /// Box of the node at the moment the failure was detected.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ConflictTrace {
    pub fn new(conflict: &Conflict, at_failure: &BoundBox) -> Self {
        ConflictTrace {
            disjunction: conflict.disjunction.clone(),
            literal_levels: conflict.cut.iter().map(|&(_, l)| l).collect(),
            failure_level: conflict.failure_level,
            lower: at_failure.lowers().to_vec(),
            upper: at_failure.uppers().to_vec(),
        }
    }

    pub fn failure_box(&self) -> BoundBox {
        BoundBox::new(self.lower.clone(), self.upper.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binary_box(n: usize) -> BoundBox {
        BoundBox::new(vec![0.0; n], vec![1.0; n])
    }

    #[test]
    fn one_uip_single_implication() {
        // x1 ≥ 1 at level 1 propagates x2 ≤ 0, which fails
        let mut g = ConflictGraph::new(vec![true, true]);
        let d = g.push(0, Side::Lower, 1.0, 1, Reason::Branching, vec![]);
        let p = g.push(1, Side::Upper, 0.0, 1, Reason::Propagation(ConstraintRef::Row(0)), vec![d]);
        g.set_failure(vec![p]);
        let c = analyze_1uip(&g, 1).unwrap();
        assert_eq!(c.disjunction, BoundDisjunction::new([BoundLiteral::at_least(1, 1)]).unwrap());
        assert_eq!(c.cut, vec![(BoundLiteral::at_least(1, 1), 1)]);
    }

    #[test]
    fn one_uip_two_decisions() {
        let mut g = ConflictGraph::new(vec![true, true]);
        let d1 = g.push(0, Side::Lower, 1.0, 1, Reason::Branching, vec![]);
        let d2 = g.push(1, Side::Lower, 1.0, 2, Reason::Branching, vec![]);
        g.set_failure(vec![d1, d2]);
        let c = analyze_1uip(&g, 2).unwrap();
        let expected =
            BoundDisjunction::new([BoundLiteral::at_most(0, 0), BoundLiteral::at_most(1, 0)]).unwrap();
        assert_eq!(c.disjunction, expected);
        assert_eq!(c.cut.iter().filter(|&&(_, l)| l == 2).count(), 1);
    }

    #[test]
    fn one_uip_resolves_to_single_deepest_literal() {
        // level 1: a; level 2: b decides, c <- b, d <- b,c, fail <- a,c,d
        let mut g = ConflictGraph::new(vec![true; 4]);
        let a = g.push(0, Side::Lower, 1.0, 1, Reason::Branching, vec![]);
        let b = g.push(1, Side::Lower, 1.0, 2, Reason::Branching, vec![]);
        let r = Reason::Propagation(ConstraintRef::Row(0));
        let c = g.push(2, Side::Upper, 0.0, 2, r, vec![b]);
        let d = g.push(3, Side::Upper, 0.0, 2, r, vec![b, c]);
        g.set_failure(vec![a, c, d]);
        let conf = analyze_1uip(&g, 2).unwrap();
        // c and d resolve back to b, the UIP
        assert_eq!(conf.cut.iter().filter(|&&(_, l)| l == 2).count(), 1);
        assert_eq!(conf.disjunction.len(), 2);
        assert_eq!(conf.disjunction.upper_lits(), &[(0, 0), (1, 0)]);
    }

    #[test]
    fn level_zero_failure_is_root_failure() {
        let mut g = ConflictGraph::new(vec![true]);
        let p = g.push(0, Side::Upper, 0.0, 0, Reason::Propagation(ConstraintRef::Row(0)), vec![]);
        g.set_failure(vec![p]);
        assert_eq!(analyze_1uip(&g, 0), Err(AnalysisAbort::RootFailure));
    }

    #[test]
    fn continuous_cut_aborts() {
        let mut g = ConflictGraph::new(vec![false]);
        let d = g.push(0, Side::Lower, 0.5, 1, Reason::Branching, vec![]);
        g.set_failure(vec![d]);
        assert_eq!(analyze_1uip(&g, 1), Err(AnalysisAbort::Continuous(0)));
    }

    #[test]
    fn knapsack_form_binary() {
        let d = BoundDisjunction::new([BoundLiteral::at_most(0, 0), BoundLiteral::at_least(1, 1)]).unwrap();
        let row = to_knapsack(&d, &binary_box(2)).unwrap();
        assert_eq!(row.coefs, vec![(0, 1.0), (1, -1.0)]);
        assert_eq!(row.rhs, 0.0);
    }

    #[test]
    fn knapsack_form_requires_global_bounds() {
        let d = BoundDisjunction::new([BoundLiteral::at_most(0, 2)]).unwrap();
        let b = BoundBox::new(vec![0.0], vec![5.0]);
        assert!(to_knapsack(&d, &b).is_none());
        let single = BoundDisjunction::new([BoundLiteral::at_most(3, 0)]).unwrap();
        let row = to_knapsack(&single, &binary_box(4)).unwrap();
        assert_eq!(row.coefs, vec![(3, 1.0)]);
        assert_eq!(row.rhs, 0.0);
        assert_eq!(row.kind, RowKind::Knapsack);
    }

    #[test]
    fn singleton_upgrade() {
        let mut b = BoundBox::new(vec![0.0, 0.0, 0.0], vec![1.0, 9.0, 0.0]);
        let d = BoundDisjunction::new([BoundLiteral::at_most(1, 3)]).unwrap();
        assert_eq!(upgrade_singleton(&d, &mut b), Ok(true));
        assert_eq!(b.upper(1), 3.0);
        let d = BoundDisjunction::new([BoundLiteral::at_least(0, 1)]).unwrap();
        assert_eq!(upgrade_singleton(&d, &mut b), Ok(true));
        assert!(b.is_fixed(0));
        let d = BoundDisjunction::new([BoundLiteral::at_least(2, 1)]).unwrap();
        assert!(upgrade_singleton(&d, &mut b).is_err());
    }

    #[test]
    fn disjunction_check() {
        let d = BoundDisjunction::new([BoundLiteral::at_most(0, 0), BoundLiteral::at_least(1, 1)]).unwrap();
        assert!(check_disjunction(&d, &[0.0, 0.0]));
        assert!(!check_disjunction(&d, &[1.0, 0.0]));
        assert!(!check_disjunction(&BoundDisjunction::empty(), &[0.0, 1.0]));
    }

    #[test]
    fn merge_keeps_weakest_and_rejects_mixed() {
        let d = BoundDisjunction::new([BoundLiteral::at_least(0, 4), BoundLiteral::at_least(0, 3)]).unwrap();
        assert_eq!(d.lower_lits(), &[(0, 3)]);
        assert!(BoundDisjunction::new([BoundLiteral::at_least(0, 4), BoundLiteral::at_most(0, 1)]).is_err());
    }

    #[test]
    fn negation_over_integers() {
        assert_eq!(BoundLiteral::at_most(2, 3).negated(), BoundLiteral::at_least(2, 4));
        assert_eq!(BoundLiteral::at_least(2, 3).negated(), BoundLiteral::at_most(2, 2));
    }
}
