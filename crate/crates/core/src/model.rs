//! Problem data: the integer program, its variable box, and the IP/BP/LP/MIP
//! classification.
//!
//! Every row is stored in `a·x ≤ b` form. `≥` rows are negated on ingestion and
//! equalities become two rows, so propagation and the LP only ever see one
//! sense.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Primal feasibility tolerance used for rows and bounds.
pub const FEAS_TOL: f64 = 1e-6;
/// Distance to the nearest integer below which a value counts as integral.
pub const INT_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("variable `{name}` is integer but has an infinite bound [{lower}, {upper}]")]
    InfiniteIntegerBound { name: String, lower: f64, upper: f64 },
    #[error("variable `{name}` has lower bound {lower} above upper bound {upper}")]
    BoundOrder { name: String, lower: f64, upper: f64 },
    #[error("row `{row}` references variable index {var} but only {num_vars} variables exist")]
    UnknownVariable { row: String, var: usize, num_vars: usize },
    #[error("non-finite value {value} in {context}")]
    NonFinite { context: String, value: f64 },
}

/// Tightening would make a variable's domain empty.
#[derive(Debug, Error, Clone, Copy, PartialEq)]
#[error("empty box: variable {var} would get {side:?} bound {value} past its opposite bound")]
pub struct EmptyBox {
    pub var: usize,
    pub side: Side,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    Lower,
    Upper,
}

impl Side {
    pub fn opposite(self) -> Side {
        match self {
            Side::Lower => Side::Upper,
            Side::Upper => Side::Lower,
        }
    }
}

/// Structural class of a row, used to pick a specialised propagator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowKind {
    Linear,
    /// Binary variables, positive integer weights: `Σ w_j x_j ≤ C`.
    Knapsack,
    /// `Σ x_j ≥ 1` over binaries, stored as `-Σ x_j ≤ -1`.
    SetCover,
}

/// A single `coefs·x ≤ rhs` row. Indices are unique and coefficients nonzero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub coefs: Vec<(usize, f64)>,
    pub rhs: f64,
    pub kind: RowKind,
}

impl Row {
    /// Builds a row, merging repeated indices and dropping zero coefficients.
    /// The kind is left as [`RowKind::Linear`] until the owning instance
    /// classifies it.
    pub fn new(coefs: impl IntoIterator<Item = (usize, f64)>, rhs: f64) -> Row {
        let mut merged: Vec<(usize, f64)> = coefs.into_iter().collect();
        merged.sort_by_key(|&(j, _)| j);
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(merged.len());
        for (j, a) in merged {
            match out.last_mut() {
                Some(last) if last.0 == j => last.1 += a,
                _ => out.push((j, a)),
            }
        }
        out.retain(|&(_, a)| a != 0.0);
        Row {
            coefs: out,
            rhs,
            kind: RowKind::Linear,
        }
    }

    pub fn activity(&self, x: &[f64]) -> f64 {
        self.coefs.iter().map(|&(j, a)| a * x[j]).sum()
    }

    pub fn is_satisfied(&self, x: &[f64]) -> bool {
        self.activity(x) <= self.rhs + FEAS_TOL
    }
}

/// Problem class by variable types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProblemClass {
    /// Pure integer program.
    IP,
    /// Pure binary program.
    BP,
    /// No integer variables.
    LP,
    MIP,
}

impl ProblemClass {
    /// Both IP and BP instances are pure integer programs.
    pub fn is_pure_integer(self) -> bool {
        matches!(self, ProblemClass::IP | ProblemClass::BP)
    }
}

/// `min c·x  s.t.  A x ≤ b,  l ≤ x ≤ u,  x_j ∈ ℤ for j ∈ I`.
///
/// Immutable once built; use [`InstanceBuilder`] to construct one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    name: String,
    objective: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    integer: Vec<bool>,
    rows: Vec<Row>,
    var_names: Vec<String>,
    row_names: Vec<String>,
}

impl Instance {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn objective(&self) -> &[f64] {
        &self.objective
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &Row {
        &self.rows[i]
    }

    pub fn is_integer(&self, j: usize) -> bool {
        self.integer[j]
    }

    pub fn integer_mask(&self) -> &[bool] {
        &self.integer
    }

    pub fn is_binary(&self, j: usize) -> bool {
        self.integer[j] && self.lower[j] == 0.0 && self.upper[j] == 1.0
    }

    pub fn var_name(&self, j: usize) -> &str {
        &self.var_names[j]
    }

    pub fn var_names(&self) -> &[String] {
        &self.var_names
    }

    pub fn row_name(&self, i: usize) -> &str {
        &self.row_names[i]
    }

    pub fn var_index(&self, name: &str) -> Option<usize> {
        self.var_names.iter().position(|n| n == name)
    }

    /// The instance's own bound box, generation 0.
    pub fn global_box(&self) -> BoundBox {
        BoundBox::new(self.lower.clone(), self.upper.clone())
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    /// Checks bounds, integrality and every row at `x`.
    pub fn is_feasible(&self, x: &[f64]) -> bool {
        x.len() == self.num_vars()
            && (0..self.num_vars()).all(|j| {
                x[j] >= self.lower[j] - FEAS_TOL
                    && x[j] <= self.upper[j] + FEAS_TOL
                    && (!self.integer[j] || (x[j] - x[j].round()).abs() <= INT_TOL)
            })
            && self.rows.iter().all(|r| r.is_satisfied(x))
    }

    /// Same as [`Instance::is_feasible`] but against an arbitrary box.
    pub fn is_feasible_in(&self, x: &[f64], bounds: &BoundBox) -> bool {
        self.is_feasible(x)
            && (0..self.num_vars()).all(|j| {
                x[j] >= bounds.lower(j) - FEAS_TOL && x[j] <= bounds.upper(j) + FEAS_TOL
            })
    }
}

/// Classifies an instance by its variable types.
pub fn classify(instance: &Instance) -> ProblemClass {
    let n = instance.num_vars();
    let n_int = instance.integer.iter().filter(|&&b| b).count();
    if n_int == 0 {
        return ProblemClass::LP;
    }
    if n_int < n {
        return ProblemClass::MIP;
    }
    if (0..n).all(|j| instance.lower[j] == 0.0 && instance.upper[j] == 1.0) {
        ProblemClass::BP
    } else {
        ProblemClass::IP
    }
}

fn classify_row(row: &Row, lower: &[f64], upper: &[f64], integer: &[bool]) -> RowKind {
    if row.coefs.is_empty() {
        return RowKind::Linear;
    }
    let all_binary = row
        .coefs
        .iter()
        .all(|&(j, _)| integer[j] && lower[j] == 0.0 && upper[j] == 1.0);
    if !all_binary {
        return RowKind::Linear;
    }
    if row.rhs == -1.0 && row.coefs.iter().all(|&(_, a)| a == -1.0) {
        return RowKind::SetCover;
    }
    if row.rhs >= 0.0 && row.coefs.iter().all(|&(_, a)| a > 0.0 && a.fract() == 0.0) {
        return RowKind::Knapsack;
    }
    RowKind::Linear
}

/// Incremental constructor for [`Instance`].
#[derive(Debug, Clone, Default)]
pub struct InstanceBuilder {
    name: String,
    objective: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    integer: Vec<bool>,
    rows: Vec<Row>,
    var_names: Vec<String>,
    row_names: Vec<String>,
}

impl InstanceBuilder {
    pub fn new(name: impl Into<String>) -> Self {
        InstanceBuilder {
            name: name.into(),
            ..Default::default()
        }
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    /// Adds a variable and returns its index.
    pub fn add_var(
        &mut self,
        name: impl Into<String>,
        lower: f64,
        upper: f64,
        integer: bool,
        cost: f64,
    ) -> usize {
        self.objective.push(cost);
        self.lower.push(lower);
        self.upper.push(upper);
        self.integer.push(integer);
        self.var_names.push(name.into());
        self.objective.len() - 1
    }

    pub fn set_cost(&mut self, var: usize, cost: f64) {
        self.objective[var] = cost;
    }

    pub fn add_le(&mut self, name: impl Into<String>, coefs: &[(usize, f64)], rhs: f64) {
        self.rows.push(Row::new(coefs.iter().copied(), rhs));
        self.row_names.push(name.into());
    }

    pub fn add_ge(&mut self, name: impl Into<String>, coefs: &[(usize, f64)], rhs: f64) {
        self.rows
            .push(Row::new(coefs.iter().map(|&(j, a)| (j, -a)), -rhs));
        self.row_names.push(name.into());
    }

    /// Adds `coefs·x = rhs` as a `≤` row and a `≥` row.
    pub fn add_eq(&mut self, name: impl Into<String>, coefs: &[(usize, f64)], rhs: f64) {
        let name = name.into();
        self.add_le(name.clone(), coefs, rhs);
        self.add_ge(format!("{name}__ge"), coefs, rhs);
    }

    pub fn build(self) -> Result<Instance, ModelError> {
        let InstanceBuilder {
            name,
            objective,
            mut lower,
            mut upper,
            integer,
            mut rows,
            var_names,
            row_names,
        } = self;
        let n = objective.len();
        for j in 0..n {
            if !objective[j].is_finite() {
                return Err(ModelError::NonFinite {
                    context: format!("objective of `{}`", var_names[j]),
                    value: objective[j],
                });
            }
            if lower[j].is_nan() || upper[j].is_nan() {
                return Err(ModelError::NonFinite {
                    context: format!("bounds of `{}`", var_names[j]),
                    value: f64::NAN,
                });
            }
            if integer[j] {
                if !lower[j].is_finite() || !upper[j].is_finite() {
                    return Err(ModelError::InfiniteIntegerBound {
                        name: var_names[j].clone(),
                        lower: lower[j],
                        upper: upper[j],
                    });
                }
                lower[j] = (lower[j] - INT_TOL).ceil();
                upper[j] = (upper[j] + INT_TOL).floor();
                // keep a clean zero
                if lower[j] == 0.0 {
                    lower[j] = 0.0;
                }
                if upper[j] == 0.0 {
                    upper[j] = 0.0;
                }
            }
            if lower[j] > upper[j] {
                return Err(ModelError::BoundOrder {
                    name: var_names[j].clone(),
                    lower: lower[j],
                    upper: upper[j],
                });
            }
        }
        for (i, row) in rows.iter_mut().enumerate() {
            if !row.rhs.is_finite() {
                return Err(ModelError::NonFinite {
                    context: format!("right-hand side of `{}`", row_names[i]),
                    value: row.rhs,
                });
            }
            for &(j, a) in &row.coefs {
                if j >= n {
                    return Err(ModelError::UnknownVariable {
                        row: row_names[i].clone(),
                        var: j,
                        num_vars: n,
                    });
                }
                if !a.is_finite() {
                    return Err(ModelError::NonFinite {
                        context: format!("coefficient in `{}`", row_names[i]),
                        value: a,
                    });
                }
            }
            row.kind = classify_row(row, &lower, &upper, &integer);
        }
        Ok(Instance {
            name,
            objective,
            lower,
            upper,
            integer,
            rows,
            var_names,
            row_names,
        })
    }
}

/// Mutable lower/upper bound vectors. `generation` increases on every accepted
/// tightening. Equality compares the bounds only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
    generation: u64,
}

impl PartialEq for BoundBox {
    fn eq(&self, other: &Self) -> bool {
        self.lower == other.lower && self.upper == other.upper
    }
}

impl BoundBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> BoundBox {
        assert_eq!(lower.len(), upper.len());
        BoundBox {
            lower,
            upper,
            generation: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.iter().zip(&self.upper).any(|(l, u)| l > u)
    }

    pub fn lower(&self, j: usize) -> f64 {
        self.lower[j]
    }

    pub fn upper(&self, j: usize) -> f64 {
        self.upper[j]
    }

    pub fn bound(&self, j: usize, side: Side) -> f64 {
        match side {
            Side::Lower => self.lower[j],
            Side::Upper => self.upper[j],
        }
    }

    pub fn lowers(&self) -> &[f64] {
        &self.lower
    }

    pub fn uppers(&self) -> &[f64] {
        &self.upper
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn is_fixed(&self, j: usize) -> bool {
        self.lower[j] == self.upper[j]
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.len()
            && x
                .iter()
                .enumerate()
                .all(|(j, &v)| v >= self.lower[j] - FEAS_TOL && v <= self.upper[j] + FEAS_TOL)
    }

    /// Whether `self` lies inside `outer` componentwise.
    pub fn is_within(&self, outer: &BoundBox) -> bool {
        (0..self.len()).all(|j| self.lower[j] >= outer.lower[j] && self.upper[j] <= outer.upper[j])
    }

    /// Loosens a bound again; used when a search backtracks.
    pub(crate) fn restore(&mut self, var: usize, side: Side, value: f64) {
        match side {
            Side::Lower => self.lower[var] = value,
            Side::Upper => self.upper[var] = value,
        }
        self.generation += 1;
    }

    /// Applies `x_var ≥ value` or `x_var ≤ value` if strictly tighter.
    ///
    /// Returns whether the box changed. Crossing the opposite bound by more
    /// than [`FEAS_TOL`] leaves the box untouched and returns [`EmptyBox`];
    /// crossing by less snaps the bound onto the opposite one.
    pub fn tighten(&mut self, var: usize, side: Side, value: f64) -> Result<bool, EmptyBox> {
        let (own, other) = match side {
            Side::Lower => (self.lower[var], self.upper[var]),
            Side::Upper => (self.upper[var], self.lower[var]),
        };
        let tighter = match side {
            Side::Lower => value > own,
            Side::Upper => value < own,
        };
        if !tighter {
            return Ok(false);
        }
        let crosses = match side {
            Side::Lower => value > other,
            Side::Upper => value < other,
        };
        let value = if crosses {
            if (value - other).abs() > FEAS_TOL {
                return Err(EmptyBox { var, side, value });
            }
            other
        } else {
            value
        };
        if value == own {
            return Ok(false);
        }
        match side {
            Side::Lower => self.lower[var] = value,
            Side::Upper => self.upper[var] = value,
        }
        self.generation += 1;
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_vars(l: f64, u: f64, integer: bool) -> Instance {
        let mut b = InstanceBuilder::new("t");
        b.add_var("x1", l, u, integer, 0.0);
        b.add_var("x2", l, u, integer, 0.0);
        b.build().unwrap()
    }

    #[test]
    fn classify_definition_cases() {
        assert_eq!(classify(&two_vars(0.0, 1.0, true)), ProblemClass::BP);
        assert_eq!(classify(&two_vars(0.0, 1.0, false)), ProblemClass::LP);
        let mut b = InstanceBuilder::new("ip");
        b.add_var("x1", 0.0, 5.0, true, 0.0);
        assert_eq!(classify(&b.build().unwrap()), ProblemClass::IP);
        let mut b = InstanceBuilder::new("mip");
        b.add_var("x1", 0.0, 5.0, true, 0.0);
        b.add_var("y", 0.0, f64::INFINITY, false, 0.0);
        assert_eq!(classify(&b.build().unwrap()), ProblemClass::MIP);
    }

    #[test]
    fn bp_is_pure_integer() {
        assert!(classify(&two_vars(0.0, 1.0, true)).is_pure_integer());
    }

    #[test]
    fn tighten_only_strictly_tighter() {
        let mut b = BoundBox::new(vec![0.0], vec![5.0]);
        assert_eq!(b.tighten(0, Side::Upper, 3.0), Ok(true));
        assert_eq!(b.generation(), 1);
        assert_eq!(b.tighten(0, Side::Upper, 4.0), Ok(false));
        assert_eq!(b.upper(0), 3.0);
        assert_eq!(b.generation(), 1);
        assert!(b.tighten(0, Side::Lower, 4.0).is_err());
        assert_eq!(b.lower(0), 0.0);
        assert_eq!(b.generation(), 1);
    }

    #[test]
    fn infinite_integer_bounds_rejected() {
        let mut b = InstanceBuilder::new("bad");
        b.add_var("z", 0.0, f64::INFINITY, true, 1.0);
        assert!(matches!(
            b.build(),
            Err(ModelError::InfiniteIntegerBound { .. })
        ));
    }

    #[test]
    fn integer_bounds_rounded_inward() {
        let mut b = InstanceBuilder::new("r");
        b.add_var("z", -0.5, 2.7, true, 1.0);
        let inst = b.build().unwrap();
        assert_eq!((inst.lower()[0], inst.upper()[0]), (0.0, 2.0));
    }

    #[test]
    fn rows_are_normalized_and_classified() {
        let mut b = InstanceBuilder::new("k");
        let x = b.add_var("x", 0.0, 1.0, true, 0.0);
        let y = b.add_var("y", 0.0, 1.0, true, 0.0);
        let z = b.add_var("z", 0.0, 3.0, true, 0.0);
        b.add_le("knap", &[(x, 2.0), (y, 3.0), (x, 1.0)], 4.0);
        b.add_ge("cover", &[(x, 1.0), (y, 1.0)], 1.0);
        b.add_eq("eq", &[(x, 1.0), (z, 1.0)], 2.0);
        let inst = b.build().unwrap();
        assert_eq!(inst.num_rows(), 4);
        assert_eq!(inst.row(0).coefs, vec![(x, 3.0), (y, 3.0)]);
        assert_eq!(inst.row(0).kind, RowKind::Knapsack);
        assert_eq!(inst.row(1).kind, RowKind::SetCover);
        assert_eq!(inst.row(1).rhs, -1.0);
        assert_eq!(inst.row(2).kind, RowKind::Linear);
        assert_eq!(inst.row(3).coefs, vec![(x, -1.0), (z, -1.0)]);
    }

    #[test]
    fn feasibility_check() {
        let mut b = InstanceBuilder::new("f");
        let x = b.add_var("x", 0.0, 3.0, true, 1.0);
        b.add_le("r", &[(x, 2.0)], 4.0);
        let inst = b.build().unwrap();
        assert!(inst.is_feasible(&[2.0]));
        assert!(!inst.is_feasible(&[3.0]));
        assert!(!inst.is_feasible(&[1.5]));
    }
}
