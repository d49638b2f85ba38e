//! Dense bounded-variable primal simplex for node relaxations.
//!
//! Rows `a_i·x ≤ b_i` get a slack `s_i ≥ 0`; rows whose slack would start
//! negative get an artificial column instead, which phase one drives to zero.
//! Pricing is Dantzig's rule, switching to Bland's rule for the rest of the
//! solve after `3(n+m)` consecutive pivots without progress.

use serde::{Deserialize, Serialize};

use crate::model::{BoundBox, Instance, Side, FEAS_TOL};

/// Reduced costs at or below this magnitude count as zero.
pub const DEGENERACY_TOL: f64 = 1e-6;

const PRICE_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterationLimit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BasisStatus {
    Basic,
    AtLower,
    AtUpper,
    /// Nonbasic with equal bounds; never priced.
    Fixed,
    /// Nonbasic free column resting at zero.
    Free,
}

impl BasisStatus {
    pub fn is_basic(self) -> bool {
        self == BasisStatus::Basic
    }
}

/// Result of one LP solve. `basis` and `reduced_costs` cover the structural
/// columns followed by one slack per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpResult {
    pub status: LpStatus,
    pub primal: Vec<f64>,
    pub objective: f64,
    pub basis: Vec<BasisStatus>,
    pub reduced_costs: Vec<f64>,
    pub iterations: usize,
}

impl LpResult {
    fn without_solution(status: LpStatus, iterations: usize) -> LpResult {
        LpResult {
            status,
            primal: Vec::new(),
            objective: match status {
                LpStatus::Infeasible => f64::INFINITY,
                _ => f64::NEG_INFINITY,
            },
            basis: Vec::new(),
            reduced_costs: Vec::new(),
            iterations,
        }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }

    /// Structural statuses, usable as a warm start.
    pub fn structural_basis(&self, num_vars: usize) -> &[BasisStatus] {
        &self.basis[..num_vars.min(self.basis.len())]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegeneracyInfo {
    /// Share of non-fixed nonbasic columns with zero reduced cost.
    pub degenerate_share: f64,
    /// (basic columns + degenerate nonbasic columns) / rows.
    pub face_var_constraint_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LpOptions {
    /// Simplex iteration cap; `None` means `10·(n+m) + 1000`.
    pub iteration_limit: Option<usize>,
}

pub fn default_iteration_limit(num_vars: usize, num_rows: usize) -> usize {
    10 * (num_vars + num_rows) + 1000
}

pub fn solve_lp(instance: &Instance, bounds: &BoundBox, warm_basis: Option<&[BasisStatus]>) -> LpResult {
    solve_lp_with(instance, bounds, warm_basis, &LpOptions::default())
}

pub fn solve_lp_with(
    instance: &Instance,
    bounds: &BoundBox,
    warm_basis: Option<&[BasisStatus]>,
    options: &LpOptions,
) -> LpResult {
    if bounds.is_empty() {
        return LpResult::without_solution(LpStatus::Infeasible, 0);
    }
    let limit = options
        .iteration_limit
        .unwrap_or_else(|| default_iteration_limit(instance.num_vars(), instance.num_rows()));
    let tableau = Tableau::new(instance, bounds, warm_basis);
    tableau.run(limit)
}

struct Tableau {
    n: usize,
    m: usize,
    // m × ncols, B⁻¹A
    t: Vec<Vec<f64>>,
    objective: Vec<f64>,
    lb: Vec<f64>,
    ub: Vec<f64>,
    cost: Vec<f64>,
    x: Vec<f64>,
    status: Vec<BasisStatus>,
    basic: Vec<usize>,
    num_artificial: usize,
    iterations: usize,
    bland: bool,
    stalled: usize,
}

#[derive(PartialEq)]
enum Phase {
    One,
    Two,
}

enum Step {
    Optimal,
    Unbounded,
    Moved,
}

impl Tableau {
    fn new(instance: &Instance, bounds: &BoundBox, warm: Option<&[BasisStatus]>) -> Tableau {
        let n = instance.num_vars();
        let m = instance.num_rows();
        let mut lb: Vec<f64> = bounds.lowers().to_vec();
        let mut ub: Vec<f64> = bounds.uppers().to_vec();
        let mut x = vec![0.0; n];
        let mut status = vec![BasisStatus::AtLower; n];
        for j in 0..n {
            let prefer_upper = matches!(warm.and_then(|w| w.get(j)), Some(BasisStatus::AtUpper));
            let (l, u) = (lb[j], ub[j]);
            status[j] = if l == u {
                BasisStatus::Fixed
            } else if prefer_upper && u.is_finite() {
                BasisStatus::AtUpper
            } else if l.is_finite() {
                BasisStatus::AtLower
            } else if u.is_finite() {
                BasisStatus::AtUpper
            } else {
                BasisStatus::Free
            };
            x[j] = match status[j] {
                BasisStatus::AtUpper => u,
                BasisStatus::Free => 0.0,
                _ => l,
            };
        }
        let residual: Vec<f64> = instance.rows().iter().map(|r| r.rhs - r.activity(&x)).collect();
        let needs_art: Vec<usize> = (0..m).filter(|&i| residual[i] < 0.0).collect();
        let ncols = n + m + needs_art.len();
        let mut t = vec![vec![0.0; ncols]; m];
        let mut basic = vec![0; m];
        lb.extend(std::iter::repeat_n(0.0, m + needs_art.len()));
        ub.extend(std::iter::repeat_n(f64::INFINITY, m));
        ub.extend(std::iter::repeat_n(f64::INFINITY, needs_art.len()));
        x.extend(std::iter::repeat_n(0.0, m + needs_art.len()));
        status.extend(std::iter::repeat_n(BasisStatus::AtLower, m + needs_art.len()));
        let mut cost = vec![0.0; ncols];
        let mut art_of_row = vec![None; m];
        for (k, &i) in needs_art.iter().enumerate() {
            art_of_row[i] = Some(n + m + k);
            cost[n + m + k] = 1.0;
        }
        for (i, row) in instance.rows().iter().enumerate() {
            let sign = if art_of_row[i].is_some() { -1.0 } else { 1.0 };
            for &(j, a) in &row.coefs {
                t[i][j] = sign * a;
            }
            t[i][n + i] = sign;
            match art_of_row[i] {
                Some(col) => {
                    t[i][col] = 1.0;
                    basic[i] = col;
                    x[col] = -residual[i];
                }
                None => {
                    basic[i] = n + i;
                    x[n + i] = residual[i];
                }
            }
            status[basic[i]] = BasisStatus::Basic;
        }
        Tableau {
            n,
            m,
            t,
            objective: instance.objective().to_vec(),
            lb,
            ub,
            cost,
            x,
            status,
            basic,
            num_artificial: needs_art.len(),
            iterations: 0,
            bland: false,
            stalled: 0,
        }
    }

    fn ncols(&self) -> usize {
        self.n + self.m + self.num_artificial
    }

    fn reduced_costs(&self) -> Vec<f64> {
        let mut d = self.cost.clone();
        for i in 0..self.m {
            let cb = self.cost[self.basic[i]];
            if cb != 0.0 {
                for (dj, tij) in d.iter_mut().zip(&self.t[i]) {
                    *dj -= cb * tij;
                }
            }
        }
        for &b in &self.basic {
            d[b] = 0.0;
        }
        d
    }

    fn choose_entering(&self, d: &[f64]) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64, f64)> = None;
        for j in 0..self.ncols() {
            let dir = match self.status[j] {
                BasisStatus::AtLower if d[j] < -PRICE_TOL => 1.0,
                BasisStatus::AtUpper if d[j] > PRICE_TOL => -1.0,
                BasisStatus::Free if d[j] < -PRICE_TOL => 1.0,
                BasisStatus::Free if d[j] > PRICE_TOL => -1.0,
                _ => continue,
            };
            if self.bland {
                return Some((j, dir));
            }
            if best.is_none_or(|(_, _, score)| d[j].abs() > score) {
                best = Some((j, dir, d[j].abs()));
            }
        }
        best.map(|(j, dir, _)| (j, dir))
    }

    fn step(&mut self, d: &[f64]) -> Step {
        let Some((j, dir)) = self.choose_entering(d) else {
            return Step::Optimal;
        };
        // (step length, leaving row or None for a bound flip, |alpha|)
        let mut best_t = f64::INFINITY;
        let mut leave: Option<usize> = None;
        let mut best_alpha = 0.0;
        if self.lb[j].is_finite() && self.ub[j].is_finite() {
            best_t = self.ub[j] - self.lb[j];
        }
        for i in 0..self.m {
            let alpha = dir * self.t[i][j];
            let b = self.basic[i];
            let limit = if alpha > PIVOT_TOL {
                if !self.lb[b].is_finite() {
                    continue;
                }
                ((self.x[b] - self.lb[b]) / alpha).max(0.0)
            } else if alpha < -PIVOT_TOL {
                if !self.ub[b].is_finite() {
                    continue;
                }
                ((self.ub[b] - self.x[b]) / -alpha).max(0.0)
            } else {
                continue;
            };
            let better = if limit < best_t - 1e-12 {
                true
            } else if limit <= best_t + 1e-12 {
                match leave {
                    None => false,
                    Some(r) if self.bland => b < self.basic[r],
                    Some(_) => alpha.abs() > best_alpha,
                }
            } else {
                false
            };
            if better {
                best_t = limit;
                leave = Some(i);
                best_alpha = alpha.abs();
            }
        }
        if best_t == f64::INFINITY {
            return Step::Unbounded;
        }
        let t_step = best_t;
        self.x[j] += dir * t_step;
        for i in 0..self.m {
            let b = self.basic[i];
            self.x[b] -= dir * self.t[i][j] * t_step;
        }
        match leave {
            None => {
                self.status[j] = if dir > 0.0 { BasisStatus::AtUpper } else { BasisStatus::AtLower };
                self.x[j] = if dir > 0.0 { self.ub[j] } else { self.lb[j] };
            }
            Some(r) => {
                let b = self.basic[r];
                let alpha = dir * self.t[r][j];
                let (st, val) = if alpha > 0.0 {
                    (BasisStatus::AtLower, self.lb[b])
                } else {
                    (BasisStatus::AtUpper, self.ub[b])
                };
                self.status[b] = if self.lb[b] == self.ub[b] { BasisStatus::Fixed } else { st };
                self.x[b] = val;
                self.pivot(r, j);
            }
        }
        if t_step <= 1e-12 {
            self.stalled += 1;
            if self.stalled > 3 * (self.n + self.m) {
                self.bland = true;
            }
        } else {
            self.stalled = 0;
        }
        Step::Moved
    }

    fn pivot(&mut self, r: usize, j: usize) {
        let p = self.t[r][j];
        for v in self.t[r].iter_mut() {
            *v /= p;
        }
        let pivot_row = self.t[r].clone();
        for i in 0..self.m {
            if i == r {
                continue;
            }
            let f = self.t[i][j];
            if f != 0.0 {
                for (v, pv) in self.t[i].iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
                self.t[i][j] = 0.0;
            }
        }
        self.basic[r] = j;
        self.status[j] = BasisStatus::Basic;
    }

    fn iterate(&mut self, limit: usize) -> Option<Step> {
        loop {
            let d = self.reduced_costs();
            if self.iterations >= limit {
                // still report optimality if nothing is eligible
                return match self.choose_entering(&d) {
                    None => Some(Step::Optimal),
                    Some(_) => None,
                };
            }
            match self.step(&d) {
                Step::Moved => self.iterations += 1,
                other => return Some(other),
            }
        }
    }

    fn run(mut self, limit: usize) -> LpResult {
        let phase_two_cost: Vec<f64> = {
            let mut c = vec![0.0; self.ncols()];
            c[..self.n].copy_from_slice(&self.objective);
            c
        };
        let mut phase = if self.num_artificial > 0 { Phase::One } else { Phase::Two };
        if phase == Phase::Two {
            self.cost = phase_two_cost.clone();
        }
        loop {
            let outcome = self.iterate(limit);
            match (phase, outcome) {
                (_, None) => return LpResult::without_solution(LpStatus::IterationLimit, self.iterations),
                (Phase::One, Some(_)) => {
                    let infeas: f64 = (self.n + self.m..self.ncols()).map(|k| self.x[k]).sum();
                    if infeas > FEAS_TOL {
                        return LpResult::without_solution(LpStatus::Infeasible, self.iterations);
                    }
                    for k in self.n + self.m..self.ncols() {
                        self.ub[k] = 0.0;
                        if !self.status[k].is_basic() {
                            self.status[k] = BasisStatus::Fixed;
                            self.x[k] = 0.0;
                        }
                    }
                    self.cost = phase_two_cost.clone();
                    self.stalled = 0;
                    phase = Phase::Two;
                }
                (Phase::Two, Some(Step::Unbounded)) => {
                    return LpResult::without_solution(LpStatus::Unbounded, self.iterations)
                }
                (Phase::Two, Some(_)) => return self.finish(),
            }
        }
    }

    fn finish(&self) -> LpResult {
        let d = self.reduced_costs();
        let cols = self.n + self.m;
        let primal = self.x[..self.n].to_vec();
        let objective = self.objective.iter().zip(&primal).map(|(c, v)| c * v).sum();
        let reduced_costs = (0..cols)
            .map(|j| if self.status[j].is_basic() { 0.0 } else { d[j] })
            .collect();
        LpResult {
            status: LpStatus::Optimal,
            primal,
            objective,
            basis: self.status[..cols].to_vec(),
            reduced_costs,
            iterations: self.iterations,
        }
    }
}

/// Share of degenerate nonbasic columns and the optimal-face ratio.
///
/// Fixed columns are left out of the nonbasic count. With no non-fixed
/// nonbasic column at all the share is 1: the objective cannot move.
pub fn measure_degeneracy(result: &LpResult, num_rows: usize) -> DegeneracyInfo {
    let mut nonbasic = 0usize;
    let mut degenerate = 0usize;
    let mut basic = 0usize;
    for (status, d) in result.basis.iter().zip(&result.reduced_costs) {
        match status {
            BasisStatus::Basic => basic += 1,
            BasisStatus::Fixed => {}
            _ => {
                nonbasic += 1;
                if d.abs() <= DEGENERACY_TOL {
                    degenerate += 1;
                }
            }
        }
    }
    let degenerate_share = if nonbasic == 0 {
        1.0
    } else {
        degenerate as f64 / nonbasic as f64
    };
    DegeneracyInfo {
        degenerate_share,
        face_var_constraint_ratio: (basic + degenerate) as f64 / num_rows.max(1) as f64,
    }
}

/// Strong-branching counters feeding the sblps criterion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrongBranchCounters {
    pub no_improvement: u64,
    pub objective_changed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ChildBound {
    Objective(f64),
    Infeasible,
    /// The child LP hit its iteration limit.
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrongBranchResult {
    pub down: ChildBound,
    pub up: ChildBound,
    pub iterations: usize,
}

fn child_lp(instance: &Instance, bounds: &BoundBox, var: usize, side: Side, value: f64) -> (ChildBound, usize) {
    let mut child = bounds.clone();
    if child.tighten(var, side, value).is_err() {
        return (ChildBound::Infeasible, 0);
    }
    let res = solve_lp(instance, &child, None);
    let bound = match res.status {
        LpStatus::Optimal => ChildBound::Objective(res.objective),
        LpStatus::Infeasible => ChildBound::Infeasible,
        LpStatus::Unbounded => ChildBound::Objective(f64::NEG_INFINITY),
        LpStatus::IterationLimit => ChildBound::Unknown,
    };
    (bound, res.iterations)
}

/// Solves both children of branching on `candidate` and updates `counters`.
///
/// A child counts as "no improvement" when it is infeasible or its objective
/// equals the parent's within 1e-6.
pub fn strong_branch(
    instance: &Instance,
    bounds: &BoundBox,
    candidate: usize,
    lp: &LpResult,
    counters: &mut StrongBranchCounters,
) -> StrongBranchResult {
    let value = lp.primal[candidate];
    let (down, it_down) = child_lp(instance, bounds, candidate, Side::Upper, value.floor());
    let (up, it_up) = child_lp(instance, bounds, candidate, Side::Lower, value.ceil());
    for child in [down, up] {
        match child {
            ChildBound::Infeasible => counters.no_improvement += 1,
            ChildBound::Objective(obj) if (obj - lp.objective).abs() <= 1e-6 => counters.no_improvement += 1,
            ChildBound::Objective(_) => counters.objective_changed += 1,
            ChildBound::Unknown => {}
        }
    }
    StrongBranchResult {
        down,
        up,
        iterations: it_down + it_up,
    }
}
