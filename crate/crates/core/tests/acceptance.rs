//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::process::Command;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rapidlearn::bench::{run_suite, BenchConfig, Report};
use rapidlearn::conflict::{check_disjunction, to_knapsack, BoundDisjunction, BoundLiteral, ConflictTrace};
use rapidlearn::cpsearch::{cp_search, node_limit_from_iters, CpConfig};
use rapidlearn::lp::{measure_degeneracy, solve_lp, DegeneracyInfo, LpStatus};
use rapidlearn::mipsearch::{solve, SolveConfig, SolveStatus};
use rapidlearn::model::{BoundBox, Instance, InstanceBuilder};
use rapidlearn::mps::write_mps;
use rapidlearn::propagation::{Domain, PropagationOutcome, Propagator};
use rapidlearn::rapid::{evaluate_criteria, is_rl_depth, Criterion, CriterionInputs, RapidConfig, RapidMode};

const SUITE: u64 = 250;

type Outcome = Result<String, String>;

fn configs() -> Vec<(&'static str, SolveConfig)> {
    let all = RapidConfig {
        mode: RapidMode::Local,
        criteria: Criterion::ALL.into_iter().collect(),
        f: 1,
        beta: 2.0,
        max_conflict_frac: 1.0,
        ..RapidConfig::default()
    };
    let tree_only = RapidConfig {
        mode: RapidMode::Local,
        criteria: [Criterion::DualBound, Criterion::Leaves, Criterion::SbLps, Criterion::Degeneracy]
            .into_iter()
            .collect(),
        f: 1,
        beta: 2.0,
        ..RapidConfig::default()
    };
    let with = |rapid| SolveConfig {
        rapid,
        audit: true,
        ..SolveConfig::default()
    };
    vec![
        ("off", with(RapidConfig::off())),
        ("local-all", with(all)),
        ("local-tree", with(tree_only)),
    ]
}

struct SuiteRun {
    exactness: Outcome,
    validity: Outcome,
    traces: Vec<ConflictTrace>,
}

fn run_exactness_suite() -> SuiteRun {
    let mut mismatches = Vec::new();
    let mut violations = Vec::new();
    let mut traces = Vec::new();
    let (mut solves, mut n_global, mut n_local, mut n_cp) = (0usize, 0usize, 0usize, 0usize);
    let cfgs = configs();
    for seed in 0..SUITE {
        let inst = common::random_ip(seed);
        let feasible = common::feasible_points(&inst);
        let oracle = feasible.iter().map(|x| inst.objective_value(x)).min_by(f64::total_cmp);
        for (name, cfg) in &cfgs {
            solves += 1;
            let r = match solve(&inst, cfg) {
                Ok(r) => r,
                Err(e) => {
                    mismatches.push(format!("seed {seed} {name}: {e}"));
                    continue;
                }
            };
            let ok = match (oracle, r.status) {
                (None, SolveStatus::Infeasible) => true,
                (Some(v), SolveStatus::Optimal) => {
                    let (x, _) = r.incumbent.as_ref().expect("optimal run has an incumbent");
                    inst.is_feasible(x) && (inst.objective_value(x) - v).abs() <= 1e-6
                }
                _ => false,
            };
            if !ok {
                mismatches.push(format!("seed {seed} {name}: {:?} vs {:?}", r.status, oracle));
            }
            let audit = r.audit.expect("audit requested");
            for c in &audit.global {
                n_global += 1;
                if let Some(x) = feasible.iter().find(|x| !c.is_satisfied_by(x)) {
                    violations.push(format!("seed {seed} {name}: global {:?} cuts {x:?}", c.disjunction));
                }
            }
            for (c, node_box) in &audit.local {
                n_local += 1;
                if let Some(x) = feasible.iter().find(|x| node_box.contains(x) && !c.is_satisfied_by(x)) {
                    violations.push(format!("seed {seed} {name}: local {:?} cuts {x:?}", c.disjunction));
                }
            }
            traces.extend(audit.traces);
            traces.extend(audit.cp_traces);
        }
        // Standalone CP runs: their conflicts are global for the instance.
        let cp_cfg = CpConfig {
            node_limit: 500,
            max_conflict_frac: 1.0,
            seed,
            record_traces: true,
            ..CpConfig::default()
        };
        match cp_search(&inst, &inst.global_box(), cp_cfg) {
            Ok(out) => {
                for c in &out.conflicts {
                    n_cp += 1;
                    if let Some(x) = feasible.iter().find(|x| !c.is_satisfied_by(x)) {
                        violations.push(format!("seed {seed} cp: {:?} cuts {x:?}", c.disjunction));
                    }
                }
                if let Some((x, _)) = &out.solution {
                    if !inst.is_feasible(x) {
                        violations.push(format!("seed {seed} cp: infeasible solution {x:?}"));
                    }
                }
                traces.extend(out.traces);
            }
            Err(e) => violations.push(format!("seed {seed} cp: {e}")),
        }
    }
    let exactness = if mismatches.is_empty() {
        Ok(format!("{SUITE} instances x {} configs, {solves} solves match enumeration", cfgs.len()))
    } else {
        Err(format!("{} mismatches, first: {}", mismatches.len(), mismatches[0]))
    };
    let checked = n_global + n_local + n_cp;
    let validity = if !violations.is_empty() {
        Err(format!("{} violations, first: {}", violations.len(), violations[0]))
    } else if n_local == 0 || n_global + n_cp == 0 {
        Err(format!("too few constraints exercised: {n_global} global, {n_local} local, {n_cp} cp"))
    } else {
        Ok(format!("{checked} constraints ({n_global} global, {n_local} local, {n_cp} cp) hold"))
    };
    SuiteRun {
        exactness,
        validity,
        traces,
    }
}

fn uip_structure(traces: &[ConflictTrace]) -> Outcome {
    let mut bad = Vec::new();
    for (k, t) in traces.iter().enumerate() {
        let deepest = t.literal_levels.iter().filter(|&&l| l == t.failure_level).count();
        if deepest != 1 {
            bad.push(format!("trace {k}: {deepest} literals at level {}", t.failure_level));
        }
        if t.literal_levels.iter().any(|&l| l > t.failure_level) {
            bad.push(format!("trace {k}: literal above the failure level"));
        }
        if !t.disjunction.is_violated_by(&t.failure_box()) {
            bad.push(format!("trace {k}: not violated at its node"));
        }
    }
    if !bad.is_empty() {
        Err(format!("{} bad traces, first: {}", bad.len(), bad[0]))
    } else if traces.len() < 50 {
        Err(format!("only {} conflicts logged", traces.len()))
    } else {
        Ok(format!("{} conflicts, one deepest-level literal each, all violated at origin", traces.len()))
    }
}

fn knapsack_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked_points = 0usize;
    for case in 0..100 {
        let n = rng.gen_range(1..=6);
        let lower: Vec<f64> = (0..n).map(|_| rng.gen_range(0..=2) as f64).collect();
        let upper: Vec<f64> = lower.iter().map(|&l| rng.gen_range(l as i64 + 1..=4) as f64).collect();
        let global = BoundBox::new(lower.clone(), upper.clone());
        let mut vars: Vec<usize> = (0..n).collect();
        vars.shuffle(&mut rng);
        let k = rng.gen_range(1..=n);
        let lits = vars[..k].iter().map(|&j| {
            if rng.gen_bool(0.5) {
                BoundLiteral::at_most(j, upper[j] as i64 - 1)
            } else {
                BoundLiteral::at_least(j, lower[j] as i64 + 1)
            }
        });
        let d = BoundDisjunction::new(lits).map_err(|e| format!("case {case}: {e}"))?;
        let row = to_knapsack(&d, &global).ok_or_else(|| format!("case {case}: no linear form for {d:?}"))?;
        for x in common::points(&global) {
            checked_points += 1;
            if check_disjunction(&d, &x) != row.is_satisfied(&x) {
                return Err(format!("case {case}: forms disagree at {x:?}"));
            }
        }
    }
    Ok(format!("100 disjunctions, {checked_points} points, identical satisfying sets"))
}

fn formula_checks() -> Outcome {
    let expected = [(0, 500), (10, 500), (500, 500), (2000, 2000), (5000, 5000), (1_000_000, 5000)];
    for (iters, want) in expected {
        let got = node_limit_from_iters(iters);
        if got != want {
            return Err(format!("node_limit_from_iters({iters}) = {got}, want {want}"));
        }
    }
    let hits: Vec<u64> = (0..1000).filter(|&d| is_rl_depth(d, 5, 4.0)).collect();
    if hits != [0, 5, 20, 80, 320] {
        return Err(format!("is_rl_depth(f=5, beta=4) hits {hits:?}"));
    }
    Ok("node limits and depth schedule {0,5,20,80,320} exact".into())
}

fn threshold_checks() -> Outcome {
    let cfg = RapidConfig::default();
    let base = CriterionInputs {
        dual_bound: 1.0,
        root_dual_bound: 0.0,
        leaves_infeasible: 0,
        leaves_cutoff: 0,
        degeneracy: DegeneracyInfo {
            degenerate_share: 0.0,
            face_var_constraint_ratio: 0.0,
        },
        objective_support: 3,
        n_solutions: 1,
        sb_no_improvement: 0,
        sb_objective_changed: 0,
    };
    let deg = |share, face| CriterionInputs {
        degeneracy: DegeneracyInfo {
            degenerate_share: share,
            face_var_constraint_ratio: face,
        },
        ..base
    };
    let leaves = |inf, cut| CriterionInputs {
        leaves_infeasible: inf,
        leaves_cutoff: cut,
        ..base
    };
    let cases: Vec<(&str, CriterionInputs, Criterion, bool)> = vec![
        ("share 0.80", deg(0.80, 0.0), Criterion::Degeneracy, false),
        ("share 0.8001", deg(0.8001, 0.0), Criterion::Degeneracy, true),
        ("face 2.0", deg(0.0, 2.0), Criterion::Degeneracy, false),
        ("face 2.0001", deg(0.0, 2.0001), Criterion::Degeneracy, true),
        ("leaves 10/1", leaves(10, 1), Criterion::Leaves, false),
        ("leaves 101/10", leaves(101, 10), Criterion::Leaves, true),
        ("leaves 0/0", leaves(0, 0), Criterion::Leaves, false),
        ("leaves 1/0", leaves(1, 0), Criterion::Leaves, true),
        ("dual bound equal", CriterionInputs { dual_bound: 0.0, ..base }, Criterion::DualBound, true),
        ("dual bound moved", base, Criterion::DualBound, false),
        ("0 solutions", CriterionInputs { n_solutions: 0, ..base }, Criterion::NSols, true),
        ("1 solution", base, Criterion::NSols, false),
    ];
    for (label, inputs, criterion, want) in &cases {
        let got = evaluate_criteria(inputs, &cfg).fired(*criterion);
        if got != *want {
            return Err(format!("{label}: {criterion} fired={got}, want {want}"));
        }
    }
    Ok(format!("{} boundary cases fire exactly on strict inequalities", cases.len()))
}

fn random_sub_box(inst: &Instance, rng: &mut ChaCha8Rng) -> BoundBox {
    let g = inst.global_box();
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    for j in 0..inst.num_vars() {
        let a = rng.gen_range(g.lower(j) as i64..=g.upper(j) as i64);
        let b = rng.gen_range(a..=g.upper(j) as i64);
        lower.push(a as f64);
        upper.push(b as f64);
    }
    BoundBox::new(lower, upper)
}

fn propagation_soundness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut boxes, mut reductions) = (0usize, 0usize);
    for seed in 0..SUITE {
        let inst = common::random_ip(seed);
        let feasible = common::feasible_points(&inst);
        for _ in 0..4 {
            let sub = if boxes % 4 == 0 { inst.global_box() } else { random_sub_box(&inst, &mut rng) };
            boxes += 1;
            let inside: Vec<&Vec<f64>> = feasible.iter().filter(|x| sub.contains(x)).collect();
            let mut order: Vec<usize> = (0..inst.num_rows()).collect();
            let mut results = Vec::new();
            for round in 0..3 {
                match round {
                    1 => order.reverse(),
                    2 => order.shuffle(&mut rng),
                    _ => {}
                }
                let mut domain = Domain::for_instance(&inst, sub.clone());
                let res = Propagator::with_order(&inst, &order)
                    .propagate(&mut domain)
                    .map_err(|e| format!("seed {seed}: {e}"))?;
                let infeasible = res.outcome == PropagationOutcome::Infeasible;
                if infeasible && !inside.is_empty() {
                    return Err(format!("seed {seed}: infeasible verdict with feasible point {:?}", inside[0]));
                }
                if !infeasible {
                    if let Some(x) = inside.iter().find(|x| !domain.bounds().contains(x)) {
                        return Err(format!("seed {seed}: propagation removed feasible point {x:?}"));
                    }
                    if domain.bounds() != &sub {
                        reductions += 1;
                    }
                }
                results.push((infeasible, (!infeasible).then(|| domain.bounds().clone())));
            }
            if results.iter().any(|r| r != &results[0]) {
                return Err(format!("seed {seed}: fixpoint depends on row order"));
            }
        }
    }
    Ok(format!("{boxes} boxes x 3 row orders, {reductions} reductions, no feasible point removed"))
}

/// Minimum of c·x over the vertices of {x : rows, bounds}, `None` if empty.
fn vertex_optimum(c: &[f64], rows: &[(Vec<f64>, f64)], lower: &[f64], upper: &[f64]) -> Option<f64> {
    let n = c.len();
    let mut cons: Vec<(Vec<f64>, f64)> = rows.to_vec();
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        cons.push((e.clone(), upper[j]));
        e[j] = -1.0;
        cons.push((e, -lower[j]));
    }
    let feasible = |x: &[f64]| {
        cons.iter()
            .all(|(a, b)| a.iter().zip(x).map(|(p, q)| p * q).sum::<f64>() <= b + 1e-9)
    };
    let mut best: Option<f64> = None;
    let mut pick: Vec<usize> = (0..n).collect();
    loop {
        if let Some(x) = solve_square(&pick.iter().map(|&i| cons[i].clone()).collect::<Vec<_>>()) {
            if feasible(&x) {
                let v: f64 = c.iter().zip(&x).map(|(p, q)| p * q).sum();
                best = Some(best.map_or(v, |b: f64| b.min(v)));
            }
        }
        // Next n-subset in lexicographic order.
        let m = cons.len();
        let mut i = n;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            if pick[i] < m - n + i {
                break;
            }
        }
        pick[i] += 1;
        for k in i + 1..n {
            pick[k] = pick[k - 1] + 1;
        }
    }
}

/// Gaussian elimination with partial pivoting; `None` when singular.
fn solve_square(eqs: &[(Vec<f64>, f64)]) -> Option<Vec<f64>> {
    let n = eqs.len();
    let mut a: Vec<Vec<f64>> = eqs
        .iter()
        .map(|(row, b)| {
            let mut r = row.clone();
            r.push(*b);
            r
        })
        .collect();
    for col in 0..n {
        let p = (col..n).max_by(|&i, &k| a[i][col].abs().total_cmp(&a[k][col].abs()))?;
        if a[p][col].abs() < 1e-9 {
            return None;
        }
        a.swap(col, p);
        for i in 0..n {
            if i != col {
                let f = a[i][col] / a[col][col];
                for k in col..=n {
                    a[i][k] -= f * a[col][k];
                }
            }
        }
    }
    Some((0..n).map(|i| a[i][n] / a[i][i]).collect())
}

fn lp_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut optimal, mut infeasible) = (0, 0);
    for case in 0..100 {
        let n = rng.gen_range(1..=5);
        let m = rng.gen_range(1..=4);
        let mut b = InstanceBuilder::new(format!("lp{case}"));
        let lower: Vec<f64> = (0..n).map(|_| rng.gen_range(-3..=1) as f64).collect();
        let upper: Vec<f64> = lower.iter().map(|&l| l + rng.gen_range(0..=4) as f64 + 0.5).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-5..=5) as f64).collect();
        for j in 0..n {
            b.add_var(format!("x{j}"), lower[j], upper[j], false, c[j]);
        }
        let mut rows = Vec::new();
        for i in 0..m {
            let mut a: Vec<f64> = (0..n).map(|_| rng.gen_range(-4..=4) as f64).collect();
            if a.iter().all(|&v| v == 0.0) {
                a[0] = 1.0;
            }
            let rhs = rng.gen_range(-8..=8) as f64 + 0.25;
            let coefs: Vec<(usize, f64)> = a.iter().copied().enumerate().filter(|&(_, v)| v != 0.0).collect();
            b.add_le(format!("r{i}"), &coefs, rhs);
            rows.push((a, rhs));
        }
        let inst = b.build().map_err(|e| format!("case {case}: {e}"))?;
        let res = solve_lp(&inst, &inst.global_box(), None);
        match (vertex_optimum(&c, &rows, &lower, &upper), res.status) {
            (None, LpStatus::Infeasible) => infeasible += 1,
            (Some(v), LpStatus::Optimal) if (v - res.objective).abs() <= 1e-6 => optimal += 1,
            (want, _) => return Err(format!("case {case}: {:?} {} vs {want:?}", res.status, res.objective)),
        }
    }
    // Objective supported only on fixed columns: every unfixed nonbasic column
    // has a zero reduced cost.
    let mut degenerate_checked = 0;
    for case in 0..100 {
        let n = rng.gen_range(1..=5);
        let m = rng.gen_range(1..=4);
        let mut b = InstanceBuilder::new(format!("deg{case}"));
        for j in 0..n {
            let l = rng.gen_range(0..=2) as f64;
            let fixed = rng.gen_bool(0.4);
            let u = if fixed { l } else { l + rng.gen_range(1..=3) as f64 };
            let cj = if fixed { rng.gen_range(-3..=3) as f64 } else { 0.0 };
            b.add_var(format!("x{j}"), l, u, false, cj);
        }
        for i in 0..m {
            let coefs: Vec<(usize, f64)> = (0..n).map(|j| (j, rng.gen_range(-3..=3) as f64)).filter(|&(_, a)| a != 0.0).collect();
            b.add_le(format!("r{i}"), &coefs, rng.gen_range(0..=10) as f64);
        }
        let inst = b.build().map_err(|e| format!("deg case {case}: {e}"))?;
        let res = solve_lp(&inst, &inst.global_box(), None);
        if res.is_optimal() {
            degenerate_checked += 1;
            let share = measure_degeneracy(&res, inst.num_rows()).degenerate_share;
            if share != 1.0 {
                return Err(format!("deg case {case}: share {share} with zero unfixed objective"));
            }
        }
    }
    Ok(format!(
        "100 LPs ({optimal} optimal, {infeasible} infeasible) match vertex enumeration; share = 1 on {degenerate_checked} zero-objective LPs"
    ))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut instances = vec![concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/toy.mps").into()];
    for seed in [3u64, 11, 42] {
        let path = dir.path().join(format!("rand{seed}.mps"));
        write_mps(&common::random_ip(seed), &path).map_err(|e| e.to_string())?;
        instances.push(path);
    }
    for inst in &instances {
        let mut outputs = Vec::new();
        for run in 0..2 {
            let events = dir.path().join(format!("events{run}.jsonl"));
            let out = Command::new(env!("CARGO_BIN_EXE_rapidlearn"))
                .arg("solve")
                .arg(inst)
                .args(["--rapid", "local", "--criteria", "dualbound,leaves,degeneracy,nsols", "--freq-f", "1"])
                .args(["--freq-beta", "2", "--seed", "13", "--json", "--no-timing", "--emit-events"])
                .arg(&events)
                .output()
                .map_err(|e| e.to_string())?;
            if !out.status.success() {
                return Err(format!("{}: exit {:?}", inst.display(), out.status.code()));
            }
            let log = std::fs::read(&events).map_err(|e| e.to_string())?;
            outputs.push((out.stdout, log));
        }
        if outputs[0] != outputs[1] {
            return Err(format!("{}: outputs differ between runs", inst.display()));
        }
    }
    Ok(format!("{} instances, JSON and event logs byte-identical over two runs", instances.len()))
}

fn directional_report() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut names = BTreeSet::new();
    for seed in 0..12u64 {
        let inst = common::random_feasibility_ip(1000 + seed);
        write_mps(&inst, &dir.path().join(format!("feas{seed}.mps"))).map_err(|e| e.to_string())?;
        names.insert(format!("feas{seed}"));
    }
    let rapid = RapidConfig {
        mode: RapidMode::Local,
        criteria: [Criterion::Degeneracy].into_iter().collect(),
        ..RapidConfig::default()
    };
    let configs = vec![
        BenchConfig {
            name: "off".into(),
            solve: SolveConfig::default(),
        },
        BenchConfig {
            name: "local-degeneracy".into(),
            solve: SolveConfig {
                rapid,
                ..SolveConfig::default()
            },
        },
    ];
    let suite = run_suite(dir.path(), &configs, &[0, 1]).map_err(|e| e.to_string())?;
    if suite.rows.len() != names.len() * 2 * 2 {
        return Err(format!("expected {} runs, got {}", names.len() * 4, suite.rows.len()));
    }
    let report = Report::build(&suite.rows, "off").map_err(|e| e.to_string())?;
    let groups: Vec<(&str, &str)> = report.rows.iter().map(|r| (r.group.as_str(), r.config.as_str())).collect();
    for want in [("all", "off"), ("all", "local-degeneracy"), ("affected", "local-degeneracy"), ("unaffected", "local-degeneracy")] {
        if !groups.contains(&want) {
            return Err(format!("report lacks row {want:?}"));
        }
    }
    for r in &report.rows {
        let finite = [r.time, r.nodes].iter().all(|v| v.is_finite() && *v >= 0.0);
        if !finite || r.solved > r.runs {
            return Err(format!("malformed row {r:?}"));
        }
    }
    let md = report.to_markdown();
    let csv = report.to_csv().map_err(|e| e.to_string())?;
    if csv.lines().count() != report.rows.len() + 1 {
        return Err("csv row count mismatch".into());
    }
    println!("{md}");
    let affected = report
        .rows
        .iter()
        .find(|r| r.group == "affected")
        .map_or(0, |r| r.runs);
    Ok(format!("{} runs summarised, {affected} affected, report well-formed", suite.rows.len()))
}

fn main() {
    let suite = run_exactness_suite();
    let results: Vec<(&str, Outcome)> = vec![
        ("exactness", suite.exactness),
        ("conflict validity", suite.validity),
        ("1-UIP structure", uip_structure(&suite.traces)),
        ("linear form equivalence", knapsack_equivalence()),
        ("formula checks", formula_checks()),
        ("criterion thresholds", threshold_checks()),
        ("propagation soundness", propagation_soundness()),
        ("LP oracle", lp_oracle()),
        ("determinism", determinism()),
        ("directional report", directional_report()),
    ];
    let mut failed = 0;
    for (i, (name, r)) in results.iter().enumerate() {
        match r {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
