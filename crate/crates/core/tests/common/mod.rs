//! Random small integer programs and brute-force oracles shared by the
//! integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rapidlearn::model::{BoundBox, Instance, InstanceBuilder};

/// Random pure IP: n ≤ 8, m ≤ 6, integer bounds inside [0, 3], integer
/// coefficients in [-4, 4]. Most rows are built around a random point so a
/// good share of the instances is feasible.
pub fn random_ip(seed: u64) -> Instance {
    random_ip_with(seed, false)
}

/// Same family with a zero objective.
pub fn random_feasibility_ip(seed: u64) -> Instance {
    random_ip_with(seed, true)
}

fn random_ip_with(seed: u64, zero_objective: bool) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(3..=8);
    let m = rng.gen_range(2..=6);
    let mut b = InstanceBuilder::new(format!("rand{seed}"));
    let mut anchor = Vec::with_capacity(n);
    for j in 0..n {
        let l = rng.gen_range(0..=2) as f64;
        let u = rng.gen_range(l as i64..=3) as f64;
        let c = if zero_objective { 0.0 } else { rng.gen_range(-4..=4) as f64 };
        b.add_var(format!("x{j}"), l, u, true, c);
        anchor.push(rng.gen_range(l as i64..=u as i64) as f64);
    }
    let mut rows = 0;
    while rows < m {
        let mut coefs = Vec::new();
        for j in 0..n {
            if rng.gen_bool(0.7) {
                let a = rng.gen_range(-4..=4);
                if a != 0 {
                    coefs.push((j, a as f64));
                }
            }
        }
        let act: f64 = coefs.iter().map(|&(j, a)| a * anchor[j]).sum();
        let slack = rng.gen_range(0..=6) as f64 / 2.0;
        let name = format!("r{rows}");
        match rng.gen_range(0..12) {
            0 if rows + 2 <= m => {
                b.add_eq(name, &coefs, act);
                rows += 2;
                continue;
            }
            1 => b.add_le(name, &coefs, act - 1.0 - slack),
            2..=4 => b.add_ge(name, &coefs, act - slack),
            _ => b.add_le(name, &coefs, act + slack),
        }
        rows += 1;
    }
    b.build().expect("random instance is valid")
}

/// Every integer point of `bounds`.
pub fn points(bounds: &BoundBox) -> Vec<Vec<f64>> {
    let n = bounds.len();
    let mut out = Vec::new();
    if (0..n).any(|j| bounds.lower(j) > bounds.upper(j)) {
        return out;
    }
    let mut x: Vec<f64> = (0..n).map(|j| bounds.lower(j).ceil()).collect();
    loop {
        out.push(x.clone());
        let mut j = 0;
        while j < n {
            if x[j] + 1.0 <= bounds.upper(j) + 1e-9 {
                x[j] += 1.0;
                break;
            }
            x[j] = bounds.lower(j).ceil();
            j += 1;
        }
        if j == n {
            return out;
        }
    }
}

pub fn feasible_points(inst: &Instance) -> Vec<Vec<f64>> {
    points(&inst.global_box())
        .into_iter()
        .filter(|x| inst.is_feasible(x))
        .collect()
}

/// Optimal value by enumeration, `None` when infeasible.
pub fn enumerate_optimum(inst: &Instance) -> Option<f64> {
    feasible_points(inst)
        .iter()
        .map(|x| inst.objective_value(x))
        .min_by(f64::total_cmp)
}
