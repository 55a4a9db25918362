//! Helpers shared by the integration tests. Every oracle here is written
//! against plain slices, independently of the library code it checks.

#![allow(dead_code)]

use std::io::Write;

use eegflow::flow::{build_architecture, ArchitectureConfig, FlowModel};
use eegflow::selfcheck::randomize_model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Writes one status line straight to stdout so it shows even when the test
/// harness captures output.
pub fn report(criterion: &str, passed: bool, detail: &str) {
    let status = if passed { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "[{status}] {criterion}: {detail}");
    let _ = out.flush();
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// A model of the given shape with every weight and the prior redrawn.
pub fn random_model(
    rng: &mut ChaCha8Rng,
    channels: usize,
    samples: usize,
    stages: usize,
    kernel_size: usize,
    n_classes: usize,
) -> FlowModel {
    let mut model = build_architecture(&ArchitectureConfig {
        channels,
        samples,
        n_classes,
        n_stages: Some(stages),
        kernel_size,
        init_seed: rng.random(),
        ..Default::default()
    })
    .expect("valid architecture");
    randomize_model(&mut model, rng, 1.0).expect("randomize");
    model
}

/// `(f(+h) - f(-h)) / 2h`.
pub fn central_difference(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Minimum transport cost between uniform distributions by exhaustive search
/// over every plan whose entries are multiples of `1 / lcm(n, m)`. Uniform
/// marginals are integral at that unit, so the transportation polytope has
/// all its vertices on this lattice and the search is exact. Rows are filled
/// one at a time, memoised on the remaining column capacities.
pub fn brute_force_uniform_ot(cost: &[f64], n: usize, m: usize) -> f64 {
    let l = n / gcd(n, m) * m;
    let (row_units, col_units) = (l / n, l / m);
    let mut memo = std::collections::HashMap::new();
    let caps = vec![col_units; m];
    let best = fill_rows(cost, n, m, 0, row_units, caps, &mut memo);
    best / l as f64
}

fn fill_rows(
    cost: &[f64],
    n: usize,
    m: usize,
    row: usize,
    row_units: usize,
    caps: Vec<usize>,
    memo: &mut std::collections::HashMap<(usize, Vec<usize>), f64>,
) -> f64 {
    if row == n {
        return if caps.iter().all(|&c| c == 0) { 0.0 } else { f64::INFINITY };
    }
    if let Some(&v) = memo.get(&(row, caps.clone())) {
        return v;
    }
    let mut best = f64::INFINITY;
    let mut alloc = vec![0usize; m];
    distribute(cost, n, m, row, row_units, 0, &caps, &mut alloc, memo, &mut best);
    memo.insert((row, caps), best);
    best
}

#[allow(clippy::too_many_arguments)]
fn distribute(
    cost: &[f64],
    n: usize,
    m: usize,
    row: usize,
    left: usize,
    col: usize,
    caps: &[usize],
    alloc: &mut Vec<usize>,
    memo: &mut std::collections::HashMap<(usize, Vec<usize>), f64>,
    best: &mut f64,
) {
    if col == m {
        if left > 0 {
            return;
        }
        let here: f64 = (0..m).map(|j| alloc[j] as f64 * cost[row * m + j]).sum();
        let rest_caps: Vec<usize> = caps.iter().zip(alloc.iter()).map(|(c, a)| c - a).collect();
        let total = here + fill_rows(cost, n, m, row + 1, left_units(n, m), rest_caps, memo);
        if total < *best {
            *best = total;
        }
        return;
    }
    for units in 0..=left.min(caps[col]) {
        alloc[col] = units;
        distribute(cost, n, m, row, left - units, col + 1, caps, alloc, memo, best);
    }
    alloc[col] = 0;
}

fn left_units(n: usize, m: usize) -> usize {
    m / gcd(n, m)
}

/// Minimum over all `n!` permutations of `sum_i cost[i, perm[i]] / n`.
pub fn brute_force_assignment(cost: &[f64], n: usize) -> f64 {
    fn go(cost: &[f64], n: usize, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == n {
            *best = best.min(acc);
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                go(cost, n, row + 1, used, acc + cost[row * n + j], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, n, 0, &mut vec![false; n], 0.0, &mut best);
    best / n as f64
}

/// Squared-Euclidean cost matrix between row-major point sets.
pub fn sq_cost(p: &[f64], q: &[f64], d: usize) -> Vec<f64> {
    let (n, m) = (p.len() / d, q.len() / d);
    let mut c = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            c.push(sq_dist(&p[i * d..(i + 1) * d], &q[j * d..(j + 1) * d]));
        }
    }
    c
}
