//! Built-in invariant suites behind `eegflow selfcheck`.
//!
//! Each check builds its own small problem from a fixed seed, so a run is
//! deterministic and independent of any files on disk.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autodiff::{ParamId, Tape, Var};
use crate::error::Result;
use crate::flow::{build_architecture, flow_forward, flow_inverse, ArchitectureConfig, FlowModel};
use crate::prior::ClassConditionalGaussian;
use crate::tensor::Tensor;
use crate::training::nll_loss;
use crate::transport::{exact_ot, sinkhorn, DiscreteDistribution, Metric};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(suite: &'static str, name: impl Into<String>, outcome: Result<(bool, String)>) -> CheckResult {
    let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckResult {
        suite,
        name: name.into(),
        passed,
        detail,
    }
}

/// Redraws every coupling weight as `scale * N(0, 1) / sqrt(fan_in)` (biases
/// `0.1 * scale * N(0, 1)`) and draws a random prior (means `N(0, 1)`,
/// log-stds uniform in `[-0.5, 0.5)`).
pub fn randomize_model<R: Rng + ?Sized>(model: &mut FlowModel, rng: &mut R, scale: f64) -> Result<()> {
    let n_prior = 2;
    let n = model.params().len();
    for p in model.params_mut().into_iter().take(n - n_prior) {
        let std = match p.shape() {
            [_, c_in, k] => scale / ((c_in * k) as f64).sqrt(),
            _ => 0.1 * scale,
        };
        for v in p.data_mut() {
            *v = std * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let prior = model.prior();
    let shape = [prior.n_classes(), prior.dim()];
    let means = Tensor::from_fn(&shape, |_| rng.sample(StandardNormal));
    let log_stds = Tensor::from_fn(&shape, |_| rng.random_range(-0.5..0.5));
    model.set_prior(ClassConditionalGaussian::new(means, log_stds)?)
}

fn random_model(rng: &mut ChaCha8Rng, channels: usize, samples: usize, stages: usize, k: usize) -> Result<FlowModel> {
    let mut m = build_architecture(&ArchitectureConfig {
        channels,
        samples,
        n_stages: Some(stages),
        kernel_size: k,
        init_seed: rng.random(),
        ..Default::default()
    })?;
    randomize_model(&mut m, rng, 1.0)?;
    Ok(m)
}

fn round_trip(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let stages = rng.random_range(0..=3usize);
        let channels = 2 * rng.random_range(1..=3usize);
        let samples = (1 << stages) * rng.random_range(2..=4usize);
        let model = random_model(&mut rng, channels, samples, stages, 3)?;
        let x = Tensor::from_fn(&[channels, samples], |_| 3.0 * rng.sample::<f64, _>(StandardNormal));
        let back = flow_inverse(&model, &flow_forward(&model, &x)?.latent)?;
        worst = worst.max(back.max_abs_diff(&x));
    }
    Ok((worst < 1e-8, format!("max |f^-1(f(x)) - x| = {worst:.3e}")))
}

fn toy_2d(rng: &mut ChaCha8Rng) -> Result<FlowModel> {
    random_model(rng, 1, 2, 1, 1)
}

/// Central-difference Jacobian determinant of the 2-D toy at 20 points. The
/// channel rotation is a swap here, so the sign is negative; only the
/// magnitude measures volume.
fn jacobian_determinant(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = toy_2d(&mut rng)?;
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x0: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let mut jac = [[0.0; 2]; 2];
        for (j, col) in [0, 1].into_iter().enumerate() {
            let eval = |d: f64| -> Result<Vec<f64>> {
                let mut x = x0;
                x[col] += d;
                Ok(flow_forward(&model, &Tensor::new(vec![1, 2], x.to_vec())?)?.latent.into_vec())
            };
            let (plus, minus) = (eval(h)?, eval(-h)?);
            for i in 0..2 {
                jac[i][j] = (plus[i] - minus[i]) / (2.0 * h);
            }
        }
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        worst = worst.max((det.abs() - 1.0).abs());
    }
    let logdet = model.log_det_jacobian();
    Ok((
        worst < 1e-4 && logdet == 0.0,
        format!("reported log-det {logdet}, max ||det J| - 1| = {worst:.3e}"),
    ))
}

/// Midpoint-rule integral of the marginal density of a 2-D model.
pub fn integrate_density_2d(model: &FlowModel, lo: [f64; 2], hi: [f64; 2], n: usize) -> Result<f64> {
    let (dx, dy) = ((hi[0] - lo[0]) / n as f64, (hi[1] - lo[1]) / n as f64);
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let x = [lo[0] + (i as f64 + 0.5) * dx, lo[1] + (j as f64 + 0.5) * dy];
            let ll = model.log_likelihood_marginal(&Tensor::new(vec![1, 2], x.to_vec())?)?;
            total += ll.exp();
        }
    }
    Ok(total * dx * dy)
}

/// Box covering every class's `±8σ` region mapped back to input space.
pub fn density_box_2d(model: &FlowModel) -> Result<([f64; 2], [f64; 2])> {
    let prior = model.prior();
    let sigma = prior.log_stds().data().iter().cloned().fold(f64::MIN, f64::max).exp();
    let mut lo = [f64::MAX; 2];
    let mut hi = [f64::MIN; 2];
    for y in 0..prior.n_classes() {
        let mean = prior.class_mean(y)?;
        for corner in [[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0], [0.0, 0.0]] {
            let h = Tensor::new(
                vec![2],
                vec![mean.data()[0] + 8.0 * sigma * corner[0], mean.data()[1] + 8.0 * sigma * corner[1]],
            )?;
            let x = flow_inverse(model, &h)?;
            for d in 0..2 {
                lo[d] = lo[d].min(x.data()[d]);
                hi[d] = hi[d].max(x.data()[d]);
            }
        }
    }
    // widen by 8σ on each side so warped tails stay inside
    for d in 0..2 {
        lo[d] -= 8.0 * sigma;
        hi[d] += 8.0 * sigma;
    }
    Ok((lo, hi))
}

fn normalization(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = toy_2d(&mut rng)?;
    let (lo, hi) = density_box_2d(&model)?;
    let mass = integrate_density_2d(&model, lo, hi, 400)?;
    Ok(((mass - 1.0).abs() < 0.02, format!("integral = {mass:.5}")))
}

type Builder = fn(&mut Tape, &[Var]) -> Result<Var>;

/// One differentiable op with input shapes and a sampler for its inputs.
struct OpCase {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    /// Positive inputs for log and sqrt, inputs away from zero for kinks.
    domain: Domain,
    build: Builder,
}

#[derive(Clone, Copy)]
enum Domain {
    Any,
    Positive,
    AwayFromZero,
}

fn op_cases() -> Vec<OpCase> {
    fn squeeze_index() -> Arc<[usize]> {
        // (2, 4) -> (4, 2) with even/odd time samples interleaved into channels
        (0..8)
            .map(|o| {
                let (c2, t) = (o / 2, o % 2);
                (c2 / 2) * 4 + 2 * t + c2 % 2
            })
            .collect()
    }
    vec![
        OpCase { name: "add", shapes: &[&[2, 3], &[2, 3]], domain: Domain::Any, build: |t, v| t.add(v[0], v[1]) },
        OpCase { name: "sub", shapes: &[&[2, 3], &[2, 3]], domain: Domain::Any, build: |t, v| t.sub(v[0], v[1]) },
        OpCase { name: "mul", shapes: &[&[2, 3], &[2, 3]], domain: Domain::Any, build: |t, v| t.mul(v[0], v[1]) },
        OpCase { name: "scale", shapes: &[&[5]], domain: Domain::Any, build: |t, v| Ok(t.scale(v[0], -1.7)) },
        OpCase { name: "offset", shapes: &[&[5]], domain: Domain::Any, build: |t, v| Ok(t.offset(v[0], 0.3)) },
        OpCase { name: "neg", shapes: &[&[5]], domain: Domain::Any, build: |t, v| Ok(t.neg(v[0])) },
        OpCase { name: "exp", shapes: &[&[5]], domain: Domain::Any, build: |t, v| Ok(t.exp(v[0])) },
        OpCase { name: "log", shapes: &[&[5]], domain: Domain::Positive, build: |t, v| Ok(t.log(v[0])) },
        OpCase { name: "sqrt", shapes: &[&[5]], domain: Domain::Positive, build: |t, v| Ok(t.sqrt(v[0])) },
        OpCase { name: "square", shapes: &[&[5]], domain: Domain::Any, build: |t, v| Ok(t.square(v[0])) },
        OpCase { name: "relu", shapes: &[&[6]], domain: Domain::AwayFromZero, build: |t, v| Ok(t.relu(v[0])) },
        OpCase { name: "clamp_min", shapes: &[&[6]], domain: Domain::AwayFromZero, build: |t, v| Ok(t.clamp_min(v[0], 0.0)) },
        OpCase {
            name: "sum",
            shapes: &[&[2, 3]],
            domain: Domain::Any,
            build: |t, v| {
                let s = t.sum(v[0]);
                Ok(t.square(s))
            },
        },
        OpCase { name: "reshape", shapes: &[&[2, 3]], domain: Domain::Any, build: |t, v| t.reshape(v[0], &[3, 2]) },
        OpCase { name: "gather", shapes: &[&[2, 4]], domain: Domain::Any, build: |t, v| t.gather(v[0], squeeze_index(), &[4, 2]) },
        OpCase { name: "concat", shapes: &[&[1, 3], &[2, 3]], domain: Domain::Any, build: |t, v| t.concat(v[0], v[1]) },
        OpCase {
            name: "conv1d",
            shapes: &[&[2, 6], &[3, 2, 3], &[3]],
            domain: Domain::Any,
            build: |t, v| t.conv1d(v[0], v[1], v[2]),
        },
        OpCase { name: "hartley", shapes: &[&[2, 6]], domain: Domain::Any, build: |t, v| t.hartley(v[0]) },
    ]
}

fn sample_input(rng: &mut ChaCha8Rng, shape: &[usize], domain: Domain) -> Tensor {
    Tensor::from_fn(shape, |_| match domain {
        Domain::Any => rng.sample(StandardNormal),
        Domain::Positive => rng.random_range(0.5..2.0),
        Domain::AwayFromZero => {
            let m: f64 = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        }
    })
}

/// `sum(w * op(inputs))` for a fixed random `w`, so every output element
/// contributes with its own weight.
fn weighted_loss(case: &OpCase, inputs: &[Tensor], w: &Tensor) -> Result<(f64, Tape, Var)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(k, x)| tape.param(ParamId(k), x.clone()))
        .collect();
    let out = (case.build)(&mut tape, &vars)?;
    let out_shape = tape.value(out).shape().to_vec();
    let w = tape.constant(w.reshape(&out_shape)?);
    let prod = tape.mul(out, w)?;
    let loss = tape.sum(prod);
    Ok((tape.scalar(loss), tape, loss))
}

/// Relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn op_gradients(seed: u64, probes: usize) -> Result<Vec<CheckResult>> {
    let cases = op_cases();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = vec![0.0f64; cases.len()];
    for probe in 0..probes {
        let ci = probe % cases.len();
        let case = &cases[ci];
        let inputs: Vec<Tensor> = case.shapes.iter().map(|s| sample_input(&mut rng, s, case.domain)).collect();
        let n_out = {
            let mut t = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(k, x)| t.param(ParamId(k), x.clone()))
                .collect();
            let out = (case.build)(&mut t, &vars)?;
            t.value(out).len()
        };
        let w = Tensor::from_fn(&[n_out], |_| rng.sample(StandardNormal));
        let (_, tape, loss) = weighted_loss(case, &inputs, &w)?;
        let grads = tape.backward(loss)?;
        let k = rng.random_range(0..inputs.len());
        let idx = rng.random_range(0..inputs[k].len());
        let analytic = grads.get(ParamId(k)).map_or(0.0, |g| g.data()[idx]);
        let h = 1e-6;
        let eval = |d: f64| -> Result<f64> {
            let mut xs = inputs.clone();
            xs[k].data_mut()[idx] += d;
            Ok(weighted_loss(case, &xs, &w)?.0)
        };
        let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
        worst[ci] = worst[ci].max(relative_error(analytic, numeric, 1e-6));
    }
    Ok(cases
        .iter()
        .zip(worst)
        .map(|(c, e)| CheckResult {
            suite: "gradients",
            name: c.name.to_string(),
            passed: e < 1e-4,
            detail: format!("max relative error {e:.3e}"),
        })
        .collect())
}

/// Full negative log-likelihood of a random model against its own gradients.
fn model_gradients(seed: u64, probes: usize) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = random_model(&mut rng, 2, 8, 2, 3)?;
    let batch = Tensor::from_fn(&[3, 2, 8], |_| rng.sample(StandardNormal));
    let labels = [0usize, 1, 0];
    let loss_of = |m: &FlowModel| -> Result<(f64, crate::autodiff::Gradients)> {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, true);
        let loss = nll_loss(&mut tape, m, &bound, &batch, &labels)?;
        Ok((tape.scalar(loss), tape.backward(loss)?))
    };
    let (_, grads) = loss_of(&model)?;
    let mut worst = 0.0f64;
    let h = 1e-6;
    for _ in 0..probes {
        let p = rng.random_range(0..model.params().len());
        let len = model.params()[p].len();
        let idx = rng.random_range(0..len);
        let analytic = grads.get(ParamId(p)).map_or(0.0, |g| g.data()[idx]);
        let eval = |d: f64| -> Result<f64> {
            let mut m = model.clone();
            m.params_mut()[p].data_mut()[idx] += d;
            Ok(loss_of(&m)?.0)
        };
        let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic, numeric, 1e-6));
    }
    Ok((worst < 1e-4, format!("{probes} probes, max relative error {worst:.3e}")))
}

/// Cheapest permutation by enumeration (Heap's algorithm).
fn brute_force_assignment(cost: &[f64], n: usize) -> f64 {
    let mut perm: Vec<usize> = (0..n).collect();
    let value = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>();
    let mut best = value(&perm);
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(value(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[n, d], |_| rng.sample(StandardNormal))
}

fn ot_exact(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for n in 1..=6 {
        for _ in 0..3 {
            let p = DiscreteDistribution::uniform(random_points(&mut rng, n, 3))?;
            let q = DiscreteDistribution::uniform(random_points(&mut rng, n, 3))?;
            let plan = exact_ot(&p, &q, Metric::SquaredEuclidean)?;
            let cost = crate::transport::cost_matrix(p.points(), q.points(), Metric::SquaredEuclidean)?;
            let best = brute_force_assignment(cost.data(), n) / n as f64;
            worst = worst.max((plan.cost - best).abs());
        }
    }
    Ok((worst < 1e-12, format!("max |exact - enumeration| = {worst:.3e}")))
}

fn ot_sinkhorn(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let p = DiscreteDistribution::uniform(random_points(&mut rng, 8, 2))?;
        let q = DiscreteDistribution::uniform(random_points(&mut rng, 8, 2))?;
        let exact = exact_ot(&p, &q, Metric::SquaredEuclidean)?.cost;
        let approx = sinkhorn(&p, &q, Metric::SquaredEuclidean, 1e-3, 100_000, 1e-10)?.cost;
        worst = worst.max((approx - exact).abs() / exact);
    }
    Ok((worst < 0.01, format!("max relative gap {worst:.3e} at epsilon 1e-3")))
}

/// Runs every suite.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    let mut out = vec![
        check("flow", "round trip", round_trip(seed)),
        check("flow", "log-det and Jacobian", jacobian_determinant(seed)),
        check("flow", "normalization d=2", normalization(seed)),
    ];
    match op_gradients(seed, 100) {
        Ok(results) => out.extend(results),
        Err(e) => out.push(check("gradients", "ops", Err(e))),
    }
    out.push(check("gradients", "model nll", model_gradients(seed, 30)));
    out.push(check("transport", "exact vs enumeration", ot_exact(seed)));
    out.push(check("transport", "sinkhorn vs exact", ot_sinkhorn(seed)));
    out
}

/// Fixed-width table, one row per check.
pub fn format_table(results: &[CheckResult]) -> String {
    let mut s = format!("{:<10} {:<24} {:<6} {}\n", "suite", "check", "status", "detail");
    for r in results {
        s.push_str(&format!(
            "{:<10} {:<24} {:<6} {}\n",
            r.suite,
            r.name,
            if r.passed { "pass" } else { "FAIL" },
            r.detail
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumeration_finds_the_identity_on_a_diagonal_cost() {
        let cost = [0.0, 5.0, 5.0, 5.0, 0.0, 5.0, 5.0, 5.0, 0.0];
        assert_eq!(brute_force_assignment(&cost, 3), 0.0);
        let anti = [9.0, 1.0, 1.0, 9.0];
        assert_eq!(brute_force_assignment(&anti, 2), 2.0);
    }

    #[test]
    fn every_suite_passes() {
        let results = run_all(0);
        let failed: Vec<_> = results.iter().filter(|r| !r.passed).collect();
        assert!(failed.is_empty(), "{}", format_table(&results));
    }
}
