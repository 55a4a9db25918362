//! Optimal transport between empirical distributions and the transport-based
//! generator objective.
//!
//! Plans are stored dense and row-major, `coupling[i * m + j]` being the mass
//! moved from source point `i` to target point `j`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, try_map_indexed, Execution};
use crate::flow::{flow_inverse, FlowModel};
use crate::signals::SignalDataset;
use crate::tensor::Tensor;
use crate::training::{
    check_gradients, evaluate_split, learning_rates, AdamState, EpochRecord, TrainConfig,
    TrainReport,
};

/// Weighted point cloud; weights are nonnegative and sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteDistribution {
    points: Tensor,
    weights: Vec<f64>,
}

impl DiscreteDistribution {
    /// `points` has shape `(n, d)`.
    pub fn new(points: Tensor, weights: Vec<f64>) -> Result<Self> {
        if points.ndim() != 2 {
            return Err(Error::Shape {
                op: "DiscreteDistribution::new",
                dim: "rank",
                expected: 2,
                found: points.ndim(),
            });
        }
        if weights.len() != points.shape()[0] || weights.is_empty() {
            return Err(Error::invalid(
                "DiscreteDistribution::new",
                format!("{} weights for {} points", weights.len(), points.shape()[0]),
            ));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid(
                "DiscreteDistribution::new",
                "weights must be finite and nonnegative",
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(
                "DiscreteDistribution::new",
                format!("weights sum to {total}, not 1"),
            ));
        }
        Ok(Self { points, weights })
    }

    pub fn uniform(points: Tensor) -> Result<Self> {
        let n = points.shape().first().copied().unwrap_or(0);
        Self::new(points, vec![1.0 / n as f64; n])
    }

    pub fn points(&self) -> &Tensor {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    fn is_uniform(&self) -> bool {
        let u = 1.0 / self.len() as f64;
        self.weights.iter().all(|w| (w - u).abs() <= 1e-12 * u)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Euclidean,
    #[default]
    SquaredEuclidean,
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        match self {
            Metric::Euclidean => sq.sqrt(),
            Metric::SquaredEuclidean => sq,
        }
    }
}

/// `(n, m)` matrix of distances between the rows of `p` and `q`.
pub fn cost_matrix(p: &Tensor, q: &Tensor, metric: Metric) -> Result<Tensor> {
    cost_matrix_with(p, q, metric, Execution::default())
}

pub fn cost_matrix_with(p: &Tensor, q: &Tensor, metric: Metric, exec: Execution) -> Result<Tensor> {
    if p.ndim() != 2 || q.ndim() != 2 {
        return Err(Error::Shape {
            op: "cost_matrix",
            dim: "rank",
            expected: 2,
            found: if p.ndim() != 2 { p.ndim() } else { q.ndim() },
        });
    }
    let (n, d) = (p.shape()[0], p.shape()[1]);
    let m = q.shape()[0];
    if q.shape()[1] != d {
        return Err(Error::Shape {
            op: "cost_matrix",
            dim: "point dimension",
            expected: d,
            found: q.shape()[1],
        });
    }
    let rows = map_indexed(exec, n, |i| {
        let a = &p.data()[i * d..(i + 1) * d];
        (0..m)
            .map(|j| metric.distance(a, &q.data()[j * d..(j + 1) * d]))
            .collect::<Vec<_>>()
    });
    Ok(Tensor::from_parts(vec![n, m], rows.concat()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub n: usize,
    pub m: usize,
    pub coupling: Vec<f64>,
    /// `sum_ij coupling_ij * cost_ij` (transport cost only, no entropy term).
    pub cost: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl TransportPlan {
    fn from_coupling(coupling: Vec<f64>, cost: &Tensor, converged: bool, iterations: usize) -> Self {
        let (n, m) = (cost.shape()[0], cost.shape()[1]);
        let total = coupling.iter().zip(cost.data()).map(|(p, c)| p * c).sum();
        Self {
            n,
            m,
            coupling,
            cost: total,
            converged,
            iterations,
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.coupling[i * self.m + j]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.coupling.chunks(self.m).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        for row in self.coupling.chunks(self.m) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }
}

pub const DEFAULT_EXACT_CAP: usize = 1_000_000;

/// Which solver computes a plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Solver {
    Exact {
        #[serde(default = "default_cap")]
        cap: usize,
    },
    Sinkhorn {
        epsilon: f64,
        #[serde(default = "default_max_iters")]
        max_iters: usize,
        #[serde(default = "default_tol")]
        tol: f64,
    },
}

fn default_cap() -> usize {
    DEFAULT_EXACT_CAP
}

fn default_max_iters() -> usize {
    10_000
}

fn default_tol() -> f64 {
    1e-9
}

impl Default for Solver {
    fn default() -> Self {
        Solver::Exact {
            cap: DEFAULT_EXACT_CAP,
        }
    }
}

pub fn solve(
    p: &DiscreteDistribution,
    q: &DiscreteDistribution,
    metric: Metric,
    solver: &Solver,
) -> Result<TransportPlan> {
    match *solver {
        Solver::Exact { cap } => exact_ot_with_cap(p, q, metric, cap),
        Solver::Sinkhorn {
            epsilon,
            max_iters,
            tol,
        } => sinkhorn(p, q, metric, epsilon, max_iters, tol),
    }
}

pub fn exact_ot(
    p: &DiscreteDistribution,
    q: &DiscreteDistribution,
    metric: Metric,
) -> Result<TransportPlan> {
    exact_ot_with_cap(p, q, metric, DEFAULT_EXACT_CAP)
}

/// Exact optimum. Uniform weights with one size a multiple of the other are
/// solved as an assignment on replicated points; everything else goes through
/// a min-cost-flow linear program.
pub fn exact_ot_with_cap(
    p: &DiscreteDistribution,
    q: &DiscreteDistribution,
    metric: Metric,
    cap: usize,
) -> Result<TransportPlan> {
    let entries = p.len().saturating_mul(q.len());
    if entries > cap {
        return Err(Error::TransportCap { entries, cap });
    }
    let cost = cost_matrix(p.points(), q.points(), metric)?;
    let coupling = exact_plan(&cost, p, q);
    Ok(TransportPlan::from_coupling(coupling, &cost, true, 0))
}

fn exact_plan(cost: &Tensor, p: &DiscreteDistribution, q: &DiscreteDistribution) -> Vec<f64> {
    let (n, m) = (p.len(), q.len());
    if p.is_uniform() && q.is_uniform() && (m % n == 0 || n % m == 0) {
        replica_assignment(cost.data(), n, m)
    } else {
        min_cost_flow(cost.data(), p.weights(), q.weights())
    }
}

/// The smaller side is replicated `k` times so every unit of mass becomes one
/// node of a square assignment problem.
fn replica_assignment(cost: &[f64], n: usize, m: usize) -> Vec<f64> {
    let size = n.max(m);
    let (kr, kc) = (size / n, size / m);
    let square: Vec<f64> = (0..size * size)
        .map(|idx| {
            let (r, c) = (idx / size, idx % size);
            cost[(r / kr) * m + c / kc]
        })
        .collect();
    let assignment = hungarian(&square, size);
    let mut plan = vec![0.0; n * m];
    let unit = 1.0 / size as f64;
    for (r, &c) in assignment.iter().enumerate() {
        plan[(r / kr) * m + c / kc] += unit;
    }
    plan
}

/// Minimum-cost perfect matching on a dense `n x n` matrix; returns the
/// column assigned to each row. Shortest augmenting paths with potentials,
/// `O(n^3)`.
pub(crate) fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    // 1-based: row 0 / column 0 are the virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            let row = &cost[(i0 - 1) * n..i0 * n];
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; n];
    for j in 1..=n {
        col_of_row[row_of[j] - 1] = j - 1;
    }
    col_of_row
}

/// Transportation LP by successive shortest paths on the residual bipartite
/// graph, with Dijkstra on reduced costs.
fn min_cost_flow(cost: &[f64], a: &[f64], b: &[f64]) -> Vec<f64> {
    const EPS: f64 = 1e-15;
    let (n, m) = (a.len(), b.len());
    let mut supply = a.to_vec();
    let mut demand = b.to_vec();
    let mut flow = vec![0.0; n * m];
    // potentials: sources 0..n, sinks n..n+m
    let mut pot = vec![0.0; n + m];
    let min_cost = cost.iter().copied().fold(0.0f64, f64::min);
    pot[n..].fill(min_cost);
    loop {
        if supply.iter().all(|&s| s <= EPS) || demand.iter().all(|&d| d <= EPS) {
            break;
        }
        let mut dist = vec![f64::INFINITY; n + m];
        let mut prev = vec![usize::MAX; n + m];
        let mut done = vec![false; n + m];
        for i in 0..n {
            if supply[i] > EPS {
                dist[i] = 0.0;
            }
        }
        loop {
            let Some(u) = (0..n + m)
                .filter(|&x| !done[x] && dist[x].is_finite())
                .min_by(|&x, &y| dist[x].total_cmp(&dist[y]))
            else {
                break;
            };
            done[u] = true;
            if u < n {
                for j in 0..m {
                    let rc = (cost[u * m + j] + pot[u] - pot[n + j]).max(0.0);
                    if dist[u] + rc < dist[n + j] {
                        dist[n + j] = dist[u] + rc;
                        prev[n + j] = u;
                    }
                }
            } else {
                let j = u - n;
                for i in 0..n {
                    if flow[i * m + j] > EPS {
                        let rc = (pot[n + j] - pot[i] - cost[i * m + j]).max(0.0);
                        if dist[u] + rc < dist[i] {
                            dist[i] = dist[u] + rc;
                            prev[i] = u;
                        }
                    }
                }
            }
        }
        let Some(sink) = (0..m)
            .filter(|&j| demand[j] > EPS && dist[n + j].is_finite())
            .min_by(|&x, &y| dist[n + x].total_cmp(&dist[n + y]))
        else {
            break;
        };
        let target = dist[n + sink];
        for (p, d) in pot.iter_mut().zip(&dist) {
            *p += d.min(target);
        }
        // bottleneck along the path
        let mut amount = demand[sink];
        let mut node = n + sink;
        while prev[node] != usize::MAX {
            let from = prev[node];
            if from >= n {
                amount = amount.min(flow[node * m + (from - n)]);
            }
            node = from;
        }
        amount = amount.min(supply[node]);
        let mut node = n + sink;
        while prev[node] != usize::MAX {
            let from = prev[node];
            if from < n {
                flow[from * m + (node - n)] += amount;
            } else {
                flow[node * m + (from - n)] -= amount;
            }
            node = from;
        }
        supply[node] -= amount;
        demand[sink] -= amount;
    }
    flow.iter_mut().for_each(|f| {
        if *f < EPS {
            *f = 0.0;
        }
    });
    flow
}

fn log_sum_exp_iter(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Entropic OT by alternating dual updates in the log domain. `converged` is
/// set once the row-marginal L1 error drops below `tol`.
pub fn sinkhorn(
    p: &DiscreteDistribution,
    q: &DiscreteDistribution,
    metric: Metric,
    epsilon: f64,
    max_iters: usize,
    tol: f64,
) -> Result<TransportPlan> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid("sinkhorn", format!("epsilon {epsilon} must be positive")));
    }
    let cost = cost_matrix(p.points(), q.points(), metric)?;
    let (n, m) = (p.len(), q.len());
    let c = cost.data();
    let log_a: Vec<f64> = p.weights().iter().map(|w| w.ln()).collect();
    let log_b: Vec<f64> = q.weights().iter().map(|w| w.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let plan_entry = |f: &[f64], g: &[f64], i: usize, j: usize| {
        ((f[i] + g[j] - c[i * m + j]) / epsilon).exp()
    };
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        for i in 0..n {
            let lse = log_sum_exp_iter((0..m).map(|j| (g[j] - c[i * m + j]) / epsilon));
            f[i] = epsilon * (log_a[i] - lse);
        }
        for j in 0..m {
            let lse = log_sum_exp_iter((0..n).map(|i| (f[i] - c[i * m + j]) / epsilon));
            g[j] = epsilon * (log_b[j] - lse);
        }
        let err: f64 = (0..n)
            .map(|i| {
                let row: f64 = (0..m).map(|j| plan_entry(&f, &g, i, j)).sum();
                (row - p.weights()[i]).abs()
            })
            .sum();
        if err < tol {
            converged = true;
            break;
        }
    }
    let coupling = (0..n * m)
        .map(|idx| plan_entry(&f, &g, idx / m, idx % m))
        .collect();
    Ok(TransportPlan::from_coupling(coupling, &cost, converged, iterations))
}

/// Settings of the transport objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OtConfig {
    /// Generated samples per training sample.
    pub ratio: usize,
    pub metric: Metric,
    pub solver: Solver,
    /// Match each class's generated samples only to that class's trials.
    pub per_class: bool,
}

impl Default for OtConfig {
    fn default() -> Self {
        Self {
            ratio: 3,
            metric: Metric::SquaredEuclidean,
            solver: Solver::default(),
            per_class: true,
        }
    }
}

/// Value and parameter gradients of one transport step.
#[derive(Clone, Debug)]
pub struct OtLoss {
    pub loss: f64,
    pub grads: Gradients,
    pub n_generated: usize,
}

struct Group {
    real: Vec<usize>,
    /// Class of each generated sample and its standard-normal draw.
    generated: Vec<(usize, Tensor)>,
    weight: f64,
}

/// Plan-weighted cost between the training set and `ratio * n` samples
/// pushed through the inverse flow. The plan is held constant; gradients
/// reach the flow and the prior through the reparameterised samples
/// `mean_y + exp(log_std_y) * z`.
pub fn ot_generator_loss<R: Rng + ?Sized>(
    model: &FlowModel,
    train: &SignalDataset,
    rng: &mut R,
    config: &OtConfig,
    exec: Execution,
) -> Result<OtLoss> {
    if train.is_empty() || config.ratio == 0 {
        return Err(Error::invalid(
            "ot_generator_loss",
            "needs a nonempty training set and ratio >= 1",
        ));
    }
    let d = model.latent_dim();
    let n = train.len();
    let mut groups = Vec::new();
    let mut draw = |class: usize, count: usize, out: &mut Vec<(usize, Tensor)>| {
        for _ in 0..count {
            let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            out.push((class, Tensor::from_vec(z)));
        }
    };
    if config.per_class {
        for (y, &count) in train.class_counts().iter().enumerate() {
            if count == 0 {
                continue;
            }
            let mut generated = Vec::new();
            draw(y, config.ratio * count, &mut generated);
            groups.push(Group {
                real: (0..n).filter(|&i| train.labels()[i] == y).collect(),
                generated,
                weight: count as f64 / n as f64,
            });
        }
    } else {
        let mut generated = Vec::new();
        for (y, &count) in train.class_counts().iter().enumerate() {
            draw(y, config.ratio * count, &mut generated);
        }
        groups.push(Group {
            real: (0..n).collect(),
            generated,
            weight: 1.0,
        });
    }

    let prior = model.prior();
    let latent = |y: usize, z: &Tensor| -> Tensor {
        let mu = &prior.means().data()[y * d..(y + 1) * d];
        let ls = &prior.log_stds().data()[y * d..(y + 1) * d];
        Tensor::from_parts(
            vec![d],
            z.data()
                .iter()
                .zip(mu.iter().zip(ls))
                .map(|(z, (m, s))| m + s.exp() * z)
                .collect(),
        )
    };

    let mut total = Gradients::default();
    let mut loss = 0.0;
    let mut n_generated = 0;
    for group in &groups {
        let signals = try_map_indexed(exec, group.generated.len(), |j| {
            let (y, z) = &group.generated[j];
            flow_inverse(model, &latent(*y, z)).map(Tensor::into_vec)
        })?;
        let m = signals.len();
        let real: Vec<f64> = group
            .real
            .iter()
            .flat_map(|&i| train.trial_data(i).iter().copied())
            .collect();
        let p = DiscreteDistribution::uniform(Tensor::from_parts(vec![group.real.len(), d], real))?;
        let q = DiscreteDistribution::uniform(Tensor::from_parts(vec![m, d], signals.concat()))?;
        let plan = solve(&p, &q, config.metric, &config.solver)?;
        loss += group.weight * plan.cost;
        n_generated += m;

        let per_sample = try_map_indexed(exec, m, |j| -> Result<Gradients> {
            let (y, z) = &group.generated[j];
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let rows: std::sync::Arc<[usize]> = (y * d..(y + 1) * d).collect();
            let mu = tape.gather(bound.prior_means(), rows.clone(), &[d])?;
            let ls = tape.gather(bound.prior_log_stds(), rows, &[d])?;
            let std = tape.exp(ls);
            let zv = tape.constant(z.clone());
            let scaled = tape.mul(std, zv)?;
            let h = tape.add(mu, scaled)?;
            let x = model.inverse_on_tape(&mut tape, &bound, h)?;
            let x = tape.reshape(x, &[d])?;
            let mut terms = Vec::new();
            for (k, _) in group.real.iter().enumerate() {
                let mass = plan.get(k, j);
                if mass <= 0.0 {
                    continue;
                }
                let target = tape.constant(p.points().index_axis0(k));
                let diff = tape.sub(x, target)?;
                let sq = tape.square(diff);
                let mut dist = tape.sum(sq);
                if config.metric == Metric::Euclidean {
                    // keeps the derivative finite at coincident points
                    let floored = tape.clamp_min(dist, 1e-24);
                    dist = tape.sqrt(floored);
                }
                terms.push(tape.scale(dist, group.weight * mass));
            }
            if terms.is_empty() {
                return Ok(Gradients::default());
            }
            let loss_j = tape.add_all(&terms)?;
            tape.backward(loss_j)
        })?;
        for g in &per_sample {
            total.accumulate(g);
        }
    }
    Ok(OtLoss {
        loss,
        grads: total,
        n_generated,
    })
}

/// One transport step per epoch on the full training set.
pub fn train_ot(
    model: &mut FlowModel,
    train: &SignalDataset,
    valid: &SignalDataset,
    config: &TrainConfig,
) -> Result<TrainReport> {
    train_ot_with(model, train, valid, config, &mut |_, _, _| Ok(()))
}

/// [`train_ot`] with a callback after every epoch (checkpointing).
pub fn train_ot_with(
    model: &mut FlowModel,
    train: &SignalDataset,
    valid: &SignalDataset,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(usize, &FlowModel, &EpochRecord) -> Result<()>,
) -> Result<TrainReport> {
    config.validate()?;
    let mut report = TrainReport::default();
    if config.epochs == 0 {
        return Ok(report);
    }
    let exec = Execution::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let lrs = learning_rates(model, config);
    let mut adam = AdamState::new(model.params().len());
    report.initial = Some(evaluate_split(model, train, valid, exec)?);
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let step = ot_generator_loss(model, train, &mut rng, &config.ot, exec)?;
        if !step.loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, step: 0 });
        }
        check_gradients(model, &step.grads, epoch, 0)?;
        adam.step(model.params_mut(), &step.grads, &lrs);
        let metrics = evaluate_split(model, train, valid, exec)?;
        let record = EpochRecord::new(epoch, step.loss, metrics);
        on_epoch(epoch, model, &record)?;
        report.records.push(record);
        report.wall_time_s.push(start.elapsed().as_secs_f64());
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(points: &[f64], d: usize) -> DiscreteDistribution {
        DiscreteDistribution::uniform(Tensor::new(vec![points.len() / d, d], points.to_vec()).unwrap())
            .unwrap()
    }

    #[test]
    fn cost_matrix_examples() {
        let a = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let b = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        assert_eq!(cost_matrix(&a, &b, Metric::Euclidean).unwrap().data(), &[3.0]);
        assert_eq!(cost_matrix(&a, &b, Metric::SquaredEuclidean).unwrap().data(), &[9.0]);
        let p = Tensor::from_fn(&[4, 3], |i| (i as f64).cos());
        let c = cost_matrix(&p, &p, Metric::Euclidean).unwrap();
        assert!((0..4).all(|i| c.data()[i * 4 + i] == 0.0));
        assert!(cost_matrix(&p, &Tensor::zeros(&[2, 2]), Metric::Euclidean).is_err());
    }

    #[test]
    fn exact_hand_instances() {
        let plan = exact_ot(&dist(&[0.0, 1.0], 1), &dist(&[2.0, 3.0], 1), Metric::Euclidean).unwrap();
        assert!((plan.cost - 2.0).abs() < 1e-12);
        let plan = exact_ot(&dist(&[0.0], 1), &dist(&[-1.0, 1.0], 1), Metric::Euclidean).unwrap();
        assert!((plan.cost - 1.0).abs() < 1e-12);
        assert_eq!(plan.coupling, vec![0.5, 0.5]);
        let same = dist(&[0.3, -2.0, 5.0, 1.0], 2);
        assert_eq!(exact_ot(&same, &same, Metric::Euclidean).unwrap().cost, 0.0);
    }

    #[test]
    fn lp_path_matches_assignment() {
        let p = dist(&[0.0, 1.0, 4.0, 2.5], 1);
        let q = dist(&[3.0, -1.0, 0.5, 2.0], 1);
        let cost = cost_matrix(p.points(), q.points(), Metric::SquaredEuclidean).unwrap();
        let a = replica_assignment(cost.data(), 4, 4);
        let b = min_cost_flow(cost.data(), p.weights(), q.weights());
        let total = |plan: &[f64]| plan.iter().zip(cost.data()).map(|(x, c)| x * c).sum::<f64>();
        assert!((total(&a) - total(&b)).abs() < 1e-12);
    }

    #[test]
    fn cap_is_enforced() {
        let p = dist(&[0.0, 1.0, 2.0], 1);
        let err = exact_ot_with_cap(&p, &p, Metric::Euclidean, 8).unwrap_err();
        assert!(matches!(err, Error::TransportCap { entries: 9, cap: 8 }));
    }

    #[test]
    fn sinkhorn_marginals() {
        let p = dist(&[0.0, 1.0, 2.0], 1);
        let q = dist(&[0.5, 1.5], 1);
        let plan = sinkhorn(&p, &q, Metric::SquaredEuclidean, 0.1, 10_000, 1e-12).unwrap();
        assert!(plan.converged);
        for r in plan.row_sums() {
            assert!((r - 1.0 / 3.0).abs() < 1e-10);
        }
        for c in plan.col_sums() {
            assert!((c - 0.5).abs() < 1e-10);
        }
        assert!(sinkhorn(&p, &q, Metric::Euclidean, 0.0, 10, 1e-9).is_err());
    }

    #[test]
    fn invalid_distributions() {
        let pts = Tensor::zeros(&[2, 1]);
        assert!(DiscreteDistribution::new(pts.clone(), vec![0.5, 0.6]).is_err());
        assert!(DiscreteDistribution::new(pts.clone(), vec![1.5, -0.5]).is_err());
        assert!(DiscreteDistribution::new(pts, vec![1.0]).is_err());
    }
}
