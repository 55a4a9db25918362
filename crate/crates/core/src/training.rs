//! Maximum-likelihood training, likelihood-based classification, Adam and the
//! two experimental regularizers (per-point mixture widths and the
//! simple-prior comparison penalty).

use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::exec::{try_map_indexed, Execution};
use crate::flow::{flow_forward, BoundParams, FlowModel};
use crate::prior::{softmax, ClassConditionalGaussian, HALF_LN_2PI};
use crate::signals::SignalDataset;
use crate::tensor::Tensor;
use crate::transport::OtConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    #[default]
    #[serde(rename = "ml")]
    MaxLikelihood,
    #[serde(rename = "ot")]
    OptimalTransport,
}

/// Starting point of the prior parameters in maximum-likelihood training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorInit {
    /// Keep the prior passed in.
    Keep,
    /// Per-class moments of the initial flow's training latents.
    #[default]
    Data,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Step size for the prior means and log-stds; `None` uses `learning_rate`.
    pub prior_learning_rate: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    /// Uniform noise width in data units; `None` estimates the quantization
    /// step of the training data.
    pub dequant_amplitude: Option<f64>,
    pub seed: u64,
    pub objective: Objective,
    /// Applies to maximum-likelihood training only.
    pub prior_init: PriorInit,
    /// Write a checkpoint every `k` epochs (0 disables).
    pub checkpoint_every: usize,
    pub ot: OtConfig,
    pub mixture_reg: Option<MixtureRegSettings>,
    pub prior_reg: Option<PriorRegSettings>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            prior_learning_rate: None,
            batch_size: 32,
            epochs: 50,
            dequant_amplitude: None,
            seed: 0,
            objective: Objective::MaxLikelihood,
            prior_init: PriorInit::Data,
            checkpoint_every: 0,
            ot: OtConfig::default(),
            mixture_reg: None,
            prior_reg: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid("TrainConfig", m.to_string()));
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.learning_rate) || !self.prior_learning_rate.is_none_or(positive) {
            return bad("learning rates must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self
            .dequant_amplitude
            .is_some_and(|a| !(a.is_finite() && a >= 0.0))
        {
            return bad("dequant_amplitude must be nonnegative");
        }
        if let Some(p) = &self.prior_reg {
            if !(p.penalty_weight.is_finite() && p.penalty_weight >= 0.0) {
                return bad("prior_reg.penalty_weight must be nonnegative");
            }
        }
        if let Some(m) = &self.mixture_reg {
            if !positive(m.learning_rate) || !m.init_log_std.is_finite() {
                return bad("mixture_reg needs a positive learning_rate and finite init_log_std");
            }
        }
        if self.ot.ratio == 0 {
            return bad("ot.ratio must be at least 1");
        }
        Ok(())
    }
}

/// Config-file form of the per-point mixture regularizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureRegSettings {
    /// Initial log-width of every training point's Gaussian component.
    pub init_log_std: f64,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorRegSettings {
    pub penalty_weight: f64,
}

/// Per-training-point component widths: the ones being learned and the ones
/// the flow was last trained against.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureRegConfig {
    pub per_point_log_stds: Tensor,
    pub frozen_log_stds: Tensor,
}

impl MixtureRegConfig {
    pub fn new(n_train: usize, init_log_std: f64) -> Self {
        let t = Tensor::full(&[n_train], init_log_std);
        Self {
            per_point_log_stds: t.clone(),
            frozen_log_stds: t,
        }
    }

    fn validate(&self, n_train: usize) -> Result<()> {
        if self.per_point_log_stds.shape() != [n_train] || self.frozen_log_stds.shape() != [n_train]
        {
            return Err(Error::Shape {
                op: "mixture_minibatch_step",
                dim: "per-point widths",
                expected: n_train,
                found: self.per_point_log_stds.len(),
            });
        }
        Ok(())
    }
}

/// Input-space diagonal Gaussian, the simple reference density.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBaseline {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Lower bound on fitted standard deviations (constant dimensions).
pub const BASELINE_STD_FLOOR: f64 = 1e-6;

impl GaussianBaseline {
    pub fn fit(data: &SignalDataset) -> Result<Self> {
        let n = data.len();
        if n == 0 {
            return Err(Error::Dataset("cannot fit a baseline to an empty dataset".into()));
        }
        let d = data.channels() * data.samples();
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, x) in mean.iter_mut().zip(data.trial_data(i)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((v, x), m) in var.iter_mut().zip(data.trial_data(i)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .iter()
            .map(|v| (v / n as f64).sqrt().max(BASELINE_STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn log_prob(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| {
                let r = (x - m) / s;
                -s.ln() - HALF_LN_2PI - 0.5 * r * r
            })
            .sum()
    }

    pub fn mean_log_prob(&self, data: &SignalDataset) -> f64 {
        (0..data.len())
            .map(|i| self.log_prob(data.trial_data(i)))
            .sum::<f64>()
            / data.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorRegConfig {
    pub penalty_weight: f64,
    pub baseline: GaussianBaseline,
}

/// Lower bound on standard deviations fitted by [`fit_prior_to_data`].
pub const PRIOR_STD_FLOOR: f64 = 1e-6;

/// Sets every class's prior mean and log-std to the moments of `f(x)` over
/// that class's trials; classes without trials keep their parameters.
pub fn fit_prior_to_data(model: &mut FlowModel, data: &SignalDataset, exec: Execution) -> Result<()> {
    check_dataset(model, data)?;
    let latents = try_map_indexed(exec, data.len(), |i| {
        flow_forward(model, &data.trial(i)).map(|o| o.latent.into_vec())
    })?;
    let d = model.latent_dim();
    let prior = model.prior();
    let mut means = prior.means().data().to_vec();
    let mut log_stds = prior.log_stds().data().to_vec();
    for (y, &count) in data.class_counts().iter().enumerate() {
        if count == 0 {
            continue;
        }
        let rows: Vec<&Vec<f64>> = latents
            .iter()
            .zip(data.labels())
            .filter(|(_, &l)| l == y)
            .map(|(h, _)| h)
            .collect();
        for j in 0..d {
            let mean = rows.iter().map(|h| h[j]).sum::<f64>() / count as f64;
            let var = rows.iter().map(|h| (h[j] - mean).powi(2)).sum::<f64>() / count as f64;
            means[y * d + j] = mean;
            log_stds[y * d + j] = var.sqrt().max(PRIOR_STD_FLOOR).ln();
        }
    }
    let k = prior.n_classes();
    model.set_prior(ClassConditionalGaussian::new(
        Tensor::new(vec![k, d], means)?,
        Tensor::new(vec![k, d], log_stds)?,
    )?)
}

/// `x + u`, `u ~ Uniform[0, amplitude)` elementwise.
pub fn dequantize<R: Rng + ?Sized>(x: &Tensor, amplitude: f64, rng: &mut R) -> Result<Tensor> {
    if !(amplitude.is_finite() && amplitude >= 0.0) {
        return Err(Error::invalid(
            "dequantize",
            format!("amplitude {amplitude} must be nonnegative"),
        ));
    }
    if amplitude == 0.0 {
        return Ok(x.clone());
    }
    let mut out = x.clone();
    for v in out.data_mut() {
        *v += amplitude * rng.random::<f64>();
    }
    Ok(out)
}

/// `-(1/B) sum_b [log p_H(f(x_b) | y_b) + log|det J|]` recorded on one tape.
pub fn nll_loss(
    tape: &mut Tape,
    model: &FlowModel,
    bound: &BoundParams,
    batch: &Tensor,
    labels: &[usize],
) -> Result<Var> {
    let (c, t) = model.input_shape();
    if batch.ndim() != 3 || batch.shape()[1..] != [c, t] || batch.shape()[0] != labels.len() {
        return Err(Error::invalid(
            "nll_loss",
            format!(
                "batch {:?} with {} labels does not match input (B, {c}, {t})",
                batch.shape(),
                labels.len()
            ),
        ));
    }
    if labels.is_empty() {
        return Err(Error::invalid("nll_loss", "empty batch"));
    }
    let log_det = model.log_det_jacobian();
    let mut terms = Vec::with_capacity(labels.len());
    for (b, &y) in labels.iter().enumerate() {
        let x = tape.constant(batch.index_axis0(b));
        let h = model.forward_on_tape(tape, bound, x)?;
        let lp = ClassConditionalGaussian::log_prob_on_tape(
            tape,
            bound.prior_means(),
            bound.prior_log_stds(),
            h,
            y,
        )?;
        terms.push(tape.offset(lp, log_det));
    }
    let total = tape.add_all(&terms)?;
    Ok(tape.scale(total, -1.0 / labels.len() as f64))
}

/// `weight * mean_b (log p_f(x_b) - log p_gauss(x_b))^2`, using the class-
/// marginal flow density.
pub fn prior_comparison_penalty(
    tape: &mut Tape,
    model: &FlowModel,
    bound: &BoundParams,
    batch: &Tensor,
    reg: &PriorRegConfig,
) -> Result<Var> {
    let n = batch.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::invalid("prior_comparison_penalty", "empty batch"));
    }
    let mut terms = Vec::with_capacity(n);
    for b in 0..n {
        let x = batch.index_axis0(b);
        terms.push(penalty_term(tape, model, bound, &x, &reg.baseline)?);
    }
    let total = tape.add_all(&terms)?;
    Ok(tape.scale(total, reg.penalty_weight / n as f64))
}

fn penalty_term(
    tape: &mut Tape,
    model: &FlowModel,
    bound: &BoundParams,
    x: &Tensor,
    baseline: &GaussianBaseline,
) -> Result<Var> {
    let xv = tape.constant(x.clone());
    let h = model.forward_on_tape(tape, bound, xv)?;
    let lm = ClassConditionalGaussian::log_prob_marginal_on_tape(
        tape,
        bound.prior_means(),
        bound.prior_log_stds(),
        h,
    )?;
    let gap = tape.offset(lm, model.log_det_jacobian() - baseline.log_prob(x.data()));
    Ok(tape.square(gap))
}

/// True when the flow's validation gain over the simple prior has fallen
/// below its own train/validation gap.
pub fn prior_comparison_gate(ll_flow_train: f64, ll_flow_valid: f64, ll_gauss_valid: f64) -> bool {
    (ll_flow_valid - ll_gauss_valid) < (ll_flow_train - ll_flow_valid)
}

/// Probability floor of the corrected mixture likelihood.
pub const MIXTURE_FLOOR: f64 = 1e-300;

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureStep {
    /// `-mean_v log(corrected likelihood)`.
    pub loss: f64,
    /// Gradient with respect to every per-point log-width (zero outside the batch).
    pub grad: Tensor,
    /// Validation points whose corrected likelihood hit the floor.
    pub n_clamped: usize,
}

/// Swap-corrected validation likelihood: each batch member's component under
/// the frozen width is replaced by its component under the learned width,
///
/// `p(v) = p_f(v) + (1/N) sum_i [N(v; x_i, s_i^2 I) - N(v; x_i, s0_i^2 I)]`.
///
/// `flow_log_density[b]` is `log p_f` of `valid[b]`; `train` holds all `N`
/// training trials as rows. Evaluated relative to `log p_f` so equal widths
/// give back `log p_f` exactly.
pub fn mixture_swap_loss(
    flow_log_density: &[f64],
    valid: &Tensor,
    train: &Tensor,
    batch: &[usize],
    reg: &MixtureRegConfig,
) -> Result<MixtureStep> {
    let n_train = train.shape()[0];
    reg.validate(n_train)?;
    let d = train.len() / n_train.max(1);
    let n_valid = flow_log_density.len();
    if n_valid == 0 || valid.len() != n_valid * d || batch.is_empty() {
        return Err(Error::invalid(
            "mixture_minibatch_step",
            "validation batch, densities and training batch must be nonempty and consistent",
        ));
    }
    if let Some(&bad) = batch.iter().find(|&&i| i >= n_train) {
        return Err(Error::invalid(
            "mixture_minibatch_step",
            format!("batch index {bad} out of range for {n_train} training points"),
        ));
    }
    let dim = d as f64;
    let inv_n = 1.0 / n_train as f64;
    let floor_ln = MIXTURE_FLOOR.ln();
    let idx: Arc<[usize]> = batch.into();
    let frozen: Vec<f64> = batch.iter().map(|&i| reg.frozen_log_stds.data()[i]).collect();

    let mut tape = Tape::new();
    let widths = tape.param(ParamId(0), reg.per_point_log_stds.clone());
    let ls = tape.gather(widths, idx, &[batch.len()])?;
    let lin = tape.scale(ls, -dim);
    let lin = tape.offset(lin, -dim * HALF_LN_2PI);
    let two = tape.scale(ls, -2.0);
    let inv_var = tape.exp(two);

    let mut terms = Vec::with_capacity(n_valid);
    let mut constant = 0.0;
    let mut n_clamped = 0;
    for (v, &lpf) in flow_log_density.iter().enumerate() {
        let point = &valid.data()[v * d..(v + 1) * d];
        let half_sq: Vec<f64> = batch
            .iter()
            .map(|&i| {
                let x = &train.data()[i * d..(i + 1) * d];
                0.5 * point.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            })
            .collect();
        // same operation sequence as the tape, so equal widths cancel exactly
        let comp = |s: f64, hs: f64| (s * -dim + -dim * HALF_LN_2PI) - (s * -2.0).exp() * hs;
        let frozen_ll: Vec<f64> = frozen.iter().zip(&half_sq).map(|(&s, &hs)| comp(s, hs)).collect();
        let current_ll: Vec<f64> = batch
            .iter()
            .zip(&half_sq)
            .map(|(&i, &hs)| comp(reg.per_point_log_stds.data()[i], hs))
            .collect();
        let top = frozen_ll
            .iter()
            .chain(&current_ll)
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        // shift by log p_f unless a component would overflow
        let shift = if top - lpf > 700.0 { top } else { lpf };

        let hs = tape.constant(Tensor::from_vec(half_sq));
        let quad = tape.mul(inv_var, hs)?;
        let comp_ll = tape.sub(lin, quad)?;
        let shifted = tape.offset(comp_ll, -shift);
        let e = tape.exp(shifted);
        let swap_in = tape.sum(e);
        let swap_out: f64 = Tensor::from_vec(frozen_ll.iter().map(|b| (b - shift).exp()).collect()).sum();
        let diff = tape.offset(swap_in, -swap_out);
        let scaled = tape.scale(diff, inv_n);
        let s = tape.offset(scaled, (lpf - shift).exp());
        let s_val = tape.scalar(s);
        if !(s_val > 0.0) || s_val.ln() + shift < floor_ln {
            n_clamped += 1;
            constant += floor_ln;
            continue;
        }
        let log_s = tape.log(s);
        terms.push(tape.offset(log_s, shift));
    }
    let scale = -1.0 / n_valid as f64;
    if terms.is_empty() {
        return Ok(MixtureStep {
            loss: constant * scale,
            grad: Tensor::zeros(&[n_train]),
            n_clamped,
        });
    }
    let total = tape.add_all(&terms)?;
    let total = tape.offset(total, constant);
    let loss = tape.scale(total, scale);
    let grads = tape.backward(loss)?;
    Ok(MixtureStep {
        loss: tape.scalar(loss),
        grad: grads
            .get(ParamId(0))
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&[n_train])),
        n_clamped,
    })
}

/// [`mixture_swap_loss`] with `log p_f` evaluated by the model's class-marginal
/// density.
pub fn mixture_minibatch_step(
    model: &FlowModel,
    train: &SignalDataset,
    batch: &[usize],
    valid_batch: &SignalDataset,
    reg: &MixtureRegConfig,
) -> Result<MixtureStep> {
    let lpf = (0..valid_batch.len())
        .map(|i| model.log_likelihood_marginal(&valid_batch.trial(i)))
        .collect::<Result<Vec<_>>>()?;
    mixture_swap_loss(&lpf, valid_batch.data(), train.data(), batch, reg)
}

/// Bayes class posterior under the model; ties go to the lower index.
pub fn classify(model: &FlowModel, x: &Tensor) -> Result<(usize, Vec<f64>)> {
    let h = flow_forward(model, x)?.latent;
    let lps = model.prior().log_probs(&h)?;
    Ok((argmax(&lps), softmax(&lps)))
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-trial scores of a dataset under a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// `log p_X(x | y)` under the true label.
    pub log_likelihood: Vec<f64>,
    /// `log p_X(x)` with uniform class weights.
    pub marginal_log_likelihood: Vec<f64>,
    pub predicted: Vec<usize>,
    pub posterior: Vec<Vec<f64>>,
    pub accuracy: f64,
}

impl Evaluation {
    pub fn mean_log_likelihood(&self) -> f64 {
        mean(&self.log_likelihood)
    }

    pub fn mean_marginal_log_likelihood(&self) -> f64 {
        mean(&self.marginal_log_likelihood)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn evaluate(model: &FlowModel, data: &SignalDataset, exec: Execution) -> Result<Evaluation> {
    check_dataset(model, data)?;
    let log_det = model.log_det_jacobian();
    let rows = try_map_indexed(exec, data.len(), |i| -> Result<Vec<f64>> {
        let h = flow_forward(model, &data.trial(i))?.latent;
        Ok(model.prior().log_probs(&h)?.iter().map(|lp| lp + log_det).collect())
    })?;
    let mut out = Evaluation {
        log_likelihood: Vec::with_capacity(data.len()),
        marginal_log_likelihood: Vec::with_capacity(data.len()),
        predicted: Vec::with_capacity(data.len()),
        posterior: Vec::with_capacity(data.len()),
        accuracy: 0.0,
    };
    let k = model.n_classes() as f64;
    let mut correct = 0;
    for (lps, &y) in rows.iter().zip(data.labels()) {
        let label = argmax(lps);
        correct += usize::from(label == y);
        out.log_likelihood.push(lps[y]);
        out.marginal_log_likelihood
            .push(crate::prior::log_sum_exp(lps) - k.ln());
        out.predicted.push(label);
        out.posterior.push(softmax(lps));
    }
    out.accuracy = correct as f64 / data.len().max(1) as f64;
    Ok(out)
}

fn check_dataset(model: &FlowModel, data: &SignalDataset) -> Result<()> {
    let (c, t) = model.input_shape();
    if data.channels() != c || data.samples() != t {
        return Err(Error::Dataset(format!(
            "dataset trials are ({}, {}), model expects ({c}, {t})",
            data.channels(),
            data.samples()
        )));
    }
    if data.n_classes() > model.n_classes() {
        return Err(Error::Dataset(format!(
            "dataset has {} classes, model prior has {}",
            data.n_classes(),
            model.n_classes()
        )));
    }
    Ok(())
}

/// Summary scores after an epoch (or at initialization).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub train_log_likelihood: f64,
    pub train_marginal_log_likelihood: f64,
    pub train_accuracy: f64,
    pub valid_log_likelihood: Option<f64>,
    pub valid_marginal_log_likelihood: Option<f64>,
    pub valid_accuracy: Option<f64>,
}

pub(crate) fn evaluate_split(
    model: &FlowModel,
    train: &SignalDataset,
    valid: &SignalDataset,
    exec: Execution,
) -> Result<Metrics> {
    let tr = evaluate(model, train, exec)?;
    let va = if valid.is_empty() {
        None
    } else {
        Some(evaluate(model, valid, exec)?)
    };
    Ok(Metrics {
        train_log_likelihood: tr.mean_log_likelihood(),
        train_marginal_log_likelihood: tr.mean_marginal_log_likelihood(),
        train_accuracy: tr.accuracy,
        valid_log_likelihood: va.as_ref().map(Evaluation::mean_log_likelihood),
        valid_marginal_log_likelihood: va.as_ref().map(Evaluation::mean_marginal_log_likelihood),
        valid_accuracy: va.as_ref().map(|e| e.accuracy),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean minibatch objective over the epoch.
    pub train_loss: f64,
    pub metrics: Metrics,
    /// Prior-comparison gate state during this epoch.
    pub gate_active: Option<bool>,
    /// Mean swap-corrected validation log-likelihood.
    pub mixture_valid_log_likelihood: Option<f64>,
    pub mixture_clamped: Option<usize>,
}

impl EpochRecord {
    pub(crate) fn new(epoch: usize, train_loss: f64, metrics: Metrics) -> Self {
        Self {
            epoch,
            train_loss,
            metrics,
            gate_active: None,
            mixture_valid_log_likelihood: None,
            mixture_clamped: None,
        }
    }
}

/// Training history. Wall-clock times are kept apart from the records so the
/// records are reproducible bit for bit.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub initial: Option<Metrics>,
    pub records: Vec<EpochRecord>,
    pub wall_time_s: Vec<f64>,
}

pub const REPORT_CSV_HEADER: [&str; 11] = [
    "epoch",
    "train_loss",
    "train_log_likelihood",
    "valid_log_likelihood",
    "train_marginal_log_likelihood",
    "valid_marginal_log_likelihood",
    "train_accuracy",
    "valid_accuracy",
    "gate_active",
    "mixture_valid_log_likelihood",
    "mixture_clamped",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainReport {
    /// One row per epoch, columns as in [`REPORT_CSV_HEADER`]; absent values
    /// are empty cells.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let fail = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
        w.write_record(REPORT_CSV_HEADER).map_err(fail)?;
        for r in &self.records {
            let m = &r.metrics;
            w.write_record([
                r.epoch.to_string(),
                r.train_loss.to_string(),
                m.train_log_likelihood.to_string(),
                opt(m.valid_log_likelihood),
                m.train_marginal_log_likelihood.to_string(),
                opt(m.valid_marginal_log_likelihood),
                m.train_accuracy.to_string(),
                opt(m.valid_accuracy),
                opt(r.gate_active),
                opt(r.mixture_valid_log_likelihood),
                opt(r.mixture_clamped),
            ])
            .map_err(fail)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// One JSON object per line: the initial metrics (`"epoch": null`), then
    /// every epoch record.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        if let Some(init) = &self.initial {
            let line = serde_json::json!({ "epoch": null, "metrics": init });
            writeln!(out, "{line}").expect("in-memory write");
        }
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(out, "{line}").expect("in-memory write");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn write_timing_csv(&self, path: &Path) -> Result<()> {
        let mut text = String::from("epoch,wall_time_s\n");
        for (e, t) in self.wall_time_s.iter().enumerate() {
            text.push_str(&format!("{e},{t}\n"));
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Adam with bias correction (β1 = 0.9, β2 = 0.999, ε = 1e-8).
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![Vec::new(); n_params],
            v: vec![Vec::new(); n_params],
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update; parameter `i` uses `grads[ParamId(i)]` (skipped when
    /// absent) and step size `lrs[i]`.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &Gradients, lrs: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in params.into_iter().enumerate() {
            let Some(g) = grads.get(ParamId(i)) else {
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.is_empty() {
                m.resize(g.len(), 0.0);
                v.resize(g.len(), 0.0);
            }
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lrs[i] * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Single-learning-rate form of [`AdamState::step`].
pub fn adam_update(params: Vec<&mut Tensor>, grads: &Gradients, state: &mut AdamState, lr: f64) {
    let lrs = vec![lr; params.len()];
    state.step(params, grads, &lrs);
}

pub(crate) fn learning_rates(model: &FlowModel, config: &TrainConfig) -> Vec<f64> {
    let n = model.params().len();
    let prior_lr = config.prior_learning_rate.unwrap_or(config.learning_rate);
    (0..n)
        .map(|i| if i + 2 >= n { prior_lr } else { config.learning_rate })
        .collect()
}

/// Names the first parameter (in model order) with a non-finite gradient.
pub(crate) fn check_gradients(
    model: &FlowModel,
    grads: &Gradients,
    epoch: usize,
    step: usize,
) -> Result<()> {
    for (i, name) in model.param_names().into_iter().enumerate() {
        if grads.get(ParamId(i)).is_some_and(|g| !g.all_finite()) {
            return Err(Error::NonFiniteGradient {
                param: name,
                epoch,
                step,
            });
        }
    }
    Ok(())
}

struct SampleGrad {
    loss: f64,
    grads: Gradients,
}

/// Loss and gradients of one trial's share of a minibatch objective.
fn sample_gradient(
    model: &FlowModel,
    x: &Tensor,
    y: usize,
    batch_len: usize,
    penalty: Option<(&GaussianBaseline, f64)>,
) -> Result<SampleGrad> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let xv = tape.constant(x.clone());
    let h = model.forward_on_tape(&mut tape, &bound, xv)?;
    let lp = ClassConditionalGaussian::log_prob_on_tape(
        &mut tape,
        bound.prior_means(),
        bound.prior_log_stds(),
        h,
        y,
    )?;
    let lp = tape.offset(lp, model.log_det_jacobian());
    let mut loss = tape.scale(lp, -1.0 / batch_len as f64);
    if let Some((baseline, weight)) = penalty {
        let sq = penalty_term(&mut tape, model, &bound, x, baseline)?;
        let pen = tape.scale(sq, weight / batch_len as f64);
        loss = tape.add(loss, pen)?;
    }
    Ok(SampleGrad {
        loss: tape.scalar(loss),
        grads: tape.backward(loss)?,
    })
}

pub fn train_max_likelihood(
    model: &mut FlowModel,
    train: &SignalDataset,
    valid: &SignalDataset,
    config: &TrainConfig,
) -> Result<TrainReport> {
    train_max_likelihood_with(model, train, valid, config, &mut |_, _, _| Ok(()))
}

/// [`train_max_likelihood`] with a callback after every epoch (checkpointing).
pub fn train_max_likelihood_with(
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
    if train.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    check_dataset(model, train)?;
    let exec = Execution::default();
    let amplitude = config
        .dequant_amplitude
        .unwrap_or_else(|| train.quantization_step().unwrap_or(0.0));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let lrs = learning_rates(model, config);
    let mut adam = AdamState::new(lrs.len());

    let prior_reg = match &config.prior_reg {
        Some(s) => Some(PriorRegConfig {
            penalty_weight: s.penalty_weight,
            baseline: GaussianBaseline::fit(train)?,
        }),
        None => None,
    };
    let gauss_valid = match &prior_reg {
        Some(p) if !valid.is_empty() => Some(p.baseline.mean_log_prob(valid)),
        _ => None,
    };
    let mut mixture = config
        .mixture_reg
        .as_ref()
        .map(|s| (MixtureRegConfig::new(train.len(), s.init_log_std), AdamState::new(1), s.learning_rate));

    report.initial = Some(evaluate_split(model, train, valid, exec)?);
    if config.prior_init == PriorInit::Data {
        fit_prior_to_data(model, train, exec)?;
    }
    let mut previous = evaluate_split(model, train, valid, exec)?;
    let n = train.len();
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let gate = prior_reg.as_ref().map(|_| match (previous.valid_marginal_log_likelihood, gauss_valid) {
            (Some(v), Some(g)) => prior_comparison_gate(previous.train_marginal_log_likelihood, v, g),
            _ => false,
        });
        let penalty = match (&prior_reg, gate) {
            (Some(p), Some(true)) if p.penalty_weight > 0.0 => Some((&p.baseline, p.penalty_weight)),
            _ => None,
        };
        if let Some((reg, _, _)) = &mut mixture {
            reg.frozen_log_stds = reg.per_point_log_stds.clone();
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        let mut loss_sum = 0.0;
        for (step, batch) in batches.iter().enumerate() {
            let inputs = batch
                .iter()
                .map(|&i| {
                    let mut x = dequantize(&train.trial(i), amplitude, &mut rng)?;
                    if let Some((reg, _, _)) = &mixture {
                        let s = reg.per_point_log_stds.data()[i].exp();
                        for v in x.data_mut() {
                            *v += s * rng.sample::<f64, _>(StandardNormal);
                        }
                    }
                    Ok(x)
                })
                .collect::<Result<Vec<_>>>()?;
            let per_sample = try_map_indexed(exec, batch.len(), |b| {
                sample_gradient(model, &inputs[b], train.labels()[batch[b]], batch.len(), penalty)
            })?;
            let mut grads = Gradients::default();
            let mut loss = 0.0;
            for s in &per_sample {
                loss += s.loss;
                grads.accumulate(&s.grads);
            }
            check_gradients(model, &grads, epoch, step)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            loss_sum += loss;
            adam.step(model.params_mut(), &grads, &lrs);
        }

        let metrics = evaluate_split(model, train, valid, exec)?;
        let mut record = EpochRecord::new(epoch, loss_sum / batches.len() as f64, metrics.clone());
        record.gate_active = gate;
        if let Some((reg, state, lr)) = &mut mixture {
            if !valid.is_empty() {
                let va = evaluate(model, valid, exec)?;
                let (mut total, mut clamped) = (0.0, 0);
                for (step, batch) in batches.iter().enumerate() {
                    let idx: Vec<usize> = (0..config.batch_size.min(valid.len()))
                        .map(|k| (step * config.batch_size + k) % valid.len())
                        .collect();
                    let lpf: Vec<f64> = idx.iter().map(|&i| va.marginal_log_likelihood[i]).collect();
                    let vb = valid.subset(&idx);
                    let out = mixture_swap_loss(&lpf, vb.data(), train.data(), batch, reg)?;
                    if !out.grad.all_finite() {
                        return Err(Error::NonFiniteGradient {
                            param: "mixture.per_point_log_stds".into(),
                            epoch,
                            step,
                        });
                    }
                    let mut g = Gradients::default();
                    g.insert_or_add(ParamId(0), out.grad.into_vec(), &[n]);
                    state.step(vec![&mut reg.per_point_log_stds], &g, &[*lr]);
                    total += -out.loss;
                    clamped += out.n_clamped;
                }
                record.mixture_valid_log_likelihood = Some(total / batches.len() as f64);
                record.mixture_clamped = Some(clamped);
            }
        }
        on_epoch(epoch, model, &record)?;
        report.records.push(record);
        report.wall_time_s.push(start.elapsed().as_secs_f64());
        previous = metrics;
    }
    Ok(report)
}
