//! Class-conditional diagonal Gaussian over the latent space.
//!
//! Each class owns a mean vector and a log-standard-deviation vector. Storing
//! log-stds keeps the scale positive for any parameter value.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassConditionalGaussian {
    means: Tensor,
    log_stds: Tensor,
}

impl ClassConditionalGaussian {
    /// `means` and `log_stds` both of shape `(n_classes, d)`.
    pub fn new(means: Tensor, log_stds: Tensor) -> Result<Self> {
        if means.ndim() != 2 || means.shape()[0] == 0 {
            return Err(Error::invalid(
                "ClassConditionalGaussian::new",
                format!("means must be (n_classes >= 1, d), got {:?}", means.shape()),
            ));
        }
        means.expect_same_shape(&log_stds, "ClassConditionalGaussian::new")?;
        if !means.all_finite() || !log_stds.all_finite() {
            return Err(Error::invalid(
                "ClassConditionalGaussian::new",
                "parameters must be finite",
            ));
        }
        Ok(Self { means, log_stds })
    }

    /// Zero means and unit scales for every class.
    pub fn standard(n_classes: usize, dim: usize) -> Result<Self> {
        Self::new(
            Tensor::zeros(&[n_classes, dim]),
            Tensor::zeros(&[n_classes, dim]),
        )
    }

    pub fn n_classes(&self) -> usize {
        self.means.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.means.shape()[1]
    }

    pub fn means(&self) -> &Tensor {
        &self.means
    }

    pub fn log_stds(&self) -> &Tensor {
        &self.log_stds
    }

    pub(crate) fn params_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.means, &mut self.log_stds]
    }

    pub fn class_mean(&self, y: usize) -> Result<Tensor> {
        self.check_class(y)?;
        Ok(self.means.index_axis0(y))
    }

    fn check_class(&self, y: usize) -> Result<()> {
        if y >= self.n_classes() {
            return Err(Error::ClassIndex {
                index: y,
                n_classes: self.n_classes(),
            });
        }
        Ok(())
    }

    fn check_latent(&self, h: &Tensor) -> Result<()> {
        if h.len() != self.dim() {
            return Err(Error::Shape {
                op: "prior",
                dim: "latent dimension",
                expected: self.dim(),
                found: h.len(),
            });
        }
        Ok(())
    }

    fn class_log_prob(&self, h: &[f64], y: usize) -> f64 {
        let d = self.dim();
        let mu = &self.means.data()[y * d..(y + 1) * d];
        let ls = &self.log_stds.data()[y * d..(y + 1) * d];
        // same evaluation order as the tape version
        let sum_sq: f64 = h
            .iter()
            .zip(mu)
            .zip(ls)
            .map(|((&h, &m), &s)| {
                let r = (h - m) * (-s).exp();
                r * r
            })
            .sum();
        let sum_ls: f64 = ls.iter().sum();
        (-sum_ls + -0.5 * sum_sq) + -(d as f64) * HALF_LN_2PI
    }

    /// `sum_j [-log_std - log(2 pi)/2 - ((h_j - mean_j) / std_j)^2 / 2]` for class `y`.
    pub fn log_prob(&self, h: &Tensor, y: usize) -> Result<f64> {
        self.check_class(y)?;
        self.check_latent(h)?;
        Ok(self.class_log_prob(h.data(), y))
    }

    /// Log-density under every class.
    pub fn log_probs(&self, h: &Tensor) -> Result<Vec<f64>> {
        self.check_latent(h)?;
        Ok((0..self.n_classes())
            .map(|y| self.class_log_prob(h.data(), y))
            .collect())
    }

    /// `mean + std * z` with `z ~ N(0, I)`.
    pub fn sample<R: Rng + ?Sized>(&self, y: usize, rng: &mut R) -> Result<Tensor> {
        self.check_class(y)?;
        let d = self.dim();
        let mu = &self.means.data()[y * d..(y + 1) * d];
        let ls = &self.log_stds.data()[y * d..(y + 1) * d];
        let data = mu
            .iter()
            .zip(ls)
            .map(|(&m, &s)| {
                let z: f64 = rng.sample(StandardNormal);
                m + s.exp() * z
            })
            .collect();
        Ok(Tensor::from_parts(vec![d], data))
    }

    /// Class probabilities under a uniform class prior.
    pub fn class_posterior(&self, h: &Tensor) -> Result<Vec<f64>> {
        Ok(softmax(&self.log_probs(h)?))
    }

    /// Log-density of the equal-weight mixture over classes.
    pub fn log_prob_marginal(&self, h: &Tensor) -> Result<f64> {
        let lps = self.log_probs(h)?;
        Ok(log_sum_exp(&lps) - (self.n_classes() as f64).ln())
    }

    /// Records `log_prob(h, y)` on a tape; `means` and `log_stds` are the
    /// bound `(n_classes, d)` parameter nodes.
    pub fn log_prob_on_tape(
        tape: &mut Tape,
        means: Var,
        log_stds: Var,
        h: Var,
        y: usize,
    ) -> Result<Var> {
        let shape = tape.value(means).shape().to_vec();
        let (k, d) = (shape[0], shape[1]);
        if y >= k {
            return Err(Error::ClassIndex {
                index: y,
                n_classes: k,
            });
        }
        let rows: Arc<[usize]> = (y * d..(y + 1) * d).collect();
        let mu = tape.gather(means, Arc::clone(&rows), &[d])?;
        let ls = tape.gather(log_stds, rows, &[d])?;
        let h = tape.reshape(h, &[d])?;
        let diff = tape.sub(h, mu)?;
        let neg_ls = tape.neg(ls);
        let inv_std = tape.exp(neg_ls);
        let r = tape.mul(diff, inv_std)?;
        let sq = tape.square(r);
        let sum_sq = tape.sum(sq);
        let sum_ls = tape.sum(ls);
        let a = tape.neg(sum_ls);
        let b = tape.scale(sum_sq, -0.5);
        let ab = tape.add(a, b)?;
        Ok(tape.offset(ab, -(d as f64) * HALF_LN_2PI))
    }

    /// Records `log_prob_marginal(h)` on a tape.
    pub fn log_prob_marginal_on_tape(
        tape: &mut Tape,
        means: Var,
        log_stds: Var,
        h: Var,
    ) -> Result<Var> {
        let k = tape.value(means).shape()[0];
        let lps = (0..k)
            .map(|y| Self::log_prob_on_tape(tape, means, log_stds, h, y))
            .collect::<Result<Vec<_>>>()?;
        log_sum_exp_on_tape(tape, &lps, -(k as f64).ln())
    }
}

/// `log(sum exp(x_k)) + shift` on scalar nodes, stabilised by the current max.
pub(crate) fn log_sum_exp_on_tape(tape: &mut Tape, terms: &[Var], shift: f64) -> Result<Var> {
    let max = terms
        .iter()
        .map(|&v| tape.scalar(v))
        .fold(f64::NEG_INFINITY, f64::max);
    let exps = terms
        .iter()
        .map(|&v| {
            let s = tape.offset(v, -max);
            tape.exp(s)
        })
        .collect::<Vec<_>>();
    let total = tape.add_all(&exps)?;
    let log = tape.log(total);
    Ok(tape.offset(log, max + shift))
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}
