//! Numeric kernels shared by the plain-value API and the gradient tape.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weights of a "same"-padded 1-D convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1dParams {
    /// Shape `(C_out, C_in, K)` with odd `K`.
    pub kernels: Tensor,
    /// Shape `(C_out,)`.
    pub bias: Tensor,
}

impl Conv1dParams {
    pub fn new(kernels: Tensor, bias: Tensor) -> Result<Self> {
        let params = Self { kernels, bias };
        params.validate()?;
        Ok(params)
    }

    pub fn zeros(c_out: usize, c_in: usize, k: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[c_out, c_in, k]), Tensor::zeros(&[c_out]))
    }

    pub fn validate(&self) -> Result<()> {
        let ks = self.kernels.shape();
        if ks.len() != 3 {
            return Err(Error::Shape {
                op: "conv1d",
                dim: "kernel rank",
                expected: 3,
                found: ks.len(),
            });
        }
        if ks[2].is_multiple_of(2) {
            return Err(Error::invalid(
                "conv1d",
                format!("kernel size {} must be odd for symmetric same padding", ks[2]),
            ));
        }
        if self.bias.shape() != [ks[0]] {
            return Err(Error::Shape {
                op: "conv1d",
                dim: "bias length (C_out)",
                expected: ks[0],
                found: self.bias.len(),
            });
        }
        Ok(())
    }

    pub fn c_out(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.shape()[2]
    }
}

/// `out[o, t] = bias[o] + sum_{i,k} kernels[o,i,k] * input[i, t + k - (K-1)/2]`,
/// zero outside `[0, T)`.
pub fn conv1d(input: &Tensor, params: &Conv1dParams) -> Result<Tensor> {
    check_conv_shapes(input.shape(), params.kernels.shape(), params.bias.shape())?;
    Ok(conv1d_raw(input, &params.kernels, &params.bias))
}

pub(crate) fn check_conv_shapes(input: &[usize], kernels: &[usize], bias: &[usize]) -> Result<()> {
    if input.len() != 2 {
        return Err(Error::Shape {
            op: "conv1d",
            dim: "input rank",
            expected: 2,
            found: input.len(),
        });
    }
    if kernels.len() != 3 {
        return Err(Error::Shape {
            op: "conv1d",
            dim: "kernel rank",
            expected: 3,
            found: kernels.len(),
        });
    }
    if kernels[1] != input[0] {
        return Err(Error::Shape {
            op: "conv1d",
            dim: "input channels (C_in)",
            expected: kernels[1],
            found: input[0],
        });
    }
    if bias != [kernels[0]] {
        return Err(Error::Shape {
            op: "conv1d",
            dim: "bias length (C_out)",
            expected: kernels[0],
            found: bias.iter().product(),
        });
    }
    if kernels[2].is_multiple_of(2) {
        return Err(Error::invalid("conv1d", "kernel size must be odd"));
    }
    let t = input[1];
    if t == 0 || kernels[2] > 2 * t - 1 {
        return Err(Error::Shape {
            op: "conv1d",
            dim: "kernel size (K <= 2T-1)",
            expected: (2 * t).saturating_sub(1),
            found: kernels[2],
        });
    }
    Ok(())
}

/// Valid output range `[lo, hi)` for tap offset `shift = k - pad`.
#[inline]
fn tap_range(shift: isize, t: usize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (t as isize - shift).clamp(0, t as isize) as usize;
    (lo.min(hi), hi)
}

pub(crate) fn conv1d_raw(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Tensor {
    let (c_in, t) = (input.shape()[0], input.shape()[1]);
    let (c_out, k_size) = (kernels.shape()[0], kernels.shape()[2]);
    let pad = (k_size - 1) / 2;
    let x = input.data();
    let w = kernels.data();
    let mut out = vec![0.0; c_out * t];
    for o in 0..c_out {
        let row = &mut out[o * t..(o + 1) * t];
        row.fill(bias.data()[o]);
        for i in 0..c_in {
            let xi = &x[i * t..(i + 1) * t];
            for k in 0..k_size {
                let wk = w[(o * c_in + i) * k_size + k];
                if wk == 0.0 {
                    continue;
                }
                let shift = k as isize - pad as isize;
                let (lo, hi) = tap_range(shift, t);
                let src = &xi[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                for (r, &s) in row[lo..hi].iter_mut().zip(src) {
                    *r += wk * s;
                }
            }
        }
    }
    Tensor::from_parts(vec![c_out, t], out)
}

/// Gradients of `conv1d` with respect to input, kernels and bias.
pub(crate) fn conv1d_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &[f64],
    want_input: bool,
    want_params: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let (c_in, t) = (input.shape()[0], input.shape()[1]);
    let (c_out, k_size) = (kernels.shape()[0], kernels.shape()[2]);
    let pad = (k_size - 1) / 2;
    let x = input.data();
    let w = kernels.data();

    let grad_input = want_input.then(|| {
        let mut gx = vec![0.0; c_in * t];
        for o in 0..c_out {
            let go = &grad_out[o * t..(o + 1) * t];
            for i in 0..c_in {
                let gxi = &mut gx[i * t..(i + 1) * t];
                for k in 0..k_size {
                    let wk = w[(o * c_in + i) * k_size + k];
                    if wk == 0.0 {
                        continue;
                    }
                    let shift = k as isize - pad as isize;
                    let (lo, hi) = tap_range(shift, t);
                    let dst = &mut gxi[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                    for (d, &g) in dst.iter_mut().zip(&go[lo..hi]) {
                        *d += wk * g;
                    }
                }
            }
        }
        gx
    });

    let (grad_kernels, grad_bias) = if want_params {
        let mut gw = vec![0.0; c_out * c_in * k_size];
        let mut gb = vec![0.0; c_out];
        for o in 0..c_out {
            let go = &grad_out[o * t..(o + 1) * t];
            gb[o] = go.iter().sum();
            for i in 0..c_in {
                let xi = &x[i * t..(i + 1) * t];
                for k in 0..k_size {
                    let shift = k as isize - pad as isize;
                    let (lo, hi) = tap_range(shift, t);
                    let src = &xi[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                    gw[(o * c_in + i) * k_size + k] =
                        go[lo..hi].iter().zip(src).map(|(g, s)| g * s).sum();
                }
            }
        }
        (Some(gw), Some(gb))
    } else {
        (None, None)
    };
    (grad_input, grad_kernels, grad_bias)
}

/// Elementwise `max(0, v)`.
pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Orthonormal discrete Hartley basis of size `n`: `cas(2 pi k j / n) / sqrt(n)`.
///
/// The matrix is symmetric and orthogonal, hence its own inverse and its own
/// transpose.
#[derive(Debug)]
pub struct CasBasis {
    n: usize,
    matrix: Vec<f64>,
}

impl CasBasis {
    fn build(n: usize) -> Self {
        let scale = 1.0 / (n as f64).sqrt();
        let mut matrix = vec![0.0; n * n];
        for k in 0..n {
            for j in 0..n {
                // reduce k*j mod n first so large products keep full angle precision
                let theta = 2.0 * PI * ((k * j) % n) as f64 / n as f64;
                matrix[k * n + j] = (theta.cos() + theta.sin()) * scale;
            }
        }
        Self { n, matrix }
    }

    /// Shared basis for length `n`, built once per process.
    pub fn get(n: usize) -> Arc<CasBasis> {
        static CACHE: OnceLock<Mutex<HashMap<usize, Arc<CasBasis>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(Default::default);
        let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
        Arc::clone(guard.entry(n).or_insert_with(|| Arc::new(CasBasis::build(n))))
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Transforms every row of a row-major `(rows, n)` buffer.
    pub(crate) fn apply_rows(&self, data: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; data.len()];
        for (src, dst) in data.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            for (k, d) in dst.iter_mut().enumerate() {
                let row = &self.matrix[k * n..(k + 1) * n];
                *d = row.iter().zip(src).map(|(m, x)| m * x).sum();
            }
        }
        out
    }
}

/// Per-channel orthonormal Hartley transform of a `(C, T)` tensor.
pub fn hartley(input: &Tensor) -> Result<Tensor> {
    if input.ndim() != 2 {
        return Err(Error::Shape {
            op: "hartley",
            dim: "input rank",
            expected: 2,
            found: input.ndim(),
        });
    }
    let basis = CasBasis::get(input.shape()[1]);
    Ok(Tensor::from_parts(
        input.shape().to_vec(),
        basis.apply_rows(input.data()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel() {
        let p = Conv1dParams::new(
            Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap(),
            Tensor::zeros(&[1]),
        )
        .unwrap();
        let out = conv1d(&t2(1, 3, &[3.0, -1.0, 4.0]), &p).unwrap();
        assert_eq!(out.data(), &[3.0, -1.0, 4.0]);
    }

    #[test]
    fn box_kernel_with_zero_padding() {
        let p = Conv1dParams::new(
            Tensor::new(vec![1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap(),
            Tensor::zeros(&[1]),
        )
        .unwrap();
        let out = conv1d(&t2(1, 3, &[1.0, 2.0, 3.0]), &p).unwrap();
        assert_eq!(out.data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn channel_sum_plus_bias() {
        let p = Conv1dParams::new(
            Tensor::new(vec![1, 2, 1], vec![1.0, 1.0]).unwrap(),
            Tensor::from_vec(vec![0.5]),
        )
        .unwrap();
        let out = conv1d(&t2(2, 2, &[1.0, 2.0, 3.0, 4.0]), &p).unwrap();
        assert_eq!(out.data(), &[4.5, 6.5]);
    }

    #[test]
    fn asymmetric_kernel_orientation() {
        // taps index forward in time: out[t] = w0 x[t-1] + w1 x[t] + w2 x[t+1]
        let p = Conv1dParams::new(
            Tensor::new(vec![1, 1, 3], vec![1.0, 10.0, 100.0]).unwrap(),
            Tensor::zeros(&[1]),
        )
        .unwrap();
        let out = conv1d(&t2(1, 3, &[1.0, 2.0, 3.0]), &p).unwrap();
        assert_eq!(out.data(), &[210.0, 321.0, 32.0]);
    }

    #[test]
    fn shape_errors_name_the_dimension() {
        let p = Conv1dParams::zeros(1, 2, 3).unwrap();
        match conv1d(&t2(3, 4, &[0.0; 12]), &p) {
            Err(Error::Shape { dim, expected, found, .. }) => {
                assert!(dim.contains("C_in"));
                assert_eq!((expected, found), (2, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(Conv1dParams::zeros(1, 1, 4).is_err());
        // K = 5 > 2T - 1 = 3
        let wide = Conv1dParams::zeros(1, 1, 5).unwrap();
        assert!(conv1d(&t2(1, 2, &[1.0, 2.0]), &wide).is_err());
    }

    #[test]
    fn relu_examples() {
        let r = relu(&Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::from_vec(vec![-3.0, -0.5]);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
        let pos = Tensor::from_vec(vec![0.1, 7.0]);
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn hartley_closed_form_at_two() {
        let h = hartley(&t2(1, 2, &[1.0, 0.0])).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert!((h.data()[0] - s).abs() < 1e-15);
        assert!((h.data()[1] - s).abs() < 1e-15);
    }

    #[test]
    fn hartley_involution_and_norm() {
        let x = Tensor::from_fn(&[3, 17], |i| ((i * 7919) % 23) as f64 - 11.0);
        let h = hartley(&x).unwrap();
        assert!((h.norm() - x.norm()).abs() < 1e-10);
        let back = hartley(&h).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-10);
    }
}
