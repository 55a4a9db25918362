mod common;

use common::*;
use eegflow::flow::{
    build_architecture, coupling_forward, coupling_inverse, flow_forward, flow_inverse, hartley_forward,
    squeeze_forward, squeeze_inverse, ArchitectureConfig, CouplingBlock, FlowModel, Layer,
};
use eegflow::model_io::{load_model, model_from_bytes, model_to_bytes, save_model};
use eegflow::ops::Conv1dParams;
use eegflow::signals::{dimension_sweep, prototype_invert};
use eegflow::Tensor;
use proptest::prelude::*;
use rand::Rng;

// ---- plain-loop reference implementation of every layer

fn ref_conv(x: &[f64], c_in: usize, t: usize, p: &Conv1dParams) -> Vec<f64> {
    let (c_out, k) = (p.c_out(), p.kernel_size());
    let w = p.kernels.data();
    let pad = (k - 1) / 2;
    let mut out = vec![0.0; c_out * t];
    for o in 0..c_out {
        for s in 0..t {
            let mut acc = p.bias.data()[o];
            for i in 0..c_in {
                for j in 0..k {
                    let src = s as isize + j as isize - pad as isize;
                    if src >= 0 && (src as usize) < t {
                        acc += w[(o * c_in + i) * k + j] * x[i * t + src as usize];
                    }
                }
            }
            out[o * t + s] = acc;
        }
    }
    out
}

fn ref_subnet(x: &[f64], half: usize, t: usize, hidden: &Conv1dParams, output: &Conv1dParams) -> Vec<f64> {
    let h: Vec<f64> = ref_conv(x, half, t, hidden).into_iter().map(|v| v.max(0.0)).collect();
    ref_conv(&h, hidden.c_out(), t, output)
}

fn ref_coupling(x: &[f64], c: usize, t: usize, b: &CouplingBlock) -> Vec<f64> {
    let half = c / 2;
    let (x1, x2) = x.split_at(half * t);
    let f = ref_subnet(x2, half, t, &b.f.hidden, &b.f.output);
    let y1: Vec<f64> = x1.iter().zip(&f).map(|(a, b)| a + b).collect();
    let g = ref_subnet(&y1, half, t, &b.g.hidden, &b.g.output);
    let y2: Vec<f64> = x2.iter().zip(&g).map(|(a, b)| a + b).collect();
    [y1, y2].concat()
}

fn ref_squeeze(x: &[f64], c: usize, t: usize) -> Vec<f64> {
    let half = t / 2;
    let mut out = vec![0.0; c * t];
    for ch in 0..c {
        for s in 0..half {
            out[(2 * ch) * half + s] = x[ch * t + 2 * s];
            out[(2 * ch + 1) * half + s] = x[ch * t + 2 * s + 1];
        }
    }
    out
}

fn ref_rotate(x: &[f64], c: usize, t: usize) -> Vec<f64> {
    (0..c * t).map(|i| x[((i / t + 1) % c) * t + i % t]).collect()
}

fn ref_hartley(x: &[f64], c: usize, t: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * t];
    let norm = 1.0 / (t as f64).sqrt();
    for ch in 0..c {
        for k in 0..t {
            out[ch * t + k] = norm
                * (0..t)
                    .map(|n| {
                        let a = 2.0 * std::f64::consts::PI * (k * n) as f64 / t as f64;
                        x[ch * t + n] * (a.cos() + a.sin())
                    })
                    .sum::<f64>();
        }
    }
    out
}

fn ref_forward(model: &FlowModel, x: &Tensor) -> Vec<f64> {
    let (mut c, mut t) = model.input_shape();
    let mut v = x.data().to_vec();
    for layer in model.layers() {
        v = match layer {
            Layer::Squeeze => {
                let out = ref_squeeze(&v, c, t);
                c *= 2;
                t /= 2;
                out
            }
            Layer::Coupling(b) => ref_coupling(&v, c, t, b),
            Layer::RotateChannels => ref_rotate(&v, c, t),
            Layer::Hartley => ref_hartley(&v, c, t),
        };
    }
    v
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn forward_matches_reference_on_random_models() {
    let mut rng = rng(11);
    for i in 0..30 {
        let stages = i % 4;
        let model = random_model(&mut rng, 2 * (1 + i % 3), 32 << (i % 2), stages, [1, 3, 5][i % 3], 2);
        let (c, t) = model.input_shape();
        let x = Tensor::from_fn(&[c, t], |_| 2.0 * normal(&mut rng));
        let got = flow_forward(&model, &x).unwrap().latent;
        let want = ref_forward(&model, &x);
        assert!(max_abs(got.data(), &want) < 1e-10, "model {i}");
    }
}

#[test]
fn coupling_inverse_matches_reference() {
    let mut rng = rng(12);
    let model = random_model(&mut rng, 4, 16, 1, 3, 2);
    let block = model
        .layers()
        .iter()
        .find_map(|l| match l {
            Layer::Coupling(b) => Some(b.clone()),
            _ => None,
        })
        .unwrap();
    let (c, t) = (8, 8);
    let x = Tensor::from_fn(&[c, t], |_| normal(&mut rng));
    let y = coupling_forward(&block, &x).unwrap();
    assert!(max_abs(y.data(), &ref_coupling(x.data(), c, t, &block)) < 1e-12);
    assert!(coupling_inverse(&block, &y).unwrap().max_abs_diff(&x) < 1e-12);
}

#[test]
fn identity_coupling_and_identity_model() {
    let block = CouplingBlock::identity(4, 4, 3).unwrap();
    let x = Tensor::from_fn(&[4, 6], |i| i as f64 - 7.5);
    assert_eq!(coupling_forward(&block, &x).unwrap(), x);
    let model = FlowModel::identity((2, 8), 2).unwrap();
    let x = Tensor::from_fn(&[2, 8], |i| (i as f64).cos());
    let out = flow_forward(&model, &x).unwrap();
    assert_eq!(out.latent.data(), x.data());
    assert_eq!(out.log_det_jacobian, 0.0);
    assert_eq!(flow_inverse(&model, &out.latent).unwrap().data(), x.data());
}

#[test]
fn hartley_examples() {
    let y = hartley_forward(&Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
    let r = std::f64::consts::FRAC_1_SQRT_2;
    assert!(max_abs(y.data(), &[r, r]) < 1e-15);
    let mut rng = rng(13);
    for t in [1usize, 2, 3, 7, 16, 64, 100] {
        let x = Tensor::from_fn(&[3, t], |_| normal(&mut rng));
        let y = hartley_forward(&x).unwrap();
        assert!(max_abs(y.data(), &ref_hartley(x.data(), 3, t)) < 1e-10, "t={t}");
        assert!(hartley_forward(&y).unwrap().max_abs_diff(&x) < 1e-10);
        assert!((y.norm() - x.norm()).abs() < 1e-10);
    }
}

#[test]
fn architecture_shape_example_and_dimension_conservation() {
    let model = build_architecture(&ArchitectureConfig {
        channels: 2,
        samples: 8,
        n_stages: Some(2),
        kernel_size: 3,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(model.output_shape(), (8, 2));
    assert_eq!(model.latent_dim(), 16);
    for c in [2usize, 4, 6] {
        for t in [4usize, 8, 12, 32, 48] {
            let max = t.trailing_zeros() as usize;
            for stages in 0..=max {
                let cfg = ArchitectureConfig {
                    channels: c,
                    samples: t,
                    n_stages: Some(stages),
                    kernel_size: 1,
                    ..Default::default()
                };
                let model = build_architecture(&cfg).unwrap();
                let (oc, ot) = model.output_shape();
                assert_eq!(oc * ot, c * t);
                assert_eq!(model.latent_dim(), c * t);
            }
            let too_many = build_architecture(&ArchitectureConfig {
                channels: c,
                samples: t,
                n_stages: Some(max + 1),
                kernel_size: 1,
                ..Default::default()
            });
            let msg = too_many.unwrap_err().to_string();
            assert!(msg.contains(&max.to_string()), "{msg}");
        }
    }
}

#[test]
fn prototype_and_class_mean_round_trip() {
    let mut rng = rng(14);
    let model = random_model(&mut rng, 4, 32, 3, 3, 2);
    for y in 0..2 {
        let proto = prototype_invert(&model, y).unwrap();
        assert_eq!(proto.shape(), &[4, 32]);
        let h = flow_forward(&model, &proto).unwrap().latent;
        let mean = model.prior().class_mean(y).unwrap();
        assert!(max_abs(h.data(), mean.data()) < 1e-8);
    }
}

#[test]
fn sweep_varies_one_latent_coordinate_continuously() {
    let mut rng = rng(15);
    let model = random_model(&mut rng, 2, 16, 2, 3, 2);
    let values: Vec<f64> = (0..=40).map(|i| -2.0 + 0.1 * i as f64).collect();
    let dim = 5;
    let signals = dimension_sweep(&model, 1, dim, &values).unwrap();
    let mean = model.prior().class_mean(1).unwrap();
    for (v, s) in values.iter().zip(&signals) {
        let h = flow_forward(&model, s).unwrap().latent;
        for (j, (a, b)) in h.data().iter().zip(mean.data()).enumerate() {
            let want = if j == dim { *v } else { *b };
            assert!((a - want).abs() < 1e-8);
        }
    }
    // a small latent step gives a small signal step
    let steps: Vec<f64> = signals.windows(2).map(|w| w[1].max_abs_diff(&w[0])).collect();
    let largest = steps.iter().cloned().fold(0.0, f64::max);
    assert!(largest < 1.0, "largest step {largest}");
    assert!(dimension_sweep(&model, 0, 32, &values).is_err());
}

#[test]
fn model_files_round_trip_and_reject_corruption() {
    let mut rng = rng(16);
    let model = random_model(&mut rng, 2, 8, 2, 3, 3);
    let bytes = model_to_bytes(&model);
    assert_eq!(model_from_bytes(&bytes).unwrap(), model);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.sgfl");
    save_model(&model, &path).unwrap();
    let back = load_model(&path).unwrap();
    let x = Tensor::from_fn(&[2, 8], |_| normal(&mut rng));
    assert_eq!(flow_forward(&back, &x).unwrap(), flow_forward(&model, &x).unwrap());
    for cut in [0, 3, 8, bytes.len() / 2, bytes.len() - 1] {
        assert!(model_from_bytes(&bytes[..cut]).is_err(), "truncated at {cut}");
    }
    let mut extended = bytes.clone();
    extended.push(0);
    assert!(model_from_bytes(&extended).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn squeeze_round_trip_is_bit_exact(c in 1usize..4, half in 1usize..9, seed in any::<u64>()) {
        let mut r = rng(seed);
        let t = 2 * half;
        let x = Tensor::from_fn(&[c, t], |_| r.random_range(-1e6..1e6));
        let y = squeeze_forward(&x).unwrap();
        prop_assert_eq!(y.shape(), &[2 * c, half]);
        prop_assert_eq!(y.data(), &ref_squeeze(x.data(), c, t)[..]);
        prop_assert_eq!(squeeze_inverse(&y).unwrap(), x);
    }

    #[test]
    fn random_models_invert(seed in any::<u64>(), stages in 0usize..4, c_half in 1usize..3) {
        let mut r = rng(seed);
        let c = 2 * c_half;
        let t = (1usize << stages) * r.random_range(3..=6usize);
        let model = random_model(&mut r, c, t, stages, 3, 2);
        let x = Tensor::from_fn(&[c, t], |_| r.random_range(-5.0..=5.0));
        let out = flow_forward(&model, &x).unwrap();
        prop_assert_eq!(out.log_det_jacobian, 0.0);
        let back = flow_inverse(&model, &out.latent).unwrap();
        prop_assert!(back.max_abs_diff(&x) < 1e-8);
        let h = Tensor::from_fn(&[model.latent_dim()], |_| r.random_range(-5.0..=5.0));
        let fwd = flow_forward(&model, &flow_inverse(&model, &h).unwrap()).unwrap().latent;
        prop_assert!(max_abs(fwd.data(), h.data()) < 1e-8);
    }
}
