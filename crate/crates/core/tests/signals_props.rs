mod common;

use std::f64::consts::PI;

use common::*;
use eegflow::signals::{
    export_csv, import_csv, load_dataset, match_datasets, pad_virtual_channel, random_matching_distance, save_dataset,
    split_indices, strip_virtual_channel, synth_generate, welch_spectrum, CsvMeta, SynthConfig,
};
use eegflow::transport::{Metric, Solver};
use eegflow::Tensor;
use proptest::prelude::*;

fn small_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        n_per_class: 20,
        channels: 3,
        samples: 256,
        seed,
        ..SynthConfig::default()
    }
}

#[test]
fn csv_and_binary_round_trips_agree() {
    let ds = synth_generate(&small_synth(71)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("d.sgds");
    save_dataset(&ds, &bin).unwrap();
    let from_bin = load_dataset(&bin).unwrap();
    assert_eq!(from_bin, ds);
    let (data, labels) = (dir.path().join("d.csv"), dir.path().join("l.csv"));
    export_csv(&ds, &data, &labels).unwrap();
    let meta = CsvMeta {
        sample_rate_hz: ds.sample_rate_hz(),
        channel_names: ds.channel_names().to_vec(),
        class_names: ds.class_names().to_vec(),
    };
    let from_csv = import_csv(&data, &labels, meta.clone()).unwrap();
    assert_eq!(from_csv, from_bin);
    // a ragged row is rejected
    let text = std::fs::read_to_string(&data).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let short = lines[1].rsplit_once(',').unwrap().0.to_string();
    lines[1] = &short;
    std::fs::write(&data, lines.join("\n")).unwrap();
    assert!(import_csv(&data, &labels, meta).is_err());
}

#[test]
fn virtual_channel_pads_odd_counts_and_strips_back() {
    let ds = synth_generate(&small_synth(72)).unwrap();
    let padded = pad_virtual_channel(&ds);
    assert_eq!(padded.channels(), 4);
    assert!(padded.trial_data(0)[3 * 256..].iter().all(|&v| v == 0.0));
    assert_eq!(strip_virtual_channel(&padded), ds);
    assert_eq!(pad_virtual_channel(&padded), padded);
}

/// Hann-tapered periodogram of one segment, by direct summation.
fn direct_periodogram(x: &[f64], fs: f64) -> Vec<f64> {
    let n = x.len();
    let w: Vec<f64> = (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect();
    let energy: f64 = w.iter().map(|v| v * v).sum();
    (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, (xv, wv)) in x.iter().zip(&w).enumerate() {
                let a = -2.0 * PI * (k * t) as f64 / n as f64;
                re += xv * wv * a.cos();
                im += xv * wv * a.sin();
            }
            let two = if k == 0 || (n.is_multiple_of(2) && k == n / 2) { 1.0 } else { 2.0 };
            two * (re * re + im * im) / (fs * energy)
        })
        .collect()
}

#[test]
fn single_segment_matches_direct_transform() {
    let mut r = rng(73);
    for n in [16usize, 17, 64] {
        let x = normals(&mut r, n);
        let spec = welch_spectrum(&x, 100.0, n, 0.0).unwrap();
        let want = direct_periodogram(&x, 100.0);
        assert_eq!(spec.power.len(), want.len());
        for (a, b) in spec.power.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10 * b.max(1e-3));
        }
        assert!((spec.freqs_hz[1] - 100.0 / n as f64).abs() < 1e-12);
    }
    // two half-overlapping segments average their periodograms
    let x = normals(&mut r, 48);
    let spec = welch_spectrum(&x, 10.0, 32, 0.5).unwrap();
    let a = direct_periodogram(&x[..32], 10.0);
    let b = direct_periodogram(&x[16..], 10.0);
    for k in 0..a.len() {
        assert!((spec.power[k] - 0.5 * (a[k] + b[k])).abs() < 1e-10);
    }
}

#[test]
fn white_noise_spectrum_is_flat_with_the_right_level() {
    let mut r = rng(74);
    let (fs, sigma) = (250.0, 2.0);
    let x: Vec<f64> = (0..250 * 400).map(|_| sigma * normal(&mut r)).collect();
    let spec = welch_spectrum(&x, fs, 250, 0.5).unwrap();
    let level = sigma * sigma / (fs / 2.0);
    for (lo, hi) in [(5.0, 30.0), (40.0, 70.0), (80.0, 120.0)] {
        let p = spec.band_power(lo, hi);
        assert!((p / level - 1.0).abs() < 0.05, "band {lo}-{hi}: {p} vs {level}");
    }
    let df = fs / 250.0;
    let total: f64 = spec.power.iter().sum::<f64>() * df;
    assert!((total / (sigma * sigma) - 1.0).abs() < 0.03, "total {total}");
}

#[test]
fn synthetic_alpha_sits_at_its_frequency_with_class_amplitudes() {
    let cfg = SynthConfig { n_per_class: 40, ..SynthConfig::default() };
    let ds = synth_generate(&cfg).unwrap();
    assert_eq!(ds.class_counts(), vec![40, 40]);
    let fs = ds.sample_rate_hz();
    for ch in 0..cfg.channels {
        let mut alpha = [0.0; 2];
        for i in 0..ds.len() {
            let row = &ds.trial_data(i)[ch * cfg.samples..(ch + 1) * cfg.samples];
            let s = welch_spectrum(row, fs, 250, 0.5).unwrap();
            let peak = (1..s.power.len()).max_by(|&a, &b| s.power[a].total_cmp(&s.power[b])).unwrap();
            if ds.labels()[i] == 0 {
                assert!((s.freqs_hz[peak] - cfg.alpha_hz).abs() <= 1.0);
            }
            alpha[ds.labels()[i]] += s.band_power(8.0, 12.0) / 40.0;
        }
        let noise_floor = cfg.noise_std.powi(2) / (fs / 2.0);
        let ratio = (alpha[1] - noise_floor) / (alpha[0] - noise_floor);
        let want = cfg.amplitude(1, ch).powi(2) / cfg.amplitude(0, ch).powi(2);
        assert!((ratio / want - 1.0).abs() < 0.25, "channel {ch}: ratio {ratio} vs {want}");
    }
    assert!(synth_generate(&SynthConfig { samples: 64, ..cfg.clone() }).is_err());
    assert!(synth_generate(&SynthConfig { suppression: 1.0, ..cfg.clone() }).is_err());
    assert!(synth_generate(&SynthConfig { n_per_class: 0, ..cfg }).is_err());
}

#[test]
fn amplitude_oracle_separates_the_classes() {
    // A matched filter at the alpha frequency estimates each trial's amplitude
    // on the suppressed channels; thresholding at the midpoint is close to the
    // likelihood-ratio rule because the phase is uniform.
    let cfg = SynthConfig::default();
    let ds = synth_generate(&cfg).unwrap();
    let omega = 2.0 * PI * cfg.alpha_hz / cfg.sample_rate_hz;
    let threshold = 0.5 * (cfg.amplitude(0, 0) + cfg.amplitude(1, 0));
    let mut correct = 0;
    for i in 0..ds.len() {
        let mut amp = 0.0;
        for ch in 0..cfg.suppressed_channels() {
            let row = &ds.trial_data(i)[ch * cfg.samples..(ch + 1) * cfg.samples];
            let (mut c, mut s) = (0.0, 0.0);
            for (t, v) in row.iter().enumerate() {
                c += v * (omega * t as f64).cos();
                s += v * (omega * t as f64).sin();
            }
            amp += 2.0 * (c * c + s * s).sqrt() / cfg.samples as f64;
        }
        amp /= cfg.suppressed_channels() as f64;
        let guess = usize::from(amp < threshold);
        correct += usize::from(guess == ds.labels()[i]);
    }
    let accuracy = correct as f64 / ds.len() as f64;
    assert!(accuracy > 0.95, "accuracy {accuracy}");
}

#[test]
fn split_is_stratified_and_reproducible() {
    let ds = synth_generate(&SynthConfig { n_per_class: 50, ..SynthConfig::default() }).unwrap();
    let (train, valid) = split_indices(&ds, 0.8, 5).unwrap();
    assert_eq!((train.len(), valid.len()), (80, 20));
    let mut all: Vec<usize> = train.iter().chain(&valid).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..100).collect::<Vec<_>>());
    for y in 0..2 {
        assert_eq!(train.iter().filter(|&&i| ds.labels()[i] == y).count(), 40);
    }
    assert_eq!(split_indices(&ds, 0.8, 5).unwrap(), (train.clone(), valid));
    assert_ne!(split_indices(&ds, 0.8, 6).unwrap().0, train);
    assert!(split_indices(&ds, 1.0, 5).is_err());
    assert!(split_indices(&ds, 0.0, 5).is_err());
    let lonely = ds.subset(&[0, 1, 3]);
    assert!(split_indices(&lonely, 0.5, 5).is_err());
}

#[test]
fn replicated_matching_has_zero_distance() {
    let ds = synth_generate(&small_synth(75)).unwrap();
    let trials: Vec<Tensor> = (0..2).flat_map(|_| (0..ds.len()).map(|i| ds.trial(i))).collect();
    let labels: Vec<usize> = (0..2).flat_map(|_| ds.labels().to_vec()).collect();
    let generated = ds.with_trials(&trials, labels).unwrap();
    let export = match_datasets(&ds, generated.clone(), Metric::SquaredEuclidean, &Solver::default()).unwrap();
    assert!(export.cost.abs() < 1e-9);
    assert!(export.entries.iter().all(|e| e.distance < 1e-9));
    assert!(export.mean_distance() < 1e-9);
    let n = ds.len();
    for i in 0..n {
        let mass: f64 = export.entries.iter().filter(|e| e.real == i).map(|e| e.mass).sum();
        assert!((mass - 1.0 / n as f64).abs() < 1e-12);
    }
    assert!(export.entries.windows(2).all(|w| (w[0].real, w[0].generated) < (w[1].real, w[1].generated)));
    assert!(random_matching_distance(&ds, &generated, 1).unwrap() > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn matching_never_beats_zero_or_loses_to_random(seed in any::<u64>()) {
        let mut r = rng(seed);
        let ds = synth_generate(&SynthConfig { n_per_class: 4, samples: 256, channels: 2, seed, ..SynthConfig::default() }).unwrap();
        let trials: Vec<Tensor> = (0..2 * ds.len())
            .map(|_| Tensor::from_fn(&[2, 256], |_| 5.0 * normal(&mut r)))
            .collect();
        let labels: Vec<usize> = (0..2 * ds.len()).map(|i| i % 2).collect();
        let generated = ds.with_trials(&trials, labels).unwrap();
        let export = match_datasets(&ds, generated.clone(), Metric::Euclidean, &Solver::default()).unwrap();
        let total: f64 = export.entries.iter().map(|e| e.mass).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        // the random assignment is one feasible plan
        prop_assert!(export.mean_distance() <= random_matching_distance(&ds, &generated, seed).unwrap() + 1e-9);
    }
}
