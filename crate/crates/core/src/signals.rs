//! Multichannel trial datasets: synthesis, splitting, file formats, Welch
//! spectra and the latent-space visualization procedures.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::binio::{checked_product, read_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::flow::{flow_inverse, FlowModel};
use crate::tensor::Tensor;
use crate::transport::{cost_matrix, solve, DiscreteDistribution, Metric, Solver};

pub const VIRTUAL_CHANNEL: &str = "virtual";

/// Trials of shape `(C, T)` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalDataset {
    data: Tensor,
    labels: Vec<usize>,
    sample_rate_hz: f64,
    channel_names: Vec<String>,
    class_names: Vec<String>,
}

impl SignalDataset {
    /// `data` has shape `(n, C, T)`; `channel_names` has length `C`.
    pub fn new(
        data: Tensor,
        labels: Vec<usize>,
        sample_rate_hz: f64,
        channel_names: Vec<String>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if data.ndim() != 3 {
            return Err(Error::Dataset(format!(
                "data must have shape (n, C, T), got {:?}",
                data.shape()
            )));
        }
        let (n, c) = (data.shape()[0], data.shape()[1]);
        if labels.len() != n {
            return Err(Error::Dataset(format!(
                "{} labels for {n} trials",
                labels.len()
            )));
        }
        if channel_names.len() != c {
            return Err(Error::Dataset(format!(
                "{} channel names for {c} channels",
                channel_names.len()
            )));
        }
        if class_names.is_empty() {
            return Err(Error::Dataset("at least one class name is required".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::ClassIndex {
                index: bad,
                n_classes: class_names.len(),
            });
        }
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(Error::Dataset(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        Ok(Self {
            data,
            labels,
            sample_rate_hz,
            channel_names,
            class_names,
        })
    }

    /// Zero trials of shape `(C, T)`.
    pub fn empty_like(&self) -> Self {
        Self {
            data: Tensor::zeros(&[0, self.channels(), self.samples()]),
            labels: Vec::new(),
            ..self.clone()
        }
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn samples(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Trial `i` as a `(C, T)` tensor.
    pub fn trial(&self, i: usize) -> Tensor {
        self.data.index_axis0(i)
    }

    pub fn trial_data(&self, i: usize) -> &[f64] {
        let d = self.channels() * self.samples();
        &self.data.data()[i * d..(i + 1) * d]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let d = self.channels() * self.samples();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.trial_data(i));
        }
        Self {
            data: Tensor::from_parts(vec![indices.len(), self.channels(), self.samples()], data),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone()
        }
    }

    /// Builds a dataset from `(C, T)` trials sharing this dataset's metadata.
    pub fn with_trials(&self, trials: &[Tensor], labels: Vec<usize>) -> Result<Self> {
        let data = if trials.is_empty() {
            Tensor::zeros(&[0, self.channels(), self.samples()])
        } else {
            Tensor::stack(trials)?
        };
        Self::new(
            data,
            labels,
            self.sample_rate_hz,
            self.channel_names.clone(),
            self.class_names.clone(),
        )
    }

    /// Smallest positive gap between sorted distinct values; `None` for
    /// constant data.
    pub fn quantization_step(&self) -> Option<f64> {
        let mut v: Vec<f64> = self.data.data().to_vec();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v.windows(2)
            .map(|w| w[1] - w[0])
            .filter(|&g| g > 0.0)
            .min_by(f64::total_cmp)
    }
}

/// Two-class alpha-suppression surrogate: class 0 ("rest") carries an alpha
/// oscillation on every channel, class 1 ("right_hand") has it attenuated by
/// `suppression` on the first `ceil(C/2)` channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_per_class: usize,
    pub channels: usize,
    pub samples: usize,
    pub sample_rate_hz: f64,
    pub alpha_hz: f64,
    /// Alpha amplitude in microvolts.
    pub alpha_amplitude: f64,
    /// Amplitude factor on suppressed channels, in `[0, 1)`.
    pub suppression: f64,
    /// White-noise standard deviation in microvolts.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_per_class: 100,
            channels: 4,
            samples: 512,
            sample_rate_hz: 250.0,
            alpha_hz: 10.0,
            alpha_amplitude: 10.0,
            suppression: 0.2,
            noise_std: 2.0,
            seed: 0,
        }
    }
}

pub const CLASS_NAMES: [&str; 2] = ["rest", "right_hand"];

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid("synth_generate", m));
        if self.n_per_class == 0 || self.channels == 0 || self.samples == 0 {
            return fail("n_per_class, channels and samples must be positive".into());
        }
        if !(0.0..1.0).contains(&self.suppression) {
            return fail(format!("suppression {} not in [0, 1)", self.suppression));
        }
        if !(self.sample_rate_hz > 0.0 && self.noise_std >= 0.0 && self.alpha_amplitude >= 0.0) {
            return fail("sample rate must be positive, amplitudes nonnegative".into());
        }
        let cycles = self.samples as f64 / self.sample_rate_hz * self.alpha_hz;
        if cycles < 10.0 {
            return fail(format!("trial covers {cycles:.2} alpha cycles, need at least 10"));
        }
        Ok(())
    }

    /// Number of leading channels with attenuated alpha in class 1.
    pub fn suppressed_channels(&self) -> usize {
        self.channels.div_ceil(2)
    }

    /// Alpha amplitude of `channel` under `class`.
    pub fn amplitude(&self, class: usize, channel: usize) -> f64 {
        if class == 1 && channel < self.suppressed_channels() {
            self.alpha_amplitude * self.suppression
        } else {
            self.alpha_amplitude
        }
    }
}

/// Trials alternate between the two classes; each trial draws one phase shared
/// by all its channels.
pub fn synth_generate(config: &SynthConfig) -> Result<SignalDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (c, t) = (config.channels, config.samples);
    let n = 2 * config.n_per_class;
    let omega = 2.0 * PI * config.alpha_hz / config.sample_rate_hz;
    let mut data = Vec::with_capacity(n * c * t);
    let mut labels = Vec::with_capacity(n);
    for trial in 0..n {
        let class = trial % 2;
        let phase = rng.random_range(0.0..2.0 * PI);
        for ch in 0..c {
            let a = config.amplitude(class, ch);
            for s in 0..t {
                let noise: f64 = rng.sample(StandardNormal);
                data.push(a * (omega * s as f64 + phase).sin() + config.noise_std * noise);
            }
        }
        labels.push(class);
    }
    SignalDataset::new(
        Tensor::new(vec![n, c, t], data)?,
        labels,
        config.sample_rate_hz,
        (0..c).map(|i| format!("ch{i}")).collect(),
        CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
    )
}

/// Appends an all-zero channel named [`VIRTUAL_CHANNEL`] when `C` is odd.
pub fn pad_virtual_channel(dataset: &SignalDataset) -> SignalDataset {
    let (c, t) = (dataset.channels(), dataset.samples());
    if c % 2 == 0 {
        return dataset.clone();
    }
    let n = dataset.len();
    let mut data = Vec::with_capacity(n * (c + 1) * t);
    for i in 0..n {
        data.extend_from_slice(dataset.trial_data(i));
        data.extend(std::iter::repeat_n(0.0, t));
    }
    let mut names = dataset.channel_names.clone();
    names.push(VIRTUAL_CHANNEL.into());
    SignalDataset {
        data: Tensor::from_parts(vec![n, c + 1, t], data),
        channel_names: names,
        ..dataset.clone()
    }
}

/// Removes a trailing channel named [`VIRTUAL_CHANNEL`], if present.
pub fn strip_virtual_channel(dataset: &SignalDataset) -> SignalDataset {
    let (c, t) = (dataset.channels(), dataset.samples());
    if dataset.channel_names.last().map(String::as_str) != Some(VIRTUAL_CHANNEL) {
        return dataset.clone();
    }
    let n = dataset.len();
    let mut data = Vec::with_capacity(n * (c - 1) * t);
    for i in 0..n {
        data.extend_from_slice(&dataset.trial_data(i)[..(c - 1) * t]);
    }
    SignalDataset {
        data: Tensor::from_parts(vec![n, c - 1, t], data),
        channel_names: dataset.channel_names[..c - 1].to_vec(),
        ..dataset.clone()
    }
}

/// Stratified split; each class keeps `round(fraction * n_c)` trials for
/// training (at least one on each side). Index order is preserved.
pub fn split_train_valid(
    dataset: &SignalDataset,
    fraction: f64,
    seed: u64,
) -> Result<(SignalDataset, SignalDataset)> {
    let (train, valid) = split_indices(dataset, fraction, seed)?;
    Ok((dataset.subset(&train), dataset.subset(&valid)))
}

/// Index form of [`split_train_valid`].
pub fn split_indices(
    dataset: &SignalDataset,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(
            "split_train_valid",
            format!("fraction {fraction} not in (0, 1)"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut valid = Vec::new();
    for class in 0..dataset.n_classes() {
        let mut idx: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.labels[i] == class)
            .collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(Error::Dataset(format!(
                "class `{}` has {} trial(s); splitting needs at least 2",
                dataset.class_names[class],
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let k = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        train.extend_from_slice(&idx[..k]);
        valid.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    valid.sort_unstable();
    Ok((train, valid))
}

/// One-sided power spectral density estimate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Spectrum {
    pub freqs_hz: Vec<f64>,
    pub power: Vec<f64>,
    pub segment: usize,
    pub overlap: f64,
    pub taper: &'static str,
}

impl Spectrum {
    /// Mean of spectra computed with identical settings.
    pub fn average(spectra: &[Spectrum]) -> Option<Spectrum> {
        let first = spectra.first()?;
        let mut power = vec![0.0; first.power.len()];
        for s in spectra {
            for (acc, p) in power.iter_mut().zip(&s.power) {
                *acc += p;
            }
        }
        let n = spectra.len() as f64;
        power.iter_mut().for_each(|p| *p /= n);
        Some(Spectrum {
            power,
            ..first.clone()
        })
    }

    /// Mean power over bins with `lo <= f <= hi`.
    pub fn band_power(&self, lo: f64, hi: f64) -> f64 {
        let sel: Vec<f64> = self
            .freqs_hz
            .iter()
            .zip(&self.power)
            .filter(|(f, _)| (lo..=hi).contains(*f))
            .map(|(_, p)| *p)
            .collect();
        sel.iter().sum::<f64>() / sel.len().max(1) as f64
    }
}

pub const WELCH_OVERLAP: f64 = 0.5;

/// Welch's method with a periodic Hann taper and no detrending.
///
/// Bins are spaced `sample_rate / segment`; summing `power * df` recovers the
/// mean square of the signal.
pub fn welch_spectrum(
    signal: &[f64],
    sample_rate_hz: f64,
    segment: usize,
    overlap: f64,
) -> Result<Spectrum> {
    let t = signal.len();
    if segment == 0 || segment > t {
        return Err(Error::invalid(
            "welch_spectrum",
            format!("segment length {segment} must be in 1..={t}"),
        ));
    }
    if !(0.0..1.0).contains(&overlap) || sample_rate_hz <= 0.0 {
        return Err(Error::invalid(
            "welch_spectrum",
            "overlap must be in [0, 1) and sample rate positive",
        ));
    }
    let window: Vec<f64> = (0..segment)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / segment as f64).cos())
        .collect();
    let win_energy: f64 = window.iter().map(|w| w * w).sum();
    let step = (segment - (overlap * segment as f64).round() as usize).max(1);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(segment);
    let n_bins = segment / 2 + 1;
    let mut power = vec![0.0; n_bins];
    let mut buf = vec![Complex::new(0.0, 0.0); segment];
    let mut n_segments = 0;
    let mut start = 0;
    while start + segment <= t {
        for (b, (x, w)) in buf.iter_mut().zip(signal[start..].iter().zip(&window)) {
            *b = Complex::new(x * w, 0.0);
        }
        fft.process(&mut buf);
        for (p, z) in power.iter_mut().zip(&buf) {
            *p += z.norm_sqr();
        }
        n_segments += 1;
        start += step;
    }
    let scale = 1.0 / (sample_rate_hz * win_energy * n_segments as f64);
    for (k, p) in power.iter_mut().enumerate() {
        let one_sided = if k == 0 || (segment.is_multiple_of(2) && k == segment / 2) {
            1.0
        } else {
            2.0
        };
        *p *= scale * one_sided;
    }
    Ok(Spectrum {
        freqs_hz: (0..n_bins)
            .map(|k| k as f64 * sample_rate_hz / segment as f64)
            .collect(),
        power,
        segment,
        overlap,
        taper: "hann",
    })
}

/// Welch segment length used by the dataset-level helpers: one second, capped
/// at the trial length.
pub fn default_segment(dataset: &SignalDataset) -> usize {
    (dataset.sample_rate_hz.round() as usize).clamp(1, dataset.samples())
}

/// Trial-averaged spectrum of every channel.
pub fn channel_spectra(dataset: &SignalDataset, segment: usize) -> Result<Vec<Spectrum>> {
    let t = dataset.samples();
    (0..dataset.channels())
        .map(|ch| {
            let per_trial = (0..dataset.len())
                .map(|i| {
                    let x = &dataset.trial_data(i)[ch * t..(ch + 1) * t];
                    welch_spectrum(x, dataset.sample_rate_hz, segment, WELCH_OVERLAP)
                })
                .collect::<Result<Vec<_>>>()?;
            Spectrum::average(&per_trial).ok_or_else(|| {
                Error::Dataset("spectra need at least one trial".into())
            })
        })
        .collect()
}

/// Median of `|log10 a - log10 b|` over bins in `[lo, hi]` Hz.
pub fn median_log_power_error(a: &Spectrum, b: &Spectrum, lo: f64, hi: f64) -> f64 {
    let mut errs: Vec<f64> = a
        .freqs_hz
        .iter()
        .zip(a.power.iter().zip(&b.power))
        .filter(|(f, _)| (lo..=hi).contains(*f))
        .map(|(_, (pa, pb))| (pa.log10() - pb.log10()).abs())
        .collect();
    if errs.is_empty() {
        return f64::NAN;
    }
    errs.sort_by(f64::total_cmp);
    let m = errs.len() / 2;
    if errs.len() % 2 == 1 {
        errs[m]
    } else {
        0.5 * (errs[m - 1] + errs[m])
    }
}

/// Inverse image of class `y`'s latent mean, shape `(C, T)`.
pub fn prototype_invert(model: &FlowModel, y: usize) -> Result<Tensor> {
    flow_inverse(model, &model.prior().class_mean(y)?)
}

/// Inverse images of the class mean with coordinate `dim` replaced by each of
/// `values`, in order.
pub fn dimension_sweep(
    model: &FlowModel,
    y: usize,
    dim: usize,
    values: &[f64],
) -> Result<Vec<Tensor>> {
    let mean = model.prior().class_mean(y)?;
    if dim >= mean.len() {
        return Err(Error::invalid(
            "dimension_sweep",
            format!("dimension {dim} out of range for latent size {}", mean.len()),
        ));
    }
    values
        .iter()
        .map(|&v| {
            let mut h = mean.clone();
            h.data_mut()[dim] = v;
            flow_inverse(model, &h)
        })
        .collect()
}

/// Draws `count` signals of class `y` from the model.
pub fn sample_class<R: Rng + ?Sized>(
    model: &FlowModel,
    y: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Tensor>> {
    (0..count)
        .map(|_| flow_inverse(model, &model.prior().sample(y, rng)?))
        .collect()
}

/// One nonzero entry of a real/generated matching.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatchEntry {
    pub real: usize,
    pub generated: usize,
    pub mass: f64,
    /// Euclidean distance between the two flattened signals.
    pub distance: f64,
}

#[derive(Clone, Debug)]
pub struct MatchExport {
    /// Generated signals with the same labels layout as `generated_labels`.
    pub generated: SignalDataset,
    /// Sorted by real index, then generated index.
    pub entries: Vec<MatchEntry>,
    pub cost: f64,
}

impl MatchExport {
    /// Mass-weighted mean distance, normalized by total mass.
    pub fn mean_distance(&self) -> f64 {
        let mass: f64 = self.entries.iter().map(|e| e.mass).sum();
        self.entries.iter().map(|e| e.mass * e.distance).sum::<f64>() / mass
    }
}

/// Samples `ratio * n` signals (class counts proportional to the dataset's)
/// and matches them to the real trials by optimal transport.
pub fn match_generated_real(
    model: &FlowModel,
    dataset: &SignalDataset,
    ratio: usize,
    seed: u64,
    metric: Metric,
    solver: &Solver,
) -> Result<MatchExport> {
    if dataset.is_empty() || ratio == 0 {
        return Err(Error::invalid(
            "match_generated_real",
            "needs a nonempty dataset and ratio >= 1",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(ratio * dataset.len());
    let mut labels = Vec::with_capacity(ratio * dataset.len());
    for (y, &count) in dataset.class_counts().iter().enumerate() {
        trials.extend(sample_class(model, y, ratio * count, &mut rng)?);
        labels.extend(std::iter::repeat_n(y, ratio * count));
    }
    let generated = dataset.with_trials(&trials, labels)?;
    match_datasets(dataset, generated, metric, solver)
}

/// Transport plan between two datasets' flattened trials, uniform weights.
pub fn match_datasets(
    real: &SignalDataset,
    generated: SignalDataset,
    metric: Metric,
    solver: &Solver,
) -> Result<MatchExport> {
    let flat = |ds: &SignalDataset| ds.data().reshape(&[ds.len(), ds.channels() * ds.samples()]);
    let p = DiscreteDistribution::uniform(flat(real)?)?;
    let q = DiscreteDistribution::uniform(flat(&generated)?)?;
    let plan = solve(&p, &q, metric, solver)?;
    let dist = cost_matrix(p.points(), q.points(), Metric::Euclidean)?;
    let m = q.len();
    let mut entries = Vec::new();
    for i in 0..p.len() {
        for j in 0..m {
            let mass = plan.coupling[i * m + j];
            if mass > 0.0 {
                entries.push(MatchEntry {
                    real: i,
                    generated: j,
                    mass,
                    distance: dist.data()[i * m + j],
                });
            }
        }
    }
    Ok(MatchExport {
        generated,
        entries,
        cost: plan.cost,
    })
}

/// Mean Euclidean distance under a uniformly random one-to-`ratio` assignment
/// of generated to real trials.
pub fn random_matching_distance(
    real: &SignalDataset,
    generated: &SignalDataset,
    seed: u64,
) -> Result<f64> {
    if real.is_empty() || generated.is_empty() {
        return Err(Error::invalid("random_matching_distance", "empty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..generated.len()).collect();
    order.shuffle(&mut rng);
    let total: f64 = order
        .iter()
        .enumerate()
        .map(|(k, &j)| {
            let a = real.trial_data(k % real.len());
            let b = generated.trial_data(j);
            a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        })
        .sum();
    Ok(total / generated.len() as f64)
}

const DATASET_MAGIC: &[u8; 4] = b"SGDS";
pub const DATASET_FORMAT_VERSION: u32 = 1;

pub fn dataset_to_bytes(ds: &SignalDataset) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(DATASET_MAGIC);
    w.u32(DATASET_FORMAT_VERSION);
    w.u64(ds.len());
    w.u64(ds.channels());
    w.u64(ds.samples());
    w.f64(ds.sample_rate_hz);
    for names in [&ds.channel_names, &ds.class_names] {
        w.u64(names.len());
        for name in names {
            w.string(name);
        }
    }
    for &l in &ds.labels {
        w.u32(l as u32);
    }
    w.f64s(ds.data.data());
    w.finish()
}

pub fn dataset_from_bytes(buf: &[u8]) -> Result<SignalDataset> {
    let mut r = Reader::new(buf, "dataset file");
    r.magic(DATASET_MAGIC)?;
    let version = r.u32()?;
    if version != DATASET_FORMAT_VERSION {
        return Err(Error::Version {
            what: "dataset format",
            found: version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    let (n, c, t) = (r.len()?, r.len()?, r.len()?);
    let total = checked_product(&[n, c, t], "dataset")?;
    let sample_rate = r.f64()?;
    let mut lists = Vec::with_capacity(2);
    for _ in 0..2 {
        let k = r.len()?;
        // every name carries an 8-byte length prefix
        if k > buf.len() / 8 {
            return Err(Error::Format(format!("dataset file: implausible name count {k}")));
        }
        lists.push((0..k).map(|_| r.string()).collect::<Result<Vec<_>>>()?);
    }
    let class_names = lists.pop().expect("two lists");
    let channel_names = lists.pop().expect("two lists");
    if n > buf.len() / 4 {
        return Err(Error::Format(format!("dataset file: implausible trial count {n}")));
    }
    let labels = (0..n)
        .map(|_| r.u32().map(|l| l as usize))
        .collect::<Result<Vec<_>>>()?;
    let data = r.f64s(total)?;
    r.finish()?;
    SignalDataset::new(
        Tensor::new(vec![n, c, t], data)?,
        labels,
        sample_rate,
        channel_names,
        class_names,
    )
}

pub fn save_dataset(ds: &SignalDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, dataset_to_bytes(ds)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<SignalDataset> {
    dataset_from_bytes(&read_file(path.as_ref())?)
}

/// Metadata a CSV import cannot recover from the numbers alone.
#[derive(Clone, Debug)]
pub struct CsvMeta {
    pub sample_rate_hz: f64,
    pub channel_names: Vec<String>,
    pub class_names: Vec<String>,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

/// Writes `n * C` rows of `T` values (trial-major) and a one-label-per-line
/// sidecar. Values use the shortest round-tripping decimal form.
pub fn export_csv(ds: &SignalDataset, data_path: &Path, labels_path: &Path) -> Result<()> {
    let t = ds.samples();
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(data_path)
        .map_err(|e| csv_err(data_path, e))?;
    for row in ds.data.data().chunks(t.max(1)) {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| csv_err(data_path, e))?;
    }
    w.flush().map_err(|e| Error::io(data_path, e))?;
    let labels: String = ds.labels.iter().map(|l| format!("{l}\n")).collect();
    std::fs::write(labels_path, labels).map_err(|e| Error::io(labels_path, e))
}

pub fn import_csv(data_path: &Path, labels_path: &Path, meta: CsvMeta) -> Result<SignalDataset> {
    let labels_text = std::fs::read_to_string(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let labels = labels_text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse::<usize>()
                .map_err(|_| Error::Format(format!("{}: bad label `{l}`", labels_path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(data_path)
        .map_err(|e| csv_err(data_path, e))?;
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for record in r.records() {
        let record = record.map_err(|e| csv_err(data_path, e))?;
        if *width.get_or_insert(record.len()) != record.len() {
            return Err(Error::Format(format!(
                "{}: row {rows} has {} values, expected {}",
                data_path.display(),
                record.len(),
                width.unwrap_or(0)
            )));
        }
        for field in record.iter() {
            data.push(field.trim().parse::<f64>().map_err(|_| {
                Error::Format(format!("{}: bad number `{field}`", data_path.display()))
            })?);
        }
        rows += 1;
    }
    let c = meta.channel_names.len();
    let n = labels.len();
    if rows != n * c {
        return Err(Error::Dataset(format!(
            "{rows} CSV rows, expected {n} trials x {c} channels"
        )));
    }
    let t = width.unwrap_or(0);
    SignalDataset::new(
        Tensor::new(vec![n, c, t], data)?,
        labels,
        meta.sample_rate_hz,
        meta.channel_names,
        meta.class_names,
    )
}
