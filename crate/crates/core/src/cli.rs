//! `eegflow` subcommands.
//!
//! Every command writes its outputs plus `resolved_config.toml` into one
//! output directory. Errors map to exit codes through
//! [`Error::exit_code`]: 1 usage/config, 2 data/IO, 3 numeric.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::flow::{build_architecture, FlowModel};
use crate::model_io::{load_model, save_model};
use crate::selfcheck;
use crate::signals::{
    channel_spectra, default_segment, dimension_sweep, export_csv, load_dataset,
    match_generated_real, median_log_power_error, pad_virtual_channel, prototype_invert,
    random_matching_distance, sample_class, save_dataset, split_train_valid, strip_virtual_channel,
    synth_generate, SignalDataset, CLASS_NAMES,
};
use crate::tensor::Tensor;
use crate::training::{evaluate, train_max_likelihood_with, Evaluation, Objective, TrainReport};
use crate::transport::train_ot_with;

/// Band used for the spectra summary, in Hz.
pub const SPECTRA_BAND_HZ: (f64, f64) = (5.0, 15.0);

#[derive(Debug, Parser)]
#[command(name = "eegflow", version, about = "Invertible flow models for multichannel signals")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=10` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory (beats the config file and $EEGFLOW_OUT).
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic two-class dataset.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Validation dataset; without it `valid_fraction` of `--data` is held out.
        #[arg(long)]
        valid: Option<PathBuf>,
    },
    /// Draw signals of one class from a model.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long)]
        count: usize,
        /// Defaults to `sample_seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Per-trial predictions for one dataset.
    Classify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train and/or test accuracy and likelihood summary.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Welch spectra of real and generated signals per channel.
    Spectra {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Welch segment length in samples; defaults to one second.
        #[arg(long)]
        segment: Option<usize>,
    },
    /// Inverse images of the class means.
    Prototype {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Inverse images along one latent coordinate.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long, allow_hyphen_values = true)]
        from: f64,
        #[arg(long, allow_hyphen_values = true)]
        to: f64,
        #[arg(long, default_value_t = 5)]
        steps: usize,
    },
    /// Transport matching between generated and real trials.
    Match {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Generated trials per real trial; defaults to `train.ot.ratio`.
        #[arg(long)]
        ratio: Option<usize>,
    },
    /// Run the built-in invariant suites.
    Selfcheck {
        #[command(flatten)]
        common: Common,
        /// Also verify that this model file loads.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth { common }
            | Command::Train { common, .. }
            | Command::Sample { common, .. }
            | Command::Classify { common, .. }
            | Command::Eval { common, .. }
            | Command::Spectra { common, .. }
            | Command::Prototype { common, .. }
            | Command::Sweep { common, .. }
            | Command::Match { common, .. }
            | Command::Selfcheck { common, .. } => common,
        }
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli.command) {
        Ok(0) => 0,
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Resolved configuration and the created output directory.
pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
}

impl Context {
    pub fn new(common: &Common) -> Result<Self> {
        let mut config = RunConfig::load(common.config.as_deref(), &common.overrides)?;
        let out = config.resolve_out_dir(common.out.as_deref());
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        Ok(Self { config, out })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn finish(&self) -> Result<()> {
        self.config.write_resolved(&self.out).map(|_| ())
    }
}

/// Runs one command; `Ok(code)` carries a nonzero code for commands that
/// complete but report failure (selfcheck).
pub fn run(command: &Command) -> Result<i32> {
    let mut ctx = Context::new(command.common())?;
    ctx.finish()?;
    let code = match command {
        Command::Synth { .. } => cmd_synth(&ctx).map(|_| 0)?,
        Command::Train { data, valid, .. } => cmd_train(&mut ctx, data, valid.as_deref()).map(|_| 0)?,
        Command::Sample {
            model,
            class,
            count,
            seed,
            ..
        } => cmd_sample(&ctx, model, *class, *count, *seed).map(|_| 0)?,
        Command::Classify { model, data, .. } => cmd_classify(&ctx, model, data).map(|_| 0)?,
        Command::Eval {
            model, train, test, ..
        } => cmd_eval(&ctx, model, train.as_deref(), test.as_deref()).map(|_| 0)?,
        Command::Spectra {
            model,
            data,
            segment,
            ..
        } => cmd_spectra(&ctx, model, data, *segment).map(|_| 0)?,
        Command::Prototype { model, .. } => cmd_prototype(&ctx, model).map(|_| 0)?,
        Command::Sweep {
            model,
            class,
            dim,
            from,
            to,
            steps,
            ..
        } => cmd_sweep(&ctx, model, *class, *dim, (*from, *to), *steps).map(|_| 0)?,
        Command::Match {
            model, data, ratio, ..
        } => cmd_match(&ctx, model, data, *ratio).map(|_| 0)?,
        Command::Selfcheck { model, seed, .. } => {
            if cmd_selfcheck(&ctx, model.as_deref(), *seed)? {
                0
            } else {
                3
            }
        }
    };
    ctx.finish()?;
    Ok(code)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn csv_row<I, S>(w: &mut csv::Writer<std::fs::File>, path: &Path, row: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    w.write_record(row)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn csv_done(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// Names for `k` classes: the synthetic names for two, `class{i}` otherwise.
pub fn default_class_names(k: usize) -> Vec<String> {
    if k == CLASS_NAMES.len() {
        CLASS_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..k).map(|i| format!("class{i}")).collect()
    }
}

/// Wraps generated trials with default metadata; the sample rate comes from
/// the `[synth]` section since models do not store one.
fn generated_dataset(
    model: &FlowModel,
    config: &RunConfig,
    trials: &[Tensor],
    labels: Vec<usize>,
) -> Result<SignalDataset> {
    let (c, t) = model.input_shape();
    let data = if trials.is_empty() {
        Tensor::zeros(&[0, c, t])
    } else {
        Tensor::stack(trials)?
    };
    SignalDataset::new(
        data,
        labels,
        config.synth.sample_rate_hz,
        (0..c).map(|i| format!("ch{i}")).collect(),
        default_class_names(model.n_classes()),
    )
}

pub fn cmd_synth(ctx: &Context) -> Result<PathBuf> {
    let ds = synth_generate(&ctx.config.synth)?;
    let path = ctx.path("dataset.sgds");
    save_dataset(&ds, &path)?;
    println!("wrote {} trials to {}", ds.len(), path.display());
    Ok(path)
}

/// Trains per `ctx.config` and writes `model.sgfl`, checkpoints, the report
/// files and `summary.json`. The architecture's shape and class count are
/// taken from the dataset and recorded in the resolved config.
pub fn cmd_train(ctx: &mut Context, data: &Path, valid: Option<&Path>) -> Result<TrainReport> {
    let ds = pad_virtual_channel(&load_dataset(data)?);
    let (train, valid) = match valid {
        Some(p) => (ds, pad_virtual_channel(&load_dataset(p)?)),
        None => split_train_valid(&ds, 1.0 - ctx.config.valid_fraction, ctx.config.split_seed)?,
    };
    let ctx: &Context = {
        let cfg = &mut ctx.config;
        cfg.arch.channels = train.channels();
        cfg.arch.samples = train.samples();
        cfg.arch.n_classes = cfg.arch.n_classes.max(train.n_classes()).max(valid.n_classes());
        ctx
    };
    let cfg = &ctx.config;
    let mut model = build_architecture(&cfg.arch)?;
    let checkpoint_dir = ctx.out.join("checkpoints");
    let every = cfg.train.checkpoint_every;
    if every > 0 {
        std::fs::create_dir_all(&checkpoint_dir).map_err(|e| Error::io(&checkpoint_dir, e))?;
    }
    let mut on_epoch = |epoch: usize, m: &FlowModel, r: &crate::training::EpochRecord| -> Result<()> {
        let va = r.metrics.valid_accuracy.map_or(String::from("-"), |a| format!("{a:.3}"));
        println!(
            "epoch {epoch:>4} loss {:.4} train ll {:.3} valid acc {va}",
            r.train_loss, r.metrics.train_log_likelihood
        );
        if every > 0 && (epoch + 1).is_multiple_of(every) {
            save_model(m, checkpoint_dir.join(format!("epoch_{:04}.sgfl", epoch + 1)))?;
        }
        Ok(())
    };
    let report = match cfg.train.objective {
        Objective::MaxLikelihood => train_max_likelihood_with(&mut model, &train, &valid, &cfg.train, &mut on_epoch)?,
        Objective::OptimalTransport => train_ot_with(&mut model, &train, &valid, &cfg.train, &mut on_epoch)?,
    };
    save_model(&model, ctx.path("model.sgfl"))?;
    report.write_csv(&ctx.path("report.csv"))?;
    report.write_jsonl(&ctx.path("report.jsonl"))?;
    report.write_timing_csv(&ctx.path("timing.csv"))?;
    write_json(
        &ctx.path("summary.json"),
        &json!({
            "objective": cfg.train.objective,
            "n_train": train.len(),
            "n_valid": valid.len(),
            "epochs": report.records.len(),
            "initial": report.initial,
            "final": report.records.last().map(|r| &r.metrics),
        }),
    )?;
    Ok(report)
}

pub fn cmd_sample(ctx: &Context, model: &Path, class: usize, count: usize, seed: Option<u64>) -> Result<SignalDataset> {
    let model = load_model(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(ctx.config.sample_seed));
    let trials = sample_class(&model, class, count, &mut rng)?;
    let ds = generated_dataset(&model, &ctx.config, &trials, vec![class; count])?;
    save_dataset(&ds, ctx.path("samples.sgds"))?;
    export_csv(&ds, &ctx.path("samples_data.csv"), &ctx.path("samples_labels.csv"))?;
    println!("wrote {count} samples of class {class} to {}", ctx.out.display());
    Ok(ds)
}

pub const PREDICTION_CSV_PREFIX: [&str; 6] = [
    "trial",
    "label",
    "predicted",
    "correct",
    "log_likelihood",
    "marginal_log_likelihood",
];

fn write_predictions(path: &Path, ds: &SignalDataset, ev: &Evaluation) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header: Vec<String> = PREDICTION_CSV_PREFIX.iter().map(|s| s.to_string()).collect();
    let k = ev.posterior.first().map_or(0, Vec::len);
    header.extend((0..k).map(|c| format!("posterior_{c}")));
    csv_row(&mut w, path, &header)?;
    for (i, &y) in ds.labels().iter().enumerate() {
        let mut row = vec![
            i.to_string(),
            y.to_string(),
            ev.predicted[i].to_string(),
            u8::from(ev.predicted[i] == y).to_string(),
            ev.log_likelihood[i].to_string(),
            ev.marginal_log_likelihood[i].to_string(),
        ];
        row.extend(ev.posterior[i].iter().map(f64::to_string));
        csv_row(&mut w, path, &row)?;
    }
    csv_done(w, path)
}

fn evaluation_summary(ds: &SignalDataset, ev: &Evaluation) -> serde_json::Value {
    json!({
        "n_trials": ds.len(),
        "accuracy": ev.accuracy,
        "mean_log_likelihood": ev.mean_log_likelihood(),
        "mean_marginal_log_likelihood": ev.mean_marginal_log_likelihood(),
    })
}

fn load_nonempty(path: &Path) -> Result<SignalDataset> {
    let ds = load_dataset(path)?;
    if ds.is_empty() {
        return Err(Error::Dataset(format!("{}: dataset has no trials", path.display())));
    }
    Ok(ds)
}

/// Loads a nonempty dataset in the model's input layout: an odd channel count
/// one short of the model's gets the virtual channel `train` added.
fn load_for_model(path: &Path, model: &FlowModel) -> Result<SignalDataset> {
    let ds = load_nonempty(path)?;
    let padded = pad_virtual_channel(&ds);
    let (c, t) = model.input_shape();
    if (padded.channels(), padded.samples()) != (c, t) {
        return Err(Error::Dataset(format!(
            "{}: trials are {}x{}, the model expects {c}x{t}",
            path.display(),
            ds.channels(),
            ds.samples()
        )));
    }
    Ok(padded)
}

pub fn cmd_classify(ctx: &Context, model: &Path, data: &Path) -> Result<Evaluation> {
    let model = load_model(model)?;
    let ds = load_for_model(data, &model)?;
    let ev = evaluate(&model, &ds, Execution::default())?;
    write_predictions(&ctx.path("predictions.csv"), &ds, &ev)?;
    write_json(&ctx.path("summary.json"), &evaluation_summary(&ds, &ev))?;
    println!("accuracy {:.4} on {} trials", ev.accuracy, ds.len());
    Ok(ev)
}

/// `summary.json` holds `train` and/or `test` sections with their accuracy.
pub fn cmd_eval(ctx: &Context, model: &Path, train: Option<&Path>, test: Option<&Path>) -> Result<serde_json::Value> {
    if train.is_none() && test.is_none() {
        return Err(Error::Config("eval needs --train and/or --test".into()));
    }
    let model = load_model(model)?;
    let mut summary = serde_json::Map::new();
    for (name, path) in [("train", train), ("test", test)] {
        let Some(path) = path else { continue };
        let ds = load_for_model(path, &model)?;
        let ev = evaluate(&model, &ds, Execution::default())?;
        write_predictions(&ctx.path(&format!("predictions_{name}.csv")), &ds, &ev)?;
        println!("{name} accuracy {:.4} on {} trials", ev.accuracy, ds.len());
        summary.insert(format!("{name}_accuracy"), json!(ev.accuracy));
        summary.insert(name.to_string(), evaluation_summary(&ds, &ev));
    }
    let summary = serde_json::Value::Object(summary);
    write_json(&ctx.path("summary.json"), &summary)?;
    Ok(summary)
}

pub const SPECTRA_CSV_HEADER: [&str; 5] = ["channel", "channel_name", "freq_hz", "real_power", "generated_power"];

/// Samples as many trials per class as the dataset has, then writes both
/// channel-averaged Welch spectra and the per-channel median absolute
/// log10-power difference in [`SPECTRA_BAND_HZ`]. Returns those errors.
pub fn cmd_spectra(ctx: &Context, model: &Path, data: &Path, segment: Option<usize>) -> Result<Vec<f64>> {
    let model = load_model(model)?;
    let padded = load_for_model(data, &model)?;
    let real = strip_virtual_channel(&padded);
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.config.sample_seed);
    let mut trials = Vec::with_capacity(real.len());
    let mut labels = Vec::with_capacity(real.len());
    for (y, &count) in real.class_counts().iter().enumerate() {
        trials.extend(sample_class(&model, y, count, &mut rng)?);
        labels.extend(std::iter::repeat_n(y, count));
    }
    let generated = strip_virtual_channel(&padded.with_trials(&trials, labels)?);
    let segment = segment.unwrap_or_else(|| default_segment(&real));
    let (a, b) = (channel_spectra(&real, segment)?, channel_spectra(&generated, segment)?);
    let path = ctx.path("spectra.csv");
    let mut w = csv_writer(&path)?;
    csv_row(&mut w, &path, SPECTRA_CSV_HEADER)?;
    let mut errors = Vec::with_capacity(a.len());
    for (ch, (sa, sb)) in a.iter().zip(&b).enumerate() {
        for (k, f) in sa.freqs_hz.iter().enumerate() {
            csv_row(
                &mut w,
                &path,
                [
                    ch.to_string(),
                    real.channel_names()[ch].clone(),
                    f.to_string(),
                    sa.power[k].to_string(),
                    sb.power[k].to_string(),
                ],
            )?;
        }
        errors.push(median_log_power_error(sa, sb, SPECTRA_BAND_HZ.0, SPECTRA_BAND_HZ.1));
    }
    csv_done(w, &path)?;
    write_json(
        &ctx.path("spectra_summary.json"),
        &json!({
            "band_hz": [SPECTRA_BAND_HZ.0, SPECTRA_BAND_HZ.1],
            "segment": segment,
            "median_abs_log10_power_error": errors,
        }),
    )?;
    for (ch, e) in errors.iter().enumerate() {
        println!("channel {ch}: median |log10 real - log10 generated| = {e:.4}");
    }
    Ok(errors)
}

fn write_signal_rows(
    w: &mut csv::Writer<std::fs::File>,
    path: &Path,
    prefix: &[String],
    signal: &Tensor,
    sample_rate: f64,
) -> Result<()> {
    let t = signal.shape()[1];
    for (idx, v) in signal.data().iter().enumerate() {
        let (ch, s) = (idx / t, idx % t);
        let mut row = prefix.to_vec();
        row.extend([
            s.to_string(),
            (s as f64 / sample_rate).to_string(),
            ch.to_string(),
            v.to_string(),
        ]);
        csv_row(w, path, &row)?;
    }
    Ok(())
}

pub fn cmd_prototype(ctx: &Context, model: &Path) -> Result<Vec<Tensor>> {
    let model = load_model(model)?;
    let names = default_class_names(model.n_classes());
    let path = ctx.path("prototype.csv");
    let mut w = csv_writer(&path)?;
    csv_row(&mut w, &path, ["class", "class_name", "sample", "time_s", "channel", "value"])?;
    let mut out = Vec::with_capacity(model.n_classes());
    for (y, name) in names.iter().enumerate() {
        let proto = prototype_invert(&model, y)?;
        write_signal_rows(&mut w, &path, &[y.to_string(), name.clone()], &proto, ctx.config.synth.sample_rate_hz)?;
        out.push(proto);
    }
    csv_done(w, &path)?;
    println!("wrote {} prototypes to {}", out.len(), path.display());
    Ok(out)
}

/// `steps` evenly spaced values from `from` to `to` inclusive.
pub fn sweep_values(from: f64, to: f64, steps: usize) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![from],
        _ => (0..steps)
            .map(|i| from + (to - from) * i as f64 / (steps - 1) as f64)
            .collect(),
    }
}

pub fn cmd_sweep(
    ctx: &Context,
    model: &Path,
    class: usize,
    dim: usize,
    (from, to): (f64, f64),
    steps: usize,
) -> Result<Vec<Tensor>> {
    let model = load_model(model)?;
    let values = sweep_values(from, to, steps);
    let signals = dimension_sweep(&model, class, dim, &values)?;
    let path = ctx.path("sweep.csv");
    let mut w = csv_writer(&path)?;
    csv_row(&mut w, &path, ["step", "latent_value", "sample", "time_s", "channel", "value"])?;
    for (i, (v, s)) in values.iter().zip(&signals).enumerate() {
        write_signal_rows(&mut w, &path, &[i.to_string(), v.to_string()], s, ctx.config.synth.sample_rate_hz)?;
    }
    csv_done(w, &path)?;
    println!("wrote {} sweep steps to {}", signals.len(), path.display());
    Ok(signals)
}

pub fn cmd_match(ctx: &Context, model: &Path, data: &Path, ratio: Option<usize>) -> Result<serde_json::Value> {
    let model = load_model(model)?;
    let real = load_for_model(data, &model)?;
    let ot = &ctx.config.train.ot;
    let export = match_generated_real(
        &model,
        &real,
        ratio.unwrap_or(ot.ratio),
        ctx.config.sample_seed,
        ot.metric,
        &ot.solver,
    )?;
    let path = ctx.path("match.csv");
    let mut w = csv_writer(&path)?;
    csv_row(&mut w, &path, ["real", "generated", "mass", "distance"])?;
    for e in &export.entries {
        csv_row(
            &mut w,
            &path,
            [e.real.to_string(), e.generated.to_string(), e.mass.to_string(), e.distance.to_string()],
        )?;
    }
    csv_done(w, &path)?;
    save_dataset(&strip_virtual_channel(&export.generated), ctx.path("generated.sgds"))?;
    let random = random_matching_distance(&real, &export.generated, ctx.config.sample_seed)?;
    let summary = json!({
        "cost": export.cost,
        "mean_matched_distance": export.mean_distance(),
        "mean_random_distance": random,
    });
    write_json(&ctx.path("match_summary.json"), &summary)?;
    println!(
        "mean matched distance {:.4}, random matching {:.4}",
        export.mean_distance(),
        random
    );
    Ok(summary)
}

/// Prints the table and writes `selfcheck.csv`; returns whether every check
/// passed.
pub fn cmd_selfcheck(ctx: &Context, model: Option<&Path>, seed: u64) -> Result<bool> {
    if let Some(path) = model {
        let m = load_model(path)?;
        println!("loaded {} ({} layers)", path.display(), m.layers().len());
    }
    let results = selfcheck::run_all(seed);
    let table = selfcheck::format_table(&results);
    let mut stdout = std::io::stdout().lock();
    let _ = stdout.write_all(table.as_bytes());
    let path = ctx.path("selfcheck.csv");
    let mut w = csv_writer(&path)?;
    csv_row(&mut w, &path, ["suite", "check", "passed", "detail"])?;
    for r in &results {
        csv_row(&mut w, &path, [r.suite, &r.name, &r.passed.to_string(), &r.detail])?;
    }
    csv_done(w, &path)?;
    Ok(results.iter().all(|r| r.passed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_values_are_inclusive() {
        assert_eq!(sweep_values(-1.0, 1.0, 3), vec![-1.0, 0.0, 1.0]);
        assert_eq!(sweep_values(2.0, 5.0, 1), vec![2.0]);
        assert!(sweep_values(0.0, 1.0, 0).is_empty());
    }

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(main_with_args(["eegflow", "no-such-command"]), 1);
        assert_eq!(main_with_args(["eegflow", "train"]), 1);
    }

    #[test]
    fn class_names_default() {
        assert_eq!(default_class_names(2), vec!["rest", "right_hand"]);
        assert_eq!(default_class_names(3)[2], "class2");
    }
}
