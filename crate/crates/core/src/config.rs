//! Run configuration for the command-line tool.
//!
//! A run is described by one TOML document with the sections `[synth]`,
//! `[arch]` and `[train]` plus a few top-level keys. Every key is optional;
//! unknown keys are rejected. Command-line `--set key.path=value` overrides
//! are applied to the parsed document before it is checked, so they obey the
//! same rules as the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::ArchitectureConfig;
use crate::signals::SynthConfig;
use crate::training::TrainConfig;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "EEGFLOW_OUT";
pub const DEFAULT_OUT_DIR: &str = "eegflow-out";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Output directory; falls back to `$EEGFLOW_OUT`, then `eegflow-out`.
    pub out_dir: Option<PathBuf>,
    /// Fraction of each class held out when `train` gets a single dataset.
    pub valid_fraction: f64,
    pub split_seed: u64,
    /// Seed for sampling in `sample`, `spectra` and `match`.
    pub sample_seed: u64,
    pub synth: SynthConfig,
    pub arch: ArchitectureConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: None,
            valid_fraction: 0.2,
            split_seed: 0,
            sample_seed: 0,
            synth: SynthConfig::default(),
            arch: ArchitectureConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses `text` (empty means all defaults) and applies `overrides` of the
    /// form `dotted.key=value`, where `value` is a TOML literal or a bare
    /// string.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for item in overrides {
            apply_override(&mut doc, item)?;
        }
        let config: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path` if given, then applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_with(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.valid_fraction > 0.0 && self.valid_fraction < 1.0) {
            return Err(Error::Config(format!(
                "valid_fraction must lie in (0, 1), got {}",
                self.valid_fraction
            )));
        }
        self.train
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// `cli` beats the file, the file beats the environment.
    pub fn resolve_out_dir(&mut self, cli: Option<&Path>) -> PathBuf {
        let dir = cli
            .map(Path::to_path_buf)
            .or_else(|| self.out_dir.clone())
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
        self.out_dir = Some(dir.clone());
        dir
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the config to `dir/resolved_config.toml`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn apply_override(doc: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override `{item}` has an empty key")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("split yields one part");
    let mut table = doc;
    for part in parents {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{item}`: `{part}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::Objective;
    use crate::transport::Solver;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::from_toml_with("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["bogus = 1", "[train]\nlearnin_rate = 0.1", "[arch]\nx = 2"] {
            let err = RunConfig::from_toml_with(text, &[]).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err}");
        }
        assert!(RunConfig::from_toml_with("", &["train.nope=1".into()]).is_err());
    }

    #[test]
    fn overrides_beat_the_file() {
        let text = "[train]\nepochs = 7\nobjective = \"ml\"\n";
        let c = RunConfig::from_toml_with(
            text,
            &[
                "train.epochs=3".into(),
                "train.objective=ot".into(),
                "train.ot.solver = { kind = \"sinkhorn\", epsilon = 0.5 }".into(),
                "arch.n_stages=2".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.objective, Objective::OptimalTransport);
        assert!(matches!(c.train.ot.solver, Solver::Sinkhorn { epsilon, .. } if epsilon == 0.5));
        assert_eq!(c.arch.n_stages, Some(2));
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c = RunConfig::from_toml_with(
            "",
            &["train.prior_learning_rate=0.02".into(), "train.prior_reg.penalty_weight=0.5".into()],
        )
        .unwrap();
        c.resolve_out_dir(Some(Path::new("somewhere")));
        let back = RunConfig::from_toml_with(&c.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(matches!(
            RunConfig::from_toml_with("valid_fraction = 1.0", &[]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml_with("[train]\nbatch_size = 0", &[]),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::from_toml_with("", &["novalue".into()]).is_err());
    }
}
