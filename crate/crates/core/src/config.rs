//! Flat key=value experiment configuration.
//!
//! Grammar, one setting per line:
//!
//! ```text
//! # comment (also allowed after a value)
//! [section]          # cosmetic grouping, ignored
//! key = value
//! ```
//!
//! Every key has a default (see [`FlatConfig::defaults`]); files and
//! `--set key=value` overrides may only reference known keys. `mu` accepts
//! an integer or `search`, which sweeps the 1/3/5/7/9 grid on validation
//! loss.

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::SplitSpec;
use crate::error::{Error, Result};
use crate::model::Variant;
use crate::trainer::TrainConfig;

/// Resolved flat configuration: defaults overlaid with file values and
/// command-line overrides.
#[derive(Clone, Debug)]
pub struct FlatConfig {
    map: BTreeMap<String, String>,
}

const DEFAULTS: &[(&str, &str)] = &[
    ("dataset", "synthetic:sinusoid"),
    ("dataset_name", ""),
    ("split", "7:1:2"),
    ("horizon", "96"),
    ("mu", "1"),
    ("seed", "2024"),
    ("lr", "1e-3"),
    ("batch_size", "32"),
    ("epochs", "10"),
    ("patience", "3"),
    ("d", "64"),
    ("k", "5"),
    ("n", "1"),
    ("heads", "1"),
    ("scales", "8"),
    ("patch", "12"),
    ("lambda", "1.0"),
    ("beta", "1.0"),
    ("clip_norm", "5.0"),
    ("variant", "full"),
    ("eval_raw_space", "false"),
    ("synth_len", "4000"),
    ("synth_channels", "3"),
    ("fixed_runtime", "false"),
    ("checkpoint", ""),
];

impl FlatConfig {
    pub fn defaults() -> Self {
        FlatConfig {
            map: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    /// Sets a key, rejecting names outside the known key set.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.map.contains_key(key) {
            return Err(Error::config(format!(
                "unknown config key '{key}' (known keys: {})",
                DEFAULTS
                    .iter()
                    .map(|(k, _)| *k)
                    .collect::<Vec<_>>()
                    .join(", ")
            )));
        }
        self.map.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Parses a config file into an existing map.
    pub fn load_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| {
            Error::config(format!("cannot read config {}: {e}", path.as_ref().display()))
        })?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() || (line.starts_with('[') && line.ends_with(']')) {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!(
                    "line {} is not 'key = value': '{raw}'",
                    lineno + 1
                ))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Defaults, overlaid with an optional file, then with overrides.
    pub fn merged(
        file: Option<&Path>,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let mut cfg = FlatConfig::defaults();
        if let Some(path) = file {
            cfg.load_file(path)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> &str {
        self.map
            .get(key)
            .map(String::as_str)
            .unwrap_or_default()
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .parse()
            .map_err(|e| Error::config(format!("bad value for {key} = '{}': {e}", self.get(key))))
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        self.parse(key)
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        self.parse(key)
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        self.parse(key)
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(Error::config(format!(
                "bad value for {key} = '{other}': expected true/false"
            ))),
        }
    }

    /// The resolved configuration as sorted `key = value` lines; rerunning
    /// from this snapshot reproduces the run.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

/// Lookback multiplier choice: fixed, or swept over the 1/3/5/7/9 grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MuChoice {
    Fixed(usize),
    Search,
}

pub const MU_GRID: [usize; 5] = [1, 3, 5, 7, 9];

/// Typed view of a [`FlatConfig`] for the experiment runner.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub flat: FlatConfig,
    pub dataset: String,
    pub dataset_name: String,
    pub split: SplitSpec,
    pub mu: MuChoice,
    pub train: TrainConfig,
    pub eval_raw_space: bool,
    pub fixed_runtime: bool,
    pub synth_len: usize,
    pub synth_channels: usize,
    pub checkpoint: Option<String>,
}

impl ExperimentConfig {
    pub fn resolve(flat: FlatConfig) -> Result<Self> {
        let dataset = flat.get("dataset").to_string();
        if dataset.is_empty() {
            return Err(Error::config("dataset must be set"));
        }
        let dataset_name = {
            let explicit = flat.get("dataset_name");
            if !explicit.is_empty() {
                explicit.to_string()
            } else if dataset == "synthetic:sinusoid" {
                "sinusoid".to_string()
            } else {
                Path::new(&dataset)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| dataset.clone())
            }
        };
        let split = SplitSpec::parse(flat.get("split"))?;
        let mu = match flat.get("mu") {
            "search" => MuChoice::Search,
            other => MuChoice::Fixed(other.parse().map_err(|e| {
                Error::config(format!("bad value for mu = '{other}': {e}"))
            })?),
        };
        let mu_fixed = match mu {
            MuChoice::Fixed(m) => m,
            MuChoice::Search => MU_GRID[0],
        };
        let train = TrainConfig {
            lr: flat.get_f64("lr")?,
            batch_size: flat.get_usize("batch_size")?,
            epochs: flat.get_usize("epochs")?,
            seed: flat.get_u64("seed")?,
            mu: mu_fixed,
            horizon: flat.get_usize("horizon")?,
            latent_dim: flat.get_usize("d")?,
            inr_layers: flat.get_usize("k")?,
            agg_layers: flat.get_usize("n")?,
            n_heads: flat.get_usize("heads")?,
            n_scales: flat.get_usize("scales")?,
            patch_len: flat.get_usize("patch")?,
            lambda: flat.get_f64("lambda")?,
            smooth_l1_beta: flat.get_f64("beta")?,
            patience: flat.get_usize("patience")?,
            clip_norm: flat.get_f64("clip_norm")?,
            variant: Variant::parse(flat.get("variant"))?,
        };
        train.validate()?;
        let checkpoint = match flat.get("checkpoint") {
            "" => None,
            path => Some(path.to_string()),
        };
        Ok(ExperimentConfig {
            dataset,
            dataset_name,
            split,
            mu,
            train,
            eval_raw_space: flat.get_bool("eval_raw_space")?,
            fixed_runtime: flat.get_bool("fixed_runtime")?,
            synth_len: flat.get_usize("synth_len")?,
            synth_channels: flat.get_usize("synth_channels")?,
            checkpoint,
            flat,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn defaults_resolve() {
        let cfg = ExperimentConfig::resolve(FlatConfig::defaults()).unwrap();
        assert_eq!(cfg.train.seed, 2024);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.dataset_name, "sinusoid");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = FlatConfig::defaults();
        assert!(cfg.set("not_a_key", "1").is_err());
    }

    #[test]
    fn file_and_overrides_merge_in_order() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "# comment\n[model]\nd = 32\nhorizon = 24  # trailing").unwrap();
        f.flush().unwrap();
        let cfg = FlatConfig::merged(
            Some(f.path()),
            &[("d".to_string(), "16".to_string())],
        )
        .unwrap();
        assert_eq!(cfg.get("d"), "16");
        assert_eq!(cfg.get("horizon"), "24");
    }

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = FlatConfig::defaults();
        cfg.set("epochs", "3").unwrap();
        let snap = cfg.snapshot();
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(snap.as_bytes()).unwrap();
        f.flush().unwrap();
        let reloaded = FlatConfig::merged(Some(f.path()), &[]).unwrap();
        assert_eq!(reloaded.snapshot(), snap);
    }

    #[test]
    fn mu_search_parses() {
        let mut flat = FlatConfig::defaults();
        flat.set("mu", "search").unwrap();
        let cfg = ExperimentConfig::resolve(flat).unwrap();
        assert_eq!(cfg.mu, MuChoice::Search);
    }
}
