//! Flat key-value run configuration.
//!
//! A config file is TOML whose keys are the dotted names in [`KEYS`]. They may
//! be written either as quoted dotted keys (`"site.m" = 2`), bare dotted keys
//! (`site.m = 2`) or tables (`[site]` then `m = 2`); all three flatten to the
//! same name. The literal path `default` selects the built-in defaults.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use r2g2::harness::experiments::ExperimentConfig;
use r2g2::harness::DatasetKind;
use r2g2::{CgConfig, EstimatorKind};
use toml::{Table, Value};

use crate::CliError;

/// Every accepted key with its default and meaning, as shown by `--help`.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("estimator", "\"rt\",\"r2g2\"", "estimator name or list: score, rt, lrt, r2g2"),
    ("seeds", "[0,1,2,3,4]", "master seeds (integer or list)"),
    ("steps", "2000", "optimiser steps per training run"),
    ("lr", "0.001", "Adam learning rate"),
    ("model.widths", "[2,16,2]", "layer widths, input first"),
    ("site.m", "2", "rows of the downstream map W at a variance-study or verify site"),
    ("site.n", "8", "latent dimension of that site"),
    ("site.layout", "\"layer\"", "\"layer\" (block-diagonal W = I_m (x) x^T) or \"dense\""),
    ("cg.tol", "1e-10", "conjugate-gradient relative residual tolerance"),
    ("cg.max_iters", "rows+5 / 100", "CG iteration cap (suites / experiments)"),
    ("dataset.kind", "\"blobs\"", "blobs, xor_rings or linreg"),
    ("dataset.n", "200", "number of synthetic examples"),
    ("batch", "8", "minibatch size"),
    ("replicates", "32", "noise replicates per logged gradient variance"),
    ("eval_samples", "8", "noise draws per full-data ELBO estimate"),
    ("epochs", "10", "variance-study epochs"),
    ("steps_per_epoch", "20", "optimiser steps between variance-study epochs"),
    ("samples", "100000", "paired draws for the unbiasedness suite"),
    ("out.dir", "\"r2g2-out\"", "directory for CSVs and reports"),
    ("out.wall_clock", "false", "record elapsed milliseconds in wall_ms"),
];

pub fn keys_help() -> String {
    let mut out = String::from("Config keys (flat TOML; `--config default` uses these defaults):\n");
    for (key, default, doc) in KEYS {
        let _ = writeln!(out, "  {key:<16} {default:<16} {doc}");
    }
    out.push_str("\nExit codes: 0 ok, 1 check failed, 2 usage, 3 config, 4 numeric failure.");
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub experiment: ExperimentConfig,
    /// Explicit `cg.max_iters`; when absent the suites use their own default.
    pub cg_max_iters: Option<usize>,
    pub samples: usize,
    pub out_dir: PathBuf,
    /// Whether `estimator` was given; `variance` then runs all four otherwise.
    pub estimator_set: bool,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            experiment: ExperimentConfig::default(),
            cg_max_iters: None,
            samples: 100_000,
            out_dir: PathBuf::from("r2g2-out"),
            estimator_set: false,
        }
    }
}

impl Settings {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        if path.as_os_str() == "default" {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config file {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        let mut flat = Vec::new();
        flatten("", &table, &mut flat);
        let mut s = Self::default();
        for (key, value) in &flat {
            s.apply(key, value)?;
        }
        Ok(s)
    }

    fn apply(&mut self, key: &str, v: &Value) -> Result<(), CliError> {
        let e = &mut self.experiment;
        match key {
            "estimator" => {
                e.estimators = strings(key, v)?
                    .iter()
                    .map(|s| s.parse::<EstimatorKind>().map_err(config))
                    .collect::<Result<_, _>>()?;
                self.estimator_set = true;
            }
            "seeds" => e.seeds = list(key, v, |x| uint(key, x))?,
            "steps" => e.steps = uint(key, v)? as usize,
            "lr" => e.lr = float(key, v)?,
            "model.widths" => e.widths = list(key, v, |x| uint(key, x).map(|u| u as usize))?,
            "site.m" => e.site_m = uint(key, v)? as usize,
            "site.n" => e.site_n = uint(key, v)? as usize,
            "site.layout" => {
                e.site_layer = match string(key, v)? {
                    "layer" => true,
                    "dense" => false,
                    other => return Err(CliError::Config(format!("site.layout must be \"layer\" or \"dense\", got \"{other}\""))),
                }
            }
            "cg.tol" => e.cg_tol = float(key, v)?,
            "cg.max_iters" => {
                let n = uint(key, v)? as usize;
                self.cg_max_iters = Some(n);
                e.cg_max_iters = Some(n);
            }
            "dataset.kind" => e.dataset = string(key, v)?.parse::<DatasetKind>().map_err(config)?,
            "dataset.n" => e.dataset_n = uint(key, v)? as usize,
            "batch" => e.batch = uint(key, v)? as usize,
            "replicates" => e.replicates = uint(key, v)? as usize,
            "eval_samples" => e.eval_samples = uint(key, v)? as usize,
            "epochs" => e.epochs = uint(key, v)? as usize,
            "steps_per_epoch" => e.steps_per_epoch = uint(key, v)? as usize,
            "samples" => self.samples = uint(key, v)? as usize,
            "out.dir" => self.out_dir = PathBuf::from(string(key, v)?),
            "out.wall_clock" => {
                e.wall_clock = v
                    .as_bool()
                    .ok_or_else(|| CliError::Config(format!("{key} must be a boolean")))?
            }
            other => return Err(CliError::Config(format!("unknown key `{other}` (see --help for the key list)"))),
        }
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.experiment.seeds = vec![seed];
    }

    pub fn set_estimator(&mut self, k: EstimatorKind) {
        self.experiment.estimators = vec![k];
        self.estimator_set = true;
    }

    /// CG settings for the verification suites: the tolerance from the config
    /// and, unless overridden, the operation's own `rows + 5` cap.
    pub fn suite_cg(&self) -> CgConfig {
        CgConfig {
            max_iters: self.cg_max_iters,
            ..CgConfig::with_tol(self.experiment.cg_tol)
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.experiment.validate().map_err(config)?;
        if self.samples < 2 {
            return Err(CliError::Config("samples must be at least 2".into()));
        }
        Ok(())
    }
}

fn config(e: r2g2::Error) -> CliError {
    CliError::Config(e.to_string())
}

fn flatten(prefix: &str, table: &Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

fn uint(key: &str, v: &Value) -> Result<u64, CliError> {
    v.as_integer()
        .and_then(|i| u64::try_from(i).ok())
        .ok_or_else(|| CliError::Config(format!("{key} must be a non-negative integer, got {v}")))
}

fn float(key: &str, v: &Value) -> Result<f64, CliError> {
    v.as_float()
        .or_else(|| v.as_integer().map(|i| i as f64))
        .ok_or_else(|| CliError::Config(format!("{key} must be a number, got {v}")))
}

fn string<'a>(key: &str, v: &'a Value) -> Result<&'a str, CliError> {
    v.as_str().ok_or_else(|| CliError::Config(format!("{key} must be a string, got {v}")))
}

fn strings(key: &str, v: &Value) -> Result<Vec<String>, CliError> {
    list(key, v, |x| string(key, x).map(str::to_owned))
}

/// A scalar or an array of scalars.
fn list<T>(key: &str, v: &Value, item: impl Fn(&Value) -> Result<T, CliError>) -> Result<Vec<T>, CliError> {
    let out: Vec<T> = match v {
        Value::Array(xs) => xs.iter().map(&item).collect::<Result<_, _>>()?,
        other => vec![item(other)?],
    };
    if out.is_empty() {
        return Err(CliError::Config(format!("{key} must not be empty")));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_and_dotted_forms_agree() {
        let a = Settings::parse("\"site.m\" = 3\n\"site.n\" = 9\nseeds = 7\n").unwrap();
        let b = Settings::parse("seeds = [7]\n[site]\nm = 3\nn = 9\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.experiment.site_m, 3);
        assert_eq!(a.experiment.seeds, vec![7]);
    }

    #[test]
    fn every_documented_key_is_accepted() {
        let text = r#"
            estimator = ["lrt", "R2-G2"]
            seeds = [1, 2]
            steps = 10
            lr = 0.01
            model.widths = [2, 4, 2]
            site.m = 2
            site.n = 6
            site.layout = "dense"
            cg.tol = 1e-9
            cg.max_iters = 40
            dataset.kind = "xor_rings"
            dataset.n = 50
            batch = 5
            replicates = 4
            eval_samples = 2
            epochs = 3
            steps_per_epoch = 2
            samples = 1000
            out.dir = "elsewhere"
            out.wall_clock = true
        "#;
        let s = Settings::parse(text).unwrap();
        let touched: usize = text.lines().filter(|l| l.contains('=')).count();
        assert_eq!(touched, KEYS.len());
        assert_eq!(s.experiment.estimators, [EstimatorKind::Lrt, EstimatorKind::R2g2]);
        assert!(!s.experiment.site_layer);
        assert_eq!(s.cg_max_iters, Some(40));
        assert_eq!(s.experiment.dataset, DatasetKind::XorRings);
        assert_eq!(s.out_dir, PathBuf::from("elsewhere"));
        assert!(s.experiment.wall_clock);
        s.validate().unwrap();
    }

    #[test]
    fn unknown_and_mistyped_keys_are_config_errors() {
        for bad in ["stepz = 3", "steps = \"many\"", "seeds = []", "estimator = \"vi\"", "site.layout = \"x\""] {
            assert!(matches!(Settings::parse(bad), Err(CliError::Config(_))), "{bad}");
        }
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = Settings::load(Path::new("/nonexistent/run.toml")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/run.toml"));
    }

    #[test]
    fn help_lists_every_key() {
        let help = keys_help();
        assert!(KEYS.iter().all(|(k, _, _)| help.contains(k)));
    }
}
