//! Plain-text `section.key = value` run configuration.

use crate::data::parse_kv;
use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

pub const SEED_ENV: &str = "CERTISMOOTH_SEED";

/// Every recognised key with its default value.
const DEFAULTS: &[(&str, &str)] = &[
    ("run.seed", "0"),
    ("run.output", "report.json"),
    ("runtime.workers", "1"),
    ("data.source", "gmm"),
    ("data.csv", ""),
    ("data.eval_per_class", "50"),
    ("data.train_per_class", "500"),
    ("world.file", ""),
    ("world.k", "4"),
    ("world.d", "64"),
    ("world.gamma", "0.08"),
    ("world.seed", "0"),
    ("schedule.kind", "cosine"),
    ("schedule.T", "1000"),
    ("smoothing.sigma", "0.25"),
    ("smoothing.n0", "100"),
    ("smoothing.n", "10000"),
    ("smoothing.alpha", "0.001"),
    ("smoothing.batch", "1000"),
    ("smoothing.n_predict", "100"),
    ("certify.epsilons", "0,0.25,0.5,0.75,1.0,1.25"),
    ("attack.epsilons", "0.5,1.0"),
    ("attack.steps", "100"),
    ("attack.m_test", "32"),
    ("attack.certify", "false"),
    ("denoiser.kind", "analytic"),
    ("denoiser.checkpoint", ""),
    ("denoiser.k", "1.8"),
    ("denoiser.cond", "empty"),
    ("classifier.kind", "bayes"),
    ("classifier.checkpoint", ""),
    ("classifier.hidden", "64"),
    ("classifier.steps", "2000"),
    ("classifier.lr", "0.05"),
    ("classifier.batch", "32"),
    ("adapt.lambda", "0.01"),
    ("adapt.steps", "500"),
    ("adapt.lr_denoiser", "0.01"),
    ("adapt.lr_classifier", "0.01"),
    ("adapt.momentum", "0.9"),
    ("adapt.batch", "32"),
    ("adapt.mode", "staged"),
    ("adapt.shots", "1"),
    ("adapt.output_denoiser", ""),
    ("adapt.output_classifier", ""),
    ("adapt.log", ""),
    ("ablate.k", "0.5,1.0,1.8"),
    ("pretrain.steps", "10000"),
    ("pretrain.lr", "0.005"),
    ("pretrain.momentum", "0.9"),
    ("pretrain.batch", "32"),
    ("pretrain.hidden", "256"),
    ("pretrain.depth", "2"),
    ("pretrain.token_dim", "8"),
    ("pretrain.empty_prob", "0.5"),
    ("pretrain.world_seed", ""),
    ("pretrain.output", "denoiser.ckpt"),
    ("pretrain.log", ""),
    ("recompute.input", ""),
];

/// Keys that never change results and are left out of report echoes.
const NOT_ECHOED: &[&str] = &["run.output", "runtime.workers"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }
}

impl RunConfig {
    /// Defaults overlaid with the file at `path` (if any), then the
    /// `--section.key=value` overrides, then `CERTISMOOTH_SEED`.
    pub fn load(path: Option<&Path>, overrides: &[String], env_seed: Option<String>) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            let map = parse_kv(&text).map_err(|e| Error::Config(e.to_string()))?;
            for (k, v) in map {
                cfg.set(&k, &v)?;
            }
        }
        cfg.apply_overrides(overrides)?;
        if let Some(seed) = env_seed {
            cfg.set("run.seed", seed.trim())?;
        }
        cfg.get::<u64>("run.seed")?;
        Ok(cfg)
    }

    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        let mut iter = overrides.iter();
        while let Some(arg) = iter.next() {
            let body = arg
                .strip_prefix("--")
                .ok_or_else(|| Error::Config(format!("expected --section.key=value, got '{arg}'")))?;
            match body.split_once('=') {
                Some((k, v)) => self.set(k, v)?,
                None => {
                    let v = iter.next().ok_or_else(|| Error::Config(format!("flag --{body} needs a value")))?;
                    self.set(body, v)?;
                }
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown config key '{key}'"))),
        }
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("contract violation: no config key {key}"))
    }

    /// Empty values read as `None`.
    pub fn path(&self, key: &str) -> Option<&Path> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| Path::new(v))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key);
        v.parse().map_err(|_| Error::Config(format!("cannot parse {key} = '{v}'")))
    }

    pub fn list(&self, key: &str) -> Result<Vec<f64>> {
        self.raw(key)
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse::<f64>().map_err(|_| Error::Config(format!("cannot parse {key} entry '{s}'"))))
            .collect()
    }

    pub fn seed(&self) -> u64 {
        self.get("run.seed").expect("seed validated at load")
    }

    /// The keys that determine results, in sorted order.
    pub fn echo(&self) -> BTreeMap<String, String> {
        self.values.iter().filter(|(k, _)| !NOT_ECHOED.contains(&k.as_str())).map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    /// Rebuilds a configuration from a report echo.
    pub fn from_echo(echo: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in echo {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}
