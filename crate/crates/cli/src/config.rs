//! Flat `key = value` run configuration with `#` comments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lti_mogp::synthetic::SimConfig;
use lti_mogp::{CovariateBasis, Hyperparams, ModelConfig, OptimizerConfig};

use crate::error::CliError;

pub const KEYS: &[&str] = &[
    // simulation
    "n_patients",
    "obs_count_mean",
    "obs_process_rate",
    "rbf_lengthscale",
    "rbf_variance",
    "noise_std",
    "grid_step",
    // optimisation
    "seed",
    "learning_rate",
    "local_learning_rate",
    "max_global_iters",
    "max_local_iters",
    "local_rel_tol",
    "global_rel_tol",
    "minibatch_size",
    "adagrad_epsilon",
    "init_log_rate",
    // model
    "lambda_psi",
    "lambda_mix",
    "basis",
    "jitter",
    "n_inducing",
    // evaluation
    "train_fraction",
    "horizons",
    "bootstrap_resamples",
    "bootstrap_size",
    "decompose_step",
    // gradcheck
    "gradcheck_instances",
    "gradcheck_step",
    // paths
    "observations",
    "treatments",
    "covariates",
    "params",
    "init_params",
    "ground_truth",
];

#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    /// Directory of the config file; relative paths resolve against it.
    base: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| CliError::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.base = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if !KEYS.contains(&key) {
            return Err(CliError::Config(format!("unknown key `{key}`")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// `key=value` from the command line.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("`--set {pair}`: expected key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str, CliError> {
        self.raw(key).ok_or_else(|| CliError::MissingKey(key.to_string()))
    }

    pub fn get<V: FromStr>(&self, key: &str) -> Result<Option<V>, CliError> {
        self.raw(key)
            .map(|s| {
                s.parse()
                    .map_err(|_| CliError::Config(format!("`{key}`: cannot parse `{s}`")))
            })
            .transpose()
    }

    pub fn get_or<V: FromStr>(&self, key: &str, default: V) -> Result<V, CliError> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.raw(key).map(|s| match &self.base {
            Some(b) if Path::new(s).is_relative() => b.join(s),
            _ => PathBuf::from(s),
        })
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf, CliError> {
        self.require(key)?;
        Ok(self.path(key).unwrap_or_default())
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.get_or("seed", 0)
    }

    pub fn sim(&self) -> Result<SimConfig, CliError> {
        let d = SimConfig::default();
        Ok(SimConfig {
            n_patients: self.get_or("n_patients", d.n_patients)?,
            obs_count_mean: self.get_or("obs_count_mean", d.obs_count_mean)?,
            obs_process_rate: self.get_or("obs_process_rate", d.obs_process_rate)?,
            rbf_lengthscale: self.get_or("rbf_lengthscale", d.rbf_lengthscale)?,
            rbf_variance: self.get_or("rbf_variance", d.rbf_variance)?,
            noise_std: self.get_or("noise_std", d.noise_std)?,
            grid_step: self.get_or("grid_step", d.grid_step)?,
            seed: self.seed()?,
            ..d
        })
    }

    pub fn optimizer(&self) -> Result<OptimizerConfig, CliError> {
        let d = OptimizerConfig::default();
        Ok(OptimizerConfig {
            learning_rate: self.get_or("learning_rate", d.learning_rate)?,
            local_learning_rate: self.get_or("local_learning_rate", d.local_learning_rate)?,
            max_global_iters: self.get_or("max_global_iters", d.max_global_iters)?,
            max_local_iters: self.get_or("max_local_iters", d.max_local_iters)?,
            local_rel_tol: self.get_or("local_rel_tol", d.local_rel_tol)?,
            global_rel_tol: self.get_or("global_rel_tol", d.global_rel_tol)?,
            minibatch_size: self.get_or("minibatch_size", d.minibatch_size)?,
            seed: self.seed()?,
            adagrad_epsilon: self.get_or("adagrad_epsilon", d.adagrad_epsilon)?,
            init_log_rate: self.get("init_log_rate")?,
        })
    }

    pub fn hyper(&self) -> Result<Hyperparams, CliError> {
        let d = Hyperparams::default();
        Ok(Hyperparams {
            lambda_psi: self.get_or("lambda_psi", d.lambda_psi)?,
            lambda_mix: self.get_or("lambda_mix", d.lambda_mix)?,
        })
    }

    pub fn model(&self) -> Result<ModelConfig, CliError> {
        let d = ModelConfig::default();
        let basis = match self.raw("basis") {
            None => d.basis,
            Some(s) => CovariateBasis::parse(s).ok_or_else(|| CliError::Config(format!("unknown basis `{s}`")))?,
        };
        Ok(ModelConfig {
            basis,
            jitter: self.get_or("jitter", d.jitter)?,
            n_inducing: self.get_or("n_inducing", d.n_inducing)?,
        })
    }

    pub fn horizons(&self) -> Result<Vec<f64>, CliError> {
        let s = self.raw("horizons").unwrap_or("1,2,3,4,5,6,7");
        s.split(',')
            .map(|h| {
                h.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| *v >= 0.0 && v.is_finite())
                    .ok_or_else(|| CliError::Config(format!("`horizons`: bad value `{h}`")))
            })
            .collect()
    }
}
