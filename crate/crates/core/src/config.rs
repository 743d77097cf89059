//! Run configuration for the `srn` binary.
//!
//! Values come from three layers, highest priority first: command-line
//! flags, a TOML config file, built-in defaults. Every layer uses the same
//! flat keys as the flags (see FORMATS.md).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SrnError};
use crate::regularizer::{DsThreshold, RegConfig};
use crate::tasks::{SplitSizes, TaskKind, TaskSpec, DEFAULT_TOLERANCE};
use crate::trainer::TrainConfig;

/// One layer of settings; unset fields fall through to the next layer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialConfig {
    pub task: Option<String>,
    #[serde(rename = "T")]
    pub t_len: Option<usize>,
    pub hidden: Option<usize>,
    pub sigma: Option<f64>,
    pub alpha: Option<f64>,
    pub mu: Option<f64>,
    pub batch: Option<usize>,
    pub epochs: Option<usize>,
    pub iters: Option<usize>,
    pub h: Option<usize>,
    pub reg: Option<String>,
    pub qmin: Option<f64>,
    pub qmax: Option<f64>,
    pub r0: Option<f64>,
    pub r0_mode: Option<String>,
    pub gate_rule: Option<String>,
    pub seeds: Option<Vec<u64>>,
    pub data_seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub train_size: Option<usize>,
    pub valid_size: Option<usize>,
    pub test_size: Option<usize>,
    pub max_rejects: Option<usize>,
    pub tolerance: Option<f64>,
    pub probes: Option<usize>,
    pub sigmas: Option<Vec<f64>>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($f:ident),* $(,)?) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl PartialConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| SrnError::Parse(format!("config file: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    /// Fields set in `top` replace those in `self`.
    pub fn overlay(mut self, top: &PartialConfig) -> Self {
        let dst = &mut self;
        overlay!(dst, top; task, t_len, hidden, sigma, alpha, mu, batch, epochs, iters, h, reg,
            qmin, qmax, r0, r0_mode, gate_rule, seeds, data_seed, out, train_size, valid_size,
            test_size, max_rejects, tolerance, probes, sigmas);
        self
    }

    /// Fills defaults and validates every field.
    pub fn resolve(&self) -> Result<RunConfig> {
        let kind: TaskKind = self.task.as_deref().unwrap_or("temporal_order").parse()?;
        let t_len = self.t_len.unwrap_or(100);
        let spec = TaskSpec::new(kind, t_len)?.with_tolerance(self.tolerance.unwrap_or(DEFAULT_TOLERANCE))?;

        let reg_enabled = match self.reg.as_deref().unwrap_or("on") {
            "on" => true,
            "off" => false,
            other => return Err(SrnError::config("reg", format!("expected on or off, got `{other}`"))),
        };
        let r0_value = self.r0.unwrap_or(0.5);
        let r0 = match self.r0_mode.as_deref().unwrap_or("relative") {
            "relative" => DsThreshold::Relative(r0_value),
            "absolute" => DsThreshold::Absolute(r0_value),
            other => {
                return Err(SrnError::config(
                    "r0_mode",
                    format!("expected relative or absolute, got `{other}`"),
                ))
            }
        };
        let reg = RegConfig {
            q_min: self.qmin.unwrap_or(-1.0),
            q_max: self.qmax.unwrap_or(1.0),
            r0,
            rule: self.gate_rule.as_deref().unwrap_or("literal").parse()?,
        };

        let defaults = TrainConfig::new(t_len);
        let train = TrainConfig {
            alpha: self.alpha.unwrap_or(defaults.alpha),
            mu: self.mu.unwrap_or(defaults.mu),
            batch_size: self.batch.unwrap_or(defaults.batch_size),
            epochs: self.epochs.unwrap_or(defaults.epochs),
            iters_per_epoch: self.iters.unwrap_or(defaults.iters_per_epoch),
            h: self.h.unwrap_or(t_len),
            n_hid: self.hidden.unwrap_or(defaults.n_hid),
            sigma: self.sigma.unwrap_or(defaults.sigma),
            reg_enabled,
            reg,
            seed: 0,
            max_consecutive_rejects: self.max_rejects.unwrap_or(defaults.max_consecutive_rejects),
        };
        train.validate(&spec)?;
        if train.iters_per_epoch == 0 {
            return Err(SrnError::config("iters", "must be at least 1"));
        }

        let sizes = SplitSizes {
            train: self.train_size.unwrap_or(20_000),
            valid: self.valid_size.unwrap_or(1_000),
            test: self.test_size.unwrap_or(10_000),
        };
        if sizes.train < train.batch_size {
            return Err(SrnError::config(
                "train_size",
                format!("must hold at least one minibatch of {}", train.batch_size),
            ));
        }

        let seeds = self.seeds.clone().unwrap_or_else(|| vec![0]);
        if seeds.is_empty() {
            return Err(SrnError::config("seeds", "need at least one seed"));
        }
        let probes = self.probes.unwrap_or(100);
        if probes == 0 {
            return Err(SrnError::config("probes", "must be at least 1"));
        }
        let sigmas = self.sigmas.clone().unwrap_or_else(|| vec![train.sigma]);
        if let Some(bad) = sigmas.iter().find(|s| s.is_nan() || **s <= 0.0) {
            return Err(SrnError::config("sigmas", format!("every sigma must be positive, got {bad}")));
        }

        Ok(RunConfig {
            spec,
            train,
            sizes,
            seeds,
            data_seed: self.data_seed.unwrap_or(0),
            out: self.out.clone().unwrap_or_else(|| PathBuf::from("runs")),
            probes,
            sigmas,
        })
    }
}

/// Fully resolved settings for one command.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub spec: TaskSpec,
    /// `seed` is overwritten per run from `seeds`.
    pub train: TrainConfig,
    pub sizes: SplitSizes,
    pub seeds: Vec<u64>,
    pub data_seed: u64,
    pub out: PathBuf,
    pub probes: usize,
    pub sigmas: Vec<f64>,
}
