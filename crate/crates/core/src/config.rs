//! Run configuration: one flat `key = value` file (same surface syntax as the
//! scenario format) covering data paths, model size, loss weights, optimizer
//! settings, and attack knobs. Every run serializes its fully resolved config
//! back out so results are reproducible from the artifact alone.

use crate::losses::{LossWeights, PenaltyContext};
use crate::model::ModelConfig;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("config field '{field}': {msg}")]
    Invalid { field: &'static str, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scenario_dir: PathBuf,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Seeds evaluated (and aggregated mean ± std) by eval/attack commands.
    pub eval_seeds: Vec<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub val_fraction: f64,
    pub weights: LossWeights,
    pub dt: f64,
    pub eps_v: f64,
    pub v_lb: f64,
    /// Ablation: replace the sampled shared embedding with zeros.
    pub zero_shared: bool,
    pub cruise_speed: f64,
    pub attack_eps: f64,
    pub dot_steps: usize,
    pub dot_lr: f64,
    pub enc_hidden: usize,
    pub seg_hidden: usize,
    pub hidden_dim: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let m = ModelConfig::default();
        Self {
            scenario_dir: PathBuf::from("scenarios"),
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            seed: 0,
            eval_seeds: vec![0],
            epochs: 2,
            batch_size: 8,
            lr: 1e-3,
            val_fraction: 0.0,
            weights: w,
            dt: 0.5,
            eps_v: 0.5,
            v_lb: 2.0,
            zero_shared: false,
            cruise_speed: 6.0,
            attack_eps: 0.01,
            dot_steps: 5,
            dot_lr: 0.05,
            enc_hidden: m.enc_hidden,
            seg_hidden: m.seg_hidden,
            hidden_dim: m.hidden_dim,
        }
    }
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            enc_hidden: self.enc_hidden,
            seg_hidden: self.seg_hidden,
            hidden_dim: self.hidden_dim,
            ..ModelConfig::default()
        }
    }

    pub fn penalty_context(&self) -> PenaltyContext {
        PenaltyContext {
            dt: self.dt,
            eps_v: self.eps_v,
            v_lb: self.v_lb,
            ..PenaltyContext::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let check = |ok: bool, field: &'static str, msg: String| {
            if ok {
                Ok(())
            } else {
                Err(ConfigError::Invalid { field, msg })
            }
        };
        check(
            self.dt > 0.0,
            "dt",
            format!("must be positive, got {}", self.dt),
        )?;
        check(self.epochs > 0, "epochs", "must be at least 1".to_string())?;
        check(
            self.batch_size >= 2,
            "batch_size",
            format!("must be at least 2, got {}", self.batch_size),
        )?;
        check(
            self.lr > 0.0 && self.lr.is_finite(),
            "lr",
            format!("must be positive and finite, got {}", self.lr),
        )?;
        check(
            (0.0..1.0).contains(&self.val_fraction),
            "val_fraction",
            format!("must lie in [0,1), got {}", self.val_fraction),
        )?;
        check(
            !self.eval_seeds.is_empty(),
            "eval_seeds",
            "must list at least one seed".to_string(),
        )?;
        check(
            self.attack_eps >= 0.0,
            "attack_eps",
            format!("must be non-negative, got {}", self.attack_eps),
        )?;
        check(
            self.eps_v >= 0.0,
            "eps_v",
            "must be non-negative".to_string(),
        )?;
        check(self.v_lb >= 0.0, "v_lb", "must be non-negative".to_string())?;
        check(
            self.enc_hidden > 0 && self.seg_hidden > 0 && self.hidden_dim > 0,
            "enc_hidden",
            "model widths must be positive".to_string(),
        )?;
        for (field, v) in [
            ("eta_front", self.weights.eta_front),
            ("eta_td", self.weights.eta_td),
            ("eta_light", self.weights.eta_light),
            ("eta_stop", self.weights.eta_stop),
            ("eta_align", self.weights.eta_align),
            ("lambda_red", self.weights.lambda_red),
            ("lambda_stop", self.weights.lambda_stop),
            ("lambda_speed", self.weights.lambda_speed),
            ("align_margin", self.weights.align_margin),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ConfigError::Invalid {
                    field,
                    msg: format!("must be non-negative and finite, got {v}"),
                });
            }
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        let bad = |msg: String| ConfigError::Parse { line, msg };
        let f = |v: &str| -> Result<f64, ConfigError> {
            v.parse()
                .map_err(|_| bad(format!("expected a number, got '{v}'")))
        };
        let u = |v: &str| -> Result<u64, ConfigError> {
            v.parse()
                .map_err(|_| bad(format!("expected an integer, got '{v}'")))
        };
        match key {
            "scenario_dir" => self.scenario_dir = PathBuf::from(value),
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "seed" => self.seed = u(value)?,
            "eval_seeds" => {
                let mut seeds = Vec::new();
                for part in value.split(',') {
                    seeds.push(u(part.trim())?);
                }
                self.eval_seeds = seeds;
            }
            "epochs" => self.epochs = u(value)? as usize,
            "batch_size" => self.batch_size = u(value)? as usize,
            "lr" => self.lr = f(value)?,
            "val_fraction" => self.val_fraction = f(value)?,
            "eta_front" => self.weights.eta_front = f(value)?,
            "eta_td" => self.weights.eta_td = f(value)?,
            "eta_light" => self.weights.eta_light = f(value)?,
            "eta_stop" => self.weights.eta_stop = f(value)?,
            "eta_align" => self.weights.eta_align = f(value)?,
            "lambda_red" => self.weights.lambda_red = f(value)?,
            "lambda_stop" => self.weights.lambda_stop = f(value)?,
            "lambda_speed" => self.weights.lambda_speed = f(value)?,
            "align_margin" => self.weights.align_margin = f(value)?,
            "dt" => self.dt = f(value)?,
            "eps_v" => self.eps_v = f(value)?,
            "v_lb" => self.v_lb = f(value)?,
            "zero_shared" => {
                self.zero_shared = match value {
                    "true" => true,
                    "false" => false,
                    other => return Err(bad(format!("expected true/false, got '{other}'"))),
                }
            }
            "cruise_speed" => self.cruise_speed = f(value)?,
            "attack_eps" => self.attack_eps = f(value)?,
            "dot_steps" => self.dot_steps = u(value)? as usize,
            "dot_lr" => self.dot_lr = f(value)?,
            "enc_hidden" => self.enc_hidden = u(value)? as usize,
            "seg_hidden" => self.seg_hidden = u(value)? as usize,
            "hidden_dim" => self.hidden_dim = u(value)? as usize,
            other => return Err(bad(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or(ConfigError::Parse {
                line,
                msg: format!("expected 'key = value', got '{trimmed}'"),
            })?;
            cfg.set(key.trim(), value.trim(), line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Deterministic serialization of the fully resolved config; parsing the
    /// output reproduces `self` exactly.
    pub fn serialize(&self) -> String {
        let seeds = self
            .eval_seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        push("scenario_dir", self.scenario_dir.display().to_string());
        push("data_dir", self.data_dir.display().to_string());
        push("out_dir", self.out_dir.display().to_string());
        push("seed", self.seed.to_string());
        push("eval_seeds", seeds);
        push("epochs", self.epochs.to_string());
        push("batch_size", self.batch_size.to_string());
        push("lr", format!("{:e}", self.lr));
        push("val_fraction", self.val_fraction.to_string());
        push("eta_front", self.weights.eta_front.to_string());
        push("eta_td", self.weights.eta_td.to_string());
        push("eta_light", self.weights.eta_light.to_string());
        push("eta_stop", self.weights.eta_stop.to_string());
        push("eta_align", self.weights.eta_align.to_string());
        push("lambda_red", self.weights.lambda_red.to_string());
        push("lambda_stop", self.weights.lambda_stop.to_string());
        push("lambda_speed", self.weights.lambda_speed.to_string());
        push("align_margin", self.weights.align_margin.to_string());
        push("dt", self.dt.to_string());
        push("eps_v", self.eps_v.to_string());
        push("v_lb", self.v_lb.to_string());
        push("zero_shared", self.zero_shared.to_string());
        push("cruise_speed", self.cruise_speed.to_string());
        push("attack_eps", self.attack_eps.to_string());
        push("dot_steps", self.dot_steps.to_string());
        push("dot_lr", self.dot_lr.to_string());
        push("enc_hidden", self.enc_hidden.to_string());
        push("seg_hidden", self.seg_hidden.to_string());
        push("hidden_dim", self.hidden_dim.to_string());
        out
    }
}
