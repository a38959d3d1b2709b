//! Training configuration and its `key = value` file format.

use std::fmt::Write as _;
use std::path::Path;

use crate::align::DEFAULT_ALIGN_WEIGHT;
use crate::error::{Error, Result};
use crate::model::{alignment_layer, ModelConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub align_weight: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub align_enabled: bool,
    /// Write a snapshot every this many steps; 0 disables snapshots.
    pub checkpoint_every: usize,
    /// Record elapsed milliseconds in the log. Off by default so that logs
    /// are byte-reproducible.
    pub log_wall_clock: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            align_weight: DEFAULT_ALIGN_WEIGHT,
            batch_size: 16,
            total_steps: 3000,
            warmup_steps: 300,
            peak_lr: 1e-3,
            final_lr: 5e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            align_enabled: true,
            checkpoint_every: 0,
            log_wall_clock: false,
            model: ModelConfig::default(),
        }
    }
}

fn bad(line: usize, detail: impl Into<String>) -> Error {
    Error::Config {
        line,
        detail: detail.into(),
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| bad(line, format!("`{key}` has an unparsable value `{value}`")))
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(line, format!("`{key}` expects true or false, got `{value}`"))),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let problems = [
            (self.warmup_steps >= self.total_steps, "warmup_steps must be below total_steps"),
            (
                !(self.peak_lr > self.final_lr && self.final_lr > 0.0),
                "learning rates must satisfy peak_lr > final_lr > 0",
            ),
            (self.batch_size == 0, "batch_size must be positive"),
            (!(self.align_weight >= 0.0), "align_weight must be nonnegative"),
            (!(self.weight_decay >= 0.0), "weight_decay must be nonnegative"),
            (
                !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)),
                "betas must lie in [0, 1)",
            ),
            (!(self.adam_eps > 0.0), "adam_eps must be positive"),
        ];
        for (broken, msg) in problems {
            if broken {
                return Err(Error::usage(format!("invalid training config: {msg}")));
            }
        }
        self.model.validate()
    }

    /// Parses UTF-8 `key = value` lines over the defaults. Blank lines and
    /// lines starting with `#` are skipped; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut align_layer_set = false;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .ok_or_else(|| bad(line, format!("expected `key = value`, got `{trimmed}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let m = &mut cfg.model;
            match key {
                "align_weight" | "lambda" => cfg.align_weight = parse_num(line, key, value)?,
                "batch_size" => cfg.batch_size = parse_num(line, key, value)?,
                "total_steps" => cfg.total_steps = parse_num(line, key, value)?,
                "warmup_steps" => cfg.warmup_steps = parse_num(line, key, value)?,
                "peak_lr" => cfg.peak_lr = parse_num(line, key, value)?,
                "final_lr" => cfg.final_lr = parse_num(line, key, value)?,
                "weight_decay" => cfg.weight_decay = parse_num(line, key, value)?,
                "beta1" => cfg.beta1 = parse_num(line, key, value)?,
                "beta2" => cfg.beta2 = parse_num(line, key, value)?,
                "adam_eps" => cfg.adam_eps = parse_num(line, key, value)?,
                "seed" => cfg.seed = parse_num(line, key, value)?,
                "align_enabled" => cfg.align_enabled = parse_bool(line, key, value)?,
                "checkpoint_every" => cfg.checkpoint_every = parse_num(line, key, value)?,
                "log_wall_clock" => cfg.log_wall_clock = parse_bool(line, key, value)?,
                "width" => m.width = parse_num(line, key, value)?,
                "heads" => m.heads = parse_num(line, key, value)?,
                "layers" => m.layers = parse_num(line, key, value)?,
                "align_layer" => {
                    m.align_layer = parse_num(line, key, value)?;
                    align_layer_set = true;
                }
                "mlp_hidden" => m.mlp_hidden = parse_num(line, key, value)?,
                "horizon" => m.horizon = parse_num(line, key, value)?,
                "action_width" => m.action_width = parse_num(line, key, value)?,
                "action_heads" => m.action_heads = parse_num(line, key, value)?,
                "action_layers" => m.action_layers = parse_num(line, key, value)?,
                "action_mlp_hidden" => m.action_mlp_hidden = parse_num(line, key, value)?,
                "denoise_steps" => m.denoise_steps = parse_num(line, key, value)?,
                "projection_hidden" => m.projection_hidden = parse_num(line, key, value)?,
                "state_bins" => m.state_bins = parse_num(line, key, value)?,
                _ => return Err(bad(line, format!("unknown key `{key}`"))),
            }
        }
        if !align_layer_set {
            cfg.model.align_layer = alignment_layer(cfg.model.layers);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Renders every key; `parse(render())` reproduces the config.
    pub fn render(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let entries: [(&str, String); 27] = [
            ("align_weight", self.align_weight.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("peak_lr", self.peak_lr.to_string()),
            ("final_lr", self.final_lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("seed", self.seed.to_string()),
            ("align_enabled", self.align_enabled.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("log_wall_clock", self.log_wall_clock.to_string()),
            ("width", m.width.to_string()),
            ("heads", m.heads.to_string()),
            ("layers", m.layers.to_string()),
            ("align_layer", m.align_layer.to_string()),
            ("mlp_hidden", m.mlp_hidden.to_string()),
            ("horizon", m.horizon.to_string()),
            ("action_width", m.action_width.to_string()),
            ("action_heads", m.action_heads.to_string()),
            ("action_layers", m.action_layers.to_string()),
            ("action_mlp_hidden", m.action_mlp_hidden.to_string()),
            ("denoise_steps", m.denoise_steps.to_string()),
            ("projection_hidden", m.projection_hidden.to_string()),
            ("state_bins", m.state_bins.to_string()),
        ];
        for (k, v) in entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
