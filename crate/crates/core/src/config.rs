//! Flat `key = value` run configuration.
//!
//! Every key has a default, so an empty file (or none) is a valid
//! configuration; parsing starts from the defaults and overrides key by
//! key. Unknown keys and unparsable values are rejected with the line
//! number. `to_text` emits every key in a stable order and round-trips
//! through `parse`.

use crate::world::GridDims;
use std::fmt;

// ── Errors ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    UnknownKey { line: usize, key: String },
    BadValue {
        line: usize,
        key: String,
        value: String,
        want: &'static str,
    },
    MissingEquals { line: usize, text: String },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::UnknownKey { line, key } => {
                write!(f, "line {line}: unknown config key '{key}'")
            }
            ConfigError::BadValue {
                line,
                key,
                value,
                want,
            } => write!(
                f,
                "line {line}: key '{key}' got '{value}', expected {want}"
            ),
            ConfigError::MissingEquals { line, text } => {
                write!(f, "line {line}: expected 'key = value', got '{text}'")
            }
        }
    }
}

impl std::error::Error for ConfigError {}

// ── Enumerated options ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// Activation scheme of the convolution stack. `Auto` resolves by world
/// depth: flat worlds (D = 1) use the relu + batchnorm variant, volumetric
/// worlds use tanh.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvModeOpt {
    Auto,
    Tanh,
    ReluBatchNorm,
}

/// Resolved activation scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvMode {
    Tanh3d,
    ReluBatchNorm,
}

// ── Model-shape configuration ───────────────────────────────────────────

/// The subset of configuration the model graph itself needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub dims: GridDims,
    pub num_blocks: usize,
    pub n_op: usize,
    pub d_op_vec: usize,
    pub d_e: usize,
    pub hidden: usize,
    pub conv_mode: ConvMode,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl ModelConfig {
    /// Kernel depths clamp to 1 on flat worlds; height/width extents are
    /// the fixed 5×5 then 3×3 of the two-layer stack.
    pub fn kernel1(&self) -> (usize, usize, usize) {
        (self.dims.d.min(4), 5, 5)
    }
    pub fn kernel2(&self) -> (usize, usize, usize) {
        (self.dims.d.min(4), 3, 3)
    }
}

// ── Full configuration ──────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    // run
    pub precision: Precision,
    pub seed: u64,
    // model
    pub world_d: usize,
    pub world_h: usize,
    pub world_w: usize,
    pub num_blocks: usize,
    pub n_op: usize,
    pub d_op_vec: usize,
    pub d_e: usize,
    pub hidden: usize,
    pub conv_mode: ConvModeOpt,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    // loss
    pub w_src: f64,
    pub w_xyz: f64,
    pub w_theta: f64,
    pub lambda_a: f64,
    pub lambda_op: f64,
    // optimizer
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Run validation every this many epochs.
    pub eval_every: usize,
    /// Early-stop thresholds checked at each evaluation; 0 disables one.
    pub early_stop_xyz: f64,
    pub early_stop_acc: f64,
    pub early_stop_theta: f64,
    // data generation
    pub scenes: usize,
    pub examples_per_scene: usize,
    pub blocks_per_scene: usize,
    pub offset_step: f64,
    pub offset_jitter: f64,
    pub yaw_jitter: f64,
    pub relations: Vec<String>,
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            precision: Precision::F32,
            seed: 42,
            world_d: 4,
            world_h: 16,
            world_w: 16,
            num_blocks: 8,
            n_op: 32,
            d_op_vec: 16,
            d_e: 32,
            hidden: 64,
            conv_mode: ConvModeOpt::Auto,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            w_src: 1.0,
            w_xyz: 1.0,
            w_theta: 1.0,
            lambda_a: 0.01,
            lambda_op: 0.01,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            max_steps: 3000,
            eval_every: 1,
            early_stop_xyz: 0.0,
            early_stop_acc: 0.0,
            early_stop_theta: 0.0,
            scenes: 100,
            examples_per_scene: 30,
            blocks_per_scene: 6,
            offset_step: 1.5,
            offset_jitter: 0.25,
            yaw_jitter: 0.0,
            relations: [
                "left",
                "right",
                "above-north",
                "below-south",
                "on-top",
                "mirror-across-axis",
                "rotate-45-clockwise",
                "k-lengths-offset",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            train_frac: 0.7,
            val_frac: 0.2,
        }
    }
}

macro_rules! parse_num {
    ($self:ident, $field:ident, $value:expr, $line:expr, $key:expr, $want:expr) => {
        $self.$field = $value.parse().map_err(|_| ConfigError::BadValue {
            line: $line,
            key: $key.to_string(),
            value: $value.to_string(),
            want: $want,
        })?
    };
}

impl Config {
    /// Parse a full config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.split('#').next().unwrap_or("").trim();
            if trimmed.is_empty() {
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(ConfigError::MissingEquals {
                    line,
                    text: trimmed.to_string(),
                });
            };
            cfg.apply(key.trim(), value.trim(), line)?;
        }
        Ok(cfg)
    }

    /// Apply one `key=value` override (CLI `--set`); line is reported as 0.
    pub fn set(&mut self, pair: &str) -> Result<(), ConfigError> {
        let Some((key, value)) = pair.split_once('=') else {
            return Err(ConfigError::MissingEquals {
                line: 0,
                text: pair.to_string(),
            });
        };
        self.apply(key.trim(), value.trim(), 0)
    }

    fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        match key {
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => {
                        return Err(ConfigError::BadValue {
                            line,
                            key: key.to_string(),
                            value: value.to_string(),
                            want: "f32 or f64",
                        })
                    }
                }
            }
            "seed" => parse_num!(self, seed, value, line, key, "an unsigned integer"),
            "world_d" => parse_num!(self, world_d, value, line, key, "a positive integer"),
            "world_h" => parse_num!(self, world_h, value, line, key, "a positive integer"),
            "world_w" => parse_num!(self, world_w, value, line, key, "a positive integer"),
            "num_blocks" => parse_num!(self, num_blocks, value, line, key, "a positive integer"),
            "n_op" => parse_num!(self, n_op, value, line, key, "a positive integer"),
            "d_op_vec" => parse_num!(self, d_op_vec, value, line, key, "a positive integer"),
            "d_e" => parse_num!(self, d_e, value, line, key, "a positive integer"),
            "hidden" => parse_num!(self, hidden, value, line, key, "a positive integer"),
            "conv_mode" => {
                self.conv_mode = match value {
                    "auto" => ConvModeOpt::Auto,
                    "tanh" => ConvModeOpt::Tanh,
                    "relu-batchnorm" => ConvModeOpt::ReluBatchNorm,
                    _ => {
                        return Err(ConfigError::BadValue {
                            line,
                            key: key.to_string(),
                            value: value.to_string(),
                            want: "auto, tanh, or relu-batchnorm",
                        })
                    }
                }
            }
            "bn_momentum" => parse_num!(self, bn_momentum, value, line, key, "a real number"),
            "bn_eps" => parse_num!(self, bn_eps, value, line, key, "a real number"),
            "w_src" => parse_num!(self, w_src, value, line, key, "a real number"),
            "w_xyz" => parse_num!(self, w_xyz, value, line, key, "a real number"),
            "w_theta" => parse_num!(self, w_theta, value, line, key, "a real number"),
            "lambda_a" => parse_num!(self, lambda_a, value, line, key, "a real number"),
            "lambda_op" => parse_num!(self, lambda_op, value, line, key, "a real number"),
            "lr" => parse_num!(self, lr, value, line, key, "a real number"),
            "beta1" => parse_num!(self, beta1, value, line, key, "a real number"),
            "beta2" => parse_num!(self, beta2, value, line, key, "a real number"),
            "adam_eps" => parse_num!(self, adam_eps, value, line, key, "a real number"),
            "batch_size" => parse_num!(self, batch_size, value, line, key, "a positive integer"),
            "max_steps" => parse_num!(self, max_steps, value, line, key, "a positive integer"),
            "eval_every" => parse_num!(self, eval_every, value, line, key, "a positive integer"),
            "early_stop_xyz" => {
                parse_num!(self, early_stop_xyz, value, line, key, "a real number")
            }
            "early_stop_acc" => {
                parse_num!(self, early_stop_acc, value, line, key, "a real number")
            }
            "early_stop_theta" => {
                parse_num!(self, early_stop_theta, value, line, key, "a real number")
            }
            "scenes" => parse_num!(self, scenes, value, line, key, "a positive integer"),
            "examples_per_scene" => {
                parse_num!(self, examples_per_scene, value, line, key, "a positive integer")
            }
            "blocks_per_scene" => {
                parse_num!(self, blocks_per_scene, value, line, key, "a positive integer")
            }
            "offset_step" => parse_num!(self, offset_step, value, line, key, "a real number"),
            "offset_jitter" => parse_num!(self, offset_jitter, value, line, key, "a real number"),
            "yaw_jitter" => parse_num!(self, yaw_jitter, value, line, key, "a real number"),
            "relations" => {
                self.relations = value
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect();
                if self.relations.is_empty() {
                    return Err(ConfigError::BadValue {
                        line,
                        key: key.to_string(),
                        value: value.to_string(),
                        want: "a comma-separated relation list",
                    });
                }
            }
            "train_frac" => parse_num!(self, train_frac, value, line, key, "a real number"),
            "val_frac" => parse_num!(self, val_frac, value, line, key, "a real number"),
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Every key in a stable order; `parse(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let precision = match self.precision {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        };
        let conv_mode = match self.conv_mode {
            ConvModeOpt::Auto => "auto",
            ConvModeOpt::Tanh => "tanh",
            ConvModeOpt::ReluBatchNorm => "relu-batchnorm",
        };
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        push("precision", precision.to_string());
        push("seed", format!("{}", self.seed));
        push("world_d", format!("{}", self.world_d));
        push("world_h", format!("{}", self.world_h));
        push("world_w", format!("{}", self.world_w));
        push("num_blocks", format!("{}", self.num_blocks));
        push("n_op", format!("{}", self.n_op));
        push("d_op_vec", format!("{}", self.d_op_vec));
        push("d_e", format!("{}", self.d_e));
        push("hidden", format!("{}", self.hidden));
        push("conv_mode", conv_mode.to_string());
        push("bn_momentum", format!("{:?}", self.bn_momentum));
        push("bn_eps", format!("{:?}", self.bn_eps));
        push("w_src", format!("{:?}", self.w_src));
        push("w_xyz", format!("{:?}", self.w_xyz));
        push("w_theta", format!("{:?}", self.w_theta));
        push("lambda_a", format!("{:?}", self.lambda_a));
        push("lambda_op", format!("{:?}", self.lambda_op));
        push("lr", format!("{:?}", self.lr));
        push("beta1", format!("{:?}", self.beta1));
        push("beta2", format!("{:?}", self.beta2));
        push("adam_eps", format!("{:?}", self.adam_eps));
        push("batch_size", format!("{}", self.batch_size));
        push("max_steps", format!("{}", self.max_steps));
        push("eval_every", format!("{}", self.eval_every));
        push("early_stop_xyz", format!("{:?}", self.early_stop_xyz));
        push("early_stop_acc", format!("{:?}", self.early_stop_acc));
        push("early_stop_theta", format!("{:?}", self.early_stop_theta));
        push("scenes", format!("{}", self.scenes));
        push("examples_per_scene", format!("{}", self.examples_per_scene));
        push("blocks_per_scene", format!("{}", self.blocks_per_scene));
        push("offset_step", format!("{:?}", self.offset_step));
        push("offset_jitter", format!("{:?}", self.offset_jitter));
        push("yaw_jitter", format!("{:?}", self.yaw_jitter));
        push("relations", self.relations.join(","));
        push("train_frac", format!("{:?}", self.train_frac));
        push("val_frac", format!("{:?}", self.val_frac));
        out
    }

    /// Resolve the model-shape subset, fixing `auto` conv mode by depth.
    pub fn model(&self) -> ModelConfig {
        let conv_mode = match self.conv_mode {
            ConvModeOpt::Tanh => ConvMode::Tanh3d,
            ConvModeOpt::ReluBatchNorm => ConvMode::ReluBatchNorm,
            ConvModeOpt::Auto => {
                if self.world_d == 1 {
                    ConvMode::ReluBatchNorm
                } else {
                    ConvMode::Tanh3d
                }
            }
        };
        ModelConfig {
            dims: GridDims::new(self.world_d, self.world_h, self.world_w),
            num_blocks: self.num_blocks,
            n_op: self.n_op,
            d_op_vec: self.d_op_vec,
            d_e: self.d_e,
            hidden: self.hidden,
            conv_mode,
            bn_momentum: self.bn_momentum,
            bn_eps: self.bn_eps,
        }
    }
}
