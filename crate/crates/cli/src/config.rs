//! Run configuration: flat `key = value` text with `#` comments.

use std::path::PathBuf;

use iqa_core::graph::{GraphConfig, Normalization};
use iqa_core::model::{BnEval, GateVariant, ModelConfig};
use iqa_core::objective::{ObjectiveConfig, PerTerm};
use iqa_core::trainer::{LrSchedule, Split, TrainConfig};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Builtin,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Builtin => "builtin",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub patch_size: usize,
    pub grid_n: usize,
    pub d: usize,
    pub k: usize,
    pub lambda_w: f64,
    pub tau: f64,
    pub layers: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda_corr: f64,
    pub lambda_rank: f64,
    pub lambda_mse: f64,
    pub lambda_var: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub normalization: Normalization,
    pub gate_variant: GateVariant,
    pub bn_eval: BnEval,
    pub tta_fraction: f64,
    pub encoder: EncoderKind,
    pub gate_hidden: usize,
    pub head_hidden: usize,
    pub rank_margin: f64,
    pub bias_correction: bool,
    pub weight_ema_decay: f64,
    pub weight_ema_warmup: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub lr_schedule: LrSchedule,
    pub zscore_epsilon: f64,
    pub bn_momentum: f64,
    pub cache_dir: Option<PathBuf>,
    pub eval_split: Split,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let graph = GraphConfig::default();
        let objective = ObjectiveConfig::default();
        let train = TrainConfig::default();
        Self {
            patch_size: 256,
            grid_n: 216,
            d: model.d,
            k: graph.k,
            lambda_w: graph.lambda_w,
            tau: graph.tau,
            layers: model.layers,
            alpha: model.alpha,
            dropout: model.dropout,
            lr: train.learning_rate,
            weight_decay: train.weight_decay,
            lambda_corr: objective.lambda.0[1],
            lambda_rank: objective.lambda.0[2],
            lambda_mse: objective.lambda.0[0],
            lambda_var: objective.lambda.0[3],
            beta: objective.beta,
            epsilon: objective.epsilon,
            seed: 0,
            batch_size: train.batch_size,
            epochs: train.epochs,
            normalization: graph.normalization,
            gate_variant: model.gate_variant,
            bn_eval: model.bn_eval,
            tta_fraction: train.tta_fraction,
            encoder: EncoderKind::Builtin,
            gate_hidden: model.gate_hidden,
            head_hidden: model.head_hidden,
            rank_margin: objective.rank_margin,
            bias_correction: objective.bias_correction,
            weight_ema_decay: train.weight_ema_decay,
            weight_ema_warmup: train.weight_ema_warmup,
            adam_beta1: train.adam_beta1,
            adam_beta2: train.adam_beta2,
            adam_epsilon: train.adam_epsilon,
            lr_schedule: train.lr_schedule,
            zscore_epsilon: graph.zscore_epsilon,
            bn_momentum: model.bn_momentum,
            cache_dir: None,
            eval_split: Split::Test,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(CliError::Usage(format!("invalid value `{value}` for `{key}`"))),
    }
}

impl RunConfig {
    /// Parses config text. Unknown keys, repeated keys and malformed lines are
    /// rejected; the result is validated.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(CliError::Usage(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "patch_size" => self.patch_size = parse_value(key, value)?,
            "grid_n" => self.grid_n = parse_value(key, value)?,
            "d" => self.d = parse_value(key, value)?,
            "k" => self.k = parse_value(key, value)?,
            "lambda_w" => self.lambda_w = parse_value(key, value)?,
            "tau" => self.tau = parse_value(key, value)?,
            "layers" => self.layers = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "lambda_corr" => self.lambda_corr = parse_value(key, value)?,
            "lambda_rank" => self.lambda_rank = parse_value(key, value)?,
            "lambda_mse" => self.lambda_mse = parse_value(key, value)?,
            "lambda_var" => self.lambda_var = parse_value(key, value)?,
            "beta" => self.beta = parse_value(key, value)?,
            "epsilon" => self.epsilon = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "normalization" => {
                self.normalization = match value {
                    "row" => Normalization::Row,
                    "symmetric" | "sym" => Normalization::Symmetric,
                    _ => return Err(CliError::Usage(format!("unknown normalization `{value}`"))),
                }
            }
            "gate_variant" => {
                self.gate_variant = match value {
                    "plain-mlp" => GateVariant::PlainMlp,
                    "gated-tanh-sigmoid" => GateVariant::GatedTanhSigmoid,
                    _ => return Err(CliError::Usage(format!("unknown gate variant `{value}`"))),
                }
            }
            "bn_eval" => {
                self.bn_eval = match value {
                    "graph" => BnEval::Graph,
                    "running" => BnEval::Running,
                    _ => return Err(CliError::Usage(format!("unknown bn_eval `{value}`"))),
                }
            }
            "tta_fraction" => self.tta_fraction = parse_value(key, value)?,
            "encoder" => {
                self.encoder = match value {
                    "builtin" => EncoderKind::Builtin,
                    _ => return Err(CliError::Usage(format!("unknown encoder `{value}`"))),
                }
            }
            "gate_hidden" => self.gate_hidden = parse_value(key, value)?,
            "head_hidden" => self.head_hidden = parse_value(key, value)?,
            "rank_margin" => self.rank_margin = parse_value(key, value)?,
            "bias_correction" => self.bias_correction = parse_bool(key, value)?,
            "weight_ema_decay" => self.weight_ema_decay = parse_value(key, value)?,
            "weight_ema_warmup" => self.weight_ema_warmup = parse_bool(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse_value(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse_value(key, value)?,
            "adam_epsilon" => self.adam_epsilon = parse_value(key, value)?,
            "lr_schedule" => {
                self.lr_schedule = match value {
                    "constant" => LrSchedule::Constant,
                    "cosine" => LrSchedule::Cosine,
                    _ => return Err(CliError::Usage(format!("unknown lr schedule `{value}`"))),
                }
            }
            "zscore_epsilon" => self.zscore_epsilon = parse_value(key, value)?,
            "bn_momentum" => self.bn_momentum = parse_value(key, value)?,
            "cache_dir" => self.cache_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "eval_split" => {
                self.eval_split =
                    Split::parse(value).ok_or_else(|| CliError::Usage(format!("unknown split `{value}`")))?
            }
            _ => return Err(CliError::Usage(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: iqa_core::IqaError| CliError::Usage(e.to_string());
        if self.patch_size == 0 {
            return Err(CliError::Usage("patch_size must be >= 1".into()));
        }
        if self.grid_n < 2 {
            return Err(CliError::Usage("grid_n must be >= 2".into()));
        }
        if self.k == 0 || self.k >= self.grid_n {
            return Err(CliError::Usage(format!(
                "k must be in [1, grid_n - 1] = [1, {}], got {}",
                self.grid_n - 1,
                self.k
            )));
        }
        if self.epochs == 0 {
            return Err(CliError::Usage("epochs must be >= 1".into()));
        }
        self.graph().validate().map_err(usage)?;
        self.model().validate().map_err(usage)?;
        self.objective().validate().map_err(usage)?;
        self.train().validate().map_err(usage)?;
        Ok(())
    }

    pub fn graph(&self) -> GraphConfig {
        GraphConfig {
            k: self.k,
            lambda_w: self.lambda_w,
            tau: self.tau,
            normalization: self.normalization,
            zscore_epsilon: self.zscore_epsilon,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            layers: self.layers,
            alpha: self.alpha,
            dropout: self.dropout,
            gate_hidden: self.gate_hidden,
            head_hidden: self.head_hidden,
            gate_variant: self.gate_variant,
            bn_eval: self.bn_eval,
            bn_momentum: self.bn_momentum,
            ..ModelConfig::default()
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            lambda: PerTerm([self.lambda_mse, self.lambda_corr, self.lambda_rank, self.lambda_var]),
            beta: self.beta,
            epsilon: self.epsilon,
            bias_correction: self.bias_correction,
            rank_margin: self.rank_margin,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            weight_decay: self.weight_decay,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_epsilon: self.adam_epsilon,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            weight_ema_decay: self.weight_ema_decay,
            weight_ema_warmup: self.weight_ema_warmup,
            tta_fraction: self.tta_fraction,
            lr_schedule: self.lr_schedule,
        }
    }
}
