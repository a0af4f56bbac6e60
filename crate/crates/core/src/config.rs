//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Unknown keys are errors.
//! `manipulation = on|off` switches segment embeddings, reversed positions
//! and the context mask together; `segment_embeddings`, `position_mode` and
//! `context_mask` override it one at a time regardless of line order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::context_window::{ContextPolicy, PositionMode};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::{ObjectiveConfig, DEFAULT_MASK_CAP, DEFAULT_MASK_RATE};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    Translation,
    MlmOnly,
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "translation" => Ok(ObjectiveKind::Translation),
            "mlm_only" => Ok(ObjectiveKind::MlmOnly),
            _ => Err(Error::Config(format!("unknown objective {s:?}"))),
        }
    }
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ObjectiveKind::Translation => "translation",
            ObjectiveKind::MlmOnly => "mlm_only",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Window limit and position-table size.
    pub max_positions: usize,
    pub dropout: f64,
    pub context: ContextPolicy,
    pub manipulation: bool,
    pub segment_embeddings: Option<bool>,
    pub position_mode: Option<PositionMode>,
    pub context_mask: Option<bool>,

    pub objective: ObjectiveKind,
    pub mlm_enabled: bool,
    pub mlm_weight: f64,
    pub mask_rate: f64,
    pub mask_cap: usize,
    pub label_smoothing: f64,

    pub max_steps: u64,
    pub tokens_per_batch: usize,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lr_scale: f64,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub freeze: Vec<String>,
    pub inject_nan_at_step: Option<u64>,

    pub train_data: Option<PathBuf>,
    pub src_vocab: Option<PathBuf>,
    pub tgt_vocab: Option<PathBuf>,
    pub run_dir: PathBuf,
    pub init_checkpoint: Option<PathBuf>,
    pub init_strict: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        RunConfig {
            d_model: m.d_model,
            n_heads: m.n_heads,
            d_ffn: m.d_ffn,
            enc_layers: m.enc_layers,
            dec_layers: m.dec_layers,
            max_positions: m.max_positions,
            dropout: m.dropout,
            context: ContextPolicy::Large,
            manipulation: true,
            segment_embeddings: None,
            position_mode: None,
            context_mask: None,
            objective: ObjectiveKind::Translation,
            mlm_enabled: false,
            mlm_weight: 1.0,
            mask_rate: DEFAULT_MASK_RATE,
            mask_cap: DEFAULT_MASK_CAP,
            label_smoothing: 0.0,
            max_steps: t.max_steps,
            tokens_per_batch: t.tokens_per_batch,
            warmup_steps: t.warmup_steps,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            lr_scale: t.lr_scale,
            seed: t.seed,
            clip_norm: t.clip_norm,
            checkpoint_every: t.checkpoint_every,
            log_every: 1,
            freeze: Vec::new(),
            inject_nan_at_step: None,
            train_data: None,
            src_vocab: None,
            tgt_vocab: None,
            run_dir: PathBuf::from("run"),
            init_checkpoint: None,
            init_strict: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_switch(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on or off, got {value:?}"))),
    }
}

fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn switch(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn optional<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

fn path_or_none(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let path = || (value != "none").then(|| PathBuf::from(value));
        match key {
            "d_model" => self.d_model = parse(key, value)?,
            "n_heads" => self.n_heads = parse(key, value)?,
            "d_ffn" => self.d_ffn = parse(key, value)?,
            "enc_layers" => self.enc_layers = parse(key, value)?,
            "dec_layers" => self.dec_layers = parse(key, value)?,
            "max_positions" => self.max_positions = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "context" => self.context = value.parse()?,
            "manipulation" => self.manipulation = parse_switch(key, value)?,
            "segment_embeddings" => self.segment_embeddings = Some(parse_switch(key, value)?),
            "position_mode" => self.position_mode = Some(value.parse()?),
            "context_mask" => self.context_mask = Some(parse_switch(key, value)?),
            "objective" => self.objective = value.parse()?,
            "mlm_enabled" => self.mlm_enabled = parse_switch(key, value)?,
            "mlm_weight" => self.mlm_weight = parse(key, value)?,
            "mask_rate" => self.mask_rate = parse(key, value)?,
            "mask_cap" => self.mask_cap = parse(key, value)?,
            "label_smoothing" => self.label_smoothing = parse(key, value)?,
            "max_steps" => self.max_steps = parse(key, value)?,
            "tokens_per_batch" => self.tokens_per_batch = parse(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "epsilon" => self.epsilon = parse(key, value)?,
            "lr_scale" => self.lr_scale = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse_optional(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "freeze" => {
                self.freeze = value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_owned).collect()
            }
            "inject_nan_at_step" => self.inject_nan_at_step = parse_optional(key, value)?,
            "train_data" => self.train_data = path(),
            "src_vocab" => self.src_vocab = path(),
            "tgt_vocab" => self.tgt_vocab = path(),
            "run_dir" => self.run_dir = PathBuf::from(value),
            "init_checkpoint" => self.init_checkpoint = path(),
            "init_strict" => self.init_strict = parse_switch(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies one `key=value` (or `key = value`) assignment.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {assignment:?}")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if !line.is_empty() {
                cfg.apply(line)?;
            }
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse_text(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn segment_embeddings(&self) -> bool {
        self.segment_embeddings.unwrap_or(self.manipulation)
    }

    pub fn position_mode(&self) -> PositionMode {
        self.position_mode.unwrap_or(if self.manipulation { PositionMode::Reversed } else { PositionMode::Sequential })
    }

    pub fn context_mask(&self) -> bool {
        self.context_mask.unwrap_or(self.manipulation)
    }

    pub fn model_config(&self, src_vocab: usize, tgt_vocab: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ffn: self.d_ffn,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            max_positions: self.max_positions,
            src_vocab,
            tgt_vocab,
            dropout: self.dropout,
            position_mode: self.position_mode(),
            segment_embeddings: self.segment_embeddings(),
            context_mask: self.context_mask(),
            ..ModelConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            max_steps: self.max_steps,
            tokens_per_batch: self.tokens_per_batch,
            warmup_steps: self.warmup_steps,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            lr_scale: self.lr_scale,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            clip_norm: self.clip_norm,
            freeze: self.freeze.clone(),
            inject_nan_at_step: self.inject_nan_at_step,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn objective_config(&self) -> Result<ObjectiveConfig> {
        let cfg = match self.objective {
            ObjectiveKind::Translation => ObjectiveConfig {
                translation: true,
                mlm_enabled: self.mlm_enabled,
                ..ObjectiveConfig::default()
            },
            ObjectiveKind::MlmOnly => ObjectiveConfig::mlm_only(),
        };
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::Config("mask_rate must lie in (0, 1)".into()));
        }
        if self.mask_cap == 0 {
            return Err(Error::Config("mask_cap must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must lie in [0, 1)".into()));
        }
        Ok(ObjectiveConfig {
            mlm_weight: self.mlm_weight,
            mask_rate: self.mask_rate,
            mask_cap: self.mask_cap,
            label_smoothing: self.label_smoothing,
            ..cfg
        })
    }

    /// Every key with its effective value; parsing it back yields an
    /// equivalent configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("d_model", self.d_model.to_string());
        kv("n_heads", self.n_heads.to_string());
        kv("d_ffn", self.d_ffn.to_string());
        kv("enc_layers", self.enc_layers.to_string());
        kv("dec_layers", self.dec_layers.to_string());
        kv("max_positions", self.max_positions.to_string());
        kv("dropout", self.dropout.to_string());
        kv("context", self.context.to_string());
        kv("manipulation", switch(self.manipulation).into());
        kv("segment_embeddings", switch(self.segment_embeddings()).into());
        kv("position_mode", self.position_mode().to_string());
        kv("context_mask", switch(self.context_mask()).into());
        kv("objective", self.objective.to_string());
        kv("mlm_enabled", switch(self.mlm_enabled).into());
        kv("mlm_weight", self.mlm_weight.to_string());
        kv("mask_rate", self.mask_rate.to_string());
        kv("mask_cap", self.mask_cap.to_string());
        kv("label_smoothing", self.label_smoothing.to_string());
        kv("max_steps", self.max_steps.to_string());
        kv("tokens_per_batch", self.tokens_per_batch.to_string());
        kv("warmup_steps", self.warmup_steps.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("epsilon", self.epsilon.to_string());
        kv("lr_scale", self.lr_scale.to_string());
        kv("seed", self.seed.to_string());
        kv("clip_norm", optional(&self.clip_norm));
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("log_every", self.log_every.to_string());
        kv("freeze", self.freeze.join(","));
        kv("inject_nan_at_step", optional(&self.inject_nan_at_step));
        kv("train_data", path_or_none(&self.train_data));
        kv("src_vocab", path_or_none(&self.src_vocab));
        kv("tgt_vocab", path_or_none(&self.tgt_vocab));
        kv("run_dir", self.run_dir.display().to_string());
        kv("init_checkpoint", path_or_none(&self.init_checkpoint));
        kv("init_strict", switch(self.init_strict).into());
        s
    }
}
