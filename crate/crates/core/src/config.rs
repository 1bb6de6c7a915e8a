//! Run configuration: one flat TOML table covering the model, offline
//! training, test-time training, inference and file paths.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::DEFAULT_CANVAS_SIZE;
use crate::infer::{AdaptMode, EvalConfig, InferConfig};
use crate::nn::attention::ROPE_BASE;
use crate::train::{TrainConfig, TttConfig, TttScope, DEFAULT_AUX_SEED, NUM_AUX_TASKS};
use crate::vit::{LossMask, PositionalMode, VitConfig};
use crate::geometry::NUM_SYMBOLS;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Parse(String),
    #[error("override `{0}` is not of the form key=value")]
    BadOverride(String),
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,

    pub canvas_size: usize,
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub mlp_dropout: f32,
    pub attn_dropout: f32,
    pub pixel_embed_dim: usize,
    /// 0 means one per training task.
    pub num_task_embeddings: usize,
    pub positional_mode: PositionalMode,
    pub key_masking: bool,

    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub scale_aug: bool,
    pub translate_aug: bool,
    pub max_scale: usize,
    pub loss_mask: LossMask,
    pub validate_every: usize,

    pub ttt_epochs: usize,
    pub ttt_warmup_epochs: usize,
    pub ttt_batch_size: usize,
    pub ttt_base_lr: f64,
    pub ttt_scope: TttScope,
    pub joint_ttt: bool,
    pub aux_seed: u64,
    pub num_aux: usize,

    pub views_per_aux: usize,
    pub single_view: bool,
    pub max_k: usize,
    pub jobs: usize,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rearc_dir: Option<PathBuf>,
    pub rearc_pairs_per_task: usize,
    pub rearc_with_replacement: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let vit = VitConfig::paper(512, 10, 8);
        let off = TrainConfig::offline();
        let ttt = TrainConfig::ttt();
        RunConfig {
            seed: 0,
            canvas_size: DEFAULT_CANVAS_SIZE,
            patch_size: vit.patch_size,
            hidden_dim: vit.hidden_dim,
            depth: vit.depth,
            heads: vit.heads,
            mlp_hidden: vit.mlp_hidden,
            mlp_dropout: vit.mlp_dropout,
            attn_dropout: vit.attn_dropout,
            pixel_embed_dim: 16,
            num_task_embeddings: 0,
            positional_mode: PositionalMode::Rope2d,
            key_masking: true,
            epochs: off.epochs,
            warmup_epochs: off.warmup_epochs,
            batch_size: off.batch_size,
            base_lr: off.base_lr,
            scale_aug: true,
            translate_aug: true,
            max_scale: off.max_scale,
            loss_mask: LossMask::default(),
            validate_every: off.validate_every,
            ttt_epochs: ttt.epochs,
            ttt_warmup_epochs: ttt.warmup_epochs,
            ttt_batch_size: ttt.batch_size,
            ttt_base_lr: ttt.base_lr,
            ttt_scope: TttScope::Full,
            joint_ttt: false,
            aux_seed: DEFAULT_AUX_SEED,
            num_aux: NUM_AUX_TASKS,
            views_per_aux: 10,
            single_view: false,
            max_k: 2,
            jobs: 1,
            train_data: None,
            eval_data: None,
            rearc_dir: None,
            rearc_pairs_per_task: 1000,
            rearc_with_replacement: false,
            checkpoint: None,
            metrics: None,
            report: None,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// Parses TOML text, applies `key=value` overrides on top and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<RunConfig, ConfigError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::BadOverride(o.clone()))?;
            table.insert(k.trim().to_string(), parse_value(v.trim()));
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Io { path: p.to_path_buf(), source })?,
            None => String::new(),
        };
        RunConfig::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.vit_config(self.num_task_embeddings.max(1)).validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.ttt_config().train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.ttt_config().aux_tasks().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.views_per_aux == 0 || self.jobs == 0 || self.max_k == 0 {
            return Err(ConfigError::Invalid("views_per_aux, jobs and max_k must be positive".into()));
        }
        Ok(())
    }

    /// Model configuration; `num_tasks` fills in `num_task_embeddings = 0`.
    pub fn vit_config(&self, num_tasks: usize) -> VitConfig {
        VitConfig {
            hidden_dim: self.hidden_dim,
            depth: self.depth,
            heads: self.heads,
            mlp_hidden: self.mlp_hidden,
            mlp_dropout: self.mlp_dropout,
            attn_dropout: self.attn_dropout,
            patch_size: self.patch_size,
            canvas_size: self.canvas_size,
            num_symbols: NUM_SYMBOLS,
            pixel_embed_dim: self.pixel_embed_dim,
            num_task_embeddings: if self.num_task_embeddings == 0 { num_tasks } else { self.num_task_embeddings },
            positional_mode: self.positional_mode,
            key_masking: self.key_masking,
            rope_base: ROPE_BASE,
            ln_eps: 1e-5,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            warmup_epochs: self.warmup_epochs,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            seed: self.seed,
            scale_aug: self.scale_aug,
            translate_aug: self.translate_aug,
            max_scale: self.max_scale,
            fixed_scale: 1,
            loss_mask: self.loss_mask,
            validate_every: self.validate_every,
        }
    }

    pub fn ttt_config(&self) -> TttConfig {
        TttConfig {
            train: TrainConfig {
                epochs: self.ttt_epochs,
                warmup_epochs: self.ttt_warmup_epochs,
                batch_size: self.ttt_batch_size,
                base_lr: self.ttt_base_lr,
                validate_every: 0,
                ..self.train_config()
            },
            scope: self.ttt_scope,
            aux_seed: self.aux_seed,
            num_aux: self.num_aux,
        }
    }

    pub fn infer_config(&self) -> InferConfig {
        InferConfig {
            views_per_aux: self.views_per_aux,
            num_aux: self.num_aux,
            seed: self.seed,
            max_scale: self.max_scale,
            scale_aug: self.scale_aug,
            translate_aug: self.translate_aug,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            ttt: self.ttt_config(),
            infer: self.infer_config(),
            mode: if self.joint_ttt { AdaptMode::Joint } else { AdaptMode::Independent },
            single_view: self.single_view,
            max_k: self.max_k,
            jobs: self.jobs,
            keep_top: self.max_k.max(2),
            record_timing: true,
        }
    }
}
