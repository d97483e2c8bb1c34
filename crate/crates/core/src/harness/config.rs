//! Run configuration as flat `key = value` lines with dotted namespaces.
//!
//! ```text
//! # EF run
//! task = ef
//! seed = 7
//! attn.lambda_spatial = 0
//! train.steps = 500
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{GemtError, Result};
use crate::model::{EncoderConfig, Task};
use crate::proto::ProtoConfig;
use crate::supervision::AttnLossWeights;
use crate::synth::SynthConfig;
use crate::tensor::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub steps: usize,
    /// Validation cadence in steps.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping; 0 disables.
    pub patience: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Linear learning-rate warmup in steps.
    pub warmup: usize,
    /// Cosine decay of the learning rate to zero over the steps after warmup.
    pub cosine: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            batch_size: 8,
            steps: 2000,
            eval_every: 100,
            patience: 10,
            clip_norm: 1.0,
            warmup: 100,
            cosine: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    pub model: EncoderConfig,
    pub attn: AttnLossWeights,
    pub optim: AdamConfig,
    pub train: TrainSettings,
    pub data: SynthConfig,
    pub proto: ProtoConfig,
    /// Fit prototype branches after backbone training.
    pub proto_train: bool,
}

/// Learning rate of training runs. At 1e-3 the three stacked LayerNorms let
/// one early feature dominate and training stalls on a plateau for many seeds.
pub const TRAIN_LR: f64 = 3e-4;

impl RunConfig {
    pub fn new(task: Task) -> Self {
        let data = SynthConfig::new(task);
        let model = EncoderConfig {
            k: data.k,
            t: data.t,
            h: data.h,
            w: data.w,
            ..EncoderConfig::default()
        };
        RunConfig {
            task,
            seed: 0,
            model,
            attn: match task {
                Task::Ef => AttnLossWeights::default(),
                Task::As => AttnLossWeights::disabled(),
            },
            optim: AdamConfig {
                lr: TRAIN_LR,
                ..AdamConfig::default()
            },
            train: TrainSettings::default(),
            data,
            proto: ProtoConfig::default(),
            proto_train: false,
        }
    }

    /// Parses `key = value` lines. `#` starts a comment. Unknown and repeated
    /// keys are rejected. `task` is applied first so the other keys override
    /// its defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| GemtError::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if entries.insert(k.clone(), v).is_some() {
                return Err(GemtError::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
        }
        let task = match entries.remove("task") {
            Some(t) => t.parse()?,
            None => Task::Ef,
        };
        let mut cfg = RunConfig::new(task);
        for (k, v) in &entries {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets one key. Data dimensions also set the matching model dimensions.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| GemtError::Config(format!("cannot parse `{v}` for `{key}`")))
        }
        match key {
            "task" => {
                let task: Task = value.parse()?;
                if task != self.task {
                    return Err(GemtError::Config("task must be set before other keys".into()));
                }
            }
            "seed" => self.seed = p(key, value)?,
            "model.patch_size" => self.model.patch_size = p(key, value)?,
            "model.embed_dim" => self.model.embed_dim = p(key, value)?,
            "model.layers" => self.model.layers = p(key, value)?,
            "model.heads" => self.model.heads = p(key, value)?,
            "model.mlp_hidden" => self.model.mlp_hidden = p(key, value)?,
            "model.head_hidden" => self.model.head_hidden = p(key, value)?,
            "model.dropout" => self.model.dropout = p(key, value)?,
            "model.ln_eps" => self.model.ln_eps = p(key, value)?,
            "data.seed" => self.data.seed = p(key, value)?,
            "data.train" => self.data.train = p(key, value)?,
            "data.val" => self.data.val = p(key, value)?,
            "data.test" => self.data.test = p(key, value)?,
            "data.noise" => self.data.noise = p(key, value)?,
            "data.k" => {
                self.data.k = p(key, value)?;
                self.model.k = self.data.k;
            }
            "data.t" => {
                self.data.t = p(key, value)?;
                self.model.t = self.data.t;
            }
            "data.h" => {
                self.data.h = p(key, value)?;
                self.model.h = self.data.h;
            }
            "data.w" => {
                self.data.w = p(key, value)?;
                self.model.w = self.data.w;
            }
            "attn.lambda_spatial" => self.attn.lambda_spatial = p(key, value)?,
            "attn.lambda_temporal" => self.attn.lambda_temporal = p(key, value)?,
            "attn.temporal_mode" => self.attn.temporal_mode = value.parse()?,
            "optim.lr" => self.optim.lr = p(key, value)?,
            "optim.beta1" => self.optim.beta1 = p(key, value)?,
            "optim.beta2" => self.optim.beta2 = p(key, value)?,
            "optim.eps" => self.optim.eps = p(key, value)?,
            "optim.weight_decay" => self.optim.weight_decay = p(key, value)?,
            "train.batch_size" => self.train.batch_size = p(key, value)?,
            "train.steps" => self.train.steps = p(key, value)?,
            "train.eval_every" => self.train.eval_every = p(key, value)?,
            "train.patience" => self.train.patience = p(key, value)?,
            "train.clip_norm" => self.train.clip_norm = p(key, value)?,
            "train.warmup" => self.train.warmup = p(key, value)?,
            "train.cosine" => self.train.cosine = p(key, value)?,
            "proto.train" => self.proto_train = p(key, value)?,
            "proto.per_class" => self.proto.per_class = p(key, value)?,
            "proto.spatial_fraction" => self.proto.spatial_fraction = p(key, value)?,
            "proto.temporal_fraction" => self.proto.temporal_fraction = p(key, value)?,
            "proto.epochs" => self.proto.epochs = p(key, value)?,
            "proto.batch_size" => self.proto.batch_size = p(key, value)?,
            "proto.lr" => self.proto.lr = p(key, value)?,
            "proto.seed" => self.proto.seed = p(key, value)?,
            other => return Err(GemtError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.attn.validate()?;
        self.proto.validate()?;
        if self.data.task != self.task {
            return Err(GemtError::Config("data task differs from run task".into()));
        }
        if self.train.batch_size == 0 || self.train.eval_every == 0 {
            return Err(GemtError::Config(
                "train.batch_size and train.eval_every must be >= 1".into(),
            ));
        }
        if self.data.train == 0 || self.data.val == 0 {
            return Err(GemtError::Config("train and val splits must be non-empty".into()));
        }
        let o = &self.optim;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(GemtError::Config("optimizer settings out of range".into()));
        }
        if !(self.train.clip_norm >= 0.0) {
            return Err(GemtError::Config("train.clip_norm must be >= 0".into()));
        }
        if !(o.weight_decay >= 0.0) {
            return Err(GemtError::Config("optim.weight_decay must be >= 0".into()));
        }
        Ok(())
    }

    /// Every key with its resolved value, in the parser's format.
    pub fn to_kv(&self) -> String {
        let m = &self.model;
        let d = &self.data;
        let o = &self.optim;
        let pr = &self.proto;
        let mode = match self.attn.temporal_mode {
            crate::supervision::TemporalMode::Frames => "frames",
            crate::supervision::TemporalMode::Interval => "interval",
        };
        let rows: Vec<(&str, String)> = vec![
            ("task", self.task.name().into()),
            ("seed", self.seed.to_string()),
            ("model.patch_size", m.patch_size.to_string()),
            ("model.embed_dim", m.embed_dim.to_string()),
            ("model.layers", m.layers.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.mlp_hidden", m.mlp_hidden.to_string()),
            ("model.head_hidden", m.head_hidden.to_string()),
            ("model.dropout", m.dropout.to_string()),
            ("model.ln_eps", m.ln_eps.to_string()),
            ("data.seed", d.seed.to_string()),
            ("data.train", d.train.to_string()),
            ("data.val", d.val.to_string()),
            ("data.test", d.test.to_string()),
            ("data.noise", d.noise.to_string()),
            ("data.k", d.k.to_string()),
            ("data.t", d.t.to_string()),
            ("data.h", d.h.to_string()),
            ("data.w", d.w.to_string()),
            ("attn.lambda_spatial", self.attn.lambda_spatial.to_string()),
            ("attn.lambda_temporal", self.attn.lambda_temporal.to_string()),
            ("attn.temporal_mode", mode.into()),
            ("optim.lr", o.lr.to_string()),
            ("optim.beta1", o.beta1.to_string()),
            ("optim.beta2", o.beta2.to_string()),
            ("optim.eps", o.eps.to_string()),
            ("optim.weight_decay", o.weight_decay.to_string()),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("train.steps", self.train.steps.to_string()),
            ("train.eval_every", self.train.eval_every.to_string()),
            ("train.patience", self.train.patience.to_string()),
            ("train.clip_norm", self.train.clip_norm.to_string()),
            ("train.warmup", self.train.warmup.to_string()),
            ("train.cosine", self.train.cosine.to_string()),
            ("proto.train", self.proto_train.to_string()),
            ("proto.per_class", pr.per_class.to_string()),
            ("proto.spatial_fraction", pr.spatial_fraction.to_string()),
            ("proto.temporal_fraction", pr.temporal_fraction.to_string()),
            ("proto.epochs", pr.epochs.to_string()),
            ("proto.batch_size", pr.batch_size.to_string()),
            ("proto.lr", pr.lr.to_string()),
            ("proto.seed", pr.seed.to_string()),
        ];
        let mut s = String::new();
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
