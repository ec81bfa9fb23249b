//! `key=value` run configuration.
//!
//! One assignment per line; blank lines and lines starting with `#` are
//! ignored. Unknown or repeated keys are errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::engine::{BimPlan, Mode};
use crate::error::{BimError, Result};
use crate::harness::optim::{scale_lr, AdamWConfig, LrSchedule};
use crate::ofa::ProbeConfig;
use crate::tensor::DType;
use crate::vit::ModelSpec;

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("preset", "model preset: toy, tiny, vit-base, vit-large, vit-huge"),
    ("image_size", "image side in pixels"),
    ("patch_size", "patch side in pixels"),
    ("channels", "image channels"),
    ("embed_dim", "encoder width"),
    ("depth", "encoder layers"),
    ("heads", "encoder attention heads"),
    ("mlp_ratio", "MLP hidden width over model width"),
    ("decoder_dim", "decoder width"),
    ("decoder_depth", "decoder layers"),
    ("decoder_heads", "decoder attention heads"),
    ("norm_pix", "standardize target patches (true/false)"),
    ("mode", "bim or mae"),
    ("num_blocks", "encoder blocks in bim mode"),
    ("mask_ratio", "masking ratio when no schedule is given"),
    ("mask_schedule", "comma-separated per-block ratios"),
    ("base_lr", "learning rate per 256 samples"),
    ("batch_size", "samples per step"),
    ("beta1", "AdamW first-moment decay"),
    ("beta2", "AdamW second-moment decay"),
    ("weight_decay", "decoupled weight decay"),
    ("warmup_epochs", "linear warmup length in epochs"),
    ("epochs", "training epochs"),
    ("max_steps", "stop after this many steps (0 = full schedule)"),
    ("seed", "run seed"),
    ("dtype", "f32 or f64"),
    ("dataset", "synthetic or a BIMD file path"),
    ("dataset_size", "synthetic image count"),
    ("dataset_seed", "synthetic generator seed"),
    ("checkpoint_every", "save every N epochs (0 = final only)"),
    ("resume", "checkpoint to resume pretraining from"),
    ("checkpoint", "checkpoint read by export-backbone and probe"),
    ("backbone", "exported backbone read by probe"),
    ("prefix_blocks", "comma-separated prefix depths in blocks"),
    ("probe_epochs", "linear probe epochs"),
    ("probe_lr", "linear probe learning rate"),
    ("probe_batch_size", "linear probe batch size"),
    ("probe_val_fraction", "held-out fraction for probe accuracy"),
    ("baseline_ratio", "fixed ratio the flop report compares against"),
    ("trend_depths", "comma-separated depths for the memory trend"),
];

pub fn valid_keys() -> Vec<&'static str> {
    KEYS.iter().map(|(k, _)| *k).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic { count: usize, seed: u64 },
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub mode: Mode,
    pub num_blocks: usize,
    pub mask_ratio: f64,
    pub mask_schedule: Option<Vec<f64>>,
    pub base_lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub warmup_epochs: f64,
    pub epochs: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub dtype: DType,
    pub dataset: DataSource,
    pub checkpoint_every: usize,
    pub resume: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub backbone: Option<PathBuf>,
    pub prefix_blocks: Vec<usize>,
    pub probe: ProbeConfig,
    pub baseline_ratio: f64,
    pub trend_depths: Vec<usize>,
}

impl Default for TrainConfig {
    /// Desk scale: toy model, 4 blocks at 75%, 50 epochs of 64-image
    /// batches over 2,048 synthetic images.
    fn default() -> Self {
        Self {
            model: ModelSpec::toy(),
            mode: Mode::Bim,
            num_blocks: 4,
            mask_ratio: 0.75,
            mask_schedule: None,
            base_lr: 1e-2,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.05,
            warmup_epochs: 2.5,
            epochs: 50,
            max_steps: 0,
            seed: 0,
            dtype: DType::F32,
            dataset: DataSource::Synthetic { count: 2048, seed: 0 },
            checkpoint_every: 0,
            resume: None,
            checkpoint: None,
            backbone: None,
            prefix_blocks: Vec::new(),
            probe: ProbeConfig::default(),
            baseline_ratio: 0.75,
            trend_depths: Vec::new(),
        }
    }
}

fn parse_num<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| BimError::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_list<V: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<V>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(BimError::Config(format!("{key}: expected true or false, got '{v}'"))),
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| BimError::Config(format!("line {}: expected key=value, got '{line}'", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.iter().any(|(name, _)| *name == k) {
                return Err(BimError::Config(format!(
                    "unknown key '{k}' on line {}; valid keys: {}",
                    lineno + 1,
                    valid_keys().join(", ")
                )));
            }
            if pairs.insert(k.to_string(), v.to_string()).is_some() {
                return Err(BimError::Config(format!("key '{k}' given twice")));
            }
        }

        let mut cfg = Self::default();
        if let Some(p) = pairs.get("preset") {
            cfg.model =
                ModelSpec::preset(p).ok_or_else(|| BimError::Config(format!("preset: unknown model preset '{p}'")))?;
        }
        let mut synth_count = 2048;
        let mut synth_seed = None;
        for (k, v) in &pairs {
            let v = v.as_str();
            let k = k.as_str();
            match k {
                "preset" => {}
                "image_size" => cfg.model.image_size = parse_num(k, v)?,
                "patch_size" => cfg.model.patch_size = parse_num(k, v)?,
                "channels" => cfg.model.channels = parse_num(k, v)?,
                "embed_dim" => cfg.model.embed_dim = parse_num(k, v)?,
                "depth" => cfg.model.depth = parse_num(k, v)?,
                "heads" => cfg.model.heads = parse_num(k, v)?,
                "mlp_ratio" => cfg.model.mlp_ratio = parse_num(k, v)?,
                "decoder_dim" => cfg.model.decoder_dim = parse_num(k, v)?,
                "decoder_depth" => cfg.model.decoder_depth = parse_num(k, v)?,
                "decoder_heads" => cfg.model.decoder_heads = parse_num(k, v)?,
                "norm_pix" => cfg.model.norm_pix = parse_bool(k, v)?,
                "mode" => {
                    cfg.mode = Mode::parse(v)
                        .ok_or_else(|| BimError::Config(format!("mode: expected bim or mae, got '{v}'")))?
                }
                "num_blocks" => cfg.num_blocks = parse_num(k, v)?,
                "mask_ratio" => cfg.mask_ratio = parse_num(k, v)?,
                "mask_schedule" => cfg.mask_schedule = Some(parse_list(k, v)?),
                "base_lr" => cfg.base_lr = parse_num(k, v)?,
                "batch_size" => cfg.batch_size = parse_num(k, v)?,
                "beta1" => cfg.beta1 = parse_num(k, v)?,
                "beta2" => cfg.beta2 = parse_num(k, v)?,
                "weight_decay" => cfg.weight_decay = parse_num(k, v)?,
                "warmup_epochs" => cfg.warmup_epochs = parse_num(k, v)?,
                "epochs" => cfg.epochs = parse_num(k, v)?,
                "max_steps" => cfg.max_steps = parse_num(k, v)?,
                "seed" => cfg.seed = parse_num(k, v)?,
                "dtype" => {
                    cfg.dtype = match v {
                        "f32" => DType::F32,
                        "f64" => DType::F64,
                        _ => return Err(BimError::Config(format!("dtype: expected f32 or f64, got '{v}'"))),
                    }
                }
                "dataset" => {
                    if v != "synthetic" {
                        cfg.dataset = DataSource::File(PathBuf::from(v));
                    }
                }
                "dataset_size" => synth_count = parse_num(k, v)?,
                "dataset_seed" => synth_seed = Some(parse_num(k, v)?),
                "checkpoint_every" => cfg.checkpoint_every = parse_num(k, v)?,
                "resume" => cfg.resume = Some(PathBuf::from(v)),
                "checkpoint" => cfg.checkpoint = Some(PathBuf::from(v)),
                "backbone" => cfg.backbone = Some(PathBuf::from(v)),
                "prefix_blocks" => cfg.prefix_blocks = parse_list(k, v)?,
                "probe_epochs" => cfg.probe.epochs = parse_num(k, v)?,
                "probe_lr" => cfg.probe.lr = parse_num(k, v)?,
                "probe_batch_size" => cfg.probe.batch_size = parse_num(k, v)?,
                "probe_val_fraction" => cfg.probe.val_fraction = parse_num(k, v)?,
                "baseline_ratio" => cfg.baseline_ratio = parse_num(k, v)?,
                "trend_depths" => cfg.trend_depths = parse_list(k, v)?,
                _ => unreachable!("key list and match arms out of sync: {k}"),
            }
        }
        cfg.probe.seed = cfg.seed;
        if let DataSource::Synthetic { .. } = cfg.dataset {
            cfg.dataset = DataSource::Synthetic {
                count: synth_count,
                seed: synth_seed.unwrap_or(0),
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Replace the run seed (and the probe seed with it).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.probe.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let open_unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(BimError::Config(format!("{name} must lie in (0, 1), got {v}")))
            }
        };
        open_unit("beta1", self.beta1)?;
        open_unit("beta2", self.beta2)?;
        if self.batch_size == 0 {
            return Err(BimError::Config("batch_size must be at least 1".into()));
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs <= self.epochs as f64) {
            return Err(BimError::Config(format!(
                "warmup_epochs {} must lie in [0, epochs = {}]",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) || self.weight_decay < 0.0 {
            return Err(BimError::Config("base_lr and weight_decay must be non-negative".into()));
        }
        if let DataSource::Synthetic { count: 0, .. } = self.dataset {
            return Err(BimError::Config("dataset_size must be at least 1".into()));
        }
        self.plan()?;
        Ok(())
    }

    /// Per-block masking ratios of the configured mode.
    pub fn plan(&self) -> Result<BimPlan> {
        match self.mode {
            Mode::Mae => BimPlan::mae(
                &self.model,
                self.mask_schedule.as_ref().map_or(self.mask_ratio, |s| s[0]),
            ),
            Mode::Bim => match &self.mask_schedule {
                Some(s) => {
                    if s.len() != self.num_blocks {
                        return Err(BimError::Config(format!(
                            "mask_schedule has {} entries, num_blocks is {}",
                            s.len(),
                            self.num_blocks
                        )));
                    }
                    BimPlan::with_schedule(&self.model, s.clone())
                }
                None => BimPlan::uniform(&self.model, self.num_blocks, self.mask_ratio),
            },
        }
    }

    pub fn effective_lr(&self) -> f64 {
        scale_lr(self.base_lr, self.batch_size)
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> LrSchedule {
        LrSchedule::new(self.effective_lr(), self.warmup_epochs, self.epochs, steps_per_epoch)
    }

    /// Config text that parses back to `self` (paths must be UTF-8).
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut lines = vec![
            format!("image_size={}", m.image_size),
            format!("patch_size={}", m.patch_size),
            format!("channels={}", m.channels),
            format!("embed_dim={}", m.embed_dim),
            format!("depth={}", m.depth),
            format!("heads={}", m.heads),
            format!("mlp_ratio={}", m.mlp_ratio),
            format!("decoder_dim={}", m.decoder_dim),
            format!("decoder_depth={}", m.decoder_depth),
            format!("decoder_heads={}", m.decoder_heads),
            format!("norm_pix={}", m.norm_pix),
            format!("mode={}", self.mode.name()),
            format!("num_blocks={}", self.num_blocks),
            format!("mask_ratio={}", self.mask_ratio),
            format!("base_lr={}", self.base_lr),
            format!("batch_size={}", self.batch_size),
            format!("beta1={}", self.beta1),
            format!("beta2={}", self.beta2),
            format!("weight_decay={}", self.weight_decay),
            format!("warmup_epochs={}", self.warmup_epochs),
            format!("epochs={}", self.epochs),
            format!("max_steps={}", self.max_steps),
            format!("seed={}", self.seed),
            format!("dtype={}", self.dtype.name()),
            format!("checkpoint_every={}", self.checkpoint_every),
            format!("probe_epochs={}", self.probe.epochs),
            format!("probe_lr={}", self.probe.lr),
            format!("probe_batch_size={}", self.probe.batch_size),
            format!("probe_val_fraction={}", self.probe.val_fraction),
            format!("baseline_ratio={}", self.baseline_ratio),
        ];
        if let Some(s) = &self.mask_schedule {
            let s: Vec<String> = s.iter().map(|r| r.to_string()).collect();
            lines.push(format!("mask_schedule={}", s.join(",")));
        }
        match &self.dataset {
            DataSource::Synthetic { count, seed } => {
                lines.push("dataset=synthetic".into());
                lines.push(format!("dataset_size={count}"));
                lines.push(format!("dataset_seed={seed}"));
            }
            DataSource::File(p) => lines.push(format!("dataset={}", p.display())),
        }
        for (key, path) in [
            ("resume", &self.resume),
            ("checkpoint", &self.checkpoint),
            ("backbone", &self.backbone),
        ] {
            if let Some(p) = path {
                lines.push(format!("{key}={}", p.display()));
            }
        }
        if !self.prefix_blocks.is_empty() {
            lines.push(format!("prefix_blocks={}", join(&self.prefix_blocks)));
        }
        if !self.trend_depths.is_empty() {
            lines.push(format!("trend_depths={}", join(&self.trend_depths)));
        }
        lines.join("\n") + "\n"
    }
}

/// Full-scale reference recipes; none of them is run at desk
/// scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Recipe {
    pub name: &'static str,
    pub optimizer: &'static str,
    pub base_lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// AdamW betas, or SGD-style momentum as `(m, 0)`.
    pub betas: (f64, f64),
    /// Not every recipe states one.
    pub warmup_epochs: Option<f64>,
    pub epochs: usize,
    pub notes: &'static str,
}

pub const RECIPES: &[Recipe] = &[
    Recipe {
        name: "pretrain",
        optimizer: "AdamW",
        base_lr: 1.5e-4,
        batch_size: 4096,
        weight_decay: 0.05,
        betas: (0.9, 0.95),
        warmup_epochs: Some(40.0),
        epochs: 800,
        notes: "cosine decay; 4 blocks for base/large, 2 for huge; batch 2048/4096/8192",
    },
    Recipe {
        name: "finetune",
        optimizer: "AdamW",
        base_lr: 5e-4,
        batch_size: 1024,
        weight_decay: 0.05,
        betas: (0.9, 0.999),
        warmup_epochs: None,
        epochs: 100,
        notes: "layer-wise lr decay 0.75; RandAug (9, 0.5); label smoothing 0.1; mixup 0.8; cutmix 1.0; \
                drop path 0.1/0.2/0.3; base lr 1e-3 and 50 epochs for large/huge",
    },
    Recipe {
        name: "linprobe",
        optimizer: "LARS",
        base_lr: 0.1,
        batch_size: 16384,
        weight_decay: 0.0,
        betas: (0.9, 0.0),
        warmup_epochs: Some(10.0),
        epochs: 90,
        notes: "momentum 0.9; cosine decay",
    },
];

pub fn recipe(name: &str) -> Option<&'static Recipe> {
    RECIPES.iter().find(|r| r.name == name)
}
