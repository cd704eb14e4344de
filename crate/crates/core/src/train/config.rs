use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelFlags};
use crate::pretext::{AugmentSpec, PretextConfig, SceneSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Pretrain,
    Finetune,
}

/// Everything a training run depends on, as one flat record.
///
/// Defaults depend on the mode; see [`TrainConfig::defaults`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub lr_transformer: f64,
    pub lr_backbone: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub lr_drop_epoch: usize,
    pub seed: u64,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<u64>,
    pub clip_max_norm: f64,
    /// Classification weight of "no object" slots when fine-tuning.
    pub no_object_weight: f64,
    /// Keep box targets for patches zeroed by patch dropout.
    pub keep_dropped_targets: bool,
    pub init_checkpoint: Option<PathBuf>,

    pub freeze_backbone: bool,
    pub use_attention_mask: bool,
    pub use_query_shuffle: bool,
    pub use_reconstruction: bool,
    pub aux_losses: bool,

    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    pub num_queries: usize,
    pub num_patches: usize,
    pub max_patches: usize,
    pub backbone_channels: usize,
    pub num_classes: usize,
    pub patch_side: usize,
    /// Seed of the shared initial backbone, independent of `seed` so that
    /// pretrained and scratch runs start from the same convolutional weights.
    pub backbone_seed: u64,

    /// Dataset directory (manifest plus optional ground truth). Synthetic
    /// scenes are generated when absent.
    pub data_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub train_images: usize,
    pub val_images: usize,
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub data_seed: u64,

    pub short_side_min: usize,
    pub short_side_max: usize,
    pub long_side_max: usize,
    pub min_crop_frac: f64,
    pub augment: bool,
    pub patch_dropout: f64,
}

/// Keys describing the optimization schedule; everything else is shared
/// between the pre-training and fine-tuning halves of an ablation.
pub const SCHEDULE_KEYS: &[&str] =
    &["mode", "epochs", "lr_transformer", "lr_backbone", "lr_drop_epoch", "batch_size", "max_steps", "init_checkpoint"];

impl TrainConfig {
    pub fn defaults(mode: TrainMode) -> Self {
        let m = ModelConfig::default();
        let p = PretextConfig::default();
        let (epochs, lr_drop_epoch, lr_transformer, lr_backbone) = match mode {
            TrainMode::Pretrain => (30, 20, 1e-3, 1e-4),
            TrainMode::Finetune => (60, 40, 1e-3, 5e-4),
        };
        TrainConfig {
            mode,
            epochs,
            lr_transformer,
            lr_backbone,
            weight_decay: 1e-4,
            batch_size: 8,
            lr_drop_epoch,
            seed: 0,
            max_steps: None,
            clip_max_norm: 0.1,
            no_object_weight: 0.1,
            keep_dropped_targets: false,
            init_checkpoint: None,
            freeze_backbone: m.flags.freeze_backbone,
            use_attention_mask: m.flags.use_attention_mask,
            use_query_shuffle: m.flags.use_query_shuffle,
            use_reconstruction: m.flags.use_reconstruction,
            aux_losses: m.flags.aux_losses,
            d_model: m.d_model,
            n_heads: m.n_heads,
            enc_layers: m.enc_layers,
            dec_layers: m.dec_layers,
            ffn_dim: m.ffn_dim,
            num_queries: m.num_queries,
            num_patches: m.num_patches,
            max_patches: m.max_patches,
            backbone_channels: m.backbone_channels,
            num_classes: m.num_classes,
            patch_side: m.patch_side,
            backbone_seed: 0,
            data_dir: None,
            val_dir: None,
            train_images: 256,
            val_images: 64,
            image_size: 64,
            min_objects: SceneSpec::default().min_shapes,
            max_objects: SceneSpec::default().max_shapes,
            data_seed: 0,
            short_side_min: p.short_range[0],
            short_side_max: p.short_range[1],
            long_side_max: p.long_max,
            min_crop_frac: p.min_crop_frac,
            augment: true,
            patch_dropout: p.dropout,
        }
    }

    pub fn is_key(name: &str) -> bool {
        let v = serde_json::to_value(Self::defaults(TrainMode::Pretrain)).expect("config serializes");
        v.as_object().is_some_and(|o| o.contains_key(name))
    }

    /// Mode defaults overlaid with the keys of a flat JSON object.
    pub fn from_value(v: &Value) -> Result<Self> {
        let obj = v.as_object().ok_or_else(|| Error::Config("training config must be a JSON object".into()))?;
        let mode = match obj.get("mode") {
            None => TrainMode::Pretrain,
            Some(m) => serde_json::from_value(m.clone())
                .map_err(|_| Error::Config(format!("key `mode`: expected \"pretrain\" or \"finetune\", got {m}")))?,
        };
        let mut cfg = Self::defaults(mode);
        cfg.apply(obj)?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        Self::from_value(&v)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Overwrites fields from `obj`, checking every key and value type.
    pub fn apply(&mut self, obj: &Map<String, Value>) -> Result<()> {
        let mut base = serde_json::to_value(&*self).expect("config serializes");
        let fields = base.as_object_mut().expect("config is an object");
        for (k, v) in obj {
            if !fields.contains_key(k) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
            let mut one = fields.clone();
            one.insert(k.clone(), v.clone());
            serde_json::from_value::<TrainConfig>(Value::Object(one))
                .map_err(|e| Error::Config(format!("key `{k}`: {e}")))?;
            fields.insert(k.clone(), v.clone());
        }
        *self = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        self.validate()
    }

    /// Applies `key value` string pairs; values are read as JSON when they
    /// parse and as plain strings otherwise.
    pub fn apply_overrides(&mut self, pairs: &[(String, String)]) -> Result<()> {
        let mut obj = Map::new();
        for (k, raw) in pairs {
            let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            obj.insert(k.clone(), v);
        }
        self.apply(&obj)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("key `epochs`: must be positive".into());
        }
        if self.lr_drop_epoch >= self.epochs {
            return bad(format!("key `lr_drop_epoch`: {} must be below epochs ({})", self.lr_drop_epoch, self.epochs));
        }
        for (k, v) in [("lr_transformer", self.lr_transformer), ("lr_backbone", self.lr_backbone)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("key `{k}`: learning rate must be positive, got {v}"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("key `weight_decay`: must be non-negative".into());
        }
        if self.batch_size == 0 {
            return bad("key `batch_size`: must be positive".into());
        }
        if self.clip_max_norm.is_nan() || self.clip_max_norm <= 0.0 {
            return bad("key `clip_max_norm`: must be positive".into());
        }
        if !(self.no_object_weight > 0.0 && self.no_object_weight <= 1.0) {
            return bad("key `no_object_weight`: must lie in (0, 1]".into());
        }
        if self.data_dir.is_none() && self.train_images == 0 {
            return bad("key `train_images`: must be positive".into());
        }
        if self.mode == TrainMode::Finetune && self.max_objects > self.num_queries {
            return bad(format!(
                "key `max_objects`: {} objects cannot be matched to {} queries",
                self.max_objects, self.num_queries
            ));
        }
        self.model_config().validate()?;
        self.pretext_config().validate()?;
        self.scene_spec().validate()
    }

    pub fn flags(&self) -> ModelFlags {
        ModelFlags {
            freeze_backbone: self.freeze_backbone,
            use_attention_mask: self.use_attention_mask,
            use_query_shuffle: self.use_query_shuffle,
            use_reconstruction: self.use_reconstruction,
            aux_losses: self.aux_losses,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            ffn_dim: self.ffn_dim,
            num_queries: self.num_queries,
            num_patches: self.num_patches,
            max_patches: self.max_patches,
            backbone_channels: self.backbone_channels,
            num_classes: self.num_classes,
            patch_side: self.patch_side,
            flags: self.flags(),
        }
    }

    pub fn pretext_config(&self) -> PretextConfig {
        PretextConfig {
            num_patches: self.num_patches,
            max_patches: self.max_patches,
            patch_side: self.patch_side,
            short_range: [self.short_side_min, self.short_side_max],
            long_max: self.long_side_max,
            min_crop_frac: self.min_crop_frac,
            augment: self.augment.then(AugmentSpec::default),
            dropout: self.patch_dropout,
        }
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            width: self.image_size,
            height: self.image_size,
            min_shapes: self.min_objects,
            max_shapes: self.max_objects,
            ..SceneSpec::default()
        }
    }
}
