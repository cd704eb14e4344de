//! Patch-conditioned transformer detector.
//!
//! A small convolutional backbone feeds a transformer encoder; the decoder
//! reads `N` object queries. For the pretext task each query also carries the
//! projected feature of the query patch assigned to its group, and decoder
//! self-attention can be restricted to within a group.

mod layers;
mod mask;
mod params;
mod prediction;

pub use layers::sine_position_encoding;
pub use mask::{build_attention_mask, group_assignment, group_of, shuffle_queries, AttentionMask};
pub use params::{Bound, ParamId, ParamStore};
pub use prediction::PredictionSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::pretext::{derive_seed, rng_for, ImageRaster, PretextSample};
use crate::tensor::{Tape, Tensor, Var};
use layers::{DecoderLayer, EncoderLayer, Linear};

/// Smallest image side the backbone accepts.
pub const MIN_IMAGE_SIDE: usize = 8;

/// Channel widths of the first two backbone stages; the third is `backbone_channels`.
const STEM_CHANNELS: [usize; 2] = [16, 32];

pub const BACKBONE_PREFIX: &str = "backbone.";
pub const CLASS_HEAD: &str = "head.class";

const META_CONFIG_KEY: &str = "meta.model_config";
const META_MODE_KEY: &str = "meta.head_mode";
const PARAM_PREFIX: &str = "param.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelFlags {
    pub freeze_backbone: bool,
    pub use_attention_mask: bool,
    pub use_query_shuffle: bool,
    pub use_reconstruction: bool,
    pub aux_losses: bool,
}

impl Default for ModelFlags {
    fn default() -> Self {
        ModelFlags {
            freeze_backbone: true,
            use_attention_mask: true,
            use_query_shuffle: false,
            use_reconstruction: true,
            aux_losses: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    /// Object queries (N).
    pub num_queries: usize,
    /// Query patches per pretext sample (M).
    pub num_patches: usize,
    pub max_patches: usize,
    pub backbone_channels: usize,
    /// Object classes for detection, not counting "no object".
    pub num_classes: usize,
    /// Side query patches are resized to before the backbone.
    pub patch_side: usize,
    pub flags: ModelFlags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ffn_dim: 128,
            num_queries: 16,
            num_patches: 4,
            max_patches: 16,
            backbone_channels: 64,
            num_classes: 3,
            patch_side: 16,
            flags: ModelFlags::default(),
        }
    }
}

const META_LEN: usize = 16;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if !self.d_model.is_multiple_of(2) {
            return bad("d_model must be even for the sine position encoding".into());
        }
        if self.dec_layers == 0 {
            return bad("dec_layers must be at least 1".into());
        }
        if self.ffn_dim == 0 || self.backbone_channels == 0 || self.num_classes == 0 {
            return bad("ffn_dim, backbone_channels and num_classes must be positive".into());
        }
        if self.patch_side < MIN_IMAGE_SIDE {
            return bad(format!("patch_side must be at least {MIN_IMAGE_SIDE}"));
        }
        if self.num_patches == 0 || self.num_patches > self.max_patches || self.max_patches > self.num_queries {
            return bad(format!(
                "need 1 <= num_patches ({}) <= max_patches ({}) <= num_queries ({})",
                self.num_patches, self.max_patches, self.num_queries
            ));
        }
        if !self.num_queries.is_multiple_of(self.num_patches) {
            return bad(format!(
                "num_queries {} is not divisible by num_patches {}",
                self.num_queries, self.num_patches
            ));
        }
        Ok(())
    }

    /// Flat numeric encoding stored alongside checkpoints.
    pub fn to_meta(&self) -> Tensor {
        let f = &self.flags;
        let b = |v: bool| if v { 1.0 } else { 0.0 };
        Tensor::vector(vec![
            self.d_model as f64,
            self.n_heads as f64,
            self.enc_layers as f64,
            self.dec_layers as f64,
            self.ffn_dim as f64,
            self.num_queries as f64,
            self.num_patches as f64,
            self.max_patches as f64,
            self.backbone_channels as f64,
            self.num_classes as f64,
            self.patch_side as f64,
            b(f.freeze_backbone),
            b(f.use_attention_mask),
            b(f.use_query_shuffle),
            b(f.use_reconstruction),
            b(f.aux_losses),
        ])
    }

    pub fn from_meta(t: &Tensor) -> Result<Self> {
        let v = t.data();
        if v.len() != META_LEN || v.iter().any(|x| !(x.is_finite() && *x >= 0.0 && x.fract() == 0.0 && *x < 1e9)) {
            return Err(Error::format("model config record", format!("{v:?}")));
        }
        let u = |i: usize| v[i] as usize;
        let cfg = ModelConfig {
            d_model: u(0),
            n_heads: u(1),
            enc_layers: u(2),
            dec_layers: u(3),
            ffn_dim: u(4),
            num_queries: u(5),
            num_patches: u(6),
            max_patches: u(7),
            backbone_channels: u(8),
            num_classes: u(9),
            patch_side: u(10),
            flags: ModelFlags {
                freeze_backbone: v[11] != 0.0,
                use_attention_mask: v[12] != 0.0,
                use_query_shuffle: v[13] != 0.0,
                use_reconstruction: v[14] != 0.0,
                aux_losses: v[15] != 0.0,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Which classification head is attached.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadMode {
    /// Two logits: "not this patch" / "this patch".
    Pretext,
    /// `num_classes + 1` logits, the last meaning "no object".
    Detection,
}

impl HeadMode {
    pub fn outputs(self, cfg: &ModelConfig) -> usize {
        match self {
            HeadMode::Pretext => 2,
            HeadMode::Detection => cfg.num_classes + 1,
        }
    }
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

/// Pretext forward pass output.
#[derive(Clone, Debug)]
pub struct PretextForward {
    /// One prediction set per decoder layer, final layer last.
    pub layers: Vec<PredictionSet>,
    /// `[C]` pooled backbone feature of each (padded) query patch.
    pub patch_features: Vec<Var>,
    /// Embedding index used at each query position.
    pub permutation: Vec<usize>,
}

/// Decoder output of one layer, with its self-attention internals.
/// Encoder output and the position encoding of each token.
#[derive(Clone, Copy, Debug)]
pub struct Memory {
    pub tokens: Var,
    pub pos: Var,
}

#[derive(Clone, Debug)]
pub struct DecoderTrace {
    pub output: Var,
    /// `[N×d]` self-attention block output, before the residual add.
    pub self_attention: Var,
    /// Per-head `[N×N]` self-attention weights.
    pub self_weights: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    mode: HeadMode,
    params: ParamStore,
    backbone: Vec<Conv>,
    input_proj: Linear,
    patch_proj: ParamId,
    query_embed: ParamId,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    class_head: Linear,
    box_head: [Linear; 3],
    rec_head: Linear,
}

impl Model {
    /// Randomly initialized model; the same `(config, mode, seed)` gives the same weights.
    pub fn new(config: ModelConfig, mode: HeadMode, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed);
        let mut ps = ParamStore::new();
        let c = &config;
        let d = c.d_model;

        let widths = [3, STEM_CHANNELS[0], STEM_CHANNELS[1], c.backbone_channels];
        let backbone = (0..3)
            .map(|i| {
                let (cin, cout) = (widths[i], widths[i + 1]);
                let fan_in = cin * 9;
                let bound = (6.0 / fan_in as f64).sqrt();
                Conv {
                    w: ps.add(
                        format!("{BACKBONE_PREFIX}conv{i}.w"),
                        Tensor::uniform(&[cout, cin, 3, 3], bound, &mut rng),
                    ),
                    b: ps.add(format!("{BACKBONE_PREFIX}conv{i}.b"), Tensor::full(&[cout], 0.01)),
                }
            })
            .collect();

        let input_proj = Linear::new(&mut ps, "input_proj", c.backbone_channels, d, &mut rng);
        let patch_proj = ps.add_weight("patch_proj.w".into(), c.backbone_channels, d, &mut rng);
        let query_embed = ps.add("query_embed", Tensor::uniform(&[c.num_queries, d], 3f64.sqrt(), &mut rng));
        let encoder = (0..c.enc_layers)
            .map(|i| EncoderLayer::new(&mut ps, &format!("encoder.{i}"), d, c.n_heads, c.ffn_dim, &mut rng))
            .collect();
        let decoder = (0..c.dec_layers)
            .map(|i| DecoderLayer::new(&mut ps, &format!("decoder.{i}"), d, c.n_heads, c.ffn_dim, &mut rng))
            .collect();
        let class_head = Linear::new(&mut ps, CLASS_HEAD, d, mode.outputs(c), &mut rng);
        let box_head = [
            Linear::new(&mut ps, "head.box0", d, d, &mut rng),
            Linear::new(&mut ps, "head.box1", d, d, &mut rng),
            Linear::new(&mut ps, "head.box2", d, 4, &mut rng),
        ];
        let rec_head = Linear::new(&mut ps, "head.rec", d, c.backbone_channels, &mut rng);

        Ok(Model {
            config,
            mode,
            params: ps,
            backbone,
            input_proj,
            patch_proj,
            query_embed,
            encoder,
            decoder,
            class_head,
            box_head,
            rec_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut ModelConfig {
        &mut self.config
    }

    pub fn mode(&self) -> HeadMode {
        self.mode
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn is_backbone(name: &str) -> bool {
        name.starts_with(BACKBONE_PREFIX)
    }

    pub fn is_class_head(name: &str) -> bool {
        name.starts_with(CLASS_HEAD)
    }

    /// Replaces the classification head with a fresh one for `mode`.
    pub fn reset_class_head(&mut self, mode: HeadMode, seed: u64) {
        let mut rng = rng_for(seed);
        let (d, k) = (self.config.d_model, mode.outputs(&self.config));
        let bound = (6.0 / (d + k) as f64).sqrt();
        self.params.replace(self.class_head.w, Tensor::uniform(&[d, k], bound, &mut rng));
        self.params.replace(self.class_head.b.expect("class head has a bias"), Tensor::zeros(&[k]));
        self.mode = mode;
    }

    /// Binds all weights; backbone weights become constants when `freeze_backbone`.
    pub fn bind(&self, tape: &mut Tape, freeze_backbone: bool) -> Bound {
        self.params.bind(tape, |n| !(freeze_backbone && Self::is_backbone(n)))
    }

    /// `[C×H/8×W/8]` feature map.
    pub fn backbone_forward(&self, tape: &mut Tape, p: &Bound, img: &ImageRaster) -> Result<Var> {
        if img.width() < MIN_IMAGE_SIDE || img.height() < MIN_IMAGE_SIDE {
            return Err(Error::Input(format!(
                "image {}×{} is smaller than the backbone minimum {MIN_IMAGE_SIDE}×{MIN_IMAGE_SIDE}",
                img.width(),
                img.height()
            )));
        }
        let mut t = img.to_tensor();
        for v in t.data_mut() {
            *v = (*v - 0.5) / 0.25;
        }
        let mut x = tape.constant(t);
        for conv in &self.backbone {
            x = tape.conv2d(x, p[conv.w], p[conv.b], 2, 1)?;
            x = tape.relu(x);
        }
        Ok(x)
    }

    /// `[C]` global average of the backbone response to `patch`.
    pub fn patch_feature(&self, tape: &mut Tape, p: &Bound, patch: &ImageRaster) -> Result<Var> {
        let f = self.backbone_forward(tape, p, patch)?;
        tape.global_average_pool(f)
    }

    /// Flattened, projected and position-encoded feature map through the encoder: `[HW×d]`.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, feature_map: Var) -> Result<Memory> {
        let s = tape.shape(feature_map).to_vec();
        if s.len() != 3 {
            return Err(Error::Contract(format!("encode expects C×H×W, got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let flat = tape.reshape(feature_map, &[c, h * w])?;
        let tokens = tape.transpose(flat)?;
        let x = self.input_proj.forward(tape, p, tokens)?;
        let pe = tape.constant(sine_position_encoding(h, w, self.config.d_model));
        let mut x = tape.add(x, pe)?;
        for layer in &self.encoder {
            x = layer.forward(tape, p, x, pe)?;
        }
        Ok(Memory { tokens: x, pos: pe })
    }

    /// Decoder input: `query_embed[perm[i]] + proj(patch[group(i)])` for each query position.
    pub fn assign_groups(&self, tape: &mut Tape, p: &Bound, patch_features: &[Var], perm: &[usize]) -> Result<Var> {
        let n = self.config.num_queries;
        if perm.len() != n {
            return Err(Error::Dimension { op: "assign_groups", lhs: vec![perm.len()], rhs: vec![n] });
        }
        let m = patch_features.len();
        let groups = group_assignment(n, m)?;
        let c = self.config.backbone_channels;
        let stacked = tape.concat_last(patch_features)?;
        let stacked = tape.reshape(stacked, &[m, c])?;
        let projected = tape.matmul(stacked, p[self.patch_proj])?;
        let per_query = tape.select_rows(projected, &groups)?;
        let queries = tape.embedding(p[self.query_embed], perm)?;
        tape.add(queries, per_query)
    }

    /// Runs the decoder. The inputs also serve as the query position
    /// signal re-added in every layer.
    pub fn decode(
        &self,
        tape: &mut Tape,
        p: &Bound,
        memory: Memory,
        inputs: Var,
        mask: Option<&AttentionMask>,
    ) -> Result<Vec<DecoderTrace>> {
        let mask = mask.map(AttentionMask::as_tensor);
        let keys = tape.add(memory.tokens, memory.pos)?;
        let mut x = inputs;
        let mut out = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let step = layer.forward(tape, p, x, inputs, memory.tokens, keys, mask)?;
            x = step.out;
            out.push(DecoderTrace {
                output: step.out,
                self_attention: step.self_attn,
                self_weights: step.self_weights,
            });
        }
        Ok(out)
    }

    pub fn heads(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<PredictionSet> {
        let class_logits = self.class_head.forward(tape, p, x)?;
        let mut h = x;
        for (i, l) in self.box_head.iter().enumerate() {
            h = l.forward(tape, p, h)?;
            if i < 2 {
                h = tape.relu(h);
            }
        }
        let boxes = tape.sigmoid(h);
        let rec_features = self.rec_head.forward(tape, p, x)?;
        Ok(PredictionSet { class_logits, boxes, rec_features })
    }

    fn predict_all(&self, tape: &mut Tape, p: &Bound, trace: &[DecoderTrace]) -> Result<Vec<PredictionSet>> {
        trace.iter().map(|t| self.heads(tape, p, t.output)).collect()
    }

    /// Pretext forward on an image with explicit query patches. The patch
    /// count must divide `num_queries`.
    pub fn forward_patches(
        &self,
        tape: &mut Tape,
        p: &Bound,
        image: &ImageRaster,
        patches: &[ImageRaster],
        shuffle_seed: u64,
    ) -> Result<PretextForward> {
        if self.mode != HeadMode::Pretext {
            return Err(Error::Contract("pretext forward needs the two-class head".into()));
        }
        let m = patches.len();
        if m > self.config.max_patches {
            return Err(Error::Capacity { what: "query patches", got: m, max: self.config.max_patches });
        }
        let flags = &self.config.flags;
        let n = self.config.num_queries;
        let fmap = self.backbone_forward(tape, p, image)?;
        let memory = self.encode(tape, p, fmap)?;
        let feats = patches.iter().map(|patch| self.patch_feature(tape, p, patch)).collect::<Result<Vec<_>>>()?;
        let perm = shuffle_queries(n, shuffle_seed, flags.use_query_shuffle);
        let inputs = self.assign_groups(tape, p, &feats, &perm)?;
        let mask = if flags.use_attention_mask { Some(build_attention_mask(n, m)?) } else { None };
        let trace = self.decode(tape, p, memory, inputs, mask.as_ref())?;
        Ok(PretextForward { layers: self.predict_all(tape, p, &trace)?, patch_features: feats, permutation: perm })
    }

    pub fn forward_pretrain(&self, tape: &mut Tape, p: &Bound, sample: &PretextSample) -> Result<PretextForward> {
        self.forward_patches(tape, p, &sample.image, &sample.patches, derive_seed(sample.seed, 4))
    }

    /// Plain detector forward: no patches, no mask, no shuffle.
    pub fn forward_detect(&self, tape: &mut Tape, p: &Bound, image: &ImageRaster) -> Result<Vec<PredictionSet>> {
        if self.mode != HeadMode::Detection {
            return Err(Error::Contract("detection forward needs the detection head".into()));
        }
        let fmap = self.backbone_forward(tape, p, image)?;
        let memory = self.encode(tape, p, fmap)?;
        let trace = self.decode(tape, p, memory, p[self.query_embed], None)?;
        self.predict_all(tape, p, &trace)
    }

    /// Copies every tensor of `other` whose name and shape match; returns
    /// the names that did not.
    pub fn load_matching(&mut self, other: &ParamStore, skip: impl Fn(&str) -> bool) -> Vec<String> {
        let mut bad = Vec::new();
        for id in self.params.ids() {
            let name = self.params.name(id).to_string();
            if skip(&name) {
                continue;
            }
            match other.by_name(&name) {
                Some(t) if t.shape() == self.params.get(id).shape() => {
                    self.params.replace(id, t.clone());
                }
                _ => bad.push(name),
            }
        }
        bad
    }

    /// Appends the configuration, head mode and every weight to `ck`.
    pub fn write_to(&self, ck: &mut Checkpoint) -> Result<()> {
        ck.push(META_CONFIG_KEY, self.config.to_meta())?;
        let mode = match self.mode {
            HeadMode::Pretext => 0.0,
            HeadMode::Detection => 1.0,
        };
        ck.push(META_MODE_KEY, Tensor::scalar(mode))?;
        for (name, t) in self.params.iter() {
            ck.push(format!("{PARAM_PREFIX}{name}"), t.clone())?;
        }
        Ok(())
    }

    /// Rebuilds a model written by [`write_to`](Self::write_to). Every
    /// weight must be present with its expected shape.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_meta(ck.require(META_CONFIG_KEY)?)?;
        let mode = match ck.require(META_MODE_KEY)?.data() {
            [m] if *m == 0.0 => HeadMode::Pretext,
            [m] if *m == 1.0 => HeadMode::Detection,
            other => return Err(Error::format("checkpoint", format!("head mode {other:?}"))),
        };
        let mut model = Model::new(config, mode, 0)?;
        let stored = Self::stored_params(ck);
        let mut bad = model.load_matching(&stored, |_| false);
        bad.extend(stored.iter().filter(|(n, _)| model.params.id(n).is_none()).map(|(n, _)| n.to_string()));
        if !bad.is_empty() {
            return Err(Error::Load(bad));
        }
        Ok(model)
    }

    /// The weights held in a checkpoint, under their parameter names.
    pub fn stored_params(ck: &Checkpoint) -> ParamStore {
        let mut ps = ParamStore::new();
        for (name, t) in ck.iter() {
            if let Some(n) = name.strip_prefix(PARAM_PREFIX) {
                ps.add(n, t.clone());
            }
        }
        ps
    }

    /// Uniform random perturbation of every weight, used by tests to move
    /// away from the symmetric initialization.
    pub fn jitter(&mut self, scale: f64, seed: u64) {
        let mut rng = rng_for(seed);
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            for v in self.params.get_mut(id).data_mut() {
                *v += rng.gen_range(-scale..=scale);
            }
        }
    }
}

#[cfg(test)]
mod tests;
