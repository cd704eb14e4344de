//! Pre-training and fine-tuning loops, AdamW and the ablation harness.

mod ablation;
mod config;
mod optim;

pub use ablation::{
    ablation_matrix, AblationCase, AblationConfig, AblationReport, AblationRow, ABLATION_CASES, FINETUNE_PREFIX,
    SUMMARY_FILE, TABLE_FILE,
};
pub use config::{TrainConfig, TrainMode, SCHEDULE_KEYS};
pub use optim::{adamw_step, clip_grad_norm, lr_schedule, AdamWParams, OptimizerState};

use std::path::Path;

use rand::seq::SliceRandom;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, write_csv, CurveRecord};
use crate::losses::{set_loss, LossValues, SetLossSpec, Target, MATCH};
use crate::model::{Bound, HeadMode, Model, ParamId, ParamStore};
use crate::pretext::{
    build_pretext_sample, derive_seed, load_detection_dir, rng_for, synth_image, DetectionSample, ImageRaster,
};
use crate::tensor::{Tape, Tensor, Var};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CURVES_FILE: &str = "curves.csv";
pub const CONFIG_FILE: &str = "config.json";

const EPOCH_KEY: &str = "train.epoch";
const BATCH_KEY: &str = "train.batch";
const ACC_KEY: &str = "train.acc";

/// Independent synthetic image streams drawn from `data_seed`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    /// Unlabelled scenes for pre-training.
    Pretext,
    /// Labelled fine-tuning scenes.
    Train,
    Val,
    /// Scenes never used for training, for localization checks.
    Heldout,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Pretext => 1,
            Split::Train => 2,
            Split::Val => 3,
            Split::Heldout => 4,
        }
    }
}

/// `n` synthetic scenes of the configured size from one split's stream.
pub fn synthetic_split(cfg: &TrainConfig, split: Split, n: usize) -> Result<Vec<DetectionSample>> {
    let base = derive_seed(cfg.data_seed, split.tag());
    let spec = cfg.scene_spec();
    (0..n).map(|i| synth_image(derive_seed(base, i as u64), &spec)).collect()
}

fn load_split(cfg: &TrainConfig, dir: Option<&Path>, split: Split, n: usize) -> Result<Vec<DetectionSample>> {
    let samples = match dir {
        Some(d) => load_detection_dir(d)?.into_iter().map(|(_, s)| s).collect(),
        None => synthetic_split(cfg, split, n)?,
    };
    if cfg.mode == TrainMode::Pretrain {
        return Ok(samples);
    }
    for s in &samples {
        if s.objects.len() > cfg.num_queries {
            return Err(Error::Input(format!(
                "a scene holds {} objects but the model has {} queries",
                s.objects.len(),
                cfg.num_queries
            )));
        }
        if let Some(o) = s.objects.iter().find(|o| o.class >= cfg.num_classes) {
            return Err(Error::Input(format!("object class {} is not below num_classes {}", o.class, cfg.num_classes)));
        }
    }
    Ok(samples)
}

enum Data {
    Pretext(Vec<ImageRaster>),
    Detection { train: Vec<DetectionSample>, val: Vec<DetectionSample> },
}

impl Data {
    fn load(cfg: &TrainConfig) -> Result<Self> {
        let data = match cfg.mode {
            TrainMode::Pretrain => Data::Pretext(
                load_split(cfg, cfg.data_dir.as_deref(), Split::Pretext, cfg.train_images)?
                    .into_iter()
                    .map(|s| s.image)
                    .collect(),
            ),
            TrainMode::Finetune => Data::Detection {
                train: load_split(cfg, cfg.data_dir.as_deref(), Split::Train, cfg.train_images)?,
                val: load_split(cfg, cfg.val_dir.as_deref(), Split::Val, cfg.val_images)?,
            },
        };
        if data.len() == 0 {
            return Err(Error::Input("the training set is empty".into()));
        }
        Ok(data)
    }

    fn len(&self) -> usize {
        match self {
            Data::Pretext(v) => v.len(),
            Data::Detection { train, .. } => train.len(),
        }
    }
}

fn head_mode(mode: TrainMode) -> HeadMode {
    match mode {
        TrainMode::Pretrain => HeadMode::Pretext,
        TrainMode::Finetune => HeadMode::Detection,
    }
}

/// Fresh weights for a run: transformer and heads from the run seed, the
/// backbone from `backbone_seed`.
pub fn initial_model(cfg: &TrainConfig, mode: HeadMode) -> Result<Model> {
    let mc = cfg.model_config();
    let mut model = Model::new(mc.clone(), mode, derive_seed(cfg.seed, 7))?;
    let donor = Model::new(mc, mode, derive_seed(cfg.backbone_seed, 8))?;
    let missing = model.load_matching(donor.params(), |n| !Model::is_backbone(n));
    debug_assert!(missing.is_empty());
    Ok(model)
}

/// Running sums over the samples seen so far in the current epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct EpochAcc {
    samples: usize,
    sum: LossValues,
}

impl EpochAcc {
    fn to_tensor(self) -> Tensor {
        let s = self.sum;
        Tensor::vector(vec![self.samples as f64, s.total, s.cls, s.boxes, s.rec])
    }

    fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.data() {
            [n, total, cls, boxes, rec] if n >= 0.0 && n.fract() == 0.0 => {
                Ok(EpochAcc { samples: n as usize, sum: LossValues { total, cls, boxes, rec } })
            }
            _ => Err(Error::format("checkpoint", "bad epoch accumulator")),
        }
    }
}

/// One training run in progress.
pub struct Trainer {
    cfg: TrainConfig,
    model: Model,
    opt: OptimizerState,
    hp: AdamWParams,
    data: Data,
    epoch: usize,
    batch: usize,
    acc: EpochAcc,
    records: Vec<CurveRecord>,
}

impl Trainer {
    /// Starts a run from `init_checkpoint` or from fresh weights.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        match &cfg.init_checkpoint {
            Some(path) => Self::from_weights(cfg, Some(&Model::stored_params(&Checkpoint::load(path)?))),
            None => Self::from_weights(cfg, None),
        }
    }

    /// Starts a run from `init` weights, or fresh ones when `None`.
    ///
    /// Fine-tuning always gets a new `num_classes + 1` head; every other
    /// tensor must be present in `init` with a matching shape.
    pub fn from_weights(cfg: &TrainConfig, init: Option<&ParamStore>) -> Result<Self> {
        cfg.validate()?;
        let mode = head_mode(cfg.mode);
        let mut model = initial_model(cfg, mode)?;
        if let Some(stored) = init {
            let skip = |n: &str| mode == HeadMode::Detection && Model::is_class_head(n);
            let bad = model.load_matching(stored, skip);
            if !bad.is_empty() {
                return Err(Error::Load(bad));
            }
        }
        Ok(Trainer {
            cfg: cfg.clone(),
            model,
            opt: OptimizerState::default(),
            hp: AdamWParams::default(),
            data: Data::load(cfg)?,
            epoch: 0,
            batch: 0,
            acc: EpochAcc::default(),
            records: Vec::new(),
        })
    }

    /// Continues a run saved by [`checkpoint`](Self::checkpoint). `records`
    /// are the curve records written so far.
    pub fn resume(cfg: &TrainConfig, ck: &Checkpoint, records: Vec<CurveRecord>) -> Result<Self> {
        cfg.validate()?;
        let model = Model::from_checkpoint(ck)?;
        if model.mode() != head_mode(cfg.mode) || *model.config() != cfg.model_config() {
            return Err(Error::Config("checkpoint was written by a different model or mode".into()));
        }
        let counter = |key: &str| -> Result<usize> {
            match *ck.require(key)?.data() {
                [v] if v >= 0.0 && v.fract() == 0.0 => Ok(v as usize),
                _ => Err(Error::format("checkpoint", format!("bad `{key}`"))),
            }
        };
        Ok(Trainer {
            cfg: cfg.clone(),
            model,
            opt: OptimizerState::read_from(ck)?,
            hp: AdamWParams::default(),
            data: Data::load(cfg)?,
            epoch: counter(EPOCH_KEY)?,
            batch: counter(BATCH_KEY)?,
            acc: EpochAcc::from_tensor(ck.require(ACC_KEY)?)?,
            records,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.opt
    }

    pub fn records(&self) -> &[CurveRecord] {
        &self.records
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn steps(&self) -> u64 {
        self.opt.step
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.epochs || self.cfg.max_steps.is_some_and(|m| self.opt.step >= m)
    }

    /// Trains until the epoch budget or the step limit is reached.
    pub fn run(&mut self) -> Result<()> {
        while !self.finished() {
            self.step()?;
        }
        Ok(())
    }

    /// Trains to the end of the current epoch (or the step limit).
    pub fn run_epoch(&mut self) -> Result<()> {
        let start = self.epoch;
        while self.epoch == start && !self.finished() {
            self.step()?;
        }
        Ok(())
    }

    fn epoch_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut rng_for(derive_seed(self.cfg.seed, 1000 + self.epoch as u64)));
        order
    }

    /// One optimizer step on the next batch; returns its mean losses.
    pub fn step(&mut self) -> Result<LossValues> {
        if self.finished() {
            return Err(Error::Contract("the run is already finished".into()));
        }
        let order = self.epoch_order();
        let bs = self.cfg.batch_size;
        let start = self.batch * bs;
        let end = (start + bs).min(order.len());
        let epoch_seed = derive_seed(self.cfg.seed, 2000 + self.epoch as u64);
        let batch: Vec<(usize, u64)> =
            (start..end).map(|pos| (order[pos], derive_seed(epoch_seed, pos as u64))).collect();

        let mut tape = Tape::new();
        let frozen = self.cfg.mode == TrainMode::Pretrain && self.cfg.freeze_backbone;
        let p = self.model.bind(&mut tape, frozen);
        let mut totals = Vec::with_capacity(batch.len());
        let mut sum = LossValues::default();
        for &(idx, seed) in &batch {
            let (total, values) = self.sample_loss(&mut tape, &p, idx, seed)?;
            totals.push(total);
            sum.add(&values);
        }
        let n = batch.len() as f64;
        let joint = tape.add_all(&totals)?;
        let loss = tape.scale(joint, 1.0 / n);
        let mean = sum.scaled(1.0 / n);
        if !mean.total.is_finite() {
            return Err(Error::Contract(format!(
                "loss became non-finite at epoch {} step {}",
                self.epoch + 1,
                self.opt.step + 1
            )));
        }
        tape.backward(loss)?;
        let grads = p.grads(&tape);
        self.apply_grads(grads);

        self.acc.samples += batch.len();
        self.acc.sum.add(&sum);
        self.batch += 1;
        if end == order.len() {
            self.finish_epoch()?;
        }
        Ok(mean)
    }

    fn sample_loss(&self, tape: &mut Tape, p: &Bound, idx: usize, seed: u64) -> Result<(Var, LossValues)> {
        let cfg = &self.cfg;
        let (layers, targets, spec) = match &self.data {
            Data::Pretext(images) => {
                let sample = build_pretext_sample(&images[idx], &cfg.pretext_config(), seed)?;
                let out = self.model.forward_pretrain(tape, p, &sample)?;
                let targets: Vec<Target> = (0..sample.patches.len())
                    .filter(|&k| cfg.keep_dropped_targets || !sample.dropped[k])
                    .map(|k| Target {
                        class: MATCH,
                        bbox: sample.gt_boxes[k],
                        feature: Some(tape.value(out.patch_features[k]).data().to_vec()),
                    })
                    .collect();
                let spec = SetLossSpec::pretext(cfg.num_patches, cfg.num_queries, cfg.use_reconstruction)?;
                (out.layers, targets, spec)
            }
            Data::Detection { train, .. } => {
                let s = &train[idx];
                let layers = self.model.forward_detect(tape, p, &s.image)?;
                let targets =
                    s.objects.iter().map(|o| Target { class: o.class, bbox: o.bbox, feature: None }).collect();
                (layers, targets, SetLossSpec::detection(cfg.num_classes, cfg.no_object_weight))
            }
        };
        let used = if cfg.aux_losses { &layers[..] } else { &layers[layers.len() - 1..] };
        let l = set_loss(tape, used, &targets, &spec)?;
        Ok((l.total, l.values(tape)))
    }

    fn apply_grads(&mut self, grads: Vec<Option<Tensor>>) {
        let ids: Vec<ParamId> = self.model.params().ids().collect();
        let mut present: Vec<(ParamId, Tensor)> =
            ids.into_iter().zip(grads).filter_map(|(id, g)| g.map(|g| (id, g))).collect();
        {
            let mut slices: Vec<&mut [f64]> = present.iter_mut().map(|(_, g)| g.data_mut()).collect();
            clip_grad_norm(&mut slices, self.cfg.clip_max_norm);
        }
        self.opt.step += 1;
        let sched = lr_schedule(self.epoch, self.cfg.lr_drop_epoch);
        for (id, g) in present {
            let name = self.model.params().name(id).to_string();
            let base = if Model::is_backbone(&name) { self.cfg.lr_backbone } else { self.cfg.lr_transformer };
            let (m, v) =
                self.opt.moments.entry(name).or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            adamw_step(
                self.model.params_mut().get_mut(id).data_mut(),
                g.data(),
                m.data_mut(),
                v.data_mut(),
                self.opt.step,
                base * sched,
                self.cfg.weight_decay,
                &self.hp,
            );
        }
    }

    fn finish_epoch(&mut self) -> Result<()> {
        let e = self.epoch + 1;
        let mean = self.acc.sum.scaled(1.0 / self.acc.samples.max(1) as f64);
        for (metric, v) in
            [("loss_total", mean.total), ("loss_cls", mean.cls), ("loss_box", mean.boxes), ("loss_rec", mean.rec)]
        {
            self.records.push(CurveRecord::new(e, "train", metric, v));
        }
        if let Data::Detection { val, .. } = &self.data {
            if !val.is_empty() {
                let r = evaluate_model(&self.model, val)?;
                for (metric, v) in [("ap", r.overall.ap), ("ap50", r.overall.ap50), ("ap75", r.overall.ap75)] {
                    self.records.push(CurveRecord::new(e, "val", metric, v));
                }
            }
        }
        self.epoch = e;
        self.batch = 0;
        self.acc = EpochAcc::default();
        Ok(())
    }

    /// Model, optimizer state and position in the schedule.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        self.model.write_to(&mut ck)?;
        self.opt.write_to(&mut ck)?;
        ck.push(EPOCH_KEY, Tensor::scalar(self.epoch as f64))?;
        ck.push(BATCH_KEY, Tensor::scalar(self.batch as f64))?;
        ck.push(ACC_KEY, self.acc.to_tensor())?;
        Ok(ck)
    }

    /// Writes the checkpoint, the curve CSV and the resolved config into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.checkpoint()?.save(&dir.join(CHECKPOINT_FILE))?;
        write_csv(&dir.join(CURVES_FILE), &self.records)?;
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, self.cfg.to_json() + "\n").map_err(|e| Error::io(&path, e))
    }
}

fn run_mode(cfg: &TrainConfig, mode: TrainMode) -> Result<Trainer> {
    if cfg.mode != mode {
        return Err(Error::Config(format!("key `mode`: expected {mode:?}, got {:?}", cfg.mode)));
    }
    let mut t = Trainer::new(cfg)?;
    t.run()?;
    Ok(t)
}

/// Label-free pre-training on random query patches.
pub fn pretrain(cfg: &TrainConfig) -> Result<Trainer> {
    run_mode(cfg, TrainMode::Pretrain)
}

/// Supervised detection training, from `init_checkpoint` or from scratch.
pub fn finetune(cfg: &TrainConfig) -> Result<Trainer> {
    run_mode(cfg, TrainMode::Finetune)
}

#[cfg(test)]
mod tests;
