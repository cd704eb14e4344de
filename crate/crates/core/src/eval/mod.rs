//! Detection metrics, learning-curve files and patch localization.

mod ap;
mod curves;

pub use ap::{
    average_precision, coco_thresholds, evaluate, interpolated_ap, ApReport, ApTriple, Detection, DetectionResult,
};
pub use curves::{
    compare, parse_csv, read_csv, series, to_csv, write_csv, Comparison, CurveRecord, NamedRun, CSV_HEADER,
};

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::losses::MATCH;
use crate::model::{group_of, HeadMode, Model, PredictionSet};
use crate::pretext::{DetectionSample, ImageRaster, LabeledBox};
use crate::tensor::Tape;

/// Match probability a localization must exceed to count as a detection.
pub const LOCATE_CONFIDENCE: f64 = 0.9;

/// One detection per query: the most likely real class and its probability.
pub fn detections_from_predictions(tape: &Tape, preds: &PredictionSet, num_classes: usize) -> DetectionResult {
    preds
        .class_probs(tape)
        .iter()
        .zip(preds.box_values(tape))
        .map(|(p, bbox)| {
            let (class, confidence) = p[..num_classes]
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (c, v)| if v > best.1 { (c, v) } else { best });
            Detection { class, confidence, bbox }
        })
        .collect()
}

/// Runs a detection model over `samples` and scores it.
pub fn evaluate_model(model: &Model, samples: &[DetectionSample]) -> Result<ApReport> {
    let k = model.config().num_classes;
    let mut results = Vec::with_capacity(samples.len());
    for s in samples {
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, true);
        let layers = model.forward_detect(&mut tape, &p, &s.image)?;
        results.push(detections_from_predictions(&tape, layers.last().expect("decoder layers"), k));
    }
    let gts: Vec<Vec<LabeledBox>> = samples.iter().map(|s| s.objects.clone()).collect();
    Ok(evaluate(&results, &gts, k))
}

/// Best query of one patch's group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocateRow {
    pub patch_index: usize,
    pub confidence: f64,
    pub bbox: crate::geometry::BoxCxCyWh,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LocateReport {
    pub rows: Vec<LocateRow>,
}

impl LocateReport {
    /// Rows whose confidence exceeds [`LOCATE_CONFIDENCE`], as detections
    /// labelled by patch index.
    pub fn detections(&self) -> DetectionResult {
        self.rows
            .iter()
            .filter(|r| r.confidence > LOCATE_CONFIDENCE)
            .map(|r| Detection { class: r.patch_index, confidence: r.confidence, bbox: r.bbox })
            .collect()
    }

    /// `patch_index confidence cx cy w h`, one line per patch.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let b = r.bbox;
            writeln!(s, "{} {:.6} {:.6} {:.6} {:.6} {:.6}", r.patch_index, r.confidence, b.cx, b.cy, b.w, b.h).unwrap();
        }
        s
    }
}

/// Group count used to place `k` patches: the smallest divisor of the
/// query count that is at least `k` and the trained patch count.
fn groups_for(model: &Model, k: usize) -> Option<usize> {
    let c = model.config();
    (k.max(c.num_patches)..=c.num_queries).find(|g| c.num_queries.is_multiple_of(*g))
}

/// Localizes each query patch in `image` with a pretext model.
///
/// Patches are resized to the model's patch side; missing group slots are
/// filled with zero patches. Every patch gets a row from the most confident
/// query of its group.
pub fn locate(model: &Model, image: &ImageRaster, patches: &[ImageRaster]) -> Result<LocateReport> {
    if model.mode() != HeadMode::Pretext {
        return Err(Error::Contract("locate needs a pretext model".into()));
    }
    let cfg = model.config();
    if patches.len() > cfg.max_patches {
        return Err(Error::Capacity { what: "query patches", got: patches.len(), max: cfg.max_patches });
    }
    if patches.is_empty() {
        return Ok(LocateReport::default());
    }
    let m = groups_for(model, patches.len()).ok_or(Error::Capacity {
        what: "query patches",
        got: patches.len(),
        max: cfg.num_queries,
    })?;
    let side = cfg.patch_side;
    let mut padded: Vec<ImageRaster> = patches.iter().map(|p| p.resize(side, side)).collect();
    padded.resize(m, ImageRaster::filled(side, side, [0, 0, 0]));

    let mut tape = Tape::new();
    let p = model.bind(&mut tape, true);
    let out = model.forward_patches(&mut tape, &p, image, &padded, 0)?;
    let last = out.layers.last().expect("decoder layers");
    let probs = last.class_probs(&tape);
    let boxes = last.box_values(&tape);
    let n = cfg.num_queries;
    let mut rows = Vec::with_capacity(patches.len());
    for k in 0..patches.len() {
        let best = (0..n)
            .filter(|&q| group_of(q, n, m) == k)
            .max_by(|&a, &b| probs[a][MATCH].total_cmp(&probs[b][MATCH]).then(b.cmp(&a)))
            .expect("non-empty group");
        rows.push(LocateRow { patch_index: k, confidence: probs[best][MATCH], bbox: boxes[best] });
    }
    Ok(LocateReport { rows })
}
