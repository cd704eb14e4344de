use crate::geometry::BoxCxCyWh;
use crate::tensor::{Tape, Var};

/// One (class logits, box, reconstructed feature) triple per object query.
#[derive(Clone, Copy, Debug)]
pub struct PredictionSet {
    /// `[N×K']` logits; `K' = 2` for the pretext task, `classes + 1` when detecting.
    pub class_logits: Var,
    /// `[N×4]` centre/size boxes, strictly inside `(0, 1)`.
    pub boxes: Var,
    /// `[N×C]` reconstructed backbone features.
    pub rec_features: Var,
}

impl PredictionSet {
    pub fn num_queries(&self, tape: &Tape) -> usize {
        tape.shape(self.boxes)[0]
    }

    /// Row-wise softmax of the class logits, computed off-tape.
    pub fn class_probs(&self, tape: &Tape) -> Vec<Vec<f64>> {
        let logits = tape.value(self.class_logits);
        (0..logits.rows()).map(|r| softmax(logits.row(r))).collect()
    }

    pub fn box_values(&self, tape: &Tape) -> Vec<BoxCxCyWh> {
        let b = tape.value(self.boxes);
        (0..b.rows()).map(|r| BoxCxCyWh::from_slice(b.row(r))).collect()
    }
}

pub(crate) fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}
