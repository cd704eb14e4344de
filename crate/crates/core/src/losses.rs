//! Hungarian set loss: weighted classification over every query, box
//! regression and feature reconstruction over matched queries.

use crate::error::{Error, Result};
use crate::geometry::{box_loss_var, BoxCxCyWh};
use crate::matcher::{build_cost, hungarian, Assignment};
use crate::model::PredictionSet;
use crate::tensor::{Tape, Tensor, Var, L2_NORM_EPS};

/// Pretext class indices: "does not match the query patch" / "matches it".
pub const NO_MATCH: usize = 0;
pub const MATCH: usize = 1;

/// A ground truth for one query set.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub class: usize,
    pub bbox: BoxCxCyWh,
    /// Backbone feature of the query patch; only used for reconstruction.
    pub feature: Option<Vec<f64>>,
}

/// How unmatched queries are labelled and weighted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SetLossSpec {
    pub background_class: usize,
    pub background_weight: f64,
    pub reconstruction: bool,
}

impl SetLossSpec {
    /// Pretext form: two classes, unmatched weight `M/N`.
    pub fn pretext(m: usize, n: usize, reconstruction: bool) -> Result<Self> {
        Ok(SetLossSpec { background_class: NO_MATCH, background_weight: class_balance_weight(m, n)?, reconstruction })
    }

    /// Detection form: `classes + 1` logits with a down-weighted "no object" class.
    pub fn detection(num_classes: usize, no_object_weight: f64) -> Self {
        SetLossSpec { background_class: num_classes, background_weight: no_object_weight, reconstruction: false }
    }
}

/// Weight of the "not matched" class when `m` patches share `n` queries.
pub fn class_balance_weight(m: usize, n: usize) -> Result<f64> {
    if m > n || n == 0 {
        return Err(Error::Capacity { what: "query patches per object query set", got: m, max: n });
    }
    Ok(m as f64 / n as f64)
}

/// Loss terms of one decoder layer; all one-element tensors on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LayerLoss {
    pub total: Var,
    pub cls: Var,
    pub boxes: Var,
    pub rec: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub cls: f64,
    pub boxes: f64,
    pub rec: f64,
}

impl LossValues {
    pub fn read(tape: &Tape, l: &LayerLoss) -> Self {
        LossValues {
            total: tape.value(l.total).item(),
            cls: tape.value(l.cls).item(),
            boxes: tape.value(l.boxes).item(),
            rec: tape.value(l.rec).item(),
        }
    }

    pub fn add(&mut self, o: &LossValues) {
        self.total += o.total;
        self.cls += o.cls;
        self.boxes += o.boxes;
        self.rec += o.rec;
    }

    pub fn scaled(&self, s: f64) -> Self {
        LossValues { total: self.total * s, cls: self.cls * s, boxes: self.boxes * s, rec: self.rec * s }
    }
}

/// Per-layer losses (last entry is the final decoder layer) and their sum.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub layers: Vec<LayerLoss>,
    pub total: Var,
}

impl LossBreakdown {
    pub fn final_layer(&self) -> &LayerLoss {
        self.layers.last().expect("at least one layer")
    }

    /// Sum of each component over all layers.
    pub fn values(&self, tape: &Tape) -> LossValues {
        let mut v = LossValues::default();
        for l in &self.layers {
            v.add(&LossValues::read(tape, l));
        }
        v
    }
}

/// `‖p/‖p‖ − p̂/‖p̂‖‖²` summed over rows of `[G×C]` inputs (or one `[C]` pair).
pub fn rec_loss(tape: &mut Tape, target: Var, pred: Var) -> Result<Var> {
    let a = tape.l2_normalize(target, L2_NORM_EPS);
    let b = tape.l2_normalize(pred, L2_NORM_EPS);
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.sum(sq))
}

/// `weight · CE(logits, class)` for a single query.
pub fn cls_loss(tape: &mut Tape, logits: Var, class: usize, weight: f64) -> Result<Var> {
    tape.cross_entropy(logits, &[class], Some(&[weight]))
}

/// Matches `preds` to `targets` off-tape.
pub fn match_predictions(tape: &Tape, preds: &PredictionSet, targets: &[Target]) -> Result<Assignment> {
    let probs = preds.class_probs(tape);
    let boxes = preds.box_values(tape);
    let gts: Vec<(usize, BoxCxCyWh)> = targets.iter().map(|t| (t.class, t.bbox)).collect();
    Ok(hungarian(&build_cost(&probs, &boxes, &gts)?))
}

/// Hungarian loss at a fixed assignment.
///
/// Every query contributes a classification term: matched queries toward
/// their target's class with weight 1, the rest toward the background class
/// with `spec.background_weight`. Matched queries add the box loss and, when
/// enabled, the reconstruction loss against the target feature.
pub fn hungarian_loss(
    tape: &mut Tape,
    preds: &PredictionSet,
    targets: &[Target],
    assignment: &Assignment,
    spec: &SetLossSpec,
) -> Result<LayerLoss> {
    let n = preds.num_queries(tape);
    if targets.len() > n {
        return Err(Error::Capacity { what: "targets per query set", got: targets.len(), max: n });
    }
    if !assignment.is_valid_for(targets.len(), n) {
        return Err(Error::Contract(format!(
            "assignment {:?} is not a matching of {} targets into {} queries",
            assignment.pairs,
            targets.len(),
            n
        )));
    }
    let mut classes = vec![spec.background_class; n];
    let mut weights = vec![spec.background_weight; n];
    for &(g, q) in &assignment.pairs {
        classes[q] = targets[g].class;
        weights[q] = 1.0;
    }
    let cls = tape.cross_entropy(preds.class_logits, &classes, Some(&weights))?;

    let (boxes, rec) = if targets.is_empty() {
        (tape.constant(Tensor::scalar(0.0)), tape.constant(Tensor::scalar(0.0)))
    } else {
        let rows: Vec<usize> = assignment.pairs.iter().map(|p| p.1).collect();
        let gt_boxes: Vec<BoxCxCyWh> = assignment.pairs.iter().map(|p| targets[p.0].bbox).collect();
        let matched = tape.select_rows(preds.boxes, &rows)?;
        let boxes = box_loss_var(tape, matched, &gt_boxes)?;
        let rec = if spec.reconstruction {
            let c = tape.shape(preds.rec_features)[1];
            let mut feats = Vec::with_capacity(rows.len() * c);
            for &(g, _) in &assignment.pairs {
                let f = targets[g]
                    .feature
                    .as_ref()
                    .ok_or_else(|| Error::Contract(format!("target {g} has no patch feature")))?;
                if f.len() != c {
                    return Err(Error::Dimension { op: "rec_loss", lhs: vec![f.len()], rhs: vec![c] });
                }
                feats.extend_from_slice(f);
            }
            let p = tape.constant(Tensor::new(vec![rows.len(), c], feats)?);
            let p_hat = tape.select_rows(preds.rec_features, &rows)?;
            rec_loss(tape, p, p_hat)?
        } else {
            tape.constant(Tensor::scalar(0.0))
        };
        (boxes, rec)
    };
    let total = tape.add_all(&[cls, boxes, rec])?;
    Ok(LayerLoss { total, cls, boxes, rec })
}

/// Matches and scores every decoder layer independently, summing the totals.
pub fn set_loss(
    tape: &mut Tape,
    layers: &[PredictionSet],
    targets: &[Target],
    spec: &SetLossSpec,
) -> Result<LossBreakdown> {
    let mut out = Vec::with_capacity(layers.len());
    for preds in layers {
        let a = match_predictions(tape, preds, targets)?;
        out.push(hungarian_loss(tape, preds, targets, &a, spec)?);
    }
    let totals: Vec<Var> = out.iter().map(|l| l.total).collect();
    let total = tape.add_all(&totals)?;
    Ok(LossBreakdown { layers: out, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check_at;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    fn preds_from(tape: &mut Tape, logits: Tensor, boxes: Tensor, rec: Tensor) -> PredictionSet {
        PredictionSet { class_logits: tape.param(logits), boxes: tape.param(boxes), rec_features: tape.param(rec) }
    }

    #[test]
    fn rec_loss_anchors() {
        let mut t = Tape::new();
        let p = Tensor::vector(vec![0.3, -1.2, 2.0, 0.7]);
        let neg = Tensor::vector(p.data().iter().map(|v| -v).collect());
        let scaled = Tensor::vector(p.data().iter().map(|v| 3.5 * v).collect());
        let pv = t.constant(p);
        let nv = t.constant(neg);
        let sv = t.constant(scaled);
        let same = rec_loss(&mut t, pv, pv).unwrap();
        assert_eq!(t.value(same).item(), 0.0);
        let anti = rec_loss(&mut t, pv, nv).unwrap();
        assert!((t.value(anti).item() - 4.0).abs() < 1e-12);
        let sc = rec_loss(&mut t, pv, sv).unwrap();
        assert!(t.value(sc).item().abs() < 1e-12);
        let rev = rec_loss(&mut t, nv, pv).unwrap();
        assert_eq!(t.value(rev).item(), t.value(anti).item());
    }

    #[test]
    fn cls_loss_examples() {
        let mut t = Tape::new();
        let u = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let l = cls_loss(&mut t, u, 1, 1.0).unwrap();
        assert!((t.value(l).item() - LN_2).abs() < 1e-15);
        let l = cls_loss(&mut t, u, 0, 0.1).unwrap();
        assert!((t.value(l).item() - 0.1 * LN_2).abs() < 1e-15);
        let s = t.constant(Tensor::vector(vec![-40.0, 40.0]));
        let l = cls_loss(&mut t, s, 1, 1.0).unwrap();
        assert!(t.value(l).item() < 1e-30);
    }

    #[test]
    fn class_balance() {
        assert_eq!(class_balance_weight(10, 100).unwrap(), 0.1);
        assert_eq!(class_balance_weight(4, 16).unwrap(), 0.25);
        assert!(class_balance_weight(11, 10).is_err());
    }

    #[test]
    fn perfect_predictions_cost_nothing() {
        let mut t = Tape::new();
        let gt = BoxCxCyWh::new(0.3, 0.6, 0.2, 0.4);
        let feat = vec![1.0, 2.0, -0.5];
        let logits = Tensor::matrix(&[&[-50.0, 50.0], &[50.0, -50.0], &[50.0, -50.0]]).unwrap();
        let boxes = Tensor::matrix(&[&gt.to_array(), &[0.5; 4], &[0.5; 4]]).unwrap();
        let rec = Tensor::matrix(&[&[2.0, 4.0, -1.0], &[1.0; 3], &[1.0; 3]]).unwrap();
        let p = preds_from(&mut t, logits, boxes, rec);
        let targets = vec![Target { class: MATCH, bbox: gt, feature: Some(feat) }];
        let spec = SetLossSpec::pretext(1, 3, true).unwrap();
        let a = match_predictions(&t, &p, &targets).unwrap();
        assert_eq!(a.pairs, vec![(0, 0)]);
        let l = hungarian_loss(&mut t, &p, &targets, &a, &spec).unwrap();
        assert!(t.value(l.total).item() < 1e-12, "{}", t.value(l.total).item());
    }

    fn random_instance(rng: &mut impl Rng) -> (Tensor, Tensor, Tensor, Vec<Target>) {
        let n = 4;
        let c = 3;
        let logits = Tensor::uniform(&[n, 2], 2.0, rng);
        let boxes = Tensor::new(vec![n, 4], (0..n * 4).map(|_| rng.gen_range(0.15..0.6)).collect()).unwrap();
        let rec = Tensor::uniform(&[n, c], 1.0, rng);
        let targets = vec![Target {
            class: MATCH,
            bbox: BoxCxCyWh::new(
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.1..0.5),
                rng.gen_range(0.1..0.5),
            ),
            feature: Some((0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        }];
        (logits, boxes, rec, targets)
    }

    #[test]
    fn loss_equals_hand_assembled_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (logits, boxes, rec, targets) = random_instance(&mut rng);
        let mut t = Tape::new();
        let p = preds_from(&mut t, logits.clone(), boxes.clone(), rec.clone());
        let spec = SetLossSpec::pretext(1, 4, true).unwrap();
        let a = match_predictions(&t, &p, &targets).unwrap();
        let l = hungarian_loss(&mut t, &p, &targets, &a, &spec).unwrap();
        let q = a.pairs[0].1;

        // independent recomputation with plain f64 arithmetic
        let ce = |row: &[f64], c: usize| {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            z.ln() - row[c]
        };
        let mut cls = 0.0;
        for r in 0..4 {
            cls += if r == q { ce(logits.row(r), MATCH) } else { 0.25 * ce(logits.row(r), NO_MATCH) };
        }
        let pb = BoxCxCyWh::from_slice(boxes.row(q));
        let bl = crate::geometry::box_loss_value(&pb, &targets[0].bbox);
        let norm = |v: &[f64]| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let (u, v) = (norm(targets[0].feature.as_ref().unwrap()), norm(rec.row(q)));
        let rl: f64 = u.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!((t.value(l.cls).item() - cls).abs() < 1e-12);
        assert!((t.value(l.boxes).item() - bl).abs() < 1e-12);
        assert!((t.value(l.rec).item() - rl).abs() < 1e-12);
        assert!((t.value(l.total).item() - (cls + bl + rl)).abs() < 1e-12);
    }

    #[test]
    fn gradients_pass_finite_differences_at_fixed_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let (logits, boxes, rec, targets) = random_instance(&mut rng);
            let spec = SetLossSpec::pretext(1, 4, true).unwrap();
            let a = {
                let mut t = Tape::new();
                let p = preds_from(&mut t, logits.clone(), boxes.clone(), rec.clone());
                match_predictions(&t, &p, &targets).unwrap()
            };
            // pack all three prediction tensors into one flat input
            let flat: Vec<f64> = logits.data().iter().chain(boxes.data()).chain(rec.data()).copied().collect();
            let input = Tensor::vector(flat);
            let f = |t: &mut Tape, x: Var| -> Result<Var> {
                let lg = t.narrow_last(x, 0, 8)?;
                let lg = t.reshape(lg, &[4, 2])?;
                let bx = t.narrow_last(x, 8, 16)?;
                let bx = t.reshape(bx, &[4, 4])?;
                let rc = t.narrow_last(x, 24, 12)?;
                let rc = t.reshape(rc, &[4, 3])?;
                let p = PredictionSet { class_logits: lg, boxes: bx, rec_features: rc };
                Ok(hungarian_loss(t, &p, &targets, &a, &spec)?.total)
            };
            let coords: Vec<usize> = (0..input.numel()).collect();
            let r = finite_diff_check_at(f, &input, 1e-5, &coords).unwrap();
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
    }

    #[test]
    fn no_targets_means_pure_negatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (logits, boxes, rec, _) = random_instance(&mut rng);
        let mut t = Tape::new();
        let p = preds_from(&mut t, logits, boxes, rec);
        let spec = SetLossSpec::pretext(2, 4, true).unwrap();
        let l = set_loss(&mut t, &[p], &[], &spec).unwrap();
        let v = l.values(&t);
        assert!(v.total.is_finite() && v.total > 0.0);
        assert_eq!(v.boxes, 0.0);
        assert_eq!(v.rec, 0.0);
        assert_eq!(v.total, v.cls);
    }

    #[test]
    fn replacing_a_matched_prediction_with_its_target_never_hurts() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let (logits, boxes, rec, targets) = random_instance(&mut rng);
            let spec = SetLossSpec::pretext(1, 4, true).unwrap();
            let mut t = Tape::new();
            let p = preds_from(&mut t, logits.clone(), boxes.clone(), rec.clone());
            let a = match_predictions(&t, &p, &targets).unwrap();
            let l = hungarian_loss(&mut t, &p, &targets, &a, &spec).unwrap();
            let before = t.value(l.total).item();
            let q = a.pairs[0].1;
            let mut b2 = boxes.clone();
            b2.data_mut()[q * 4..q * 4 + 4].copy_from_slice(&targets[0].bbox.to_array());
            let mut r2 = rec.clone();
            r2.data_mut()[q * 3..q * 3 + 3].copy_from_slice(targets[0].feature.as_ref().unwrap());
            let mut t2 = Tape::new();
            let p2 = preds_from(&mut t2, logits, b2, r2);
            let l2 = hungarian_loss(&mut t2, &p2, &targets, &a, &spec).unwrap();
            let after = t2.value(l2.total).item();
            assert!(after <= before + 1e-12);
        }
    }
}
