//! Finite-difference verification of every differentiable operation.

use rand::Rng;

use crate::error::Result;
use crate::geometry::{box_loss_var, giou_var, BoxCxCyWh};
use crate::losses::{hungarian_loss, match_predictions, rec_loss, set_loss, SetLossSpec, Target, MATCH};
use crate::matcher::Assignment;
use crate::model::{HeadMode, Model, ModelConfig, ModelFlags, PredictionSet};
use crate::pretext::{rng_for, synth_image, ImageRaster, SceneSpec};
use crate::tensor::{finite_diff_check, finite_diff_check_at, Tape, Tensor, Var, L2_NORM_EPS, LAYER_NORM_EPS, MASKED};

pub const FD_STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

type OpFn = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;
type InputFn = Box<dyn Fn(&mut dyn rand::RngCore) -> Tensor>;

struct OpCase {
    name: &'static str,
    input: InputFn,
    f: OpFn,
}

fn uniform(shape: &'static [usize], lo: f64, hi: f64) -> InputFn {
    Box::new(move |rng| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("static shape")
    })
}

/// Contracts an op's output with fixed pseudo-random weights so every
/// output element contributes to the scalar.
fn project(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut rng = rng_for(0xC0FFEE);
    let w = Tensor::uniform(&shape, 1.0, &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn rows(tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
    Ok((tape.select_rows(x, &[0])?, tape.select_rows(x, &[1])?))
}

fn cases() -> Vec<OpCase> {
    let mut v: Vec<OpCase> = Vec::new();
    let mut add = |name: &'static str, input: InputFn, f: OpFn| v.push(OpCase { name, input, f });
    add(
        "add",
        uniform(&[2, 5], -1.0, 1.0),
        Box::new(|t, x| {
            let (a, b) = rows(t, x)?;
            let y = t.add(a, b)?;
            project(t, y)
        }),
    );
    add(
        "sub",
        uniform(&[2, 5], -1.0, 1.0),
        Box::new(|t, x| {
            let (a, b) = rows(t, x)?;
            let y = t.sub(a, b)?;
            project(t, y)
        }),
    );
    add(
        "mul",
        uniform(&[2, 5], -1.0, 1.0),
        Box::new(|t, x| {
            let (a, b) = rows(t, x)?;
            let y = t.mul(a, b)?;
            project(t, y)
        }),
    );
    add(
        "div",
        uniform(&[2, 5], 0.5, 1.5),
        Box::new(|t, x| {
            let (a, b) = rows(t, x)?;
            let y = t.div(a, b)?;
            project(t, y)
        }),
    );
    add(
        "maximum",
        uniform(&[2, 5], -1.0, 1.0),
        Box::new(|t, x| {
            let (a, b) = rows(t, x)?;
            let y = t.maximum(a, b)?;
            project(t, y)
        }),
    );
    add(
        "minimum",
        uniform(&[2, 5], -1.0, 1.0),
        Box::new(|t, x| {
            let (a, b) = rows(t, x)?;
            let y = t.minimum(a, b)?;
            project(t, y)
        }),
    );
    add(
        "add_row",
        uniform(&[4, 3], -1.0, 1.0),
        Box::new(|t, x| {
            let r = t.select_rows(x, &[3])?;
            let r = t.reshape(r, &[3])?;
            let y = t.add_row(x, r)?;
            project(t, y)
        }),
    );
    add(
        "scale",
        uniform(&[6], -1.0, 1.0),
        Box::new(|t, x| {
            let y = t.scale(x, -2.5);
            project(t, y)
        }),
    );
    add(
        "add_scalar",
        uniform(&[6], -1.0, 1.0),
        Box::new(|t, x| {
            let y = t.add_scalar(x, 0.7);
            let y = t.mul(y, y)?;
            project(t, y)
        }),
    );
    add(
        "relu",
        uniform(&[8], -1.0, 1.0),
        Box::new(|t, x| {
            let y = t.relu(x);
            project(t, y)
        }),
    );
    add(
        "sigmoid",
        uniform(&[8], -3.0, 3.0),
        Box::new(|t, x| {
            let y = t.sigmoid(x);
            project(t, y)
        }),
    );
    add(
        "abs",
        uniform(&[8], -1.0, 1.0),
        Box::new(|t, x| {
            let y = t.abs(x);
            project(t, y)
        }),
    );
    add(
        "clamp_min",
        uniform(&[8], -1.0, 1.0),
        Box::new(|t, x| {
            let y = t.clamp_min(x, 0.1);
            project(t, y)
        }),
    );
    add(
        "matmul",
        uniform(&[7, 3], -1.0, 1.0),
        Box::new(|t, x| {
            let a = t.select_rows(x, &[0, 1, 2, 3])?;
            let b = t.select_rows(x, &[4, 5, 6])?;
            let y = t.matmul(a, b)?;
            project(t, y)
        }),
    );
    add(
        "linear",
        uniform(&[8, 3], -1.0, 1.0),
        Box::new(|t, x| {
            let a = t.select_rows(x, &[0, 1, 2, 3])?;
            let w = t.select_rows(x, &[4, 5, 6])?;
            let b = t.select_rows(x, &[7])?;
            let b = t.reshape(b, &[3])?;
            let y = t.linear(a, w, b)?;
            project(t, y)
        }),
    );
    add(
        "transpose",
        uniform(&[3, 4], -1.0, 1.0),
        Box::new(|t, x| {
            let y = t.transpose(x)?;
            project(t, y)
        }),
    );
    add(
        "reshape",
        uniform(&[3, 4], -1.0, 1.0),
        Box::new(|t, x| {
            let y = t.reshape(x, &[2, 6])?;
            project(t, y)
        }),
    );
    add(
        "concat_last",
        uniform(&[3, 4], -1.0, 1.0),
        Box::new(|t, x| {
            let a = t.narrow_last(x, 0, 1)?;
            let b = t.narrow_last(x, 1, 3)?;
            let y = t.concat_last(&[b, a, x])?;
            project(t, y)
        }),
    );
    add(
        "narrow_last",
        uniform(&[3, 5], -1.0, 1.0),
        Box::new(|t, x| {
            let y = t.narrow_last(x, 1, 3)?;
            project(t, y)
        }),
    );
    add(
        "select_rows",
        uniform(&[4, 3], -1.0, 1.0),
        Box::new(|t, x| {
            let y = t.select_rows(x, &[2, 0, 2, 3])?;
            project(t, y)
        }),
    );
    add(
        "sum",
        uniform(&[2, 3], -1.0, 1.0),
        Box::new(|t, x| {
            let s = t.sum(x);
            t.mul(s, s)
        }),
    );
    add(
        "mean",
        uniform(&[2, 3], -1.0, 1.0),
        Box::new(|t, x| {
            let s = t.mean(x);
            t.mul(s, s)
        }),
    );
    add(
        "softmax",
        uniform(&[3, 4], -2.0, 2.0),
        Box::new(|t, x| {
            let y = t.softmax(x)?;
            project(t, y)
        }),
    );
    add(
        "softmax_masked",
        uniform(&[2, 4, 4], -2.0, 2.0),
        Box::new(|t, x| {
            let mut m = Tensor::zeros(&[4, 4]);
            for (i, j) in [(0, 1), (0, 3), (2, 0), (3, 2)] {
                m.data_mut()[i * 4 + j] = MASKED;
            }
            let y = t.softmax_masked(x, Some(&m))?;
            project(t, y)
        }),
    );
    add(
        "layer_norm",
        uniform(&[5, 4], -1.0, 1.0),
        Box::new(|t, x| {
            let data = t.narrow_last(x, 0, 4)?;
            let data = t.select_rows(data, &[0, 1, 2])?;
            let g = t.select_rows(x, &[3])?;
            let g = t.reshape(g, &[4])?;
            let b = t.select_rows(x, &[4])?;
            let b = t.reshape(b, &[4])?;
            let y = t.layer_norm(data, g, b, LAYER_NORM_EPS)?;
            project(t, y)
        }),
    );
    add(
        "global_average_pool",
        uniform(&[3, 2, 3], -1.0, 1.0),
        Box::new(|t, x| {
            let y = t.global_average_pool(x)?;
            project(t, y)
        }),
    );
    add(
        "l2_normalize",
        uniform(&[3, 4], -1.0, 1.0),
        Box::new(|t, x| {
            let y = t.l2_normalize(x, L2_NORM_EPS);
            project(t, y)
        }),
    );
    add(
        "cross_entropy",
        uniform(&[4, 3], -2.0, 2.0),
        Box::new(|t, x| t.cross_entropy(x, &[0, 2, 1, 2], Some(&[1.0, 0.25, 0.25, 1.0]))),
    );
    add(
        "conv2d_input",
        uniform(&[2, 5, 5], -1.0, 1.0),
        Box::new(|t, x| {
            let mut rng = rng_for(7);
            let w = t.constant(Tensor::uniform(&[3, 2, 3, 3], 1.0, &mut rng));
            let b = t.constant(Tensor::uniform(&[3], 1.0, &mut rng));
            let y = t.conv2d(x, w, b, 2, 1)?;
            project(t, y)
        }),
    );
    add(
        "conv2d_weight",
        uniform(&[3, 2, 3, 3], -1.0, 1.0),
        Box::new(|t, w| {
            let mut rng = rng_for(8);
            let x = t.constant(Tensor::uniform(&[2, 6, 5], 1.0, &mut rng));
            let b = t.constant(Tensor::uniform(&[3], 1.0, &mut rng));
            let y = t.conv2d(x, w, b, 1, 1)?;
            project(t, y)
        }),
    );
    add(
        "giou",
        Box::new(|rng| clear_of_kinks(rng, &random_boxes(&mut rng_for(9), 3))),
        Box::new(|t, x| {
            let mut rng = rng_for(9);
            let gt = t.constant(random_boxes(&mut rng, 3));
            let y = giou_var(t, x, gt)?;
            project(t, y)
        }),
    );
    add(
        "box_loss",
        Box::new(|rng| clear_of_kinks(rng, &random_boxes(&mut rng_for(10), 3))),
        Box::new(|t, x| {
            let mut rng = rng_for(10);
            let gt = random_boxes(&mut rng, 3);
            let targets: Vec<BoxCxCyWh> = (0..3).map(|r| BoxCxCyWh::from_slice(gt.row(r))).collect();
            box_loss_var(t, x, &targets)
        }),
    );
    add(
        "rec_loss",
        uniform(&[3, 5], -1.0, 1.0),
        Box::new(|t, x| {
            let mut rng = rng_for(11);
            let target = t.constant(Tensor::uniform(&[3, 5], 1.0, &mut rng));
            rec_loss(t, target, x)
        }),
    );
    add(
        "hungarian_loss",
        uniform(&[5, 11], -1.0, 1.0),
        Box::new(|t, x| {
            // columns: 2 logits, 4 box pre-activations, 5 reconstruction features
            let logits = t.narrow_last(x, 0, 2)?;
            let pre = t.narrow_last(x, 2, 4)?;
            let boxes = t.sigmoid(pre);
            let rec = t.narrow_last(x, 6, 5)?;
            let preds = PredictionSet { class_logits: logits, boxes, rec_features: rec };
            let mut rng = rng_for(12);
            let targets: Vec<Target> = (0..2)
                .map(|_| Target {
                    class: MATCH,
                    bbox: BoxCxCyWh::from_slice(random_boxes(&mut rng, 1).data()),
                    feature: Some((0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()),
                })
                .collect();
            let a = Assignment { pairs: vec![(0, 3), (1, 1)] };
            let spec = SetLossSpec::pretext(2, 5, true)?;
            Ok(hungarian_loss(t, &preds, &targets, &a, &spec)?.total)
        }),
    );
    v
}

fn random_boxes(rng: &mut dyn rand::RngCore, n: usize) -> Tensor {
    let data = (0..n)
        .flat_map(|_| {
            [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.5)]
        })
        .collect();
    Tensor::new(vec![n, 4], data).expect("n×4")
}

fn edges(b: &[f64]) -> [f64; 4] {
    [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0]
}

/// Draws boxes that sit well away from every non-smooth point of the box
/// losses against the matching `gt` row: no edge or coordinate within a
/// margin of its counterpart, and no containment along either axis (there
/// the centre moves no active edge and its gradient is exactly zero).
fn clear_of_kinks(rng: &mut dyn rand::RngCore, gt: &Tensor) -> Tensor {
    const MARGIN: f64 = 1e-3;
    let n = gt.shape()[0];
    loop {
        let cand = random_boxes(rng, n);
        let ok = (0..n).all(|i| {
            let pb = &cand.data()[i * 4..i * 4 + 4];
            let gb = &gt.data()[i * 4..i * 4 + 4];
            let (p, g) = (edges(pb), edges(gb));
            let apart = pb.iter().zip(gb).all(|(a, b)| (a - b).abs() > MARGIN)
                && [(0, 0), (0, 2), (2, 0), (2, 2), (1, 1), (1, 3), (3, 1), (3, 3)]
                    .iter()
                    .all(|&(a, b)| (p[a] - g[b]).abs() > MARGIN);
            let nested = |lo: usize, hi: usize| (p[lo] < g[lo] && g[hi] < p[hi]) || (g[lo] < p[lo] && p[hi] < g[hi]);
            apart && !nested(0, 2) && !nested(1, 3)
        });
        if ok {
            return cand;
        }
    }
}

/// Checks every operation at `trials` random inputs.
pub fn op_suite(trials: usize, seed: u64) -> Result<Vec<OpReport>> {
    let mut rng = rng_for(seed);
    cases()
        .into_iter()
        .map(|case| {
            let mut worst: f64 = 0.0;
            for _ in 0..trials {
                let x = (case.input)(&mut rng);
                let r = finite_diff_check(&case.f, &x, FD_STEP)?;
                worst = worst.max(r.max_rel_error);
            }
            Ok(OpReport { name: case.name.to_string(), max_rel_error: worst, tolerance: OP_TOLERANCE })
        })
        .collect()
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ffn_dim: 32,
        num_queries: 4,
        num_patches: 2,
        max_patches: 4,
        backbone_channels: 8,
        num_classes: 3,
        patch_side: 12,
        flags: ModelFlags { freeze_backbone: false, ..ModelFlags::default() },
    }
}

/// Gradient of the pretext set loss with respect to a random `fraction` of
/// all weights of a tiny unfrozen model, at a fixed matching.
pub fn end_to_end_check(fraction: f64, seed: u64) -> Result<OpReport> {
    let model = Model::new(tiny_config(), HeadMode::Pretext, seed)?;
    let spec = SceneSpec { width: 24, height: 24, ..SceneSpec::default() };
    let image = synth_image(seed, &spec)?.image;
    let patches: Vec<ImageRaster> = vec![image.crop(2, 3, 12, 12)?, image.crop(10, 8, 14, 14)?.resize(12, 12)];
    let boxes = [
        BoxCxCyWh::new(8.0 / 24.0, 9.0 / 24.0, 0.5, 0.5),
        BoxCxCyWh::new(17.0 / 24.0, 15.0 / 24.0, 14.0 / 24.0, 14.0 / 24.0),
    ];

    // flatten every weight into one vector
    let names: Vec<(String, Vec<usize>)> =
        model.params().iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
    let flat: Vec<f64> = model.params().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
    let total = flat.len();
    let flat = Tensor::vector(flat);

    let spec = SetLossSpec::pretext(2, 4, true)?;
    let forward = |tape: &mut Tape, x: Var| -> Result<crate::model::PretextForward> {
        let mut vars = Vec::with_capacity(names.len());
        let mut off = 0;
        for (_, shape) in &names {
            let n: usize = shape.iter().product();
            let part = tape.narrow_last(x, off, n)?;
            vars.push(tape.reshape(part, shape)?);
            off += n;
        }
        let bound = crate::model::Bound::from_vars(vars);
        model.forward_patches(tape, &bound, &image, &patches, 0)
    };

    // matching and reconstruction targets are fixed at the unperturbed point
    let mut tape = Tape::new();
    let x = tape.constant(flat.clone());
    let out = forward(&mut tape, x)?;
    let targets: Vec<Target> = boxes
        .iter()
        .zip(&out.patch_features)
        .map(|(b, f)| Target { class: MATCH, bbox: *b, feature: Some(tape.value(*f).data().to_vec()) })
        .collect();
    let preds = out.layers.last().expect("decoder layer");
    let assignment = match_predictions(&tape, preds, &targets)?;
    set_loss(&mut tape, &out.layers, &targets, &spec)?;

    let mut rng = rng_for(seed ^ 0x5EED);
    let k = ((total as f64 * fraction).ceil() as usize).max(1);
    let coords: Vec<usize> = rand::seq::index::sample(&mut rng, total, k).into_vec();
    let loss = |t: &mut Tape, x: Var| -> Result<Var> {
        let out = forward(t, x)?;
        let preds = out.layers.last().expect("decoder layer");
        Ok(hungarian_loss(t, preds, &targets, &assignment, &spec)?.total)
    };
    let r = finite_diff_check_at(loss, &flat, FD_STEP, &coords)?;
    Ok(OpReport {
        name: "pretext_loss_end_to_end".into(),
        max_rel_error: r.max_rel_error,
        tolerance: END_TO_END_TOLERANCE,
    })
}

/// Per-op suite followed by the end-to-end check.
pub fn full_suite(trials: usize, seed: u64) -> Result<Vec<OpReport>> {
    let mut out = op_suite(trials, seed)?;
    out.push(end_to_end_check(0.01, seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for r in op_suite(3, 1).unwrap() {
            assert!(r.passed(), "{} {}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn tiny_model_end_to_end() {
        let r = end_to_end_check(0.01, 3).unwrap();
        assert!(r.passed(), "{}", r.max_rel_error);
    }
}
