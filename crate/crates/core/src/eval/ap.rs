use serde::Serialize;

use crate::geometry::{iou, BoxCxCyWh};
use crate::pretext::LabeledBox;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Detection {
    pub class: usize,
    pub confidence: f64,
    pub bbox: BoxCxCyWh,
}

/// Detections for one image.
pub type DetectionResult = Vec<Detection>;

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

/// Area under the 101-point interpolated precision/recall curve.
///
/// `hits` lists, in descending confidence order, whether each detection
/// was a true positive; `num_gt > 0`.
pub fn interpolated_ap(hits: &[bool], num_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

/// Per-class AP at one IoU threshold; `None` for classes without ground truth.
///
/// Detections are visited by descending confidence (ties keep input order)
/// and greedily claim the unclaimed ground truth of their image and class
/// with the highest IoU, if that IoU reaches `iou_threshold`.
pub fn average_precision(
    results: &[DetectionResult],
    ground_truths: &[Vec<LabeledBox>],
    iou_threshold: f64,
    num_classes: usize,
) -> Vec<Option<f64>> {
    assert_eq!(results.len(), ground_truths.len(), "one detection list per image");
    (0..num_classes)
        .map(|class| {
            let num_gt: usize = ground_truths.iter().map(|g| g.iter().filter(|o| o.class == class).count()).sum();
            if num_gt == 0 {
                return None;
            }
            let mut dets: Vec<(usize, &Detection)> = results
                .iter()
                .enumerate()
                .flat_map(|(img, ds)| ds.iter().filter(|d| d.class == class).map(move |d| (img, d)))
                .collect();
            dets.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence));
            let mut claimed: Vec<Vec<bool>> = ground_truths.iter().map(|g| vec![false; g.len()]).collect();
            let hits: Vec<bool> = dets
                .iter()
                .map(|&(img, d)| {
                    let mut best = None;
                    let mut best_iou = iou_threshold;
                    for (j, g) in ground_truths[img].iter().enumerate() {
                        if g.class != class || claimed[img][j] {
                            continue;
                        }
                        let v = iou(&d.bbox.to_xyxy(), &g.bbox.to_xyxy());
                        if v >= iou_threshold && (best.is_none() || v > best_iou) {
                            best_iou = v;
                            best = Some(j);
                        }
                    }
                    if let Some(j) = best {
                        claimed[img][j] = true;
                        true
                    } else {
                        false
                    }
                })
                .collect();
            Some(interpolated_ap(&hits, num_gt))
        })
        .collect()
}

fn mean_present(v: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = v.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ApTriple {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ApReport {
    pub overall: ApTriple,
    /// `None` for classes absent from the ground truth.
    pub per_class: Vec<Option<ApTriple>>,
}

/// COCO-style AP (mean over 0.50:0.05:0.95), AP50 and AP75.
pub fn evaluate(results: &[DetectionResult], ground_truths: &[Vec<LabeledBox>], num_classes: usize) -> ApReport {
    let per_thr: Vec<Vec<Option<f64>>> =
        coco_thresholds().iter().map(|&t| average_precision(results, ground_truths, t, num_classes)).collect();
    let per_class = (0..num_classes)
        .map(|c| {
            let vals: Option<Vec<f64>> = per_thr.iter().map(|v| v[c]).collect();
            vals.map(|v| ApTriple { ap: v.iter().sum::<f64>() / v.len() as f64, ap50: v[0], ap75: v[5] })
        })
        .collect();
    let means: Vec<f64> = per_thr.iter().map(|v| mean_present(v)).collect();
    ApReport {
        overall: ApTriple { ap: means.iter().sum::<f64>() / means.len() as f64, ap50: means[0], ap75: means[5] },
        per_class,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(class: usize, confidence: f64, cx: f64, cy: f64, s: f64) -> Detection {
        Detection { class, confidence, bbox: BoxCxCyWh::new(cx, cy, s, s) }
    }

    fn gt(class: usize, cx: f64, cy: f64, s: f64) -> LabeledBox {
        LabeledBox { class, bbox: BoxCxCyWh::new(cx, cy, s, s) }
    }

    /// Independent oracle: precision/recall at every cutoff of the ranked
    /// list, then for each recall level the best precision achieved at
    /// that recall or higher.
    fn oracle_ap(hits: &[bool], num_gt: usize) -> f64 {
        let points: Vec<(f64, f64)> = (1..=hits.len())
            .map(|k| {
                let tp = hits[..k].iter().filter(|&&h| h).count() as f64;
                (tp / num_gt as f64, tp / k as f64)
            })
            .collect();
        let mut total = 0.0;
        for k in 0..=100 {
            let r = k as f64 / 100.0;
            let best = points.iter().filter(|(rec, _)| *rec >= r).map(|&(_, p)| p).fold(0.0, f64::max);
            total += best;
        }
        total / 101.0
    }

    #[test]
    fn perfect_detections_score_one() {
        let gts = vec![vec![gt(0, 0.3, 0.3, 0.2), gt(1, 0.7, 0.7, 0.2)]];
        let res = vec![vec![det(0, 0.9, 0.3, 0.3, 0.2), det(1, 0.8, 0.7, 0.7, 0.2)]];
        let r = evaluate(&res, &gts, 2);
        assert_eq!(r.overall, ApTriple { ap: 1.0, ap50: 1.0, ap75: 1.0 });
    }

    #[test]
    fn misplaced_detections_score_zero() {
        let gts = vec![vec![gt(0, 0.2, 0.2, 0.1)]];
        let res = vec![vec![det(0, 0.9, 0.8, 0.8, 0.1), det(0, 0.5, 0.25, 0.25, 0.1)]];
        // second detection overlaps with IoU 1/7
        assert_eq!(average_precision(&res, &gts, 0.5, 1), vec![Some(0.0)]);
    }

    #[test]
    fn three_detections_two_truths_by_hand() {
        // ranked: hit, miss, hit → P/R points (1, .5), (.5, .5), (2/3, 1)
        let gts = vec![vec![gt(0, 0.25, 0.25, 0.2), gt(0, 0.75, 0.75, 0.2)]];
        let res = vec![vec![det(0, 0.9, 0.25, 0.25, 0.2), det(0, 0.8, 0.5, 0.5, 0.1), det(0, 0.7, 0.75, 0.75, 0.2)]];
        let ap = average_precision(&res, &gts, 0.5, 1)[0].unwrap();
        // recalls 0..=0.5 (51 points) at precision 1, 0.51..=1 (50 points) at 2/3
        let want = (51.0 + 50.0 * 2.0 / 3.0) / 101.0;
        assert!((ap - want).abs() < 1e-12);
        assert!((ap - oracle_ap(&[true, false, true], 2)).abs() < 1e-12);
    }

    #[test]
    fn classes_without_truth_are_excluded() {
        let gts = vec![vec![gt(0, 0.5, 0.5, 0.3)]];
        let res = vec![vec![det(0, 0.9, 0.5, 0.5, 0.3), det(1, 0.9, 0.5, 0.5, 0.3)]];
        let r = evaluate(&res, &gts, 2);
        assert_eq!(r.per_class[1], None);
        assert_eq!(r.overall.ap50, 1.0);
    }

    #[test]
    fn duplicates_count_as_false_positives() {
        let gts = vec![vec![gt(0, 0.5, 0.5, 0.3)]];
        let res = vec![vec![det(0, 0.6, 0.5, 0.5, 0.3), det(0, 0.9, 0.5, 0.5, 0.3)]];
        let ap = average_precision(&res, &gts, 0.5, 1)[0].unwrap();
        assert_eq!(ap, 1.0);
        let res = vec![vec![det(0, 0.9, 0.1, 0.1, 0.1), det(0, 0.6, 0.5, 0.5, 0.3)]];
        let ap = average_precision(&res, &gts, 0.5, 1)[0].unwrap();
        assert!((ap - 0.5).abs() < 1e-12);
    }

    fn arb_case() -> impl Strategy<Value = (Vec<DetectionResult>, Vec<Vec<LabeledBox>>)> {
        let boxes = (0.1f64..0.9, 0.1f64..0.9, 0.05f64..0.3);
        let dets = proptest::collection::vec((0usize..2, 0.0f64..1.0, boxes.clone()), 0..10);
        let gts = proptest::collection::vec((0usize..2, boxes), 1..5);
        (dets, gts).prop_map(|(d, g)| {
            let d: Vec<Detection> = d.into_iter().map(|(c, p, (x, y, s))| det(c, p, x, y, s)).collect();
            let g: Vec<LabeledBox> = g.into_iter().map(|(c, (x, y, s))| gt(c, x, y, s)).collect();
            (vec![d], vec![g])
        })
    }

    fn ranked_hits_oracle(res: &[Detection], gts: &[LabeledBox], class: usize, thr: f64) -> Vec<bool> {
        let mut order: Vec<&Detection> = res.iter().filter(|d| d.class == class).collect();
        order.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        let mut used = vec![false; gts.len()];
        order
            .iter()
            .map(|d| {
                let cand = gts
                    .iter()
                    .enumerate()
                    .filter(|(j, g)| g.class == class && !used[*j])
                    .map(|(j, g)| (j, iou(&d.bbox.to_xyxy(), &g.bbox.to_xyxy())))
                    .filter(|&(_, v)| v >= thr)
                    .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
                match cand {
                    Some((j, _)) => {
                        used[j] = true;
                        true
                    }
                    None => false,
                }
            })
            .collect()
    }

    proptest! {
        #[test]
        fn agrees_with_bruteforce_pr_oracle((res, gts) in arb_case(), thr in 0.1f64..0.9) {
            let got = average_precision(&res, &gts, thr, 2);
            for (class, ap) in got.iter().enumerate() {
                let n = gts[0].iter().filter(|g| g.class == class).count();
                match ap {
                    None => prop_assert_eq!(n, 0),
                    Some(ap) => {
                        let hits = ranked_hits_oracle(&res[0], &gts[0], class, thr);
                        prop_assert!((ap - oracle_ap(&hits, n)).abs() < 1e-12);
                    }
                }
            }
        }

        #[test]
        fn invariant_to_monotone_confidence_maps((res, gts) in arb_case()) {
            let squashed: Vec<DetectionResult> = res
                .iter()
                .map(|ds| ds.iter().map(|d| Detection { confidence: d.confidence.powi(3) * 0.5 + 0.1, ..*d }).collect())
                .collect();
            prop_assert_eq!(evaluate(&res, &gts, 2), evaluate(&squashed, &gts, 2));
        }

        #[test]
        fn zero_confidence_false_positive_never_helps((res, gts) in arb_case()) {
            let before = evaluate(&res, &gts, 2);
            let mut more = res.clone();
            more[0].push(det(0, 0.0, 0.95, 0.05, 0.05));
            let after = evaluate(&more, &gts, 2);
            prop_assert!(after.overall.ap <= before.overall.ap + 1e-12);
            prop_assert!(after.overall.ap50 <= before.overall.ap50 + 1e-12);
        }

        #[test]
        fn ap_bounded_by_ap50((res, gts) in arb_case()) {
            let r = evaluate(&res, &gts, 2);
            prop_assert!(r.overall.ap <= r.overall.ap50 + 1e-12);
            prop_assert!((0.0..=1.0).contains(&r.overall.ap));
        }
    }
}
