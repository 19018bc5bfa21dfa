//! Average precision over IoU-threshold sweeps.
//!
//! Matching is greedy per image: predictions in descending score order, each
//! taking the unmatched truth with the highest IoU, counted as a true
//! positive when that IoU strictly exceeds the threshold. AP is the area
//! under the interpolated precision-recall curve, computed per image and
//! averaged. An image with no truths and no predictions scores AP 1.0; one
//! with predictions but no truths scores 0.0.

use serde::{Deserialize, Serialize};

use super::boxes::{iou, BoundingBox};

/// The eight standard evaluation thresholds, 0.40 through 0.75 step 0.05.
pub const DEFAULT_THRESHOLDS: [f64; 8] = [0.40, 0.45, 0.50, 0.55, 0.60, 0.65, 0.70, 0.75];

/// Precision-recall interpolation style. All-point integrates the exact
/// envelope; eleven-point samples recall at {0.0, 0.1, ..., 1.0}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    AllPoint,
    ElevenPoint,
}

impl std::fmt::Display for Interpolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Interpolation::AllPoint => f.write_str("all_point"),
            Interpolation::ElevenPoint => f.write_str("eleven_point"),
        }
    }
}

/// Predictions and ground truth for one image.
#[derive(Debug, Clone, Default)]
pub struct ImageEval {
    pub predictions: Vec<BoundingBox>,
    pub truths: Vec<BoundingBox>,
}

/// mAP at each threshold of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSweep {
    pub thresholds: Vec<f64>,
    pub map_values: Vec<f64>,
    pub interpolation: Interpolation,
}

fn score_of(b: &BoundingBox) -> f64 {
    // Predictions are expected to carry scores; a missing score ranks as 1.0.
    b.score.unwrap_or(1.0)
}

/// Greedy matching outcome: per prediction (in score order), whether it
/// matched a truth.
fn greedy_match(predictions: &[BoundingBox], truths: &[BoundingBox], threshold: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| {
        score_of(&predictions[b])
            .total_cmp(&score_of(&predictions[a]))
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; truths.len()];
    let mut hits = Vec::with_capacity(predictions.len());
    for &pi in &order {
        let mut best: Option<(usize, f64)> = None;
        for (ti, t) in truths.iter().enumerate() {
            if taken[ti] {
                continue;
            }
            let overlap = iou(&predictions[pi], t);
            let better = match best {
                None => true,
                Some((_, b)) => overlap > b,
            };
            if better {
                best = Some((ti, overlap));
            }
        }
        match best {
            Some((ti, overlap)) if overlap > threshold => {
                taken[ti] = true;
                hits.push(true);
            }
            _ => hits.push(false),
        }
    }
    hits
}

fn ap_from_hits(hits: &[bool], n_truths: usize, interp: Interpolation) -> f64 {
    if n_truths == 0 {
        return if hits.is_empty() { 1.0 } else { 0.0 };
    }
    if hits.is_empty() {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &hit) in hits.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_truths as f64);
    }
    match interp {
        Interpolation::AllPoint => {
            // Running max of precision from the right, integrated over recall.
            let mut ap = 0.0;
            let mut max_p = 0.0f64;
            for i in (0..hits.len()).rev() {
                max_p = max_p.max(precision[i]);
                let prev_r = if i == 0 { 0.0 } else { recall[i - 1] };
                ap += (recall[i] - prev_r) * max_p;
            }
            ap
        }
        Interpolation::ElevenPoint => {
            let mut total = 0.0;
            for step in 0..=10 {
                let r = step as f64 / 10.0;
                let p = precision
                    .iter()
                    .zip(&recall)
                    .filter(|(_, &rec)| rec >= r - 1e-12)
                    .map(|(&p, _)| p)
                    .fold(0.0f64, f64::max);
                total += p;
            }
            total / 11.0
        }
    }
}

/// Average precision for a single image at one threshold.
pub fn average_precision(
    predictions: &[BoundingBox],
    truths: &[BoundingBox],
    threshold: f64,
    interp: Interpolation,
) -> f64 {
    let hits = greedy_match(predictions, truths, threshold);
    ap_from_hits(&hits, truths.len(), interp)
}

/// Mean over images of per-image AP.
pub fn map_at(images: &[ImageEval], threshold: f64, interp: Interpolation) -> f64 {
    if images.is_empty() {
        return 0.0;
    }
    let total: f64 = images
        .iter()
        .map(|img| average_precision(&img.predictions, &img.truths, threshold, interp))
        .sum();
    total / images.len() as f64
}

/// mAP at each threshold.
pub fn map_sweep(images: &[ImageEval], thresholds: &[f64], interp: Interpolation) -> EvalSweep {
    EvalSweep {
        thresholds: thresholds.to_vec(),
        map_values: thresholds
            .iter()
            .map(|&t| map_at(images, t, interp))
            .collect(),
        interpolation: interp,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    fn pred(x0: f64, y0: f64, x1: f64, y1: f64, s: f64) -> BoundingBox {
        BoundingBox::scored(x0, y0, x1, y1, s).unwrap()
    }

    #[test]
    fn perfect_predictions_score_one_everywhere() {
        let truths = vec![bx(0.0, 0.0, 10.0, 10.0), bx(20.0, 20.0, 30.0, 32.0)];
        let preds: Vec<BoundingBox> = truths
            .iter()
            .map(|t| pred(t.x_min, t.y_min, t.x_max, t.y_max, 1.0))
            .collect();
        let images = vec![ImageEval {
            predictions: preds,
            truths,
        }];
        for &t in &DEFAULT_THRESHOLDS {
            assert_eq!(map_at(&images, t, Interpolation::AllPoint), 1.0);
        }
    }

    #[test]
    fn no_predictions_scores_zero() {
        let images = vec![ImageEval {
            predictions: vec![],
            truths: vec![bx(0.0, 0.0, 5.0, 5.0)],
        }];
        assert_eq!(map_at(&images, 0.5, Interpolation::AllPoint), 0.0);
    }

    #[test]
    fn empty_truth_with_empty_predictions_is_one() {
        let images = vec![ImageEval::default()];
        assert_eq!(map_at(&images, 0.5, Interpolation::AllPoint), 1.0);
        let images = vec![ImageEval {
            predictions: vec![pred(0.0, 0.0, 1.0, 1.0, 0.9)],
            truths: vec![],
        }];
        assert_eq!(map_at(&images, 0.5, Interpolation::AllPoint), 0.0);
    }

    #[test]
    fn three_box_hand_scenario() {
        // Truths: two 10x10 boxes. Predictions, by descending score:
        //   p1 (0.9): exactly truth A            -> TP, precision 1,   recall 1/2
        //   p2 (0.8): IoU 1/3 with truth B       -> FP at thr 0.5
        //   p3 (0.7): exactly truth B            -> TP, precision 2/3, recall 1
        // All-point AP = 0.5 * 1.0 + 0.5 * (2/3) = 5/6.
        let truth_a = bx(0.0, 0.0, 10.0, 10.0);
        let truth_b = bx(50.0, 50.0, 60.0, 60.0);
        let p1 = pred(0.0, 0.0, 10.0, 10.0, 0.9);
        let p2 = pred(55.0, 50.0, 65.0, 60.0, 0.8);
        let p3 = pred(50.0, 50.0, 60.0, 60.0, 0.7);
        let ap = average_precision(
            &[p1, p2, p3],
            &[truth_a, truth_b],
            0.5,
            Interpolation::AllPoint,
        );
        assert!((ap - 5.0 / 6.0).abs() < 1e-12, "ap = {ap}");

        // Eleven-point: recall grid 0..=1; max precision at recall >= r is
        // 1.0 for r <= 0.5 (6 points) and 2/3 above (5 points).
        let ap11 = average_precision(
            &[p1, p2, p3],
            &[truth_a, truth_b],
            0.5,
            Interpolation::ElevenPoint,
        );
        assert!((ap11 - (6.0 * 1.0 + 5.0 * (2.0 / 3.0)) / 11.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_detections_count_as_false_positives() {
        let truth = bx(0.0, 0.0, 10.0, 10.0);
        let p1 = pred(0.0, 0.0, 10.0, 10.0, 0.9);
        let p2 = pred(0.0, 0.0, 10.0, 10.0, 0.8);
        let ap = average_precision(&[p1, p2], &[truth], 0.5, Interpolation::AllPoint);
        assert_eq!(ap, 1.0); // recall reaches 1 at rank 1; duplicate comes later
        let ap_rev = average_precision(&[p2, p1], &[truth], 0.5, Interpolation::AllPoint);
        assert_eq!(ap_rev, 1.0);
    }

    #[test]
    fn matching_is_strictly_greater_than_threshold() {
        let truth = bx(0.0, 0.0, 1.0, 1.0);
        // IoU exactly 1/3.
        let p = pred(0.5, 0.0, 1.5, 1.0, 1.0);
        let at_third = average_precision(&[p], &[truth], 1.0 / 3.0, Interpolation::AllPoint);
        assert_eq!(at_third, 0.0);
        let below = average_precision(&[p], &[truth], 0.33, Interpolation::AllPoint);
        assert_eq!(below, 1.0);
    }

    #[test]
    fn default_thresholds_exact() {
        assert_eq!(
            DEFAULT_THRESHOLDS.to_vec(),
            vec![0.40, 0.45, 0.50, 0.55, 0.60, 0.65, 0.70, 0.75]
        );
    }
}
