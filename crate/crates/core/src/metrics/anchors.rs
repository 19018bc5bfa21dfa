//! K-means clustering of ground-truth box sizes into anchor priors.
//!
//! Distance is `1 - IoU` of (w, h) pairs anchored at a common corner, the
//! usual convention for dimension clusters; Euclidean distance on (w, h) is
//! available behind a flag. Cluster centers update to the member mean, and
//! clusters that empty out are re-seeded from the point farthest from its
//! own center.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::boxes::iou_wh;
use crate::error::{Error, Result};

/// Anchor priors shipped as the default fixture for 320x320 inputs, sorted
/// by area, three per detection scale.
pub const DEFAULT_ANCHORS: [(f64, f64); 9] = [
    (40.0, 39.0),
    (63.0, 49.0),
    (48.0, 69.0),
    (75.0, 74.0),
    (58.0, 102.0),
    (83.0, 108.0),
    (67.0, 148.0),
    (89.0, 154.0),
    (94.0, 202.0),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AnchorDistance {
    #[default]
    IouBased,
    Euclidean,
}

#[derive(Debug, Clone)]
pub struct AnchorConfig {
    pub k: usize,
    pub seed: u64,
    pub distance: AnchorDistance,
    pub max_iterations: usize,
}

impl AnchorConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            distance: AnchorDistance::IouBased,
            max_iterations: 100,
        }
    }
}

fn distance(a: (f64, f64), b: (f64, f64), metric: AnchorDistance) -> f64 {
    match metric {
        AnchorDistance::IouBased => 1.0 - iou_wh(a, b),
        AnchorDistance::Euclidean => {
            let dw = a.0 - b.0;
            let dh = a.1 - b.1;
            (dw * dw + dh * dh).sqrt()
        }
    }
}

/// Cluster box sizes into `k` anchors with the default IoU distance.
pub fn kmeans_anchors(boxes: &[(f64, f64)], k: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
    kmeans_anchors_with(boxes, &AnchorConfig::new(k, seed))
}

pub fn kmeans_anchors_with(boxes: &[(f64, f64)], cfg: &AnchorConfig) -> Result<Vec<(f64, f64)>> {
    if cfg.k == 0 {
        return Err(Error::usage("anchor cluster count k must be >= 1"));
    }
    if boxes.len() < cfg.k {
        return Err(Error::dataset(format!(
            "{} boxes is fewer than k = {}",
            boxes.len(),
            cfg.k
        )));
    }
    if boxes.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0)) {
        return Err(Error::dataset("box sizes must be positive".to_string()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = rand::seq::index::sample(&mut rng, boxes.len(), cfg.k);
    let mut centers: Vec<(f64, f64)> = init.iter().map(|i| boxes[i]).collect();

    let mut assignment = vec![usize::MAX; boxes.len()];
    for _ in 0..cfg.max_iterations {
        // Assign each box to its nearest center, ties to the lower index.
        let mut changed = false;
        for (bi, &b) in boxes.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (ci, &c) in centers.iter().enumerate() {
                let d = distance(b, c, cfg.distance);
                if d < best_d {
                    best_d = d;
                    best = ci;
                }
            }
            if assignment[bi] != best {
                assignment[bi] = best;
                changed = true;
            }
        }

        // Update centers to member means; re-seed empty clusters from the
        // point farthest from its current center.
        let mut sums = vec![(0.0f64, 0.0f64, 0usize); cfg.k];
        for (bi, &b) in boxes.iter().enumerate() {
            let s = &mut sums[assignment[bi]];
            s.0 += b.0;
            s.1 += b.1;
            s.2 += 1;
        }
        let mut reseeded: Vec<usize> = Vec::new();
        for (ci, s) in sums.iter().enumerate() {
            if s.2 > 0 {
                centers[ci] = (s.0 / s.2 as f64, s.1 / s.2 as f64);
            } else {
                let far = farthest_point(boxes, &centers, &assignment, &reseeded, cfg.distance);
                centers[ci] = boxes[far];
                reseeded.push(far);
                changed = true;
            }
        }

        if !changed {
            break;
        }
    }
    Ok(centers)
}

fn farthest_point(
    boxes: &[(f64, f64)],
    centers: &[(f64, f64)],
    assignment: &[usize],
    exclude: &[usize],
    metric: AnchorDistance,
) -> usize {
    let mut best = 0usize;
    let mut best_d = -1.0;
    for (bi, &b) in boxes.iter().enumerate() {
        if exclude.contains(&bi) {
            continue;
        }
        let d = distance(b, centers[assignment[bi]], metric);
        if d > best_d {
            best_d = d;
            best = bi;
        }
    }
    best
}

/// Sort anchors by area ascending and chunk into scale groups.
pub fn group_by_scale(mut anchors: Vec<(f64, f64)>, scales: usize) -> Vec<Vec<(f64, f64)>> {
    anchors.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)));
    let per = anchors.len().div_ceil(scales.max(1));
    anchors
        .chunks(per.max(1))
        .map(|c| c.to_vec())
        .collect()
}
