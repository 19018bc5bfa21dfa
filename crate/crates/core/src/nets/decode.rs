//! Detection-head decoding and the grid-cell training loss.
//!
//! The 18-channel head is laid out as 3 anchors x (tx, ty, tw, th, obj,
//! cls). Box centers are sigmoid offsets within the owning grid cell; sizes
//! scale the anchor priors exponentially; the detection score is
//! sigmoid(obj) * sigmoid(cls). These decode conventions are adopted from
//! the standard single-stage detector recipe.

use crate::error::{Error, Result};
use crate::metrics::{iou, iou_wh, BoundingBox};

use super::layers::Tensor4;

pub const CHANNELS_PER_ANCHOR: usize = 6;

#[derive(Debug, Clone)]
pub struct DecodeConfig {
    /// Anchor (w, h) priors in input pixels, one entry per head anchor.
    pub anchors: Vec<(f64, f64)>,
    /// Input image size (h, w) in pixels.
    pub input: (usize, usize),
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl DecodeConfig {
    pub fn new(anchors: Vec<(f64, f64)>, input: (usize, usize)) -> Self {
        Self {
            anchors,
            input,
            score_threshold: 0.2,
            nms_iou: 0.5,
        }
    }
}

fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

/// Decode one image's head output into scored corner boxes (before NMS).
pub fn decode_image(output: &Tensor4, image: usize, cfg: &DecodeConfig) -> Result<Vec<BoundingBox>> {
    let (_, c, gh, gw) = output.shape();
    let anchors = cfg.anchors.len();
    if c != anchors * CHANNELS_PER_ANCHOR {
        return Err(Error::ShapeMismatch {
            context: "decode_image",
            expected: format!("{} channels for {} anchors", anchors * CHANNELS_PER_ANCHOR, anchors),
            actual: format!("{c} channels"),
        });
    }
    let stride_y = cfg.input.0 as f64 / gh as f64;
    let stride_x = cfg.input.1 as f64 / gw as f64;
    let mut boxes = Vec::new();
    for a in 0..anchors {
        let base = a * CHANNELS_PER_ANCHOR;
        for gy in 0..gh {
            for gx in 0..gw {
                let get = |ch: usize| output.at(image, base + ch, gy, gx);
                let score = (sigmoid(get(4)) as f64) * (sigmoid(get(5)) as f64);
                if score < cfg.score_threshold {
                    continue;
                }
                let cx = (sigmoid(get(0)) as f64 + gx as f64) * stride_x;
                let cy = (sigmoid(get(1)) as f64 + gy as f64) * stride_y;
                // Clamp raw sizes so decode never overflows.
                let bw = cfg.anchors[a].0 * (get(2).clamp(-8.0, 8.0) as f64).exp();
                let bh = cfg.anchors[a].1 * (get(3).clamp(-8.0, 8.0) as f64).exp();
                let x0 = (cx - bw / 2.0).max(0.0);
                let y0 = (cy - bh / 2.0).max(0.0);
                let x1 = (cx + bw / 2.0).min(cfg.input.1 as f64);
                let y1 = (cy + bh / 2.0).min(cfg.input.0 as f64);
                if x1 > x0 && y1 > y0 {
                    boxes.push(BoundingBox::scored(x0, y0, x1, y1, score.clamp(0.0, 1.0))?);
                }
            }
        }
    }
    Ok(boxes)
}

/// Greedy non-maximum suppression, keeping the highest-scoring box of each
/// overlapping group.
pub fn nms(mut boxes: Vec<BoundingBox>, iou_threshold: f64) -> Vec<BoundingBox> {
    boxes.sort_by(|a, b| {
        b.score
            .unwrap_or(0.0)
            .total_cmp(&a.score.unwrap_or(0.0))
            .then(a.x_min.total_cmp(&b.x_min))
    });
    let mut keep: Vec<BoundingBox> = Vec::new();
    for b in boxes {
        if keep.iter().all(|k| iou(k, &b) <= iou_threshold) {
            keep.push(b);
        }
    }
    keep
}

/// Decode + NMS for every image in a batch.
pub fn decode_batch(output: &Tensor4, cfg: &DecodeConfig) -> Result<Vec<Vec<BoundingBox>>> {
    let (n, _, _, _) = output.shape();
    (0..n)
        .map(|i| Ok(nms(decode_image(output, i, cfg)?, cfg.nms_iou)))
        .collect()
}

/// Ground-truth boxes for one image with per-box loss weights (mixup weights
/// are 1.0 outside mixup).
pub type WeightedBoxes = Vec<(BoundingBox, f64)>;

struct Assignment {
    anchor: usize,
    gy: usize,
    gx: usize,
    tx: f32,
    ty: f32,
    tw: f32,
    th: f32,
    weight: f32,
}

fn assign_targets(
    truths: &WeightedBoxes,
    cfg: &DecodeConfig,
    grid: (usize, usize),
) -> Vec<Assignment> {
    let (gh, gw) = grid;
    let stride_y = cfg.input.0 as f64 / gh as f64;
    let stride_x = cfg.input.1 as f64 / gw as f64;
    let mut taken = vec![false; cfg.anchors.len() * gh * gw];
    let mut out = Vec::new();
    for (b, weight) in truths {
        let cx = (b.x_min + b.x_max) / 2.0;
        let cy = (b.y_min + b.y_max) / 2.0;
        let gx = ((cx / stride_x) as usize).min(gw - 1);
        let gy = ((cy / stride_y) as usize).min(gh - 1);
        let (bw, bh) = (b.width(), b.height());
        let anchor = (0..cfg.anchors.len())
            .max_by(|&i, &j| {
                iou_wh((bw, bh), cfg.anchors[i])
                    .total_cmp(&iou_wh((bw, bh), cfg.anchors[j]))
                    .then(j.cmp(&i))
            })
            .expect("at least one anchor");
        let slot = (anchor * gh + gy) * gw + gx;
        if taken[slot] {
            continue; // first box wins a contested cell/anchor slot
        }
        taken[slot] = true;
        out.push(Assignment {
            anchor,
            gy,
            gx,
            tx: (cx / stride_x - gx as f64) as f32,
            ty: (cy / stride_y - gy as f64) as f32,
            tw: (bw / cfg.anchors[anchor].0).ln() as f32,
            th: (bh / cfg.anchors[anchor].1).ln() as f32,
            weight: *weight as f32,
        });
    }
    out
}

/// Numerically stable binary cross-entropy with logits; returns (loss,
/// dloss/dlogit).
fn bce_with_logits(z: f32, target: f32) -> (f32, f32) {
    let loss = z.max(0.0) - z * target + (1.0 + (-z.abs()).exp()).ln();
    (loss, sigmoid(z) - target)
}

const LAMBDA_COORD: f32 = 5.0;
const LAMBDA_NOOBJ: f32 = 0.5;

/// Grid-cell detection loss: sigmoid-offset coordinate regression on
/// assigned slots, objectness BCE everywhere, single-class BCE on assigned
/// slots. Returns the mean per-image loss and its gradient w.r.t. the raw
/// head output.
pub fn detect_loss(
    output: &Tensor4,
    targets: &[WeightedBoxes],
    cfg: &DecodeConfig,
) -> Result<(f64, Tensor4)> {
    let (n, c, gh, gw) = output.shape();
    if n != targets.len() {
        return Err(Error::ShapeMismatch {
            context: "detect_loss",
            expected: format!("{n} target lists"),
            actual: format!("{}", targets.len()),
        });
    }
    if c != cfg.anchors.len() * CHANNELS_PER_ANCHOR {
        return Err(Error::ShapeMismatch {
            context: "detect_loss",
            expected: format!("{} channels", cfg.anchors.len() * CHANNELS_PER_ANCHOR),
            actual: format!("{c} channels"),
        });
    }
    let mut grad = Tensor4::zeros(n, c, gh, gw);
    let mut total = 0.0f64;
    let inv_n = 1.0 / n as f32;
    for i in 0..n {
        let assignments = assign_targets(&targets[i], cfg, (gh, gw));
        let mut assigned = vec![0.0f32; cfg.anchors.len() * gh * gw];
        let idx = |ch: usize, gy: usize, gx: usize| ((i * c + ch) * gh + gy) * gw + gx;

        for a in &assignments {
            let base = a.anchor * CHANNELS_PER_ANCHOR;
            assigned[(a.anchor * gh + a.gy) * gw + a.gx] = a.weight;
            // Coordinate regression: MSE on sigmoid center offsets, MSE on
            // raw log-size channels.
            for (ch, target, through_sigmoid) in [
                (0, a.tx, true),
                (1, a.ty, true),
                (2, a.tw, false),
                (3, a.th, false),
            ] {
                let z = output.data()[idx(base + ch, a.gy, a.gx)];
                let (value, dvalue) = if through_sigmoid {
                    let s = sigmoid(z);
                    (s, s * (1.0 - s))
                } else {
                    (z, 1.0)
                };
                let diff = value - target;
                total += (LAMBDA_COORD * a.weight * diff * diff) as f64;
                grad.data_mut()[idx(base + ch, a.gy, a.gx)] +=
                    LAMBDA_COORD * a.weight * 2.0 * diff * dvalue * inv_n;
            }
            // Single-class score on the assigned slot.
            let z = output.data()[idx(base + 5, a.gy, a.gx)];
            let (loss, dz) = bce_with_logits(z, 1.0);
            total += (a.weight * loss) as f64;
            grad.data_mut()[idx(base + 5, a.gy, a.gx)] += a.weight * dz * inv_n;
        }

        // Objectness over every slot.
        for anchor in 0..cfg.anchors.len() {
            let ch = anchor * CHANNELS_PER_ANCHOR + 4;
            for gy in 0..gh {
                for gx in 0..gw {
                    let w = assigned[(anchor * gh + gy) * gw + gx];
                    let z = output.data()[idx(ch, gy, gx)];
                    let (loss, dz) = if w > 0.0 {
                        let (l, d) = bce_with_logits(z, 1.0);
                        (w * l, w * d)
                    } else {
                        let (l, d) = bce_with_logits(z, 0.0);
                        (LAMBDA_NOOBJ * l, LAMBDA_NOOBJ * d)
                    };
                    total += loss as f64;
                    grad.data_mut()[idx(ch, gy, gx)] += dz * inv_n;
                }
            }
        }
    }
    let mean = total / n as f64;
    if !mean.is_finite() {
        return Err(Error::NonFinite {
            context: "detect_loss diverged".into(),
        });
    }
    Ok((mean, grad))
}

/// Default desk-scale anchors: the published 320-input priors rescaled to
/// the given input size.
pub fn desk_anchors(input: usize) -> Vec<(f64, f64)> {
    let scale = input as f64 / 320.0;
    // One scale head: take the middle three priors.
    crate::metrics::DEFAULT_ANCHORS[3..6]
        .iter()
        .map(|&(w, h)| (w * scale, h * scale))
        .collect()
}
