//! Synthetic desk-scale datasets: no external data dependency, fully
//! deterministic under a seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::metrics::BoundingBox;

use super::layers::Tensor4;

/// Small-image classification task: each image carries one bright shape on
/// background noise. Classes: 0 horizontal bar, 1 vertical bar, 2 filled
/// square.
#[derive(Debug, Clone)]
pub struct ClassifierDataset {
    pub images: Tensor4,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

pub const CLASSIFIER_CLASSES: usize = 3;

pub fn synth_classifier_dataset(n: usize, img: usize, seed: u64) -> ClassifierDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0f32; n * img * img];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = rng.gen_range(0..CLASSIFIER_CLASSES);
        let image = &mut data[i * img * img..(i + 1) * img * img];
        for v in image.iter_mut() {
            *v = rng.gen_range(0.0..0.25);
        }
        let bright = rng.gen_range(0.75..1.0f32);
        let (sw, sh) = match label {
            0 => (rng.gen_range(img * 5 / 8..img * 7 / 8), 2 + rng.gen_range(0..2)),
            1 => (2 + rng.gen_range(0..2), rng.gen_range(img * 5 / 8..img * 7 / 8)),
            _ => {
                let s = rng.gen_range(img * 3 / 8..img * 5 / 8);
                (s, s)
            }
        };
        let x0 = rng.gen_range(0..=img - sw);
        let y0 = rng.gen_range(0..=img - sh);
        for y in y0..y0 + sh {
            for x in x0..x0 + sw {
                image[y * img + x] = bright;
            }
        }
        labels.push(label);
    }
    ClassifierDataset {
        images: Tensor4::new(n, 1, img, img, data).expect("consistent synth dims"),
        labels,
        num_classes: CLASSIFIER_CLASSES,
    }
}

/// Detection task: 1-3 bright rectangles on noise, with their ground-truth
/// boxes in pixel corner coordinates.
#[derive(Debug, Clone)]
pub struct DetectDataset {
    pub images: Tensor4,
    pub boxes: Vec<Vec<BoundingBox>>,
}

pub fn synth_detect_dataset(n: usize, img: usize, seed: u64) -> DetectDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0f32; n * img * img];
    let mut all_boxes = Vec::with_capacity(n);
    for i in 0..n {
        let image = &mut data[i * img * img..(i + 1) * img * img];
        for v in image.iter_mut() {
            *v = rng.gen_range(0.0..0.2);
        }
        let count = rng.gen_range(1..=3usize);
        let mut boxes = Vec::with_capacity(count);
        for _ in 0..count {
            let bw = rng.gen_range(img / 5..img / 2);
            let bh = rng.gen_range(img / 5..img / 2);
            let x0 = rng.gen_range(0..img - bw);
            let y0 = rng.gen_range(0..img - bh);
            let bright = rng.gen_range(0.7..1.0f32);
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    image[y * img + x] = bright;
                }
            }
            boxes.push(
                BoundingBox::new(x0 as f64, y0 as f64, (x0 + bw) as f64, (y0 + bh) as f64)
                    .expect("generated box is valid"),
            );
        }
        all_boxes.push(boxes);
    }
    DetectDataset {
        images: Tensor4::new(n, 1, img, img, data).expect("consistent synth dims"),
        boxes: all_boxes,
    }
}
