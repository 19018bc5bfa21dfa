//! Training loops for the desk-scale nets: SGD with the warmup/cosine
//! schedule, optional mixup, gradient masking, and a hook point for
//! penalty-augmented losses.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::schedules::{mixup, mixup_union, sample_lambda, LrSchedule, MixupConfig};
use crate::sparsity::MaskSet;

use super::data::{ClassifierDataset, DetectDataset};
use super::decode::{detect_loss, DecodeConfig, WeightedBoxes};
use super::layers::{Network, Tensor4};

/// Adjusts accumulated gradients after backward and before the SGD step
/// (penalty-regularized training injects its term here).
pub trait GradHook {
    fn adjust(&self, net: &mut Network) -> Result<()>;
}

/// What the pruning pipeline needs from a task: epochs of augmented-loss
/// minimization and a scalar quality measure.
pub trait PipelineTask {
    fn train_epoch(
        &mut self,
        net: &mut Network,
        hook: Option<&dyn GradHook>,
        masks: Option<&MaskSet>,
    ) -> Result<f64>;

    fn evaluate(&mut self, net: &mut Network) -> Result<f64>;
}

/// Mean softmax cross-entropy against soft targets, with its gradient
/// w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Tensor4, targets: &[f32]) -> Result<(f64, Tensor4)> {
    let (n, k, h, w) = logits.shape();
    if h != 1 || w != 1 || targets.len() != n * k {
        return Err(Error::ShapeMismatch {
            context: "softmax_cross_entropy",
            expected: format!("(n, k, 1, 1) logits with {} targets", n * k),
            actual: format!("({n}, {k}, {h}, {w}) with {} targets", targets.len()),
        });
    }
    let mut grad = Tensor4::zeros(n, k, 1, 1);
    let mut total = 0.0f64;
    for i in 0..n {
        let z = &logits.data()[i * k..(i + 1) * k];
        let y = &targets[i * k..(i + 1) * k];
        let zmax = z.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let exps: Vec<f64> = z.iter().map(|&v| ((v - zmax) as f64).exp()).collect();
        let denom: f64 = exps.iter().sum();
        for j in 0..k {
            let p = exps[j] / denom;
            total -= y[j] as f64 * p.max(1e-30).ln();
            grad.data_mut()[i * k + j] = (p as f32 - y[j]) / n as f32;
        }
    }
    let mean = total / n as f64;
    if !mean.is_finite() {
        return Err(Error::NonFinite {
            context: "softmax_cross_entropy diverged".into(),
        });
    }
    Ok((mean, grad))
}

/// Fraction of argmax predictions matching labels.
pub fn accuracy(net: &mut Network, images: &Tensor4, labels: &[usize]) -> Result<f64> {
    let logits = net.forward(images, false)?;
    let (n, k, _, _) = logits.shape();
    let mut correct = 0usize;
    for i in 0..n {
        let z = &logits.data()[i * k..(i + 1) * k];
        let pred = z
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(j, _)| j)
            .unwrap_or(0);
        if pred == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}

fn gather_batch(images: &Tensor4, idx: &[usize]) -> Tensor4 {
    let (_, c, h, w) = images.shape();
    let mut data = Vec::with_capacity(idx.len() * c * h * w);
    for &i in idx {
        data.extend_from_slice(images.image(i));
    }
    Tensor4::new(idx.len(), c, h, w, data).expect("batch dims consistent")
}

fn one_hot(labels: &[usize], idx: &[usize], k: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; idx.len() * k];
    for (row, &i) in idx.iter().enumerate() {
        out[row * k + labels[i]] = 1.0;
    }
    out
}

#[derive(Debug, Clone)]
pub struct ClassifierTrainer {
    pub train: ClassifierDataset,
    pub eval_images: Tensor4,
    pub eval_labels: Vec<usize>,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub mixup: MixupConfig,
    rng: ChaCha8Rng,
    batch_index: usize,
}

impl ClassifierTrainer {
    pub fn new(
        train: ClassifierDataset,
        eval: ClassifierDataset,
        batch_size: usize,
        lr: LrSchedule,
        mixup: MixupConfig,
        seed: u64,
    ) -> Self {
        Self {
            train,
            eval_images: eval.images,
            eval_labels: eval.labels,
            batch_size,
            lr,
            mixup,
            rng: ChaCha8Rng::seed_from_u64(seed),
            batch_index: 0,
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        let n = self.train.labels.len();
        n.div_ceil(self.batch_size)
    }
}

impl PipelineTask for ClassifierTrainer {
    fn train_epoch(
        &mut self,
        net: &mut Network,
        hook: Option<&dyn GradHook>,
        masks: Option<&MaskSet>,
    ) -> Result<f64> {
        let n = self.train.labels.len();
        let k = self.train.num_classes;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(self.batch_size) {
            let mut x = gather_batch(&self.train.images, chunk);
            let mut y = one_hot(&self.train.labels, chunk, k);
            if self.mixup.enabled && chunk.len() > 1 {
                let lambda = sample_lambda(&self.mixup, &mut self.rng);
                let (xd, yd) = (x.data().to_vec(), y.clone());
                let per = xd.len() / chunk.len();
                for i in 0..chunk.len() {
                    let j = chunk.len() - 1 - i;
                    let (xm, ym) = mixup(
                        &xd[i * per..(i + 1) * per],
                        &yd[i * k..(i + 1) * k],
                        &xd[j * per..(j + 1) * per],
                        &yd[j * k..(j + 1) * k],
                        lambda,
                    )?;
                    x.data_mut()[i * per..(i + 1) * per].copy_from_slice(&xm);
                    y[i * k..(i + 1) * k].copy_from_slice(&ym);
                }
            }
            let logits = net.forward(&x, true)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("training loss diverged at batch {}", self.batch_index),
                });
            }
            net.zero_grads();
            net.backward(&grad)?;
            if let Some(hook) = hook {
                hook.adjust(net)?;
            }
            let lr = self.lr.lr_at_clamped(self.batch_index) as f32;
            net.sgd_step(lr, masks)?;
            self.batch_index += 1;
            epoch_loss += loss;
            batches += 1;
        }
        Ok(epoch_loss / batches.max(1) as f64)
    }

    fn evaluate(&mut self, net: &mut Network) -> Result<f64> {
        accuracy(net, &self.eval_images, &self.eval_labels)
    }
}

#[derive(Debug, Clone)]
pub struct DetectTrainer {
    pub train: DetectDataset,
    pub eval: DetectDataset,
    pub decode: DecodeConfig,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub mixup: MixupConfig,
    rng: ChaCha8Rng,
    batch_index: usize,
}

impl DetectTrainer {
    pub fn new(
        train: DetectDataset,
        eval: DetectDataset,
        decode: DecodeConfig,
        batch_size: usize,
        lr: LrSchedule,
        mixup: MixupConfig,
        seed: u64,
    ) -> Self {
        Self {
            train,
            eval,
            decode,
            batch_size,
            lr,
            mixup,
            rng: ChaCha8Rng::seed_from_u64(seed),
            batch_index: 0,
        }
    }
}

impl PipelineTask for DetectTrainer {
    fn train_epoch(
        &mut self,
        net: &mut Network,
        hook: Option<&dyn GradHook>,
        masks: Option<&MaskSet>,
    ) -> Result<f64> {
        let n = self.train.boxes.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(self.batch_size) {
            let mut x = gather_batch(&self.train.images, chunk);
            let mut targets: Vec<WeightedBoxes> = chunk
                .iter()
                .map(|&i| self.train.boxes[i].iter().map(|&b| (b, 1.0)).collect())
                .collect();
            if self.mixup.enabled && chunk.len() > 1 {
                // Mix images with their reversed batch; targets become the
                // weighted union of both box sets.
                let lambda = sample_lambda(&self.mixup, &mut self.rng);
                let xd = x.data().to_vec();
                let per = xd.len() / chunk.len();
                let plain: Vec<Vec<crate::metrics::BoundingBox>> = chunk
                    .iter()
                    .map(|&i| self.train.boxes[i].clone())
                    .collect();
                for i in 0..chunk.len() {
                    let j = chunk.len() - 1 - i;
                    let l = lambda as f32;
                    for (dst, (&a, &b)) in x.data_mut()[i * per..(i + 1) * per]
                        .iter_mut()
                        .zip(xd[i * per..(i + 1) * per].iter().zip(&xd[j * per..(j + 1) * per]))
                    {
                        *dst = l * a + (1.0 - l) * b;
                    }
                    targets[i] = mixup_union(&plain[i], &plain[j], lambda);
                }
            }
            let out = net.forward(&x, true)?;
            let (loss, grad) = detect_loss(&out, &targets, &self.decode)?;
            net.zero_grads();
            net.backward(&grad)?;
            if let Some(hook) = hook {
                hook.adjust(net)?;
            }
            let lr = self.lr.lr_at_clamped(self.batch_index) as f32;
            net.sgd_step(lr, masks)?;
            self.batch_index += 1;
            epoch_loss += loss;
            batches += 1;
        }
        Ok(epoch_loss / batches.max(1) as f64)
    }

    /// Mean AP at IoU 0.5 over the held-out images.
    fn evaluate(&mut self, net: &mut Network) -> Result<f64> {
        use crate::metrics::{map_at, ImageEval, Interpolation};
        let out = net.forward(&self.eval.images, false)?;
        let decoded = super::decode::decode_batch(&out, &self.decode)?;
        let images: Vec<ImageEval> = decoded
            .into_iter()
            .zip(&self.eval.boxes)
            .map(|(predictions, truths)| ImageEval {
                predictions,
                truths: truths.clone(),
            })
            .collect();
        Ok(map_at(&images, 0.5, Interpolation::AllPoint))
    }
}

/// Deterministic network construction plus a short training run, used by
/// tests and the train command.
pub fn train_classifier_baseline(
    net: &mut Network,
    trainer: &mut ClassifierTrainer,
    epochs: usize,
) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        losses.push(trainer.train_epoch(net, None, None)?);
    }
    Ok(losses)
}
