//! Desk-scale convolutional networks with reverse-mode differentiation.
//!
//! Convolution is lowered to GEMM: the weight tensor's 2-D view (filters x
//! C*KH*KW) multiplies an im2col patch matrix per image. Backward passes
//! recompute patch matrices from cached inputs rather than caching them.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sparsity::{apply_mask, MaskSet};
use crate::tensor::{GemmMatrix, WeightTensor};

use super::manifest::{LayerKind, LayerManifest, LayerSpec};

/// Activation / batch tensor `(n, c, h, w)`, row-major `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    data: Vec<f32>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
}

impl Tensor4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::ShapeMismatch {
                context: "Tensor4::new",
                expected: format!("{} elements", n * c * h * w),
                actual: format!("{} elements", data.len()),
            });
        }
        Ok(Self { data, n, c, h, w })
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            data: vec![0.0; n * c * h * w],
            n,
            c,
            h,
            w,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let sz = self.c * self.h * self.w;
        &self.data[i * sz..(i + 1) * sz]
    }

    pub fn image_mut(&mut self, i: usize) -> &mut [f32] {
        let sz = self.c * self.h * self.w;
        &mut self.data[i * sz..(i + 1) * sz]
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }
}

/// Patch matrix for one image: rows indexed by (c, ki, kj) in the same
/// channel-major order as the weight GEMM columns, columns by output
/// position.
#[allow(clippy::too_many_arguments)]
fn im2col(
    img: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
) -> GemmMatrix {
    let mut cols = GemmMatrix::zeros(c * kh * kw, h_out * w_out);
    let cols_data = cols.data_mut();
    let row_len = h_out * w_out;
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let out_row = &mut cols_data[row * row_len..(row + 1) * row_len];
                for oy in 0..h_out {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w_out {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out_row[oy * w_out + ox] =
                            img[(ch * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the patch-matrix gradient back onto an image gradient.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &GemmMatrix,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
    img_grad: &mut [f32],
) {
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                for oy in 0..h_out {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w_out {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        img_grad[(ch * h + iy as usize) * w + ix as usize] +=
                            cols.at(row, oy * w_out + ox);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: WeightTensor,
    pub bias: Vec<f32>,
    pub stride: usize,
    pub padding: usize,
    pub prunable: bool,
    grad_weight: GemmMatrix,
    grad_bias: Vec<f32>,
    cached_input: Option<Tensor4>,
}

impl Conv2d {
    pub fn new(weight: WeightTensor, stride: usize, padding: usize) -> Self {
        let (f, c, kh, kw) = weight.shape();
        Self {
            bias: vec![0.0; f],
            grad_weight: GemmMatrix::zeros(f, c * kh * kw),
            grad_bias: vec![0.0; f],
            cached_input: None,
            weight,
            stride,
            padding,
            prunable: false,
        }
    }

    /// He-initialized conv layer.
    pub fn init(
        filters: usize,
        channels: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (channels * k * k) as f32;
        let std = (2.0 / fan_in).sqrt();
        let data: Vec<f32> = (0..filters * channels * k * k)
            .map(|_| {
                // Box-Muller keeps the dependency surface small and is
                // deterministic under the seeded generator.
                let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
                let u2: f32 = rng.gen_range(0.0..1.0);
                std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
            })
            .collect();
        let weight = WeightTensor::new((filters, channels, k, k), data).expect("valid init");
        Self::new(weight, stride, padding)
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let (_, _, kh, kw) = self.weight.shape();
        (
            (h + 2 * self.padding - kh) / self.stride + 1,
            (w + 2 * self.padding - kw) / self.stride + 1,
        )
    }

    pub fn forward(&mut self, x: &Tensor4, train: bool) -> Result<Tensor4> {
        let (n, c, h, w) = x.shape();
        let (f, wc, kh, kw) = self.weight.shape();
        if c != wc {
            return Err(Error::ShapeMismatch {
                context: "Conv2d::forward",
                expected: format!("{wc} input channels"),
                actual: format!("{c} input channels"),
            });
        }
        if h + 2 * self.padding < kh || w + 2 * self.padding < kw {
            return Err(Error::ShapeMismatch {
                context: "Conv2d::forward",
                expected: format!("input at least {kh}x{kw} after padding"),
                actual: format!("{h}x{w}"),
            });
        }
        let (h_out, w_out) = self.out_dims(h, w);
        let w_gemm = self.weight.to_gemm();
        let mut out = Tensor4::zeros(n, f, h_out, w_out);
        for i in 0..n {
            let cols = im2col(x.image(i), c, h, w, kh, kw, self.stride, self.padding, h_out, w_out);
            let y = w_gemm.matmul(&cols)?;
            let dst = out.image_mut(i);
            for fi in 0..f {
                let b = self.bias[fi];
                let y_row = y.row(fi);
                let dst_row = &mut dst[fi * h_out * w_out..(fi + 1) * h_out * w_out];
                for (d, &v) in dst_row.iter_mut().zip(y_row) {
                    *d = v + b;
                }
            }
        }
        if train {
            self.cached_input = Some(x.clone());
        }
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let x = self.cached_input.take().ok_or_else(|| Error::Usage {
            message: "Conv2d::backward without cached forward input".into(),
        })?;
        let (n, c, h, w) = x.shape();
        let (f, _, kh, kw) = self.weight.shape();
        let (h_out, w_out) = self.out_dims(h, w);
        let w_gemm = self.weight.to_gemm();
        let w_t = w_gemm.transpose();
        let mut dx = Tensor4::zeros(n, c, h, w);
        for i in 0..n {
            let cols = im2col(x.image(i), c, h, w, kh, kw, self.stride, self.padding, h_out, w_out);
            let dy = GemmMatrix::new(f, h_out * w_out, grad_out.image(i).to_vec())?;
            let dw = dy.matmul(&cols.transpose())?;
            self.grad_weight = self.grad_weight.add(&dw)?;
            for fi in 0..f {
                self.grad_bias[fi] += dy.row(fi).iter().sum::<f32>();
            }
            let dcols = w_t.matmul(&dy)?;
            col2im(
                &dcols,
                c,
                h,
                w,
                kh,
                kw,
                self.stride,
                self.padding,
                h_out,
                w_out,
                dx.image_mut(i),
            );
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone)]
pub struct LeakyRelu {
    pub slope: f32,
    cached_input: Option<Tensor4>,
}

impl LeakyRelu {
    pub fn new(slope: f32) -> Self {
        Self {
            slope,
            cached_input: None,
        }
    }

    fn forward(&mut self, x: &Tensor4, train: bool) -> Tensor4 {
        let mut out = x.clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v *= self.slope;
            }
        }
        if train {
            self.cached_input = Some(x.clone());
        }
        out
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let x = self.cached_input.take().ok_or_else(|| Error::Usage {
            message: "LeakyRelu::backward without cached forward input".into(),
        })?;
        let mut dx = grad_out.clone();
        for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
            if v < 0.0 {
                *g *= self.slope;
            }
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    cached_hw: Option<(usize, usize)>,
}

impl GlobalAvgPool {
    fn forward(&mut self, x: &Tensor4, train: bool) -> Tensor4 {
        let (n, c, h, w) = x.shape();
        let mut out = Tensor4::zeros(n, c, 1, 1);
        let area = (h * w) as f32;
        for i in 0..n {
            let img = x.image(i);
            for ch in 0..c {
                let s: f32 = img[ch * h * w..(ch + 1) * h * w].iter().sum();
                out.data_mut()[i * c + ch] = s / area;
            }
        }
        if train {
            self.cached_hw = Some((h, w));
        }
        out
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let (h, w) = self.cached_hw.take().ok_or_else(|| Error::Usage {
            message: "GlobalAvgPool::backward without cached forward".into(),
        })?;
        let (n, c, _, _) = grad_out.shape();
        let mut dx = Tensor4::zeros(n, c, h, w);
        let area = (h * w) as f32;
        for i in 0..n {
            for ch in 0..c {
                let g = grad_out.data()[i * c + ch] / area;
                for v in &mut dx.image_mut(i)[ch * h * w..(ch + 1) * h * w] {
                    *v = g;
                }
            }
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: GemmMatrix, // out x in
    pub bias: Vec<f32>,
    grad_weight: GemmMatrix,
    grad_bias: Vec<f32>,
    cached_input: Option<Tensor4>,
}

impl Dense {
    pub fn grad_weight(&self) -> &GemmMatrix {
        &self.grad_weight
    }

    pub fn grad_bias(&self) -> &[f32] {
        &self.grad_bias
    }

    pub fn init(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / inputs as f32).sqrt();
        let data: Vec<f32> = (0..inputs * outputs)
            .map(|_| {
                let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
                let u2: f32 = rng.gen_range(0.0..1.0);
                std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
            })
            .collect();
        Self {
            weight: GemmMatrix::new(outputs, inputs, data).expect("valid init"),
            bias: vec![0.0; outputs],
            grad_weight: GemmMatrix::zeros(outputs, inputs),
            grad_bias: vec![0.0; outputs],
            cached_input: None,
        }
    }

    fn forward(&mut self, x: &Tensor4, train: bool) -> Result<Tensor4> {
        let (n, c, h, w) = x.shape();
        let features = c * h * w;
        if features != self.weight.cols() {
            return Err(Error::ShapeMismatch {
                context: "Dense::forward",
                expected: format!("{} features", self.weight.cols()),
                actual: format!("{features} features"),
            });
        }
        let outputs = self.weight.rows();
        let mut out = Tensor4::zeros(n, outputs, 1, 1);
        for i in 0..n {
            let img = x.image(i);
            for o in 0..outputs {
                let mut acc = self.bias[o];
                for (wv, xv) in self.weight.row(o).iter().zip(img) {
                    acc += wv * xv;
                }
                out.data_mut()[i * outputs + o] = acc;
            }
        }
        if train {
            self.cached_input = Some(x.clone());
        }
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let x = self.cached_input.take().ok_or_else(|| Error::Usage {
            message: "Dense::backward without cached forward input".into(),
        })?;
        let (n, c, h, w) = x.shape();
        let features = c * h * w;
        let outputs = self.weight.rows();
        let mut dx = Tensor4::zeros(n, c, h, w);
        for i in 0..n {
            let img = x.image(i);
            let g = &grad_out.data()[i * outputs..(i + 1) * outputs];
            for o in 0..outputs {
                let go = g[o];
                self.grad_bias[o] += go;
                let wrow = self.weight.row(o);
                let dw_row = &mut self.grad_weight.data_mut()[o * features..(o + 1) * features];
                let dx_img = dx.image_mut(i);
                for f in 0..features {
                    dw_row[f] += go * img[f];
                    dx_img[f] += go * wrow[f];
                }
            }
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    LeakyRelu(LeakyRelu),
    GlobalAvgPool(GlobalAvgPool),
    Dense(Dense),
}

/// What a network is for; decides loss, evaluation, and head decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetKind {
    Classifier,
    Detector,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub kind: NetKind,
    pub input_channels: usize,
}

impl Network {
    pub fn new(kind: NetKind, input_channels: usize, layers: Vec<Layer>) -> Self {
        Self {
            layers,
            kind,
            input_channels,
        }
    }

    pub fn forward(&mut self, x: &Tensor4, train: bool) -> Result<Tensor4> {
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = match layer {
                Layer::Conv(l) => l.forward(&cur, train)?,
                Layer::LeakyRelu(l) => l.forward(&cur, train),
                Layer::GlobalAvgPool(l) => l.forward(&cur, train),
                Layer::Dense(l) => l.forward(&cur, train)?,
            };
        }
        if !cur.data().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "network forward produced NaN/Inf".into(),
            });
        }
        Ok(cur)
    }

    /// Reverse-mode pass; fills every layer's parameter gradients and
    /// returns the input gradient.
    pub fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let mut cur = grad_out.clone();
        for layer in self.layers.iter_mut().rev() {
            cur = match layer {
                Layer::Conv(l) => l.backward(&cur)?,
                Layer::LeakyRelu(l) => l.backward(&cur)?,
                Layer::GlobalAvgPool(l) => l.backward(&cur)?,
                Layer::Dense(l) => l.backward(&cur)?,
            };
        }
        if !cur.data().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "network backward produced NaN/Inf".into(),
            });
        }
        Ok(cur)
    }

    pub fn zero_grads(&mut self) {
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(l) => {
                    let (r, c) = (l.grad_weight.rows(), l.grad_weight.cols());
                    l.grad_weight = GemmMatrix::zeros(r, c);
                    l.grad_bias.iter_mut().for_each(|g| *g = 0.0);
                }
                Layer::Dense(l) => {
                    let (r, c) = (l.grad_weight.rows(), l.grad_weight.cols());
                    l.grad_weight = GemmMatrix::zeros(r, c);
                    l.grad_bias.iter_mut().for_each(|g| *g = 0.0);
                }
                _ => {}
            }
        }
    }

    fn conv_layers(&self) -> impl Iterator<Item = &Conv2d> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    fn conv_layers_mut(&mut self) -> impl Iterator<Item = &mut Conv2d> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    pub fn conv_count(&self) -> usize {
        self.conv_layers().count()
    }

    fn conv(&self, ordinal: usize) -> Result<&Conv2d> {
        self.conv_layers().nth(ordinal).ok_or(Error::IndexOutOfBounds {
            context: "conv ordinal",
            index: ordinal,
            bound: self.conv_count(),
        })
    }

    fn conv_mut(&mut self, ordinal: usize) -> Result<&mut Conv2d> {
        let bound = self.conv_count();
        self.conv_layers_mut()
            .nth(ordinal)
            .ok_or(Error::IndexOutOfBounds {
                context: "conv ordinal",
                index: ordinal,
                bound,
            })
    }

    /// Conv ordinals flagged prunable.
    pub fn prunable_ordinals(&self) -> Vec<usize> {
        self.conv_layers()
            .enumerate()
            .filter(|(_, c)| c.prunable)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn gemm_weights(&self, ordinal: usize) -> Result<GemmMatrix> {
        Ok(self.conv(ordinal)?.weight.to_gemm())
    }

    /// Accumulated weight gradient of a conv layer, in the GEMM view.
    pub fn conv_weight_grad(&self, ordinal: usize) -> Result<GemmMatrix> {
        Ok(self.conv(ordinal)?.grad_weight.clone())
    }

    pub fn conv_bias_grad(&self, ordinal: usize) -> Result<Vec<f32>> {
        Ok(self.conv(ordinal)?.grad_bias.clone())
    }

    pub fn gemm_dims(&self, ordinal: usize) -> Result<(usize, usize)> {
        let (f, c, kh, kw) = self.conv(ordinal)?.weight.shape();
        Ok((f, c * kh * kw))
    }

    pub fn set_gemm_weights(&mut self, ordinal: usize, m: &GemmMatrix) -> Result<()> {
        let conv = self.conv_mut(ordinal)?;
        let shape = conv.weight.shape();
        conv.weight = WeightTensor::from_gemm(m, shape)?;
        Ok(())
    }

    /// Add an external gradient term (e.g. a penalty gradient) to a conv
    /// layer's accumulated weight gradient.
    pub fn add_conv_grad(&mut self, ordinal: usize, grad: &GemmMatrix) -> Result<()> {
        let conv = self.conv_mut(ordinal)?;
        conv.grad_weight = conv.grad_weight.add(grad)?;
        Ok(())
    }

    /// SGD update. Masked conv layers have their weight gradients multiplied
    /// elementwise by the mask first, so pruned weights never move.
    pub fn sgd_step(&mut self, lr: f32, masks: Option<&MaskSet>) -> Result<()> {
        let mut ordinal = 0usize;
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(l) => {
                    let grad = match masks.and_then(|m| m.get(ordinal)) {
                        Some(mask) => apply_mask(&l.grad_weight, mask)?,
                        None => l.grad_weight.clone(),
                    };
                    let shape = l.weight.shape();
                    let mut w = l.weight.to_gemm();
                    for (wv, gv) in w.data_mut().iter_mut().zip(grad.data()) {
                        *wv -= lr * gv;
                    }
                    l.weight = WeightTensor::from_gemm(&w, shape)?;
                    for (b, g) in l.bias.iter_mut().zip(&l.grad_bias) {
                        *b -= lr * g;
                    }
                    ordinal += 1;
                }
                Layer::Dense(l) => {
                    for (wv, gv) in l.weight.data_mut().iter_mut().zip(l.grad_weight.data()) {
                        *wv -= lr * gv;
                    }
                    for (b, g) in l.bias.iter_mut().zip(&l.grad_bias) {
                        *b -= lr * g;
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Check that masked weights are exactly zero.
    pub fn verify_mask_support(&self, masks: &MaskSet) -> Result<()> {
        for (ordinal, mask) in masks.iter() {
            let w = self.gemm_weights(ordinal)?;
            for r in 0..w.rows() {
                for c in 0..w.cols() {
                    if !mask.at(r, c) && w.at(r, c) != 0.0 {
                        return Err(Error::Invariant {
                            context: format!(
                                "masked weight escaped zero at conv {ordinal} ({r}, {c})"
                            ),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Architecture manifest for accounting and archiving, tracing spatial
    /// dims from the given input size.
    pub fn to_manifest(&self, input_h: usize, input_w: usize) -> LayerManifest {
        let mut layers = Vec::new();
        let (mut h, mut w) = (input_h, input_w);
        for layer in &self.layers {
            match layer {
                Layer::Conv(l) => {
                    let (f, c, kh, _kw) = l.weight.shape();
                    let (h_out, w_out) = l.out_dims(h, w);
                    layers.push(
                        LayerSpec::conv(f, c, kh, l.stride, h_out, w_out).prunable(l.prunable),
                    );
                    h = h_out;
                    w = w_out;
                }
                Layer::GlobalAvgPool(_) => {
                    h = 1;
                    w = 1;
                }
                Layer::Dense(l) => {
                    let mut spec = LayerSpec::conv(l.weight.rows(), l.weight.cols(), 1, 1, 1, 1);
                    spec.kind = LayerKind::Dense;
                    layers.push(spec);
                }
                Layer::LeakyRelu(_) => {}
            }
        }
        if self.kind == NetKind::Detector {
            if let Some(last) = layers.last().cloned() {
                let mut det = LayerSpec::conv(last.filters, last.filters, 1, 1, last.h_out, last.w_out);
                det.kind = LayerKind::Detect;
                layers.push(det);
            }
        }
        LayerManifest::new(layers).expect("network manifest is consistent")
    }

    /// Conv weights concatenated in layer order (the archive blob).
    pub fn flat_conv_weights(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for conv in self.conv_layers() {
            out.extend_from_slice(conv.weight.data());
        }
        out
    }

    pub fn load_conv_weights(&mut self, blob: &[f32]) -> Result<()> {
        let expected: usize = self.conv_layers().map(|c| c.weight.param_count()).sum();
        if blob.len() != expected {
            return Err(Error::archive(format!(
                "conv weight blob has {} values, expected {}",
                blob.len(),
                expected
            )));
        }
        let mut offset = 0;
        for conv in self.conv_layers_mut() {
            let n = conv.weight.param_count();
            let shape = conv.weight.shape();
            conv.weight = WeightTensor::new(shape, blob[offset..offset + n].to_vec())?;
            offset += n;
        }
        Ok(())
    }

    /// Biases and dense parameters, in layer order (the auxiliary blob).
    pub fn flat_aux_params(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(l) => out.extend_from_slice(&l.bias),
                Layer::Dense(l) => {
                    out.extend_from_slice(l.weight.data());
                    out.extend_from_slice(&l.bias);
                }
                _ => {}
            }
        }
        out
    }

    pub fn load_aux_params(&mut self, blob: &[f32]) -> Result<()> {
        let expected = self.flat_aux_params().len();
        if blob.len() != expected {
            return Err(Error::archive(format!(
                "aux blob has {} values, expected {}",
                blob.len(),
                expected
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(l) => {
                    let n = l.bias.len();
                    l.bias.copy_from_slice(&blob[offset..offset + n]);
                    offset += n;
                }
                Layer::Dense(l) => {
                    let n = l.weight.rows() * l.weight.cols();
                    let (r, c) = (l.weight.rows(), l.weight.cols());
                    l.weight = GemmMatrix::new(r, c, blob[offset..offset + n].to_vec())?;
                    offset += n;
                    let nb = l.bias.len();
                    l.bias.copy_from_slice(&blob[offset..offset + nb]);
                    offset += nb;
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Penalty gradients or similar per-conv terms keyed by ordinal.
    pub fn add_conv_grads(&mut self, grads: &BTreeMap<usize, GemmMatrix>) -> Result<()> {
        for (&ordinal, g) in grads {
            self.add_conv_grad(ordinal, g)?;
        }
        Ok(())
    }
}

/// Conv forward through a physically compacted GEMM: retained weight
/// rows/columns come from the mask, the im2col patch rows are gathered to
/// match, and the compact product is scattered back to the full channel set
/// before the bias add. Numerically equivalent to the masked dense forward.
pub fn conv_forward_compacted(
    conv: &Conv2d,
    x: &Tensor4,
    mask: &crate::sparsity::SparsityMask,
) -> Result<Tensor4> {
    let (n, c, h, w) = x.shape();
    let (f, _, kh, kw) = conv.weight.shape();
    let (h_out, w_out) = conv.out_dims(h, w);
    let w_gemm = conv.weight.to_gemm();
    let masked = apply_mask(&w_gemm, mask)?;
    let compacted = crate::tensor::compact(&masked, &mask.retained_rows(), &mask.retained_cols())?;
    let mut out = Tensor4::zeros(n, f, h_out, w_out);
    for i in 0..n {
        let cols = im2col(x.image(i), c, h, w, kh, kw, conv.stride, conv.padding, h_out, w_out);
        let y = compacted.matmul_expanded(&cols)?;
        let dst = out.image_mut(i);
        for fi in 0..f {
            let b = conv.bias[fi];
            for (d, &v) in dst[fi * h_out * w_out..(fi + 1) * h_out * w_out]
                .iter_mut()
                .zip(y.row(fi))
            {
                *d = v + b;
            }
        }
    }
    Ok(out)
}

/// 3-4 conv layers, global pooling, and a linear head: the fast pruning
/// testbed. Input is single-channel `img`-sized; conv layers 1 and 2 are
/// prunable.
pub fn tiny_classifier(num_classes: usize, rng: &mut ChaCha8Rng) -> Network {
    let mut conv1 = Conv2d::init(8, 1, 3, 1, 1, rng);
    conv1.prunable = false;
    let mut conv2 = Conv2d::init(16, 8, 3, 2, 1, rng);
    conv2.prunable = true;
    let mut conv3 = Conv2d::init(16, 16, 3, 2, 1, rng);
    conv3.prunable = true;
    let dense = Dense::init(16, num_classes, rng);
    Network::new(
        NetKind::Classifier,
        1,
        vec![
            Layer::Conv(conv1),
            Layer::LeakyRelu(LeakyRelu::new(0.1)),
            Layer::Conv(conv2),
            Layer::LeakyRelu(LeakyRelu::new(0.1)),
            Layer::Conv(conv3),
            Layer::LeakyRelu(LeakyRelu::new(0.1)),
            Layer::GlobalAvgPool(GlobalAvgPool::default()),
            Layer::Dense(dense),
        ],
    )
}

/// Single-scale detector: five stride-2 convs (total stride 32), one
/// refinement conv, and an 18-channel head (3 anchors x (4 + 1 + 1)) over an
/// N x N grid.
pub fn tiny_detect(rng: &mut ChaCha8Rng) -> Network {
    let mut layers = Vec::new();
    let specs: [(usize, usize, usize, bool); 7] = [
        (8, 1, 2, false),
        (16, 8, 2, true),
        (16, 16, 2, true),
        (24, 16, 2, true),
        (24, 24, 2, true),
        (24, 24, 1, true),
        (18, 24, 1, false),
    ];
    for (i, &(f, c, stride, prunable)) in specs.iter().enumerate() {
        let k = if i + 1 == specs.len() { 1 } else { 3 };
        let pad = if k == 3 { 1 } else { 0 };
        let mut conv = Conv2d::init(f, c, k, stride, pad, rng);
        conv.prunable = prunable;
        layers.push(Layer::Conv(conv));
        if i + 1 != specs.len() {
            layers.push(Layer::LeakyRelu(LeakyRelu::new(0.1)));
        }
    }
    Network::new(NetKind::Detector, 1, layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_net_zero_input_gives_zero_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = tiny_classifier(3, &mut rng);
        for layer in &mut net.layers {
            if let Layer::Conv(l) = layer {
                let shape = l.weight.shape();
                l.weight = WeightTensor::zeros(shape).unwrap();
            }
            if let Layer::Dense(l) = layer {
                let (r, c) = (l.weight.rows(), l.weight.cols());
                l.weight = GemmMatrix::zeros(r, c);
            }
        }
        let x = Tensor4::zeros(2, 1, 16, 16);
        let out = net.forward(&x, false).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn detector_shape_law_320_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = tiny_detect(&mut rng);
        let x = Tensor4::zeros(1, 1, 320, 320);
        let out = net.forward(&x, false).unwrap();
        // Total stride 32: N = 10; channels 3 * (4 + 1 + 1) = 18.
        assert_eq!(out.shape(), (1, 18, 10, 10));
        assert!(net.conv_count() <= 8);
    }

    #[test]
    fn single_conv_analytic_gradient() {
        // 1x1 conv on a 1x1 image with quadratic loss (w*x - y)^2:
        // dL/dw = 2 * (w*x - y) * x.
        let w = WeightTensor::new((1, 1, 1, 1), vec![0.7]).unwrap();
        let mut conv = Conv2d::new(w, 1, 0);
        let x = Tensor4::new(1, 1, 1, 1, vec![3.0]).unwrap();
        let y_true = 2.0f32;
        let out = conv.forward(&x, true).unwrap();
        let pred = out.data()[0];
        let dpred = 2.0 * (pred - y_true);
        let grad = Tensor4::new(1, 1, 1, 1, vec![dpred]).unwrap();
        conv.backward(&grad).unwrap();
        let expect = 2.0 * (0.7 * 3.0 - y_true) * 3.0;
        assert!((conv.grad_weight.at(0, 0) - expect).abs() < 1e-6);
    }

    #[test]
    fn constant_loss_means_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = tiny_classifier(3, &mut rng);
        let x = Tensor4::zeros(2, 1, 16, 16);
        net.forward(&x, true).unwrap();
        net.zero_grads();
        let zero_grad = Tensor4::zeros(2, 3, 1, 1);
        net.backward(&zero_grad).unwrap();
        for layer in &net.layers {
            if let Layer::Conv(l) = layer {
                assert!(l.grad_weight.data().iter().all(|&g| g == 0.0));
                assert!(l.grad_bias.iter().all(|&g| g == 0.0));
            }
        }
    }

    #[test]
    fn manifest_matches_architecture() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = tiny_classifier(3, &mut rng);
        let manifest = net.to_manifest(16, 16);
        assert_eq!(manifest.conv_layers().count(), 3);
        assert_eq!(manifest.prunable_conv_ordinals(), vec![1, 2]);
        assert_eq!(manifest.layers.last().unwrap().kind, LayerKind::Dense);
        // conv2 at stride 2 from 16x16 -> 8x8; conv3 -> 4x4.
        let dims: Vec<(usize, usize)> = manifest
            .conv_layers()
            .map(|(_, l)| (l.h_out, l.w_out))
            .collect();
        assert_eq!(dims, vec![(16, 16), (8, 8), (4, 4)]);
    }

    #[test]
    fn blob_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = tiny_classifier(3, &mut rng);
        let mut rng2 = ChaCha8Rng::seed_from_u64(5);
        let mut other = tiny_classifier(3, &mut rng2);
        assert_ne!(net.flat_conv_weights(), other.flat_conv_weights());
        other.load_conv_weights(&net.flat_conv_weights()).unwrap();
        other.load_aux_params(&net.flat_aux_params()).unwrap();
        assert_eq!(net.flat_conv_weights(), other.flat_conv_weights());
        assert_eq!(net.flat_aux_params(), other.flat_aux_params());

        let short = vec![0.0f32; 3];
        assert!(other.load_conv_weights(&short).is_err());
        assert!(other.load_aux_params(&short).is_err());
    }

    #[test]
    fn gemm_weight_round_trip_through_network() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut net = tiny_classifier(3, &mut rng);
        let w = net.gemm_weights(1).unwrap();
        assert_eq!((w.rows(), w.cols()), (16, 72));
        net.set_gemm_weights(1, &w).unwrap();
        assert_eq!(net.gemm_weights(1).unwrap(), w);
        assert!(net.gemm_weights(7).is_err());
    }
}
