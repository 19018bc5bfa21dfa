//! Independent oracles shared by the integration suites. Everything here is
//! written from first principles (enumeration, naive loops, quadrature) and
//! stays independent of the library's implementation paths.

#![allow(dead_code)]

use prunenet::metrics::{iou, BoundingBox};
use prunenet::tensor::GemmMatrix;

/// Naive row-by-column triple loop.
pub fn naive_matmul(a: &GemmMatrix, b: &GemmMatrix) -> GemmMatrix {
    let mut out = GemmMatrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0.0f32;
            for k in 0..a.cols() {
                acc += a.at(i, k) * b.at(k, j);
            }
            out.set(i, j, acc);
        }
    }
    out
}

/// All size-k subsets of 0..n in lexicographic order.
pub fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Exhaustive minimal-Frobenius-distance row support; ties resolve to the
/// lexicographically smallest support (strictly-better comparison over the
/// lexicographic enumeration).
pub fn best_row_support(m: &GemmMatrix, alpha: usize) -> Vec<usize> {
    let mut best: Option<(f64, Vec<usize>)> = None;
    for support in subsets(m.rows(), alpha) {
        let mut dist = 0.0f64;
        for r in 0..m.rows() {
            if !support.contains(&r) {
                dist += m.row(r).iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
            }
        }
        if best.as_ref().map_or(true, |(d, _)| dist < *d) {
            best = Some((dist, support));
        }
    }
    best.expect("alpha <= rows").1
}

pub fn best_col_support(m: &GemmMatrix, alpha: usize) -> Vec<usize> {
    best_row_support(&m.transpose(), alpha)
}

/// Exhaustive best alpha-sparse approximation of `m` (minimum squared
/// distance over every element support).
pub fn best_sparse_approximation(m: &GemmMatrix, alpha: usize) -> GemmMatrix {
    let n = m.rows() * m.cols();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for support in subsets(n, alpha) {
        let mut dist = 0.0f64;
        for i in 0..n {
            if !support.contains(&i) {
                let v = m.data()[i] as f64;
                dist += v * v;
            }
        }
        if best.as_ref().map_or(true, |(d, _)| dist < *d) {
            best = Some((dist, support));
        }
    }
    let support = best.expect("alpha <= elements").1;
    let mut out = GemmMatrix::zeros(m.rows(), m.cols());
    for i in support {
        out.data_mut()[i] = m.data()[i];
    }
    out
}

/// Float64 shadow of the small classifier: naive-loop forward written from
/// the layer contracts, used as the high-precision reference for gradient
/// checks. Assumes the conv -> leaky-relu stack, global average pooling,
/// and a dense softmax head of the desk classifier.
pub struct ShadowClassifier {
    pub convs: Vec<ShadowConv>,
    pub dense_w: Vec<f64>,
    pub dense_b: Vec<f64>,
    pub dense_out: usize,
    pub dense_in: usize,
    pub slope: f64,
}

pub struct ShadowConv {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub filters: usize,
    pub channels: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ShadowClassifier {
    pub fn from_network(net: &prunenet::nets::Network) -> Self {
        use prunenet::nets::Layer;
        let mut convs = Vec::new();
        let mut dense = None;
        let mut slope = 0.1f64;
        for layer in &net.layers {
            match layer {
                Layer::Conv(c) => {
                    let (f, ch, kh, _) = c.weight.shape();
                    convs.push(ShadowConv {
                        w: c.weight.data().iter().map(|&v| v as f64).collect(),
                        b: c.bias.iter().map(|&v| v as f64).collect(),
                        filters: f,
                        channels: ch,
                        k: kh,
                        stride: c.stride,
                        pad: c.padding,
                    });
                }
                Layer::LeakyRelu(l) => slope = l.slope as f64,
                Layer::Dense(d) => {
                    dense = Some((
                        d.weight.data().iter().map(|&v| v as f64).collect::<Vec<f64>>(),
                        d.bias.iter().map(|&v| v as f64).collect::<Vec<f64>>(),
                        d.weight.rows(),
                        d.weight.cols(),
                    ));
                }
                Layer::GlobalAvgPool(_) => {}
            }
        }
        let (dense_w, dense_b, dense_out, dense_in) = dense.expect("classifier has a dense head");
        Self {
            convs,
            dense_w,
            dense_b,
            dense_out,
            dense_in,
            slope,
        }
    }

    fn conv_forward(conv: &ShadowConv, x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
        let (ho, wo) = (
            (h + 2 * conv.pad - conv.k) / conv.stride + 1,
            (w + 2 * conv.pad - conv.k) / conv.stride + 1,
        );
        let mut out = vec![0.0f64; conv.filters * ho * wo];
        for f in 0..conv.filters {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = conv.b[f];
                    for c in 0..conv.channels {
                        for ki in 0..conv.k {
                            for kj in 0..conv.k {
                                let iy = (oy * conv.stride + ki) as isize - conv.pad as isize;
                                let ix = (ox * conv.stride + kj) as isize - conv.pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let wv =
                                    conv.w[((f * conv.channels + c) * conv.k + ki) * conv.k + kj];
                                acc += wv * x[(c * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(f * ho + oy) * wo + ox] = acc;
                }
            }
        }
        (out, ho, wo)
    }

    /// Mean softmax cross-entropy over the batch, all in f64.
    pub fn loss(&self, x: &[f64], n: usize, c: usize, h: usize, w: usize, targets: &[f64]) -> f64 {
        let mut total = 0.0f64;
        for i in 0..n {
            let mut act = x[i * c * h * w..(i + 1) * c * h * w].to_vec();
            let (mut ch, mut hh, mut ww) = (c, h, w);
            for conv in &self.convs {
                let (mut next, ho, wo) = Self::conv_forward(conv, &act, hh, ww);
                for v in &mut next {
                    if *v < 0.0 {
                        *v *= self.slope;
                    }
                }
                act = next;
                ch = conv.filters;
                hh = ho;
                ww = wo;
            }
            // Global average pool.
            let mut pooled = vec![0.0f64; ch];
            for cc in 0..ch {
                pooled[cc] = act[cc * hh * ww..(cc + 1) * hh * ww].iter().sum::<f64>()
                    / (hh * ww) as f64;
            }
            assert_eq!(pooled.len(), self.dense_in);
            // Dense head + softmax cross-entropy.
            let mut logits = vec![0.0f64; self.dense_out];
            for o in 0..self.dense_out {
                let mut acc = self.dense_b[o];
                for (wv, xv) in self.dense_w[o * self.dense_in..(o + 1) * self.dense_in]
                    .iter()
                    .zip(&pooled)
                {
                    acc += wv * xv;
                }
                logits[o] = acc;
            }
            let zmax = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = logits.iter().map(|&z| (z - zmax).exp()).sum();
            for (o, &z) in logits.iter().enumerate() {
                let p = (z - zmax).exp() / denom;
                total -= targets[i * self.dense_out + o] * p.max(1e-300).ln();
            }
        }
        total / n as f64
    }
}

fn score_of(b: &BoundingBox) -> f64 {
    b.score.unwrap_or(1.0)
}

/// Enumerate every injective prediction-to-truth assignment and keep the one
/// consistent with the matching contract (predictions in descending score
/// order, each taking the unmatched truth of highest IoU when that IoU
/// strictly exceeds the threshold). Returns per-prediction hit flags in
/// score order.
pub fn oracle_match(preds: &[BoundingBox], truths: &[BoundingBox], thr: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        score_of(&preds[b])
            .total_cmp(&score_of(&preds[a]))
            .then(a.cmp(&b))
    });

    // assignment[i] = Some(truth) or None for the i-th prediction in score
    // order. Enumerate all, filter by greedy consistency.
    fn enumerate(
        k: usize,
        order: &[usize],
        preds: &[BoundingBox],
        truths: &[BoundingBox],
        thr: f64,
        used: &mut Vec<bool>,
        current: &mut Vec<Option<usize>>,
        found: &mut Option<Vec<Option<usize>>>,
    ) {
        if found.is_some() {
            return;
        }
        if k == order.len() {
            *found = Some(current.clone());
            return;
        }
        let p = &preds[order[k]];
        // Greedy consistency: the k-th prediction must take the available
        // truth with maximal IoU if that exceeds the threshold, else stay
        // unmatched.
        let mut best: Option<(usize, f64)> = None;
        for (t, truth) in truths.iter().enumerate() {
            if used[t] {
                continue;
            }
            let o = iou(p, truth);
            if best.map_or(true, |(_, b)| o > b) {
                best = Some((t, o));
            }
        }
        let choice = match best {
            Some((t, o)) if o > thr => Some(t),
            _ => None,
        };
        // Walk every branch, but only the consistent one may recurse.
        for candidate in std::iter::once(None).chain((0..truths.len()).map(Some)) {
            if candidate != choice {
                continue;
            }
            if let Some(t) = candidate {
                used[t] = true;
                current.push(Some(t));
                enumerate(k + 1, order, preds, truths, thr, used, current, found);
                current.pop();
                used[t] = false;
            } else {
                current.push(None);
                enumerate(k + 1, order, preds, truths, thr, used, current, found);
                current.pop();
            }
        }
    }

    let mut found = None;
    enumerate(
        0,
        &order,
        preds,
        truths,
        thr,
        &mut vec![false; truths.len()],
        &mut Vec::new(),
        &mut found,
    );
    found
        .expect("exactly one consistent assignment exists")
        .into_iter()
        .map(|m| m.is_some())
        .collect()
}

/// All-point AP by brute-force quadrature: sample the interpolated
/// precision envelope on a fine recall grid and integrate.
pub fn oracle_ap_quadrature(hits: &[bool], n_truths: usize) -> f64 {
    if n_truths == 0 {
        return if hits.is_empty() { 1.0 } else { 0.0 };
    }
    if hits.is_empty() {
        return 0.0;
    }
    let mut points = Vec::new();
    let mut tp = 0usize;
    for (k, &h) in hits.iter().enumerate() {
        if h {
            tp += 1;
        }
        points.push((tp as f64 / n_truths as f64, tp as f64 / (k + 1) as f64));
    }
    let p_interp = |r: f64| -> f64 {
        points
            .iter()
            .filter(|(rec, _)| *rec >= r)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max)
    };
    let grid = 100_000usize;
    let mut total = 0.0;
    for i in 0..grid {
        let r = (i as f64 + 0.5) / grid as f64;
        total += p_interp(r);
    }
    total / grid as f64
}

/// Oracle mAP for a set of scenes.
pub fn oracle_map(scenes: &[(Vec<BoundingBox>, Vec<BoundingBox>)], thr: f64) -> f64 {
    if scenes.is_empty() {
        return 0.0;
    }
    let total: f64 = scenes
        .iter()
        .map(|(preds, truths)| {
            if truths.is_empty() {
                return if preds.is_empty() { 1.0 } else { 0.0 };
            }
            let hits = oracle_match(preds, truths, thr);
            oracle_ap_quadrature(&hits, truths.len())
        })
        .sum();
    total / scenes.len() as f64
}
