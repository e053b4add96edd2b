//! Set-prediction head plumbing: one-to-one matching, the composite
//! training loss, suppression-free decoding and COCO-style AP.
//!
//! Predictions are two tensors per batch: class logits `(n, K, Q, 1)` and
//! sigmoid-activated boxes `(n, 4, Q, 1)` in `(cx, cy, w, h)` order.

use crate::boxes::{inner_iou, Bbox, BoxLoss, BoxSet, DEFAULT_INNER_RATIO};
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Value, Var};
use crate::nn::sigmoid_scalar;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Dense row-major matrix of matching costs, queries by ground truths.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Construction(format!("{rows}x{cols} cost matrix from {} values", data.len())));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let data = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        CostMatrix { rows, cols, data }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn transpose(&self) -> Self {
        CostMatrix::from_fn(self.cols, self.rows, |r, c| self.at(c, r))
    }
}

/// Minimum-cost assignment covering `min(rows, cols)` pairs, as
/// `(row, col)` sorted by row. Shortest augmenting paths with potentials,
/// `O(n² m)`.
pub fn hungarian(cost: &CostMatrix) -> Result<Vec<(usize, usize)>> {
    if let Some(bad) = cost.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Contract(format!(
            "cost matrix entry ({}, {}) is not finite",
            bad / cost.cols.max(1),
            bad % cost.cols.max(1)
        )));
    }
    if cost.rows == 0 || cost.cols == 0 {
        return Ok(Vec::new());
    }
    if cost.rows > cost.cols {
        let mut pairs: Vec<_> = hungarian(&cost.transpose())?.into_iter().map(|(c, r)| (r, c)).collect();
        pairs.sort_unstable();
        return Ok(pairs);
    }
    let (n, m) = (cost.rows, cost.cols);
    // 1-based arrays; index 0 is the virtual source column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<_> = (1..=m).filter(|&j| owner[j] != 0).map(|j| (owner[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    Ok(pairs)
}

/// Weights of the matching cost terms (classification, L1, overlap).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostWeights {
    pub class: f64,
    pub l1: f64,
    pub iou: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights { class: 2.0, l1: 5.0, iou: 2.0 }
    }
}

/// Weights of the training loss terms for matched pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub l1: f64,
    pub box_weight: f64,
    pub box_loss: BoxLoss,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { l1: 5.0, box_weight: 2.0, box_loss: BoxLoss::InnerSiou { ratio: DEFAULT_INNER_RATIO } }
    }
}

fn check_predictions(logits: Shape, boxes: Shape) -> Result<()> {
    if boxes.c != 4 || boxes.w != 1 || logits.w != 1 || boxes.n != logits.n || boxes.h != logits.h {
        return shape_err(format!("predictions need logits (n, K, Q, 1) and boxes (n, 4, Q, 1), got {logits} and {boxes}"));
    }
    Ok(())
}

/// Box of query `q` in image `n`.
pub fn pred_box<T: Scalar>(boxes: &Tensor<T>, n: usize, q: usize) -> Bbox<f64> {
    Bbox::new(
        boxes.at(n, 0, q, 0).to_f64_lossy(),
        boxes.at(n, 1, q, 0).to_f64_lossy(),
        boxes.at(n, 2, q, 0).to_f64_lossy(),
        boxes.at(n, 3, q, 0).to_f64_lossy(),
    )
}

fn l1(a: Bbox<f64>, b: Bbox<f64>) -> f64 {
    a.to_array().iter().zip(b.to_array()).map(|(x, y)| (x - y).abs()).sum()
}

/// `cost[q, g] = w.class (1 - p_q(class_g)) + w.l1 |b_q - b_g|_1 + w.iou (1 - InnerIoU(b_q, b_g))`.
pub fn match_cost<T: Scalar>(
    logits: &Tensor<T>,
    boxes: &Tensor<T>,
    n: usize,
    gt: &BoxSet,
    weights: CostWeights,
    ratio: f64,
) -> Result<CostMatrix> {
    check_predictions(logits.shape(), boxes.shape())?;
    let (k, q) = (logits.shape().c, logits.shape().h);
    if let Some(&bad) = gt.classes.iter().find(|&&c| c >= k) {
        return Err(Error::Contract(format!("ground-truth class {bad} out of range for {k} classes")));
    }
    Ok(CostMatrix::from_fn(q, gt.len(), |qi, gi| {
        let p = sigmoid_scalar(logits.at(n, gt.classes[gi], qi, 0).to_f64_lossy());
        let pb = pred_box(boxes, n, qi);
        let gb = gt.boxes[gi];
        weights.class * (1.0 - p) + weights.l1 * l1(pb, gb) + weights.iou * (1.0 - inner_iou(pb, gb, ratio))
    }))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchResult {
    /// `(query, gt)` pairs sorted by query.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
    pub total_cost: f64,
}

pub fn match_image<T: Scalar>(
    logits: &Tensor<T>,
    boxes: &Tensor<T>,
    n: usize,
    gt: &BoxSet,
    weights: CostWeights,
    ratio: f64,
) -> Result<MatchResult> {
    let cost = match_cost(logits, boxes, n, gt, weights, ratio)?;
    let pairs = hungarian(&cost)?;
    let total_cost = pairs.iter().map(|&(q, g)| cost.at(q, g)).sum();
    let mut taken = vec![false; cost.rows];
    for &(q, _) in &pairs {
        taken[q] = true;
    }
    let unmatched = (0..cost.rows).filter(|&q| !taken[q]).collect();
    Ok(MatchResult { pairs, unmatched, total_cost })
}

pub fn match_batch<T: Scalar>(
    logits: &Tensor<T>,
    boxes: &Tensor<T>,
    gts: &[BoxSet],
    weights: CostWeights,
    ratio: f64,
) -> Result<Vec<MatchResult>> {
    if gts.len() != logits.shape().n {
        return shape_err(format!("{} ground-truth sets for a batch of {}", gts.len(), logits.shape().n));
    }
    gts.iter().enumerate().map(|(n, gt)| match_image(logits, boxes, n, gt, weights, ratio)).collect()
}

/// `max(z, 0) - z t + ln(1 + e^{-|z|})` and its derivative `σ(z) - t`.
fn bce_with_logits<T: Scalar>(z: T, t: T) -> (T, T) {
    let loss = z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p();
    (loss, sigmoid_scalar(z) - t)
}

/// Weighted, normalized contributions of each term; they add up to the loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub class: f64,
    pub l1: f64,
    pub boxes: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.class + self.l1 + self.boxes
    }
}

fn loss_and_grads<T: Scalar>(
    logits: &Tensor<T>,
    boxes: &Tensor<T>,
    gts: &[BoxSet],
    matches: &[MatchResult],
    cfg: LossConfig,
) -> Result<(T, Tensor<T>, Tensor<T>, LossParts)> {
    let (ls, bs) = (logits.shape(), boxes.shape());
    check_predictions(ls, bs)?;
    if gts.len() != ls.n || matches.len() != ls.n {
        return shape_err(format!("batch of {} with {} gt sets and {} matches", ls.n, gts.len(), matches.len()));
    }
    let (k, q) = (ls.c, ls.h);
    let mut dlogits = Tensor::zeros(ls);
    let mut dboxes = Tensor::zeros(bs);
    let mut total = T::zero();
    let mut parts = LossParts::default();
    let batch = T::from_usize_lossy(ls.n);
    for (n, (gt, m)) in gts.iter().zip(matches).enumerate() {
        let norm = T::from_usize_lossy(gt.len().max(1)) * batch;
        let mut target = vec![T::zero(); k * q];
        for &(qi, gi) in &m.pairs {
            if qi >= q || gi >= gt.len() {
                return Err(Error::Contract(format!("match ({qi}, {gi}) out of range")));
            }
            target[gt.classes[gi] * q + qi] = T::one();
        }
        for c in 0..k {
            for qi in 0..q {
                let (l, d) = bce_with_logits(logits.at(n, c, qi, 0), target[c * q + qi]);
                total += l / norm;
                parts.class += (l / norm).to_f64_lossy();
                let i = ls.index(n, c, qi, 0);
                dlogits.data_mut()[i] = d / norm;
            }
        }
        let (wl1, wbox) = (T::lit(cfg.l1), T::lit(cfg.box_weight));
        for &(qi, gi) in &m.pairs {
            let pb = Bbox::from_array(std::array::from_fn(|j| boxes.at(n, j, qi, 0)));
            let gb = gt.boxes[gi].lift::<T>();
            let (bl, bgrad) = cfg.box_loss.value_and_grad(pb, gb);
            total += wbox * bl / norm;
            parts.boxes += (wbox * bl / norm).to_f64_lossy();
            for j in 0..4 {
                let diff = pb.to_array()[j] - gb.to_array()[j];
                total += wl1 * diff.abs() / norm;
                parts.l1 += (wl1 * diff.abs() / norm).to_f64_lossy();
                let sign = if diff > T::zero() {
                    T::one()
                } else if diff < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
                let i = bs.index(n, j, qi, 0);
                dboxes.data_mut()[i] += (wl1 * sign + wbox * bgrad[j]) / norm;
            }
        }
    }
    Ok((total, dlogits, dboxes, parts))
}

/// Loss terms of a batch without recording anything.
pub fn loss_parts<T: Scalar>(
    logits: &Tensor<T>,
    boxes: &Tensor<T>,
    gts: &[BoxSet],
    matches: &[MatchResult],
    cfg: LossConfig,
) -> Result<LossParts> {
    Ok(loss_and_grads(logits, boxes, gts, matches, cfg)?.3)
}

impl<T: Scalar> Graph<T> {
    /// Composite set-prediction loss for fixed matches.
    ///
    /// Every query and class contributes a binary cross-entropy term (one-hot
    /// target for matched queries, background otherwise); matched queries
    /// add `l1 · |b - b_gt|_1 + box_weight · box_loss(b, b_gt)`. Each image
    /// is normalized by `max(1, #gt)` and the batch is averaged.
    pub fn detection_loss(
        &mut self,
        logits: Var,
        boxes: Var,
        gts: &[BoxSet],
        matches: &[MatchResult],
        cfg: LossConfig,
    ) -> Result<Var> {
        let (total, dl, db, _) = loss_and_grads(self.try_tensor(logits)?, self.try_tensor(boxes)?, gts, matches, cfg)?;
        Ok(self.record_real(
            "detection_loss",
            &[logits, boxes],
            Tensor::scalar(total),
            Box::new(move |g, _, _| {
                let s = g.as_real()?.item()?;
                Ok(vec![Some(Value::Real(dl.map(|v| v * s))), Some(Value::Real(db.map(|v| v * s)))])
            }),
        ))
    }
}

/// Queries whose best class probability reaches `threshold`, highest score
/// first. Nothing is suppressed.
pub fn decode<T: Scalar>(logits: &Tensor<T>, boxes: &Tensor<T>, n: usize, threshold: f64) -> Result<BoxSet> {
    check_predictions(logits.shape(), boxes.shape())?;
    let (k, q) = (logits.shape().c, logits.shape().h);
    let mut found: Vec<(f64, usize, usize)> = Vec::new();
    // A sigmoid never reaches 1, so a threshold of 1 admits nothing even
    // when the probability rounds to 1.0.
    if threshold < 1.0 {
        for qi in 0..q {
            let (best, cls) = (0..k)
                .map(|c| (sigmoid_scalar(logits.at(n, c, qi, 0).to_f64_lossy()), c))
                .fold((f64::NEG_INFINITY, 0), |acc, x| if x.0 > acc.0 { x } else { acc });
            if best >= threshold {
                found.push((best, cls, qi));
            }
        }
    }
    found.sort_by(|a, b| b.0.total_cmp(&a.0));
    let boxes_out = found.iter().map(|&(_, _, qi)| pred_box(boxes, n, qi)).collect();
    let classes = found.iter().map(|f| f.1).collect();
    let scores = found.iter().map(|f| f.0).collect();
    BoxSet::scored(boxes_out, classes, scores)
}

pub const RECALL_POINTS: usize = 101;

/// 101-point interpolated AP at one IoU threshold, averaged over the classes
/// that occur in the ground truth. `dets[i]` and `gts[i]` describe image `i`.
///
/// Detections are matched greedily in descending score order (ties keep
/// image order) to the unmatched same-class ground truth of highest IoU.
/// With no ground truth at all the result is 0.
pub fn average_precision(dets: &[BoxSet], gts: &[BoxSet], iou_threshold: f64) -> Result<f64> {
    if dets.len() != gts.len() {
        return Err(Error::Contract(format!("{} detection sets for {} images", dets.len(), gts.len())));
    }
    let classes: std::collections::BTreeSet<usize> = gts.iter().flat_map(|g| g.classes.iter().copied()).collect();
    if classes.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for &cls in &classes {
        sum += class_ap(dets, gts, cls, iou_threshold);
    }
    Ok(sum / classes.len() as f64)
}

fn class_ap(dets: &[BoxSet], gts: &[BoxSet], cls: usize, thr: f64) -> f64 {
    let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
    for (img, d) in dets.iter().enumerate() {
        for i in 0..d.len() {
            if d.classes[i] == cls {
                ranked.push((d.scores.get(i).copied().unwrap_or(1.0), img, i));
            }
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_gt: usize = gts.iter().map(|g| g.classes.iter().filter(|&&c| c == cls).count()).sum();
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    for (rank, &(_, img, i)) in ranked.iter().enumerate() {
        let b = dets[img].boxes[i];
        let gt = &gts[img];
        let mut best: Option<(f64, usize)> = None;
        for j in 0..gt.len() {
            if gt.classes[j] != cls || used[img][j] {
                continue;
            }
            let o = crate::boxes::iou(b, gt.boxes[j]);
            if o >= thr && best.map_or(true, |(v, _)| o > v) {
                best = Some((o, j));
            }
        }
        if let Some((_, j)) = best {
            used[img][j] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut total = 0.0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&x| x < level - 1e-12);
        if idx < precision.len() {
            total += precision[idx];
        }
    }
    total / RECALL_POINTS as f64
}

/// AP averaged over IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_ap(dets: &[BoxSet], gts: &[BoxSet]) -> Result<f64> {
    let mut sum = 0.0;
    for i in 0..10 {
        sum += average_precision(dets, gts, 0.5 + 0.05 * i as f64)?;
    }
    Ok(sum / 10.0)
}
