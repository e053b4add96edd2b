use freqdet_core::boxes::BoxSet;
use freqdet_core::head::{average_precision, coco_ap, decode};
use freqdet_core::scenes::{batch_images, Sample};
use freqdet_core::{Graph, ParamStore, Result};

use crate::model::{bind_frozen, Detector};
use crate::train::check_dataset;

const EVAL_BATCH: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    /// Mean over IoU thresholds `.50:.95:.05`.
    pub ap: f64,
    /// At the requested single threshold, 0.5 by default.
    pub ap_at: f64,
}

impl EvalResult {
    pub fn line(&self) -> String {
        format!("AP={:.6} AP50={:.6}", self.ap, self.ap_at)
    }
}

/// Every query's best-class detection for each sample.
pub fn detect(det: &Detector, store: &ParamStore<f64>, data: &[Sample]) -> Result<Vec<BoxSet>> {
    check_dataset(&det.config, data)?;
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let mut g = Graph::new();
        let p = bind_frozen(&mut g, store);
        let x = g.constant(batch_images(data, chunk)?);
        let pred = det.forward(&mut g, &p, x)?;
        for n in 0..chunk.len() {
            out.push(decode(g.tensor(pred.logits), g.tensor(pred.boxes), n, 0.0)?);
        }
    }
    Ok(out)
}

pub fn evaluate(det: &Detector, store: &ParamStore<f64>, data: &[Sample], iou: f64) -> Result<EvalResult> {
    let dets = detect(det, store, data)?;
    let gts: Vec<BoxSet> = data.iter().map(|s| s.gt.clone()).collect();
    Ok(EvalResult { ap: coco_ap(&dets, &gts)?, ap_at: average_precision(&dets, &gts, iou)? })
}
