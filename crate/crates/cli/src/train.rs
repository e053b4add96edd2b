use std::collections::BTreeMap;

use freqdet_core::boxes::BoxSet;
use freqdet_core::head::{match_batch, LossParts};
use freqdet_core::scenes::{batch_images, Sample};
use freqdet_core::{Error, Graph, ParamStore, Result, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::DetectorConfig;
use crate::model::Detector;
use crate::optim::AdamW;

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub steps: usize,
    /// Overrides the config seed.
    pub seed: Option<u64>,
    /// Train on the first `batch_size` samples every step.
    pub overfit_batch: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub parts: LossParts,
}

impl StepLog {
    pub fn line(&self) -> String {
        format!(
            "step={} loss={:.6e} class={:.6e} l1={:.6e} box={:.6e}",
            self.step,
            self.parts.total(),
            self.parts.class,
            self.parts.l1,
            self.parts.boxes
        )
    }
}

/// Checks that `data` fits the detector's image size and class count.
pub fn check_dataset(cfg: &DetectorConfig, data: &[Sample]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    for (i, s) in data.iter().enumerate() {
        let shape = s.image.shape();
        if (shape.c, shape.h, shape.w) != (3, cfg.image_size, cfg.image_size) {
            return Err(Error::Config(format!(
                "sample {i} is {shape}, the config expects 3x{s}x{s} images",
                s = cfg.image_size
            )));
        }
        s.gt.validate(cfg.num_classes)?;
    }
    Ok(())
}

/// Loss of one batch with matching done on the current predictions, plus
/// the gradient of every parameter.
pub fn loss_and_grads(
    det: &Detector,
    store: &ParamStore<f64>,
    images: Tensor<f64>,
    gts: &[BoxSet],
) -> Result<(LossParts, BTreeMap<String, Tensor<f64>>)> {
    let cfg = &det.config;
    let mut g = Graph::new();
    let p = g.bind(store);
    let x = g.constant(images);
    let out = det.forward(&mut g, &p, x)?;
    let matches = match_batch(g.tensor(out.logits), g.tensor(out.boxes), gts, cfg.cost_weights(), cfg.inner_ratio)?;
    let lcfg = cfg.loss_config()?;
    let parts = freqdet_core::head::loss_parts(g.tensor(out.logits), g.tensor(out.boxes), gts, &matches, lcfg)?;
    let loss = g.detection_loss(out.logits, out.boxes, gts, &matches, lcfg)?;
    g.backward(loss)?;
    Ok((parts, p.grads(&g)))
}

/// Which samples each step trains on.
struct Batches {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    pinned: bool,
    rng: ChaCha8Rng,
}

impl Batches {
    fn new(len: usize, batch: usize, pinned: bool, seed: u64) -> Self {
        let batch = batch.min(len);
        let mut b = Batches { order: (0..len).collect(), pos: 0, batch, pinned, rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed) };
        if !pinned {
            b.order.shuffle(&mut b.rng);
        }
        b
    }

    fn next(&mut self) -> Vec<usize> {
        if self.pinned {
            return (0..self.batch).collect();
        }
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

/// Runs `opts.steps` optimizer steps from a fresh initialization, calling
/// `on_step` after each. Everything is a function of config, options and data.
pub fn train(
    cfg: &DetectorConfig,
    data: &[Sample],
    opts: &TrainOptions,
    mut on_step: impl FnMut(&StepLog),
) -> Result<(ParamStore<f64>, Vec<StepLog>)> {
    let det = Detector::new(cfg)?;
    check_dataset(cfg, data)?;
    let seed = opts.seed.unwrap_or(cfg.seed);
    let mut store = det.init_params::<f64>(seed)?;
    let mut opt = AdamW::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
    let mut batches = Batches::new(data.len(), cfg.batch_size, opts.overfit_batch, seed);
    let mut logs = Vec::with_capacity(opts.steps);
    for step in 1..=opts.steps {
        let idx = batches.next();
        let images = batch_images(data, &idx)?;
        let gts: Vec<BoxSet> = idx.iter().map(|&i| data[i].gt.clone()).collect();
        let (parts, grads) = loss_and_grads(&det, &store, images, &gts)?;
        if !parts.total().is_finite() {
            return Err(Error::State(format!("loss became non-finite at step {step}")));
        }
        opt.step(&mut store, &grads);
        let log = StepLog { step, parts };
        on_step(&log);
        logs.push(log);
    }
    Ok((store, logs))
}
