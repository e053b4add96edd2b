//! The toy detector: stem, three downsampling stages, fusion at 1/8
//! resolution, alignment back at 1/4, and a dense per-cell head.
//!
//! ```text
//! image ─ stem ─ down1 ─ down2 ─ s3 (1/4) ──────────────┬─ align ─ head
//!                                  └─ down3 ─ s4 (1/8) ─ fuse(s3, s4) ─┘
//! ```
//!
//! Every cell of the 1/4 map is one query, so `Q = (size/4)²`. The head has
//! a class branch (one 3x3 conv) and a deeper box branch (`BOX_DEPTH` 3x3
//! convs); each query's box is its cell's reference box plus a linear offset.

use freqdet_core::freq::{Conv, FdBlock, MsffBlock, MsffConfig, SacBlock};
use freqdet_core::nn::ConvSpec;
use freqdet_core::params::Init;
use freqdet_core::{Bound, Graph, ParamStore, Result, Scalar, Tensor, Var};

use crate::config::{Alignment, DetectorConfig, Downsample, Fusion};

/// Side of the reference box every query starts from, relative to the image.
pub const REFERENCE_SIZE: f64 = 0.1;
/// Initial foreground probability of every class logit.
pub const PRIOR_PROBABILITY: f64 = 0.01;
/// Fixed gain after each GELU the detector applies itself. Uniform fan-in
/// init shrinks the signal several-fold per conv + GELU; without this the
/// head sees activations near 1e-3.
pub const ACTIVATION_GAIN: f64 = 3.0;
/// Normalized box offset per unit of raw box output. Objects sit within a
/// few pixels of their reference box, and a small step keeps one optimizer
/// update from moving a box by more than a fraction of a pixel.
pub const BOX_STEP: f64 = 0.005;
/// 3x3 convs in the box branch of the head.
pub const BOX_DEPTH: usize = 4;
/// Images are roughly `0.4 ± 0.1`; this maps them near zero mean, unit spread.
const INPUT_SHIFT: f64 = 0.4;
const INPUT_SCALE: f64 = 10.0;

#[derive(Clone, Debug)]
enum Down {
    Plain(Conv),
    Fd(FdBlock),
}

#[derive(Clone, Debug)]
enum Fuse {
    Plain { focus: Conv, mix: Conv },
    Msff(MsffBlock),
}

#[derive(Clone, Debug)]
enum Align {
    Off { lateral: Conv, top: Conv },
    Sac(SacBlock),
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub config: DetectorConfig,
    stem: Conv,
    down: Vec<Down>,
    fuse: Fuse,
    align: Align,
    head: Conv,
    box_head: Vec<Conv>,
    classes: Conv,
    boxes: Conv,
}

/// Raw head outputs: logits `(n, K, Q, 1)` and boxes `(n, 4, Q, 1)` in
/// normalized `(cx, cy, w, h)`.
#[derive(Clone, Copy, Debug)]
pub struct Predictions {
    pub logits: Var,
    pub boxes: Var,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl Detector {
    pub fn new(config: &DetectorConfig) -> Result<Self> {
        config.validate()?;
        let c = config.stem_channels;
        let down_stage = |i: usize, cin: usize, cout: usize| -> Result<Down> {
            let name = format!("down{i}");
            Ok(match config.downsample {
                Downsample::Plain => Down::Plain(Conv::new(name, ConvSpec::dense(cin, cout, 3, 2, 1))),
                Downsample::Fd => Down::Fd(FdBlock::new(name, cin, cout)?),
            })
        };
        let fuse = match config.fusion {
            Fusion::Plain => Fuse::Plain {
                focus: Conv::new("fuse.focus", ConvSpec::pointwise(8 * c, c)),
                mix: Conv::new("fuse.mix", ConvSpec::pointwise(3 * c, 3 * c)),
            },
            Fusion::Msff => Fuse::Msff(MsffBlock::new(
                "fuse",
                MsffConfig { focus_in: Some(2 * c), focus_out: c, direct_in: vec![2 * c] },
            )?),
        };
        let align = match config.alignment {
            Alignment::Off => Align::Off {
                lateral: Conv::new("align.lateral", ConvSpec::pointwise(2 * c, 2 * c)),
                top: Conv::new("align.top", ConvSpec::pointwise(3 * c, 2 * c)),
            },
            Alignment::Sac => Align::Sac(SacBlock::new("align", 2 * c, 3 * c, 2 * c)),
        };
        Ok(Detector {
            config: config.clone(),
            stem: Conv::new("stem", ConvSpec::same(3, c, 3)),
            down: vec![down_stage(1, c, c)?, down_stage(2, c, 2 * c)?, down_stage(3, 2 * c, 2 * c)?],
            fuse,
            align,
            head: Conv::new("head.conv", ConvSpec::same(2 * c, 2 * c, 3)),
            box_head: (1..=BOX_DEPTH).map(|i| Conv::new(format!("head.box_conv{i}"), ConvSpec::same(2 * c, 2 * c, 3))).collect(),
            classes: Conv::new("head.classes", ConvSpec::pointwise(2 * c, config.num_classes)),
            boxes: Conv::new("head.boxes", ConvSpec::pointwise(2 * c, 4)),
        })
    }

    /// Side of the query grid.
    pub fn grid(&self) -> usize {
        self.config.image_size / 4
    }

    pub fn num_queries(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Fresh parameters; identical for identical `seed`.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        self.stem.register(&mut store, seed)?;
        for d in &self.down {
            match d {
                Down::Plain(conv) => conv.register(&mut store, seed)?,
                Down::Fd(block) => block.register(&mut store, seed)?,
            }
        }
        match &self.fuse {
            Fuse::Plain { focus, mix } => {
                focus.register(&mut store, seed)?;
                mix.register(&mut store, seed)?;
            }
            Fuse::Msff(block) => block.register(&mut store, seed)?,
        }
        match &self.align {
            Align::Off { lateral, top } => {
                lateral.register(&mut store, seed)?;
                top.register(&mut store, seed)?;
            }
            Align::Sac(block) => block.register(&mut store, seed)?,
        }
        self.head.register(&mut store, seed)?;
        for conv in &self.box_head {
            conv.register(&mut store, seed)?;
        }
        let fan_in = Init::Uniform { fan_in: self.classes.spec.fan_in() };
        self.classes.register_with(&mut store, seed, fan_in, Init::Constant(logit(PRIOR_PROBABILITY)))?;
        self.boxes.register(&mut store, seed)?;
        Ok(store)
    }

    /// Each query's starting box: its cell center, `REFERENCE_SIZE` wide.
    fn reference<T: Scalar>(&self, n: usize) -> Tensor<T> {
        let s = self.grid();
        Tensor::from_fn((n, 4, s, s), |_, j, y, x| {
            let v = match j {
                0 => (x as f64 + 0.5) / s as f64,
                1 => (y as f64 + 0.5) / s as f64,
                _ => REFERENCE_SIZE,
            };
            T::lit(v)
        })
    }

    /// Feature map feeding the head, `(n, 2C, size/4, size/4)`.
    pub fn features<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, images: Var) -> Result<Var> {
        let x = g.affine(images, T::lit(INPUT_SCALE), T::lit(-INPUT_SHIFT * INPUT_SCALE))?;
        let x = self.stem.forward(g, p, x)?;
        let mut x = activate(g, x)?;
        let mut stages = Vec::with_capacity(3);
        for d in &self.down {
            let y = match d {
                Down::Plain(conv) => conv.forward(g, p, x)?,
                Down::Fd(block) => block.forward(g, p, x)?,
            };
            x = activate(g, y)?;
            stages.push(x);
        }
        let (s3, s4) = (stages[1], stages[2]);
        let fused = match &self.fuse {
            Fuse::Plain { focus, mix } => {
                let sliced = g.focus_slice(s3)?;
                let f = focus.forward(g, p, sliced)?;
                let cat = g.concat_channels(&[f, s4])?;
                let m = mix.forward(g, p, cat)?;
                activate(g, m)?
            }
            Fuse::Msff(block) => block.forward(g, p, Some(s3), &[s4])?,
        };
        match &self.align {
            Align::Off { lateral, top } => {
                let l = lateral.forward(g, p, s3)?;
                let t = top.forward(g, p, fused)?;
                let (h, w) = (g.shape(s3).h, g.shape(s3).w);
                let t = g.bilinear_upsample(t, h, w)?;
                g.add(l, t)
            }
            Align::Sac(block) => block.forward(g, p, s3, fused),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, images: Var) -> Result<Predictions> {
        let shape = g.try_tensor(images)?.shape();
        if shape.c != 3 || shape.h != self.config.image_size || shape.w != self.config.image_size {
            return Err(freqdet_core::Error::Shape(format!(
                "detector expects (n, 3, {s}, {s}) images, got {shape}",
                s = self.config.image_size
            )));
        }
        let f = self.features(g, p, images)?;
        let h = self.head.forward(g, p, f)?;
        let h = activate(g, h)?;
        let (n, q, k) = (shape.n, self.num_queries(), self.config.num_classes);
        let logits = self.classes.forward(g, p, h)?;
        let logits = g.reshape(logits, (n, k, q, 1))?;
        let mut hb = f;
        for conv in &self.box_head {
            let y = conv.forward(g, p, hb)?;
            hb = activate(g, y)?;
        }
        let raw = self.boxes.forward(g, p, hb)?;
        let offsets = g.affine(raw, T::lit(BOX_STEP), T::zero())?;
        let reference = g.constant(self.reference(n));
        let boxes = g.add(offsets, reference)?;
        let boxes = g.reshape(boxes, (n, 4, q, 1))?;
        Ok(Predictions { logits, boxes })
    }
}

/// GELU followed by `ACTIVATION_GAIN`.
fn activate<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let a = g.gelu(x);
    g.affine(a, T::lit(ACTIVATION_GAIN), T::zero())
}

/// Parameters as constants, for inference without gradient bookkeeping.
pub fn bind_frozen<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>) -> Bound {
    Bound::from_pairs(store.iter().map(|(name, t)| (name.to_string(), g.constant(t.clone()))).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DetectorConfig {
        DetectorConfig { stem_channels: 4, image_size: 32, ..DetectorConfig::default() }
    }

    #[test]
    fn output_shapes_for_every_wiring() {
        for cfg in small().ablations() {
            let det = Detector::new(&cfg).unwrap();
            let store = det.init_params::<f64>(1).unwrap();
            let mut g = Graph::new();
            let p = g.bind(&store);
            let x = g.constant(Tensor::full((2, 3, 32, 32), 0.5));
            let out = det.forward(&mut g, &p, x).unwrap();
            assert_eq!(g.shape(out.logits), (2, 3, 64, 1).into(), "{}", cfg.label());
            assert_eq!(g.shape(out.boxes), (2, 4, 64, 1).into());
        }
    }

    #[test]
    fn initial_boxes_sit_on_the_cell_grid() {
        let det = Detector::new(&small()).unwrap();
        let mut store = det.init_params::<f64>(3).unwrap();
        for name in ["head.boxes.weight", "head.boxes.bias"] {
            let z = Tensor::zeros(store.require(name).unwrap().shape());
            store.set(name, z).unwrap();
        }
        let mut g = Graph::new();
        let p = bind_frozen(&mut g, &store);
        let x = g.constant(Tensor::full((1, 3, 32, 32), 0.2));
        let out = det.forward(&mut g, &p, x).unwrap();
        let b = g.tensor(out.boxes);
        // Query 9 is row 1, column 1 of the 8x8 grid.
        let expect = [1.5 / 8.0, 1.5 / 8.0, REFERENCE_SIZE, REFERENCE_SIZE];
        for (j, e) in expect.iter().enumerate() {
            assert!((b.at(0, j, 9, 0) - e).abs() < 1e-12);
        }
    }

    #[test]
    fn class_prior_at_init() {
        let det = Detector::new(&small()).unwrap();
        let store = det.init_params::<f64>(0).unwrap();
        let b = store.require("head.classes.bias").unwrap();
        assert!(b.data().iter().all(|&v| (1.0 / (1.0 + (-v).exp()) - PRIOR_PROBABILITY).abs() < 1e-12));
    }

    #[test]
    fn same_seed_same_parameters() {
        let det = Detector::new(&DetectorConfig::default()).unwrap();
        assert_eq!(det.init_params::<f64>(5).unwrap(), det.init_params::<f64>(5).unwrap());
        assert_ne!(det.init_params::<f64>(5).unwrap(), det.init_params::<f64>(6).unwrap());
    }
}
