//! Flat `key = value` configuration of the toy detector and its training.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Every key is optional; see [`DetectorConfig::default`] and
//! [`DetectorConfig::to_text`] for the full list.

use std::fmt;
use std::str::FromStr;

use freqdet_core::boxes::{BoxLoss, DEFAULT_INNER_RATIO};
use freqdet_core::head::{CostWeights, LossConfig};
use freqdet_core::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Downsample {
    Plain,
    Fd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    Plain,
    Msff,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Alignment {
    Off,
    Sac,
}

macro_rules! keyword_enum {
    ($ty:ident, $what:literal, $($variant:ident => $word:literal),+) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($word => Ok($ty::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", $what, " `{}` (expected ", $($word, " "),+, ")"),
                        other
                    ))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $word,)+ })
            }
        }
    };
}

keyword_enum!(Downsample, "downsample", Plain => "plain", Fd => "fd");
keyword_enum!(Fusion, "fusion", Plain => "plain", Msff => "msff");
keyword_enum!(Alignment, "alignment", Off => "off", Sac => "sac");

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub stem_channels: usize,
    pub downsample: Downsample,
    pub fusion: Fusion,
    pub alignment: Alignment,
    /// `giou`, `siou` or `inner_siou`.
    pub loss: String,
    pub inner_ratio: f64,
    pub num_classes: usize,
    pub image_size: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub cost_class: f64,
    pub cost_l1: f64,
    pub cost_iou: f64,
    pub loss_l1: f64,
    pub loss_box: f64,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        let cost = CostWeights::default();
        let loss = LossConfig::default();
        DetectorConfig {
            stem_channels: 32,
            downsample: Downsample::Fd,
            fusion: Fusion::Msff,
            alignment: Alignment::Sac,
            loss: "inner_siou".into(),
            inner_ratio: DEFAULT_INNER_RATIO,
            num_classes: 3,
            image_size: 64,
            lr: 1e-4,
            batch_size: 4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            cost_class: cost.class,
            cost_l1: cost.l1,
            cost_iou: cost.iou,
            loss_l1: loss.l1,
            loss_box: loss.box_weight,
            seed: 0,
        }
    }
}

/// Spatial sizes the detector sees are `size`, `size/2`, `size/4` and
/// `size/8`; the spectral blocks need each of them to be a power of two.
pub fn check_image_size(size: usize) -> Result<()> {
    if size < 16 || !size.is_power_of_two() {
        return Err(Error::Config(format!(
            "image size {size} is not allowed: the FFT needs power-of-two feature maps at every depth \
             (size/8 = {}), so use a power of two of at least 16",
            size as f64 / 8.0
        )));
    }
    Ok(())
}

fn parse_value<V: FromStr>(key: &str, raw: &str) -> Result<V> {
    raw.parse().map_err(|_| Error::Config(format!("bad value `{raw}` for `{key}`")))
}

impl DetectorConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = DetectorConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got `{line}`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: `{key}` set twice", lineno + 1)));
            }
            cfg.set(key, value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", lineno + 1)),
                e => e,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "stem_channels" => self.stem_channels = parse_value(key, v)?,
            "downsample" => self.downsample = v.parse()?,
            "fusion" => self.fusion = v.parse()?,
            "alignment" => self.alignment = v.parse()?,
            "loss" => self.loss = v.to_string(),
            "inner_ratio" => self.inner_ratio = parse_value(key, v)?,
            "num_classes" => self.num_classes = parse_value(key, v)?,
            "image_size" => self.image_size = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "beta1" => self.beta1 = parse_value(key, v)?,
            "beta2" => self.beta2 = parse_value(key, v)?,
            "eps" => self.eps = parse_value(key, v)?,
            "cost_class" => self.cost_class = parse_value(key, v)?,
            "cost_l1" => self.cost_l1 = parse_value(key, v)?,
            "cost_iou" => self.cost_iou = parse_value(key, v)?,
            "loss_l1" => self.loss_l1 = parse_value(key, v)?,
            "loss_box" => self.loss_box = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.stem_channels == 0 || self.stem_channels % 4 != 0 {
            return fail(format!("stem_channels must be a positive multiple of 4, got {}", self.stem_channels));
        }
        if self.num_classes == 0 || self.batch_size == 0 {
            return fail("num_classes and batch_size must be positive".into());
        }
        check_image_size(self.image_size)?;
        self.box_loss()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return fail("lr and eps must be positive and weight_decay non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail(format!("betas must lie in [0, 1), got ({}, {})", self.beta1, self.beta2));
        }
        Ok(())
    }

    pub fn box_loss(&self) -> Result<BoxLoss> {
        BoxLoss::parse(&self.loss, self.inner_ratio)
    }

    pub fn cost_weights(&self) -> CostWeights {
        CostWeights { class: self.cost_class, l1: self.cost_l1, iou: self.cost_iou }
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        Ok(LossConfig { l1: self.loss_l1, box_weight: self.loss_box, box_loss: self.box_loss()? })
    }

    /// Every key with its current value; `parse(to_text())` is the identity.
    pub fn to_text(&self) -> String {
        format!(
            "stem_channels = {}\ndownsample = {}\nfusion = {}\nalignment = {}\nloss = {}\ninner_ratio = {:?}\n\
             num_classes = {}\nimage_size = {}\nlr = {:?}\nbatch_size = {}\nweight_decay = {:?}\nbeta1 = {:?}\n\
             beta2 = {:?}\neps = {:?}\ncost_class = {:?}\ncost_l1 = {:?}\ncost_iou = {:?}\nloss_l1 = {:?}\n\
             loss_box = {:?}\nseed = {}\n",
            self.stem_channels,
            self.downsample,
            self.fusion,
            self.alignment,
            self.loss,
            self.inner_ratio,
            self.num_classes,
            self.image_size,
            self.lr,
            self.batch_size,
            self.weight_decay,
            self.beta1,
            self.beta2,
            self.eps,
            self.cost_class,
            self.cost_l1,
            self.cost_iou,
            self.loss_l1,
            self.loss_box,
            self.seed,
        )
    }

    /// The sixteen on/off combinations of the four frequency-aware parts.
    pub fn ablations(&self) -> Vec<DetectorConfig> {
        (0..16u32)
            .map(|bits| DetectorConfig {
                loss: if bits & 1 != 0 { "inner_siou".into() } else { "giou".into() },
                fusion: if bits & 2 != 0 { Fusion::Msff } else { Fusion::Plain },
                downsample: if bits & 4 != 0 { Downsample::Fd } else { Downsample::Plain },
                alignment: if bits & 8 != 0 { Alignment::Sac } else { Alignment::Off },
                ..self.clone()
            })
            .collect()
    }

    /// `inner_siou+msff+fd+sac` style label.
    pub fn label(&self) -> String {
        format!("loss={} fusion={} downsample={} alignment={}", self.loss, self.fusion, self.downsample, self.alignment)
    }
}
