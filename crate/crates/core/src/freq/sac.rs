//! Semantic alignment and calibration of a high-resolution map `x1` with a
//! coarser map `x2`.
//!
//! ```text
//! x1'      = Conv1x1(x1)
//! x2'      = Upsample(Conv1x1(x2)) to x1's size
//! G        = sigmoid(Conv1x1(x2'))
//! x_fused  = G · FF(x2') + (1 - G) · x2'
//! Δ1, Δ2   = split(Conv3x3(concat(x1', x_fused)))      2 + 2 channels
//! out      = α · warp(x1', Δ1) + β · warp(x_fused, Δ2)
//! ```
//!
//! The offset convolution starts at exactly zero so both warps are the
//! identity at initialization; `α = β = 0.5`.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::ConvSpec;
use crate::params::{Bound, Init, ParamStore};
use crate::scalar::Scalar;

use super::{register_scalar, Conv, FfBlock};

pub const SAC_ALPHA_INIT: f64 = 0.5;
pub const SAC_BETA_INIT: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct SacBlock {
    pub name: String,
    pub channels: usize,
    pub unify1: Conv,
    pub unify2: Conv,
    pub ff: FfBlock,
    pub gate: Conv,
    pub offset: Conv,
}

/// Intermediate tensors of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SacTrace {
    pub x1: Var,
    pub x2: Var,
    pub fused: Var,
    pub offsets: Var,
    pub out: Var,
}

impl SacBlock {
    pub fn new(name: impl Into<String>, in1: usize, in2: usize, channels: usize) -> Self {
        let name = name.into();
        SacBlock {
            unify1: Conv::new(format!("{name}.unify1"), ConvSpec::pointwise(in1, channels)),
            unify2: Conv::new(format!("{name}.unify2"), ConvSpec::pointwise(in2, channels)),
            ff: FfBlock::new(format!("{name}.ff"), channels),
            gate: Conv::new(format!("{name}.gate"), ConvSpec::pointwise(channels, channels)),
            offset: Conv::new(format!("{name}.offset"), ConvSpec::same(2 * channels, 4, 3)),
            name,
            channels,
        }
    }

    pub fn alpha_name(&self) -> String {
        format!("{}.alpha", self.name)
    }

    pub fn beta_name(&self) -> String {
        format!("{}.beta", self.name)
    }

    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        self.unify1.register(store, seed)?;
        self.unify2.register(store, seed)?;
        self.ff.register(store, seed)?;
        self.gate.register(store, seed)?;
        self.offset.register_with(store, seed, Init::ZEROS, Init::ZEROS)?;
        register_scalar(store, &self.alpha_name(), SAC_ALPHA_INIT)?;
        register_scalar(store, &self.beta_name(), SAC_BETA_INIT)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x1: Var, x2: Var) -> Result<Var> {
        Ok(self.trace(g, p, x1, x2)?.out)
    }

    pub fn trace<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x1: Var, x2: Var) -> Result<SacTrace> {
        let (s1, s2) = (g.try_tensor(x1)?.shape(), g.try_tensor(x2)?.shape());
        if s2.h > s1.h || s2.w > s1.w {
            return Err(Error::Shape(format!("{}: x2 {s2} is larger than x1 {s1}", self.name)));
        }
        let a = self.unify1.forward(g, p, x1)?;
        let b = self.unify2.forward(g, p, x2)?;
        let b = if (s2.h, s2.w) == (s1.h, s1.w) { b } else { g.bilinear_upsample(b, s1.h, s1.w)? };

        let freq = self.ff.forward(g, p, b)?;
        let logits = self.gate.forward(g, p, b)?;
        let gate = g.sigmoid(logits);
        let keep = g.affine(gate, -T::one(), T::one())?;
        let gated_freq = g.mul(gate, freq)?;
        let gated_spatial = g.mul(keep, b)?;
        let fused = g.add(gated_freq, gated_spatial)?;

        let both = g.concat_channels(&[a, fused])?;
        let offsets = self.offset.forward(g, p, both)?;
        let deltas = g.split_channels(offsets, &[2, 2])?;
        let wa = g.grid_sample(a, deltas[0])?;
        let wb = g.grid_sample(fused, deltas[1])?;
        let wa = g.mul_scalar(wa, p.get(&self.alpha_name())?)?;
        let wb = g.mul_scalar(wb, p.get(&self.beta_name())?)?;
        let out = g.add(wa, wb)?;
        Ok(SacTrace { x1: a, x2: b, fused, offsets, out })
    }
}
