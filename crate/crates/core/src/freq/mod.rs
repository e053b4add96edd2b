//! The frequency-aware blocks: the Frequency-Focused operator ([`ff`]),
//! multi-scale fusion with frequency enhancement ([`msff`]),
//! frequency-focused downsampling ([`fd`]) and semantic alignment and
//! calibration ([`sac`]).
//!
//! Blocks are plain descriptors. `register` adds their parameters to a
//! [`ParamStore`]; `forward` reads them back from a [`Bound`] set of graph
//! variables, so one descriptor serves any number of graphs.

pub mod fd;
pub mod ff;
pub mod msff;
pub mod sac;

pub use fd::FdBlock;
pub use ff::FfBlock;
pub use msff::{MsffBlock, MsffConfig};
pub use sac::SacBlock;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::nn::ConvSpec;
use crate::params::{Bound, Init, ParamStore};
use crate::scalar::Scalar;

/// A convolution layer with its parameter names.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub name: String,
    pub spec: ConvSpec,
    pub bias: bool,
}

impl Conv {
    pub fn new(name: impl Into<String>, spec: ConvSpec) -> Self {
        Conv { name: name.into(), spec, bias: true }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    /// Uniform fan-in weights, zero bias.
    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        self.register_with(store, seed, Init::Uniform { fan_in: self.spec.fan_in() }, Init::ZEROS)
    }

    pub fn register_with<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64, weight: Init, bias: Init) -> Result<()> {
        self.spec.validate()?;
        store.init(seed, self.weight_name(), self.spec.weight_shape(), weight)?;
        if self.bias {
            store.init(seed, self.bias_name(), self.spec.bias_shape(), bias)?;
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let w = p.get(&self.weight_name())?;
        let b = if self.bias { Some(p.get(&self.bias_name())?) } else { None };
        g.conv2d(x, w, b, self.spec)
    }
}

pub(crate) fn register_scalar<T: Scalar>(store: &mut ParamStore<T>, name: &str, value: f64) -> Result<()> {
    store.init(0, name, (1, 1, 1, 1), Init::Constant(value))
}
