//! Multi-scale feature fusion with frequency enhancement.
//!
//! Inputs are concatenated along channels (a higher-resolution input first
//! goes through Focus slicing and a 1x1 convolution) and split
//! cross-stage-partial style into `x1` (C/4 channels) and `x2` (3C/4). Only
//! `x1` is processed:
//!
//! ```text
//! x_conv  = GELU(Conv1x1(x1))
//! x_sp    = | IFFT( Conv1x1(GAP(x_conv)) · FFT(x_conv) ) |
//! x_sc    = Conv1x1(x_sp) + Conv3x3(x_sp) + Conv5x5(x_sp)
//! x_sc    = x_sc · sigmoid(Conv1x1(GAP(x_conv)))          channel attention
//! x_F     = FF(x_sc)
//! x_final = x1 + DWConv31x31(x_conv) + Conv1x1(x_conv) + x_F
//! out     = GELU(Conv1x1(concat(x_final, x2)))
//! ```

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::ConvSpec;
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;

use super::{Conv, FfBlock};

/// Kernel of the long-range depthwise convolution.
pub const LARGE_KERNEL: usize = 31;

#[derive(Clone, Debug, PartialEq)]
pub struct MsffConfig {
    /// Channels of the higher-resolution input routed through Focus, if any.
    pub focus_in: Option<usize>,
    /// Output channels of the Focus convolution.
    pub focus_out: usize,
    /// Channels of the inputs already at the fusion resolution.
    pub direct_in: Vec<usize>,
}

impl MsffConfig {
    pub fn single(channels: usize) -> Self {
        MsffConfig { focus_in: None, focus_out: 0, direct_in: vec![channels] }
    }

    /// Total channels after concatenation.
    pub fn channels(&self) -> usize {
        self.focus_in.map_or(0, |_| self.focus_out) + self.direct_in.iter().sum::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MsffBlock {
    pub name: String,
    pub config: MsffConfig,
    pub focus: Option<Conv>,
    pub entry: Conv,
    pub spectral_gain: Conv,
    pub ms1: Conv,
    pub ms3: Conv,
    pub ms5: Conv,
    pub attention: Conv,
    pub ff: FfBlock,
    pub large: Conv,
    pub point: Conv,
    pub exit: Conv,
}

impl MsffBlock {
    pub fn new(name: impl Into<String>, config: MsffConfig) -> Result<Self> {
        let name = name.into();
        let c = config.channels();
        if c == 0 || c % 4 != 0 {
            return Err(Error::Config(format!("{name}: fused channel count {c} must be a positive multiple of 4")));
        }
        let c1 = c / 4;
        let conv = |suffix: &str, spec| Conv::new(format!("{name}.{suffix}"), spec);
        Ok(MsffBlock {
            focus: config.focus_in.map(|cin| conv("focus", ConvSpec::pointwise(4 * cin, config.focus_out))),
            entry: conv("entry", ConvSpec::pointwise(c1, c1)),
            spectral_gain: conv("spectral_gain", ConvSpec::pointwise(c1, c1)),
            ms1: conv("ms1", ConvSpec::same(c1, c1, 1)),
            ms3: conv("ms3", ConvSpec::same(c1, c1, 3)),
            ms5: conv("ms5", ConvSpec::same(c1, c1, 5)),
            attention: conv("attention", ConvSpec::pointwise(c1, c1)),
            ff: FfBlock::new(format!("{name}.ff"), c1),
            large: conv("large", ConvSpec::depthwise(c1, LARGE_KERNEL, LARGE_KERNEL / 2)),
            point: conv("point", ConvSpec::pointwise(c1, c1)),
            exit: conv("exit", ConvSpec::pointwise(c, c)),
            name,
            config,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.config.channels()
    }

    /// Convolutions of the processed `x1` branch (everything but Focus and exit).
    pub fn branch_convs(&self) -> [&Conv; 8] {
        [&self.entry, &self.spectral_gain, &self.ms1, &self.ms3, &self.ms5, &self.attention, &self.large, &self.point]
    }

    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        if let Some(f) = &self.focus {
            f.register(store, seed)?;
        }
        for c in self.branch_convs() {
            c.register(store, seed)?;
        }
        self.ff.register(store, seed)?;
        self.exit.register(store, seed)
    }

    /// `focus_input` is required iff the block was configured with a Focus path.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, focus_input: Option<Var>, direct: &[Var]) -> Result<Var> {
        if direct.len() != self.config.direct_in.len() {
            return Err(Error::Config(format!(
                "{}: expected {} direct inputs, got {}",
                self.name,
                self.config.direct_in.len(),
                direct.len()
            )));
        }
        let mut parts = Vec::with_capacity(direct.len() + 1);
        match (&self.focus, focus_input) {
            (Some(conv), Some(s2)) => {
                let sliced = g.focus_slice(s2)?;
                parts.push(conv.forward(g, p, sliced)?);
            }
            (None, None) => {}
            _ => return Err(Error::Config(format!("{}: Focus input does not match configuration", self.name))),
        }
        parts.extend_from_slice(direct);
        let x = g.concat_channels(&parts)?;
        let c = self.out_channels();
        let halves = g.split_channels(x, &[c / 4, 3 * c / 4])?;
        let (x1, x2) = (halves[0], halves[1]);

        let entry = self.entry.forward(g, p, x1)?;
        let x_conv = g.gelu(entry);

        let pooled = g.global_avg_pool(x_conv)?;
        let gain = self.spectral_gain.forward(g, p, pooled)?;
        let spectrum = g.fft2(x_conv)?;
        let filtered = g.cmul(spectrum, gain)?;
        let back = g.ifft2_complex(filtered)?;
        let x_sp = g.magnitude(back)?;

        let a = self.ms1.forward(g, p, x_sp)?;
        let b = self.ms3.forward(g, p, x_sp)?;
        let d = self.ms5.forward(g, p, x_sp)?;
        let x_sc = g.add_all(&[a, b, d])?;
        let x_sc = g.channel_attention(
            x_sc,
            x_conv,
            p.get(&self.attention.weight_name())?,
            p.get(&self.attention.bias_name())?,
        )?;
        let x_f = self.ff.forward(g, p, x_sc)?;

        let long = self.large.forward(g, p, x_conv)?;
        let short = self.point.forward(g, p, x_conv)?;
        let x_final = g.add_all(&[x1, long, short, x_f])?;

        let merged = g.concat_channels(&[x_final, x2])?;
        let out = self.exit.forward(g, p, merged)?;
        Ok(g.gelu(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{conv2d_forward, gelu_scalar, sigmoid_scalar, unfocus};
    use crate::spectral::{fft2, ifft2_complex, Spectrum};
    use crate::tensor::{Shape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: impl Into<Shape>, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn shape_is_preserved() {
        let block = MsffBlock::new("m", MsffConfig::single(256)).unwrap();
        let mut store = ParamStore::new();
        block.register(&mut store, 0).unwrap();
        let mut g = Graph::new();
        let p = g.bind(&store);
        let x = g.leaf(random((1, 256, 16, 16), 1));
        let y = block.forward(&mut g, &p, None, &[x]).unwrap();
        assert_eq!(g.shape(y), Shape::new(1, 256, 16, 16));
        assert!(g.tensor(y).is_finite());
    }

    #[test]
    fn channel_count_must_divide_by_four() {
        assert!(matches!(MsffBlock::new("m", MsffConfig::single(6)), Err(Error::Config(_))));
    }

    #[test]
    fn focus_input_must_match_configuration() {
        let cfg = MsffConfig { focus_in: Some(2), focus_out: 4, direct_in: vec![4] };
        let block = MsffBlock::new("m", cfg).unwrap();
        let mut store = ParamStore::new();
        block.register(&mut store, 0).unwrap();
        let mut g = Graph::<f64>::new();
        let p = g.bind(&store);
        let x = g.leaf(random((1, 4, 4, 4), 1));
        assert!(block.forward(&mut g, &p, None, &[x]).is_err());
        let s2 = g.leaf(random((1, 2, 8, 8), 2));
        let y = block.forward(&mut g, &p, Some(s2), &[x]).unwrap();
        assert_eq!(g.shape(y), Shape::new(1, 8, 4, 4));
    }

    #[test]
    fn zeroed_branch_leaves_exit_over_passthrough() {
        let block = MsffBlock::new("m", MsffConfig::single(8)).unwrap();
        let mut store = ParamStore::new();
        block.register(&mut store, 3).unwrap();
        let names: Vec<String> = store
            .names()
            .filter(|n| !n.starts_with("m.exit"))
            .map(str::to_string)
            .collect();
        for n in names {
            let shape = store.get(&n).unwrap().shape();
            store.set(&n, Tensor::zeros(shape)).unwrap();
        }
        let x = random((1, 8, 4, 4), 4);
        let mut g = Graph::new();
        let p = g.bind(&store);
        let xv = g.leaf(x.clone());
        let y = block.forward(&mut g, &p, None, &[xv]).unwrap();
        // x_final collapses to x1, so the output is GELU(exit(x)).
        let z = conv2d_forward(&x, store.get("m.exit.weight").unwrap(), store.get("m.exit.bias"), block.exit.spec).unwrap();
        assert!(g.tensor(y).max_abs_diff(&z.map(gelu_scalar)) < 1e-12);
    }

    /// Straight-line recomputation from the pure kernels.
    fn reference(block: &MsffBlock, store: &ParamStore<f64>, s2: &Tensor<f64>, direct: &Tensor<f64>) -> Tensor<f64> {
        let conv = |c: &Conv, x: &Tensor<f64>| {
            conv2d_forward(x, store.get(&c.weight_name()).unwrap(), store.get(&c.bias_name()), c.spec).unwrap()
        };
        let add = |a: &Tensor<f64>, b: &Tensor<f64>| {
            Tensor::from_values(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap()
        };
        let gap = |x: &Tensor<f64>| {
            let s = x.shape();
            Tensor::from_fn((s.n, s.c, 1, 1), |n, c, _, _| x.channel_plane(n, c).iter().sum::<f64>() / s.plane() as f64)
        };
        // Focus: inverse of unfocus, built by brute-force search over positions.
        let s = s2.shape();
        let sliced = {
            let mut out = Tensor::zeros((s.n, 4 * s.c, s.h / 2, s.w / 2));
            for n in 0..s.n {
                for c in 0..4 * s.c {
                    for y in 0..s.h / 2 {
                        for x in 0..s.w / 2 {
                            let (group, ch) = (c / s.c, c % s.c);
                            let (py, px) = [(0, 0), (0, 1), (1, 0), (1, 1)][group];
                            out.set(n, c, y, x, s2.at(n, ch, 2 * y + py, 2 * x + px));
                        }
                    }
                }
            }
            assert_eq!(&unfocus(&out).unwrap(), s2);
            out
        };
        let f = conv(block.focus.as_ref().unwrap(), &sliced);
        let cf = f.shape().c;
        let cd = direct.shape().c;
        let total = cf + cd;
        let x = Tensor::from_fn((s.n, total, f.shape().h, f.shape().w), |n, c, y, xx| {
            if c < cf {
                f.at(n, c, y, xx)
            } else {
                direct.at(n, c - cf, y, xx)
            }
        });
        let c1 = total / 4;
        let xs = x.shape();
        let x1 = Tensor::from_fn(xs.with_c(c1), |n, c, y, xx| x.at(n, c, y, xx));
        let x2 = Tensor::from_fn(xs.with_c(total - c1), |n, c, y, xx| x.at(n, c + c1, y, xx));
        let x_conv = conv(&block.entry, &x1).map(gelu_scalar);
        let gain = conv(&block.spectral_gain, &gap(&x_conv));
        let spec = fft2(&x_conv).unwrap();
        let plane = xs.plane();
        let re = spec.re().iter().enumerate().map(|(i, v)| v * gain.data()[i / plane]).collect();
        let im = spec.im().iter().enumerate().map(|(i, v)| v * gain.data()[i / plane]).collect();
        let back = ifft2_complex(&Spectrum::new(spec.shape(), re, im).unwrap()).unwrap();
        let x_sp = Tensor::from_values(
            spec.shape(),
            back.re().iter().zip(back.im()).map(|(r, i)| (r * r + i * i).sqrt()).collect(),
        )
        .unwrap();
        let x_sc = add(&add(&conv(&block.ms1, &x_sp), &conv(&block.ms3, &x_sp)), &conv(&block.ms5, &x_sp));
        let att = conv(&block.attention, &gap(&x_conv)).map(sigmoid_scalar);
        let x_sc = Tensor::from_fn(x_sc.shape(), |n, c, y, xx| x_sc.at(n, c, y, xx) * att.at(n, c, 0, 0));
        // FF
        let v = conv(&block.ff.value, &x_sc);
        let m = conv(&block.ff.mask, &x_sc);
        let sv = fft2(&v).unwrap();
        let re = sv.re().iter().zip(m.data()).map(|(a, b)| a * b).collect();
        let im = sv.im().iter().zip(m.data()).map(|(a, b)| a * b).collect();
        let r = ifft2_complex(&Spectrum::new(sv.shape(), re, im).unwrap()).unwrap().real_part();
        let alpha = store.get("m.ff.alpha").unwrap().data()[0];
        let beta = store.get("m.ff.beta").unwrap().data()[0];
        let x_f = Tensor::from_values(r.shape(), r.data().iter().zip(x_sc.data()).map(|(a, b)| alpha * a + beta * b).collect())
            .unwrap();
        let x_final = add(&add(&add(&x1, &conv(&block.large, &x_conv)), &conv(&block.point, &x_conv)), &x_f);
        let merged = Tensor::from_fn(xs, |n, c, y, xx| if c < c1 { x_final.at(n, c, y, xx) } else { x2.at(n, c - c1, y, xx) });
        conv(&block.exit, &merged).map(gelu_scalar)
    }

    #[test]
    fn matches_reference_composition() {
        let cfg = MsffConfig { focus_in: Some(3), focus_out: 4, direct_in: vec![8] };
        let block = MsffBlock::new("m", cfg).unwrap();
        let mut store = ParamStore::new();
        block.register(&mut store, 11).unwrap();
        store.set("m.ff.alpha", Tensor::scalar(0.8)).unwrap();
        store.set("m.ff.beta", Tensor::scalar(0.6)).unwrap();
        let s2 = random((2, 3, 16, 16), 12);
        let direct = random((2, 8, 8, 8), 13);
        let mut g = Graph::new();
        let p = g.bind(&store);
        let (a, b) = (g.leaf(s2.clone()), g.leaf(direct.clone()));
        let y = block.forward(&mut g, &p, Some(a), &[b]).unwrap();
        let expect = reference(&block, &store, &s2, &direct);
        assert!(g.tensor(y).max_abs_diff(&expect) < 1e-9);
    }
}
