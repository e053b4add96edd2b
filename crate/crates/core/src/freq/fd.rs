//! Frequency-focused downsampling.
//!
//! ```text
//! x_p    = AvgPool(k2, s1)(x)          padded bottom/right, shape preserving
//! x1, x2 = split(x_p)                  C/2 each
//! x1'    = Conv3x3,s2(x1)
//! x_f    = Conv3x3,s2(FF(x2))
//! x_m    = Conv1x1(MaxPool(k3, s2, p1)(x2))
//! x2'    = Conv1x1(concat(x_f, x_m))
//! out    = concat(x1', x2')
//! ```
//!
//! Each of `x1'`, `x2'` carries `out_channels / 2` channels.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{ConvSpec, Padding, PoolSpec};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;

use super::{Conv, FfBlock};

pub const PRE_POOL: PoolSpec = PoolSpec { kernel: 2, stride: 1, padding: Padding::trailing(1) };
pub const MAX_POOL: PoolSpec = PoolSpec { kernel: 3, stride: 2, padding: Padding::uniform(1) };

#[derive(Clone, Debug, PartialEq)]
pub struct FdBlock {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub reduce: Conv,
    pub ff: FfBlock,
    pub project: Conv,
    pub pool_proj: Conv,
    pub merge: Conv,
}

impl FdBlock {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize) -> Result<Self> {
        let name = name.into();
        if in_channels == 0 || in_channels % 2 != 0 {
            return Err(Error::Config(format!("{name}: input channels must be even, got {in_channels}")));
        }
        if out_channels == 0 || out_channels % 2 != 0 {
            return Err(Error::Config(format!("{name}: output channels must be even, got {out_channels}")));
        }
        let (half_in, half_out) = (in_channels / 2, out_channels / 2);
        Ok(FdBlock {
            reduce: Conv::new(format!("{name}.reduce"), ConvSpec::dense(half_in, half_out, 3, 2, 1)),
            ff: FfBlock::new(format!("{name}.ff"), half_in),
            project: Conv::new(format!("{name}.project"), ConvSpec::dense(half_in, half_out, 3, 2, 1)),
            pool_proj: Conv::new(format!("{name}.pool_proj"), ConvSpec::pointwise(half_in, half_out)),
            merge: Conv::new(format!("{name}.merge"), ConvSpec::pointwise(out_channels, half_out)),
            name,
            in_channels,
            out_channels,
        })
    }

    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        self.reduce.register(store, seed)?;
        self.ff.register(store, seed)?;
        self.project.register(store, seed)?;
        self.pool_proj.register(store, seed)?;
        self.merge.register(store, seed)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let s = g.try_tensor(x)?.shape();
        if s.c != self.in_channels {
            return Err(Error::Shape(format!("{}: expected {} channels, got {s}", self.name, self.in_channels)));
        }
        if s.h % 2 != 0 || s.w % 2 != 0 {
            return Err(Error::Shape(format!("{}: spatial dims must be even, got {s}", self.name)));
        }
        let pooled = g.avg_pool(x, PRE_POOL)?;
        let half = self.in_channels / 2;
        let parts = g.split_channels(pooled, &[half, half])?;
        let (x1, x2) = (parts[0], parts[1]);
        let x1 = self.reduce.forward(g, p, x1)?;
        let enhanced = self.ff.forward(g, p, x2)?;
        let x_f = self.project.forward(g, p, enhanced)?;
        let maxed = g.max_pool(x2, MAX_POOL)?;
        let x_m = self.pool_proj.forward(g, p, maxed)?;
        let both = g.concat_channels(&[x_f, x_m])?;
        let x2 = self.merge.forward(g, p, both)?;
        g.concat_channels(&[x1, x2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::conv2d_forward;
    use crate::spectral::{fft2, ifft2, Spectrum};
    use crate::tensor::{Shape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: impl Into<Shape>, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    fn run(block: &FdBlock, store: &ParamStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let p = g.bind(store);
        let xv = g.leaf(x.clone());
        let y = block.forward(&mut g, &p, xv).unwrap();
        g.tensor(y).clone()
    }

    #[test]
    fn halves_spatial_dims() {
        let block = FdBlock::new("fd", 64, 48).unwrap();
        let mut store = ParamStore::new();
        block.register(&mut store, 0).unwrap();
        let y = run(&block, &store, &random((1, 64, 16, 16), 1));
        assert_eq!(y.shape(), Shape::new(1, 48, 8, 8));
    }

    #[test]
    fn odd_channels_rejected() {
        assert!(matches!(FdBlock::new("fd", 5, 4), Err(Error::Config(_))));
        assert!(matches!(FdBlock::new("fd", 4, 3), Err(Error::Config(_))));
    }

    #[test]
    fn constant_field_paths_agree_on_interior() {
        // x1's conv is a centre tap, pool_proj passes through and merge keeps
        // only the max path.
        let block = FdBlock::new("fd", 2, 2).unwrap();
        let mut store = ParamStore::new();
        block.register(&mut store, 0).unwrap();
        let mut centre = Tensor::zeros((1, 1, 3, 3));
        centre.set(0, 0, 1, 1, 1.0);
        store.set("fd.reduce.weight", centre).unwrap();
        store.set("fd.pool_proj.weight", Tensor::full((1, 1, 1, 1), 1.0)).unwrap();
        store.set("fd.merge.weight", Tensor::from_values((1, 2, 1, 1), vec![0.0, 1.0]).unwrap()).unwrap();
        let x = Tensor::full((1, 2, 8, 8), 2.5);
        let y = run(&block, &store, &x);
        // Channel 0 is the avg path through a centre tap, channel 1 the max path.
        for yy in 0..4 {
            for xx in 0..4 {
                assert!((y.at(0, 0, yy, xx) - 2.5).abs() < 1e-12);
                assert!((y.at(0, 1, yy, xx) - 2.5).abs() < 1e-12);
            }
        }
    }

    fn pool_ref(x: &Tensor<f64>, k: usize, s: usize, pad: Padding, avg: bool) -> Tensor<f64> {
        let sh = x.shape();
        let oh = (sh.h + pad.top + pad.bottom - k) / s + 1;
        let ow = (sh.w + pad.left + pad.right - k) / s + 1;
        Tensor::from_fn((sh.n, sh.c, oh, ow), |n, c, y, xx| {
            let mut vals = Vec::new();
            for dy in 0..k {
                for dx in 0..k {
                    let iy = (y * s + dy) as isize - pad.top as isize;
                    let ix = (xx * s + dx) as isize - pad.left as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < sh.h && (ix as usize) < sh.w {
                        vals.push(x.at(n, c, iy as usize, ix as usize));
                    }
                }
            }
            if avg {
                vals.iter().sum::<f64>() / (k * k) as f64
            } else {
                vals.into_iter().fold(f64::NEG_INFINITY, f64::max)
            }
        })
    }

    #[test]
    fn matches_reference_composition() {
        let block = FdBlock::new("fd", 6, 4).unwrap();
        let mut store = ParamStore::new();
        block.register(&mut store, 9).unwrap();
        store.set("fd.ff.alpha", Tensor::scalar(0.9)).unwrap();
        store.set("fd.ff.beta", Tensor::scalar(0.4)).unwrap();
        let x = random((2, 6, 8, 8), 10);

        let conv = |c: &Conv, x: &Tensor<f64>| {
            conv2d_forward(x, store.get(&c.weight_name()).unwrap(), store.get(&c.bias_name()), c.spec).unwrap()
        };
        let xp = pool_ref(&x, 2, 1, Padding::trailing(1), true);
        let s = xp.shape();
        let x1 = Tensor::from_fn(s.with_c(3), |n, c, y, xx| xp.at(n, c, y, xx));
        let x2 = Tensor::from_fn(s.with_c(3), |n, c, y, xx| xp.at(n, c + 3, y, xx));
        let a = conv(&block.reduce, &x1);
        let v = conv(&block.ff.value, &x2);
        let m = conv(&block.ff.mask, &x2);
        let sv = fft2(&v).unwrap();
        let re = sv.re().iter().zip(m.data()).map(|(a, b)| a * b).collect();
        let im = sv.im().iter().zip(m.data()).map(|(a, b)| a * b).collect();
        let r = ifft2(&Spectrum::new(sv.shape(), re, im).unwrap()).unwrap();
        let ff = Tensor::from_values(x2.shape(), r.data().iter().zip(x2.data()).map(|(r, x)| 0.9 * r + 0.4 * x).collect())
            .unwrap();
        let xf = conv(&block.project, &ff);
        let xm = conv(&block.pool_proj, &pool_ref(&x2, 3, 2, Padding::uniform(1), false));
        let cat = Tensor::from_fn((2, 4, 4, 4), |n, c, y, xx| if c < 2 { xf.at(n, c, y, xx) } else { xm.at(n, c - 2, y, xx) });
        let b = conv(&block.merge, &cat);
        let expect = Tensor::from_fn((2, 4, 4, 4), |n, c, y, xx| if c < 2 { a.at(n, c, y, xx) } else { b.at(n, c - 2, y, xx) });
        assert!(run(&block, &store, &x).max_abs_diff(&expect) < 1e-9);
    }
}
