//! Frequency-Focused operator.
//!
//! `out = alpha * Re(IFFT(FFT(value(x)) ⊙ mask(x))) + beta * x`
//!
//! `value` and `mask` are 1x1 convolutions. The mask output is a real
//! spatial-layout tensor and is read as one real gain per frequency bin,
//! applied to both the real and imaginary parts. With `alpha = 0, beta = 1`
//! (the initial state) the operator is the identity.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::nn::ConvSpec;
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;

use super::{register_scalar, Conv};

pub const FF_ALPHA_INIT: f64 = 0.0;
pub const FF_BETA_INIT: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct FfBlock {
    pub name: String,
    pub channels: usize,
    pub mask: Conv,
    pub value: Conv,
}

impl FfBlock {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        let name = name.into();
        FfBlock {
            mask: Conv::new(format!("{name}.mask"), ConvSpec::pointwise(channels, channels)),
            value: Conv::new(format!("{name}.value"), ConvSpec::pointwise(channels, channels)),
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
        self.mask.register(store, seed)?;
        self.value.register(store, seed)?;
        register_scalar(store, &self.alpha_name(), FF_ALPHA_INIT)?;
        register_scalar(store, &self.beta_name(), FF_BETA_INIT)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let v = self.value.forward(g, p, x)?;
        let spectrum = g.fft2(v)?;
        let mask = self.mask.forward(g, p, x)?;
        let filtered = g.cmul(spectrum, mask)?;
        let back = g.ifft2(filtered)?;
        let freq = g.mul_scalar(back, p.get(&self.alpha_name())?)?;
        let residual = g.mul_scalar(x, p.get(&self.beta_name())?)?;
        g.add(freq, residual)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::conv2d_forward;
    use crate::spectral::{fft2, ifft2, Spectrum};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: (usize, usize, usize, usize), seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    fn run(block: &FfBlock, store: &ParamStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let p = g.bind(store);
        let xv = g.leaf(x.clone());
        let out = block.forward(&mut g, &p, xv).unwrap();
        g.tensor(out).clone()
    }

    #[test]
    fn initial_state_is_identity() {
        let block = FfBlock::new("ff", 3);
        let mut store = ParamStore::new();
        block.register(&mut store, 1).unwrap();
        let x = random((2, 3, 8, 8), 2);
        assert!(run(&block, &store, &x).max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn unit_mask_identity_value_roundtrips() {
        let block = FfBlock::new("ff", 2);
        let mut store = ParamStore::new();
        block.register(&mut store, 1).unwrap();
        let eye = Tensor::from_fn((2, 2, 1, 1), |o, i, _, _| if o == i { 1.0 } else { 0.0 });
        store.set("ff.value.weight", eye).unwrap();
        store.set("ff.mask.weight", Tensor::zeros((2, 2, 1, 1))).unwrap();
        store.set("ff.mask.bias", Tensor::full((1, 2, 1, 1), 1.0)).unwrap();
        store.set("ff.alpha", Tensor::scalar(1.0)).unwrap();
        store.set("ff.beta", Tensor::scalar(0.0)).unwrap();
        let x = random((1, 2, 4, 8), 3);
        assert!(run(&block, &store, &x).max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn matches_step_by_step_composition() {
        let block = FfBlock::new("ff", 3);
        let mut store = ParamStore::new();
        block.register(&mut store, 4).unwrap();
        store.set("ff.alpha", Tensor::scalar(0.7)).unwrap();
        store.set("ff.beta", Tensor::scalar(-1.3)).unwrap();
        store.set("ff.mask.bias", random((1, 3, 1, 1), 5)).unwrap();
        let x = random((2, 3, 8, 4), 6);

        let get = |n: &str| store.get(n).unwrap();
        let v = conv2d_forward(&x, get("ff.value.weight"), Some(get("ff.value.bias")), block.value.spec).unwrap();
        let m = conv2d_forward(&x, get("ff.mask.weight"), Some(get("ff.mask.bias")), block.mask.spec).unwrap();
        let s = fft2(&v).unwrap();
        let re: Vec<f64> = s.re().iter().zip(m.data()).map(|(a, b)| a * b).collect();
        let im: Vec<f64> = s.im().iter().zip(m.data()).map(|(a, b)| a * b).collect();
        let back = ifft2(&Spectrum::new(s.shape(), re, im).unwrap()).unwrap();
        let expect =
            Tensor::from_values(x.shape(), back.data().iter().zip(x.data()).map(|(r, x)| 0.7 * r - 1.3 * x).collect())
                .unwrap();
        assert!(run(&block, &store, &x).max_abs_diff(&expect) < 1e-9);
    }
}
