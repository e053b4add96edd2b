//! Elementwise arithmetic, reductions and channel movement.

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Value, Var};
use crate::scalar::Scalar;
use crate::tensor::{ensure_same_shape, Shape, Tensor};

pub(crate) fn real_grad<T>(t: Tensor<T>) -> Option<Value<T>> {
    Some(Value::Real(t))
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_values(a.shape(), data).expect("same shape")
}

impl<T: Scalar> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.try_tensor(a)?, self.try_tensor(b)?);
        ensure_same_shape("add", ta.shape(), tb.shape())?;
        let out = zip_map(ta, tb, |x, y| x + y);
        Ok(self.record_real(
            "add",
            &[a, b],
            out,
            Box::new(|g, _, _| {
                let g = g.as_real()?;
                Ok(vec![real_grad(g.clone()), real_grad(g.clone())])
            }),
        ))
    }

    /// Sums any number of same-shape tensors.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms.split_first().ok_or_else(|| crate::Error::Contract("add_all of nothing".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.try_tensor(a)?, self.try_tensor(b)?);
        ensure_same_shape("sub", ta.shape(), tb.shape())?;
        let out = zip_map(ta, tb, |x, y| x - y);
        Ok(self.record_real(
            "sub",
            &[a, b],
            out,
            Box::new(|g, _, _| {
                let g = g.as_real()?;
                Ok(vec![real_grad(g.clone()), real_grad(g.map(|v| -v))])
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.try_tensor(a)?, self.try_tensor(b)?);
        ensure_same_shape("mul", ta.shape(), tb.shape())?;
        let out = zip_map(ta, tb, |x, y| x * y);
        Ok(self.record_real(
            "mul",
            &[a, b],
            out,
            Box::new(|g, ins, _| {
                let g = g.as_real()?;
                let (a, b) = (ins[0].as_real()?, ins[1].as_real()?);
                Ok(vec![real_grad(zip_map(g, b, |g, b| g * b)), real_grad(zip_map(g, a, |g, a| g * a))])
            }),
        ))
    }

    /// Multiplies by a fixed real constant.
    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.affine(a, s, T::zero()).expect("scale of a real tensor")
    }

    /// `scale * a + shift` with constant coefficients.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Result<Var> {
        let out = self.try_tensor(a)?.map(|v| scale * v + shift);
        let name = if shift == T::zero() { "scale" } else { "affine" };
        Ok(self.record_real(
            name,
            &[a],
            out,
            Box::new(move |g, _, _| Ok(vec![real_grad(g.as_real()?.map(|v| v * scale))])),
        ))
    }

    /// Multiplies `a` by a learnable scalar held in a `(1, 1, 1, 1)` tensor.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let ts = self.try_tensor(s)?;
        if !ts.shape().is_scalar() {
            return shape_err(format!("mul_scalar: factor has shape {}, expected scalar", ts.shape()));
        }
        let k = ts.data()[0];
        let out = self.try_tensor(a)?.map(|v| v * k);
        Ok(self.record_real(
            "mul_scalar",
            &[a, s],
            out,
            Box::new(|g, ins, _| {
                let g = g.as_real()?;
                let a = ins[0].as_real()?;
                let k = ins[1].as_real()?.data()[0];
                let ds: T = g.data().iter().zip(a.data()).map(|(&g, &a)| g * a).sum();
                Ok(vec![real_grad(g.map(|v| v * k)), real_grad(Tensor::scalar(ds))])
            }),
        ))
    }

    /// Multiplies every plane of `x` by the matching per-channel factor in
    /// `gate`, shaped `(n, c, 1, 1)`.
    pub fn mul_channel(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (tx, tg) = (self.try_tensor(x)?, self.try_tensor(gate)?);
        let (sx, sg) = (tx.shape(), tg.shape());
        if sg != Shape::new(sx.n, sx.c, 1, 1) {
            return shape_err(format!("mul_channel: gate {sg} does not match features {sx}"));
        }
        let plane = sx.plane();
        let mut out = tx.clone().with_requires_grad(false);
        for (chunk, &k) in out.data_mut().chunks_mut(plane.max(1)).zip(tg.data()) {
            chunk.iter_mut().for_each(|v| *v *= k);
        }
        Ok(self.record_real(
            "mul_channel",
            &[x, gate],
            out,
            Box::new(move |g, ins, _| {
                let g = g.as_real()?;
                let (x, gate) = (ins[0].as_real()?, ins[1].as_real()?);
                let mut dx = g.clone();
                let mut dg = Tensor::zeros(gate.shape());
                for (i, &k) in gate.data().iter().enumerate() {
                    let range = i * plane..(i + 1) * plane;
                    dx.data_mut()[range.clone()].iter_mut().for_each(|v| *v *= k);
                    dg.data_mut()[i] =
                        g.data()[range.clone()].iter().zip(&x.data()[range]).map(|(&a, &b)| a * b).sum();
                }
                Ok(vec![real_grad(dx), real_grad(dg)])
            }),
        ))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_channels of an empty list");
        };
        let s0 = self.try_tensor(first)?.shape();
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.try_tensor(p)?.shape();
            if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
                return shape_err(format!("concat_channels: {s} incompatible with {s0}"));
            }
            sizes.push(s.c);
        }
        let total: usize = sizes.iter().sum();
        let out_shape = s0.with_c(total);
        let plane = s0.plane();
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..s0.n {
            for &p in parts {
                let t = self.tensor(p);
                data.extend_from_slice(t.batch_slice(n));
            }
        }
        let out = Tensor::from_values(out_shape, data)?;
        Ok(self.record_real(
            "concat_channels",
            parts,
            out,
            Box::new(move |g, _, _| {
                let g = g.as_real()?;
                let n_batch = g.shape().n;
                let mut grads: Vec<Vec<T>> = sizes.iter().map(|&c| Vec::with_capacity(n_batch * c * plane)).collect();
                for n in 0..n_batch {
                    let slab = g.batch_slice(n);
                    let mut off = 0;
                    for (gi, &c) in grads.iter_mut().zip(&sizes) {
                        gi.extend_from_slice(&slab[off..off + c * plane]);
                        off += c * plane;
                    }
                }
                grads
                    .into_iter()
                    .zip(&sizes)
                    .map(|(d, &c)| Ok(real_grad(Tensor::from_values(out_shape.with_c(c), d)?)))
                    .collect()
            }),
        ))
    }

    /// Splits along channels into consecutive groups of the given sizes.
    pub fn split_channels(&mut self, a: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let s = self.try_tensor(a)?.shape();
        if sizes.iter().sum::<usize>() != s.c {
            return shape_err(format!("split_channels: sizes {sizes:?} do not sum to {} channels", s.c));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &c in sizes {
            out.push(self.slice_channels(a, start, c)?);
            start += c;
        }
        Ok(out)
    }

    /// Channels `start..start + count` of `a`.
    pub fn slice_channels(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let t = self.try_tensor(a)?;
        let s = t.shape();
        if start + count > s.c {
            return shape_err(format!("slice_channels {start}..{} out of {} channels", start + count, s.c));
        }
        let plane = s.plane();
        let mut data = Vec::with_capacity(s.n * count * plane);
        for n in 0..s.n {
            let slab = t.batch_slice(n);
            data.extend_from_slice(&slab[start * plane..(start + count) * plane]);
        }
        let out = Tensor::from_values(s.with_c(count), data)?;
        Ok(self.record_real(
            "slice_channels",
            &[a],
            out,
            Box::new(move |g, _, _| {
                let g = g.as_real()?;
                let mut d = Tensor::zeros(s);
                let len = count * plane;
                for n in 0..s.n {
                    let dst = (n * s.c + start) * plane;
                    d.data_mut()[dst..dst + len].copy_from_slice(&g.data()[n * len..(n + 1) * len]);
                }
                Ok(vec![real_grad(d)])
            }),
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Shape>) -> Result<Var> {
        let t = self.try_tensor(a)?;
        let from = t.shape();
        let out = t.reshape(shape)?;
        Ok(self.record_real(
            "reshape",
            &[a],
            out,
            Box::new(move |g, _, _| Ok(vec![real_grad(g.as_real()?.reshape(from)?)])),
        ))
    }

    /// Sum of all elements as a scalar tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        self.weighted_sum_impl(a, None, "sum").expect("sum of a real tensor")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.try_tensor(a)?.len().max(1);
        let s = self.sum(a);
        Ok(self.scale(s, T::one() / T::from_usize_lossy(n)))
    }

    /// `Σ weights ⊙ a` with constant weights; projects any output onto a scalar.
    pub fn weighted_sum(&mut self, a: Var, weights: &Tensor<T>) -> Result<Var> {
        self.weighted_sum_impl(a, Some(weights.clone()), "weighted_sum")
    }

    fn weighted_sum_impl(&mut self, a: Var, weights: Option<Tensor<T>>, name: &'static str) -> Result<Var> {
        let t = self.try_tensor(a)?;
        let total = match &weights {
            Some(w) => {
                ensure_same_shape(name, t.shape(), w.shape())?;
                t.data().iter().zip(w.data()).map(|(&x, &y)| x * y).sum()
            }
            None => t.sum(),
        };
        let shape = t.shape();
        Ok(self.record_real(
            name,
            &[a],
            Tensor::scalar(total),
            Box::new(move |g, _, _| {
                let k = g.as_real()?.data()[0];
                let d = match &weights {
                    Some(w) => w.map(|v| v * k),
                    None => Tensor::full(shape, k),
                };
                Ok(vec![real_grad(d)])
            }),
        ))
    }
}
