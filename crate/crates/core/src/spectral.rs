//! 2-D discrete Fourier transforms over the spatial axes of a tensor.
//!
//! Convention: the forward transform is unnormalized, the inverse carries the
//! `1 / (h * w)` factor. Transforms run per `(batch, channel)` plane, rows
//! first and then columns, with an iterative radix-2 Cooley-Tukey kernel.
//!
//! Gradients treat a complex value as the pair `(re, im)` of independent reals,
//! so the backward rule of a linear map `A` is its adjoint `A^H`.

use num_complex::Complex;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Value, Var};
use crate::ops::real_grad;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Complex array with the same `(n, c, h, w)` layout as [`Tensor`].
#[derive(Clone, PartialEq)]
pub struct Spectrum<T> {
    shape: Shape,
    re: Vec<T>,
    im: Vec<T>,
}

impl<T: Scalar> Spectrum<T> {
    pub fn zeros(shape: impl Into<Shape>) -> Self {
        let shape = shape.into();
        Spectrum { shape, re: vec![T::zero(); shape.numel()], im: vec![T::zero(); shape.numel()] }
    }

    pub fn new(shape: impl Into<Shape>, re: Vec<T>, im: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if re.len() != shape.numel() || im.len() != shape.numel() {
            return Err(Error::Construction(format!(
                "spectrum parts of length {}/{} for shape {shape}",
                re.len(),
                im.len()
            )));
        }
        Ok(Spectrum { shape, re, im })
    }

    /// Spectrum with every bin set to `z`.
    pub fn full(shape: impl Into<Shape>, z: Complex<T>) -> Self {
        let shape = shape.into();
        Spectrum { shape, re: vec![z.re; shape.numel()], im: vec![z.im; shape.numel()] }
    }

    pub fn from_real(t: &Tensor<T>) -> Self {
        Spectrum { shape: t.shape(), re: t.data().to_vec(), im: vec![T::zero(); t.len()] }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn re(&self) -> &[T] {
        &self.re
    }

    pub fn im(&self) -> &[T] {
        &self.im
    }

    pub fn parts_mut(&mut self) -> (&mut [T], &mut [T]) {
        (&mut self.re, &mut self.im)
    }

    pub fn at(&self, n: usize, c: usize, u: usize, v: usize) -> Complex<T> {
        let i = self.shape.index(n, c, u, v);
        Complex::new(self.re[i], self.im[i])
    }

    pub fn real_part(&self) -> Tensor<T> {
        Tensor::from_values(self.shape, self.re.clone()).expect("same shape")
    }

    pub fn imag_part(&self) -> Tensor<T> {
        Tensor::from_values(self.shape, self.im.clone()).expect("same shape")
    }

    pub fn scaled(&self, k: T) -> Self {
        Spectrum {
            shape: self.shape,
            re: self.re.iter().map(|&v| v * k).collect(),
            im: self.im.iter().map(|&v| v * k).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Spectrum<T>) -> T {
        assert_eq!(self.shape, other.shape);
        let d = |a: &[T], b: &[T]| a.iter().zip(b).fold(T::zero(), |m, (&x, &y)| m.max((x - y).abs()));
        d(&self.re, &other.re).max(d(&self.im, &other.im))
    }
}

impl<T> std::fmt::Debug for Spectrum<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Spectrum").field("shape", &self.shape).finish_non_exhaustive()
    }
}

fn ensure_pow2(shape: Shape) -> Result<()> {
    if !shape.h.is_power_of_two() || !shape.w.is_power_of_two() {
        return shape_err(format!(
            "2-D FFT needs power-of-two spatial dims, got {}x{}; pad the feature map upstream",
            shape.h, shape.w
        ));
    }
    Ok(())
}

/// In-place radix-2 transform of one contiguous line. The twiddle table
/// (`exp(∓2πi k/n)`, k < n/2) fixes the direction.
fn fft_line<T: Scalar>(buf: &mut [Complex<T>], twiddles: &[Complex<T>]) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let w = twiddles[k * step];
                let a = buf[start + k];
                let b = buf[start + k + half] * w;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

fn twiddles<T: Scalar>(n: usize, sign: f64) -> Vec<Complex<T>> {
    (0..n / 2)
        .map(|k| {
            let theta = sign * 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            Complex::new(T::lit(theta.cos()), T::lit(theta.sin()))
        })
        .collect()
}

/// Unnormalized 2-D transform of every plane; `inverse` flips the kernel sign.
fn transform_planes<T: Scalar>(shape: Shape, re: &[T], im: &[T], inverse: bool) -> Result<Spectrum<T>> {
    ensure_pow2(shape)?;
    let sign = if inverse { 1.0 } else { -1.0 };
    let (h, w) = (shape.h, shape.w);
    let tw_row = twiddles::<T>(w, sign);
    let tw_col = twiddles::<T>(h, sign);
    let mut out_re = vec![T::zero(); shape.numel()];
    let mut out_im = vec![T::zero(); shape.numel()];
    let mut plane: Vec<Complex<T>> = vec![Complex::new(T::zero(), T::zero()); h * w];
    let mut column: Vec<Complex<T>> = vec![Complex::new(T::zero(), T::zero()); h];
    for p in 0..shape.n * shape.c {
        let base = p * h * w;
        for i in 0..h * w {
            plane[i] = Complex::new(re[base + i], im[base + i]);
        }
        for row in plane.chunks_mut(w) {
            fft_line(row, &tw_row);
        }
        for x in 0..w {
            for y in 0..h {
                column[y] = plane[y * w + x];
            }
            fft_line(&mut column, &tw_col);
            for y in 0..h {
                plane[y * w + x] = column[y];
            }
        }
        for i in 0..h * w {
            out_re[base + i] = plane[i].re;
            out_im[base + i] = plane[i].im;
        }
    }
    Spectrum::new(shape, out_re, out_im)
}

/// Forward transform of a real tensor.
pub fn fft2<T: Scalar>(x: &Tensor<T>) -> Result<Spectrum<T>> {
    let zeros = vec![T::zero(); x.len()];
    transform_planes(x.shape(), x.data(), &zeros, false)
}

/// Forward transform of a complex array.
pub fn fft2_complex<T: Scalar>(s: &Spectrum<T>) -> Result<Spectrum<T>> {
    transform_planes(s.shape, &s.re, &s.im, false)
}

/// Normalized inverse transform.
pub fn ifft2_complex<T: Scalar>(s: &Spectrum<T>) -> Result<Spectrum<T>> {
    let out = transform_planes(s.shape, &s.re, &s.im, true)?;
    Ok(out.scaled(T::one() / T::from_usize_lossy(s.shape.plane())))
}

/// Real part of the normalized inverse transform.
pub fn ifft2<T: Scalar>(s: &Spectrum<T>) -> Result<Tensor<T>> {
    Ok(ifft2_complex(s)?.real_part())
}

/// Unnormalized inverse, i.e. the adjoint of [`fft2_complex`].
fn fft2_adjoint<T: Scalar>(s: &Spectrum<T>) -> Result<Spectrum<T>> {
    transform_planes(s.shape, &s.re, &s.im, true)
}

/// How a real factor lines up with a spectrum in [`Graph::cmul`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum FactorLayout {
    PerChannel,
    PerBin,
}

fn factor_layout(spec: Shape, m: Shape) -> Result<FactorLayout> {
    if m == spec {
        Ok(FactorLayout::PerBin)
    } else if m == Shape::new(spec.n, spec.c, 1, 1) {
        Ok(FactorLayout::PerChannel)
    } else {
        shape_err(format!("cmul: real factor {m} fits neither {spec} nor per-channel layout"))
    }
}

fn complex_grad<T>(s: Spectrum<T>) -> Option<Value<T>> {
    Some(Value::Complex(s))
}

impl<T: Scalar> Graph<T> {
    pub fn fft2(&mut self, x: Var) -> Result<Var> {
        let out = fft2(self.try_tensor(x)?)?;
        Ok(self.record(
            "fft2",
            &[x],
            Value::Complex(out),
            Box::new(|g, _, _| Ok(vec![real_grad(fft2_adjoint(g.as_complex()?)?.real_part())])),
        ))
    }

    pub fn ifft2_complex(&mut self, s: Var) -> Result<Var> {
        let out = ifft2_complex(self.try_spectrum(s)?)?;
        Ok(self.record(
            "ifft2_complex",
            &[s],
            Value::Complex(out),
            Box::new(|g, _, _| {
                let g = g.as_complex()?;
                let inv_n = T::one() / T::from_usize_lossy(g.shape().plane());
                Ok(vec![complex_grad(fft2_complex(g)?.scaled(inv_n))])
            }),
        ))
    }

    /// Real part of the inverse transform.
    pub fn ifft2(&mut self, s: Var) -> Result<Var> {
        let out = ifft2(self.try_spectrum(s)?)?;
        Ok(self.record(
            "ifft2",
            &[s],
            Value::Real(out),
            Box::new(|g, _, _| {
                let g = g.as_real()?;
                let inv_n = T::one() / T::from_usize_lossy(g.shape().plane());
                Ok(vec![complex_grad(fft2(g)?.scaled(inv_n))])
            }),
        ))
    }

    /// Scales every bin by a real factor, either per channel `(n, c, 1, 1)` or
    /// per bin `(n, c, h, w)`.
    pub fn cmul(&mut self, s: Var, m: Var) -> Result<Var> {
        let spec = self.try_spectrum(s)?;
        let factor = self.try_tensor(m)?;
        let layout = factor_layout(spec.shape(), factor.shape())?;
        let shape = spec.shape();
        let plane = shape.plane();
        let fidx = move |i: usize| match layout {
            FactorLayout::PerBin => i,
            FactorLayout::PerChannel => i / plane,
        };
        let mut out = spec.clone();
        {
            let f = factor.data();
            let (re, im) = out.parts_mut();
            for i in 0..re.len() {
                re[i] *= f[fidx(i)];
                im[i] *= f[fidx(i)];
            }
        }
        Ok(self.record(
            "cmul",
            &[s, m],
            Value::Complex(out),
            Box::new(move |g, ins, _| {
                let g = g.as_complex()?;
                let spec = ins[0].as_complex()?;
                let factor = ins[1].as_real()?;
                let f = factor.data();
                let mut ds = g.clone();
                let mut dm = Tensor::zeros(factor.shape());
                {
                    let (dre, dim) = ds.parts_mut();
                    let dmd = dm.data_mut();
                    for i in 0..dre.len() {
                        let k = fidx(i);
                        dmd[k] += g.re()[i] * spec.re()[i] + g.im()[i] * spec.im()[i];
                        dre[i] *= f[k];
                        dim[i] *= f[k];
                    }
                }
                Ok(vec![complex_grad(ds), real_grad(dm)])
            }),
        ))
    }

    /// Bin-wise complex product of two spectra.
    pub fn cmul_spec(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.try_spectrum(a)?, self.try_spectrum(b)?);
        if sa.shape() != sb.shape() {
            return shape_err(format!("cmul_spec: shapes {} and {} differ", sa.shape(), sb.shape()));
        }
        let prod = |x: &Spectrum<T>, y: &Spectrum<T>, conj_y: bool| {
            let mut re = Vec::with_capacity(x.re.len());
            let mut im = Vec::with_capacity(x.re.len());
            for i in 0..x.re.len() {
                let yi = if conj_y { -y.im[i] } else { y.im[i] };
                let z = Complex::new(x.re[i], x.im[i]) * Complex::new(y.re[i], yi);
                re.push(z.re);
                im.push(z.im);
            }
            Spectrum { shape: x.shape, re, im }
        };
        let out = prod(sa, sb, false);
        Ok(self.record(
            "cmul_spec",
            &[a, b],
            Value::Complex(out),
            Box::new(move |g, ins, _| {
                let g = g.as_complex()?;
                let (a, b) = (ins[0].as_complex()?, ins[1].as_complex()?);
                Ok(vec![complex_grad(prod(g, b, true)), complex_grad(prod(g, a, true))])
            }),
        ))
    }

    pub fn real_part(&mut self, s: Var) -> Result<Var> {
        let out = self.try_spectrum(s)?.real_part();
        Ok(self.record(
            "real_part",
            &[s],
            Value::Real(out),
            Box::new(|g, _, _| Ok(vec![complex_grad(Spectrum::from_real(g.as_real()?))])),
        ))
    }

    pub fn imag_part(&mut self, s: Var) -> Result<Var> {
        let out = self.try_spectrum(s)?.imag_part();
        Ok(self.record(
            "imag_part",
            &[s],
            Value::Real(out),
            Box::new(|g, _, _| {
                let g = g.as_real()?;
                let zeros = vec![T::zero(); g.len()];
                Ok(vec![complex_grad(Spectrum::new(g.shape(), zeros, g.data().to_vec())?)])
            }),
        ))
    }

    /// Elementwise modulus `sqrt(re² + im²)`.
    pub fn magnitude(&mut self, s: Var) -> Result<Var> {
        let spec = self.try_spectrum(s)?;
        let data = spec.re.iter().zip(&spec.im).map(|(&r, &i)| r.hypot(i)).collect();
        let out = Tensor::from_values(spec.shape(), data)?;
        Ok(self.record(
            "magnitude",
            &[s],
            Value::Real(out),
            Box::new(|g, ins, out| {
                let g = g.as_real()?;
                let spec = ins[0].as_complex()?;
                let mag = out.as_real()?;
                let eps = T::lit(MAGNITUDE_EPS);
                let mut ds = Spectrum::zeros(spec.shape());
                {
                    let (dre, dim) = ds.parts_mut();
                    for i in 0..dre.len() {
                        let k = g.data()[i] / mag.data()[i].max(eps);
                        dre[i] = k * spec.re[i];
                        dim[i] = k * spec.im[i];
                    }
                }
                Ok(vec![complex_grad(ds)])
            }),
        ))
    }
}

/// Lower clamp on `|z|` in the magnitude backward rule.
pub const MAGNITUDE_EPS: f64 = 1e-12;
