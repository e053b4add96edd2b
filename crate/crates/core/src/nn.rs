//! Differentiable neural primitives: convolution, activations, pooling,
//! resampling and the Focus space-to-channel rearrangement.

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::ops::real_grad;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Geometry of a 2-D convolution. Weights are `(out, in, kh, kw)` for dense
/// and `(c, 1, kh, kw)` for depthwise convolutions; bias is `(1, out, 1, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub depthwise: bool,
}

impl ConvSpec {
    pub fn dense(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec { in_channels, out_channels, kernel: (kernel, kernel), stride, padding, depthwise: false }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::dense(in_channels, out_channels, 1, 1, 0)
    }

    /// Shape-preserving odd kernel, stride 1.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self::dense(in_channels, out_channels, kernel, 1, kernel / 2)
    }

    pub fn depthwise(channels: usize, kernel: usize, padding: usize) -> Self {
        ConvSpec {
            in_channels: channels,
            out_channels: channels,
            kernel: (kernel, kernel),
            stride: 1,
            padding,
            depthwise: true,
        }
    }

    pub fn weight_shape(&self) -> Shape {
        let (kh, kw) = self.kernel;
        if self.depthwise {
            Shape::new(self.out_channels, 1, kh, kw)
        } else {
            Shape::new(self.out_channels, self.in_channels, kh, kw)
        }
    }

    pub fn bias_shape(&self) -> Shape {
        Shape::new(1, self.out_channels, 1, 1)
    }

    /// Number of inputs feeding one output element.
    pub fn fan_in(&self) -> usize {
        let (kh, kw) = self.kernel;
        if self.depthwise {
            kh * kw
        } else {
            self.in_channels * kh * kw
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if self.stride == 0 || ph < kh || pw < kw {
            return shape_err(format!("conv {kh}x{kw}/s{} does not fit a padded {ph}x{pw} input", self.stride));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.depthwise && self.in_channels != self.out_channels {
            return shape_err("depthwise convolution needs in_channels == out_channels");
        }
        if self.stride == 0 {
            return shape_err("convolution stride must be positive");
        }
        Ok(())
    }
}

/// Output positions `o` along one axis whose input tap `o * stride + k - pad`
/// lands inside `0..len`.
fn valid_range(out_len: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let off = k as isize - pad as isize;
    let s = stride as isize;
    // o * s + off >= 0
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    // o * s + off <= len - 1
    let hi_excl = if (len as isize - 1 - off) < 0 { 0 } else { (len as isize - 1 - off) / s + 1 };
    let lo = lo.max(0) as usize;
    let hi = (hi_excl as usize).min(out_len);
    (lo, hi.max(lo))
}

struct ConvPlan {
    spec: ConvSpec,
    in_shape: Shape,
    out_shape: Shape,
}

impl ConvPlan {
    fn new(spec: ConvSpec, x: Shape, w: Shape) -> Result<Self> {
        spec.validate()?;
        if x.c != spec.in_channels {
            return shape_err(format!("conv2d expects {} input channels, got {}", spec.in_channels, x.c));
        }
        if w != spec.weight_shape() {
            return shape_err(format!("conv2d weight {w} does not match {}", spec.weight_shape()));
        }
        let (oh, ow) = spec.output_hw(x.h, x.w)?;
        Ok(ConvPlan { spec, in_shape: x, out_shape: Shape::new(x.n, spec.out_channels, oh, ow) })
    }

    /// Visits every (output plane, input plane, weight index) triple, and for
    /// each kernel tap the matching rows.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, (usize, usize), usize)) {
        // f(out_plane_base, in_plane_base, weight_index, oy, iy, (ox_lo, ox_hi), ix_of_ox_lo)
        let s = &self.spec;
        let (kh, kw) = s.kernel;
        let (ih, iw) = (self.in_shape.h, self.in_shape.w);
        let (oh, ow) = (self.out_shape.h, self.out_shape.w);
        let x_ranges: Vec<(usize, usize)> = (0..kw).map(|kx| valid_range(ow, iw, kx, s.stride, s.padding)).collect();
        let y_ranges: Vec<(usize, usize)> = (0..kh).map(|ky| valid_range(oh, ih, ky, s.stride, s.padding)).collect();
        for n in 0..self.in_shape.n {
            for oc in 0..s.out_channels {
                let out_base = (n * s.out_channels + oc) * oh * ow;
                let in_channels: Box<dyn Iterator<Item = usize>> =
                    if s.depthwise { Box::new(std::iter::once(oc)) } else { Box::new(0..s.in_channels) };
                for ic in in_channels {
                    let in_base = (n * self.in_shape.c + ic) * ih * iw;
                    let w_ic = if s.depthwise { 0 } else { ic };
                    for ky in 0..kh {
                        let (y0, y1) = y_ranges[ky];
                        for kx in 0..kw {
                            let (x0, x1) = x_ranges[kx];
                            if x0 >= x1 {
                                continue;
                            }
                            let widx = ((oc * (if s.depthwise { 1 } else { s.in_channels }) + w_ic) * kh + ky) * kw + kx;
                            let ix0 = x0 * s.stride + kx - s.padding;
                            for oy in y0..y1 {
                                let iy = oy * s.stride + ky - s.padding;
                                f(out_base, in_base, widx, oy, iy, (x0, x1), ix0);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, spec: ConvSpec) -> Result<Tensor<T>> {
    let plan = ConvPlan::new(spec, x.shape(), w.shape())?;
    let os = plan.out_shape;
    let mut out = Tensor::zeros(os);
    if let Some(b) = b {
        if b.shape() != spec.bias_shape() {
            return shape_err(format!("conv2d bias {} does not match {}", b.shape(), spec.bias_shape()));
        }
        for (i, chunk) in out.data_mut().chunks_mut(os.plane().max(1)).enumerate() {
            let v = b.data()[i % spec.out_channels];
            chunk.iter_mut().for_each(|o| *o = v);
        }
    }
    let (xd, wd) = (x.data(), w.data());
    let (iw, ow, stride) = (x.shape().w, os.w, spec.stride);
    let od = out.data_mut();
    plan.for_each_tap(|ob, ib, widx, oy, iy, (x0, x1), ix0| {
        let wv = wd[widx];
        let orow = &mut od[ob + oy * ow + x0..ob + oy * ow + x1];
        let irow = &xd[ib + iy * iw + ix0..];
        if stride == 1 {
            for (o, &i) in orow.iter_mut().zip(irow) {
                *o += wv * i;
            }
        } else {
            for (o, &i) in orow.iter_mut().zip(irow.iter().step_by(stride)) {
                *o += wv * i;
            }
        }
    });
    Ok(out)
}

/// Gradients of [`conv2d_forward`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: ConvSpec,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let plan = ConvPlan::new(spec, x.shape(), w.shape())?;
    let os = plan.out_shape;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(spec.bias_shape());
    for (i, chunk) in grad_out.data().chunks(os.plane().max(1)).enumerate() {
        db.data_mut()[i % spec.out_channels] += chunk.iter().copied().sum();
    }
    let (xd, wd, gd) = (x.data(), w.data(), grad_out.data());
    let (iw, ow, stride) = (x.shape().w, os.w, spec.stride);
    let dxd = dx.data_mut();
    let dwd = dw.data_mut();
    plan.for_each_tap(|ob, ib, widx, oy, iy, (x0, x1), ix0| {
        let wv = wd[widx];
        let grow = &gd[ob + oy * ow + x0..ob + oy * ow + x1];
        let start = ib + iy * iw + ix0;
        let mut acc = T::zero();
        if stride == 1 {
            let irow = &xd[start..start + grow.len()];
            let drow = &mut dxd[start..start + grow.len()];
            for ((&g, &i), d) in grow.iter().zip(irow).zip(drow.iter_mut()) {
                acc += g * i;
                *d += g * wv;
            }
        } else {
            for (k, &g) in grow.iter().enumerate() {
                let j = start + k * stride;
                acc += g * xd[j];
                dxd[j] += g * wv;
            }
        }
        dwd[widx] += acc;
    });
    Ok((dx, dw, db))
}

/// Explicit per-side padding for pooling windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Padding {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Padding {
    pub const fn uniform(p: usize) -> Self {
        Padding { top: p, left: p, bottom: p, right: p }
    }

    /// Pads only the bottom and right edges.
    pub const fn trailing(p: usize) -> Self {
        Padding { top: 0, left: 0, bottom: p, right: p }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl PoolSpec {
    pub fn new(kernel: usize, stride: usize, padding: Padding) -> Self {
        PoolSpec { kernel, stride, padding }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let p = self.padding;
        let (ph, pw) = (h + p.top + p.bottom, w + p.left + p.right);
        if self.stride == 0 || self.kernel == 0 || ph < self.kernel || pw < self.kernel {
            return shape_err(format!("pool k{}/s{} does not fit a padded {ph}x{pw} input", self.kernel, self.stride));
        }
        Ok(((ph - self.kernel) / self.stride + 1, (pw - self.kernel) / self.stride + 1))
    }

    /// In-bounds input coordinates covered by output position `(oy, ox)`.
    fn window(&self, oy: usize, ox: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let y0 = (oy * s) as isize - p.top as isize;
        let x0 = (ox * s) as isize - p.left as isize;
        (0..k).flat_map(move |dy| (0..k).map(move |dx| (y0 + dy as isize, x0 + dx as isize))).filter_map(
            move |(y, x)| (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w).then_some((y as usize, x as usize)),
        )
    }
}

fn unary<T: Scalar>(
    g: &mut Graph<T>,
    name: &'static str,
    x: Var,
    f: impl Fn(T) -> T,
    df: fn(T) -> T,
) -> Result<Var> {
    let out = g.try_tensor(x)?.map(f);
    Ok(g.record_real(
        name,
        &[x],
        out,
        Box::new(move |gr, ins, _| {
            let gr = gr.as_real()?;
            let x = ins[0].as_real()?;
            let data = gr.data().iter().zip(x.data()).map(|(&g, &v)| g * df(v)).collect();
            Ok(vec![real_grad(Tensor::from_values(x.shape(), data)?)])
        }),
    ))
}

const GELU_CUBIC: f64 = 0.044715;

/// Tanh approximation of GELU.
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let u = k * (x + T::lit(GELU_CUBIC) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let c = T::lit(GELU_CUBIC);
    let t = (k * (x + c * x * x * x)).tanh();
    let half = T::lit(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * x * x)
}

pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn sigmoid_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid_scalar(x);
    s * (T::one() - s)
}

/// Precomputed linear interpolation taps along one axis.
#[derive(Clone, Copy, Debug)]
struct Lerp<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

/// Half-pixel source coordinates (align-corners = false), clamped to borders.
fn upsample_taps<T: Scalar>(in_len: usize, out_len: usize) -> Vec<Lerp<T>> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            Lerp { lo, hi, frac: T::lit(src - lo as f64) }
        })
        .collect()
}

/// Inverse of [`Graph::focus_slice`] on plain tensors.
pub fn unfocus<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.c % 4 != 0 {
        return shape_err(format!("unfocus needs a multiple of 4 channels, got {}", s.c));
    }
    let c = s.c / 4;
    let mut out = Tensor::zeros(Shape::new(s.n, c, s.h * 2, s.w * 2));
    for n in 0..s.n {
        for (group, (py, px)) in FOCUS_ORDER.iter().enumerate() {
            for ch in 0..c {
                for y in 0..s.h {
                    for xx in 0..s.w {
                        out.set(n, ch, 2 * y + py, 2 * xx + px, x.at(n, group * c + ch, y, xx));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Parity sub-grids `(row parity, column parity)` in channel-group order.
pub const FOCUS_ORDER: [(usize, usize); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];

impl<T: Scalar> Graph<T> {
    /// 2-D convolution; `bias` may be omitted.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = {
            let b = bias.map(|b| self.try_tensor(b)).transpose()?;
            conv2d_forward(self.try_tensor(x)?, self.try_tensor(weight)?, b, spec)?
        };
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.record_real(
            if spec.depthwise { "dwconv2d" } else { "conv2d" },
            &inputs,
            out,
            Box::new(move |g, ins, _| {
                let (dx, dw, db) = conv2d_backward(ins[0].as_real()?, ins[1].as_real()?, g.as_real()?, spec)?;
                let mut grads = vec![real_grad(dx), real_grad(dw)];
                if has_bias {
                    grads.push(real_grad(db));
                }
                Ok(grads)
            }),
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        unary(self, "gelu", x, gelu_scalar, gelu_grad).expect("gelu of a real tensor")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        unary(self, "sigmoid", x, sigmoid_scalar, sigmoid_grad).expect("sigmoid of a real tensor")
    }

    /// Window mean; padded cells count toward the divisor `k * k`.
    pub fn avg_pool(&mut self, x: Var, spec: PoolSpec) -> Result<Var> {
        let t = self.try_tensor(x)?;
        let s = t.shape();
        let (oh, ow) = spec.output_hw(s.h, s.w)?;
        let os = s.with_hw(oh, ow);
        let inv = T::one() / T::from_usize_lossy(spec.kernel * spec.kernel);
        let mut out = Tensor::zeros(os);
        for p in 0..s.n * s.c {
            let src = &t.data()[p * s.plane()..(p + 1) * s.plane()];
            for oy in 0..oh {
                for ox in 0..ow {
                    let acc: T = spec.window(oy, ox, s.h, s.w).map(|(y, x)| src[y * s.w + x]).sum();
                    out.data_mut()[p * os.plane() + oy * ow + ox] = acc * inv;
                }
            }
        }
        Ok(self.record_real(
            "avg_pool",
            &[x],
            out,
            Box::new(move |g, _, _| {
                let g = g.as_real()?;
                let mut d = Tensor::zeros(s);
                for p in 0..s.n * s.c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g.data()[p * os.plane() + oy * ow + ox] * inv;
                            for (y, x) in spec.window(oy, ox, s.h, s.w) {
                                d.data_mut()[p * s.plane() + y * s.w + x] += gv;
                            }
                        }
                    }
                }
                Ok(vec![real_grad(d)])
            }),
        ))
    }

    /// Window maximum over in-bounds cells; the gradient goes to the first
    /// maximal cell in row-major window order.
    pub fn max_pool(&mut self, x: Var, spec: PoolSpec) -> Result<Var> {
        let t = self.try_tensor(x)?;
        let s = t.shape();
        let (oh, ow) = spec.output_hw(s.h, s.w)?;
        let os = s.with_hw(oh, ow);
        let mut out = Tensor::zeros(os);
        let mut argmax = vec![0usize; os.numel()];
        for p in 0..s.n * s.c {
            let src = &t.data()[p * s.plane()..(p + 1) * s.plane()];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best: Option<(T, usize)> = None;
                    for (y, x) in spec.window(oy, ox, s.h, s.w) {
                        let v = src[y * s.w + x];
                        if best.map_or(true, |(b, _)| v > b) {
                            best = Some((v, y * s.w + x));
                        }
                    }
                    let (v, i) = best.ok_or_else(|| {
                        crate::Error::Shape(format!("max_pool window at ({oy}, {ox}) lies entirely in padding"))
                    })?;
                    let o = p * os.plane() + oy * ow + ox;
                    out.data_mut()[o] = v;
                    argmax[o] = p * s.plane() + i;
                }
            }
        }
        Ok(self.record_real(
            "max_pool",
            &[x],
            out,
            Box::new(move |g, _, _| {
                let g = g.as_real()?;
                let mut d = Tensor::zeros(s);
                for (o, &i) in argmax.iter().enumerate() {
                    d.data_mut()[i] += g.data()[o];
                }
                Ok(vec![real_grad(d)])
            }),
        ))
    }

    /// Per-channel spatial mean, shaped `(n, c, 1, 1)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.try_tensor(x)?;
        let s = t.shape();
        if s.plane() == 0 {
            return shape_err("global_avg_pool of an empty plane");
        }
        let inv = T::one() / T::from_usize_lossy(s.plane());
        let data = t.data().chunks(s.plane()).map(|c| c.iter().copied().sum::<T>() * inv).collect();
        let out = Tensor::from_values(Shape::new(s.n, s.c, 1, 1), data)?;
        Ok(self.record_real(
            "global_avg_pool",
            &[x],
            out,
            Box::new(move |g, _, _| {
                let g = g.as_real()?;
                let mut d = Tensor::zeros(s);
                for (chunk, &gv) in d.data_mut().chunks_mut(s.plane()).zip(g.data()) {
                    chunk.iter_mut().for_each(|v| *v = gv * inv);
                }
                Ok(vec![real_grad(d)])
            }),
        ))
    }

    /// Bilinear resize with half-pixel centers and border clamping.
    pub fn bilinear_upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let t = self.try_tensor(x)?;
        let s = t.shape();
        if out_h == 0 || out_w == 0 || s.h == 0 || s.w == 0 {
            return shape_err(format!("bilinear_upsample {}x{} -> {out_h}x{out_w}", s.h, s.w));
        }
        let ys = upsample_taps::<T>(s.h, out_h);
        let xs = upsample_taps::<T>(s.w, out_w);
        let os = s.with_hw(out_h, out_w);
        let mut out = Tensor::zeros(os);
        for p in 0..s.n * s.c {
            let src = &t.data()[p * s.plane()..(p + 1) * s.plane()];
            for (oy, ly) in ys.iter().enumerate() {
                for (ox, lx) in xs.iter().enumerate() {
                    let top = src[ly.lo * s.w + lx.lo] * (T::one() - lx.frac) + src[ly.lo * s.w + lx.hi] * lx.frac;
                    let bot = src[ly.hi * s.w + lx.lo] * (T::one() - lx.frac) + src[ly.hi * s.w + lx.hi] * lx.frac;
                    out.data_mut()[p * os.plane() + oy * out_w + ox] = top * (T::one() - ly.frac) + bot * ly.frac;
                }
            }
        }
        Ok(self.record_real(
            "bilinear_upsample",
            &[x],
            out,
            Box::new(move |g, _, _| {
                let g = g.as_real()?;
                let mut d = Tensor::zeros(s);
                let one = T::one();
                for p in 0..s.n * s.c {
                    let dst = &mut d.data_mut()[p * s.plane()..(p + 1) * s.plane()];
                    for (oy, ly) in ys.iter().enumerate() {
                        for (ox, lx) in xs.iter().enumerate() {
                            let gv = g.data()[p * os.plane() + oy * out_w + ox];
                            dst[ly.lo * s.w + lx.lo] += gv * (one - ly.frac) * (one - lx.frac);
                            dst[ly.lo * s.w + lx.hi] += gv * (one - ly.frac) * lx.frac;
                            dst[ly.hi * s.w + lx.lo] += gv * ly.frac * (one - lx.frac);
                            dst[ly.hi * s.w + lx.hi] += gv * ly.frac * lx.frac;
                        }
                    }
                }
                Ok(vec![real_grad(d)])
            }),
        ))
    }

    /// Squeeze-and-excitation gate: `x * sigmoid(conv1x1(GAP(source)))` per
    /// channel. `source` is usually `x` itself.
    pub fn channel_attention(&mut self, x: Var, source: Var, weight: Var, bias: Var) -> Result<Var> {
        let c_src = self.try_tensor(source)?.shape().c;
        let c_x = self.try_tensor(x)?.shape().c;
        let pooled = self.global_avg_pool(source)?;
        let logits = self.conv2d(pooled, weight, Some(bias), ConvSpec::pointwise(c_src, c_x))?;
        let gate = self.sigmoid(logits);
        self.mul_channel(x, gate)
    }

    /// Space-to-channel rearrangement `(n, c, h, w) -> (n, 4c, h/2, w/2)`,
    /// stacking the parity sub-grids in [`FOCUS_ORDER`].
    pub fn focus_slice(&mut self, x: Var) -> Result<Var> {
        let t = self.try_tensor(x)?;
        let s = t.shape();
        if s.h % 2 != 0 || s.w % 2 != 0 {
            return shape_err(format!("focus_slice needs even spatial dims, got {}x{}", s.h, s.w));
        }
        let os = Shape::new(s.n, 4 * s.c, s.h / 2, s.w / 2);
        // For each output element, the flat index it reads from.
        let mut gather = Vec::with_capacity(os.numel());
        for n in 0..s.n {
            for (py, px) in FOCUS_ORDER {
                for c in 0..s.c {
                    for y in 0..os.h {
                        for xx in 0..os.w {
                            gather.push(s.index(n, c, 2 * y + py, 2 * xx + px));
                        }
                    }
                }
            }
        }
        let out = Tensor::from_values(os, gather.iter().map(|&i| t.data()[i]).collect())?;
        Ok(self.record_real(
            "focus_slice",
            &[x],
            out,
            Box::new(move |g, _, _| {
                let g = g.as_real()?;
                let mut d = Tensor::zeros(s);
                for (o, &i) in gather.iter().enumerate() {
                    d.data_mut()[i] = g.data()[o];
                }
                Ok(vec![real_grad(d)])
            }),
        ))
    }

    /// Bilinear read of `x` at `p + offset(p)` for every pixel `p`.
    ///
    /// `offsets` is `(n, 2, h, w)` in pixels, channel 0 along width and
    /// channel 1 along height. Sample coordinates are clamped to the border;
    /// a clamped coordinate passes no gradient to its offset.
    pub fn grid_sample(&mut self, x: Var, offsets: Var) -> Result<Var> {
        let (tx, to) = (self.try_tensor(x)?, self.try_tensor(offsets)?);
        let s = tx.shape();
        if to.shape() != Shape::new(s.n, 2, s.h, s.w) {
            return shape_err(format!("grid_sample offsets {} do not match features {s}", to.shape()));
        }
        let taps = grid_taps(to, s);
        let mut out = Tensor::zeros(s);
        let plane = s.plane();
        for n in 0..s.n {
            for c in 0..s.c {
                let src = tx.channel_plane(n, c);
                let base = (n * s.c + c) * plane;
                for (p, tap) in taps[n * plane..(n + 1) * plane].iter().enumerate() {
                    out.data_mut()[base + p] = tap.read(src, s.w);
                }
            }
        }
        Ok(self.record_real(
            "grid_sample",
            &[x, offsets],
            out,
            Box::new(move |g, ins, _| {
                let g = g.as_real()?;
                let x = ins[0].as_real()?;
                let mut dx = Tensor::zeros(s);
                let mut doff = Tensor::zeros(Shape::new(s.n, 2, s.h, s.w));
                let one = T::one();
                for n in 0..s.n {
                    for c in 0..s.c {
                        let src = x.channel_plane(n, c);
                        let base = (n * s.c + c) * plane;
                        for (p, t) in taps[n * plane..(n + 1) * plane].iter().enumerate() {
                            let gv = g.data()[base + p];
                            let (v00, v01, v10, v11) = t.corners(src, s.w);
                            let dst = &mut dx.data_mut()[base..base + plane];
                            dst[t.y0 * s.w + t.x0] += gv * (one - t.fy) * (one - t.fx);
                            dst[t.y0 * s.w + t.x1] += gv * (one - t.fy) * t.fx;
                            dst[t.y1 * s.w + t.x0] += gv * t.fy * (one - t.fx);
                            dst[t.y1 * s.w + t.x1] += gv * t.fy * t.fx;
                            let ob = n * 2 * plane;
                            if t.free_x {
                                doff.data_mut()[ob + p] += gv * ((one - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
                            }
                            if t.free_y {
                                doff.data_mut()[ob + plane + p] +=
                                    gv * ((one - t.fx) * (v10 - v00) + t.fx * (v11 - v01));
                            }
                        }
                    }
                }
                Ok(vec![real_grad(dx), real_grad(doff)])
            }),
        ))
    }
}

#[derive(Clone, Copy, Debug)]
struct GridTap<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: T,
    fy: T,
    free_x: bool,
    free_y: bool,
}

impl<T: Scalar> GridTap<T> {
    fn corners(&self, src: &[T], w: usize) -> (T, T, T, T) {
        (src[self.y0 * w + self.x0], src[self.y0 * w + self.x1], src[self.y1 * w + self.x0], src[self.y1 * w + self.x1])
    }

    fn read(&self, src: &[T], w: usize) -> T {
        let one = T::one();
        let (v00, v01, v10, v11) = self.corners(src, w);
        (one - self.fy) * ((one - self.fx) * v00 + self.fx * v01) + self.fy * ((one - self.fx) * v10 + self.fx * v11)
    }
}

fn axis_tap<T: Scalar>(coord: T, len: usize) -> (usize, usize, T, bool) {
    let max = T::from_usize_lossy(len - 1);
    let free = coord >= T::zero() && coord <= max;
    let c = coord.max(T::zero()).min(max);
    let lo = c.floor().to_usize().unwrap_or(0).min(len - 1);
    let hi = (lo + 1).min(len - 1);
    (lo, hi, c - T::from_usize_lossy(lo), free)
}

fn grid_taps<T: Scalar>(offsets: &Tensor<T>, s: Shape) -> Vec<GridTap<T>> {
    let plane = s.plane();
    let mut taps = Vec::with_capacity(s.n * plane);
    for n in 0..s.n {
        let dxs = offsets.channel_plane(n, 0);
        let dys = offsets.channel_plane(n, 1);
        for y in 0..s.h {
            for x in 0..s.w {
                let p = y * s.w + x;
                let (x0, x1, fx, free_x) = axis_tap(T::from_usize_lossy(x) + dxs[p], s.w);
                let (y0, y1, fy, free_y) = axis_tap(T::from_usize_lossy(y) + dys[p], s.h);
                taps.push(GridTap { x0, x1, y0, y1, fx, fy, free_x, free_y });
            }
        }
    }
    taps
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: impl Into<Shape>, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    /// Six nested loops straight from the definition.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, spec: ConvSpec) -> Tensor<f64> {
        let s = x.shape();
        let (oh, ow) = spec.output_hw(s.h, s.w).unwrap();
        Tensor::from_fn((s.n, spec.out_channels, oh, ow), |n, oc, oy, ox| {
            let mut acc = b.data()[oc];
            let ics: Vec<usize> = if spec.depthwise { vec![oc] } else { (0..spec.in_channels).collect() };
            for ic in ics {
                for ky in 0..spec.kernel.0 {
                    for kx in 0..spec.kernel.1 {
                        let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                            continue;
                        }
                        let wic = if spec.depthwise { 0 } else { ic };
                        acc += w.at(oc, wic, ky, kx) * x.at(n, ic, iy as usize, ix as usize);
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn identity_pointwise_conv() {
        let x = random((2, 3, 5, 4), 1);
        let w = Tensor::from_fn((3, 3, 1, 1), |o, i, _, _| if o == i { 1.0 } else { 0.0 });
        let y = conv2d_forward(&x, &w, None, ConvSpec::pointwise(3, 3)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn box_filter_on_constant() {
        let k = 0.7f64;
        let x = Tensor::full((1, 1, 5, 5), k);
        let w = Tensor::full((1, 1, 3, 3), 1.0);
        let y = conv2d_forward(&x, &w, None, ConvSpec::same(1, 1, 3)).unwrap();
        for yy in 1..4 {
            for xx in 1..4 {
                assert!((y.at(0, 0, yy, xx) - 9.0 * k).abs() < 1e-12);
            }
        }
        assert!((y.at(0, 0, 0, 0) - 4.0 * k).abs() < 1e-12);
    }

    #[test]
    fn conv_matches_naive_loops() {
        let cases = [
            ConvSpec::dense(3, 4, 3, 1, 1),
            ConvSpec::dense(2, 5, 3, 2, 1),
            ConvSpec::dense(3, 2, 5, 1, 2),
            ConvSpec::dense(2, 3, 2, 2, 0),
            ConvSpec::depthwise(3, 31, 15),
            ConvSpec::depthwise(2, 3, 1),
        ];
        for (i, spec) in cases.into_iter().enumerate() {
            let x = random((2, spec.in_channels, 9, 8), i as u64);
            let w = random(spec.weight_shape(), 100 + i as u64);
            let b = random(spec.bias_shape(), 200 + i as u64);
            let fast = conv2d_forward(&x, &w, Some(&b), spec).unwrap();
            let slow = naive_conv(&x, &w, &b, spec);
            assert!(fast.max_abs_diff(&slow) < 1e-10, "case {i}: {spec:?}");
        }
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::<f64>::zeros((1, 2, 4, 4));
        let w = Tensor::zeros((3, 3, 1, 1));
        assert!(conv2d_forward(&x, &w, None, ConvSpec::pointwise(3, 3)).is_err());
    }

    #[test]
    fn activations_at_reference_points() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
        let u = (2.0 / std::f64::consts::PI).sqrt() * (3.0 + 0.044715 * 27.0);
        let expect = 0.5 * 3.0 * (1.0 + u.tanh());
        assert!((gelu_scalar(3.0f64) - expect).abs() < 1e-15);
        assert!((gelu_scalar(3.0f64) - 2.996363).abs() < 1e-6);
    }

    fn naive_pool(x: &Tensor<f64>, spec: PoolSpec, max: bool) -> Tensor<f64> {
        let s = x.shape();
        let (oh, ow) = spec.output_hw(s.h, s.w).unwrap();
        let p = spec.padding;
        Tensor::from_fn((s.n, s.c, oh, ow), |n, c, oy, ox| {
            let mut vals = Vec::new();
            for dy in 0..spec.kernel {
                for dx in 0..spec.kernel {
                    let y = (oy * spec.stride + dy) as isize - p.top as isize;
                    let xx = (ox * spec.stride + dx) as isize - p.left as isize;
                    if y >= 0 && xx >= 0 && (y as usize) < s.h && (xx as usize) < s.w {
                        vals.push(x.at(n, c, y as usize, xx as usize));
                    } else if !max {
                        vals.push(0.0);
                    }
                }
            }
            if max {
                vals.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            } else {
                vals.iter().sum::<f64>() / (spec.kernel * spec.kernel) as f64
            }
        })
    }

    #[test]
    fn pooling_matches_window_scan() {
        let x = random((2, 3, 8, 8), 7);
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        for spec in [
            PoolSpec::new(2, 1, Padding::trailing(1)),
            PoolSpec::new(3, 2, Padding::uniform(1)),
            PoolSpec::new(2, 2, Padding::default()),
        ] {
            let a = g.avg_pool(v, spec).unwrap();
            let m = g.max_pool(v, spec).unwrap();
            assert!(g.tensor(a).max_abs_diff(&naive_pool(&x, spec, false)) < 1e-12);
            assert!(g.tensor(m).max_abs_diff(&naive_pool(&x, spec, true)) < 1e-12);
        }
    }

    #[test]
    fn pooling_small_cases() {
        let mut g = Graph::new();
        let c = g.leaf(Tensor::full((1, 1, 4, 4), 3.0f64));
        let a = g.avg_pool(c, PoolSpec::new(2, 1, Padding::trailing(1))).unwrap();
        assert_eq!(g.shape(a), Shape::new(1, 1, 4, 4));
        assert!((g.tensor(a).at(0, 0, 1, 1) - 3.0).abs() < 1e-15);
        let x = g.leaf(Tensor::from_values((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let m = g.max_pool(x, PoolSpec::new(2, 2, Padding::default())).unwrap();
        assert_eq!(g.tensor(m).data(), &[4.0]);
    }

    #[test]
    fn max_pool_ties_route_to_first() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full((1, 1, 2, 2), 1.0));
        let m = g.max_pool(x, PoolSpec::new(2, 2, Padding::default())).unwrap();
        let l = g.sum(m);
        g.backward(l).unwrap();
        assert_eq!(g.tensor(x).grad().unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gap_values_and_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_values((1, 1, 2, 2), vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let p = g.global_avg_pool(x).unwrap();
        assert_eq!(g.tensor(p).data(), &[4.0]);
        let l = g.sum(p);
        g.backward(l).unwrap();
        assert_eq!(g.tensor(x).grad().unwrap(), &[0.25; 4]);
    }

    /// Direct half-pixel interpolation written against the formula.
    fn naive_upsample(x: &Tensor<f64>, oh: usize, ow: usize) -> Tensor<f64> {
        let s = x.shape();
        Tensor::from_fn((s.n, s.c, oh, ow), |n, c, oy, ox| {
            let sy = ((oy as f64 + 0.5) * s.h as f64 / oh as f64 - 0.5).max(0.0).min((s.h - 1) as f64);
            let sx = ((ox as f64 + 0.5) * s.w as f64 / ow as f64 - 0.5).max(0.0).min((s.w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(s.h - 1), (x0 + 1).min(s.w - 1));
            let (ty, tx) = (sy - y0 as f64, sx - x0 as f64);
            (1.0 - ty) * ((1.0 - tx) * x.at(n, c, y0, x0) + tx * x.at(n, c, y0, x1))
                + ty * ((1.0 - tx) * x.at(n, c, y1, x0) + tx * x.at(n, c, y1, x1))
        })
    }

    #[test]
    fn upsample_cases() {
        let x = random((1, 2, 2, 2), 3);
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let same = g.bilinear_upsample(v, 2, 2).unwrap();
        assert_eq!(g.tensor(same), &x);
        let up = g.bilinear_upsample(v, 4, 4).unwrap();
        assert!(g.tensor(up).max_abs_diff(&naive_upsample(&x, 4, 4)) < 1e-12);
        // 2x2 -> 4x4 first row: src x = -0.25 -> clamp 0, 0.25, 0.75, 1.25 -> clamp 1
        let a = x.at(0, 0, 0, 0);
        let b = x.at(0, 0, 0, 1);
        let row: Vec<f64> = (0..4).map(|i| g.tensor(up).at(0, 0, 0, i)).collect();
        let expect = [a, 0.75 * a + 0.25 * b, 0.25 * a + 0.75 * b, b];
        for (r, e) in row.iter().zip(expect) {
            assert!((r - e).abs() < 1e-12);
        }
        let c = g.leaf(Tensor::full((1, 1, 4, 4), 2.5));
        let cu = g.bilinear_upsample(c, 16, 8).unwrap();
        assert!(g.tensor(cu).data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn focus_small_case_and_inverse() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_values((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let f = g.focus_slice(x).unwrap();
        assert_eq!(g.shape(f), Shape::new(1, 4, 1, 1));
        assert_eq!(g.tensor(f).data(), &[1.0, 2.0, 3.0, 4.0]);
        let big = random((2, 3, 6, 4), 8);
        let v = g.leaf(big.clone());
        let fv = g.focus_slice(v).unwrap();
        assert_eq!(unfocus(g.tensor(fv)).unwrap(), big);
        let odd = g.leaf(Tensor::zeros((1, 1, 3, 4)));
        assert!(g.focus_slice(odd).is_err());
    }

    #[test]
    fn grid_sample_identity_and_shift() {
        let x = random((1, 2, 5, 6), 4);
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let zero = g.constant(Tensor::zeros((1, 2, 5, 6)));
        let same = g.grid_sample(v, zero).unwrap();
        assert_eq!(g.tensor(same), &x);
        let shift = g.constant(Tensor::from_fn((1, 2, 5, 6), |_, c, _, _| if c == 0 { 1.0 } else { 0.0 }));
        let moved = g.grid_sample(v, shift).unwrap();
        for c in 0..2 {
            for y in 0..5 {
                for xx in 0..5 {
                    assert_eq!(g.tensor(moved).at(0, c, y, xx), x.at(0, c, y, xx + 1));
                }
                assert_eq!(g.tensor(moved).at(0, c, y, 5), x.at(0, c, y, 5));
            }
        }
    }

    #[test]
    fn channel_attention_saturation() {
        let x = random((1, 3, 4, 4), 5);
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let w = g.constant(Tensor::zeros((3, 3, 1, 1)));
        let big = g.constant(Tensor::full((1, 3, 1, 1), 60.0));
        let zero = g.constant(Tensor::zeros((1, 3, 1, 1)));
        let open = g.channel_attention(v, v, w, big).unwrap();
        assert!(g.tensor(open).max_abs_diff(&x) < 1e-12);
        let half = g.channel_attention(v, v, w, zero).unwrap();
        assert!(g.tensor(half).max_abs_diff(&x.map(|v| 0.5 * v)) < 1e-15);
    }
}
