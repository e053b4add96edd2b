//! Release gate: every kernel against an independent oracle, plus the
//! finite-difference gradient suite.

use freqdet_core::boxes::{inner_iou, iou, siou, Bbox, BoxSet};
use freqdet_core::checks::{gradcheck_cases, run_cases, GradCase};
use freqdet_core::freq::FfBlock;
use freqdet_core::gradcheck::{GradcheckOptions, GradcheckReport};
use freqdet_core::head::{average_precision, hungarian, CostMatrix};
use freqdet_core::nn::{conv2d_forward, ConvSpec};
use freqdet_core::scenes::{self, SceneSpec};
use freqdet_core::spectral::{fft2, ifft2, ifft2_complex};
use freqdet_core::{Graph, ParamStore, Result, Spectrum, Tensor, Value, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;

/// Deliberate defects for checking that the suites notice them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Negates the backward rule of the spectral magnitude.
    MagnitudeSign,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub max_error: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// Names of failing checks.
    pub failures: Vec<String>,
}

impl SuiteReport {
    fn from_error(name: &'static str, max_error: f64, tolerance: f64) -> Self {
        let pass = max_error < tolerance;
        SuiteReport { name, max_error, tolerance, pass, failures: if pass { vec![] } else { vec![name.to_string()] } }
    }

    pub fn line(&self) -> String {
        format!("suite={} max_err={:.3e} tol={:.0e} pass={}", self.name, self.max_error, self.tolerance, self.pass)
    }
}

fn rand_tensor(shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

const SIZES: [(usize, usize); 6] = [(1, 1), (2, 8), (4, 4), (8, 16), (16, 16), (32, 32)];

fn fft_roundtrip(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for (h, w) in SIZES {
        let x = rand_tensor((2, 3, h, w), rng);
        worst = worst.max(ifft2(&fft2(&x)?)?.max_abs_diff(&x));
    }
    Ok(worst)
}

fn parseval(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for (h, w) in SIZES {
        let x = rand_tensor((1, 2, h, w), rng);
        let s = fft2(&x)?;
        let space: f64 = x.data().iter().map(|v| v * v).sum();
        let freq: f64 = s.re().iter().zip(s.im()).map(|(a, b)| a * a + b * b).sum::<f64>() / (h * w) as f64;
        worst = worst.max((space - freq).abs() / space);
    }
    Ok(worst)
}

/// Direct O((hw)²) evaluation of the 2-D DFT.
fn naive_dft(x: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let (mut re, mut im) = (vec![0.0; s.numel()], vec![0.0; s.numel()]);
    for n in 0..s.n {
        for c in 0..s.c {
            for u in 0..s.h {
                for v in 0..s.w {
                    let (mut a, mut b) = (0.0, 0.0);
                    for y in 0..s.h {
                        for xx in 0..s.w {
                            let phase = -2.0 * std::f64::consts::PI * ((u * y) as f64 / s.h as f64 + (v * xx) as f64 / s.w as f64);
                            let val = x.at(n, c, y, xx);
                            a += val * phase.cos();
                            b += val * phase.sin();
                        }
                    }
                    let i = s.index(n, c, u, v);
                    re[i] = a;
                    im[i] = b;
                }
            }
        }
    }
    (re, im)
}

fn dft_equivalence(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for (h, w) in SIZES {
        let x = rand_tensor((1, 1, h, w), rng);
        let s = fft2(&x)?;
        let (re, im) = naive_dft(&x);
        for i in 0..re.len() {
            worst = worst.max((s.re()[i] - re[i]).abs()).max((s.im()[i] - im[i]).abs());
        }
        // Inverse of the reference spectrum reproduces the input.
        let back = ifft2_complex(&Spectrum::new(x.shape(), re, im)?)?;
        worst = worst.max(back.real_part().max_abs_diff(&x));
    }
    Ok(worst)
}

/// Zero-padded cross-correlation straight from the definition.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, spec: ConvSpec) -> Tensor<f64> {
    let s = x.shape();
    let (kh, kw) = spec.kernel;
    let oh = (s.h + 2 * spec.padding - kh) / spec.stride + 1;
    let ow = (s.w + 2 * spec.padding - kw) / spec.stride + 1;
    Tensor::from_fn((s.n, spec.out_channels, oh, ow), |n, oc, oy, ox| {
        let mut acc = b.data()[oc];
        let ics: Vec<usize> = if spec.depthwise { vec![oc] } else { (0..spec.in_channels).collect() };
        for (wi, ic) in ics.into_iter().enumerate() {
            for ky in 0..kh {
                for kx in 0..kw {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                    if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                        continue;
                    }
                    let wic = if spec.depthwise { 0 } else { wi };
                    acc += w.at(oc, wic, ky, kx) * x.at(n, ic, iy as usize, ix as usize);
                }
            }
        }
        acc
    })
}

fn conv_oracle(rng: &mut ChaCha8Rng) -> Result<f64> {
    let specs = [
        ConvSpec::same(3, 5, 3),
        ConvSpec::dense(4, 6, 3, 2, 1),
        ConvSpec::pointwise(6, 2),
        ConvSpec::same(2, 2, 5),
        ConvSpec::depthwise(3, 7, 3),
        ConvSpec::depthwise(2, 31, 15),
    ];
    let mut worst = 0.0f64;
    for spec in specs {
        let x = rand_tensor((2, spec.in_channels, 9, 12), rng);
        let ws = spec.weight_shape();
        let w = rand_tensor((ws.n, ws.c, ws.h, ws.w), rng);
        let b = rand_tensor((1, spec.out_channels, 1, 1), rng);
        worst = worst.max(conv2d_forward(&x, &w, Some(&b), spec)?.max_abs_diff(&naive_conv(&x, &w, &b, spec)));
    }
    Ok(worst)
}

fn identities(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    let x = rand_tensor((2, 4, 8, 8), rng);

    let ff = FfBlock::new("ff", 4);
    let mut store = ParamStore::new();
    ff.register(&mut store, 3)?;
    let mut g = Graph::new();
    let p = g.bind(&store);
    let v = g.constant(x.clone());
    let out = ff.forward(&mut g, &p, v)?;
    worst = worst.max(g.tensor(out).max_abs_diff(&x));

    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let zero = g.constant(Tensor::zeros((2, 2, 8, 8)));
    let out = g.grid_sample(v, zero)?;
    worst = worst.max(g.tensor(out).max_abs_diff(&x));

    let eye = Tensor::from_fn((4, 4, 1, 1), |o, i, _, _| if o == i { 1.0 } else { 0.0 });
    worst = worst.max(conv2d_forward(&x, &eye, None, ConvSpec::pointwise(4, 4))?.max_abs_diff(&x));

    for _ in 0..1000 {
        let (a, b) = (random_box(rng), random_box(rng));
        worst = worst.max((inner_iou(a, b, 1.0) - iou(a, b)).abs());
    }
    Ok(worst)
}

fn random_box(rng: &mut ChaCha8Rng) -> Bbox<f64> {
    Bbox::new(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.02..0.4), rng.gen_range(0.02..0.4))
}

fn interval_iou(a: Bbox<f64>, b: Bbox<f64>) -> f64 {
    let overlap = |c1: f64, s1: f64, c2: f64, s2: f64| ((c1 + s1 / 2.0).min(c2 + s2 / 2.0) - (c1 - s1 / 2.0).max(c2 - s2 / 2.0)).max(0.0);
    let inter = overlap(a.cx, a.w, b.cx, b.w) * overlap(a.cy, a.h, b.cy, b.h);
    inter / (a.w * a.h + b.w * b.h - inter)
}

/// SIoU with the trigonometric angle cost.
fn siou_trig(p: Bbox<f64>, g: Bbox<f64>) -> f64 {
    let (cw, ch) = ((g.cx - p.cx).abs(), (g.cy - p.cy).abs());
    let sigma = cw.hypot(ch).max(1e-9);
    let lambda = 1.0 - 2.0 * ((ch / sigma).asin() - std::f64::consts::FRAC_PI_4).sin().powi(2);
    let hw = (p.cx + p.w / 2.0).max(g.cx + g.w / 2.0) - (p.cx - p.w / 2.0).min(g.cx - g.w / 2.0);
    let hh = (p.cy + p.h / 2.0).max(g.cy + g.h / 2.0) - (p.cy - p.h / 2.0).min(g.cy - g.h / 2.0);
    let gamma = 2.0 - lambda;
    let delta = 2.0 - (-gamma * (cw / hw).powi(2)).exp() - (-gamma * (ch / hh).powi(2)).exp();
    let omega = (1.0 - (-(p.w - g.w).abs() / p.w.max(g.w)).exp()).powi(4) + (1.0 - (-(p.h - g.h).abs() / p.h.max(g.h)).exp()).powi(4);
    1.0 - interval_iou(p, g) + (delta + omega) / 2.0
}

fn box_oracles(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..2000 {
        let (a, b) = (random_box(rng), random_box(rng));
        worst = worst.max((iou(a, b) - interval_iou(a, b)).abs()).max((siou(a, b).loss - siou_trig(a, b)).abs());
    }
    Ok(worst)
}

fn exhaustive(c: &CostMatrix) -> f64 {
    let c = if c.rows > c.cols { c.transpose() } else { c.clone() };
    fn go(c: &CostMatrix, row: usize, used: u32, acc: f64) -> f64 {
        if row == c.rows {
            return acc;
        }
        (0..c.cols)
            .filter(|j| used & (1 << j) == 0)
            .map(|j| go(c, row + 1, used | (1 << j), acc + c.at(row, j)))
            .fold(f64::INFINITY, f64::min)
    }
    go(&c, 0, 0, 0.0)
}

/// Integer costs, so the optimum is exact.
fn hungarian_oracle(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (r, c) = (rng.gen_range(1..=7), rng.gen_range(1..=7));
        let m = CostMatrix::new(r, c, (0..r * c).map(|_| rng.gen_range(0..1000) as f64).collect())?;
        let total: f64 = hungarian(&m)?.iter().map(|&(i, j)| m.at(i, j)).sum();
        worst = worst.max((total - exhaustive(&m)).abs());
    }
    Ok(worst)
}

/// One image, two ground truths, detections TP (0.9), FP (0.8), TP (0.7):
/// precision 1 up to recall 0.5, then 2/3.
fn ap_hand_case() -> Result<f64> {
    let gt = BoxSet::new(vec![Bbox::new(0.2, 0.2, 0.1, 0.1), Bbox::new(0.7, 0.7, 0.2, 0.2)], vec![0, 0])?;
    let dets = BoxSet::scored(
        vec![Bbox::new(0.2, 0.2, 0.1, 0.1), Bbox::new(0.45, 0.45, 0.1, 0.1), Bbox::new(0.7, 0.7, 0.2, 0.2)],
        vec![0, 0, 0],
        vec![0.9, 0.8, 0.7],
    )?;
    let ap = average_precision(&[dets], &[gt], 0.5)?;
    Ok((ap - (51.0 + 50.0 * 2.0 / 3.0) / 101.0).abs())
}

/// Non-zero when decode(encode(x)) differs from x or re-encoding changes bytes.
fn dataset_format() -> Result<f64> {
    let data = scenes::generate(&SceneSpec { height: 32, width: 32, max_objects: 4, max_size: 6, seed: 4, ..SceneSpec::default() }, 4)?;
    let bytes = scenes::encode(&data)?;
    let back = scenes::decode(&bytes)?;
    Ok(if back == data && scenes::encode(&back)? == bytes { 0.0 } else { 1.0 })
}

/// Largest deviation from f32 rounding, or 1 if re-encoding changes bytes.
fn checkpoint_format(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut store = ParamStore::new();
    for i in 0..5 {
        store.insert(format!("layer{i}.weight"), rand_tensor((i + 1, 2, 3, 1), rng))?;
    }
    let bytes = checkpoint::encode(&store)?;
    let back = checkpoint::decode(&bytes)?;
    if checkpoint::encode(&back)? != bytes {
        return Ok(1.0);
    }
    let mut worst = 0.0f64;
    for (name, t) in store.iter() {
        for (a, b) in t.data().iter().zip(back.require(name)?.data()) {
            worst = worst.max((*a as f32 as f64 - b).abs());
        }
    }
    Ok(worst)
}

/// The magnitude op with its gradient negated.
fn flipped_magnitude(g: &mut Graph<f64>, v: &[Var]) -> Result<Var> {
    let s = g.try_spectrum(v[0])?;
    let out = Tensor::from_values(s.shape(), s.re().iter().zip(s.im()).map(|(a, b)| a.hypot(*b)).collect())?;
    Ok(g.record(
        "magnitude",
        &[v[0]],
        Value::Real(out),
        Box::new(|grad, ins, out| {
            let (grad, s, mag) = (grad.as_real()?, ins[0].as_complex()?, out.as_real()?);
            let k: Vec<f64> = grad.data().iter().zip(mag.data()).map(|(g, m)| -g / m.max(1e-12)).collect();
            let re = s.re().iter().zip(&k).map(|(a, k)| a * k).collect();
            let im = s.im().iter().zip(&k).map(|(a, k)| a * k).collect();
            Ok(vec![Some(Value::Complex(Spectrum::new(s.shape(), re, im)?))])
        }),
    ))
}

fn gradient_cases(seed: u64, fault: Option<Fault>) -> Result<Vec<GradCase>> {
    let mut cases = gradcheck_cases(seed)?;
    if fault == Some(Fault::MagnitudeSign) {
        for c in cases.iter_mut().filter(|c| c.name == "magnitude") {
            c.op = Box::new(flipped_magnitude);
        }
    }
    Ok(cases)
}

/// Gradient reports of every case, optionally with a fault injected.
pub fn gradient_reports(seed: u64, fault: Option<Fault>) -> Result<Vec<GradcheckReport>> {
    Ok(run_cases(&gradient_cases(seed, fault)?, seed, &GradcheckOptions::default()))
}

fn suite(name: &'static str, tolerance: f64, f: impl FnOnce() -> Result<f64>) -> SuiteReport {
    match f() {
        Ok(e) => SuiteReport::from_error(name, e, tolerance),
        Err(e) => SuiteReport {
            name,
            max_error: f64::INFINITY,
            tolerance,
            pass: false,
            failures: vec![format!("{name}: {e}")],
        },
    }
}

pub fn run(seed: u64, fault: Option<Fault>) -> Vec<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![
        suite("fft-roundtrip", 1e-10, || fft_roundtrip(&mut rng)),
        suite("parseval", 1e-9, || parseval(&mut rng)),
        suite("naive-dft", 1e-10, || dft_equivalence(&mut rng)),
        suite("conv-naive", 1e-12, || conv_oracle(&mut rng)),
        suite("identity-fixed-points", 1e-12, || identities(&mut rng)),
        suite("box-oracles", 1e-10, || box_oracles(&mut rng)),
        // Integer costs: anything but an exact match fails.
        suite("hungarian-exhaustive", f64::MIN_POSITIVE, || hungarian_oracle(&mut rng)),
        suite("ap-hand-case", 1e-12, ap_hand_case),
        suite("dataset-format", f64::MIN_POSITIVE, dataset_format),
        suite("checkpoint-format", f64::MIN_POSITIVE, || checkpoint_format(&mut rng)),
    ];
    let grad = match gradient_reports(seed, fault) {
        Ok(reports) => {
            let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
            let failures: Vec<String> = reports.iter().filter(|r| !r.pass).map(|r| r.summary()).collect();
            SuiteReport {
                name: "gradcheck",
                max_error: worst,
                tolerance: GradcheckOptions::default().tolerance,
                pass: failures.is_empty(),
                failures,
            }
        }
        Err(e) => SuiteReport { name: "gradcheck", max_error: f64::INFINITY, tolerance: 0.0, pass: false, failures: vec![e.to_string()] },
    };
    out.push(grad);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn naive_dft_of_impulse_is_flat() {
        let mut x = Tensor::zeros((1, 1, 4, 4));
        x.set(0, 0, 0, 0, 1.0);
        let (re, im) = naive_dft(&x);
        assert!(re.iter().all(|v| (v - 1.0).abs() < 1e-15) && im.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn naive_conv_hand_case() {
        let x = Tensor::from_fn((1, 1, 3, 3), |_, _, y, x| (3 * y + x) as f64);
        let w = Tensor::full((1, 1, 3, 3), 1.0);
        let b = Tensor::zeros((1, 1, 1, 1));
        let out = naive_conv(&x, &w, &b, ConvSpec::same(1, 1, 3));
        // Center sees all nine values; the corner sees the 2x2 block {0, 1, 3, 4}.
        assert_eq!(out.at(0, 0, 1, 1), 36.0);
        assert_eq!(out.at(0, 0, 0, 0), 8.0);
    }

    #[test]
    fn trig_siou_is_zero_for_identical_boxes() {
        let b = Bbox::new(0.4, 0.5, 0.2, 0.1);
        assert!(siou_trig(b, b).abs() < 1e-15);
    }

    #[test]
    fn all_suites_pass() {
        let reports = run(0, None);
        assert!(reports.len() >= 8);
        for r in &reports {
            assert!(r.pass, "{} {:?}", r.line(), r.failures);
        }
    }

    #[test]
    fn flipped_magnitude_is_caught_by_name() {
        let reports = run(0, Some(Fault::MagnitudeSign));
        let grad = reports.iter().find(|r| r.name == "gradcheck").unwrap();
        assert!(!grad.pass);
        assert_eq!(grad.failures.len(), 1, "{:?}", grad.failures);
        assert!(grad.failures[0].starts_with("magnitude "), "{:?}", grad.failures);
        assert!(reports.iter().filter(|r| r.name != "gradcheck").all(|r| r.pass));
    }
}
