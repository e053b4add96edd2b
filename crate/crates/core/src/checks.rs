//! The registry of finite-difference gradient checks, grouped by library
//! area. Every differentiable operation and block appears at least once.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::{Bbox, BoxLoss, BoxSet, DEFAULT_INNER_RATIO};
use crate::error::{Error, Result};
use crate::freq::{FdBlock, FfBlock, MsffBlock, MsffConfig, SacBlock};
use crate::gradcheck::{gradcheck, random_spectrum, random_tensor, GradcheckOptions, GradcheckReport};
use crate::graph::{Graph, Value, Var};
use crate::head::{match_batch, CostWeights, LossConfig};
use crate::nn::{ConvSpec, Padding, PoolSpec};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Shape, Tensor};

pub const GROUPS: [&str; 6] = ["tensor-core", "spectral", "neural-ops", "freq-modules", "box-geometry", "detection-head"];

type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

pub struct GradCase {
    pub group: &'static str,
    pub name: String,
    pub inputs: Vec<Value<f64>>,
    pub op: OpFn,
}

impl GradCase {
    pub fn new(
        group: &'static str,
        name: impl Into<String>,
        inputs: Vec<Value<f64>>,
        op: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        GradCase { group, name: name.into(), inputs, op: Box::new(op) }
    }

    pub fn run(&self, seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
        gradcheck(&self.name, &self.op, &self.inputs, seed, opts)
    }
}

fn real(shape: impl Into<Shape>, rng: &mut ChaCha8Rng) -> Value<f64> {
    random_tensor(shape, rng, -1.0, 1.0)
}

/// Values in `[lo, hi]` with a random sign, keeping clear of zero.
fn signed_away(shape: impl Into<Shape>, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Value<f64> {
    Value::Real(Tensor::from_fn(shape, |_, _, _, _| {
        let v = rng.gen_range(lo..hi);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    }))
}

/// Grid-sample offsets whose fractional parts stay in `[0.2, 0.8]`, away
/// from the integer kinks of bilinear interpolation.
fn smooth_offsets(shape: impl Into<Shape>, rng: &mut ChaCha8Rng) -> Value<f64> {
    Value::Real(Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-2i32..=1) as f64 + rng.gen_range(0.2..0.8)))
}

/// Case for a parameterized block: inputs first, then every parameter of
/// `store` in name order.
fn block_case(
    group: &'static str,
    name: &str,
    mut inputs: Vec<Value<f64>>,
    store: ParamStore<f64>,
    forward: impl Fn(&mut Graph<f64>, &Bound, &[Var]) -> Result<Var> + 'static,
) -> GradCase {
    let k = inputs.len();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    inputs.extend(store.iter().map(|(_, t)| Value::Real(t.clone())));
    GradCase::new(group, name, inputs, move |g, vars| {
        let bound = Bound::from_pairs(names.iter().cloned().zip(vars[k..].iter().copied()));
        forward(g, &bound, &vars[..k])
    })
}

/// Sets every parameter whose name ends in one of `suffixes` to fresh
/// uniform values, so branches gated off at initialization are exercised.
fn perturb(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, suffixes: &[&str], scale: f64) {
    for (name, t) in store.iter_mut() {
        if suffixes.iter().any(|s| name.ends_with(s)) {
            for v in t.data_mut() {
                *v = rng.gen_range(-scale..scale);
            }
        }
    }
}

fn tensor_core(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    const G: &str = "tensor-core";
    let s = Shape::new(2, 3, 4, 4);
    vec![
        GradCase::new(G, "add", vec![real(s, rng), real(s, rng)], |g, v| g.add(v[0], v[1])),
        GradCase::new(G, "sub", vec![real(s, rng), real(s, rng)], |g, v| g.sub(v[0], v[1])),
        GradCase::new(G, "mul", vec![real(s, rng), real(s, rng)], |g, v| g.mul(v[0], v[1])),
        GradCase::new(G, "scale", vec![real(s, rng)], |g, v| Ok(g.scale(v[0], -1.7))),
        GradCase::new(G, "affine", vec![real(s, rng)], |g, v| g.affine(v[0], 0.3, 2.0)),
        GradCase::new(G, "mul_scalar", vec![real(s, rng), real(Shape::SCALAR, rng)], |g, v| g.mul_scalar(v[0], v[1])),
        GradCase::new(G, "mul_channel", vec![real(s, rng), real((2, 3, 1, 1), rng)], |g, v| g.mul_channel(v[0], v[1])),
        GradCase::new(G, "concat_channels", vec![real(s, rng), real((2, 2, 4, 4), rng)], |g, v| {
            g.concat_channels(&[v[0], v[1]])
        }),
        GradCase::new(G, "slice_channels", vec![real(s, rng)], |g, v| g.slice_channels(v[0], 1, 2)),
        GradCase::new(G, "split_channels", vec![real(s, rng)], |g, v| {
            let parts = g.split_channels(v[0], &[1, 2])?;
            let a = g.scale(parts[0], 2.0);
            let b = g.sum(parts[1]);
            let a = g.sum(a);
            g.add(a, b)
        }),
        GradCase::new(G, "reshape", vec![real(s, rng)], |g, v| g.reshape(v[0], (1, 6, 16, 1))),
        GradCase::new(G, "sum", vec![real(s, rng)], |g, v| Ok(g.sum(v[0]))),
        GradCase::new(G, "mean", vec![real(s, rng)], |g, v| g.mean(v[0])),
    ]
}

fn spectral(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    const G: &str = "spectral";
    let s = Shape::new(1, 2, 8, 4);
    vec![
        GradCase::new(G, "fft2", vec![real(s, rng)], |g, v| g.fft2(v[0])),
        GradCase::new(G, "ifft2_complex", vec![random_spectrum(s, rng)], |g, v| g.ifft2_complex(v[0])),
        GradCase::new(G, "ifft2", vec![random_spectrum(s, rng)], |g, v| g.ifft2(v[0])),
        GradCase::new(G, "cmul_per_bin", vec![random_spectrum(s, rng), real(s, rng)], |g, v| g.cmul(v[0], v[1])),
        GradCase::new(G, "cmul_per_channel", vec![random_spectrum(s, rng), real((1, 2, 1, 1), rng)], |g, v| {
            g.cmul(v[0], v[1])
        }),
        GradCase::new(G, "cmul_spec", vec![random_spectrum(s, rng), random_spectrum(s, rng)], |g, v| {
            g.cmul_spec(v[0], v[1])
        }),
        GradCase::new(G, "real_part", vec![random_spectrum(s, rng)], |g, v| g.real_part(v[0])),
        GradCase::new(G, "imag_part", vec![random_spectrum(s, rng)], |g, v| g.imag_part(v[0])),
        GradCase::new(G, "magnitude", vec![random_spectrum(s, rng)], |g, v| g.magnitude(v[0])),
        GradCase::new(G, "fft_filter_roundtrip", vec![real(s, rng), real((1, 2, 1, 1), rng)], |g, v| {
            let f = g.fft2(v[0])?;
            let m = g.cmul(f, v[1])?;
            let b = g.ifft2_complex(m)?;
            g.magnitude(b)
        }),
    ]
}

fn neural_ops(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    const G: &str = "neural-ops";
    let x = Shape::new(2, 3, 8, 8);
    let dense = ConvSpec::dense(3, 4, 3, 2, 1);
    let dw = ConvSpec::depthwise(3, 5, 2);
    let pw = ConvSpec::pointwise(3, 2);
    vec![
        GradCase::new(G, "conv2d_dense", vec![real(x, rng), real(dense.weight_shape(), rng), real(dense.bias_shape(), rng)], move |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), dense)
        }),
        GradCase::new(G, "conv2d_depthwise", vec![real(x, rng), real(dw.weight_shape(), rng), real(dw.bias_shape(), rng)], move |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), dw)
        }),
        GradCase::new(G, "conv2d_pointwise", vec![real(x, rng), real(pw.weight_shape(), rng)], move |g, v| {
            g.conv2d(v[0], v[1], None, pw)
        }),
        GradCase::new(G, "gelu", vec![random_tensor(x, rng, -3.0, 3.0)], |g, v| Ok(g.gelu(v[0]))),
        GradCase::new(G, "sigmoid", vec![random_tensor(x, rng, -4.0, 4.0)], |g, v| Ok(g.sigmoid(v[0]))),
        GradCase::new(G, "avg_pool_k2s1_trailing", vec![real(x, rng)], |g, v| {
            g.avg_pool(v[0], PoolSpec::new(2, 1, Padding::trailing(1)))
        }),
        GradCase::new(G, "max_pool_k3s2p1", vec![real(x, rng)], |g, v| {
            g.max_pool(v[0], PoolSpec::new(3, 2, Padding::uniform(1)))
        }),
        GradCase::new(G, "global_avg_pool", vec![real(x, rng)], |g, v| g.global_avg_pool(v[0])),
        GradCase::new(G, "bilinear_upsample", vec![real((1, 2, 4, 4), rng)], |g, v| g.bilinear_upsample(v[0], 8, 8)),
        GradCase::new(
            G,
            "channel_attention",
            vec![real(x, rng), real((2, 5, 8, 8), rng), real((3, 5, 1, 1), rng), real((1, 3, 1, 1), rng)],
            |g, v| g.channel_attention(v[0], v[1], v[2], v[3]),
        ),
        GradCase::new(G, "focus_slice", vec![real(x, rng)], |g, v| g.focus_slice(v[0])),
        GradCase::new(G, "grid_sample", vec![real((1, 2, 6, 6), rng), smooth_offsets((1, 2, 6, 6), rng)], |g, v| {
            g.grid_sample(v[0], v[1])
        }),
    ]
}

fn freq_modules(rng: &mut ChaCha8Rng, seed: u64) -> Result<Vec<GradCase>> {
    const G: &str = "freq-modules";
    let mut cases = Vec::new();

    let ff = FfBlock::new("ff", 3);
    let mut store = ParamStore::new();
    ff.register(&mut store, seed)?;
    perturb(&mut store, rng, &[".alpha", ".beta"], 1.0);
    cases.push(block_case(G, "ff", vec![real((2, 3, 8, 4), rng)], store, move |g, p, v| ff.forward(g, p, v[0])));

    let msff = MsffBlock::new("msff", MsffConfig { focus_in: Some(2), focus_out: 4, direct_in: vec![4] })?;
    let mut store = ParamStore::new();
    msff.register(&mut store, seed)?;
    perturb(&mut store, rng, &[".alpha", ".bias"], 0.5);
    cases.push(block_case(G, "msff_fe", vec![real((1, 2, 16, 16), rng), real((1, 4, 8, 8), rng)], store, move |g, p, v| {
        msff.forward(g, p, Some(v[0]), &[v[1]])
    }));

    let fd = FdBlock::new("fd", 4, 6)?;
    let mut store = ParamStore::new();
    fd.register(&mut store, seed)?;
    perturb(&mut store, rng, &[".alpha", ".bias"], 0.5);
    cases.push(block_case(G, "fd", vec![real((1, 4, 8, 8), rng)], store, move |g, p, v| fd.forward(g, p, v[0])));

    let sac = SacBlock::new("sac", 3, 4, 4);
    let mut store = ParamStore::new();
    sac.register(&mut store, seed)?;
    perturb(&mut store, rng, &[".alpha", ".bias"], 0.5);
    // Small offset weights around a half-pixel bias keep every sample point
    // strictly between grid lines, where bilinear reads are smooth.
    perturb(&mut store, rng, &["offset.weight"], 0.02);
    store.set("sac.offset.bias", Tensor::full((1, 4, 1, 1), 0.5))?;
    cases.push(block_case(G, "sac", vec![real((1, 3, 8, 8), rng), real((1, 4, 4, 4), rng)], store, move |g, p, v| {
        sac.forward(g, p, v[0], v[1])
    }));
    Ok(cases)
}

/// Random predicted/ground-truth pairs with overlapping, non-identical boxes.
fn box_pairs(n: usize, rng: &mut ChaCha8Rng) -> (Value<f64>, Vec<Bbox<f64>>) {
    let gts: Vec<Bbox<f64>> = (0..n)
        .map(|_| Bbox::new(rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.1..0.3), rng.gen_range(0.1..0.3)))
        .collect();
    let pred = Tensor::from_fn((1, 4, n, 1), |_, j, i, _| {
        let g = gts[i].to_array();
        let jitter = if j < 2 { rng.gen_range(-0.08..0.08) } else { rng.gen_range(-0.06..0.06) };
        g[j] + jitter
    });
    (Value::Real(pred), gts)
}

fn box_geometry(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    const G: &str = "box-geometry";
    [("giou_loss", BoxLoss::Giou), ("siou_loss", BoxLoss::Siou), ("inner_siou_loss", BoxLoss::InnerSiou { ratio: DEFAULT_INNER_RATIO })]
        .into_iter()
        .map(|(name, loss)| {
            let (pred, gts) = box_pairs(6, rng);
            GradCase::new(G, name, vec![pred], move |g, v| g.box_loss_sum(v[0], &gts, loss))
        })
        .collect()
}

fn detection_head(rng: &mut ChaCha8Rng) -> Result<Vec<GradCase>> {
    const G: &str = "detection-head";
    let (n, k, q) = (2, 3, 6);
    let mut cases = Vec::new();
    for (name, loss) in [
        ("detection_loss_giou", BoxLoss::Giou),
        ("detection_loss_inner_siou", BoxLoss::InnerSiou { ratio: DEFAULT_INNER_RATIO }),
    ] {
        let logits = signed_away((n, k, q, 1), rng, 0.1, 2.0);
        let boxes = Tensor::from_fn((n, 4, q, 1), |_, j, _, _| {
            if j < 2 {
                rng.gen_range(0.2..0.8)
            } else {
                rng.gen_range(0.1..0.3)
            }
        });
        let gts: Vec<BoxSet> = (0..n)
            .map(|i| {
                let m = i + 2;
                let b = (0..m)
                    .map(|_| {
                        Bbox::new(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.1..0.3), rng.gen_range(0.1..0.3))
                    })
                    .collect();
                BoxSet::new(b, (0..m).map(|_| rng.gen_range(0..k)).collect()).expect("lengths match")
            })
            .collect();
        let lt = logits.as_real()?.clone();
        // Matching is piecewise constant; it is fixed at the unperturbed point.
        let matches = match_batch(&lt, &boxes, &gts, CostWeights::default(), DEFAULT_INNER_RATIO)?;
        let cfg = LossConfig { box_loss: loss, ..LossConfig::default() };
        cases.push(GradCase::new(G, name, vec![logits, Value::Real(boxes)], move |g, v| {
            g.detection_loss(v[0], v[1], &gts, &matches, cfg)
        }));
    }
    Ok(cases)
}

/// Every registered case with inputs drawn from `seed`.
pub fn gradcheck_cases(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = tensor_core(&mut rng);
    cases.extend(spectral(&mut rng));
    cases.extend(neural_ops(&mut rng));
    cases.extend(freq_modules(&mut rng, seed)?);
    cases.extend(box_geometry(&mut rng));
    cases.extend(detection_head(&mut rng)?);
    Ok(cases)
}

/// Cases of one group, or all of them for `None`.
pub fn cases_for(group: Option<&str>, seed: u64) -> Result<Vec<GradCase>> {
    if let Some(gname) = group {
        if !GROUPS.contains(&gname) {
            return Err(Error::Config(format!("unknown module `{gname}`; expected one of {}", GROUPS.join(", "))));
        }
    }
    Ok(gradcheck_cases(seed)?.into_iter().filter(|c| group.map_or(true, |g| c.group == g)).collect())
}

/// Report of a case that could not be evaluated at all.
pub fn failed_report(name: &str, err: &Error) -> GradcheckReport {
    GradcheckReport {
        name: format!("{name} ({err})"),
        max_rel_error: f64::INFINITY,
        max_abs_error: f64::INFINITY,
        coords_checked: 0,
        pass: false,
    }
}

pub fn run_cases(cases: &[GradCase], seed: u64, opts: &GradcheckOptions) -> Vec<GradcheckReport> {
    cases.iter().map(|c| c.run(seed, opts).unwrap_or_else(|e| failed_report(&c.name, &e))).collect()
}
