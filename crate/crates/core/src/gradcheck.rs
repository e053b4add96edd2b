//! Central finite-difference verification of backward rules.
//!
//! The output of the operation under test is projected onto a scalar with
//! fixed random weights, so one backward pass checks a full vector-Jacobian
//! product. Each input coordinate is then perturbed by
//! `h = 1e-5 * max(1, |x|)` in both directions and the symmetric difference
//! quotient is compared against the analytic gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Value, Var};
use crate::spectral::Spectrum;
use crate::tensor::Tensor;

/// Pass threshold on the relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub tolerance: f64,
    /// Cap on perturbed coordinates per input; larger inputs are subsampled.
    pub max_coords_per_input: usize,
    /// Coordinates whose analytic and numeric gradients are both below this
    /// fraction of the input's largest gradient are compared against that floor.
    pub relative_floor: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { tolerance: GRADCHECK_TOLERANCE, max_coords_per_input: 600, relative_floor: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coords_checked: usize,
    pub pass: bool,
}

impl GradcheckReport {
    /// `name max_rel_err=<v> pass=<bool>` summary line.
    pub fn summary(&self) -> String {
        format!(
            "{} max_rel_err={:.3e} coords={} pass={}",
            self.name, self.max_rel_error, self.coords_checked, self.pass
        )
    }
}

fn insert_inputs(g: &mut Graph<f64>, inputs: &[Value<f64>]) -> Vec<Var> {
    inputs
        .iter()
        .map(|v| match v {
            Value::Real(t) => g.param(t.clone()),
            Value::Complex(s) => g.spectrum_leaf(s.clone(), true),
        })
        .collect()
}

/// Random projection of the op output onto a scalar loss.
struct Projection {
    re: Tensor<f64>,
    im: Option<Tensor<f64>>,
}

impl Projection {
    fn new(out: &Value<f64>, rng: &mut ChaCha8Rng) -> Self {
        let shape = out.shape();
        let mut draw = || Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0));
        match out {
            Value::Real(_) => Projection { re: draw(), im: None },
            Value::Complex(_) => {
                let re = draw();
                Projection { re, im: Some(draw()) }
            }
        }
    }

    fn apply(&self, g: &mut Graph<f64>, out: Var) -> Result<Var> {
        match &self.im {
            None => g.weighted_sum(out, &self.re),
            Some(im_w) => {
                let re = g.real_part(out)?;
                let im = g.imag_part(out)?;
                let a = g.weighted_sum(re, &self.re)?;
                let b = g.weighted_sum(im, im_w)?;
                g.add(a, b)
            }
        }
    }
}

fn coordinate_count(v: &Value<f64>) -> usize {
    match v {
        Value::Real(t) => t.len(),
        Value::Complex(s) => 2 * s.re().len(),
    }
}

fn read_coord(v: &Value<f64>, i: usize) -> f64 {
    match v {
        Value::Real(t) => t.data()[i],
        Value::Complex(s) => {
            let n = s.re().len();
            if i < n {
                s.re()[i]
            } else {
                s.im()[i - n]
            }
        }
    }
}

fn write_coord(v: &mut Value<f64>, i: usize, x: f64) {
    match v {
        Value::Real(t) => t.data_mut()[i] = x,
        Value::Complex(s) => {
            let n = s.re().len();
            let (re, im) = s.parts_mut();
            if i < n {
                re[i] = x
            } else {
                im[i - n] = x
            }
        }
    }
}

fn grad_coord(g: Option<&Value<f64>>, i: usize) -> f64 {
    g.map_or(0.0, |v| read_coord(v, i))
}

/// Checks every input gradient of `op` at `inputs` against central differences.
pub fn gradcheck<F>(name: &str, op: F, inputs: &[Value<f64>], seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut g = Graph::new();
    let vars = insert_inputs(&mut g, inputs);
    let out = op(&mut g, &vars)?;
    let finite = match g.value(out) {
        Value::Real(t) => t.is_finite(),
        Value::Complex(s) => s.re().iter().chain(s.im()).all(|v| v.is_finite()),
    };
    if !finite {
        return Err(Error::Contract(format!("gradcheck `{name}`: forward output is not finite")));
    }
    let projection = Projection::new(g.value(out), &mut rng);
    let loss = projection.apply(&mut g, out)?;
    g.backward(loss)?;
    let analytic: Vec<Option<Value<f64>>> = vars.iter().map(|&v| g.grad(v).cloned()).collect();

    let eval = |perturbed: &[Value<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = insert_inputs(&mut g, perturbed);
        let out = op(&mut g, &vars)?;
        let loss = projection.apply(&mut g, out)?;
        g.tensor(loss).item()
    };

    let mut work = inputs.to_vec();
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut checked = 0;
    for k in 0..inputs.len() {
        let total = coordinate_count(&inputs[k]);
        let coords: Vec<usize> = if total <= opts.max_coords_per_input {
            (0..total).collect()
        } else {
            (0..opts.max_coords_per_input).map(|_| rng.gen_range(0..total)).collect()
        };
        let mut pairs = Vec::with_capacity(coords.len());
        for &i in &coords {
            let x0 = read_coord(&inputs[k], i);
            let h = 1e-5 * x0.abs().max(1.0);
            write_coord(&mut work[k], i, x0 + h);
            let up = eval(&work)?;
            write_coord(&mut work[k], i, x0 - h);
            let down = eval(&work)?;
            write_coord(&mut work[k], i, x0);
            let numeric = (up - down) / (2.0 * h);
            pairs.push((grad_coord(analytic[k].as_ref(), i), numeric));
        }
        let scale = pairs.iter().fold(0.0f64, |m, &(a, n)| m.max(a.abs()).max(n.abs()));
        let floor = (opts.relative_floor * scale).max(1e-12);
        for (a, n) in pairs {
            let abs = (a - n).abs();
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(abs / a.abs().max(n.abs()).max(floor));
        }
        checked += coords.len();
    }
    if !max_rel.is_finite() {
        return Err(Error::Contract(format!("gradcheck `{name}`: non-finite error")));
    }
    Ok(GradcheckReport {
        name: name.to_string(),
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        coords_checked: checked,
        pass: max_rel < opts.tolerance,
    })
}

/// Uniform random real input.
pub fn random_tensor(shape: impl Into<crate::Shape>, rng: &mut impl Rng, lo: f64, hi: f64) -> Value<f64> {
    Value::Real(Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi)))
}

/// Uniform random complex input.
pub fn random_spectrum(shape: impl Into<crate::Shape>, rng: &mut impl Rng) -> Value<f64> {
    let shape = shape.into();
    let re = (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let im = (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Value::Complex(Spectrum::new(shape, re, im).expect("lengths match"))
}
