//! Wall-clock micro-benchmarks of single forward operations.

use std::time::{Duration, Instant};

use freqdet_core::freq::{FdBlock, FfBlock, MsffBlock, MsffConfig, SacBlock};
use freqdet_core::gradcheck::random_tensor;
use freqdet_core::nn::ConvSpec;
use freqdet_core::spectral::{fft2, ifft2};
use freqdet_core::{Error, Graph, ParamStore, Result, Tensor, Value};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const OPS: [&str; 10] = ["fft2", "ifft2", "conv3x3", "dwconv31", "gelu", "grid_sample", "ff", "msff", "fd", "sac"];
pub const WARMUP: usize = 5;
pub const RUNS: usize = 30;
/// Operations faster than this are repeated inside one timed run.
const MIN_RUN: Duration = Duration::from_millis(2);
const CHANNELS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub op: String,
    pub size: (usize, usize),
    pub median_ns: f64,
    /// Coefficient of variation of the per-run times.
    pub cov: f64,
    pub runs: usize,
}

impl BenchResult {
    pub fn line(&self) -> String {
        format!(
            "op={} size={}x{} runs={} median_ns={:.0} cov={:.3}",
            self.op, self.size.0, self.size.1, self.runs, self.median_ns, self.cov
        )
    }
}

pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("size `{s}` is not of the form HxW"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let (h, w): (usize, usize) = (h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?);
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

fn tensor(shape: impl Into<freqdet_core::Shape>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    match random_tensor(shape, rng, -1.0, 1.0) {
        Value::Real(t) => t,
        Value::Complex(_) => unreachable!(),
    }
}

type Job = Box<dyn FnMut() -> Result<()>>;

fn block_job(
    store: ParamStore<f64>,
    inputs: Vec<Tensor<f64>>,
    f: impl Fn(&mut Graph<f64>, &freqdet_core::Bound, &[freqdet_core::Var]) -> Result<freqdet_core::Var> + 'static,
) -> Job {
    Box::new(move || {
        let mut g = Graph::new();
        let p = crate::model::bind_frozen(&mut g, &store);
        let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        f(&mut g, &p, &vars)?;
        Ok(())
    })
}

fn job(op: &str, (h, w): (usize, usize)) -> Result<Job> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let c = CHANNELS;
    let x = tensor((1, c, h, w), &mut rng);
    Ok(match op {
        "fft2" => Box::new(move || fft2(&x).map(drop)),
        "ifft2" => {
            let s = fft2(&x)?;
            Box::new(move || ifft2(&s).map(drop))
        }
        "conv3x3" | "dwconv31" => {
            let spec = if op == "conv3x3" { ConvSpec::same(c, c, 3) } else { ConvSpec::depthwise(c, 31, 15) };
            let wt = tensor(spec.weight_shape(), &mut rng);
            Box::new(move || freqdet_core::nn::conv2d_forward(&x, &wt, None, spec).map(drop))
        }
        "gelu" => Box::new(move || {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            g.gelu(v);
            Ok(())
        }),
        "grid_sample" => {
            let off = tensor((1, 2, h, w), &mut rng);
            Box::new(move || {
                let mut g = Graph::new();
                let (a, b) = (g.constant(x.clone()), g.constant(off.clone()));
                g.grid_sample(a, b).map(drop)
            })
        }
        "ff" => {
            let block = FfBlock::new("ff", c);
            let mut store = ParamStore::new();
            block.register(&mut store, 0)?;
            block_job(store, vec![x], move |g, p, v| block.forward(g, p, v[0]))
        }
        "msff" => {
            let block = MsffBlock::new("msff", MsffConfig::single(c))?;
            let mut store = ParamStore::new();
            block.register(&mut store, 0)?;
            block_job(store, vec![x], move |g, p, v| block.forward(g, p, None, &[v[0]]))
        }
        "fd" => {
            let block = FdBlock::new("fd", c, c)?;
            let mut store = ParamStore::new();
            block.register(&mut store, 0)?;
            block_job(store, vec![x], move |g, p, v| block.forward(g, p, v[0]))
        }
        "sac" => {
            let block = SacBlock::new("sac", c, c, c);
            let mut store = ParamStore::new();
            block.register(&mut store, 0)?;
            let low = tensor((1, c, (h / 2).max(1), (w / 2).max(1)), &mut rng);
            block_job(store, vec![x, low], move |g, p, v| block.forward(g, p, v[0], v[1]))
        }
        other => return Err(Error::Config(format!("unknown op `{other}`; expected one of {}", OPS.join(", ")))),
    })
}

/// Median and spread of `RUNS` timed runs after `WARMUP` untimed ones.
pub fn bench(op: &str, size: (usize, usize)) -> Result<BenchResult> {
    let mut run = job(op, size)?;
    let t = Instant::now();
    run()?;
    let once = t.elapsed().max(Duration::from_nanos(1));
    let reps = (MIN_RUN.as_nanos() / once.as_nanos()).max(1) as usize;
    let mut timed = |n: usize| -> Result<Vec<f64>> {
        (0..n)
            .map(|_| {
                let t = Instant::now();
                for _ in 0..reps {
                    run()?;
                }
                Ok(t.elapsed().as_nanos() as f64 / reps as f64)
            })
            .collect()
    };
    timed(WARMUP)?;
    let mut samples = timed(RUNS)?;
    samples.sort_by(f64::total_cmp);
    let median = (samples[RUNS / 2 - 1] + samples[RUNS / 2]) / 2.0;
    let mean = samples.iter().sum::<f64>() / RUNS as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (RUNS - 1) as f64;
    Ok(BenchResult { op: op.to_string(), size, median_ns: median, cov: var.sqrt() / mean, runs: RUNS })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(parse_size("16x32").unwrap(), (16, 32));
        for bad in ["16", "x4", "0x4", "ax4"] {
            assert!(parse_size(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn every_op_runs() {
        for op in OPS {
            job(op, (8, 8)).unwrap()().unwrap();
        }
        assert!(job("nope", (8, 8)).is_err());
    }
}
