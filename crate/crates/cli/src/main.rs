use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::builder::PossibleValuesParser;
use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand};
use freqdet_cli::bench::{self, parse_size, OPS};
use freqdet_cli::config::check_image_size;
use freqdet_cli::evaluate::evaluate;
use freqdet_cli::selftest::{self, Fault};
use freqdet_cli::train::{train, TrainOptions};
use freqdet_cli::{checkpoint, Detector, DetectorConfig};
use freqdet_core::checks::{cases_for, run_cases, GROUPS};
use freqdet_core::gradcheck::GradcheckOptions;
use freqdet_core::scenes::{self, SceneSpec};

#[derive(Parser)]
#[command(name = "freqdet", version, about = "Frequency-aware toy detector: checks, data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every oracle and gradient suite; exit 1 if any fails.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true, value_parser = ["magnitude-sign"])]
        inject_fault: Option<String>,
    },
    /// Finite-difference gradient checks, one summary line per op.
    Gradcheck {
        #[arg(long, value_parser = PossibleValuesParser::new(GROUPS))]
        module: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0.3)]
        occlusion: f64,
    },
    /// Train from scratch and write a checkpoint (plus `<out>.cfg`).
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Train on the first batch only.
        #[arg(long)]
        overfit_batch: bool,
    },
    /// Print `AP=<v> AP50=<v>` for a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Defaults to the `<ckpt>.cfg` written by `train`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
    },
    /// Median forward time per op in ns.
    Bench {
        #[arg(long, value_parser = PossibleValuesParser::new(OPS))]
        op: Option<String>,
        #[arg(long, default_value = "32x32")]
        size: String,
    },
}

fn sidecar(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

fn load_data(path: &Path) -> anyhow::Result<Vec<scenes::Sample>> {
    scenes::load(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Selftest { seed, inject_fault } => {
            let fault = inject_fault.map(|_| Fault::MagnitudeSign);
            let reports = selftest::run(seed, fault);
            for r in &reports {
                println!("{}", r.line());
                for f in &r.failures {
                    println!("  FAILED {f}");
                }
            }
            let failed = reports.iter().filter(|r| !r.pass).count();
            println!("suites={} failed={failed}", reports.len());
            Ok(failed == 0)
        }
        Command::Gradcheck { module, seed } => {
            let cases = cases_for(module.as_deref(), seed)?;
            let reports = run_cases(&cases, seed, &GradcheckOptions::default());
            for r in &reports {
                println!("{}", r.summary());
            }
            Ok(reports.iter().all(|r| r.pass))
        }
        Command::GenData { out, count, seed, size, occlusion } => {
            check_image_size(size)?;
            let spec = SceneSpec { height: size, width: size, occlusion, seed, ..SceneSpec::default() };
            let data = scenes::generate(&spec, count)?;
            scenes::save(&data, &out).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {count} samples to {}", out.display());
            Ok(true)
        }
        Command::Train { data, config, out, steps, seed, overfit_batch } => {
            let cfg = match &config {
                Some(p) => DetectorConfig::load(p).with_context(|| format!("config {}", p.display()))?,
                None => DetectorConfig::default(),
            };
            Detector::new(&cfg)?;
            let samples = load_data(&data)?;
            let opts = TrainOptions { steps, seed, overfit_batch };
            let (store, _) = train(&cfg, &samples, &opts, |log| println!("{}", log.line()))?;
            checkpoint::save(&store, &out).with_context(|| format!("writing {}", out.display()))?;
            let cfg = DetectorConfig { seed: seed.unwrap_or(cfg.seed), ..cfg };
            std::fs::write(sidecar(&out), cfg.to_text())?;
            println!("wrote {} tensors to {}", store.len(), out.display());
            Ok(true)
        }
        Command::Eval { data, ckpt, config, iou } => {
            if !(0.0..=1.0).contains(&iou) {
                bail!("--iou must lie in [0, 1], got {iou}");
            }
            let cfg_path = config.unwrap_or_else(|| sidecar(&ckpt));
            let cfg = if cfg_path.exists() {
                DetectorConfig::load(&cfg_path).with_context(|| format!("config {}", cfg_path.display()))?
            } else {
                DetectorConfig::default()
            };
            let det = Detector::new(&cfg)?;
            let store = checkpoint::load(&ckpt).with_context(|| format!("reading checkpoint {}", ckpt.display()))?;
            checkpoint::check_compatible(&det.init_params(0)?, &store)?;
            let result = evaluate(&det, &store, &load_data(&data)?, iou)?;
            println!("{}", result.line());
            Ok(true)
        }
        Command::Bench { op, size } => {
            let size = parse_size(&size)?;
            let ops: Vec<&str> = match &op {
                Some(o) => vec![o.as_str()],
                None => OPS.to_vec(),
            };
            for o in ops {
                println!("{}", bench::bench(o, size)?.line());
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let _ = e.print();
            eprintln!("\n{}", Cli::command().render_usage());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
