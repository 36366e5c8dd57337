use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hieratt::analysis::{calibrate, cost_report, published_targets, SearchSpace};
use hieratt::harness::{train_toy_with, ImageBuffer, ToyRun};
use hieratt::network::{Model, ModelConfig};
use hieratt::{gradcheck, selfcheck, DType, Error, Result, Tensor4};

#[derive(Parser)]
#[command(name = "hieratt", version, about = "Window/grid attention restoration network tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer parameter and MAC table for a configuration.
    Analyze {
        /// small, base, base+, toy, or a path to a config JSON file
        #[arg(long)]
        config: String,
        /// Input size as HxW
        #[arg(long, value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long)]
        json: bool,
        /// Count the training (unfused) form
        #[arg(long)]
        unfused: bool,
        /// Also print the preset calibration search
        #[arg(long)]
        calibration: bool,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run one case only
        #[arg(long)]
        op: Option<String>,
    },
    /// Collapse the feed-forward branches of a saved model.
    Fuse {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy denoiser on synthetic data.
    TrainToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iters: Option<usize>,
        /// Noise level on the 0–255 scale
        #[arg(long)]
        sigma: Option<f64>,
        /// JSON with optional `model` and `train` sections
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Denoise a binary PGM/PPM image.
    Denoise {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the invariant suite; exits nonzero on failure.
    Selfcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let h: usize = h.trim().parse().map_err(|e| format!("height: {e}"))?;
    let w: usize = w.trim().parse().map_err(|e| format!("width: {e}"))?;
    if h == 0 || w == 0 {
        return Err("sizes must be positive".into());
    }
    Ok((h, w))
}

fn load_config(arg: &str) -> Result<ModelConfig> {
    if let Some(cfg) = ModelConfig::named(arg) {
        return Ok(cfg);
    }
    let path = Path::new(arg);
    if !path.exists() {
        return Err(Error::Usage(format!(
            "`{arg}` is neither a preset (small, base, base+, toy) nor a file"
        )));
    }
    ModelConfig::from_json(&std::fs::read_to_string(path)?)
}

fn threads_from_env() -> Result<()> {
    match std::env::var("HIERATT_THREADS") {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::Usage(format!("HIERATT_THREADS must be a non-negative integer, got `{v}`")))?;
            hieratt::init_threads(n)
        }
        Err(_) => Ok(()),
    }
}

fn run(cli: Cli) -> Result<bool> {
    threads_from_env()?;
    match cli.command {
        Command::Analyze {
            config,
            size: (h, w),
            json,
            unfused,
            calibration,
        } => {
            let cfg = load_config(&config)?;
            let report = cost_report(&cfg, h, w, !unfused);
            if json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.to_table(true));
            }
            if calibration {
                let cal = calibrate(&published_targets(), &SearchSpace::default());
                if json {
                    println!("{}", serde_json::to_string_pretty(&cal)?);
                } else {
                    print!("\n{}", cal.to_table(10));
                }
            }
            Ok(true)
        }
        Command::Gradcheck { seed, op } => {
            let cases = match op {
                Some(name) => vec![gradcheck::case(&name).ok_or_else(|| {
                    let known: Vec<&str> = gradcheck::cases().iter().map(|c| c.name).collect();
                    Error::Usage(format!("unknown op `{name}`; known: {}", known.join(", ")))
                })?],
                None => gradcheck::cases(),
            };
            let mut ok = true;
            for case in &cases {
                let r = case.run(seed)?;
                ok &= r.passed();
                println!(
                    "[{}] {:<22} max rel err {:.3e} (tol {:.0e}, {} entries)",
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.name,
                    r.max_rel_err,
                    r.tolerance,
                    r.checked
                );
            }
            Ok(ok)
        }
        Command::Fuse { input, out } => {
            let model = Model::load(&input)?;
            let before = model.num_params();
            let fused = model.fused()?;
            fused.save(&out)?;
            println!("fused {} → {} parameters, wrote {}", before, fused.num_params(), out.display());
            Ok(true)
        }
        Command::TrainToy {
            out,
            seed,
            iters,
            sigma,
            config,
        } => {
            let mut run = match config {
                Some(p) => ToyRun::from_json(&std::fs::read_to_string(p)?)?,
                None => ToyRun::default(),
            };
            if let Some(s) = seed {
                run.train.seed = s;
                run.model.seed = s;
            }
            if let Some(n) = iters {
                run.train.iterations = n;
            }
            if let Some(s) = sigma {
                run.train.sigma = s;
            }
            let outcome = train_toy_with(&run.model, &run.train, |e| {
                if let Some(p) = e.val_psnr {
                    eprintln!("iter {:>5}  lr {:.2e}  loss {:.5}  val {:.2} dB", e.iteration + 1, e.lr, e.loss, p);
                }
            })?;
            outcome.model.save(&out)?;
            let mut log_path = out.as_os_str().to_owned();
            log_path.push(".log.json");
            let log = serde_json::json!({
                "run": run,
                "noisy_psnr": outcome.noisy_psnr,
                "final_psnr": outcome.final_psnr,
                "log": outcome.log,
            });
            std::fs::write(&log_path, serde_json::to_string_pretty(&log)?)?;
            println!(
                "noisy {:.2} dB → denoised {:.2} dB (+{:.2}); wrote {}",
                outcome.noisy_psnr,
                outcome.final_psnr,
                outcome.final_psnr - outcome.noisy_psnr,
                out.display()
            );
            Ok(true)
        }
        Command::Denoise { model, input, out } => {
            let model = Model::load(&model)?;
            let img = ImageBuffer::read_pnm(&input)?;
            if img.channels() != model.config.image_channels {
                return Err(Error::Usage(format!(
                    "image has {} channels, model expects {}",
                    img.channels(),
                    model.config.image_channels
                )));
            }
            let y: Tensor4 = match model.config.dtype {
                DType::F64 => model.forward(&img.to_tensor::<f64>())?,
                DType::F32 => model.forward(&img.to_tensor::<f32>())?.cast(),
            };
            ImageBuffer::from_tensor(&y)?.write_pnm(&out)?;
            println!("wrote {} ({}x{})", out.display(), img.height(), img.width());
            Ok(true)
        }
        Command::Selfcheck { seed } => {
            let checks = selfcheck::run_all(seed)?;
            for c in &checks {
                println!("{}", c.line());
            }
            Ok(checks.iter().all(|c| c.passed))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) | Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
