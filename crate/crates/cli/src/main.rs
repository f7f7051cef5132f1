use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wavekernel::acoustics::{load_dataset, save_dataset, simulate};
use wavekernel::experiment::{
    diffuse_model, evaluate, gradcheck_instance, parse_config, run_with, train_realization, EvalReport,
    ExperimentConfig, Method, Progress, ReportRow,
};
use wavekernel::trainer::validate_gradients;
use wavekernel::{checkpoint, Error, Result};

#[derive(Parser)]
#[command(name = "wavekernel", version, about = "Deep-kernel GP sound-field estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Realization index used for geometry, source and network seeds.
    #[arg(long, default_value_t = 0)]
    realization: usize,
    /// Suppress progress output on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one realization and write it as a dataset file.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a deep kernel on a dataset file; writes a checkpoint and loss curve.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// `dk`, `dkpde` or `dkpdeN`.
        #[arg(long, default_value = "dk")]
        method: String,
        /// Collocation points for a bare `dkpde`.
        #[arg(long)]
        colloc: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// NMSE of a trained checkpoint, or of the diffuse baseline, on the held-out batch.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Omit for the diffuse baseline.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full protocol: simulate, train and evaluate every realization and method.
    Run {
        #[command(flatten)]
        common: Common,
        /// Comma-separated methods, replacing the configured list.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        colloc: Option<usize>,
        /// Output directory, replacing the configured one.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of both objectives on a small network.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 2)]
        depth: usize,
        #[arg(long, default_value_t = 8)]
        width: usize,
        #[arg(long, default_value_t = 10)]
        measurements: usize,
        #[arg(long, default_value_t = 4)]
        colloc: usize,
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => parse_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => Ok(std::fs::write(p, text)?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// What `main` reports on stderr before exiting nonzero.
struct Failure {
    kind: &'static str,
    message: String,
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { kind: e.kind(), message: e.to_string() }
    }
}

fn execute(cli: Cli) -> std::result::Result<(), Failure> {
    match cli.command {
        Command::Simulate { common, out } => {
            let cfg = load_config(&common)?;
            let data = simulate(&cfg.scenario(common.realization))?;
            save_dataset(&out, &data)?;
            if !common.quiet {
                eprintln!(
                    "wrote {} ({} mics, {} training batches, noise std {:.3e})",
                    out.display(),
                    data.mic_positions.len(),
                    data.train_batches().len(),
                    data.noise_std
                );
            }
        }
        Command::Train { common, data, method, colloc, out } => {
            let mut cfg = load_config(&common)?;
            if let Some(n) = colloc {
                cfg.n_colloc = n;
            }
            let method = Method::parse(&method, cfg.n_colloc)?;
            if !method.is_trained() {
                return Err(Error::InvalidConfig("the diffuse method has no training stage".into()).into());
            }
            let data = load_dataset(&data)?;
            std::fs::create_dir_all(&out)?;
            let ckpt = out.join(format!("model_{method}.ckpt"));
            let every = cfg.checkpoint_every;
            let quiet = common.quiet;
            let state = train_realization(&cfg, &data, method, common.realization, |s| {
                if !quiet && (s.step % 100 == 0 || s.step == cfg.epochs) {
                    eprintln!("step {:>6}  loss {:.6e}", s.step, s.losses.last().copied().unwrap_or(f64::NAN));
                }
                if every > 0 && s.step % every == 0 {
                    checkpoint::save(&ckpt, s)?;
                }
                Ok(())
            })?;
            checkpoint::save(&ckpt, &state)?;
            let mut buf = Vec::new();
            state.write_loss_csv(&mut buf)?;
            std::fs::write(out.join(format!("loss_{method}.csv")), buf)?;
            if !quiet {
                eprintln!("wrote {}", ckpt.display());
            }
        }
        Command::Evaluate { common, data, checkpoint: ckpt, out } => {
            let cfg = load_config(&common)?;
            let data = load_dataset(&data)?;
            let (method, eval) = match ckpt {
                Some(p) => {
                    let state = checkpoint::load(&p)?;
                    let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    (name, evaluate(&cfg, &state.params, &data)?)
                }
                None => (Method::Diffuse.to_string(), evaluate(&cfg, &diffuse_model(&cfg, &data), &data)?),
            };
            let mut text = String::from("method,band_lo,band_hi,nmse_db\n");
            text.push_str(&format!("{method},,,{:.6}\n", eval.nmse_db));
            for b in &eval.bands {
                text.push_str(&format!("{method},{},{},{:.6}\n", b.lo, b.hi, b.nmse_db));
            }
            write_or_print(out.as_deref(), &text)?;
        }
        Command::Run { common, method, colloc, out } => {
            let mut cfg = load_config(&common)?;
            if let Some(m) = method {
                cfg.methods = m;
            }
            if let Some(n) = colloc {
                cfg.n_colloc = n;
            }
            if let Some(o) = out {
                cfg.output = o.display().to_string();
            }
            cfg.validate()?;
            let dir = PathBuf::from(&cfg.output);
            let quiet = common.quiet;
            let report: EvalReport = run_with(&cfg, Some(&dir), |p| {
                if quiet {
                    return;
                }
                match p {
                    Progress::Simulated { realization } => eprintln!("realization {realization}: simulated"),
                    Progress::Step { realization, method, state } if state.step % 500 == 0 => eprintln!(
                        "realization {realization} {method}: step {} loss {:.4e}",
                        state.step,
                        state.losses.last().copied().unwrap_or(f64::NAN)
                    ),
                    Progress::Evaluated { realization, method, nmse_db } => {
                        eprintln!("realization {realization} {method}: NMSE {nmse_db:.2} dB")
                    }
                    _ => {}
                }
            })?;
            for m in cfg.methods()? {
                let rows: Vec<&ReportRow> = report.rows.iter().filter(|r| r.method == m && r.band.is_none()).collect();
                if let Some(mean) = report.mean_nmse(m) {
                    println!("{m}: mean NMSE {mean:.2} dB over {} realization(s)", rows.len());
                }
            }
            println!("results in {}", dir.display());
        }
        Command::Gradcheck { common, depth, width, measurements, colloc, step, tolerance } => {
            let cfg = load_config(&common)?;
            let data = simulate(&cfg.scenario(common.realization))?;
            let (model, subset, xz) = gradcheck_instance(&cfg, &data, depth, width, measurements, colloc)?;
            let r = validate_gradients(&model, &subset, &xz, step)?;
            println!("parameters,{}", model.num_params());
            println!("nll_simple_max_rel_err,{:.3e}", r.simple.max_rel_err);
            println!("nll_joint_max_rel_err,{:.3e}", r.joint.max_rel_err);
            if r.max_rel_err().is_nan() || r.max_rel_err() >= tolerance {
                return Err(Failure {
                    kind: "GradientMismatch",
                    message: format!("max relative error {:.3e} exceeds {tolerance:e}", r.max_rel_err()),
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error kind={} message=\"{}\"", f.kind, f.message.replace('"', "'"));
            ExitCode::FAILURE
        }
    }
}
