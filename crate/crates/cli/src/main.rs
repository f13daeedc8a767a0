use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use iapl::data::{build_dataset, load_directory, parse_counts, write_dataset, ArtifactConfig, DatasetSpec};
use iapl::eval::{check_compatible, emit_report, evaluate, train_model, ReportFormat, RunConfig};
use iapl::training::{grad_check, load_checkpoint, save_checkpoint, write_log_csv};
use iapl::tta::LossKind;
use iapl::IaplError;

#[derive(Parser)]
#[command(name = "iapl", version, about = "Synthetic-image detection with image-adaptive prompts")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        matches!(self, Self::On)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as PNG files plus manifest.csv.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// e.g. real=1000,fakeA=1000
        #[arg(long)]
        counts: String,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a detector; writes CKPT, CKPT.cfg and CKPT.log.csv.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to CKPT.cfg when present.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        tta: Option<Switch>,
        #[arg(long, value_enum)]
        ovs: Option<Switch>,
        #[arg(long)]
        loss: Option<String>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value = "json")]
        format: String,
    },
    /// Finite-difference check of the tiny model's training gradient.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
    },
}

fn sidecar(ckpt: &Path, suffix: &str) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_config(path: Option<&Path>) -> iapl::Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> iapl::Result<()> {
    match cli.cmd {
        Command::GenData { out, counts, size, seed } => {
            let counts = parse_counts(&counts).map_err(|e| IaplError::Config(e.to_string()))?;
            let spec = DatasetSpec::Synthetic { counts, size, seed, artifacts: ArtifactConfig::default() };
            let samples = build_dataset(&spec).map_err(|e| IaplError::Config(e.to_string()))?;
            write_dataset(&samples, &out)?;
            println!("wrote {} images to {}", samples.len(), out.display());
        }
        Command::Train { config, data, out } => {
            let run = load_config(config.as_deref())?;
            let samples = load_directory(&data)?;
            let (params, log) = train_model(&run, &samples)?;
            save_checkpoint(&params, &out)?;
            std::fs::write(sidecar(&out, ".cfg"), run.to_text())?;
            write_log_csv(sidecar(&out, ".log.csv"), &log)?;
            if let Some(last) = log.last() {
                println!("trained {} steps on {} images; final loss {:.4}", log.len(), samples.len(), last.total);
            }
        }
        Command::Eval { ckpt, data, config, tta, ovs, loss, report, format } => {
            let format: ReportFormat = format.parse().map_err(|e: IaplError| IaplError::Config(e.to_string()))?;
            let cfg_path = config.or_else(|| Some(sidecar(&ckpt, ".cfg")).filter(|p| p.exists()));
            let mut run = load_config(cfg_path.as_deref())?;
            if let Some(t) = tta {
                run.tta.enabled = t.on();
            }
            if let Some(o) = ovs {
                run.tta.ovs = o.on();
            }
            if let Some(l) = loss {
                run.tta.loss = l.parse::<LossKind>().map_err(|e| IaplError::Config(e.to_string()))?;
            }
            let params = load_checkpoint(&ckpt)?;
            check_compatible(&params, &run.model)?;
            let samples = load_directory(&data)?;
            let start = std::time::Instant::now();
            let mut ev = evaluate(&params, &run, &samples)?;
            ev.report.config.insert("data.test".into(), data.display().to_string());
            ev.report.wall_time = start.elapsed().as_secs_f64();
            let r = &ev.report;
            println!(
                "acc {:.4}  ap {}  macro acc {:.4}  samples {}  tta failures {}",
                r.acc,
                r.ap.map_or("n/a".to_string(), |v| format!("{v:.4}")),
                r.macro_acc,
                r.n_samples,
                r.tta_failures
            );
            if let Some(path) = report {
                emit_report(r, &path, format)?;
            }
        }
        Command::GradCheck { seed, eps } => {
            let rep = grad_check(seed, eps)?;
            for t in &rep.tensors {
                println!("{:<40} {:>6} {:.3e}", t.name, t.numel, t.max_rel_error);
            }
            let max = rep.max_rel_error();
            println!("max relative error {max:.3e} over {} scalars ({} on a kink)", rep.checked(), rep.on_kink());
            if max >= 1e-4 {
                return Err(IaplError::Training { tensor: "*".into(), msg: format!("gradient mismatch {max:.3e}") });
            }
        }
    }
    Ok(())
}

fn exit_code(e: &IaplError) -> u8 {
    match e {
        IaplError::Config(_) | IaplError::Argument(_) => 2,
        IaplError::Data(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    if let Some(n) = std::env::var("IAPL_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // Only fails if a pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
