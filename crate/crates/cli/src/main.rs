use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use relhoi::synth::INTERACTIONS;
use relhoi_cli::{cmd_dump_attn, cmd_eval, cmd_gradcheck, cmd_synth, cmd_train, CliError, Profile, RunConfig};

#[derive(Parser)]
#[command(name = "relhoi", version, about = "Synthetic HOI detection: synthesize, train, evaluate, inspect")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config (JSON); the toy profile when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scene dataset and print its interaction census.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also store rendered pixels in a sidecar file.
        #[arg(long)]
        pixels: bool,
    },
    /// Train from the seeded initialization.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Training set; overrides `train_data`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Metrics log; overrides `metrics`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint and write the report as JSON.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluation set; overrides `eval_data`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Write attention maps and the annotated scene for one image.
    DumpAttn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        index: usize,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::from_profile(Profile::Toy),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn need(p: Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    p.ok_or_else(|| CliError::Usage(format!("{what} is required (flag or config)")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { common, count, out, pixels } => {
            let cfg = load(&common)?;
            let census = cmd_synth(&cfg, count, &out, pixels)?;
            println!("wrote {count} scenes to {}", out.display());
            for (name, n) in INTERACTIONS.iter().zip(census) {
                let pct = if count > 0 { 100.0 * n as f64 / count as f64 } else { 0.0 };
                println!("{name:>8}  {n:>6}  {pct:5.1}%");
            }
        }
        Command::Train { common, steps, checkpoint, data, out } => {
            let mut cfg = load(&common)?;
            cfg.steps = steps.unwrap_or(cfg.steps);
            cfg.checkpoint = checkpoint.or(cfg.checkpoint);
            cfg.train_data = data.or(cfg.train_data);
            cfg.metrics = out.or(cfg.metrics);
            let run = cmd_train(&cfg)?;
            match run.log.last() {
                Some(l) => println!("step {}: total {:.6}", l.step, l.total),
                None => println!("no steps; saved the initialization"),
            }
        }
        Command::Eval { common, checkpoint, data, k, out } => {
            let mut cfg = load(&common)?;
            cfg.k = k.unwrap_or(cfg.k);
            let ckpt = need(checkpoint.or(cfg.checkpoint.clone()), "--checkpoint")?;
            let data = need(data.or(cfg.eval_data.clone()), "--data")?;
            let r = cmd_eval(&cfg, &ckpt, &data, &out)?;
            match r.map_rare {
                Some(rare) => println!("mAP full {:.4}  rare {:.4}", r.map_full, rare),
                None => println!("mAP full {:.4}  rare n/a", r.map_full),
            }
        }
        Command::Gradcheck { common } => {
            let cfg = load(&common)?;
            let report = cmd_gradcheck(cfg.seed)?;
            println!("{report}");
            if !report.passed() {
                return Err(CliError::GradCheck(format!("worst relative error {:.3e}", report.worst())));
            }
        }
        Command::DumpAttn { common, checkpoint, data, index, k, out } => {
            let mut cfg = load(&common)?;
            cfg.k = k.unwrap_or(cfg.k);
            let ckpt = need(checkpoint.or(cfg.checkpoint.clone()), "--checkpoint")?;
            let data = need(data.or(cfg.eval_data.clone()), "--data")?;
            let d = cmd_dump_attn(&cfg, &ckpt, &data, index, &out)?;
            println!("wrote {} maps and {}", d.maps.len(), d.scene.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
