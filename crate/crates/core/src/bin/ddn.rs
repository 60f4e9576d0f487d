use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ddn::cli::{cmd_eval, cmd_gen_data, cmd_train, cmd_warp, EvalOptions, TrainOptions};
use ddn::config::RunConfig;
use ddn::gradcheck::{run_gradcheck, GradCheckConfig};
use ddn::network::TransformKind;
use ddn::pipeline::Head;
use ddn::trainer::Stage;
use ddn::DdnError;

#[derive(Parser)]
#[command(name = "ddn", version, about = "Shape-basis and point-transformer landmark cascade")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the run seed (the dataset seed for gen-data).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic benchmark.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one stage; earlier stages are read from --out.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stage: Stage,
        #[arg(long, default_value = "tps")]
        transform: TransformKind,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many epochs; continue later with --resume.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "full")]
        head: Head,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a spline from SRC to DST point files and warp QUERY.
    Warp {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        dst: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        gamma: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        instances: usize,
        /// Perturb the named block (negative control).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

fn load_config(common: &Common, dataset_seed: bool) -> ddn::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        if dataset_seed {
            cfg.dataset.seed = s;
        } else {
            cfg.seed = s;
        }
    }
    cfg.validate()?;
    eprintln!("# resolved configuration\n{}", cfg.to_toml());
    Ok(cfg)
}

fn run(cli: Cli) -> ddn::Result<()> {
    match cli.command {
        Command::GenData { common, out } => {
            let cfg = load_config(&common, true)?;
            let m = cmd_gen_data(&cfg, &out)?;
            println!("wrote {} train and {} test samples to {} (dataset {})", m.train_count, m.test_count, out.display(), m.dataset_hash);
        }
        Command::Train {
            common,
            stage,
            transform,
            data,
            out,
            resume,
            epochs,
        } => {
            let cfg = load_config(&common, false)?;
            let opts = TrainOptions {
                stage,
                transform,
                data,
                out,
                resume,
                max_epochs: epochs,
            };
            let o = cmd_train(&cfg, &opts, |line| eprintln!("{line}"))?;
            let state = if o.finished { "finished" } else { "paused" };
            println!("{state}: {} ({} epochs), curve {}", o.checkpoint.display(), o.state.curve.len(), o.curve.display());
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            head,
            out,
        } => {
            let cfg = load_config(&common, false)?;
            let o = cmd_eval(
                &cfg,
                &EvalOptions {
                    checkpoint,
                    data,
                    head,
                    out,
                    force_truth: false,
                },
            )?;
            print!("{}", std::fs::read_to_string(&o.table).map_err(|e| DdnError::io(&o.table, e))?);
        }
        Command::Warp { src, dst, query, gamma, out } => {
            let w = cmd_warp(&src, &dst, &query, gamma, &out)?;
            println!("warped {} points into {}", w.len(), out.display());
        }
        Command::Gradcheck { seed, instances, corrupt } => {
            let cfg = GradCheckConfig {
                seed,
                instances,
                corrupt,
                ..Default::default()
            };
            let report = run_gradcheck(&cfg)?;
            print!("{}", report.to_text());
            report.into_result()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("DDN_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("warning: DDN_THREADS ignored: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
