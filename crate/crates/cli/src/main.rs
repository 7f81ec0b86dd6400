use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ibloss_cli::commands::{cmd_eval, cmd_gen_data, cmd_influence, cmd_train};
use ibloss_cli::sweep::{cmd_sweep, render_table, SweepSpec};
use ibloss_cli::{load_config, Result};

#[derive(Parser)]
#[command(
    name = "ibloss",
    version,
    about = "Influence-balanced loss experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set train.total_epochs=20`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the training (and test) set as CSV with metadata sidecars.
    GenData(ConfigArgs),
    /// Train and write checkpoint, history and the resolved config.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on a CSV dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        top_k: usize,
    },
    /// Per-sample IB factors and per-class influence distributions.
    Influence {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        top_m: usize,
        #[arg(long, default_value_t = ibloss::eval::DEFAULT_DAMPING)]
        damping: f64,
    },
    /// Run one sweep axis over a list of seeds.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Sweep spec (TOML).
        #[arg(long)]
        sweep: PathBuf,
        /// Worker threads; defaults to the number of CPUs.
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn out_dir(out: Option<PathBuf>, checkpoint: &Path) -> PathBuf {
    out.unwrap_or_else(|| {
        checkpoint
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => {
            cmd_gen_data(&load_config(&a.config, &a.overrides)?)?;
        }
        Command::Train(a) => {
            cmd_train(&load_config(&a.config, &a.overrides)?)?;
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            top_k,
        } => {
            let m = cmd_eval(&checkpoint, &data, &out_dir(out, &checkpoint), top_k)?;
            println!(
                "overall {:.4}  balanced {:.4}",
                m.overall_accuracy, m.balanced_accuracy
            );
            for (k, a) in m.per_class_accuracy.iter().enumerate() {
                println!("class {k}: {:.4} ({} samples)", a, m.class_totals[k]);
            }
        }
        Command::Influence {
            checkpoint,
            data,
            out,
            top_m,
            damping,
        } => {
            let s = cmd_influence(
                &checkpoint,
                &data,
                top_m,
                damping,
                &out_dir(out, &checkpoint),
            )?;
            for c in &s.classes {
                println!(
                    "class {}: n={} mean normalized {:.4}, top-{} mean {:.4}",
                    c.class, c.count, c.mean_normalized, top_m, c.top_mean_normalized
                );
            }
            if let Some(r) = s.exact.as_ref().and_then(|e| e.spearman_vs_ib_factor) {
                println!("rank correlation (exact influence vs IB factor): {r:.4}");
            }
        }
        Command::Sweep {
            config,
            sweep,
            jobs,
        } => {
            let base = load_config(&config.config, &config.overrides)?;
            let spec = SweepSpec::load(&sweep)?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs.unwrap_or(0))
                .build()
                .expect("thread pool");
            let out = pool.install(|| cmd_sweep(&base, &spec))?;
            print!("{}", render_table(spec.axis_name(), &out.rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
