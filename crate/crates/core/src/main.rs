use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rulbnn::cli::{self, RunConfig, SweepConfig};
use rulbnn::Result;

#[derive(Parser)]
#[command(name = "rulbnn", version, about = "Bayesian neural networks for remaining-useful-life estimation")]
struct Cli {
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one subset/model/trainer combination over several seeds.
    Run(RunArgs),
    /// Run the cross-product of subsets, models and trainers.
    Sweep {
        /// key = value file; `subsets`, `models` and `trainers` take comma lists.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Extra key=value overrides.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Dump the weight and predictive samples behind one weight/test-sample pair.
    EmitDist {
        /// report.jsonl of a finished run.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        weight_index: usize,
        #[arg(long)]
        sample_index: usize,
        /// Seed of the run to use (default: the first).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        /// Output file (default: standard output).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// key = value file applied before the other flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    subset: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    trainer: Option<String>,
    /// `a..b` (inclusive) or a comma list.
    #[arg(long)]
    seeds: Option<String>,
    /// C-MAPSS directory (default: $RULBNN_DATA_DIR, else ./data).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn run_config(a: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &a.config {
        for (k, v) in cli::read_pairs(p)? {
            cfg.apply(&k, &v)?;
        }
    }
    let flags = [
        ("subset", a.subset.clone()),
        ("model", a.model.clone()),
        ("trainer", a.trainer.clone()),
        ("seeds", a.seeds.clone()),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.apply(k, &v)?;
        }
    }
    if let Some(d) = &a.data_dir {
        cfg.data_dir = d.clone();
    }
    if let Some(o) = &a.out {
        cfg.out_dir = o.clone();
    }
    if let Some(c) = &a.cache_dir {
        cfg.cache_dir = Some(c.clone());
    }
    cfg.apply_overrides(&a.overrides)?;
    Ok(cfg)
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run(a) => {
            let cfg = run_config(&a)?;
            let r = cli::run(&cfg)?;
            let m = r.aggregate.mean;
            let s = r.aggregate.std;
            println!(
                "{} {}-{}: RMSE {:.2} ± {:.2}  MAE {:.2} ± {:.2}  Score {:.1} ± {:.1}",
                cfg.subset, cfg.model, cfg.trainer, m.rmse, s.rmse, m.mae, s.mae, m.score, s.score
            );
            if let (Some(m), Some(s)) = (r.aggregate.mean_corrected, r.aggregate.std_corrected) {
                println!(
                    "{:>w$}  RMSE* {:.2} ± {:.2} MAE* {:.2} ± {:.2} Score* {:.1} ± {:.1}",
                    "",
                    m.rmse,
                    s.rmse,
                    m.mae,
                    s.mae,
                    m.score,
                    s.score,
                    w = format!("{} {}-{}:", cfg.subset, cfg.model, cfg.trainer).len() - 1
                );
            }
            println!("report written to {}", cfg.out_dir.join(cli::REPORT_FILE).display());
        }
        Command::Sweep { config, out, overrides } => {
            let mut sc = SweepConfig::from_pairs(&cli::read_pairs(&config)?)?;
            if let Some(o) = out {
                sc.base.out_dir = o;
            }
            sc.base.apply_overrides(&overrides)?;
            let cells = cli::sweep(&sc)?;
            print!("{}", cli::render_table(&sc, &cells));
            let failed = cells.iter().filter(|c| !c.is_ok()).count();
            if failed > 0 {
                log::warn!("{failed} of {} cells failed; see {}", cells.len(), cli::SWEEP_FILE);
            }
        }
        Command::EmitDist {
            run,
            weight_index,
            sample_index,
            seed,
            cache_dir,
            out,
        } => {
            let d = cli::emit_distributions(&run, seed, weight_index, sample_index, cache_dir.as_deref())?;
            let text = serde_json::to_string_pretty(&d).expect("distributions serialise");
            match out {
                Some(p) => std::fs::write(&p, text + "\n")
                    .map_err(|e| rulbnn::Error::io(format!("writing {}", p.display()), e))?,
                None => println!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // Malformed command lines are configuration errors (exit 1), not clap's default 2.
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
