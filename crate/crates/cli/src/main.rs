use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use log::info;
use rimesa::eval::SolutionHistory;
use rimesa::harness::{resolve_output_dir, run, summary_csv, sweep, write_outputs, SWEEP_HEADER};
use rimesa::Dataset;

mod settings;

use settings::{defaults_help, Settings};

#[derive(Parser)]
#[command(name = "rimesa", version, about = "Multi-robot collaborative SLAM back-end experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set sigma_rz=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    robots: Option<usize>,
    #[arg(long)]
    length: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    outliers: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Output file; stdout when omitted.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Run methods on a dataset and write summary, series, timing and event CSVs.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        methods: Option<String>,
        /// Network overrides, e.g. `rc=1,dc=30,pc=0.9`.
        #[arg(long)]
        net: Option<String>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Record solution histories.
        #[arg(long)]
        history: bool,
        #[arg(long)]
        history_every: Option<u64>,
        #[arg(long)]
        threaded: bool,
    },
    /// Score a recorded solution history against a dataset.
    Metrics {
        #[arg(long)]
        history: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Grid over noise, outlier or communication levels; one CSV row per cell, trial and method.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `sigma_rz=..`, `outliers=..` or `comm=delay:rate:range,..`.
        #[arg(long)]
        axis: Option<String>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        methods: Option<String>,
        #[arg(long)]
        net: Option<String>,
        /// Output file; stdout when omitted.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

fn settings(common: &Common) -> Result<Settings> {
    let mut s = match &common.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    for pair in &common.overrides {
        s.set_pair(pair)?;
    }
    s.set_opt("scenario", common.scenario.as_ref())?;
    s.set_opt("robots", common.robots)?;
    s.set_opt("length", common.length)?;
    s.set_opt("seed", common.seed)?;
    s.set_opt("outliers", common.outliers)?;
    Ok(s)
}

fn emit(out: Option<&PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => Ok(std::io::stdout().lock().write_all(text.as_bytes())?),
    }
}

/// Returns whether every trial succeeded.
fn execute(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Generate { common, out } => {
            let sc = settings(&common)?.scenario()?;
            let ds = rimesa::generate(&sc)?;
            info!("generated {} with {} records", sc.name, ds.records.len());
            emit(out.as_ref(), &ds.to_text())?;
            Ok(true)
        }
        Command::Run {
            common,
            dataset,
            methods,
            net,
            out_dir,
            history,
            history_every,
            threaded,
        } => {
            let mut s = settings(&common)?;
            s.set_opt("dataset", dataset.map(|p| p.display().to_string()))?;
            s.set_opt("methods", methods)?;
            s.set_opt("net", net)?;
            s.set_opt("out_dir", out_dir.map(|p| p.display().to_string()))?;
            s.set_opt("history_every", history_every)?;
            if history {
                s.set("history", "true")?;
            }
            if threaded {
                s.set("threaded", "true")?;
            }
            let mut cfg = s.run_config()?;
            cfg.output_dir = resolve_output_dir(cfg.output_dir.take());
            info!("seed {}", cfg.seed);
            let out = run(&cfg)?;
            if let Some(dir) = &cfg.output_dir {
                write_outputs(&out, dir)?;
                info!("wrote outputs to {}", dir.display());
            }
            emit(None, &summary_csv(&out))?;
            Ok(!out.has_failures())
        }
        Command::Metrics { history, dataset } => {
            let ds = Dataset::load(&dataset).with_context(|| format!("loading {}", dataset.display()))?;
            let hist = SolutionHistory::load(&history).with_context(|| format!("loading {}", history.display()))?;
            let labels = ds.loop_closures().map(|(i, r)| (i, r.inlier)).collect();
            let r = hist.evaluate(&ds.ground_truth(), &labels)?;
            let text = format!(
                "iate {}\nfinal_ate {}\nfinal_ate_rotation {}\nif1 {}\nfinal_f1 {}\nprecision {}\nrecall {}\n",
                r.iate, r.final_ate, r.final_ate_rotation, r.if1, r.final_f1, r.precision, r.recall
            );
            emit(None, &text)?;
            Ok(true)
        }
        Command::Sweep {
            common,
            axis,
            trials,
            methods,
            net,
            out,
        } => {
            let mut s = settings(&common)?;
            s.set_opt("axis", axis)?;
            s.set_opt("trials", trials)?;
            s.set_opt("methods", methods)?;
            s.set_opt("net", net)?;
            let rows = sweep(&s.sweep_config()?)?;
            let ok = rows.iter().all(|r| r.split(',').nth(5) == Some("ok"));
            let mut text = format!("{SWEEP_HEADER}\n");
            for r in rows {
                text.push_str(&r);
                text.push('\n');
            }
            emit(out.as_ref(), &text)?;
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let help = defaults_help();
    let matches = match Cli::command().after_help(help.clone()).mut_subcommands(|c| c.after_help(help.clone())).try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("some trials failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
