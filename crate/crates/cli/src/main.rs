use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use invlab::config::{ExperimentConfig, SuiteKind};
use invlab::hazard::HazardModel;
use invlab::model::ModelConfig;
use invlab::runner::{error_status, exit_status, run_experiment, RunOptions};

#[derive(Parser)]
#[command(name = "invlab", version, about = "Invariance-time numerical lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the suites listed in the config.
    Run(RunArgs),
    /// Hazard gate, transfer formulas and closed forms.
    Verify(RunArgs),
    /// Reduced BSDE solve, lift and checks.
    Bsde(RunArgs),
    /// Feynman–Kac solves and PDE convergence checks.
    Pde(RunArgs),
    /// Four-estimator comparison and semigroup check.
    Compare(RunArgs),
    /// Model utilities.
    Model {
        #[command(subcommand)]
        command: ModelCommand,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON, or TOML by extension). Subcommands other than
    /// `run` fall back to the default DGC experiment.
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Omit the timestamp so identical inputs give identical report.json.
    #[arg(long)]
    canonical: bool,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Subcommand)]
enum ModelCommand {
    /// Print S, γ and μ on a grid of (t, m) points as JSON lines.
    Probe {
        #[arg(long, value_enum, default_value = "dgc")]
        kind: Kind,
        /// Model block from an experiment config; overrides --kind.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75,1")]
        t: Vec<f64>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-1,-0.5,0,0.5,1")]
        m: Vec<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Dgc,
    Cox,
}

fn load(args: &RunArgs, required: bool, suites: Option<&[SuiteKind]>) -> Result<ExperimentConfig, invlab::Error> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None if required => return Err(invlab::Error::Config("a config file is required".into())),
        None => ExperimentConfig::new(ModelConfig::dgc()),
    };
    if let Some(s) = suites {
        cfg.suites = s.to_vec();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(n) = args.paths {
        cfg.n_paths = n;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: RunArgs, required: bool, suites: Option<&[SuiteKind]>) -> i32 {
    let cfg = match load(&args, required, suites) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    if let Some(n) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot set up {n} threads: {e}");
            return 2;
        }
    }
    match run_experiment(&cfg, RunOptions { canonical: args.canonical, progress: !args.quiet }) {
        Ok(out) => {
            let r = &out.report;
            for e in r.failures() {
                eprintln!("FAIL {} lhs={} rhs={} z={:?} {}", e.theorem_id, e.lhs, e.rhs, e.z, e.detail);
            }
            for note in &r.notes {
                eprintln!("note: {note}");
            }
            println!(
                "{} entries, {} failing; report in {}",
                r.entries.len(),
                r.failures().count(),
                cfg.output_dir.join("report.json").display()
            );
            exit_status(r)
        }
        Err(e) => {
            eprintln!("error: {e}");
            error_status(&e)
        }
    }
}

fn probe(kind: Kind, config: Option<PathBuf>, ts: &[f64], ms: &[f64]) -> i32 {
    let model_cfg = match config {
        Some(p) => match ExperimentConfig::load(&p) {
            Ok(c) => c.model,
            Err(e) => {
                eprintln!("error: {e}");
                return 2;
            }
        },
        None => match kind {
            Kind::Dgc => ModelConfig::dgc(),
            Kind::Cox => ModelConfig::cox(0.1),
        },
    };
    let model = match HazardModel::new(model_cfg) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    for &t in ts {
        for &m in ms {
            match model.point(t, m) {
                Ok(p) => println!("{}", serde_json::json!({"t": t, "m": m, "s": p.s, "gamma": p.gamma, "mu": p.mu})),
                Err(e) => {
                    eprintln!("error at (t={t}, m={m}): {e}");
                    return 1;
                }
            }
        }
    }
    0
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run(a) => run(a, true, None),
        Command::Verify(a) => run(a, false, Some(&[SuiteKind::Gate, SuiteKind::Transfer, SuiteKind::ClosedForm])),
        Command::Bsde(a) => run(a, false, Some(&[SuiteKind::Bsde])),
        Command::Pde(a) => run(a, false, Some(&[SuiteKind::Pde])),
        Command::Compare(a) => run(a, false, Some(&[SuiteKind::Compare])),
        Command::Model { command: ModelCommand::Probe { kind, config, t, m } } => probe(kind, config, &t, &m),
    };
    ExitCode::from(code as u8)
}
