use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dwdr_cli::commands::{self, EvalSource};
use dwdr_cli::sweep::{run_sweep, write_outputs, SweepSpec};
use dwdr_cli::{CliError, RunConfig};

/// Decorrelated cross-view embedding training on synthetic data.
#[derive(Parser, Debug)]
#[command(name = "dwdr", version)]
struct Cli {
    /// Configuration file (`key = value`); for `sweep`, the sweep spec.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Prints every configuration key with its default and exits.
    #[arg(long, global = true)]
    print_defaults: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes train and test manifests of the synthetic dataset.
    GenData,
    /// Trains on the train manifest; writes a checkpoint and a JSON-lines log.
    Train {
        /// Training manifest (default `<out>/train.manifest`).
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Evaluates bidirectional retrieval and channel correlation.
    Eval {
        /// Checkpoint (default `<out>/checkpoint.txt`).
        #[arg(long, conflicts_with = "embeddings")]
        checkpoint: Option<PathBuf>,
        /// Test manifest (default `<out>/test.manifest`).
        #[arg(long, conflicts_with = "embeddings")]
        manifest: Option<PathBuf>,
        /// Evaluates a ready embedding file instead of a checkpoint.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Compares analytic and finite-difference gradients of every loss.
    Gradcheck,
    /// Runs ablation arms over seeds; writes sweep.csv and sweep.json.
    Sweep,
}

fn load_config(cli: &Cli, path: Option<&PathBuf>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::io(format!("{}: {e}", p.display())))?;
        cfg.apply_text(&text).map_err(|e| e.context(p.display()))?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_lines(lines: &[String]) {
    for l in lines {
        println!("{l}");
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.print_defaults {
        print!("{}", RunConfig::default().to_text());
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return Err(CliError::config("no command given; see `dwdr --help`"));
    };
    match command {
        Command::GenData => print_lines(&commands::gen_data(&load_config(&cli, cli.config.as_ref())?)?),
        Command::Train { manifest } => {
            let cfg = load_config(&cli, cli.config.as_ref())?;
            print_lines(&commands::train_cmd(&cfg, manifest.as_deref())?);
        }
        Command::Eval { checkpoint, manifest, embeddings } => {
            let cfg = load_config(&cli, cli.config.as_ref())?;
            let source = match embeddings {
                Some(p) => EvalSource::Embeddings(p),
                None => EvalSource::Checkpoint { checkpoint: checkpoint.as_deref(), manifest: manifest.as_deref() },
            };
            let doc = commands::eval_cmd(&cfg, source)?;
            println!("{}", serde_json::to_string_pretty(&doc).expect("metrics serialize"));
        }
        Command::Gradcheck => {
            let cfg = load_config(&cli, cli.config.as_ref())?;
            let report = commands::gradcheck_cmd(&cfg);
            print_lines(&commands::format_gradcheck(&report));
            if !report.passed() {
                return Err(CliError::numeric("gradient check failed"));
            }
        }
        Command::Sweep => {
            let path = cli
                .config
                .as_ref()
                .ok_or_else(|| CliError::config("sweep needs --config <sweep spec>"))?;
            let base = load_config(&cli, None)?;
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
            let mut spec = SweepSpec::parse(&text, &base).map_err(|e| e.context(path.display()))?;
            if let Some(s) = cli.seed {
                spec.seeds = vec![s];
            }
            let result = run_sweep(&spec);
            let out = cli.out.clone().unwrap_or_else(|| base.out_dir.clone());
            write_outputs(&out, &result)?;
            for a in &result.arms {
                println!(
                    "{:<28} R@1 d2s {:.4}±{:.4} s2d {:.4}±{:.4}  AP d2s {:.4} s2d {:.4}  |rho_off| {:.4}  failed {}/{}",
                    a.arm,
                    a.r1_d2s.mean,
                    a.r1_d2s.std,
                    a.r1_s2d.mean,
                    a.r1_s2d.std,
                    a.ap_d2s.mean,
                    a.ap_s2d.mean,
                    a.offdiag.mean,
                    a.failed,
                    a.runs
                );
            }
            println!("wrote {}/sweep.csv and sweep.json", out.display());
            if let Some(a) = result.arms.iter().find(|a| a.failed > 0) {
                eprintln!("warning: arm `{}` had failed runs: {}", a.arm, a.error.as_deref().unwrap_or(""));
            }
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
