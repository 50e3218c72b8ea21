use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use taskdecomp_cli::commands::{
    ablation_table, cmd_ablate, cmd_eval, cmd_generate, cmd_train, gradcheck_table, run_gradcheck,
};
use taskdecomp_cli::{CliError, CliResult, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "taskdecomp", version, about = "Task-decomposed segmentation on synthetic scenes")]
struct Cli {
    /// TOML run configuration; defaults are used for anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Sets both `train.seed` and `data.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// `key=value` with a dotted key, e.g. `train.batch_size=4`. Repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write train.tds and val.tds.
    Generate,
    /// Run the three training phases.
    Train {
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference check of every op and the composite loss.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Train the four ablation configurations and print the table.
    Ablate,
}

fn resolve(cli: &Cli) -> CliResult<(RunConfig, PathBuf)> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("train.seed={seed}"));
        overrides.push(format!("data.seed={seed}"));
    }
    if let Some(out) = &cli.out {
        overrides.push(format!("output.dir={}", toml::Value::String(out.display().to_string())));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let out = cfg.output.dir.clone();
    Ok((cfg, out))
}

fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Generate => {
            let (cfg, out) = resolve(&cli)?;
            for p in cmd_generate(&cfg, &out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Train { resume } => {
            let (cfg, out) = resolve(&cli)?;
            let r = cmd_train(&cfg, &out, resume.as_deref())?;
            println!("iterations={}", r.iterations);
            print!("{}", r.report.to_text());
        }
        Command::Eval { checkpoint, data } => {
            let report = cmd_eval(checkpoint, data)?;
            print!("{}", report.to_text());
            if let Some(out) = &cli.out {
                write_in(out, "eval.json", &(report.to_record() + "\n"))?;
            }
        }
        Command::Gradcheck { seeds } => {
            let (cfg, out) = resolve(&cli)?;
            let rows = run_gradcheck(*seeds, cfg.train.seed)?;
            let table = gradcheck_table(&rows);
            print!("{table}");
            write_in(&out, "gradcheck.txt", &table)?;
            let failed: Vec<_> = rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(CliError::GradCheck(failed.join(", ")));
            }
        }
        Command::Ablate => {
            let (cfg, out) = resolve(&cli)?;
            let rows = cmd_ablate(&cfg, &out)?;
            print!("{}", ablation_table(&rows));
        }
    }
    Ok(())
}

fn write_in(dir: &Path, name: &str, text: &str) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), text)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
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
