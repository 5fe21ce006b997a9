use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use ser_core::config::ExperimentConfig;
use ser_core::cost::cost_table;
use ser_core::par::with_threads;
use ser_core::pipeline::{self, now_unix, RunManifest, Stage, TheoremSelect};
use ser_core::SerError;

/// Overrides the output root when `--out` is not given.
const OUT_ROOT_ENV: &str = "SER_OUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "ser", version, about = "Self-evolving reward learning on a synthetic preference world")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML config file, or `default` for the built-in configuration.
    #[arg(long, global = true, default_value = "default", value_name = "PATH")]
    config: String,
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory. Defaults to the config's `output_dir`, under $SER_OUT_ROOT when set.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for data-parallel sections.
    #[arg(long, global = true, value_name = "N", value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,
    /// Config override such as `ser.tau_high=0.6`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the world and export the preference pools as JSONL.
    GenData(Overrides),
    /// Train the loop-0 reward model on the seed-labeled pairs.
    TrainSeed(Overrides),
    /// Run the self-evolving loop and export per-loop metrics.
    SerLoop(Overrides),
    /// Train the policy against the final reward model.
    Ppo(Overrides),
    /// Judge the trained policy against the uniform policy.
    EvalWinrate(Overrides),
    /// Check the convergence and regret theorems over several seeds.
    ValidateTheorems(TheoremArgs),
    /// Print the labeling-cost table.
    CostModel(CostArgs),
}

#[derive(Args, Debug)]
struct Overrides {
    /// Trailing `KEY=VALUE` config overrides.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Which {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

#[derive(Args, Debug)]
struct TheoremArgs {
    #[arg(long, value_enum, default_value = "all")]
    theorem: Which,
    /// Number of seeds, counting up from the experiment seed.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    seeds: Option<u32>,
    #[command(flatten)]
    rest: Overrides,
}

#[derive(Args, Debug)]
struct CostArgs {
    /// Print JSON instead of the text table.
    #[arg(long)]
    json: bool,
    /// Use the exact human cost in the pipeline composite.
    #[arg(long)]
    unrounded: bool,
    #[command(flatten)]
    rest: Overrides,
}

impl Command {
    fn stage(&self) -> Stage {
        match self {
            Command::GenData(_) => Stage::GenData,
            Command::TrainSeed(_) => Stage::TrainSeed,
            Command::SerLoop(_) => Stage::SerLoop,
            Command::Ppo(_) => Stage::Ppo,
            Command::EvalWinrate(_) => Stage::EvalWinrate,
            Command::ValidateTheorems(t) => Stage::ValidateTheorems {
                which: match t.theorem {
                    Which::One => TheoremSelect::One,
                    Which::Two => TheoremSelect::Two,
                    Which::All => TheoremSelect::All,
                },
                seeds: t.seeds.map(|n| n as usize),
            },
            Command::CostModel(_) => Stage::CostModel,
        }
    }

    fn overrides(&self) -> &[String] {
        match self {
            Command::GenData(o)
            | Command::TrainSeed(o)
            | Command::SerLoop(o)
            | Command::Ppo(o)
            | Command::EvalWinrate(o) => &o.overrides,
            Command::ValidateTheorems(t) => &t.rest.overrides,
            Command::CostModel(c) => &c.rest.overrides,
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, SerError> {
    let mut overrides = cli.common.set.clone();
    overrides.extend(cli.command.overrides().iter().cloned());
    if let Some(seed) = cli.common.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Command::CostModel(c) = &cli.command {
        if c.unrounded {
            overrides.push("cost.unrounded=true".into());
        }
    }
    ExperimentConfig::load(&cli.common.config, &overrides)
}

fn output_dir(cli: &Cli, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(out) = &cli.common.out {
        return out.clone();
    }
    let dir = Path::new(&cfg.output_dir);
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

fn read_artifact(out: &Path, m: &RunManifest, name: &str) -> anyhow::Result<String> {
    let rel = m.artifacts.get(name).with_context(|| format!("manifest lacks {name}"))?;
    std::fs::read_to_string(out.join(rel)).with_context(|| format!("reading {rel}"))
}

fn report(cli: &Cli, cfg: &ExperimentConfig, out: &Path, m: &RunManifest) -> anyhow::Result<()> {
    match &cli.command {
        Command::CostModel(c) => {
            let table = cost_table(&cfg.cost)?;
            if c.json {
                println!("{}", serde_json::to_string_pretty(&table)?);
            } else {
                print!("{}", table.to_text());
            }
            return Ok(());
        }
        Command::ValidateTheorems(_) => {
            for name in ["theorem1_text", "theorem2_text"] {
                if m.artifacts.contains_key(name) {
                    print!("{}", read_artifact(out, m, name)?);
                }
            }
        }
        Command::EvalWinrate(_) => {
            let v: serde_json::Value = serde_json::from_str(&read_artifact(out, m, "winrate")?)?;
            println!(
                "win {} tie {} lose {} over {} prompts",
                v["win"], v["tie"], v["lose"], v["n_prompts"]
            );
        }
        Command::SerLoop(_) => print!("{}", read_artifact(out, m, "loop_metrics")?),
        _ => {}
    }
    println!(
        "{}: {} artifacts in {}",
        m.command,
        m.artifacts.len(),
        out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let out = output_dir(&cli, &cfg);
    let stage = cli.command.stage();
    let threads = cli.common.threads.map(usize::from);
    let result = with_threads(threads, || pipeline::run(&stage, &cfg, &out, now_unix));
    match result.map_err(anyhow::Error::from).and_then(|m| report(&cli, &cfg, &out, &m)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
