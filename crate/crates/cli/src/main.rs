use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use agd_core::envs::build_motivating_mdp;
use agd_core::guidance::GuideKind;
use agd_core::harness::{evaluate_checkpoint, load_run, run_agd_mbrl, sample_from_checkpoint, RunConfig};
use agd_core::oracle::{motivating_policy, myopia_report, run_verification_suite};

#[derive(Parser)]
#[command(name = "agd", version, about = "Advantage-guided diffusion world models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the Dyna loop and write metrics and a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// none, sag, eag, reward or policy-only.
        #[arg(long, value_parser = parse_guide)]
        guide: Option<GuideKind>,
        /// Extra `key=value` overrides, applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Run the exact tabular suite: JSON report on stdout, summary on stderr.
    Verify {
        #[arg(long, default_value_t = 500)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Draw segments from a saved world model and policy.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the motivating-chain myopia report.
    Example,
    /// Evaluate a saved policy in the real environment.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_guide(s: &str) -> Result<GuideKind, String> {
    s.parse()
}

fn train(config: PathBuf, seed: Option<u64>, guide: Option<GuideKind>, overrides: Vec<String>, out: PathBuf) -> Result<()> {
    let mut cfg = RunConfig::from_file(&config)?;
    let mut pairs: Vec<(String, String)> = Vec::new();
    if let Some(kind) = guide {
        pairs.push(("guide.kind".into(), kind.name().into()));
    }
    if let Some(seed) = seed {
        pairs.push(("run.seed".into(), seed.to_string()));
    }
    for kv in &overrides {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("override `{kv}` is not KEY=VALUE");
        };
        pairs.push((k.trim().into(), v.trim().into()));
    }
    cfg.set_many(&pairs)?;
    let summary = run_agd_mbrl(&cfg, &out)?;
    println!("metrics    {}", summary.metrics_path.display());
    println!("checkpoint {}", summary.checkpoint_path.display());
    println!("real steps {}", summary.real_steps);
    if let Some((mean, se)) = summary.final_eval() {
        println!("final eval {mean:.4} ± {se:.4}");
    }
    Ok(())
}

fn verify(trials: usize, seed: u64) -> Result<bool> {
    if trials == 0 {
        bail!("--trials must be at least 1");
    }
    let report = run_verification_suite(seed, trials)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    eprint!("{report}");
    Ok(report.passed)
}

fn sample(checkpoint: PathBuf, count: usize, out: PathBuf, seed: u64) -> Result<()> {
    let run = load_run(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let segs = sample_from_checkpoint(&run, count, seed)?;
    let rows = |t: &agd_core::numerics::Tensor| -> Vec<Vec<f64>> { t.rows().into_iter().map(|r| r.to_vec()).collect() };
    let records: Vec<_> = segs
        .iter()
        .map(|s| {
            serde_json::json!({
                "states": rows(&s.states),
                "actions": rows(&s.actions),
                "rewards": s.rewards,
            })
        })
        .collect();
    let doc = serde_json::json!({
        "env": run.config.env_name,
        "guide": run.config.guide.kind.name(),
        "horizon": run.config.horizon,
        "segments": records,
    });
    std::fs::write(&out, serde_json::to_string_pretty(&doc)?).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {count} segments to {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            seed,
            guide,
            overrides,
            out,
        } => train(config, seed, guide, overrides, out).map(|_| true),
        Command::Verify { trials, seed } => verify(trials, seed),
        Command::Sample {
            checkpoint,
            count,
            out,
            seed,
        } => sample(checkpoint, count, out, seed).map(|_| true),
        Command::Example => myopia_report(&build_motivating_mdp(), &motivating_policy(), 3, 4)
            .map(|r| {
                println!("{r}");
                true
            })
            .map_err(Into::into),
        Command::Eval {
            checkpoint,
            episodes,
            seed,
        } => load_run(&checkpoint)
            .and_then(|run| evaluate_checkpoint(&run, episodes, seed))
            .map(|e| {
                println!("mean return {:.4} ± {:.4} over {} episodes", e.mean, e.std_err, e.episodes);
                if e.single_episode {
                    println!("(single episode: standard error not estimated)");
                }
                true
            })
            .map_err(Into::into),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
