use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use cadcrafter::oracles::OracleConfig;
use cadcrafter::pipeline::{
    cmd_check, cmd_eval, cmd_export_obj, cmd_generate, cmd_sample, cmd_train, cmd_verify, Condition, PipelineConfig, Run,
    SampleRequest, Stage, MAX_SEED,
};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cadcrafter", version, about = "Sketch-extrude CAD generation pipeline")]
struct Cli {
    /// TOML config; defaults apply to anything missing.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config file and CADCRAFTER_SEED).
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(..=MAX_SEED))]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the procedural corpus with meshes, maps and features.
    Generate,
    /// Train one stage: ae, diffusion-mv, diffusion-sv or dpo.
    Train {
        stage: Stage,
        /// Continue from this stage's existing checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Sample, decode and check sequences for corpus items.
    Sample {
        #[arg(long, default_value = "dpo")]
        stage: Stage,
        /// views or single; defaults to the stage's training condition.
        #[arg(long)]
        condition: Option<Condition>,
        #[arg(long)]
        items: Option<usize>,
        #[arg(long)]
        per_item: Option<usize>,
        /// Export OBJ meshes for valid samples.
        #[arg(long)]
        obj: bool,
    },
    /// Check one sequence file: exit 0 valid, 1 invalid, 2 unreadable.
    Check { path: PathBuf },
    /// Score predicted sequences against same-named ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Also write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compile a sequence file and write its mesh.
    ExportObj { sequence: PathBuf, obj: PathBuf },
    /// Run the oracle suite and re-check run artifact digests.
    Verify {
        /// Smaller fixture sets.
        #[arg(long)]
        quick: bool,
    },
    /// Print the resolved config as TOML.
    Config {
        /// Print the small-dimension smoke preset instead.
        #[arg(long)]
        toy: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    if let Cmd::Check { path } = &cli.cmd {
        let (code, body) = cmd_check(path);
        println!("{body}");
        return Ok(ExitCode::from(code as u8));
    }
    let mut cfg = PipelineConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let run = Run::new(&cli.out);
    match cli.cmd {
        Cmd::Generate => println!("{}", serde_json::to_string(&cmd_generate(&cfg, &run)?)?),
        Cmd::Train { stage, resume } => println!("{}", serde_json::to_string_pretty(&cmd_train(stage, &cfg, &run, resume)?)?),
        Cmd::Sample { stage, condition, items, per_item, obj } => {
            let req = SampleRequest {
                stage,
                condition,
                items: items.unwrap_or(cfg.sample.items),
                per_item: per_item.unwrap_or(cfg.sample.per_item),
                seed: cli.seed,
                export_obj: obj,
            };
            let r = cmd_sample(&cfg, &run, &req)?;
            println!("{}", serde_json::json!({ "samples": r.samples.len(), "invalid_rate": r.invalid_rate }));
        }
        Cmd::Eval { pred, gt, report } => {
            let gt = gt.unwrap_or_else(|| run.sequences());
            let r = cmd_eval(&pred, &gt, &cfg)?;
            eprintln!("{}", r.to_table());
            println!("{}", r.to_json());
            if let Some(p) = report {
                std::fs::write(&p, r.to_json()).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Cmd::ExportObj { sequence, obj } => cmd_export_obj(&sequence, &obj)?,
        Cmd::Verify { quick } => {
            let oc = if quick { OracleConfig { loops: 200, cloud_pairs: 20, mc_samples: 50_000, ..Default::default() } } else { OracleConfig::default() };
            let r = cmd_verify(Some(&run), &oc)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
            if !r.pass() {
                return Ok(ExitCode::from(1));
            }
        }
        Cmd::Config { toy } => {
            if toy {
                cfg = PipelineConfig { seed: cfg.seed, ..PipelineConfig::toy() };
            }
            print!("{}", cfg.resolved().to_toml());
        }
        Cmd::Check { .. } => unreachable!("handled before config loading"),
    }
    Ok(ExitCode::SUCCESS)
}
