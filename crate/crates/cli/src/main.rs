use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dense2moe::checkpoint::{self, Checkpoint};
use dense2moe::config::RunConfig;
use dense2moe::pipeline::{self, CheckStatus};
use dense2moe::{CliError, Result};
use log::info;

#[derive(Parser)]
#[command(name = "dense2moe", version, about = "Dense-to-MoE distillation of a toy diffusion transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run config (TOML). Commands reading a checkpoint default to the
    /// config recorded in it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Training steps of the stage, or sampling steps for sample and
    /// analyze-experts.
    #[arg(long, global = true)]
    steps: Option<u64>,
    /// Active normal experts per MoE layer at inference.
    #[arg(long, global = true)]
    topk: Option<usize>,
    /// Input checkpoint manifest.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Teacher checkpoint manifest.
    #[arg(long, global = true)]
    teacher: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Train the dense teacher on the synthetic corpus.
    TrainTeacher,
    /// Convert FFNs to MoE by Taylor importance and distill the shared experts.
    StageInit,
    /// Distill the full MoE with frozen shared experts.
    StageMoe,
    /// Group blocks into MoB groups and distill with frozen isolated blocks.
    StageMob,
    /// Sample one image per prompt category.
    Sample,
    /// Expert-selection histograms, window usage and a top-k sweep.
    AnalyzeExperts,
    /// Block input/output MSE by prompt category and timestep.
    ProbeBlocks,
    /// Parameter and FLOP accounting.
    ReportParams,
    /// Structural checks on a checkpoint.
    Verify,
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| CliError::Config(format!("--{flag} is required for this command")))
}

impl Cli {
    fn config(&self, recorded: Option<&RunConfig>) -> Result<RunConfig> {
        let mut cfg = match (&self.config, recorded) {
            (Some(p), _) => RunConfig::load(p)?,
            (None, Some(c)) => c.clone(),
            (None, None) => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.steps {
            let sec = match self.command {
                Command::TrainTeacher => Some(&mut cfg.stage.teacher),
                Command::StageInit => Some(&mut cfg.stage.init),
                Command::StageMoe => Some(&mut cfg.stage.moe),
                Command::StageMob => Some(&mut cfg.stage.mob),
                _ => None,
            };
            match sec {
                Some(sec) => sec.steps = n,
                None => cfg.analysis.sample_steps = n as usize,
            }
        }
        Ok(cfg)
    }

    fn input(&self) -> Result<Checkpoint> {
        checkpoint::load(require(&self.checkpoint, "checkpoint")?)
    }

    fn run(&self) -> Result<()> {
        let out = &self.out;
        match self.command {
            Command::TrainTeacher => {
                let s = pipeline::train_teacher(&self.config(None)?, out)?;
                println!("{}", serde_json::to_string(&s)?);
            }
            Command::StageInit => {
                let teacher = require(&self.teacher, "teacher")?;
                let recorded = checkpoint::read_manifest(teacher)?.run_config;
                let s = pipeline::stage_init(&self.config(Some(&recorded))?, teacher, out)?;
                println!("{}", serde_json::to_string(&s)?);
            }
            Command::StageMoe | Command::StageMob => {
                let student = require(&self.checkpoint, "checkpoint")?;
                let teacher = require(&self.teacher, "teacher")?;
                let recorded = checkpoint::read_manifest(student)?.run_config;
                let cfg = self.config(Some(&recorded))?;
                let s = match self.command {
                    Command::StageMoe => pipeline::stage_moe(&cfg, student, teacher, out)?,
                    _ => pipeline::stage_mob(&cfg, student, teacher, out)?,
                };
                println!("{}", serde_json::to_string(&s)?);
            }
            Command::Sample => {
                let ck = self.input()?;
                let cfg = self.config(Some(&ck.manifest.run_config))?;
                let path = pipeline::sample(&ck, &cfg, cfg.analysis.sample_steps, self.topk, out)?;
                println!("{}", path.display());
            }
            Command::AnalyzeExperts => {
                let ck = self.input()?;
                let cfg = self.config(Some(&ck.manifest.run_config))?;
                for p in pipeline::analyze_experts(&ck, &cfg, cfg.analysis.sample_steps, self.topk, out)? {
                    println!("{}", p.display());
                }
            }
            Command::ProbeBlocks => {
                let ck = self.input()?;
                let cfg = self.config(Some(&ck.manifest.run_config))?;
                println!("{}", pipeline::probe_blocks(&ck, &cfg, out)?.display());
            }
            Command::ReportParams => {
                let ck = self.input()?;
                let r = pipeline::report_params(&ck, self.topk, out)?;
                println!(
                    "{}",
                    serde_json::json!({
                        "total": r.total,
                        "activated": r.activated,
                        "activated_blocks": r.activated_blocks,
                        "flops": r.flops,
                    })
                );
            }
            Command::Verify => {
                let ck = self.input()?;
                let seed = self.seed.unwrap_or(ck.manifest.seed);
                let checks = pipeline::verify(&ck, self.teacher.as_deref(), seed)?;
                for c in &checks {
                    println!("{}", serde_json::to_string(c)?);
                }
                let failed: Vec<&str> = checks
                    .iter()
                    .filter(|c| c.status == CheckStatus::Fail)
                    .map(|c| c.check)
                    .collect();
                if !failed.is_empty() {
                    return Err(CliError::Verify(format!("failed checks: {}", failed.join(", "))));
                }
                info!("verify: all checks passed or skipped");
            }
        }
        Ok(())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.json_line());
            ExitCode::FAILURE
        }
    }
}
