//! `snaplab` command line: every subcommand reads an optional TOML config,
//! applies its flags on top, and writes one run directory.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod run;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use snaplab::distill::{DistillMode, GammaMode};

use config::{LutSource, RunConfig};
use error::CliResult;
use run::RunDir;

#[derive(Debug, Parser)]
#[command(name = "snaplab", version, about = "Desk-scale diffusion distillation and architecture evolution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML run configuration; defaults apply to absent keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory to create. Defaults to `$SNAPLAB_RUNS_DIR/<timestamp>-<name>`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub name: Option<String>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Direct,
    Progressive,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GammaModeArg {
    #[value(name = "const", alias = "constant")]
    Const,
    Dynamic,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LutSourceArg {
    CostModel,
    Bench,
}

fn parse_range(s: &str) -> Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => {
            let a: f64 = a.parse().map_err(|e| format!("{a}: {e}"))?;
            let b: f64 = b.parse().map_err(|e| format!("{b}: {e}"))?;
            Ok([a, b])
        }
        _ => Err(format!("expected `a,b`, got `{s}`")),
    }
}

fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p}: {e}"))).collect()
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a denoiser from scratch.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Enables robust training with this per-block execute probability.
        #[arg(long)]
        execute_probability: Option<f64>,
    },
    /// Step-distill a teacher checkpoint into a student.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        /// Student checkpoint, or `init` to start from a copy of the teacher.
        #[arg(long, default_value = "init")]
        student: String,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        teacher_steps: Option<usize>,
        #[arg(long)]
        student_steps: Option<usize>,
        /// Guidance range `a,b`.
        #[arg(long, value_parser = parse_range)]
        cfg_range: Option<[f64; 2]>,
        #[arg(long)]
        cfg_prob: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long, value_enum)]
        gamma_mode: Option<GammaModeArg>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Evolve a denoiser's block layout toward a latency target.
    Evolve {
        #[command(flatten)]
        common: Common,
        /// Starting checkpoint; a fresh model from the config otherwise.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        target_ms: Option<f64>,
        #[arg(long)]
        group_size: Option<usize>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        train_steps_per_round: Option<usize>,
        /// Latency table CSV; built from `evolve.lut_source` otherwise.
        #[arg(long)]
        lut: Option<PathBuf>,
    },
    /// Draw samples with DDIM and classifier-free guidance.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to sample from; the exact Bayes denoiser otherwise.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        cfg_scale: Option<f64>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Build a per-block latency table.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum)]
        source: Option<LutSourceArg>,
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Distill a channel-pruned image decoder from a teacher decoder.
    DecoderDistill {
        #[command(flatten)]
        common: Common,
        /// Run directory or checkpoint stem of a teacher decoder; a fresh
        /// decoder from the config otherwise.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Sweep guidance scales and record `dist` and `consistency`.
    EvalCurve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        n_samples: Option<usize>,
        /// Comma-separated guidance scales.
        #[arg(long, value_parser = parse_list)]
        w_list: Option<Vec<f64>>,
    },
    /// Direct 16->8 against progressive 32->16->8 at equal iteration budgets.
    DistillCompare {
        #[command(flatten)]
        common: Common,
        /// Teacher checkpoint; trained from the config otherwise.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Total distillation iterations per pipeline.
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Run the full chain from base teacher to 8-step efficient student.
    Reproduce {
        #[command(flatten)]
        common: Common,
        /// Existing reproduce run; only stages with missing outputs rerun.
        #[arg(long, conflicts_with_all = ["config", "out", "name", "seed"])]
        resume: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Distill { .. } => "distill",
            Command::Evolve { .. } => "evolve",
            Command::Sample { .. } => "sample",
            Command::Bench { .. } => "bench",
            Command::DecoderDistill { .. } => "decoder-distill",
            Command::EvalCurve { .. } => "eval-curve",
            Command::DistillCompare { .. } => "distill-compare",
            Command::Reproduce { .. } => "reproduce",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Train { common, .. }
            | Command::Distill { common, .. }
            | Command::Evolve { common, .. }
            | Command::Sample { common, .. }
            | Command::Bench { common, .. }
            | Command::DecoderDistill { common, .. }
            | Command::EvalCurve { common, .. }
            | Command::DistillCompare { common, .. }
            | Command::Reproduce { common, .. } => common,
        }
    }
}

fn set<T: Clone>(slot: &mut T, flag: &Option<T>) {
    if let Some(v) = flag {
        *slot = v.clone();
    }
}

/// Loads the config file (or defaults) and applies flags on top.
pub fn resolve_config(command: &Command) -> CliResult<RunConfig> {
    let common = command.common();
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.name, &common.name);
    set(&mut cfg.seed, &common.seed);
    match command {
        Command::Train { steps, batch_size, learning_rate, execute_probability, .. } => {
            set(&mut cfg.train.steps, steps);
            set(&mut cfg.train.batch_size, batch_size);
            set(&mut cfg.train.learning_rate, learning_rate);
            if execute_probability.is_some() {
                cfg.train.execute_probability = *execute_probability;
            }
        }
        Command::Distill {
            mode,
            teacher_steps,
            student_steps,
            cfg_range,
            cfg_prob,
            gamma,
            gamma_mode,
            iterations,
            learning_rate,
            ..
        } => {
            let d = &mut cfg.distill;
            if let Some(m) = mode {
                d.mode = match m {
                    ModeArg::Direct => DistillMode::Direct,
                    ModeArg::Progressive => DistillMode::Progressive,
                };
            }
            if let Some(g) = gamma_mode {
                d.gamma_mode = match g {
                    GammaModeArg::Const => GammaMode::Constant,
                    GammaModeArg::Dynamic => GammaMode::Dynamic,
                };
            }
            set(&mut d.teacher_steps, teacher_steps);
            set(&mut d.student_steps, student_steps);
            set(&mut d.cfg_range, cfg_range);
            set(&mut d.cfg_probability, cfg_prob);
            set(&mut d.gamma, gamma);
            set(&mut d.iterations, iterations);
            set(&mut d.learning_rate, learning_rate);
        }
        Command::Evolve { target_ms, group_size, rounds, train_steps_per_round, .. } => {
            let e = &mut cfg.evolve;
            if target_ms.is_some() {
                e.target_ms = *target_ms;
            }
            set(&mut e.group_size, group_size);
            set(&mut e.rounds, rounds);
            set(&mut e.train_steps_per_round, train_steps_per_round);
        }
        Command::Sample { steps, cfg_scale, n, .. } => {
            set(&mut cfg.sample.steps, steps);
            set(&mut cfg.sample.cfg_scale, cfg_scale);
            set(&mut cfg.sample.n, n);
        }
        Command::Bench { source, reps, .. } => {
            if let Some(s) = source {
                cfg.evolve.lut_source = match s {
                    LutSourceArg::CostModel => LutSource::CostModel,
                    LutSourceArg::Bench => LutSource::Bench,
                };
            }
            set(&mut cfg.evolve.bench_reps, reps);
        }
        Command::DecoderDistill { ratio, steps, .. } => {
            set(&mut cfg.decoder.ratio, ratio);
            set(&mut cfg.decoder.steps, steps);
        }
        Command::EvalCurve { steps, n_samples, w_list, .. } => {
            set(&mut cfg.eval.steps, steps);
            set(&mut cfg.eval.n_samples, n_samples);
            set(&mut cfg.eval.w_list, w_list);
        }
        Command::DistillCompare { .. } | Command::Reproduce { .. } => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(command: &Command, run: &mut RunDir) -> CliResult<()> {
    match command {
        Command::Train { .. } => commands::train(run),
        Command::Distill { teacher, student, .. } => commands::distill_cmd(run, teacher, student),
        Command::Evolve { model, lut, .. } => commands::evolve_cmd(run, model.as_deref(), lut.as_deref()),
        Command::Sample { model, .. } => commands::sample_cmd(run, model.as_deref()),
        Command::Bench { model, .. } => commands::bench_cmd(run, model.as_deref()),
        Command::DecoderDistill { teacher, .. } => commands::decoder_cmd(run, teacher.as_deref()),
        Command::EvalCurve { model, .. } => commands::eval_curve_cmd(run, model.as_deref()),
        Command::DistillCompare { teacher, budget, .. } => pipeline::compare_cmd(run, teacher.as_deref(), *budget),
        Command::Reproduce { .. } => pipeline::reproduce(run),
    }
}

/// Runs one command line and returns the process exit code: 0 on success,
/// 2 for usage errors, 1 for configuration and runtime failures.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match run_command(&cli.command, &args) {
        Ok(root) => {
            println!("{}", root.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Executes `command` and returns its run directory.
pub fn run_command(command: &Command, args: &[String]) -> CliResult<PathBuf> {
    let mut run = match command {
        Command::Reproduce { resume: Some(dir), .. } => RunDir::open(dir, args)?,
        _ => {
            let cfg = resolve_config(command)?;
            RunDir::create(&cfg, command.name(), args, command.common().out.as_deref())?
        }
    };
    let root = run.root.clone();
    let outcome = execute(command, &mut run);
    run.finalize(outcome)?;
    Ok(root)
}
