//! Command-line front end.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_state, save_state};
use crate::config::{load_config, to_text};
use crate::error::{Error, Result};
use crate::generator::GeneratorMode;
use crate::gradcheck::GradcheckOptions;
use crate::metrics::{round_half_up, routing_confusion, AccuracyMatrix};
use crate::report::{write_reports, RunLayout};
use crate::router::RoutingMode;
use crate::stream::generate_stream;
use crate::trainer::{end_to_end_gradcheck, gradcheck_config, run_stream, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "xprompt", version, about = "Continual instruction tuning with generated cross-modal prompts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on the full task stream and write checkpoints and reports.
    Run(RunArgs),
    /// Finite-difference check of every trainable gradient.
    Gradcheck(GradcheckArgs),
    /// Continual metrics of a stage-major accuracy matrix CSV.
    Metrics {
        #[arg(long)]
        matrix: PathBuf,
    },
    /// Routing accuracy and confusion of a saved checkpoint.
    Routeprobe {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write the confusion matrix here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "runs/latest")]
    pub out: PathBuf,
    #[arg(long)]
    pub router_mode: Option<RoutingMode>,
    #[arg(long)]
    pub generator_mode: Option<GeneratorMode>,
    #[arg(long)]
    pub no_nullspace: bool,
    #[arg(long)]
    pub no_crossattn: bool,
    #[arg(long)]
    pub eps: Option<f64>,
    /// Prompt length.
    #[arg(long)]
    pub lp: Option<usize>,
    /// Generator hidden width.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Router temperature.
    #[arg(long)]
    pub tau: Option<f64>,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.router_mode {
            cfg.router_mode = m;
        }
        if let Some(m) = self.generator_mode {
            cfg.generator.mode = m;
        }
        if self.no_nullspace {
            cfg.nullspace = false;
        }
        if self.no_crossattn {
            cfg.generator.cross_attention = false;
        }
        if let Some(e) = self.eps {
            cfg.eps = e;
        }
        if let Some(l) = self.lp {
            cfg.generator.prompt_len = l;
        }
        if let Some(h) = self.hidden {
            cfg.generator.hidden = h;
        }
        if let Some(t) = self.tau {
            cfg.refine.tau = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
}

fn run(args: &RunArgs, out: &mut impl Write) -> Result<()> {
    let cfg = args.resolve()?;
    let layout = RunLayout::new(&args.out);
    layout.create()?;
    std::fs::write(layout.config(), to_text(&cfg))?;
    let mut saved: Result<()> = Ok(());
    let outcome = run_stream(cfg, |state, rec| {
        if saved.is_ok() {
            saved = save_state(&layout.checkpoint(rec.task), state);
        }
        eprintln!("task {} done, final loss {:.4}", rec.task + 1, rec.batch_losses.last().copied().unwrap_or(f64::NAN));
    })?;
    saved?;
    let summary = write_reports(&layout, &outcome)?;
    writeln!(out, "{}", serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

fn gradcheck(args: &GradcheckArgs, out: &mut impl Write) -> Result<bool> {
    let opts = GradcheckOptions { tolerance: args.tolerance, ..Default::default() };
    let mut worst = 0.0f64;
    let mut entries = 0;
    for mode in [GeneratorMode::Segment, GeneratorMode::Mean, GeneratorMode::Static, GeneratorMode::Learnable] {
        let mut mode_worst = 0.0f64;
        for seed in 0..args.seeds {
            let r = end_to_end_gradcheck(&gradcheck_config(mode, seed), &opts)?;
            mode_worst = mode_worst.max(r.max_rel_err);
            entries += r.entries_checked;
        }
        writeln!(out, "{:<10} seeds {:>3}  max rel err {mode_worst:.3e}", mode.to_string(), args.seeds)?;
        worst = worst.max(mode_worst);
    }
    let ok = worst < args.tolerance;
    writeln!(out, "checked {entries} entries, max rel err {worst:.3e}: {}", if ok { "ok" } else { "FAILED" })?;
    Ok(ok)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{:.2}", round_half_up(v, 2))).unwrap_or_else(|| "-".into())
}

fn metrics(path: &Path, out: &mut impl Write) -> Result<()> {
    let m = AccuracyMatrix::load_csv(path)?;
    let s = m.summary()?;
    writeln!(out, "stage  B_t     M_t")?;
    for st in &s.stages {
        writeln!(out, "{:<6} {:<7} {:.2}", st.stage, fmt_opt(st.bwt), round_half_up(st.ma, 2))?;
    }
    writeln!(out, "Average {:.2}", round_half_up(s.final_average, 2))?;
    writeln!(out, "B_mean {}", fmt_opt(s.bwt_mean))?;
    writeln!(out, "M_mean {:.2}", round_half_up(s.ma_mean, 2))?;
    Ok(())
}

fn routeprobe(dir: &Path, csv: Option<&Path>, out: &mut impl Write) -> Result<()> {
    let state = load_state(dir)?;
    let seen = state.tasks_done();
    let stream = generate_stream(&state.cfg.stream_config())?;
    let mut log = vec![];
    for s in stream.tasks.iter().take(seen).flat_map(|t| &t.test) {
        log.push((s.task, state.router.route_sample(s)?));
    }
    let conf = routing_confusion(&log, seen)?;
    for (t, acc) in conf.per_task_accuracy().iter().enumerate() {
        writeln!(out, "task {} routing accuracy {:.2}", t + 1, round_half_up(*acc, 2))?;
    }
    writeln!(out, "overall routing accuracy {:.2}", round_half_up(conf.accuracy(), 2))?;
    match csv {
        Some(p) => conf.write_csv(std::fs::File::create(p)?)?,
        None => conf.write_csv(&mut *out)?,
    }
    Ok(())
}

/// Runs a parsed command; returns whether it succeeded.
pub fn execute(cli: &Cli, out: &mut impl Write) -> Result<bool> {
    match &cli.command {
        Command::Run(a) => run(a, out).map(|_| true),
        Command::Gradcheck(a) => gradcheck(a, out),
        Command::Metrics { matrix } => metrics(matrix, out).map(|_| true),
        Command::Routeprobe { checkpoint, csv } => routeprobe(checkpoint, csv.as_deref(), out).map(|_| true),
    }
}

/// 2 for bad input (config, CSV), 1 for anything failing at run time.
pub fn exit_code(err: &Error) -> u8 {
    if err.is_input_error() {
        2
    } else {
        1
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut stdout = std::io::stdout().lock();
    match execute(&cli, &mut stdout) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
