use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tgbformer_core::gradcheck::{self, effective_step};
use tgbformer_core::pipeline::{self, load_config, synth_sequence, ModelParams, PipelineConfig};
use tgbformer_core::tokenizer::FrameFeature;
use tgbformer_core::verify::oracle_suite;
use tgbformer_core::{tzr, Error};

const EXIT_BREACH: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(name = "tgbformer", version, about = "Spatial-temporal feature aggregation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON pipeline config; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one window through the model and write the blended features.
    Run {
        #[command(flatten)]
        common: Common,
        /// Frames as a TZR tensor of shape [N, c, h, w].
        #[arg(long, conflicts_with = "synth", required_unless_present = "synth")]
        input: Option<PathBuf>,
        /// Use a synthetic window instead of an input file.
        #[arg(long)]
        synth: bool,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compare every vectorized kernel against its loop oracle.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Compare tape gradients against central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Finite-difference step.
        #[arg(long, default_value_t = 1e-5, allow_negative_numbers = true)]
        h: f64,
        /// Restrict to these suites.
        #[arg(long = "suite", value_parser = clap::builder::PossibleValuesParser::new(gradcheck::SUITES))]
        suites: Vec<String>,
    },
    /// Write a synthetic window of frames.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        output: PathBuf,
    },
}

enum Failure {
    Breach(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn config(common: &Common, preset: fn() -> PipelineConfig) -> Result<PipelineConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => load_config(path)?,
        None => preset(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn read_frames(path: &Path, cfg: &PipelineConfig) -> Result<Vec<FrameFeature>, Error> {
    let t = tzr::load(path)?;
    let frames = FrameFeature::unstack(&t).map_err(|e| Error::Format(e.to_string()))?;
    let s = t.shape();
    let expected = [cfg.n, cfg.frame.channels, cfg.frame.height, cfg.frame.width];
    for (i, field) in ["N", "frame.channels", "frame.height", "frame.width"].iter().enumerate() {
        if s[i] != expected[i] {
            return Err(Error::Config {
                field: field.to_string(),
                reason: format!("input has {} but the config expects {}", s[i], expected[i]),
            });
        }
    }
    Ok(frames)
}

fn run(
    common: &Common,
    input: Option<&Path>,
    output: &Path,
    report_path: Option<&Path>,
) -> Result<(), Failure> {
    let cfg = config(common, PipelineConfig::default)?;
    let frames = match input {
        Some(path) => read_frames(path, &cfg)?,
        None => synth_sequence(&cfg, cfg.seed)?,
    };
    let params = ModelParams::init(&cfg)?;
    let (b, mut report) = pipeline::run_pipeline(&frames, &cfg, &params)?;
    tzr::save(output, &b)?;
    report
        .outputs
        .insert("blended".into(), output.display().to_string());
    if let Some(path) = report_path {
        report.outputs.insert("report".into(), path.display().to_string());
    }
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    match report_path {
        Some(path) => std::fs::write(path, json + "\n").map_err(Error::from)?,
        None => println!("{json}"),
    }
    let broken: Vec<&String> = report
        .invariants
        .iter()
        .filter(|(_, ok)| !**ok)
        .map(|(k, _)| k)
        .collect();
    if broken.is_empty() {
        eprintln!("wrote {:?} to {}", b.shape(), output.display());
        Ok(())
    } else {
        Err(Failure::Breach(format!("invariants failed: {broken:?}")))
    }
}

fn oracle(common: &Common, inject_fault: bool) -> Result<(), Failure> {
    let cfg = config(common, PipelineConfig::oracle_preset)?;
    let checks = oracle_suite(&cfg, inject_fault)?;
    println!("{:<24} {:>12} {:>10}  status", "kernel", "max_abs_diff", "tolerance");
    for c in &checks {
        println!(
            "{:<24} {:>12.3e} {:>10.0e}  {}",
            c.kernel,
            c.max_abs_diff,
            c.tolerance,
            if c.passed() { "ok" } else { "BREACH" }
        );
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.kernel).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Breach(format!("oracle mismatch in {}", failed.join(", "))))
    }
}

fn gradcheck(common: &Common, h: f64, suites: &[String]) -> Result<(), Failure> {
    let cfg = config(common, PipelineConfig::gradcheck_preset)?;
    let (step, warning) = effective_step(h);
    if let Some(w) = warning {
        eprintln!("warning: {w}");
    }
    let only: Vec<&str> = suites.iter().map(String::as_str).collect();
    let checks = gradcheck::run_suites(&cfg, step, &only)?;
    println!("{:<20} {:<44} {:>6} {:>10} {:>6}  status", "suite", "block", "numel", "rel_error", "kinks");
    for c in &checks {
        println!(
            "{:<20} {:<44} {:>6} {:>10.2e} {:>6}  {}",
            c.suite,
            c.block,
            c.numel,
            c.rel_error,
            c.kink_retries,
            if c.passed() { "ok" } else { "BREACH" }
        );
    }
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{}:{}", c.suite, c.block))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Breach(format!("gradient mismatch in {}", failed.join(", "))))
    }
}

fn synth(common: &Common, output: &Path) -> Result<(), Failure> {
    let cfg = config(common, PipelineConfig::default)?;
    let frames = synth_sequence(&cfg, cfg.seed)?;
    tzr::save(output, &FrameFeature::stack(&frames)?)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            common,
            input,
            output,
            report,
            ..
        } => run(common, input.as_deref(), output, report.as_deref()),
        Command::Oracle {
            common,
            inject_fault,
        } => oracle(common, *inject_fault),
        Command::Gradcheck { common, h, suites } => gradcheck(common, *h, suites),
        Command::Synth { common, output } => synth(common, output),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Breach(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_BREACH)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() {
                EXIT_CONFIG
            } else if e.is_io() {
                EXIT_IO
            } else {
                EXIT_BREACH
            })
        }
    }
}
