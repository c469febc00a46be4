//! Command-line front end: trace analysis, theory verification, toy
//! training and evaluation, gradient checks.

pub mod analyze;
pub mod cmd;
pub mod config;
pub mod error;
pub mod svg;
pub mod trace;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use harecast_core::gradcheck::GradCheckOptions;
use harecast_core::verify::SuiteSizes;
use harecast_core::ModelConfig;

use crate::analyze::{AnalyzeOptions, Selection};
use crate::cmd::eval::Profile;
use crate::config::{parse_overrides, ToyConfig};
use crate::error::{read_text, write_file, CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "harecast", version, about = "Head-wise attention energy analysis and toy nowcasting")]
pub struct Cli {
    /// Worker threads for parallel stages. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cross-sample energy variance heatmaps from a trace file.
    Analyze {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        svg: PathBuf,
        /// Split batches into accurate and inaccurate by CSI-M against the mean.
        #[arg(long, conflicts_with = "batch")]
        split_by_csi: bool,
        /// Analyze a single batch.
        #[arg(long)]
        batch: Option<u64>,
        /// Trace step to analyze (default: the last).
        #[arg(long)]
        step: Option<u64>,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Monte-Carlo check of the lemma and theorem bounds.
    VerifyTheory {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, hide = true)]
        inflate_rhs: Option<f64>,
    },
    /// Train the toy nowcaster. Any config key can be overridden with `--key value`.
    TrainToy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0.., value_name = "OVERRIDES")]
        overrides: Vec<String>,
    },
    /// Verification scores of predictions against truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, value_name = "sevir-like|meteonet-like")]
        profile: String,
        #[arg(long)]
        csv: PathBuf,
        /// Also write the human-readable table here.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, hide = true)]
        perturb_param: Option<String>,
        #[arg(long, hide = true, default_value_t = 1e-3)]
        perturb_delta: f64,
    },
    /// Write synthetic events and their future frames.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "toy", value_parser = ["toy", "micro"])]
        preset: String,
    },
    /// Forecast every event in a directory with a trained run.
    Forecast {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// `--out` and `--config` may also appear among the trailing overrides.
fn split_paths(
    mut config: Option<PathBuf>,
    mut out: Option<PathBuf>,
    raw: &[String],
) -> CliResult<(Option<PathBuf>, PathBuf, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    for (k, v) in parse_overrides(raw)? {
        match k.as_str() {
            "out" => out = Some(v.into()),
            "config" => config = Some(v.into()),
            _ => rest.push((k, v)),
        }
    }
    let out = out.ok_or_else(|| CliError::usage("train-toy needs --out DIR"))?;
    Ok((config, out, rest))
}

fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::Analyze { trace, csv, svg, split_by_csi, batch, step, run_id } => {
            let records = trace::parse_trace(&read_text(&trace)?)?;
            let selection = match (split_by_csi, batch) {
                (true, _) => Selection::SplitByCsi,
                (false, Some(b)) => Selection::Batch(b),
                (false, None) => Selection::All,
            };
            let a = analyze::analyze(&records, &AnalyzeOptions { run_id, step, selection })?;
            write_file(&csv, analyze::to_csv(&a))?;
            write_file(&svg, svg::render(&a))?;
            for hm in &a.heatmaps {
                let n = hm.variance.iter().flatten().count() as f64;
                let mean = hm.variance.iter().flatten().sum::<f64>() / n;
                println!("{}: {} batches, mean variance {mean:.6e}", hm.group, hm.batches.len());
            }
        }
        Command::VerifyTheory { trials, seed, report, inflate_rhs } => {
            let opts = cmd::verify_theory::VerifyOptions { trials, seed, sizes: SuiteSizes::default(), inflate_rhs };
            let r = cmd::verify_theory::run(&opts)?;
            write_file(&report, cmd::verify_theory::to_json(&r))?;
            let s = &r.summary;
            println!("{} bounds checked, {} violations, {} configurations refused", s.bounds_checked, s.violations, s.refused);
            if s.violations > 0 {
                return Err(CliError::Verification(format!("{} bound(s) violated: {}", s.violations, s.violated.join(", "))));
            }
        }
        Command::TrainToy { config, out, overrides } => {
            let (config, out, overrides) = split_paths(config, out, &overrides)?;
            let text = config.as_deref().map(read_text).transpose()?;
            let cfg = ToyConfig::resolve(text.as_deref(), &overrides)?;
            let result = cmd::train_toy::run(&cfg)?;
            cmd::train_toy::write(&out, &cfg, &result)?;
            println!("trained {} steps, final objective {:.6}, {} trace records", cfg.steps, result.final_total, result.trace.len());
        }
        Command::Eval { pred, truth, profile, csv, table } => {
            let profile = Profile::parse(&profile)?;
            let (rows, overall) = cmd::eval::run(&pred, &truth, profile)?;
            write_file(&csv, cmd::eval::to_csv(&rows, &overall))?;
            let t = cmd::eval::table(&rows, &overall);
            if let Some(p) = table {
                write_file(&p, &t)?;
            }
            print!("{t}");
        }
        Command::Gradcheck { seed, count, report, perturb_param, perturb_delta } => {
            let opts = GradCheckOptions { perturb: perturb_param.map(|p| (p, perturb_delta)), ..Default::default() };
            let reports = cmd::gradcheck::run(seed, count, &opts)?;
            print!("{}", cmd::gradcheck::table(&reports));
            if let Some(p) = report {
                write_file(&p, cmd::gradcheck::to_json(&reports))?;
            }
            if let Some(msg) = cmd::gradcheck::failure(&reports, opts.tolerance) {
                return Err(CliError::Verification(msg));
            }
        }
        Command::Synth { seed, count, out, preset } => {
            let model = if preset == "micro" { ModelConfig::micro() } else { ModelConfig::toy() };
            cmd::synth::run(seed, count, &model, &out)?;
            println!("wrote {count} events to {}", out.display());
        }
        Command::Forecast { run, events, out, seed } => {
            let n = cmd::forecast::run(&run, &events, &out, seed)?;
            println!("wrote {n} forecasts to {}", out.display());
        }
    }
    Ok(())
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    if cli.threads == 0 {
        eprintln!("{}", CliError::usage("--threads must be at least 1"));
        return 2;
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("{}", CliError::usage(format!("cannot start {} threads: {e}", cli.threads)));
            return 2;
        }
    };
    match pool.install(|| execute(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
