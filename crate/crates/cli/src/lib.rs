// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end for `headscope`.
//!
//! Exit codes: 0 success, 2 usage, 3 validation (bad input, configuration
//! or selection), 4 I/O, 5 numeric.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;

use std::process::ExitCode;

use clap::Parser;
use headscope::exec::with_jobs;

use crate::args::{BenchCommand, Cli, Command};
use crate::commands::*;
use crate::config::{resolve_seed, ConfigLayer, RunConfig, SEED_ENV};
pub use crate::error::{CliError, Result};

fn env_seed() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => ConfigLayer::read(p)?,
        None => ConfigLayer::default(),
    };
    let jobs = cli.jobs.or(file.jobs).unwrap_or(0);
    let seed = |flag: Option<u64>| resolve_seed(flag.or(file.seed), env_seed().as_deref());
    let run_cfg = |a: &args::RunArgs| RunConfig::from_layer(file.clone().overlay(a.layer(cli.jobs)));
    with_jobs(jobs, || -> Result<()> {
        match &cli.command {
            Command::Score(a) => {
                let out = cmd_score(&run_cfg(a)?)?;
                println!(
                    "scored {} samples ({} forward passes): {} {}",
                    out.samples,
                    out.forward_calls,
                    out.t2t_path.display(),
                    out.i2t_path.display()
                );
            }
            Command::Intervene(a) => {
                let r = cmd_intervene(&run_cfg(a)?)?;
                println!(
                    "|Z-| = {}, |Z+| = {}, gamma+ = {}, gamma- = {}",
                    r.selection.z_minus.len(),
                    r.selection.z_plus.len(),
                    r.lambda.gamma_plus,
                    r.lambda.gamma_minus
                );
                for (k, d) in &r.delta {
                    println!(
                        "{k:<14} {:>6.1} -> {:>6.1}  {}",
                        r.baseline.percent[k],
                        r.intervened.percent[k],
                        format_delta(*d)
                    );
                }
            }
            Command::Ablate(a) => {
                let r = cmd_ablate(&run_cfg(a)?)?;
                print!("{}", ablation_table(&r));
            }
            Command::Correlate(a) => {
                let tables: Vec<_> = a.tables.iter().map(|s| parse_named_table(s)).collect();
                let r = cmd_correlate(&tables, &a.out, seed(a.seed)?)?;
                for (name, row) in r.names.iter().zip(&r.matrix) {
                    let cells: Vec<String> = row.iter().map(|v| format!("{v:>7.4}")).collect();
                    println!("{name:<16} {}", cells.join(" "));
                }
            }
            Command::Bench(b) => run_bench(b, &seed)?,
        }
        Ok(())
    })
}

fn run_bench(cmd: &BenchCommand, seed: &dyn Fn(Option<u64>) -> Result<u64>) -> Result<()> {
    match cmd {
        BenchCommand::ToyAnnotations { images, seed: s, out, lexicon_out } => {
            let records = cmd_toy_annotations(*images, seed(*s)?, out, lexicon_out.as_deref())?;
            println!("{} images -> {}", records.len(), out.display());
        }
        BenchCommand::BuildPope { annotations, lexicon, templates, strategy, per_image, seed: s, out } => {
            let samples = cmd_build_pope(&BuildPopeArgs {
                annotations,
                lexicon,
                templates: templates.as_deref(),
                strategy: *strategy,
                per_image: *per_image,
                seed: seed(*s)?,
                out,
            })?;
            println!("{} questions -> {}", samples.len(), out.display());
        }
        BenchCommand::BuildMcq { pope, lexicon, templates, seed: s, out } => {
            let samples = cmd_build_mcq(pope, lexicon, templates.as_deref(), seed(*s)?, out)?;
            println!("{} questions -> {}", samples.len(), out.display());
        }
        BenchCommand::Eval { dataset, responses, out } => {
            let r = cmd_eval(dataset, responses, out)?;
            let m = &r.metrics;
            println!(
                "accuracy {:.4} precision {:.4} recall {:.4} f1 {:.4} macro-f1 {:.4} ({} unparseable)",
                m.accuracy, m.precision, m.recall, m.f1, m.macro_f1, m.unparseable
            );
        }
        BenchCommand::Chair { captions, vocab, out } => {
            let r = cmd_chair(captions, vocab.as_deref(), out)?;
            println!("C_S {:.4} C_I {:.4}", r.metrics.c_s, r.metrics.c_i);
        }
        BenchCommand::Plant { spec, seed: s, out } => {
            let s = match s {
                Some(v) => Some(*v),
                None => env_seed().map(|v| resolve_seed(None, Some(&v))).transpose()?,
            };
            let r = cmd_plant(spec.as_deref(), s, out)?;
            println!("planted model -> {}", r.model_path.display());
        }
    }
    Ok(())
}

/// Parses `std::env::args`, runs, and maps the outcome to an exit code.
pub fn main_entry() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { error::EXIT_USAGE } else { error::EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
