//! `lpm`: linear Poisson modelling pipeline for paired-timepoint ADC histograms.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

mod commands;
mod config;
mod output;

use commands::PhaseArg;
use config::RunConfig;
use output::{Artifacts, Provenance};

/// Problem with the user's inputs or configuration (exit code 2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct InputError(pub String);

#[derive(Parser)]
#[command(name = "lpm", version, about = "Linear Poisson modelling of treatment response")]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for restarts, sweeps and folds.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Bin voxel (or raw-signal) CSVs into per-tumor histogram JSON files.
    Ingest {
        inputs: Vec<PathBuf>,
        /// Inputs hold per-b-value signals; fit ADCs first.
        #[arg(long)]
        signal: bool,
    },
    /// Train a model with fixed component counts.
    Train {
        inputs: Vec<PathBuf>,
        #[arg(long)]
        n_control: Option<usize>,
        #[arg(long)]
        n_treatment: Option<usize>,
    },
    /// Sweep component counts and keep the best model.
    Select {
        inputs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "both")]
        phase: PhaseArg,
        /// Control model for a treatment-only sweep.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Fit histograms with a trained model and report responses.
    Fit {
        inputs: Vec<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Leave-one-out assessment of the control cohort.
    Validate {
        inputs: Vec<PathBuf>,
        #[arg(long)]
        n_control: Option<usize>,
        #[arg(long)]
        n_treatment: Option<usize>,
        /// Take component counts from this model.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Conventional volume / mean / IQR t-tests.
    Baseline { inputs: Vec<PathBuf> },
    /// Generate a synthetic cohort with ground truth.
    Synth {
        #[arg(long)]
        preset: Option<String>,
        /// Also write every voxel as a CSV suitable for `ingest`.
        #[arg(long)]
        voxels: bool,
    },
    /// Combine earlier outputs into a report with charts.
    Report {
        /// Directory holding earlier outputs; defaults to the output directory.
        #[arg(long)]
        from: Option<PathBuf>,
    },
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.out_dir {
        cfg.out_dir = d.clone();
    }
    let set_inputs = |cfg: &mut RunConfig, inputs: &[PathBuf]| {
        if !inputs.is_empty() {
            cfg.input = inputs.to_vec();
        }
    };
    match &cli.command {
        Command::Ingest { inputs, .. } | Command::Baseline { inputs } => set_inputs(&mut cfg, inputs),
        Command::Train {
            inputs,
            n_control,
            n_treatment,
        }
        | Command::Validate {
            inputs,
            n_control,
            n_treatment,
            ..
        } => {
            set_inputs(&mut cfg, inputs);
            cfg.n_control = n_control.or(cfg.n_control);
            cfg.n_treatment = n_treatment.or(cfg.n_treatment);
        }
        Command::Select { inputs, .. } | Command::Fit { inputs, .. } => set_inputs(&mut cfg, inputs),
        Command::Synth { preset, .. } => {
            if let Some(p) = preset {
                cfg.preset = p.clone();
            }
        }
        Command::Report { .. } => {}
    }
    if let Command::Select { model: Some(m), .. } | Command::Fit { model: Some(m), .. } | Command::Validate { model: Some(m), .. } =
        &cli.command
    {
        cfg.model = Some(m.clone());
    }
    cfg.check_inputs_exist()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    let cfg = effective_config(&cli)?;
    let out = Artifacts {
        dir: cfg.out_dir.clone(),
        provenance: Provenance {
            config_hash: cfg.hash(),
            seed: cfg.seed,
        },
        json: cfg.emit_json,
        csv: cfg.emit_csv,
        svg: cfg.emit_svg,
    };
    log::info!("config hash {} seed {}", out.provenance.config_hash, cfg.seed);
    match &cli.command {
        Command::Ingest { signal, .. } => commands::ingest(&cfg, &out, *signal),
        Command::Train { .. } => commands::train(&cfg, &out),
        Command::Select { phase, .. } => commands::select(&cfg, &out, *phase),
        Command::Fit { .. } => commands::fit(&cfg, &out),
        Command::Validate { .. } => commands::validate(&cfg, &out),
        Command::Baseline { .. } => commands::baseline(&cfg, &out),
        Command::Synth { voxels, .. } => commands::synth(&cfg, &out, *voxels),
        Command::Report { from } => {
            let from = from.clone().unwrap_or_else(|| cfg.out_dir.clone());
            commands::report(&out, &from)
        }
    }
}

/// 2 for bad inputs, 1 for analysis failures.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(core) = cause.downcast_ref::<lpm_core::Error>() {
            return if core.is_input_error() { 2 } else { 1 };
        }
        if cause.is::<InputError>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
