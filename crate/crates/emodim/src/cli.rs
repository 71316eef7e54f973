//! Command-line entry point.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use emodim_core::data::Split;
use emodim_core::synth::SynthSpec;

use crate::error::{EmodimError, Result, EXIT_OK, EXIT_USAGE};
use crate::pipeline::{self, Arch, DistillOptions, RunSettings, TrainOptions};

#[derive(Debug, Parser)]
#[command(name = "emodim", version, about = "Dimensional speech emotion training with embedding distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Settings {
    #[arg(long, value_enum, default_value = "tcgru")]
    arch: Arch,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    #[arg(long, default_value_t = 128)]
    embed_dim: usize,
    #[arg(long, default_value_t = 100)]
    max_epochs: usize,
    #[arg(long, default_value_t = 10)]
    patience: usize,
}

impl From<Settings> for RunSettings {
    fn from(s: Settings) -> Self {
        RunSettings {
            arch: s.arch,
            seed: s.seed,
            hidden: s.hidden,
            embed_dim: s.embed_dim,
            max_epochs: s.max_epochs,
            patience: s.patience,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic corpus (feature files + manifest).
    GenSynth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on one feature stream or a fusion (`fused:a,b`).
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        features: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        settings: Settings,
    },
    /// Cache teacher embeddings, then train a student with the distillation loss.
    Distill {
        #[arg(long)]
        teacher_ckpt: PathBuf,
        #[arg(long)]
        teacher_features: String,
        #[arg(long)]
        student_features: String,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Constant `kappa,lambda` instead of the two-phase schedule.
        #[arg(long, value_parser = parse_pair)]
        constant_weights: Option<(f64, f64)>,
        #[command(flatten)]
        settings: Settings,
    },
    /// Report CCC and valence-binned RMSE of a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        features: Option<String>,
        #[arg(long, default_value_t = 6)]
        bins: usize,
    },
    /// Write utterance embeddings and labels as CSV, sorted by id.
    ExportEmbeddings {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        #[arg(long)]
        features: Option<String>,
    },
    /// Print the parameter report of a checkpoint.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).map_err(|e| e.to_string())
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected `kappa,lambda`")?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(a)?, p(b)?))
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenSynth { spec, out } => {
            let spec: SynthSpec = crate::read_json(&spec)?;
            let manifest = pipeline::gen_synth(&spec, &out)?;
            println!("{}", manifest.display());
        }
        Command::Train {
            manifest,
            features,
            out,
            settings,
        } => {
            let report = pipeline::train(&TrainOptions {
                manifest,
                features,
                out,
                settings: settings.into(),
            })?;
            println!("best epoch {} validation CCC {:?}", report.best_epoch, report.best_val_ccc);
        }
        Command::Distill {
            teacher_ckpt,
            teacher_features,
            student_features,
            manifest,
            out,
            constant_weights,
            settings,
        } => {
            let report = pipeline::distill(&DistillOptions {
                teacher_ckpt,
                teacher_features,
                student_features,
                manifest,
                out,
                settings: settings.into(),
                constant_weights,
            })?;
            println!("best epoch {} validation CCC {:?}", report.best_epoch, report.best_val_ccc);
        }
        Command::Eval {
            ckpt,
            manifest,
            split,
            report,
            features,
            bins,
        } => {
            let r = pipeline::eval(&ckpt, &manifest, split, features.as_deref(), bins)?;
            crate::write_json(&report, &r)?;
            print!("{}", r.table());
        }
        Command::ExportEmbeddings {
            ckpt,
            manifest,
            out,
            split,
            features,
        } => {
            let n = pipeline::export_embeddings(&ckpt, &manifest, split, features.as_deref(), &out)?;
            println!("{n} rows written to {}", out.display());
        }
        Command::Inspect { ckpt } => {
            let (cfg, report) = pipeline::inspect(&ckpt)?;
            println!("{}", serde_json::to_string_pretty(&serde_json::json!({ "model": cfg, "params": report })).expect("serializable"));
        }
    }
    Ok(())
}

/// Parse `argv` (including the program name), run, and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

impl From<clap::Error> for EmodimError {
    fn from(e: clap::Error) -> Self {
        EmodimError::Usage(e.to_string())
    }
}
