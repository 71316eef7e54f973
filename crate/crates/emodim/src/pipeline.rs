//! End-to-end workflows behind the subcommands.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use emodim_core::data::Split;
use emodim_core::evaluation::predict;
use emodim_core::losses::Schedule;
use emodim_core::model::{EmotionModel, ModelConfig, ParamReport};
use emodim_core::synth::{gen_synthetic, student_stream, teacher_stream, SynthSpec};
use emodim_core::training::{fit, prepare_teacher_cache, FitConfig, FitReport, LossBreakdown, TeacherCache};
use log::info;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::error::{EmodimError, Result};
use crate::features::write_feature_file;
use crate::manifest::{load_split, read_manifest, write_manifest, StreamSpec};
use crate::report::{write_embeddings, EvalReport};
use crate::teacher::write_teacher_cache;

pub const CHECKPOINT_FILE: &str = "model.emow";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const FIT_FILE: &str = "fit.json";
pub const CONFIG_FILE: &str = "config.json";
pub const CACHE_FILE: &str = "teacher_cache.emot";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Gru,
    Tcgru,
}

/// Model widths and stopping rule shared by `train` and `distill`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub arch: Arch,
    pub seed: u64,
    pub hidden: usize,
    pub embed_dim: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            arch: Arch::Tcgru,
            seed: 0,
            hidden: 128,
            embed_dim: 128,
            max_epochs: 100,
            patience: 10,
        }
    }
}

impl RunSettings {
    fn model_config(&self, input_dim: usize) -> ModelConfig {
        ModelConfig::new(input_dim, self.arch == Arch::Tcgru).with_widths(self.hidden, self.embed_dim)
    }

    fn fit_config(&self) -> FitConfig {
        FitConfig {
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
            ..FitConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub manifest: PathBuf,
    pub features: String,
    pub out: PathBuf,
    pub settings: RunSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillOptions {
    pub teacher_ckpt: PathBuf,
    pub teacher_features: String,
    pub student_features: String,
    pub manifest: PathBuf,
    pub out: PathBuf,
    /// `embed_dim` is taken from the teacher; the value here is ignored.
    pub settings: RunSettings,
    /// Replace the two-phase (κ, λ) schedule by constant weights.
    pub constant_weights: Option<(f64, f64)>,
}

/// Summary written next to the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_ccc: [f64; 3],
    pub stopped_early: bool,
}

impl From<&FitReport> for FitSummary {
    fn from(r: &FitReport) -> Self {
        FitSummary {
            epochs_run: r.epochs.len(),
            best_epoch: r.best_epoch,
            best_val_ccc: r.best_val_ccc,
            stopped_early: r.stopped_early,
        }
    }
}

/// Generate a synthetic corpus under `out`: one directory per stream plus the manifest.
pub fn gen_synth(spec: &SynthSpec, out: &Path) -> Result<PathBuf> {
    let corpus = gen_synthetic(spec)?;
    crate::write_json(&out.join(CONFIG_FILE), spec)?;
    for (rec, seq) in corpus.records.iter().zip(&corpus.student) {
        write_feature_file(&out.join(student_stream()).join(format!("{}.emof", rec.id)), seq)?;
    }
    for (view, seqs) in corpus.teacher.iter().enumerate() {
        for (rec, seq) in corpus.records.iter().zip(seqs) {
            write_feature_file(&out.join(teacher_stream(view)).join(format!("{}.emof", rec.id)), seq)?;
        }
    }
    let manifest = out.join(MANIFEST_FILE);
    write_manifest(&manifest, &corpus.records)?;
    info!("wrote {} utterances to {}", corpus.records.len(), out.display());
    Ok(manifest)
}

struct LogSink {
    path: PathBuf,
    writer: BufWriter<File>,
    error: Option<std::io::Error>,
}

impl LogSink {
    fn create(path: PathBuf) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| EmodimError::io(dir, e))?;
        }
        let file = File::create(&path).map_err(|e| EmodimError::io(&path, e))?;
        Ok(LogSink {
            path,
            writer: BufWriter::new(file),
            error: None,
        })
    }

    fn record(&mut self, rec: &LossBreakdown) {
        info!(
            "epoch {:>3}  kappa {} lambda {}  loss {:.4}  val ccc {:.3} {:.3} {:.3}",
            rec.epoch, rec.kappa, rec.lambda, rec.total, rec.val_ccc[0], rec.val_ccc[1], rec.val_ccc[2]
        );
        if rec.clipped_steps > 0 {
            info!("epoch {}: gradient clipped on {} steps", rec.epoch, rec.clipped_steps);
        }
        if self.error.is_some() {
            return;
        }
        let line = serde_json::to_string(rec).expect("log records always serialize");
        if let Err(e) = writeln!(self.writer, "{line}").and_then(|_| self.writer.flush()) {
            self.error = Some(e);
        }
    }

    fn finish(self) -> Result<()> {
        match self.error {
            Some(e) => Err(EmodimError::io(&self.path, e)),
            None => Ok(()),
        }
    }
}

fn fit_and_save(
    model: &mut EmotionModel,
    manifest: &Path,
    features: &StreamSpec,
    out: &Path,
    cfg: &FitConfig,
    teacher: Option<&TeacherCache>,
) -> Result<FitReport> {
    let records = read_manifest(manifest)?;
    let train = load_split(manifest, &records, Split::Train, features)?;
    let val = load_split(manifest, &records, Split::Val, features)?;
    let mut sink = LogSink::create(out.join(LOG_FILE))?;
    let report = fit(model, &train, &val, cfg, teacher, |r| sink.record(r));
    sink.finish()?;
    let report = report?;
    save_checkpoint(&out.join(CHECKPOINT_FILE), model, &features.as_string())?;
    crate::write_json(&out.join(FIT_FILE), &FitSummary::from(&report))?;
    info!("best epoch {} with validation CCC {:?}", report.best_epoch, report.best_val_ccc);
    Ok(report)
}

fn input_dim(manifest: &Path, features: &StreamSpec) -> Result<usize> {
    let records = read_manifest(manifest)?;
    let train = load_split(manifest, &records, Split::Train, features)?;
    train
        .feature_dim()
        .ok_or_else(|| EmodimError::Core(emodim_core::Error::Input("training split is empty".into())))
}

pub fn train(opts: &TrainOptions) -> Result<FitReport> {
    let features = StreamSpec::parse(&opts.features)?;
    let cfg = opts.settings.model_config(input_dim(&opts.manifest, &features)?);
    crate::write_json(&opts.out.join(CONFIG_FILE), &serde_json::json!({ "train": opts, "model": cfg }))?;
    let mut model = EmotionModel::new(cfg, opts.settings.seed)?;
    fit_and_save(&mut model, &opts.manifest, &features, &opts.out, &opts.settings.fit_config(), None)
}

/// Fit configuration for the distillation phase: early stopping is held off
/// until the loss weights have switched.
pub fn distill_fit_config(settings: &RunSettings, constant_weights: Option<(f64, f64)>) -> FitConfig {
    let mut cfg = settings.fit_config();
    match constant_weights {
        Some((kappa, lambda)) => cfg.schedule = Schedule::constant(kappa, lambda),
        None => cfg.min_epochs = cfg.schedule.switch_epoch + 1,
    }
    cfg
}

pub fn distill(opts: &DistillOptions) -> Result<FitReport> {
    let (teacher, _) = load_checkpoint(&opts.teacher_ckpt)?;
    let teacher_spec = StreamSpec::parse(&opts.teacher_features)?;
    let student_spec = StreamSpec::parse(&opts.student_features)?;
    let records = read_manifest(&opts.manifest)?;
    let teacher_train = load_split(&opts.manifest, &records, Split::Train, &teacher_spec)?;
    let cache = prepare_teacher_cache(&teacher, &teacher_train)?;
    write_teacher_cache(&opts.out.join(CACHE_FILE), &cache)?;
    info!("teacher cache: {} utterances, mean gamma {:.3}", cache.len(), cache.mean_gamma());

    let mut settings = opts.settings.clone();
    settings.embed_dim = teacher.config().embed_dim;
    let cfg = settings.model_config(input_dim(&opts.manifest, &student_spec)?);
    let fit_cfg = distill_fit_config(&settings, opts.constant_weights);
    crate::write_json(
        &opts.out.join(CONFIG_FILE),
        &serde_json::json!({ "distill": opts, "model": cfg, "fit": fit_cfg }),
    )?;
    let mut model = EmotionModel::new(cfg, settings.seed)?;
    fit_and_save(&mut model, &opts.manifest, &student_spec, &opts.out, &fit_cfg, Some(&cache))
}

/// Evaluate a checkpoint; `features` overrides the stream stored in its sidecar.
pub fn eval(ckpt: &Path, manifest: &Path, split: Split, features: Option<&str>, n_bins: usize) -> Result<EvalReport> {
    let (model, meta) = load_checkpoint(ckpt)?;
    let spec = StreamSpec::parse(features.unwrap_or(&meta.features))?;
    let records = read_manifest(manifest)?;
    let data = load_split(manifest, &records, split, &spec)?;
    let preds = predict(&model, &data)?;
    EvalReport::from_predictions(split, &preds, n_bins)
}

pub fn export_embeddings(ckpt: &Path, manifest: &Path, split: Split, features: Option<&str>, out: &Path) -> Result<usize> {
    let (model, meta) = load_checkpoint(ckpt)?;
    let spec = StreamSpec::parse(features.unwrap_or(&meta.features))?;
    let records = read_manifest(manifest)?;
    let data = load_split(manifest, &records, split, &spec)?;
    let preds = predict(&model, &data)?;
    write_embeddings(out, &preds)?;
    Ok(preds.len())
}

pub fn inspect(ckpt: &Path) -> Result<(ModelConfig, ParamReport)> {
    let (model, _) = load_checkpoint(ckpt)?;
    Ok((model.config().clone(), model.param_report()))
}
