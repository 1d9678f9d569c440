//! Command implementations behind the `mitodet` binary.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{
    dataset_hash, default_palette, generate_synthetic_dataset, load_cases, load_dataset, split_leave_one_tumor_out,
    split_validation, write_synthetic_dataset, Case,
};
use crate::error::{Error, Result};
use crate::eval::{self, AblationRow, EvalReport};
use crate::model::{load_checkpoint, save_checkpoint, CheckpointMeta, Detector};
use crate::plot;
use crate::train::{run_ablation, EpochLog, Trainer};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_DIR: &str = "checkpoints/best";
pub const LAST_DIR: &str = "checkpoints/last";

/// Cases of one run: training, validation (carved from training by case),
/// and the held-out tumor type.
pub struct Splits {
    pub train: Vec<Case>,
    pub val: Vec<Case>,
    pub test: Vec<Case>,
}

impl Splits {
    pub fn get(&self, split: Split) -> Vec<Case> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let names = &cfg.dataset.class_names;
    let manifest = &cfg.dataset.manifest;
    let records = load_dataset(manifest, names)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let cases = load_cases(&records, base, names)?;
    let (train_all, test) = split_leave_one_tumor_out(&cases, &cfg.dataset.held_out)?;
    let (train, val) = split_validation(&train_all, cfg.dataset.val_fraction, cfg.train.seed);
    log::info!("{} train / {} val / {} test cases", train.len(), val.len(), test.len());
    Ok(Splits { train, val, test })
}

pub fn checkpoint_meta(cfg: &RunConfig) -> CheckpointMeta {
    CheckpointMeta {
        backbone: cfg.backbone.clone(),
        anchors: cfg.anchors.clone(),
        loss: cfg.loss.clone(),
        class_names: cfg.dataset.class_names.clone(),
        flags: cfg.train_setup().flags(),
        epoch: 0,
        val_map: None,
        score_threshold: None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub output_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub best_epoch: usize,
    pub best_val_map: Option<f64>,
    pub score_threshold: Option<f64>,
    pub epochs: Vec<EpochLog>,
}

/// Trains per `cfg`. Writes `config.toml`, a JSON-lines log, the last epoch's
/// checkpoint after every epoch and the best checkpoint whenever validation
/// mAP improves. With zero epochs only the initial checkpoint is written.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let out = cfg.output_dir();
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let setup = cfg.train_setup();
    let detector = Detector::new(setup.model.clone(), setup.train.seed)?;
    let meta = checkpoint_meta(cfg);
    let best_dir = out.join(BEST_DIR);

    if cfg.train.epochs == 0 {
        save_checkpoint(&best_dir, &detector, &meta)?;
        return Ok(TrainSummary {
            output_dir: out,
            checkpoint: best_dir,
            best_epoch: 0,
            best_val_map: None,
            score_threshold: None,
            epochs: Vec::new(),
        });
    }

    let splits = load_splits(cfg)?;
    let mut log_file = File::create(out.join(LOG_FILE))?;
    let mut trainer = Trainer::new(&detector, setup)?;
    let outcome = trainer.fit(&splits.train, &splits.val, |entry, det| {
        writeln!(log_file, "{}", serde_json::to_string(entry)?)?;
        let m = CheckpointMeta {
            epoch: entry.epoch,
            val_map: entry.val_map,
            score_threshold: entry.score_threshold,
            ..meta.clone()
        };
        save_checkpoint(&out.join(LAST_DIR), det, &m)?;
        if entry.best {
            save_checkpoint(&best_dir, det, &m)?;
        }
        Ok(())
    })?;
    let summary = TrainSummary {
        output_dir: out.clone(),
        checkpoint: best_dir,
        best_epoch: outcome.best_epoch,
        best_val_map: outcome.best_val_map,
        score_threshold: outcome.score_threshold,
        epochs: outcome.epochs,
    };
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvaluateOptions {
    pub split: Option<Split>,
    /// Overrides the threshold stored in the checkpoint.
    pub score_threshold: Option<f64>,
}

/// Scores a checkpoint on one split (the held-out tumor type by default).
/// Refuses when the checkpoint's model configuration differs from `cfg`.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path, opts: EvaluateOptions) -> Result<EvalReport> {
    let (detector, meta) = load_checkpoint(checkpoint, Some(&checkpoint_meta(cfg)))?;
    let split = opts.split.unwrap_or(Split::Test);
    let cases = load_splits(cfg)?.get(split);
    if cases.is_empty() {
        return Err(Error::Dataset(format!("{} split is empty", split.name())));
    }
    let mut settings = cfg.eval.settings();
    settings.score_threshold = opts.score_threshold.or(meta.score_threshold);
    let report = eval::evaluate(&detector, &cases, &settings, meta.flags)?;
    let dir = cfg.output_dir().join("eval");
    eval::write_eval_report(&dir, split.name(), &report)?;
    if cfg.eval.plots {
        plot::pr_curve_png(&dir.join(format!("{}_pr.png", split.name())), &report.pr_curve)?;
    }
    log::info!("{} mAP {:.4}, F1 {:.4}", split.name(), report.map, report.f1);
    Ok(report)
}

/// Runs the eight-row ablation and writes `ablation.csv`, `ablation.json`
/// and a bar chart under `<output>/ablation`.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let splits = load_splits(cfg)?;
    let mut setup = cfg.train_setup();
    if cfg.ablation.epochs > 0 {
        setup.train.epochs = cfg.ablation.epochs;
    }
    let rows = run_ablation(&setup, &splits.train, &splits.val, &splits.test, &cfg.ablation.seeds);
    let dir = cfg.output_dir().join("ablation");
    eval::write_ablation(&dir, &rows)?;
    if cfg.eval.plots {
        plot::ablation_png(&dir.join("ablation.png"), &rows)?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub manifest: PathBuf,
    pub n_cases: usize,
    pub hash: String,
}

/// Writes a synthetic dataset (PNG tiles plus `manifest.json`) to `out_dir`.
pub fn cmd_synth(n_cases: usize, seed: u64, image_size: usize, out_dir: &Path) -> Result<SynthSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases = generate_synthetic_dataset(n_cases, image_size, &default_palette(), &mut rng)?;
    let manifest = write_synthetic_dataset(out_dir, &cases)?;
    Ok(SynthSummary { manifest, n_cases, hash: dataset_hash(&cases)? })
}

/// The one-line form printed on failure: `error[<code>]: <message>`.
pub fn error_line(err: &Error) -> String {
    let msg = err.to_string().replace('\n', "; ");
    format!("error[{}]: {msg}", err.code())
}
