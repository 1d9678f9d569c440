//! Run configuration: one flat TOML document with dotted section keys.
//!
//! ```toml
//! dataset.manifest = "data/manifest.json"
//! dataset.held_out = "human_neuroendocrine_tumor"
//! optimizer.learning_rate = 1e-5
//! loss.weights.tumor = 1.0
//! ```
//!
//! Any key can be overridden with `key=value` pairs, where the value is
//! parsed as a TOML value and falls back to a bare string.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::data::{default_class_names, SamplingStrategy, DEFAULT_HELD_OUT};
use crate::error::{Error, Result};
use crate::eval::{EvalSettings, MatchCriterion};
use crate::geometry::AnchorConfig;
use crate::losses::LossConfig;
use crate::model::{AuxGradient, BackboneConfig, ModelConfig, PredictParams};
use crate::train::{TrainConfig, TrainSetup};

/// Environment variable that roots relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "MITODET_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub manifest: PathBuf,
    pub held_out: String,
    pub class_names: Vec<String>,
    pub patch_size: usize,
    pub patches_per_case: usize,
    pub sampling: SamplingStrategy,
    pub val_fraction: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            manifest: PathBuf::from("data/manifest.json"),
            held_out: DEFAULT_HELD_OUT.to_string(),
            class_names: default_class_names(),
            patch_size: 256,
            patches_per_case: 4,
            sampling: SamplingStrategy::Balanced,
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub name: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection { name: OptimizerKind::Adam, learning_rate: 1e-5, batch_size: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub seed: u64,
    /// Stop auxiliary-head gradients at the pooled feature.
    pub detach_aux: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { epochs: 20, seed: 0, detach_aux: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    Iou,
    CenterDistance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub score_thr: f64,
    pub nms_thr: f64,
    pub max_dets: usize,
    pub pre_nms_top_k: usize,
    pub match_mode: MatchMode,
    pub iou_thr: f64,
    pub center_radius: f64,
    pub batch_size: usize,
    pub plots: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        let p = PredictParams::default();
        EvalSection {
            score_thr: p.score_thr,
            nms_thr: p.nms_thr,
            max_dets: p.max_dets,
            pre_nms_top_k: p.pre_nms_top_k,
            match_mode: MatchMode::Iou,
            iou_thr: 0.5,
            center_radius: 15.0,
            batch_size: 8,
            plots: true,
        }
    }
}

impl EvalSection {
    pub fn settings(&self) -> EvalSettings {
        EvalSettings {
            predict: PredictParams {
                score_thr: self.score_thr,
                nms_thr: self.nms_thr,
                max_dets: self.max_dets,
                pre_nms_top_k: self.pre_nms_top_k,
            },
            criterion: match self.match_mode {
                MatchMode::Iou => MatchCriterion::Iou { threshold: self.iou_thr },
                MatchMode::CenterDistance => MatchCriterion::CenterDistance { radius: self.center_radius },
            },
            score_threshold: None,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub seeds: Vec<u64>,
    /// Epochs per ablation run; 0 uses `train.epochs`.
    pub epochs: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection { seeds: vec![0], epochs: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("runs/default") }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub backbone: BackboneConfig,
    pub anchors: AnchorConfig,
    pub optimizer: OptimizerSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub ablation: AblationSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with::<&str>(text, &[])
    }

    /// Parses `text` over the defaults, applies `key=value` overrides, then
    /// validates. Keys missing at any depth keep their default values.
    pub fn from_toml_with<S: AsRef<str>>(text: &str, overrides: &[S]) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut table = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut table, user);
        for o in overrides {
            apply_override(&mut table, o.as_ref())?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_with(&text, overrides)?;
        // relative dataset paths are taken from the config file's directory
        if cfg.dataset.manifest.is_relative() {
            if let Some(parent) = path.parent() {
                cfg.dataset.manifest = parent.join(&cfg.dataset.manifest);
            }
        }
        Ok(cfg)
    }

    /// Serialises as `dotted.key = value` lines in a stable order.
    pub fn to_toml(&self) -> Result<String> {
        let value = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let mut lines = Vec::new();
        flatten("", &value, &mut lines);
        Ok(lines.join("\n") + "\n")
    }

    pub fn validate(&self) -> Result<()> {
        self.augment.validate()?;
        self.loss.validate()?;
        self.model_config().validate()?;
        self.train_config().validate()?;
        if self.loss.num_tumor_classes != self.dataset.class_names.len() {
            return Err(Error::Config(format!(
                "loss.num_tumor_classes = {} but dataset.class_names has {} entries",
                self.loss.num_tumor_classes,
                self.dataset.class_names.len()
            )));
        }
        if !self.dataset.class_names.contains(&self.dataset.held_out) {
            return Err(Error::Config(format!("held-out type `{}` is not a configured class", self.dataset.held_out)));
        }
        if self.ablation.seeds.is_empty() {
            return Err(Error::Config("ablation.seeds must not be empty".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            anchors: self.anchors.clone(),
            num_tumor_classes: self.dataset.class_names.len(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.optimizer.batch_size,
            learning_rate: self.optimizer.learning_rate,
            seed: self.train.seed,
            patch_size: self.dataset.patch_size,
            patches_per_case: self.dataset.patches_per_case,
            sampling: self.dataset.sampling,
            val_fraction: self.dataset.val_fraction,
        }
    }

    pub fn train_setup(&self) -> TrainSetup {
        TrainSetup {
            model: self.model_config(),
            loss: self.loss.clone(),
            augment: self.augment.clone(),
            train: self.train_config(),
            eval: self.eval.settings(),
            aux_gradient: if self.train.detach_aux { AuxGradient::Detached } else { AuxGradient::Attached },
        }
    }

    /// Output directory, rooted at `$MITODET_OUTPUT_ROOT` when relative.
    pub fn output_dir(&self) -> PathBuf {
        resolve_output(&self.output.dir, std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
    }
}

pub fn resolve_output(dir: &Path, root: Option<PathBuf>) -> PathBuf {
    match root {
        Some(root) if dir.is_relative() => root.join(dir),
        _ => dir.to_path_buf(),
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<String>) {
    match value {
        toml::Value::Table(t) if !t.is_empty() => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        leaf => out.push(format!("{prefix} = {leaf}")),
    }
}

/// Sets `dotted.key` in `table` from a `key=value` string.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut node = table;
    for p in path {
        let entry = node.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}
