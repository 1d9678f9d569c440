//! Patch-based training loop, per-epoch validation, and the ablation runner.

use std::collections::{BTreeMap, HashMap};

use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentConfig};
use crate::data::{sample_patches, Case, PatchSample, SamplingStrategy};
use crate::error::{Error, Result};
use crate::eval::{self, AblationFlags, AblationRow, EvalReport, EvalSettings};
use crate::geometry::{encode, generate_anchors, match_anchors, AnchorMatch, BBox};
use crate::losses::{tensor, LossConfig, TaskWeights};
use crate::model::{AuxGradient, Detector, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub patch_size: usize,
    pub patches_per_case: usize,
    pub sampling: SamplingStrategy,
    /// Fraction of training cases held back for validation.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-5,
            seed: 0,
            patch_size: 256,
            patches_per_case: 4,
            sampling: SamplingStrategy::Balanced,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate = {} must be > 0", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.patch_size == 0 || self.patches_per_case == 0 {
            return Err(Error::Config("patch_size and patches_per_case must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction = {} must lie in [0, 1)", self.val_fraction)));
        }
        Ok(())
    }
}

/// Everything that shapes one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSetup {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub aux_gradient: AuxGradient,
}

impl TrainSetup {
    pub fn flags(&self) -> AblationFlags {
        AblationFlags {
            foreground_head: self.loss.weights.fg > 0.0,
            tumor_head: self.loss.weights.tumor > 0.0,
            augmentation: self.augment.enabled,
        }
    }

    /// Copy with the three optional components switched per `flags`.
    pub fn with_flags(&self, flags: AblationFlags) -> TrainSetup {
        let mut s = self.clone();
        let on = |enabled: bool, w: f64| if enabled { if w > 0.0 { w } else { 1.0 } } else { 0.0 };
        s.loss.weights.fg = on(flags.foreground_head, self.loss.weights.fg);
        s.loss.weights.tumor = on(flags.tumor_head, self.loss.weights.tumor);
        s.augment.enabled = flags.augmentation;
        s
    }
}

/// Mixes a base seed with stream identifiers (splitmix64 finaliser).
pub fn derive_seed(base: u64, stream: &[u64]) -> u64 {
    let mut z = base;
    for &s in stream {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(s.wrapping_mul(0xD1B5_4A32_D192_ED69));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Weighted loss terms of one step or the mean over an epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub det_cls: f64,
    pub det_reg: f64,
    pub tumor_ce: f64,
    pub fg_focal: f64,
    pub total: f64,
}

impl LossTerms {
    fn is_finite(&self) -> bool {
        [self.det_cls, self.det_reg, self.tumor_ce, self.fg_focal, self.total].iter().all(|v| v.is_finite())
    }

    fn accumulate(&mut self, other: &LossTerms) {
        self.det_cls += other.det_cls;
        self.det_reg += other.det_reg;
        self.tumor_ce += other.tumor_ce;
        self.fg_focal += other.fg_focal;
        self.total += other.total;
    }

    fn scaled(&self, k: f64) -> LossTerms {
        LossTerms {
            det_cls: self.det_cls * k,
            det_reg: self.det_reg * k,
            tumor_ce: self.tumor_ce * k,
            fg_focal: self.fg_focal * k,
            total: self.total * k,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(flatten)]
    pub losses: LossTerms,
    pub steps: usize,
    pub val_map: Option<f64>,
    pub val_f1: Option<f64>,
    pub score_threshold: Option<f64>,
    pub best: bool,
}

/// Dense targets for a batch of equally sized images.
#[derive(Debug, Clone)]
pub struct BatchTargets {
    /// `(batch, anchors)`, 1 for positive anchors.
    pub cls: Tensor,
    /// `(batch, anchors)`, 0 for ignored anchors.
    pub valid: Tensor,
    /// `(batch, anchors)`, 1 for positive anchors.
    pub positive: Tensor,
    /// `(batch, anchors, 4)` encoded boxes of matched ground truth.
    pub deltas: Tensor,
    pub num_positive: usize,
    pub tumor_labels: Vec<usize>,
    pub foreground: Vec<bool>,
}

/// Matches every image's mitosis boxes to the anchors.
pub fn build_targets(
    anchors: &[BBox],
    boxes: &[Vec<BBox>],
    tumor_labels: &[usize],
    foreground: &[bool],
    pos_iou: f64,
    neg_iou: f64,
    device: &candle_core::Device,
) -> Result<BatchTargets> {
    let (b, n) = (boxes.len(), anchors.len());
    let mut cls = vec![0f32; b * n];
    let mut valid = vec![1f32; b * n];
    let mut deltas = vec![0f32; b * n * 4];
    let mut num_positive = 0;
    for (i, gts) in boxes.iter().enumerate() {
        let matches = match_anchors(anchors, gts, pos_iou, neg_iou)?;
        for (j, m) in matches.into_iter().enumerate() {
            let k = i * n + j;
            match m {
                AnchorMatch::Positive(g) => {
                    cls[k] = 1.0;
                    num_positive += 1;
                    let d = encode(&gts[g], &anchors[j])?.to_array();
                    for (slot, v) in deltas[k * 4..k * 4 + 4].iter_mut().zip(d) {
                        *slot = v as f32;
                    }
                }
                AnchorMatch::Negative => {}
                AnchorMatch::Ignore => valid[k] = 0.0,
            }
        }
    }
    let positive = cls.clone();
    Ok(BatchTargets {
        cls: Tensor::from_vec(cls, (b, n), device)?,
        valid: Tensor::from_vec(valid, (b, n), device)?,
        positive: Tensor::from_vec(positive, (b, n), device)?,
        deltas: Tensor::from_vec(deltas, (b, n, 4), device)?,
        num_positive,
        tumor_labels: tumor_labels.to_vec(),
        foreground: foreground.to_vec(),
    })
}

/// Builds the weighted multi-task loss for one batch. Terms with zero weight
/// are left out of the graph and reported as exactly 0.
pub fn batch_loss(
    detector: &Detector,
    images: &Tensor,
    targets: &BatchTargets,
    loss: &LossConfig,
    aux: AuxGradient,
) -> Result<(Tensor, LossTerms)> {
    let out = detector.forward_with(images, aux)?;
    let w: &TaskWeights = &loss.weights;
    let norm = targets.num_positive.max(1) as f64;
    let mut terms = LossTerms::default();
    let mut parts: Vec<Tensor> = Vec::new();

    if w.det > 0.0 {
        let cls = (tensor::detection_cls(&out.cls_logits, &targets.cls, &targets.valid, norm, loss.alpha, loss.gamma)?
            * w.det)?;
        let reg = (tensor::detection_reg(&out.box_deltas, &targets.deltas, &targets.positive, norm)? * w.det)?;
        terms.det_cls = tensor::scalar(&cls)?;
        terms.det_reg = tensor::scalar(&reg)?;
        parts.push(cls);
        parts.push(reg);
    }
    if w.tumor > 0.0 {
        let ce = (tensor::cross_entropy(&out.tumor_logits, &targets.tumor_labels)? * w.tumor)?;
        terms.tumor_ce = tensor::scalar(&ce)?;
        parts.push(ce);
    }
    if w.fg > 0.0 {
        let fg = (tensor::foreground_focal(&out.fg_logits, &targets.foreground, loss.alpha, loss.gamma)? * w.fg)?;
        terms.fg_focal = tensor::scalar(&fg)?;
        parts.push(fg);
    }
    let total = match parts.split_first() {
        None => return Err(Error::Config("all task weights are zero".into())),
        Some((first, rest)) => rest.iter().try_fold(first.clone(), |acc, t| acc + t)?,
    };
    terms.total = tensor::scalar(&total)?;
    Ok((total, terms))
}

/// Result of [`Trainer::fit`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochLog>,
    /// Total loss of every optimisation step, in order.
    pub step_losses: Vec<f64>,
    /// Epoch whose weights are loaded at the end (0 = initial weights).
    pub best_epoch: usize,
    pub best_val_map: Option<f64>,
    pub score_threshold: Option<f64>,
}

pub struct Trainer<'a> {
    detector: &'a Detector,
    setup: TrainSetup,
    optimizer: AdamW,
    anchor_cache: HashMap<(usize, usize), Vec<BBox>>,
}

impl<'a> Trainer<'a> {
    pub fn new(detector: &'a Detector, setup: TrainSetup) -> Result<Self> {
        Self::with_vars(detector, setup, detector.params().all_vars())
    }

    /// Optimises only `vars`.
    pub fn with_vars(detector: &'a Detector, setup: TrainSetup, vars: Vec<Var>) -> Result<Self> {
        setup.train.validate()?;
        setup.loss.validate()?;
        setup.augment.validate()?;
        let params = ParamsAdamW {
            lr: setup.train.learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let optimizer = AdamW::new(vars, params)?;
        Ok(Trainer { detector, setup, optimizer, anchor_cache: HashMap::new() })
    }

    pub fn setup(&self) -> &TrainSetup {
        &self.setup
    }

    fn anchors(&mut self, width: usize, height: usize) -> Result<&Vec<BBox>> {
        if !self.anchor_cache.contains_key(&(width, height)) {
            let set = generate_anchors(width, height, &self.detector.config().anchors)?;
            self.anchor_cache.insert((width, height), set.flat());
        }
        Ok(&self.anchor_cache[&(width, height)])
    }

    /// Patches of one epoch, augmented and shuffled. Depends only on the
    /// training seed, the epoch and the cases.
    pub fn epoch_samples(&self, cases: &[Case], epoch: usize) -> Result<Vec<PatchSample>> {
        let cfg = &self.setup.train;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1, epoch as u64]));
        let mut samples = Vec::with_capacity(cases.len() * cfg.patches_per_case);
        for case in cases {
            for mut p in sample_patches(case, cfg.patch_size, cfg.patches_per_case, cfg.sampling, &mut rng)? {
                let seed: u64 = rng.random();
                let (image, annotations, foreground) =
                    augment::compose(&p.image, &p.annotations, &self.setup.augment, seed)?;
                p.image = image;
                p.annotations = annotations;
                p.foreground = foreground;
                samples.push(p);
            }
        }
        samples.shuffle(&mut rng);
        Ok(samples)
    }

    /// One optimisation step on a batch of patches.
    pub fn step(&mut self, batch: &[PatchSample]) -> Result<LossTerms> {
        let (w, h) = (batch[0].image.width, batch[0].image.height);
        let detector = self.detector;
        let device = detector.device().clone();
        let anchor_cfg = detector.config().anchors.clone();
        let anchors = self.anchors(w, h)?.clone();
        let images: Vec<&crate::raster::Image> = batch.iter().map(|p| &p.image).collect();
        let x = detector.images_to_tensor(&images)?;
        let boxes: Vec<Vec<BBox>> = batch.iter().map(PatchSample::mitosis_boxes).collect();
        let tumor: Vec<usize> = batch.iter().map(|p| p.tumor_label).collect();
        let fg: Vec<bool> = batch.iter().map(|p| p.foreground).collect();
        let targets = build_targets(&anchors, &boxes, &tumor, &fg, anchor_cfg.pos_iou, anchor_cfg.neg_iou, &device)?;
        let (loss, terms) = batch_loss(detector, &x, &targets, &self.setup.loss, self.setup.aux_gradient)?;
        if !terms.is_finite() {
            return Ok(terms);
        }
        let grads = loss.backward()?;
        self.optimizer.step(&grads)?;
        Ok(terms)
    }

    /// Validation mAP and best-F1 threshold on full images.
    pub fn validate(&self, val: &[Case]) -> Result<EvalReport> {
        let mut settings = self.setup.eval;
        settings.score_threshold = None;
        eval::evaluate(self.detector, val, &settings, self.setup.flags())
    }

    /// Trains for the configured number of epochs.
    ///
    /// After each epoch the model is scored on `val` (when non-empty) and the
    /// best-scoring weights are kept; without validation cases the last epoch
    /// wins. `on_epoch` sees every epoch after its weights are final. A
    /// non-finite loss restores the last good weights and returns
    /// [`Error::Diverged`].
    pub fn fit(
        &mut self,
        train: &[Case],
        val: &[Case],
        mut on_epoch: impl FnMut(&EpochLog, &Detector) -> Result<()>,
    ) -> Result<TrainOutcome> {
        if train.is_empty() {
            return Err(Error::Dataset("training split is empty".into()));
        }
        let params = self.detector.params();
        let mut best: Option<(usize, f64, Option<f64>, BTreeMap<String, Tensor>)> = None;
        let mut last_good = params.snapshot()?;
        let mut epochs = Vec::new();
        let mut step_losses = Vec::new();

        for epoch in 1..=self.setup.train.epochs {
            let samples = self.epoch_samples(train, epoch)?;
            let mut sum = LossTerms::default();
            let mut steps = 0;
            for (step, batch) in samples.chunks(self.setup.train.batch_size).enumerate() {
                let terms = self.step(batch)?;
                if !terms.is_finite() {
                    params.restore(&last_good, true)?;
                    return Err(Error::Diverged { epoch, step });
                }
                step_losses.push(terms.total);
                sum.accumulate(&terms);
                steps += 1;
            }
            let losses = sum.scaled(1.0 / steps.max(1) as f64);
            log::info!("epoch {epoch}: total {:.5}", losses.total);

            let mut entry = EpochLog {
                epoch,
                losses,
                steps,
                val_map: None,
                val_f1: None,
                score_threshold: None,
                best: false,
            };
            if !val.is_empty() {
                let report = self.validate(val)?;
                entry.val_map = Some(report.map);
                entry.val_f1 = Some(report.f1);
                entry.score_threshold = Some(report.score_threshold);
                log::info!("epoch {epoch}: val mAP {:.4}, F1 {:.4}", report.map, report.f1);
            }
            let score = entry.val_map.unwrap_or(f64::NEG_INFINITY);
            if best.as_ref().is_none_or(|(_, s, _, _)| score > *s || entry.val_map.is_none()) {
                entry.best = true;
                best = Some((epoch, score, entry.score_threshold, params.snapshot()?));
            }
            last_good = params.snapshot()?;
            on_epoch(&entry, self.detector)?;
            epochs.push(entry);
        }

        let (best_epoch, best_val_map, score_threshold) = match best {
            Some((e, s, thr, weights)) => {
                params.restore(&weights, true)?;
                (e, s.is_finite().then_some(s), thr)
            }
            None => (0, None, None),
        };
        Ok(TrainOutcome { epochs, step_losses, best_epoch, best_val_map, score_threshold })
    }
}

/// Trains a fresh detector under `setup` and reports on `test`.
pub fn train_and_evaluate(setup: &TrainSetup, train: &[Case], val: &[Case], test: &[Case]) -> Result<EvalReport> {
    let detector = Detector::new(setup.model.clone(), setup.train.seed)?;
    let mut trainer = Trainer::new(&detector, setup.clone())?;
    let outcome = trainer.fit(train, val, |_, _| Ok(()))?;
    let mut settings = setup.eval;
    if settings.score_threshold.is_none() {
        settings.score_threshold = outcome.score_threshold;
    }
    eval::evaluate(&detector, test, &settings, setup.flags())
}

/// Trains and evaluates the eight component combinations, once per seed,
/// in ablation-table order. A failing run is recorded and the rest continue.
pub fn run_ablation(base: &TrainSetup, train: &[Case], val: &[Case], test: &[Case], seeds: &[u64]) -> Vec<AblationRow> {
    AblationFlags::table_rows()
        .into_iter()
        .map(|flags| {
            let runs = seeds
                .iter()
                .map(|&seed| {
                    let mut setup = base.with_flags(flags);
                    setup.train.seed = seed;
                    log::info!("ablation {} seed {seed}", flags.label());
                    train_and_evaluate(&setup, train, val, test).map_err(|e| format!("{}: {e}", e.code()))
                })
                .collect();
            AblationRow { flags, runs }
        })
        .collect()
}
