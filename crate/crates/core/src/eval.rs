//! Detection evaluation: greedy matching, all-points AP, F1 at an operating
//! threshold, report files, and the eight-row ablation harness.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Case;
use crate::error::Result;
use crate::geometry::{iou, BBox};
use crate::model::{Detection, Detector, PredictParams};

/// Which of the three optional components are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct AblationFlags {
    pub foreground_head: bool,
    pub tumor_head: bool,
    pub augmentation: bool,
}

impl AblationFlags {
    pub const ALL: AblationFlags = AblationFlags { foreground_head: true, tumor_head: true, augmentation: true };
    pub const NONE: AblationFlags = AblationFlags { foreground_head: false, tumor_head: false, augmentation: false };

    /// The eight combinations in ablation-table order: none, aug, tumor, fg,
    /// tumor+aug, fg+aug, fg+tumor, all.
    pub fn table_rows() -> [AblationFlags; 8] {
        let f = |foreground_head, tumor_head, augmentation| AblationFlags { foreground_head, tumor_head, augmentation };
        [
            f(false, false, false),
            f(false, false, true),
            f(false, true, false),
            f(true, false, false),
            f(false, true, true),
            f(true, false, true),
            f(true, true, false),
            f(true, true, true),
        ]
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.foreground_head {
            parts.push("fg");
        }
        if self.tumor_head {
            parts.push("tumor");
        }
        if self.augmentation {
            parts.push("aug");
        }
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MatchCriterion {
    /// Match when IoU is at least the threshold; prefer the highest IoU.
    Iou { threshold: f64 },
    /// Match when box centers are within `radius` pixels; prefer the nearest.
    CenterDistance { radius: f64 },
}

impl Default for MatchCriterion {
    fn default() -> Self {
        MatchCriterion::Iou { threshold: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchFlag {
    TruePositive,
    FalsePositive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Detections sorted by descending score, each with its flag.
    pub detections: Vec<(Detection, MatchFlag)>,
    /// Index of the matched detection (in `detections`) for each ground truth.
    pub gt_matched: Vec<Option<usize>>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

fn sort_by_score(dets: &[Detection]) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    sorted
}

pub fn match_detections(dets: &[Detection], gts: &[BBox], iou_thr: f64) -> MatchResult {
    match_detections_with(dets, gts, MatchCriterion::Iou { threshold: iou_thr })
}

/// Greedy matching in descending score order. Each detection takes the best
/// unmatched ground truth that passes the criterion; ties go to the lower
/// ground-truth index.
pub fn match_detections_with(dets: &[Detection], gts: &[BBox], criterion: MatchCriterion) -> MatchResult {
    let sorted = sort_by_score(dets);
    let mut gt_matched = vec![None; gts.len()];
    let mut detections = Vec::with_capacity(sorted.len());
    for (di, det) in sorted.into_iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_matched[gi].is_some() {
                continue;
            }
            // larger quality is better
            let quality = match criterion {
                MatchCriterion::Iou { threshold } => {
                    let v = iou(&det.bbox, gt);
                    (v >= threshold).then_some(v)
                }
                MatchCriterion::CenterDistance { radius } => {
                    let (dx, dy) = (det.bbox.center().0 - gt.center().0, det.bbox.center().1 - gt.center().1);
                    let dist = (dx * dx + dy * dy).sqrt();
                    (dist <= radius).then_some(-dist)
                }
            };
            if let Some(q) = quality {
                if best.is_none_or(|(_, bq)| q > bq) {
                    best = Some((gi, q));
                }
            }
        }
        let flag = match best {
            Some((gi, _)) => {
                gt_matched[gi] = Some(di);
                MatchFlag::TruePositive
            }
            None => MatchFlag::FalsePositive,
        };
        detections.push((det, flag));
    }
    let tp = gt_matched.iter().filter(|m| m.is_some()).count();
    MatchResult { fp: detections.len() - tp, fn_: gts.len() - tp, tp, detections, gt_matched }
}

/// `(recall, precision)` after each detection of a ranked list.
pub fn precision_recall_curve(flags: &[MatchFlag], n_gt: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    flags
        .iter()
        .enumerate()
        .map(|(i, f)| {
            if *f == MatchFlag::TruePositive {
                tp += 1;
            }
            let recall = if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 };
            (recall, tp as f64 / (i + 1) as f64)
        })
        .collect()
}

/// All-points interpolated average precision of a ranked TP/FP list.
///
/// The precision envelope (running maximum from the tail) is integrated over
/// recall. With no ground truth, AP is 1 when there are no detections and 0
/// otherwise.
pub fn average_precision(flags: &[MatchFlag], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return if flags.is_empty() { 1.0 } else { 0.0 };
    }
    let curve = precision_recall_curve(flags, n_gt);
    let mut envelope: Vec<f64> = curve.iter().map(|&(_, p)| p).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(r, _)) in curve.iter().enumerate() {
        if r > prev_recall {
            ap += (r - prev_recall) * envelope[i];
            prev_recall = r;
        }
    }
    ap
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Set when precision + recall = 0, so F1 is reported as 0 by convention.
    pub degenerate: bool,
}

impl F1Score {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let degenerate = precision + recall == 0.0;
        let f1 = if degenerate { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        F1Score { precision, recall, f1, tp, fp, fn_, degenerate }
    }
}

/// Pools TP/FP/FN over images after dropping detections below `score_thr`.
pub fn f1_at_threshold(dets: &[Vec<Detection>], gts: &[Vec<BBox>], score_thr: f64, criterion: MatchCriterion) -> F1Score {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (d, g) in dets.iter().zip(gts) {
        let kept: Vec<Detection> = d.iter().filter(|x| x.score >= score_thr).copied().collect();
        let m = match_detections_with(&kept, g, criterion);
        tp += m.tp;
        fp += m.fp;
        fn_ += m.fn_;
    }
    F1Score::from_counts(tp, fp, fn_)
}

/// Threshold maximising pooled F1; candidates are the distinct detection scores.
pub fn best_f1_threshold(dets: &[Vec<Detection>], gts: &[Vec<BBox>], criterion: MatchCriterion) -> (f64, F1Score) {
    let mut scores: Vec<f64> = dets.iter().flatten().map(|d| d.score).collect();
    scores.sort_by(|a, b| b.total_cmp(a));
    scores.dedup();
    let mut best = (1.0, f1_at_threshold(dets, gts, f64::INFINITY, criterion));
    for s in scores {
        let f = f1_at_threshold(dets, gts, s, criterion);
        if f.f1 > best.1.f1 {
            best = (s, f);
        }
    }
    best
}

/// Pooled AP over several images.
pub fn pooled_average_precision(dets: &[Vec<Detection>], gts: &[Vec<BBox>], criterion: MatchCriterion) -> (f64, Vec<(f64, f64)>) {
    let mut ranked: Vec<(f64, usize, usize, MatchFlag)> = Vec::new();
    let mut n_gt = 0;
    for (img, (d, g)) in dets.iter().zip(gts).enumerate() {
        n_gt += g.len();
        let m = match_detections_with(d, g, criterion);
        ranked.extend(m.detections.iter().enumerate().map(|(rank, (det, f))| (det.score, img, rank, *f)));
    }
    // stable global order: score, then image, then in-image rank
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let flags: Vec<MatchFlag> = ranked.iter().map(|r| r.3).collect();
    (average_precision(&flags, n_gt), precision_recall_curve(&flags, n_gt))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub predict: PredictParams,
    pub criterion: MatchCriterion,
    /// Operating threshold for precision/recall/F1; `None` uses the best-F1 threshold on the evaluated set.
    pub score_threshold: Option<f64>,
    pub batch_size: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            predict: PredictParams::default(),
            criterion: MatchCriterion::default(),
            score_threshold: None,
            batch_size: 8,
        }
    }
}

/// One ablation-table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: f64,
    /// Equal to `ap`: there is a single detection class.
    pub map: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f1_degenerate: bool,
    pub score_threshold: f64,
    pub flags: AblationFlags,
    pub n_images: usize,
    pub n_gt: usize,
    pub n_detections: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pr_curve: Vec<(f64, f64)>,
}

/// Runs the detector over cases (full images) and returns detections per case.
pub fn detect_cases(detector: &Detector, cases: &[Case], settings: &EvalSettings) -> Result<Vec<Vec<Detection>>> {
    let mut out = Vec::with_capacity(cases.len());
    let mut i = 0;
    while i < cases.len() {
        // batch consecutive cases of identical size
        let size = (cases[i].image.width, cases[i].image.height);
        let mut j = i;
        while j < cases.len() && j - i < settings.batch_size.max(1) && (cases[j].image.width, cases[j].image.height) == size {
            j += 1;
        }
        let images: Vec<&crate::raster::Image> = cases[i..j].iter().map(|c| &c.image).collect();
        out.extend(detector.predict_batch(&images, &settings.predict)?);
        i = j;
    }
    Ok(out)
}

pub fn mitosis_ground_truth(cases: &[Case]) -> Vec<Vec<BBox>> {
    cases.iter().map(|c| c.record.mitoses().copied().collect()).collect()
}

pub fn report_from_detections(
    dets: &[Vec<Detection>],
    gts: &[Vec<BBox>],
    settings: &EvalSettings,
    flags: AblationFlags,
) -> EvalReport {
    let (ap, pr_curve) = pooled_average_precision(dets, gts, settings.criterion);
    let (thr, f1) = match settings.score_threshold {
        Some(t) => (t, f1_at_threshold(dets, gts, t, settings.criterion)),
        None => best_f1_threshold(dets, gts, settings.criterion),
    };
    EvalReport {
        ap,
        map: ap,
        precision: f1.precision,
        recall: f1.recall,
        f1: f1.f1,
        f1_degenerate: f1.degenerate,
        score_threshold: thr,
        flags,
        n_images: dets.len(),
        n_gt: gts.iter().map(Vec::len).sum(),
        n_detections: dets.iter().map(Vec::len).sum(),
        pr_curve,
    }
}

pub fn evaluate(detector: &Detector, cases: &[Case], settings: &EvalSettings, flags: AblationFlags) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(crate::error::Error::Dataset("evaluation split is empty".into()));
    }
    let dets = detect_cases(detector, cases, settings)?;
    Ok(report_from_detections(&dets, &mitosis_ground_truth(cases), settings, flags))
}

pub const TABLE_HEADER: [&str; 4] =
    ["foreground classification", "tumor classification", "data augmentation", "mAP(iou=0.5)"];

const CHECK: &str = "✓";

fn check(b: bool) -> &'static str {
    if b {
        CHECK
    } else {
        ""
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn csv_line<S: AsRef<str>>(fields: &[S]) -> String {
    let mut line = fields.iter().map(|f| csv_field(f.as_ref())).collect::<Vec<_>>().join(",");
    line.push('\n');
    line
}

/// Writes `<stem>.json` and `<stem>.csv`. The CSV has the ablation-table
/// columns followed by precision, recall, F1 and the operating threshold.
pub fn write_eval_report(dir: &Path, stem: &str, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(report)?)?;
    let mut header: Vec<&str> = TABLE_HEADER.to_vec();
    header.extend(["precision", "recall", "f1", "score_threshold"]);
    let f = report.flags;
    let row = [
        check(f.foreground_head).to_string(),
        check(f.tumor_head).to_string(),
        check(f.augmentation).to_string(),
        format!("{:.4}", report.map),
        format!("{:.4}", report.precision),
        format!("{:.4}", report.recall),
        format!("{:.4}", report.f1),
        format!("{:.4}", report.score_threshold),
    ];
    fs::write(dir.join(format!("{stem}.csv")), csv_line(&header) + &csv_line(&row))?;
    Ok(())
}

/// Outcome of one ablation configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub flags: AblationFlags,
    /// One entry per seed; `Err` holds the failure reason.
    pub runs: Vec<std::result::Result<EvalReport, String>>,
}

impl AblationRow {
    pub fn successful(&self) -> Vec<&EvalReport> {
        self.runs.iter().filter_map(|r| r.as_ref().ok()).collect()
    }

    pub fn failed(&self) -> bool {
        self.successful().is_empty()
    }

    /// Mean and sample standard deviation of mAP over successful seeds.
    pub fn map_mean_sd(&self) -> Option<(f64, f64)> {
        let maps: Vec<f64> = self.successful().iter().map(|r| r.map).collect();
        if maps.is_empty() {
            return None;
        }
        let n = maps.len() as f64;
        let mean = maps.iter().sum::<f64>() / n;
        let sd = if maps.len() > 1 {
            (maps.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some((mean, sd))
    }
}

/// Reference mAP@0.5 values reported for the eight rows on the original
/// challenge data, in table order. Metadata only.
pub const REFERENCE_MAP: [f64; 8] = [0.433, 0.449, 0.458, 0.451, 0.463, 0.465, 0.473, 0.486];

/// The ablation-table CSV: four columns, mAP formatted to four decimals, with
/// `mean±sd` for multiple seeds and `failed` for rows with no successful run.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = csv_line(&TABLE_HEADER);
    for row in rows {
        let cell = match row.map_mean_sd() {
            None => "failed".to_string(),
            Some((m, _)) if row.runs.len() == 1 => format!("{m:.4}"),
            Some((m, sd)) => format!("{m:.4}±{sd:.4}"),
        };
        let f = row.flags;
        out += &csv_line(&[check(f.foreground_head), check(f.tumor_head), check(f.augmentation), &cell]);
    }
    out
}

pub fn write_ablation(dir: &Path, rows: &[AblationRow]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("ablation.csv"), ablation_csv(rows))?;
    let json = serde_json::json!({
        "rows": rows,
        "reference_map": REFERENCE_MAP,
    });
    fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&json)?)?;
    Ok(())
}

pub use crate::train::run_ablation;
