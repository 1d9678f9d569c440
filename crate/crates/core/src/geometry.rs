//! Box arithmetic: IoU, anchor grids, anchor-relative box coding, greedy NMS and
//! anchor-to-ground-truth assignment.
//!
//! All boxes use the corner convention `(x1, y1, x2, y2)` in continuous pixel
//! coordinates. A box covering pixel columns `0..w` spans `x1 = 0, x2 = w`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle in pixel coordinates.
///
/// Deserialisation only checks the shape; call [`BBox::validate`] on
/// untrusted input so errors can carry context.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", from = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Builds a box, rejecting inverted or non-finite corners.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidBox(format!("non-finite coordinate in {self:?}")));
        }
        if self.x2 < self.x1 || self.y2 < self.y1 {
            return Err(Error::InvalidBox(format!(
                "[{}, {}, {}, {}] has x2 < x1 or y2 < y1",
                self.x1, self.y1, self.x2, self.y2
            )));
        }
        Ok(())
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { x1: cx - 0.5 * w, y1: cy - 0.5 * h, x2: cx + 0.5 * w, y2: cy + 0.5 * h }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        BBox { x1: self.x1 + dx, y1: self.y1 + dy, x2: self.x2 + dx, y2: self.y2 + dy }
    }

    /// Intersection with `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> Self {
        let cx = |v: f64| v.clamp(0.0, width);
        let cy = |v: f64| v.clamp(0.0, height);
        BBox { x1: cx(self.x1), y1: cy(self.y1), x2: cx(self.x2), y2: cy(self.y2) }
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox { x1: v[0], y1: v[1], x2: v[2], y2: v[3] }
    }
}

/// Intersection over union. Two zero-area boxes have IoU 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Regression target of a box relative to an anchor.
///
/// `dx, dy` are center offsets divided by the anchor width/height, `dw, dh`
/// are log size ratios. No variance scaling is applied.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDelta {
    pub fn to_array(&self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        BoxDelta { dx: v[0], dy: v[1], dw: v[2], dh: v[3] }
    }
}

pub fn encode(gt: &BBox, anchor: &BBox) -> Result<BoxDelta> {
    let (aw, ah) = (anchor.width(), anchor.height());
    if aw <= 0.0 || ah <= 0.0 {
        return Err(Error::InvalidBox(format!("anchor {anchor:?} has zero area")));
    }
    let (gw, gh) = (gt.width(), gt.height());
    if gw <= 0.0 || gh <= 0.0 {
        return Err(Error::InvalidBox(format!("target {gt:?} has zero width or height")));
    }
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    Ok(BoxDelta {
        dx: (gcx - acx) / aw,
        dy: (gcy - acy) / ah,
        dw: (gw / aw).ln(),
        dh: (gh / ah).ln(),
    })
}

pub fn decode(delta: &BoxDelta, anchor: &BBox) -> Result<BBox> {
    let (aw, ah) = (anchor.width(), anchor.height());
    if aw <= 0.0 || ah <= 0.0 {
        return Err(Error::InvalidBox(format!("anchor {anchor:?} has zero area")));
    }
    let (acx, acy) = anchor.center();
    let cx = acx + delta.dx * aw;
    let cy = acy + delta.dy * ah;
    let w = aw * delta.dw.exp();
    let h = ah * delta.dh.exp();
    Ok(BBox::from_center(cx, cy, w, h))
}

/// Greedy non-maximum suppression.
///
/// Returns indices into `boxes` in descending score order; equal scores keep
/// the lower input index first. A box is dropped when its IoU with an already
/// kept box exceeds `iou_threshold`.
pub fn nms(boxes: &[(BBox, f64)], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    // stable sort keeps index order among ties
    order.sort_by(|&a, &b| boxes[b].1.total_cmp(&boxes[a].1));

    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = keep.iter().any(|&k| iou(&boxes[k].0, &boxes[i].0) > iou_threshold);
        if !suppressed {
            keep.push(i);
        }
    }
    keep
}

/// One pyramid level of the anchor grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorLevelSpec {
    pub stride: u32,
    pub base_size: f64,
    pub scales: Vec<f64>,
    pub aspect_ratios: Vec<f64>,
}

impl AnchorLevelSpec {
    pub fn anchors_per_cell(&self) -> usize {
        self.scales.len() * self.aspect_ratios.len()
    }

    fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::Config("anchor stride must be positive".into()));
        }
        if !(self.base_size > 0.0) {
            return Err(Error::Config(format!("anchor base size {} must be positive", self.base_size)));
        }
        if self.scales.is_empty() || self.aspect_ratios.is_empty() {
            return Err(Error::Config("anchor scales and aspect ratios must be non-empty".into()));
        }
        if self.scales.iter().chain(&self.aspect_ratios).any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Config("anchor scales and aspect ratios must be positive".into()));
        }
        Ok(())
    }
}

/// Anchor configuration shared by the model head and the target assigner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub levels: Vec<AnchorLevelSpec>,
    pub pos_iou: f64,
    pub neg_iou: f64,
}

impl Default for AnchorConfig {
    /// Three levels at strides 8/16/32 with base sizes 16/32/64, three octave
    /// scales and ratios {1/2, 1, 2}.
    fn default() -> Self {
        let scales = vec![1.0, 2f64.powf(1.0 / 3.0), 2f64.powf(2.0 / 3.0)];
        let ratios = vec![0.5, 1.0, 2.0];
        let levels = [(8, 16.0), (16, 32.0), (32, 64.0)]
            .into_iter()
            .map(|(stride, base_size)| AnchorLevelSpec {
                stride,
                base_size,
                scales: scales.clone(),
                aspect_ratios: ratios.clone(),
            })
            .collect();
        AnchorConfig { levels, pos_iou: 0.5, neg_iou: 0.4 }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config("at least one anchor level is required".into()));
        }
        for level in &self.levels {
            level.validate()?;
        }
        if !(0.0..=1.0).contains(&self.neg_iou) || !(0.0..=1.0).contains(&self.pos_iou) {
            return Err(Error::Config("matching thresholds must lie in [0, 1]".into()));
        }
        if self.pos_iou < self.neg_iou {
            return Err(Error::Config(format!(
                "positive threshold {} is below negative threshold {}",
                self.pos_iou, self.neg_iou
            )));
        }
        Ok(())
    }

    pub fn strides(&self) -> Vec<u32> {
        self.levels.iter().map(|l| l.stride).collect()
    }

    /// Anchors per feature-map cell, required to be equal on every level so a
    /// single head can be shared across the pyramid.
    pub fn anchors_per_cell(&self) -> Result<usize> {
        let first = self.levels.first().map(|l| l.anchors_per_cell()).unwrap_or(0);
        if self.levels.iter().any(|l| l.anchors_per_cell() != first) {
            return Err(Error::Config("all anchor levels must have the same anchors per cell".into()));
        }
        Ok(first)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorLevel {
    pub spec: AnchorLevelSpec,
    pub grid_w: usize,
    pub grid_h: usize,
    /// Row-major over cells; within a cell, scale-major then aspect ratio.
    pub anchors: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub image_width: usize,
    pub image_height: usize,
    pub levels: Vec<AnchorLevel>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.levels.iter().map(|l| l.anchors.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn level_counts(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.anchors.len()).collect()
    }

    /// All anchors concatenated level by level.
    pub fn flat(&self) -> Vec<BBox> {
        self.levels.iter().flat_map(|l| l.anchors.iter().copied()).collect()
    }
}

/// Feature-map side length for an image side and a stride.
pub fn grid_len(image_len: usize, stride: u32) -> usize {
    image_len.div_ceil(stride as usize)
}

pub fn generate_anchors(width: usize, height: usize, config: &AnchorConfig) -> Result<AnchorSet> {
    if config.levels.is_empty() {
        return Err(Error::Config("at least one anchor level is required".into()));
    }
    let mut levels = Vec::with_capacity(config.levels.len());
    for spec in &config.levels {
        spec.validate()?;
        let stride = spec.stride as f64;
        let grid_w = grid_len(width, spec.stride);
        let grid_h = grid_len(height, spec.stride);

        let shapes: Vec<(f64, f64)> = spec
            .scales
            .iter()
            .flat_map(|&s| {
                spec.aspect_ratios.iter().map(move |&r| {
                    let size = spec.base_size * s;
                    (size / r.sqrt(), size * r.sqrt())
                })
            })
            .collect();

        let mut anchors = Vec::with_capacity(grid_w * grid_h * shapes.len());
        for gy in 0..grid_h {
            let cy = (gy as f64 + 0.5) * stride;
            for gx in 0..grid_w {
                let cx = (gx as f64 + 0.5) * stride;
                anchors.extend(shapes.iter().map(|&(w, h)| BBox::from_center(cx, cy, w, h)));
            }
        }
        levels.push(AnchorLevel { spec: spec.clone(), grid_w, grid_h, anchors });
    }
    Ok(AnchorSet { image_width: width, image_height: height, levels })
}

/// Training label of one anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorMatch {
    /// Assigned to the ground-truth box with this index.
    Positive(usize),
    Negative,
    Ignore,
}

/// Assigns each anchor to a ground-truth box by IoU bands.
///
/// Positive when the best IoU is at least `pos_thr`, negative below `neg_thr`,
/// ignored in between. Each ground truth's best anchor is forced positive so
/// small boxes always receive a target.
pub fn match_anchors(anchors: &[BBox], gts: &[BBox], pos_thr: f64, neg_thr: f64) -> Result<Vec<AnchorMatch>> {
    if pos_thr < neg_thr {
        return Err(Error::Config(format!("pos_thr {pos_thr} < neg_thr {neg_thr}")));
    }
    if gts.is_empty() {
        return Ok(vec![AnchorMatch::Negative; anchors.len()]);
    }

    let mut labels = Vec::with_capacity(anchors.len());
    // per gt: (best iou, anchor index)
    let mut best_for_gt = vec![(0.0f64, usize::MAX); gts.len()];
    for (ai, anchor) in anchors.iter().enumerate() {
        let mut best = (-1.0f64, 0usize);
        for (gi, gt) in gts.iter().enumerate() {
            let v = iou(anchor, gt);
            if v > best.0 {
                best = (v, gi);
            }
            if v > best_for_gt[gi].0 {
                best_for_gt[gi] = (v, ai);
            }
        }
        let label = if best.0 >= pos_thr {
            AnchorMatch::Positive(best.1)
        } else if best.0 < neg_thr {
            AnchorMatch::Negative
        } else {
            AnchorMatch::Ignore
        };
        labels.push(label);
    }

    // Forced matches; the lowest gt index wins a contested anchor.
    for (gi, &(v, ai)) in best_for_gt.iter().enumerate().rev() {
        if ai != usize::MAX && v > 0.0 {
            labels[ai] = AnchorMatch::Positive(gi);
        }
    }
    Ok(labels)
}
