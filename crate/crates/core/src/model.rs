//! Multi-task detector: backbone, feature pyramid, shared dense
//! classification/regression heads, and two fully-connected auxiliary heads
//! (tumor type and patch foreground) on the pooled deepest pyramid level.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::AblationFlags;
use crate::geometry::{self, AnchorConfig, BBox, BoxDelta};
use crate::losses::LossConfig;
use crate::raster::Image;

/// Prior probability of the mitosis class used to initialise the classifier bias.
const PRIOR_PROB: f64 = 0.01;

/// Largest allowed log size ratio when decoding predictions.
const MAX_LOG_RATIO: f64 = 4.135; // ln(1000 / 16)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneVariant {
    /// Four plain conv stages, about 0.4M parameters.
    Tiny,
    /// 50-layer bottleneck residual network with group normalization.
    Resnet50,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    /// Pyramid strides, consecutive powers of two between 4 and 128.
    pub pyramid_strides: Vec<u32>,
    /// Feature width of every pyramid level and of the dense heads.
    pub channels: usize,
    /// Conv layers in each dense head before the output layer.
    pub head_convs: usize,
    /// Hidden width of the auxiliary fully-connected heads.
    pub aux_hidden: usize,
    /// Initialise backbone weights from `pretrained_path`.
    pub pretrained: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrained_path: Option<String>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            variant: BackboneVariant::Tiny,
            pyramid_strides: vec![8, 16, 32],
            channels: 64,
            head_convs: 2,
            aux_hidden: 256,
            pretrained: false,
            pretrained_path: None,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.pyramid_strides;
        if s.is_empty() {
            return Err(Error::Config("at least one pyramid level is required".into()));
        }
        if s.iter().any(|&v| !v.is_power_of_two() || !(4..=128).contains(&v)) {
            return Err(Error::Config(format!("pyramid strides {s:?} must be powers of two in [4, 128]")));
        }
        if s.windows(2).any(|w| w[1] != 2 * w[0]) {
            return Err(Error::Config(format!("pyramid strides {s:?} must be consecutive powers of two")));
        }
        if self.channels == 0 || self.aux_hidden == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.pretrained && self.pretrained_path.is_none() {
            return Err(Error::Config("model.pretrained requires model.pretrained_path".into()));
        }
        Ok(())
    }

    pub fn deepest_stride(&self) -> u32 {
        self.pyramid_strides.last().copied().unwrap_or(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub anchors: AnchorConfig,
    pub num_tumor_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { backbone: BackboneConfig::default(), anchors: AnchorConfig::default(), num_tumor_classes: 6 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.anchors.validate()?;
        self.anchors.anchors_per_cell()?;
        if self.anchors.strides() != self.backbone.pyramid_strides {
            return Err(Error::Config(format!(
                "anchor strides {:?} differ from pyramid strides {:?}",
                self.anchors.strides(),
                self.backbone.pyramid_strides
            )));
        }
        if self.num_tumor_classes < 2 {
            return Err(Error::Config("at least two tumor classes are required".into()));
        }
        Ok(())
    }
}

/// Named trainable tensors with seeded initialisation.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, device: &Device) -> Self {
        ParamStore { vars: BTreeMap::new(), rng: ChaCha8Rng::seed_from_u64(seed), device: device.clone() }
    }

    fn insert(&mut self, name: String, data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &self.device)?)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(t)
    }

    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0f32, std as f32).map_err(|e| Error::Config(e.to_string()))?;
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.insert(name, data, shape)
    }

    fn constant(&mut self, name: String, shape: &[usize], value: f32) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Variables whose name starts with `prefix`.
    pub fn vars_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Var)> + 'a {
        self.vars.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect()
    }

    /// Deep copy of every parameter value.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars.iter().map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?))).collect()
    }

    /// Overwrites parameters by name. With `strict`, every parameter must be present.
    pub fn restore(&self, values: &BTreeMap<String, Tensor>, strict: bool) -> Result<()> {
        for (name, var) in &self.vars {
            match values.get(name) {
                Some(t) => {
                    if t.dims() != var.dims() {
                        return Err(Error::Config(format!(
                            "parameter {name}: shape {:?} does not match {:?}",
                            t.dims(),
                            var.dims()
                        )));
                    }
                    var.set(&t.to_dtype(DType::F32)?)?;
                }
                None if strict => return Err(Error::Config(format!("parameter {name} missing"))),
                None => {}
            }
        }
        Ok(())
    }
}

struct Conv {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new(
        p: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        std: Option<f64>,
    ) -> Result<Self> {
        let fan_in = (c_in * kernel * kernel) as f64;
        let std = std.unwrap_or((2.0 / fan_in).sqrt());
        let weight = p.normal(format!("{name}.weight"), &[c_out, c_in, kernel, kernel], std)?;
        let bias = if bias { Some(p.constant(format!("{name}.bias"), &[c_out], 0.0)?) } else { None };
        Ok(Conv { weight, bias, stride, padding: kernel / 2 })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = crate::conv::conv2d(x, &self.weight, self.stride, self.padding)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    fn new(p: &mut ParamStore, name: &str, c_in: usize, c_out: usize, std: f64) -> Result<Self> {
        let weight = p.normal(format!("{name}.weight"), &[c_out, c_in], std)?;
        let bias = p.constant(format!("{name}.bias"), &[c_out], 0.0)?;
        Ok(Linear { weight, bias })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

struct GroupNorm {
    norm: candle_nn::GroupNorm,
}

impl GroupNorm {
    fn new(p: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let weight = p.constant(format!("{name}.weight"), &[channels], 1.0)?;
        let bias = p.constant(format!("{name}.bias"), &[channels], 0.0)?;
        let groups = 32.min(channels);
        Ok(GroupNorm { norm: candle_nn::GroupNorm::new(weight, bias, channels, groups, 1e-5)? })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(candle_core::Module::forward(&self.norm, x)?)
    }
}

/// Conv followed by an optional group norm.
struct ConvNorm {
    conv: Conv,
    norm: Option<GroupNorm>,
}

impl ConvNorm {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.conv.forward(x)?;
        match &self.norm {
            Some(n) => n.forward(&y),
            None => Ok(y),
        }
    }
}

fn conv_gn(p: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<ConvNorm> {
    Ok(ConvNorm {
        conv: Conv::new(p, &format!("{name}.conv"), c_in, c_out, k, stride, false, None)?,
        norm: Some(GroupNorm::new(p, &format!("{name}.gn"), c_out)?),
    })
}

struct Bottleneck {
    reduce: ConvNorm,
    spatial: ConvNorm,
    expand: ConvNorm,
    shortcut: Option<ConvNorm>,
}

impl Bottleneck {
    fn new(p: &mut ParamStore, name: &str, c_in: usize, width: usize, stride: usize) -> Result<Self> {
        let c_out = width * 4;
        let shortcut = if stride != 1 || c_in != c_out {
            Some(conv_gn(p, &format!("{name}.shortcut"), c_in, c_out, 1, stride)?)
        } else {
            None
        };
        Ok(Bottleneck {
            reduce: conv_gn(p, &format!("{name}.reduce"), c_in, width, 1, 1)?,
            spatial: conv_gn(p, &format!("{name}.spatial"), width, width, 3, stride)?,
            expand: conv_gn(p, &format!("{name}.expand"), width, c_out, 1, 1)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.reduce.forward(x)?.relu()?;
        let y = self.spatial.forward(&y)?.relu()?;
        let y = self.expand.forward(&y)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((y + skip)?.relu()?)
    }
}

enum Backbone {
    Tiny { stem: Conv, stages: Vec<[Conv; 2]> },
    Resnet50 { stem: ConvNorm, stages: Vec<Vec<Bottleneck>> },
}

/// Output widths of the stride 4/8/16/32 features.
const TINY_WIDTHS: [usize; 4] = [24, 48, 96, 128];
const TINY_STEM: usize = 16;
const RESNET_WIDTHS: [usize; 4] = [64, 128, 256, 512];
const RESNET_DEPTHS: [usize; 4] = [3, 4, 6, 3];

impl Backbone {
    fn new(p: &mut ParamStore, variant: BackboneVariant) -> Result<Self> {
        match variant {
            BackboneVariant::Tiny => {
                let stem = Conv::new(p, "backbone.stem", 3, TINY_STEM, 3, 2, true, None)?;
                let mut stages = Vec::new();
                let mut c_in = TINY_STEM;
                for (i, &w) in TINY_WIDTHS.iter().enumerate() {
                    let down = Conv::new(p, &format!("backbone.stage{}.down", i + 1), c_in, w, 3, 2, true, None)?;
                    let refine = Conv::new(p, &format!("backbone.stage{}.refine", i + 1), w, w, 3, 1, true, None)?;
                    stages.push([down, refine]);
                    c_in = w;
                }
                Ok(Backbone::Tiny { stem, stages })
            }
            BackboneVariant::Resnet50 => {
                let stem = ConvNorm {
                    conv: Conv::new(p, "backbone.stem.conv", 3, 64, 7, 2, false, None)?,
                    norm: Some(GroupNorm::new(p, "backbone.stem.gn", 64)?),
                };
                let mut stages = Vec::new();
                let mut c_in = 64;
                for (i, (&w, &depth)) in RESNET_WIDTHS.iter().zip(&RESNET_DEPTHS).enumerate() {
                    let mut blocks = Vec::new();
                    for b in 0..depth {
                        let stride = if b == 0 && i > 0 { 2 } else { 1 };
                        blocks.push(Bottleneck::new(p, &format!("backbone.layer{}.{b}", i + 1), c_in, w, stride)?);
                        c_in = w * 4;
                    }
                    stages.push(blocks);
                }
                Ok(Backbone::Resnet50 { stem, stages })
            }
        }
    }

    fn widths(variant: BackboneVariant) -> [usize; 4] {
        match variant {
            BackboneVariant::Tiny => TINY_WIDTHS,
            BackboneVariant::Resnet50 => RESNET_WIDTHS.map(|w| w * 4),
        }
    }

    /// Features at strides 4, 8, 16 and 32.
    fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut feats = Vec::with_capacity(4);
        match self {
            Backbone::Tiny { stem, stages } => {
                let mut h = stem.forward(x)?.relu()?;
                for [down, refine] in stages {
                    h = down.forward(&h)?.relu()?;
                    h = refine.forward(&h)?.relu()?;
                    feats.push(h.clone());
                }
            }
            Backbone::Resnet50 { stem, stages } => {
                let h = stem.forward(x)?.relu()?;
                // post-ReLU values are >= 0, so zero padding acts as -inf padding
                let mut h = h.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?.max_pool2d_with_stride(3, 2)?;
                for blocks in stages {
                    for block in blocks {
                        h = block.forward(&h)?;
                    }
                    feats.push(h.clone());
                }
            }
        }
        Ok(feats)
    }
}

struct Fpn {
    /// Backbone feature index (0 = stride 4) of each lateral.
    sources: Vec<usize>,
    laterals: Vec<Conv>,
    outputs: Vec<Conv>,
    /// Extra stride-2 levels beyond stride 32.
    extras: Vec<Conv>,
}

impl Fpn {
    fn new(p: &mut ParamStore, cfg: &BackboneConfig) -> Result<Self> {
        let widths = Backbone::widths(cfg.variant);
        let f = cfg.channels;
        let mut fpn = Fpn { sources: Vec::new(), laterals: Vec::new(), outputs: Vec::new(), extras: Vec::new() };
        for &stride in &cfg.pyramid_strides {
            let level = stride.trailing_zeros() as usize;
            if level <= 5 {
                let src = level - 2;
                let name = format!("fpn.p{level}");
                fpn.laterals.push(Conv::new(p, &format!("{name}.lateral"), widths[src], f, 1, 1, true, None)?);
                fpn.outputs.push(Conv::new(p, &format!("{name}.output"), f, f, 3, 1, true, None)?);
                fpn.sources.push(src);
            } else {
                let c_in = if fpn.extras.is_empty() { widths[3] } else { f };
                fpn.extras.push(Conv::new(p, &format!("fpn.p{level}.conv"), c_in, f, 3, 2, true, None)?);
            }
        }
        Ok(fpn)
    }

    fn forward(&self, feats: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut merged: Vec<Tensor> = Vec::with_capacity(self.laterals.len());
        for i in (0..self.laterals.len()).rev() {
            let lat = self.laterals[i].forward(&feats[self.sources[i]])?;
            let m = match merged.last() {
                None => lat,
                Some(coarser) => {
                    let (_, _, h, w) = lat.dims4()?;
                    let (_, _, ch, cw) = coarser.dims4()?;
                    let up = coarser.upsample_nearest2d(2 * ch, 2 * cw)?.narrow(2, 0, h)?.narrow(3, 0, w)?;
                    (lat + up)?
                }
            };
            merged.push(m);
        }
        merged.reverse();
        let mut outs = merged
            .iter()
            .zip(&self.outputs)
            .map(|(m, conv)| conv.forward(m))
            .collect::<Result<Vec<_>>>()?;
        let mut prev: Option<Tensor> = None;
        for conv in &self.extras {
            let input = match &prev {
                None => feats[3].clone(),
                Some(t) => t.relu()?,
            };
            let out = conv.forward(&input)?;
            outs.push(out.clone());
            prev = Some(out);
        }
        Ok(outs)
    }
}

/// Conv tower shared across pyramid levels.
struct DenseHead {
    convs: Vec<Conv>,
    out: Conv,
}

impl DenseHead {
    fn new(p: &mut ParamStore, name: &str, channels: usize, depth: usize, outputs: usize, bias: f32) -> Result<Self> {
        let convs = (0..depth)
            .map(|i| Conv::new(p, &format!("{name}.conv{i}"), channels, channels, 3, 1, true, Some(0.01)))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Conv::new(p, &format!("{name}.out"), channels, outputs, 3, 1, false, Some(0.01))?;
        out.bias = Some(p.constant(format!("{name}.out.bias"), &[outputs], bias)?);
        Ok(DenseHead { convs, out })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for c in &self.convs {
            h = c.forward(&h)?.relu()?;
        }
        self.out.forward(&h)
    }
}

/// Pooled feature -> hidden FC + ReLU -> linear output.
struct AuxHead {
    hidden: Linear,
    out: Linear,
}

impl AuxHead {
    fn new(p: &mut ParamStore, name: &str, c_in: usize, hidden: usize, outputs: usize) -> Result<Self> {
        Ok(AuxHead {
            hidden: Linear::new(p, &format!("{name}.hidden"), c_in, hidden, (2.0 / c_in as f64).sqrt())?,
            out: Linear::new(p, &format!("{name}.out"), hidden, outputs, 0.01)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.out.forward(&self.hidden.forward(x)?.relu()?)
    }
}

/// Parameter-name prefixes of the two auxiliary heads.
pub const TUMOR_HEAD_PREFIX: &str = "aux.tumor.";
pub const FG_HEAD_PREFIX: &str = "aux.foreground.";
pub const BACKBONE_PREFIX: &str = "backbone.";

/// Raw outputs for a batch.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// `(batch, anchors)` mitosis logits, levels concatenated in pyramid order.
    pub cls_logits: Tensor,
    /// `(batch, anchors, 4)` box deltas.
    pub box_deltas: Tensor,
    /// Anchors per level for the input size.
    pub level_counts: Vec<usize>,
    /// `(batch, num_tumor_classes)`.
    pub tumor_logits: Tensor,
    /// `(batch,)` foreground logits.
    pub fg_logits: Tensor,
}

impl ModelOutput {
    /// Class logits of one pyramid level.
    pub fn level_cls(&self, level: usize) -> Result<Tensor> {
        let start: usize = self.level_counts[..level].iter().sum();
        Ok(self.cls_logits.narrow(1, start, self.level_counts[level])?)
    }
}

/// Whether gradients from the auxiliary heads reach the shared trunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AuxGradient {
    #[default]
    Attached,
    /// The heads see a detached copy of the pooled feature.
    Detached,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictParams {
    pub score_thr: f64,
    pub nms_thr: f64,
    pub max_dets: usize,
    /// Candidates kept per level before NMS.
    pub pre_nms_top_k: usize,
}

impl Default for PredictParams {
    fn default() -> Self {
        PredictParams { score_thr: 0.05, nms_thr: 0.5, max_dets: 100, pre_nms_top_k: 1000 }
    }
}

pub struct Detector {
    config: ModelConfig,
    params: ParamStore,
    backbone: Backbone,
    fpn: Fpn,
    cls_head: DenseHead,
    box_head: DenseHead,
    tumor_head: AuxHead,
    fg_head: AuxHead,
    anchors_per_cell: usize,
    device: Device,
}

impl Detector {
    /// Builds the network with weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let mut p = ParamStore::new(seed, &device);
        let a = config.anchors.anchors_per_cell()?;
        let f = config.backbone.channels;
        let depth = config.backbone.head_convs;
        let hidden = config.backbone.aux_hidden;
        let backbone = Backbone::new(&mut p, config.backbone.variant)?;
        let fpn = Fpn::new(&mut p, &config.backbone)?;
        let prior_bias = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln() as f32;
        let cls_head = DenseHead::new(&mut p, "head.cls", f, depth, a, prior_bias)?;
        let box_head = DenseHead::new(&mut p, "head.box", f, depth, 4 * a, 0.0)?;
        let tumor_head = AuxHead::new(&mut p, "aux.tumor", f, hidden, config.num_tumor_classes)?;
        let fg_head = AuxHead::new(&mut p, "aux.foreground", f, hidden, 1)?;
        let det = Detector {
            config,
            params: p,
            backbone,
            fpn,
            cls_head,
            box_head,
            tumor_head,
            fg_head,
            anchors_per_cell: a,
            device,
        };
        if det.config.backbone.pretrained {
            let path = det.config.backbone.pretrained_path.clone().unwrap_or_default();
            det.load_backbone_weights(Path::new(&path))?;
        }
        Ok(det)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    fn load_backbone_weights(&self, path: &Path) -> Result<()> {
        let loaded = candle_core::safetensors::load(path, &self.device)?;
        let values: BTreeMap<String, Tensor> =
            loaded.into_iter().filter(|(k, _)| k.starts_with(BACKBONE_PREFIX)).collect();
        if values.is_empty() {
            return Err(Error::Config(format!("{} holds no backbone.* tensors", path.display())));
        }
        let backbone: BTreeMap<String, Tensor> = self
            .params
            .vars_with_prefix(BACKBONE_PREFIX)
            .map(|(k, _)| (k.clone(), values.get(k).cloned()))
            .map(|(k, v)| v.map(|v| (k.clone(), v)).ok_or_else(|| Error::Config(format!("pretrained weights lack {k}"))))
            .collect::<Result<_>>()?;
        self.params.restore(&backbone, false)
    }

    /// Checks that an input size is usable: at least one deepest stride per side.
    pub fn check_input(&self, width: usize, height: usize) -> Result<()> {
        let s = self.config.backbone.deepest_stride() as usize;
        if width < s || height < s {
            return Err(Error::InvalidInput(format!(
                "{width}x{height} input is smaller than the deepest stride {s}"
            )));
        }
        Ok(())
    }

    /// Packs same-sized images into a `(batch, 3, h, w)` tensor scaled to `[-1, 1]`.
    pub fn images_to_tensor(&self, images: &[&Image]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::InvalidInput("empty image batch".into()))?;
        let (w, h) = (first.width, first.height);
        let mut data = Vec::with_capacity(images.len() * 3 * w * h);
        for img in images {
            if (img.width, img.height) != (w, h) {
                return Err(Error::InvalidInput("images in a batch must share one size".into()));
            }
            data.extend(img.to_chw().into_iter().map(|v| 2.0 * v - 1.0));
        }
        Ok(Tensor::from_vec(data, (images.len(), 3, h, w), &self.device)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<ModelOutput> {
        self.forward_with(x, AuxGradient::Attached)
    }

    pub fn forward_with(&self, x: &Tensor, aux: AuxGradient) -> Result<ModelOutput> {
        let (batch, _, h, w) = x.dims4()?;
        self.check_input(w, h)?;
        let feats = self.backbone.forward(x)?;
        let levels = self.fpn.forward(&feats)?;
        let a = self.anchors_per_cell;

        let mut cls = Vec::with_capacity(levels.len());
        let mut boxes = Vec::with_capacity(levels.len());
        let mut counts = Vec::with_capacity(levels.len());
        for level in &levels {
            let (_, _, lh, lw) = level.dims4()?;
            let n = lh * lw * a;
            let c = self.cls_head.forward(level)?.permute((0, 2, 3, 1))?.reshape((batch, n))?;
            let b = self
                .box_head
                .forward(level)?
                .reshape((batch, a, 4, lh, lw))?
                .permute((0, 3, 4, 1, 2))?
                .reshape((batch, n, 4))?;
            cls.push(c);
            boxes.push(b);
            counts.push(n);
        }

        let deepest = levels.last().expect("validated non-empty pyramid");
        let pooled = deepest.mean(D::Minus1)?.mean(D::Minus1)?;
        let pooled = match aux {
            AuxGradient::Attached => pooled,
            AuxGradient::Detached => pooled.detach(),
        };
        let tumor_logits = self.tumor_head.forward(&pooled)?;
        let fg_logits = self.fg_head.forward(&pooled)?.squeeze(1)?;

        Ok(ModelOutput {
            cls_logits: Tensor::cat(&cls, 1)?,
            box_deltas: Tensor::cat(&boxes, 1)?,
            level_counts: counts,
            tumor_logits,
            fg_logits,
        })
    }

    /// Forward pass on a single `H x W x 3` image.
    pub fn forward_image(&self, image: &Image) -> Result<ModelOutput> {
        image.check_range()?;
        self.forward(&self.images_to_tensor(&[image])?)
    }

    pub fn predict(&self, image: &Image, params: &PredictParams) -> Result<Vec<Detection>> {
        Ok(self.predict_batch(&[image], params)?.pop().unwrap_or_default())
    }

    /// Decodes, thresholds, suppresses and clips detections for same-sized images.
    pub fn predict_batch(&self, images: &[&Image], params: &PredictParams) -> Result<Vec<Vec<Detection>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let (w, h) = (images[0].width, images[0].height);
        let out = self.forward(&self.images_to_tensor(images)?)?;
        let anchors = geometry::generate_anchors(w, h, &self.config.anchors)?;
        if anchors.level_counts() != out.level_counts {
            return Err(Error::InvalidInput("anchor grid does not match head output".into()));
        }
        let flat_anchors = anchors.flat();
        let scores: Vec<Vec<f32>> = candle_nn::ops::sigmoid(&out.cls_logits)?.to_vec2()?;
        let deltas: Vec<Vec<Vec<f32>>> = out.box_deltas.to_vec3()?;

        let mut results = Vec::with_capacity(images.len());
        for (img_scores, img_deltas) in scores.iter().zip(&deltas) {
            let mut candidates: Vec<(BBox, f64)> = Vec::new();
            let mut start = 0;
            for &count in &out.level_counts {
                let mut idx: Vec<usize> =
                    (start..start + count).filter(|&i| img_scores[i] as f64 >= params.score_thr).collect();
                idx.sort_by(|&a, &b| img_scores[b].total_cmp(&img_scores[a]));
                idx.truncate(params.pre_nms_top_k);
                for i in idx {
                    let d = &img_deltas[i];
                    let delta = BoxDelta {
                        dx: d[0] as f64,
                        dy: d[1] as f64,
                        dw: (d[2] as f64).min(MAX_LOG_RATIO),
                        dh: (d[3] as f64).min(MAX_LOG_RATIO),
                    };
                    let bbox = geometry::decode(&delta, &flat_anchors[i])?.clip(w as f64, h as f64);
                    candidates.push((bbox, img_scores[i] as f64));
                }
                start += count;
            }
            let keep = geometry::nms(&candidates, params.nms_thr);
            let dets = keep
                .into_iter()
                .take(params.max_dets)
                .map(|i| Detection { bbox: candidates[i].0, score: candidates[i].1 })
                .collect();
            results.push(dets);
        }
        Ok(results)
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let tensors: std::collections::HashMap<String, Tensor> = self.params.tensors().into_iter().collect();
        candle_core::safetensors::save(&tensors, path)?;
        Ok(())
    }

    pub fn load_weights(&self, path: &Path) -> Result<()> {
        let loaded: BTreeMap<String, Tensor> =
            candle_core::safetensors::load(path, &self.device)?.into_iter().collect();
        self.params.restore(&loaded, true)
    }
}

/// Parameter count of a configuration.
pub fn num_parameters(config: &ModelConfig) -> Result<usize> {
    Ok(Detector::new(config.clone(), 0)?.num_parameters())
}

pub const WEIGHTS_FILE: &str = "model.safetensors";
pub const SIDECAR_FILE: &str = "model.json";

/// JSON sidecar stored next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub backbone: BackboneConfig,
    pub anchors: AnchorConfig,
    pub loss: LossConfig,
    pub class_names: Vec<String>,
    pub flags: AblationFlags,
    pub epoch: usize,
    #[serde(default)]
    pub val_map: Option<f64>,
    #[serde(default)]
    pub score_threshold: Option<f64>,
}

impl CheckpointMeta {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            anchors: self.anchors.clone(),
            num_tumor_classes: self.class_names.len(),
        }
    }

    /// Lists every model-defining key (backbone, anchors, class list) whose
    /// value differs. Loss settings, flags and progress are not compared.
    pub fn diff(&self, other: &CheckpointMeta) -> Result<Vec<String>> {
        let flatten = |m: &CheckpointMeta| -> Result<BTreeMap<String, String>> {
            let mut v = serde_json::to_value(m)?;
            if let Some(obj) = v.as_object_mut() {
                for k in ["epoch", "val_map", "score_threshold", "loss", "flags"] {
                    obj.remove(k);
                }
            }
            let mut out = BTreeMap::new();
            flatten_json("", &v, &mut out);
            Ok(out)
        };
        let (a, b) = (flatten(self)?, flatten(other)?);
        let keys: std::collections::BTreeSet<&String> = a.keys().chain(b.keys()).collect();
        let none = "<absent>".to_string();
        Ok(keys
            .into_iter()
            .filter(|k| a.get(*k) != b.get(*k))
            .map(|k| format!("{k}: checkpoint={} run={}", a.get(k).unwrap_or(&none), b.get(k).unwrap_or(&none)))
            .collect())
    }
}

fn flatten_json(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, String>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_json(&key, child, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

pub fn save_checkpoint(dir: &Path, detector: &Detector, meta: &CheckpointMeta) -> Result<()> {
    fs::create_dir_all(dir)?;
    detector.save_weights(&dir.join(WEIGHTS_FILE))?;
    fs::write(dir.join(SIDECAR_FILE), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn read_checkpoint_meta(dir: &Path) -> Result<CheckpointMeta> {
    let text = fs::read_to_string(dir.join(SIDECAR_FILE))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads a checkpoint. With `expected`, refuses when any configuration key differs.
pub fn load_checkpoint(dir: &Path, expected: Option<&CheckpointMeta>) -> Result<(Detector, CheckpointMeta)> {
    let meta = read_checkpoint_meta(dir)?;
    if let Some(exp) = expected {
        let diff = meta.diff(exp)?;
        if !diff.is_empty() {
            return Err(Error::CheckpointMismatch(diff.join("\n")));
        }
    }
    let mut cfg = meta.model_config();
    // weights come from the archive, not from the pretrained source
    cfg.backbone.pretrained = false;
    let detector = Detector::new(cfg, 0)?;
    detector.load_weights(&dir.join(WEIGHTS_FILE))?;
    Ok((detector, meta))
}
