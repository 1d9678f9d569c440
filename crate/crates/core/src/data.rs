//! Case records, manifest I/O, patch sampling, foreground labels,
//! leave-one-tumor-out splits and the synthetic dataset generator.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::raster::Image;

/// Tumor types of the six-domain training corpus, in class-index order.
pub const DEFAULT_TUMOR_TYPES: [&str; 6] = [
    "canine_lung_cancer",
    "human_breast_cancer",
    "canine_lymphoma",
    "human_neuroendocrine_tumor",
    "canine_cutaneous_mast_cell_tumor",
    "human_melanoma",
];

pub const DEFAULT_HELD_OUT: &str = "human_neuroendocrine_tumor";

pub fn default_class_names() -> Vec<String> {
    DEFAULT_TUMOR_TYPES.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationKind {
    MitoticFigure,
    /// Mitosis look-alike; counts toward patch foreground but is never a detection target.
    HardNegative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub kind: AnnotationKind,
}

impl Annotation {
    pub fn mitosis(bbox: BBox) -> Self {
        Annotation { bbox, kind: AnnotationKind::MitoticFigure }
    }

    pub fn hard_negative(bbox: BBox) -> Self {
        Annotation { bbox, kind: AnnotationKind::HardNegative }
    }

    pub fn is_mitosis(&self) -> bool {
        self.kind == AnnotationKind::MitoticFigure
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Species {
    Human,
    Canine,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    /// Image path, relative to the manifest's directory unless absolute.
    pub image: PathBuf,
    pub tumor_type: String,
    pub species: Species,
    /// `None` when the scanner is unknown.
    #[serde(default)]
    pub scanner: Option<String>,
    #[serde(default)]
    pub annotations: Vec<Annotation>,
}

impl CaseRecord {
    pub fn mitoses(&self) -> impl Iterator<Item = &BBox> {
        self.annotations.iter().filter(|a| a.is_mitosis()).map(|a| &a.bbox)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub cases: Vec<CaseRecord>,
}

/// A record together with its decoded pixels.
#[derive(Debug, Clone)]
pub struct Case {
    pub record: CaseRecord,
    pub image: Image,
    /// Index of `record.tumor_type` in the configured class list.
    pub tumor_label: usize,
}

fn record_err(case_id: &str, msg: impl Into<String>) -> Error {
    Error::Record { case_id: case_id.to_string(), msg: msg.into() }
}

fn validate_record(record: &CaseRecord, class_names: &[String], dims: Option<(u32, u32)>) -> Result<()> {
    if !class_names.iter().any(|c| c == &record.tumor_type) {
        return Err(record_err(&record.case_id, format!("unknown tumor type `{}`", record.tumor_type)));
    }
    for (i, ann) in record.annotations.iter().enumerate() {
        ann.bbox
            .validate()
            .map_err(|e| record_err(&record.case_id, format!("annotation {i}: {e}")))?;
        if let Some((w, h)) = dims {
            let b = &ann.bbox;
            if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > w as f64 || b.y2 > h as f64 {
                return Err(record_err(
                    &record.case_id,
                    format!("annotation {i} {:?} outside the {w}x{h} image", b.to_array()),
                ));
            }
        }
    }
    Ok(())
}

fn resolve(base: &Path, image: &Path) -> PathBuf {
    if image.is_absolute() {
        image.to_path_buf()
    } else {
        base.join(image)
    }
}

/// Reads and validates a manifest. Image files must exist; their dimensions
/// bound the annotation boxes.
pub fn load_dataset(manifest_path: &Path, class_names: &[String]) -> Result<Vec<CaseRecord>> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| Error::Dataset(format!("cannot read manifest {}: {e}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Dataset(format!("malformed manifest {}: {e}", manifest_path.display())))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let mut seen = BTreeSet::new();
    for record in &manifest.cases {
        if !seen.insert(record.case_id.as_str()) {
            return Err(record_err(&record.case_id, "duplicate case id"));
        }
        let path = resolve(base, &record.image);
        let dims = image::image_dimensions(&path)
            .map_err(|e| record_err(&record.case_id, format!("image {}: {e}", path.display())))?;
        validate_record(record, class_names, Some(dims))?;
    }
    Ok(manifest.cases)
}

pub fn save_manifest(path: &Path, records: &[CaseRecord]) -> Result<()> {
    let manifest = Manifest { cases: records.to_vec() };
    fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Decodes every record's image. `base` is the manifest directory.
pub fn load_cases(records: &[CaseRecord], base: &Path, class_names: &[String]) -> Result<Vec<Case>> {
    records
        .iter()
        .map(|record| {
            let path = resolve(base, &record.image);
            let image = Image::load(&path).map_err(|e| record_err(&record.case_id, e.to_string()))?;
            let tumor_label = class_index(class_names, &record.tumor_type)
                .ok_or_else(|| record_err(&record.case_id, format!("unknown tumor type `{}`", record.tumor_type)))?;
            Ok(Case { record: record.clone(), image, tumor_label })
        })
        .collect()
}

pub fn class_index(class_names: &[String], name: &str) -> Option<usize> {
    class_names.iter().position(|c| c == name)
}

/// A patch is foreground iff it contains any annotation, mitotic or look-alike.
pub fn label_foreground(annotations: &[Annotation]) -> bool {
    !annotations.is_empty()
}

/// Minimum fraction of a box's area that must stay inside a crop window.
pub const MIN_VISIBLE_FRACTION: f64 = 0.3;

/// Moves annotations into a `width x height` window at `(x0, y0)`, clipping
/// to the window and dropping boxes that keep less than
/// [`MIN_VISIBLE_FRACTION`] of their area.
pub fn remap_annotations(annotations: &[Annotation], x0: f64, y0: f64, width: f64, height: f64) -> Vec<Annotation> {
    annotations
        .iter()
        .filter_map(|a| {
            let moved = a.bbox.translate(-x0, -y0);
            let clipped = moved.clip(width, height);
            let area = moved.area();
            let keep = if area > 0.0 {
                clipped.area() >= MIN_VISIBLE_FRACTION * area
            } else {
                moved.x1 >= 0.0 && moved.y1 >= 0.0 && moved.x2 <= width && moved.y2 <= height
            };
            keep.then_some(Annotation { bbox: clipped, kind: a.kind })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub image: Image,
    /// All annotations in tile coordinates.
    pub annotations: Vec<Annotation>,
    pub tumor_label: usize,
    pub foreground: bool,
    pub origin: (usize, usize),
}

impl PatchSample {
    /// Detection targets: mitotic figures only.
    pub fn mitosis_boxes(&self) -> Vec<BBox> {
        self.annotations.iter().filter(|a| a.is_mitosis()).map(|a| a.bbox).collect()
    }

    pub fn from_case(case: &Case, x0: usize, y0: usize, size: usize) -> Result<Self> {
        let image = case.image.crop(x0, y0, size, size)?;
        let annotations = remap_annotations(&case.record.annotations, x0 as f64, y0 as f64, size as f64, size as f64);
        let foreground = label_foreground(&annotations);
        Ok(PatchSample { image, annotations, tumor_label: case.tumor_label, foreground, origin: (x0, y0) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    /// Half the patches centered near a random annotation, half uniform.
    Balanced,
    Uniform,
}

/// Draws `count` square patches from one case.
pub fn sample_patches<R: Rng>(
    case: &Case,
    patch_size: usize,
    count: usize,
    strategy: SamplingStrategy,
    rng: &mut R,
) -> Result<Vec<PatchSample>> {
    let (w, h) = (case.image.width, case.image.height);
    if patch_size == 0 || patch_size > w || patch_size > h {
        return Err(Error::InvalidInput(format!(
            "patch size {patch_size} does not fit the {w}x{h} image of case `{}`",
            case.record.case_id
        )));
    }
    let anns = &case.record.annotations;
    let centered = match strategy {
        SamplingStrategy::Balanced if !anns.is_empty() => count.div_ceil(2),
        _ => 0,
    };
    let max_x = (w - patch_size) as i64;
    let max_y = (h - patch_size) as i64;
    let jitter = (patch_size / 4) as i64;

    let mut patches = Vec::with_capacity(count);
    for i in 0..count {
        let (x0, y0) = if i < centered {
            let ann = &anns[rng.random_range(0..anns.len())];
            let (cx, cy) = ann.bbox.center();
            let jx = rng.random_range(-jitter..=jitter);
            let jy = rng.random_range(-jitter..=jitter);
            let x0 = (cx.round() as i64 - (patch_size / 2) as i64 + jx).clamp(0, max_x);
            let y0 = (cy.round() as i64 - (patch_size / 2) as i64 + jy).clamp(0, max_y);
            (x0 as usize, y0 as usize)
        } else {
            (rng.random_range(0..=max_x) as usize, rng.random_range(0..=max_y) as usize)
        };
        patches.push(PatchSample::from_case(case, x0, y0, patch_size)?);
    }
    Ok(patches)
}

/// Holds out every record of one tumor type.
pub fn split_leave_one_tumor_out<T: AsRef<CaseRecord> + Clone>(records: &[T], held_out: &str) -> Result<(Vec<T>, Vec<T>)> {
    let (test, train): (Vec<T>, Vec<T>) = records.iter().cloned().partition(|r| r.as_ref().tumor_type == held_out);
    if test.is_empty() {
        return Err(Error::Dataset(format!("no records of held-out tumor type `{held_out}`")));
    }
    if train.is_empty() {
        return Err(Error::Dataset(format!("holding out `{held_out}` leaves no training records")));
    }
    Ok((train, test))
}

impl AsRef<CaseRecord> for CaseRecord {
    fn as_ref(&self) -> &CaseRecord {
        self
    }
}

impl AsRef<CaseRecord> for Case {
    fn as_ref(&self) -> &CaseRecord {
        &self.record
    }
}

/// Splits off a validation fraction by case. The assignment depends only on
/// the case ids and the seed, not on input order.
pub fn split_validation<T: AsRef<CaseRecord> + Clone>(records: &[T], fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let n_val = (records.len() as f64 * fraction).round() as usize;
    if n_val == 0 || n_val >= records.len() {
        return (records.to_vec(), Vec::new());
    }
    let mut ids: Vec<&str> = records.iter().map(|r| r.as_ref().case_id.as_str()).collect();
    ids.sort_unstable();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val_ids: BTreeSet<&str> = ids.into_iter().take(n_val).collect();
    let (val, train): (Vec<T>, Vec<T>) =
        records.iter().cloned().partition(|r| val_ids.contains(r.as_ref().case_id.as_str()));
    (train, val)
}

/// Rendering parameters of one simulated tumor domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TumorStyle {
    pub name: String,
    pub species: Species,
    pub scanner: Option<String>,
    pub background: [u8; 3],
    pub mitosis: [u8; 3],
    pub hard_negative: [u8; 3],
    /// Mean mitoses per case; 0 for types without mitosis labels.
    pub mitosis_rate: f64,
    pub hard_negative_rate: f64,
}

/// One style per default tumor type. The neuroendocrine domain is darker and
/// browner than the rest so that holding it out is a real color shift.
pub fn default_palette() -> Vec<TumorStyle> {
    let style = |name: &str, species, scanner: Option<&str>, bg, mi, hn, rate| TumorStyle {
        name: name.to_string(),
        species,
        scanner: scanner.map(str::to_string),
        background: bg,
        mitosis: mi,
        hard_negative: hn,
        mitosis_rate: rate,
        hard_negative_rate: 1.5,
    };
    vec![
        style("canine_lung_cancer", Species::Canine, Some("scanner_a"), [226, 178, 204], [72, 30, 96], [168, 120, 182], 2.5),
        // scanner of breast cases is not known per slide
        style("human_breast_cancer", Species::Human, None, [236, 198, 220], [92, 44, 118], [178, 132, 196], 2.5),
        style("canine_lymphoma", Species::Canine, Some("scanner_b"), [204, 160, 196], [58, 22, 84], [150, 104, 168], 2.5),
        style("human_neuroendocrine_tumor", Species::Human, Some("scanner_c"), [120, 94, 84], [38, 20, 30], [84, 60, 66], 2.5),
        style("canine_cutaneous_mast_cell_tumor", Species::Canine, Some("scanner_a"), [232, 170, 188], [84, 26, 72], [170, 114, 156], 2.5),
        // no mitosis labels exist for melanoma
        style("human_melanoma", Species::Human, Some("scanner_d"), [210, 176, 174], [76, 46, 58], [158, 124, 128], 0.0),
    ]
}

#[derive(Debug, Clone)]
pub struct SyntheticCase {
    pub record: CaseRecord,
    pub image: image::RgbImage,
}

impl SyntheticCase {
    pub fn to_case(&self, class_names: &[String]) -> Result<Case> {
        let tumor_label = class_index(class_names, &self.record.tumor_type)
            .ok_or_else(|| record_err(&self.record.case_id, "tumor type not in class list"))?;
        Ok(Case { record: self.record.clone(), image: Image::from_rgb8(&self.image), tumor_label })
    }
}

fn shade(base: [u8; 3], factor: f64, noise: f64) -> [u8; 3] {
    base.map(|c| (c as f64 * factor + noise).round().clamp(0.0, 255.0) as u8)
}

/// Renders `n_cases` tiles. Case `i` gets style `i % palette.len()`. Each tile
/// has a textured background, dark elliptical mitoses (annotated as mitotic
/// figures) and lighter ellipses (annotated as hard negatives). Ellipses are
/// axis-aligned and do not overlap, so every annotation box is exact.
pub fn generate_synthetic_dataset<R: Rng>(
    n_cases: usize,
    image_size: usize,
    palette: &[TumorStyle],
    rng: &mut R,
) -> Result<Vec<SyntheticCase>> {
    if n_cases == 0 {
        return Err(Error::InvalidInput("n_cases must be at least 1".into()));
    }
    if palette.is_empty() {
        return Err(Error::InvalidInput("palette must not be empty".into()));
    }
    if image_size < 32 {
        return Err(Error::InvalidInput(format!("image size {image_size} is below the 32 px minimum")));
    }
    let size = image_size as f64;
    let mut out = Vec::with_capacity(n_cases);
    for i in 0..n_cases {
        let style = &palette[i % palette.len()];
        // per-case stain intensity variation
        let stain: f64 = rng.random_range(0.93..1.07);
        let mut img = image::RgbImage::new(image_size as u32, image_size as u32);
        let phase: (f64, f64) = (rng.random_range(0.0..6.3), rng.random_range(0.0..6.3));
        for (x, y, px) in img.enumerate_pixels_mut() {
            let wave = 6.0 * ((x as f64 * 0.11 + phase.0).sin() + (y as f64 * 0.09 + phase.1).cos());
            let noise = rng.random_range(-8.0..8.0);
            *px = image::Rgb(shade(style.background, stain, wave + noise));
        }

        let n_mitoses = sample_count(style.mitosis_rate, rng)?;
        let n_hard = sample_count(style.hard_negative_rate, rng)?;
        let mut placed: Vec<(f64, f64, f64, f64)> = Vec::new();
        let mut annotations = Vec::new();
        for k in 0..n_mitoses + n_hard {
            let mitosis = k < n_mitoses;
            let (rx, ry) = if mitosis {
                (rng.random_range(8.0..12.0), rng.random_range(8.0..12.0))
            } else {
                (rng.random_range(7.0..11.0), rng.random_range(7.0..11.0))
            };
            let spot = (0..50).find_map(|_| {
                let cx = rng.random_range(rx + 1.0..size - rx - 1.0);
                let cy = rng.random_range(ry + 1.0..size - ry - 1.0);
                let free = placed.iter().all(|&(px, py, prx, pry)| {
                    (cx - px).abs() > rx + prx + 2.0 || (cy - py).abs() > ry + pry + 2.0
                });
                free.then_some((cx, cy))
            });
            let Some((cx, cy)) = spot else { continue };
            placed.push((cx, cy, rx, ry));
            let color = if mitosis { style.mitosis } else { style.hard_negative };
            draw_ellipse(&mut img, cx, cy, rx, ry, color, stain, rng);
            let bbox = BBox::new(cx - rx, cy - ry, cx + rx, cy + ry)?;
            annotations.push(if mitosis { Annotation::mitosis(bbox) } else { Annotation::hard_negative(bbox) });
        }

        let case_id = format!("case_{i:04}");
        let record = CaseRecord {
            image: PathBuf::from(format!("images/{case_id}.png")),
            case_id,
            tumor_type: style.name.clone(),
            species: style.species,
            scanner: style.scanner.clone(),
            annotations,
        };
        out.push(SyntheticCase { record, image: img });
    }
    Ok(out)
}

fn sample_count<R: Rng>(rate: f64, rng: &mut R) -> Result<usize> {
    if rate <= 0.0 {
        return Ok(0);
    }
    let poisson = Poisson::new(rate).map_err(|e| Error::InvalidInput(format!("rate {rate}: {e}")))?;
    Ok(poisson.sample(rng) as usize)
}

#[allow(clippy::too_many_arguments)]
fn draw_ellipse<R: Rng>(
    img: &mut image::RgbImage,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    color: [u8; 3],
    stain: f64,
    rng: &mut R,
) {
    let x_lo = (cx - rx).floor().max(0.0) as u32;
    let x_hi = ((cx + rx).ceil() as u32).min(img.width());
    let y_lo = (cy - ry).floor().max(0.0) as u32;
    let y_hi = ((cy + ry).ceil() as u32).min(img.height());
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let u = (x as f64 + 0.5 - cx) / rx;
            let v = (y as f64 + 0.5 - cy) / ry;
            if u * u + v * v <= 1.0 {
                let noise = rng.random_range(-10.0..10.0);
                img.put_pixel(x, y, image::Rgb(shade(color, stain, noise)));
            }
        }
    }
}

/// Writes images under `out_dir/images/` and the manifest at `out_dir/manifest.json`.
pub fn write_synthetic_dataset(out_dir: &Path, cases: &[SyntheticCase]) -> Result<PathBuf> {
    fs::create_dir_all(out_dir.join("images"))?;
    for case in cases {
        case.image.save(out_dir.join(&case.record.image))?;
    }
    let records: Vec<CaseRecord> = cases.iter().map(|c| c.record.clone()).collect();
    let manifest = out_dir.join("manifest.json");
    save_manifest(&manifest, &records)?;
    Ok(manifest)
}

/// SHA-256 over the canonical JSON of the records followed by each image's
/// dimensions and raw RGB bytes.
pub fn dataset_hash(cases: &[SyntheticCase]) -> Result<String> {
    let mut hasher = Sha256::new();
    let records: Vec<&CaseRecord> = cases.iter().map(|c| &c.record).collect();
    hasher.update(serde_json::to_vec(&records)?);
    for case in cases {
        hasher.update(case.image.width().to_le_bytes());
        hasher.update(case.image.height().to_le_bytes());
        hasher.update(case.image.as_raw());
    }
    Ok(hex::encode(hasher.finalize()))
}
