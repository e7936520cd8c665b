//! Synthetic weakly supervised detection datasets and their JSON-lines file
//! format.
//!
//! Each image plants a few objects and emits a fixed budget of proposals:
//! jittered copies of each object at graded IoU levels, part boxes lying
//! inside an object, and random background boxes. Raw proposal features mix
//! two class-specific signals plus Gaussian noise:
//!
//! * the class prototype scaled by the proposal's max IoU with objects of
//!   that class, and
//! * an orthogonal "part" prototype scaled by how much the proposal zooms
//!   into an object (fraction of the proposal inside the object times the
//!   fraction of the object it misses).
//!
//! The second signal peaks on part boxes, so a detector that only has to
//! classify images is drawn to parts rather than whole objects.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{PclError, Result};
use crate::geometry::{iou, BBox};
use crate::metrics::{GroundTruth, GtObject};
use crate::model::write_atomic;

pub const DATASET_SCHEMA: &str = "pcl-dataset";
pub const DATASET_VERSION: u32 = 1;

const MAX_RETRIES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub num_images: usize,
    pub classes: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Proposals per image.
    pub proposals: usize,
    pub d_raw: usize,
    /// Standard deviation of the additive feature noise.
    pub noise: f64,
    pub seed: u64,
    /// Selects an independent set of images drawn with the same class
    /// prototypes, so train and test splits share one feature space.
    pub split: u64,
    pub canvas: f64,
    /// Object side length range, in canvas units.
    pub object_size: (f64, f64),
    /// Jittered whole-object proposals per object.
    pub jitter_per_object: usize,
    /// Lower IoU bound of the loosest jittered copy.
    pub jitter_min_iou: f64,
    /// Part proposals per object.
    pub parts_per_object: usize,
    /// IoU band between a part proposal and its parent object.
    pub part_iou: (f64, f64),
    /// Gain of the whole-object prototype signal.
    pub object_gain: f64,
    /// Gain of the part prototype signal.
    pub part_gain: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_images: 100,
            classes: 4,
            objects_min: 1,
            objects_max: 3,
            proposals: 60,
            d_raw: 16,
            noise: 0.3,
            seed: 0,
            split: 0,
            canvas: 100.0,
            object_size: (20.0, 45.0),
            jitter_per_object: 8,
            jitter_min_iou: 0.4,
            parts_per_object: 2,
            part_iou: (0.3, 0.49),
            object_gain: 1.0,
            part_gain: 1.4,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(PclError::Config(m));
        if self.classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.proposals < 20 {
            return fail(format!("need at least 20 proposals per image, got {}", self.proposals));
        }
        if self.d_raw < 2 * self.classes {
            return fail(format!(
                "raw feature width {} too small for {} classes (need {})",
                self.d_raw,
                self.classes,
                2 * self.classes
            ));
        }
        if self.objects_min == 0 || self.objects_min > self.objects_max {
            return fail(format!("bad object count range {}..={}", self.objects_min, self.objects_max));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail(format!("noise level {} must be non-negative", self.noise));
        }
        let (lo, hi) = self.object_size;
        if !(lo > 0.0 && lo <= hi && hi < self.canvas) {
            return fail(format!("object size range {lo}..{hi} does not fit canvas {}", self.canvas));
        }
        if !(self.jitter_min_iou > 0.0 && self.jitter_min_iou <= 0.75) {
            return fail(format!("loosest jitter IoU {} not in (0, 0.75]", self.jitter_min_iou));
        }
        let (plo, phi) = self.part_iou;
        if !(plo > 0.0 && plo < phi && phi < 0.5) {
            return fail(format!("part IoU band {plo}..{phi} must lie inside (0, 0.5)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema: String,
    pub version: u32,
    pub seed: u64,
    pub classes: usize,
    pub d_raw: usize,
    pub num_images: usize,
    /// Generator settings, when the dataset is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GenConfig>,
    /// Object prototypes followed by part prototypes.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prototypes: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: u64,
    pub width: f64,
    pub height: f64,
    /// Positive 1-based class ids, ascending.
    pub labels: Vec<usize>,
    pub proposals: Vec<BBox>,
    pub features: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub header: DatasetHeader,
    pub images: Vec<ImageRecord>,
    /// Kept apart from `images`; never reaches the trainer.
    pub groundtruth: Vec<GroundTruth>,
}

/// What the trainer sees of an image: tags, boxes and features only.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainImage {
    pub image_id: u64,
    pub labels: Vec<usize>,
    pub proposals: Vec<BBox>,
    pub features: Array2<f64>,
}

impl ImageRecord {
    pub fn feature_matrix(&self) -> Array2<f64> {
        let cols = self.features.first().map_or(0, Vec::len);
        Array2::from_shape_fn((self.features.len(), cols), |(r, c)| self.features[r][c])
    }

    pub fn to_train_image(&self) -> TrainImage {
        TrainImage {
            image_id: self.image_id,
            labels: self.labels.clone(),
            proposals: self.proposals.clone(),
            features: self.feature_matrix(),
        }
    }
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.header.classes
    }

    /// Images with groundtruth stripped.
    pub fn training_view(&self) -> Vec<TrainImage> {
        self.images.iter().map(ImageRecord::to_train_image).collect()
    }

    pub fn has_groundtruth(&self) -> bool {
        !self.groundtruth.is_empty() || self.images.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Header(DatasetHeader),
    Image(ImageRecord),
    Groundtruth(GroundTruth),
}

fn orthonormal_prototypes(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        for u in &out {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            out.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    out
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Clips to the canvas; `None` if the result is degenerate.
fn clipped(x1: f64, y1: f64, x2: f64, y2: f64, canvas: f64) -> Option<BBox> {
    let (x1, y1) = (x1.max(0.0), y1.max(0.0));
    let (x2, y2) = (x2.min(canvas), y2.min(canvas));
    if x2 - x1 < 1.0 || y2 - y1 < 1.0 {
        return None;
    }
    BBox::new(x1, y1, x2, y2).ok()
}

/// Rejection-samples a perturbed copy of `obj` with IoU in `[lo, hi)`.
fn jittered<R: Rng>(rng: &mut R, obj: &BBox, lo: f64, hi: f64, canvas: f64) -> Option<BBox> {
    // looser jitter for lower target IoU
    let spread = 0.5 * (1.0 - lo) + 0.05;
    for _ in 0..MAX_RETRIES {
        let (w, h) = (obj.width(), obj.height());
        let dx1 = uniform(rng, -spread, spread) * w;
        let dx2 = uniform(rng, -spread, spread) * w;
        let dy1 = uniform(rng, -spread, spread) * h;
        let dy2 = uniform(rng, -spread, spread) * h;
        if let Some(b) = clipped(obj.x1() + dx1, obj.y1() + dy1, obj.x2() + dx2, obj.y2() + dy2, canvas) {
            let v = iou(&b, obj);
            if v >= lo && v < hi {
                return Some(b);
            }
        }
    }
    None
}

/// A sub-box of `obj` whose area fraction (= IoU with `obj`) lies in the band.
fn part_box<R: Rng>(rng: &mut R, obj: &BBox, lo: f64, hi: f64) -> Option<BBox> {
    for _ in 0..MAX_RETRIES {
        let fw = uniform(rng, lo.sqrt() * 0.6, 1.0);
        let fh = uniform(rng, lo / fw, (hi / fw).min(1.0));
        let (w, h) = (obj.width() * fw, obj.height() * fh);
        let x1 = obj.x1() + uniform(rng, 0.0, obj.width() - w);
        let y1 = obj.y1() + uniform(rng, 0.0, obj.height() - h);
        if let Ok(b) = BBox::new(x1, y1, x1 + w, y1 + h) {
            let v = iou(&b, obj);
            if v >= lo && v <= hi {
                return Some(b);
            }
        }
    }
    None
}

/// Fraction of `proposal` inside `obj` times the fraction of `obj` left out:
/// high for boxes zoomed into an object, low for whole-object boxes.
pub fn part_signal(proposal: &BBox, obj: &BBox) -> f64 {
    let inter = proposal.intersection(obj);
    if inter == 0.0 {
        return 0.0;
    }
    let inside = inter / proposal.area();
    let missed = 1.0 - inter / obj.area();
    inside * missed
}

/// Deterministic synthetic dataset.
pub fn generate_synthetic(config: &GenConfig) -> Result<DatasetManifest> {
    config.validate()?;
    let mut proto_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let prototypes = orthonormal_prototypes(2 * config.classes, config.d_raw, &mut proto_rng);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(config.split + 1);
    let noise = Normal::new(0.0, config.noise.max(f64::MIN_POSITIVE)).expect("finite noise");

    let mut images = Vec::with_capacity(config.num_images);
    let mut groundtruth = Vec::with_capacity(config.num_images);
    for image_id in 0..config.num_images as u64 {
        let objects = plant_objects(config, &mut rng)
            .ok_or_else(|| PclError::Data(format!("image {image_id}: could not place objects")))?;
        let mut proposals = object_proposals(config, &objects, &mut rng)
            .ok_or_else(|| PclError::Data(format!("image {image_id}: could not sample proposals")))?;
        while proposals.len() < config.proposals {
            let w = uniform(&mut rng, 8.0, config.canvas * 0.6);
            let h = uniform(&mut rng, 8.0, config.canvas * 0.6);
            let x = uniform(&mut rng, 0.0, config.canvas - w);
            let y = uniform(&mut rng, 0.0, config.canvas - h);
            if let Some(b) = clipped(x, y, x + w, y + h, config.canvas) {
                proposals.push(b);
            }
        }
        proposals.shuffle(&mut rng);

        let features = proposals
            .iter()
            .map(|p| {
                let mut f = vec![0.0; config.d_raw];
                for c in 1..=config.classes {
                    let mut best_iou = 0.0f64;
                    let mut best_part = 0.0f64;
                    for o in objects.iter().filter(|o| o.class_id == c) {
                        best_iou = best_iou.max(iou(p, &o.bbox));
                        best_part = best_part.max(part_signal(p, &o.bbox));
                    }
                    let (obj, part) = (&prototypes[c - 1], &prototypes[config.classes + c - 1]);
                    for j in 0..config.d_raw {
                        f[j] += config.object_gain * best_iou * obj[j] + config.part_gain * best_part * part[j];
                    }
                }
                if config.noise > 0.0 {
                    f.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
                }
                f
            })
            .collect();

        let mut labels: Vec<usize> = objects.iter().map(|o| o.class_id).collect();
        labels.sort_unstable();
        labels.dedup();
        images.push(ImageRecord {
            image_id,
            width: config.canvas,
            height: config.canvas,
            labels,
            proposals,
            features,
        });
        groundtruth.push(GroundTruth { image_id, objects });
    }

    Ok(DatasetManifest {
        header: DatasetHeader {
            schema: DATASET_SCHEMA.into(),
            version: DATASET_VERSION,
            seed: config.seed,
            classes: config.classes,
            d_raw: config.d_raw,
            num_images: config.num_images,
            generator: Some(config.clone()),
            prototypes,
        },
        images,
        groundtruth,
    })
}

fn plant_objects(config: &GenConfig, rng: &mut ChaCha8Rng) -> Option<Vec<GtObject>> {
    let n = rng.gen_range(config.objects_min..=config.objects_max);
    let (lo, hi) = config.object_size;
    let mut objects: Vec<GtObject> = Vec::with_capacity(n);
    let mut tries = 0;
    while objects.len() < n {
        tries += 1;
        if tries > MAX_RETRIES {
            return None;
        }
        let w = uniform(rng, lo, hi);
        let h = uniform(rng, lo, hi);
        let x = uniform(rng, 0.0, config.canvas - w);
        let y = uniform(rng, 0.0, config.canvas - h);
        let bbox = BBox::new(x, y, x + w, y + h).ok()?;
        if objects.iter().any(|o| iou(&o.bbox, &bbox) > 0.1) {
            continue;
        }
        let class_id = rng.gen_range(1..=config.classes);
        objects.push(GtObject { bbox, class_id });
    }
    Some(objects)
}

fn object_proposals(config: &GenConfig, objects: &[GtObject], rng: &mut ChaCha8Rng) -> Option<Vec<BBox>> {
    // leave at least a quarter of the budget for background boxes
    let budget = (config.proposals * 3 / 4) / objects.len();
    let parts = config.parts_per_object.min(budget / 3);
    let jitter = config.jitter_per_object.min(budget.saturating_sub(parts)).max(1);
    let (plo, phi) = config.part_iou;
    let mut out = Vec::new();
    for o in objects {
        for i in 0..jitter {
            // graded levels from near-exact down to loose; the first is
            // always above 0.7 so every object is covered
            let (lo, hi) = match i {
                0 => (0.75, 1.0),
                _ => {
                    let t = (i - 1) as f64 / (jitter.max(2) - 1) as f64;
                    let lo = 0.85 - (0.85 - config.jitter_min_iou) * t;
                    (lo, lo + 0.15)
                }
            };
            out.push(jittered(rng, &o.bbox, lo, hi, config.canvas)?);
        }
        for _ in 0..parts {
            out.push(part_box(rng, &o.bbox, plo, phi)?);
        }
    }
    Some(out)
}

impl DatasetManifest {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&Line::Header(self.header.clone()))?;
        out.push('\n');
        for img in &self.images {
            out.push_str(&serde_json::to_string(&Line::Image(img.clone()))?);
            out.push('\n');
        }
        for gt in &self.groundtruth {
            out.push_str(&serde_json::to_string(&Line::Groundtruth(gt.clone()))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut header: Option<DatasetHeader> = None;
        let mut images = Vec::new();
        let mut groundtruth = Vec::new();
        let mut last_line = 0;
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            last_line = line_no;
            let line = line.map_err(|e| PclError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| PclError::Parse { line: line_no, message };
            let record: Line = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            match (record, &header) {
                (Line::Header(h), None) => {
                    if h.schema != DATASET_SCHEMA {
                        return Err(parse_err(format!("unknown schema {:?}", h.schema)));
                    }
                    if h.version != DATASET_VERSION {
                        return Err(PclError::Version {
                            what: "dataset",
                            found: h.version,
                            expected: DATASET_VERSION,
                        });
                    }
                    header = Some(h);
                }
                (Line::Header(_), Some(_)) => return Err(parse_err("duplicate header".into())),
                (_, None) => return Err(parse_err("first record must be the header".into())),
                (Line::Image(img), Some(h)) => {
                    if !groundtruth.is_empty() {
                        return Err(parse_err("image record after groundtruth section".into()));
                    }
                    validate_image(&img, h).map_err(parse_err)?;
                    images.push(img);
                }
                (Line::Groundtruth(gt), Some(h)) => {
                    let idx = groundtruth.len();
                    match images.get(idx) {
                        Some(img) if img.image_id == gt.image_id => {}
                        _ => return Err(parse_err(format!("groundtruth for unexpected image {}", gt.image_id))),
                    }
                    if let Some(o) = gt.objects.iter().find(|o| o.class_id == 0 || o.class_id > h.classes) {
                        return Err(parse_err(format!("groundtruth class {} out of range", o.class_id)));
                    }
                    groundtruth.push(gt);
                }
            }
        }
        let header = header.ok_or(PclError::Parse {
            line: last_line + 1,
            message: "missing header".into(),
        })?;
        if images.len() != header.num_images {
            return Err(PclError::Parse {
                line: last_line + 1,
                message: format!("expected {} image records, found {}", header.num_images, images.len()),
            });
        }
        if !groundtruth.is_empty() && groundtruth.len() != images.len() {
            return Err(PclError::Parse {
                line: last_line + 1,
                message: format!(
                    "groundtruth section has {} records for {} images",
                    groundtruth.len(),
                    images.len()
                ),
            });
        }
        Ok(DatasetManifest {
            header,
            images,
            groundtruth,
        })
    }
}

fn validate_image(img: &ImageRecord, h: &DatasetHeader) -> std::result::Result<(), String> {
    if img.proposals.is_empty() {
        return Err(format!("image {} has no proposals", img.image_id));
    }
    if img.features.len() != img.proposals.len() {
        return Err(format!(
            "image {}: {} feature rows for {} proposals",
            img.image_id,
            img.features.len(),
            img.proposals.len()
        ));
    }
    if let Some(row) = img.features.iter().find(|r| r.len() != h.d_raw) {
        return Err(format!("image {}: feature row of width {} (expected {})", img.image_id, row.len(), h.d_raw));
    }
    if img.features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(format!("image {}: non-finite feature", img.image_id));
    }
    if let Some(c) = img.labels.iter().find(|&&c| c == 0 || c > h.classes) {
        return Err(format!("image {}: label {c} out of range 1..={}", img.image_id, h.classes));
    }
    Ok(())
}

pub fn save_dataset(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    write_atomic(path, manifest.to_jsonl()?.as_bytes())
}

pub fn load_dataset(path: &Path) -> Result<DatasetManifest> {
    let file = fs::File::open(path).map_err(|e| PclError::io(path, e))?;
    DatasetManifest::from_jsonl(BufReader::new(file))
}
