//! Test-time detection and evaluation: per-class average precision at
//! IoU > 0.5, mAP and CorLoc.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{DatasetManifest, TrainImage};
use crate::error::{PclError, Result};
use crate::geometry::{iou, nms, rank_by_score, BBox, Detection};
use crate::model::{forward_all, ModelParams, StreamOutputs};

/// IoU a detection needs with a groundtruth box to count as correct.
pub const MATCH_IOU: f64 = 0.5;

pub const DEFAULT_NMS_THRESHOLD: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(rename = "class")]
    pub class_id: usize,
}

/// Groundtruth of one image. Only evaluation code reads this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: u64,
    pub objects: Vec<GtObject>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// A detection tagged with the image it belongs to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageDetection {
    pub image_id: u64,
    pub detection: Detection,
}

/// One line of a detections JSON-lines file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub class_id: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
}

impl From<ImageDetection> for DetectionRecord {
    fn from(d: ImageDetection) -> Self {
        let b = d.detection.bbox;
        DetectionRecord {
            image_id: d.image_id,
            class_id: d.detection.class_id,
            x1: b.x1(),
            y1: b.y1(),
            x2: b.x2(),
            y2: b.y2(),
            score: d.detection.score,
        }
    }
}

impl TryFrom<DetectionRecord> for ImageDetection {
    type Error = PclError;

    fn try_from(r: DetectionRecord) -> Result<Self> {
        if !r.score.is_finite() {
            return Err(PclError::Data(format!("non-finite score for image {}", r.image_id)));
        }
        Ok(ImageDetection {
            image_id: r.image_id,
            detection: Detection {
                bbox: BBox::new(r.x1, r.y1, r.x2, r.y2)?,
                class_id: r.class_id,
                score: r.score,
            },
        })
    }
}

/// Per-proposal class scores used at test time, `C x R`: the mean of the
/// refined streams' object rows, or the basic stream when there are none.
pub fn test_scores(outputs: &StreamOutputs) -> Array2<f64> {
    if outputs.refined.is_empty() {
        return outputs.basic.scores.values().clone();
    }
    let k = outputs.refined.len() as f64;
    let mut acc = outputs.refined[0].object_scores().to_owned();
    for s in &outputs.refined[1..] {
        acc += &s.object_scores();
    }
    acc / k
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectOutput {
    pub detections: Vec<Detection>,
    /// Set when the model has no refined stream and basic scores were used.
    pub basic_fallback: bool,
}

/// Scores every proposal for every class and applies per-class NMS.
pub fn detect(image: &TrainImage, params: &ModelParams, nms_threshold: f64) -> Result<DetectOutput> {
    if image.features.nrows() != image.proposals.len() {
        return Err(PclError::Data(format!(
            "image {}: {} feature rows for {} proposals",
            image.image_id,
            image.features.nrows(),
            image.proposals.len()
        )));
    }
    let outputs = forward_all(image.features.clone(), params)?;
    let scores = test_scores(&outputs);
    let mut detections = Vec::new();
    for (c, row) in scores.rows().into_iter().enumerate() {
        let dets: Vec<Detection> = row
            .iter()
            .zip(&image.proposals)
            .map(|(&score, &bbox)| Detection {
                bbox,
                class_id: c + 1,
                score,
            })
            .collect();
        detections.extend(nms(&dets, nms_threshold));
    }
    Ok(DetectOutput {
        detections,
        basic_fallback: outputs.refined.is_empty(),
    })
}

/// Precision/recall after each detection, ranked by score.
///
/// Each detection claims the highest-IoU still-unmatched groundtruth box of
/// its class in its image when that IoU exceeds [`MATCH_IOU`].
pub fn pr_curve(dets: &[ImageDetection], gts: &[GroundTruth], class_id: usize) -> (Vec<PrPoint>, usize) {
    let gt_boxes = |image_id: u64| -> Vec<BBox> {
        gts.iter()
            .filter(|g| g.image_id == image_id)
            .flat_map(|g| g.objects.iter())
            .filter(|o| o.class_id == class_id)
            .map(|o| o.bbox)
            .collect()
    };
    let total: usize = gts
        .iter()
        .map(|g| g.objects.iter().filter(|o| o.class_id == class_id).count())
        .sum();

    let mine: Vec<&ImageDetection> = dets.iter().filter(|d| d.detection.class_id == class_id).collect();
    let order = rank_by_score(mine.iter().map(|d| d.detection.score));
    let mut matched: std::collections::HashMap<u64, (Vec<BBox>, Vec<bool>)> = std::collections::HashMap::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(order.len());
    for i in order {
        let d = mine[i];
        let (boxes, used) = matched.entry(d.image_id).or_insert_with(|| {
            let b = gt_boxes(d.image_id);
            let n = b.len();
            (b, vec![false; n])
        });
        let mut best: Option<(usize, f64)> = None;
        for (g, b) in boxes.iter().enumerate() {
            if used[g] {
                continue;
            }
            let v = iou(&d.detection.bbox, b);
            if best.map_or(true, |(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, v)) if v > MATCH_IOU => {
                used[g] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        curve.push(PrPoint {
            recall: if total > 0 { tp as f64 / total as f64 } else { 0.0 },
            precision: tp as f64 / (tp + fp) as f64,
        });
    }
    (curve, total)
}

/// Area under the all-points interpolated precision/recall curve.
pub fn area_under_curve(curve: &[PrPoint]) -> f64 {
    let mut recall = vec![0.0];
    let mut precision = vec![0.0];
    for p in curve {
        recall.push(p.recall);
        precision.push(p.precision);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    for i in 0..recall.len() - 1 {
        if recall[i + 1] != recall[i] {
            ap += (recall[i + 1] - recall[i]) * precision[i + 1];
        }
    }
    ap
}

/// Average precision for one class; `None` when it has no groundtruth.
pub fn average_precision(dets: &[ImageDetection], gts: &[GroundTruth], class_id: usize) -> Option<f64> {
    let (curve, total) = pr_curve(dets, gts, class_id);
    if total == 0 {
        return None;
    }
    Some(area_under_curve(&curve))
}

/// One positive image for a class: its top-scoring box for that class and
/// the class's groundtruth boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct CorLocCase {
    pub top: Option<BBox>,
    pub groundtruth: Vec<BBox>,
}

/// Fraction of positive images whose top box overlaps some groundtruth box
/// of the class at IoU > 0.5; `None` without positive images.
pub fn corloc(cases: &[CorLocCase]) -> Option<f64> {
    if cases.is_empty() {
        return None;
    }
    let hits = cases
        .iter()
        .filter(|c| {
            c.top
                .map_or(false, |t| c.groundtruth.iter().any(|g| iou(&t, g) > MATCH_IOU))
        })
        .count();
    Some(hits as f64 / cases.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub num_groundtruth: usize,
    pub num_positive_images: usize,
    pub ap: Option<f64>,
    pub corloc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<ClassMetrics>,
    pub map: Option<f64>,
    pub mean_corloc: Option<f64>,
    pub basic_fallback: bool,
    pub warnings: Vec<String>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Scores a set of detections against a dataset's groundtruth. CorLoc uses
/// the single best detection per positive image and class.
pub fn evaluate_detections(dets: &[ImageDetection], manifest: &DatasetManifest) -> Result<MetricsReport> {
    if !manifest.has_groundtruth() {
        return Err(PclError::Data("dataset has no groundtruth section".into()));
    }
    let gts = &manifest.groundtruth;
    let mut classes = Vec::new();
    let mut warnings = Vec::new();
    for c in 1..=manifest.num_classes() {
        let ap = average_precision(dets, gts, c);
        let cases: Vec<CorLocCase> = manifest
            .images
            .iter()
            .zip(gts)
            .filter(|(img, _)| img.labels.contains(&c))
            .map(|(img, gt)| {
                let mut top: Option<&Detection> = None;
                for d in dets.iter().filter(|d| d.image_id == img.image_id && d.detection.class_id == c) {
                    if top.map_or(true, |t| d.detection.score > t.score) {
                        top = Some(&d.detection);
                    }
                }
                CorLocCase {
                    top: top.map(|t| t.bbox),
                    groundtruth: gt.objects.iter().filter(|o| o.class_id == c).map(|o| o.bbox).collect(),
                }
            })
            .collect();
        let cl = corloc(&cases);
        if ap.is_none() {
            warnings.push(format!("class {c}: no groundtruth, AP undefined"));
        }
        if cl.is_none() {
            warnings.push(format!("class {c}: no positive images, CorLoc undefined"));
        }
        classes.push(ClassMetrics {
            class_id: c,
            num_groundtruth: gts
                .iter()
                .map(|g| g.objects.iter().filter(|o| o.class_id == c).count())
                .sum(),
            num_positive_images: cases.len(),
            ap,
            corloc: cl,
        });
    }
    Ok(MetricsReport {
        map: mean(classes.iter().filter_map(|c| c.ap)),
        mean_corloc: mean(classes.iter().filter_map(|c| c.corloc)),
        classes,
        basic_fallback: false,
        warnings,
    })
}

/// Runs detection over every image of `manifest` and scores the result.
pub fn evaluate(
    params: &ModelParams,
    manifest: &DatasetManifest,
    nms_threshold: f64,
) -> Result<(MetricsReport, Vec<ImageDetection>)> {
    let dims = params.dims();
    if dims.classes != manifest.num_classes() || dims.d_raw != manifest.header.d_raw {
        return Err(PclError::Config(format!(
            "model expects {} classes / {} raw features, dataset has {} / {}",
            dims.classes,
            dims.d_raw,
            manifest.num_classes(),
            manifest.header.d_raw
        )));
    }
    let per_image: Vec<(u64, DetectOutput)> = manifest
        .images
        .par_iter()
        .map(|img| Ok((img.image_id, detect(&img.to_train_image(), params, nms_threshold)?)))
        .collect::<Result<_>>()?;
    let fallback = per_image.iter().any(|(_, o)| o.basic_fallback);
    let dets: Vec<ImageDetection> = per_image
        .into_iter()
        .flat_map(|(image_id, out)| {
            out.detections
                .into_iter()
                .map(move |detection| ImageDetection { image_id, detection })
        })
        .collect();
    let mut report = evaluate_detections(&dets, manifest)?;
    report.basic_fallback = fallback;
    if fallback {
        report
            .warnings
            .push("model has no refined stream; basic MIL scores used".into());
    }
    Ok((report, dets))
}
