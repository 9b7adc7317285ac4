//! Detect-then-classify: sliding-window proposals, per-region classification
//! with the whole-image model, non-maximum suppression and matching against
//! annotated regions.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{normalize_batch, resize_bilinear, CorpusError, CorpusManifest, ImageRecord};
use crate::eval::EVAL_BATCH;
use crate::geometry::{iou, Rect};
use crate::model::{Model, ModelError};
use crate::taxonomy::ClassId;
use crate::tensor::Real;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("at least one window scale is required")]
    NoScales,
    #[error("window scale must be >= 1")]
    ZeroScale,
    #[error("stride fraction must be in (0, 1], got {0}")]
    BadStride(f64),
    #[error("threshold {name} must be in [0, 1], got {value}")]
    BadThreshold { name: &'static str, value: f64 },
    #[error("{detections} detection lists for {truths} ground-truth lists")]
    LengthMismatch { detections: usize, truths: usize },
    #[error("regions: {0}")]
    Json(#[from] serde_json::Error),
    #[error("regions io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, DetectError>;

/// Axis-aligned region in pixels.
pub type Region = Rect;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub region: Region,
    pub class: ClassId,
    /// Largest softmax probability of the region crop.
    pub score: f64,
    /// Index of the proposal this came from; breaks score ties.
    pub proposal: usize,
}

/// Sliding windows of each scale over a `width`×`height` image, ordered by
/// (scale, row, column). Windows larger than the image are clipped to it.
/// The last window of a row or column is aligned to the image edge when
/// the stride does not land there.
pub fn propose_regions(width: usize, height: usize, scales: &[usize], stride_fraction: f64) -> Result<Vec<Region>> {
    if scales.is_empty() {
        return Err(DetectError::NoScales);
    }
    if !(stride_fraction > 0.0 && stride_fraction <= 1.0) {
        return Err(DetectError::BadStride(stride_fraction));
    }
    let mut out = Vec::new();
    for &scale in scales {
        if scale == 0 {
            return Err(DetectError::ZeroScale);
        }
        let (ww, wh) = (scale.min(width), scale.min(height));
        let stride = ((stride_fraction * scale as f64).round() as usize).max(1);
        let ys = positions(height, wh, stride);
        let xs = positions(width, ww, stride);
        for &y in &ys {
            for &x in &xs {
                out.push(Rect::new(x, y, ww, wh));
            }
        }
    }
    Ok(out)
}

fn positions(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    let last = extent - window;
    let mut v: Vec<usize> = (0..=last).step_by(stride).collect();
    if v.last() != Some(&last) {
        v.push(last);
    }
    v
}

/// Detections plus the regions skipped because their crop was empty.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Classified {
    pub detections: Vec<Detection>,
    /// Indices of skipped regions.
    pub skipped: Vec<usize>,
}

/// Crops each region, resizes it to the model input and classifies it.
pub fn classify_regions<T: Real>(model: &Model<T>, image: &ImageRecord, regions: &[Region]) -> Result<Classified> {
    let (_, h, w) = model.arch().input_size;
    let mut out = Classified::default();
    let mut crops = Vec::new();
    for (i, r) in regions.iter().enumerate() {
        match r.clip(image.width(), image.height()) {
            Some(c) if !c.is_empty() => {
                let crop = image.crop(&c).map_err(CorpusError::from)?;
                crops.push((i, c, resize_bilinear(&crop, w, h)));
            }
            _ => out.skipped.push(i),
        }
    }
    for chunk in crops.chunks(EVAL_BATCH) {
        let images: Vec<ImageRecord> = chunk.iter().map(|(_, _, img)| img.clone()).collect();
        let batch = normalize_batch::<T>(&images, &model.normalization)?;
        for ((i, rect, _), (c, p)) in chunk.iter().zip(model.predict(&batch)?) {
            out.detections.push(Detection {
                region: *rect,
                class: ClassId::new(&model.class_names[c]),
                score: p.to_f64_lossy(),
                proposal: *i,
            });
        }
    }
    Ok(out)
}

/// Whole-image classification, the reference for full-frame regions.
pub fn classify_image<T: Real>(model: &Model<T>, image: &ImageRecord) -> Result<(ClassId, f64)> {
    let (_, h, w) = model.arch().input_size;
    let batch = normalize_batch::<T>(&[resize_bilinear(image, w, h)], &model.normalization)?;
    let (c, p) = model.predict(&batch)?[0];
    Ok((ClassId::new(&model.class_names[c]), p.to_f64_lossy()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NmsParams {
    pub iou_threshold: f64,
    pub score_threshold: f64,
    /// Only suppress detections of the same class.
    pub per_class: bool,
}

impl Default for NmsParams {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            score_threshold: 0.3,
            per_class: false,
        }
    }
}

fn check_threshold(name: &'static str, value: f64) -> Result<()> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(DetectError::BadThreshold { name, value })
    }
}

/// Sorts by descending score; equal scores keep proposal order.
fn by_score(dets: &mut [Detection]) {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.proposal.cmp(&b.proposal)));
}

/// Greedy non-maximum suppression. Output is in descending score order.
pub fn nms(detections: &[Detection], params: &NmsParams) -> Result<Vec<Detection>> {
    check_threshold("iou_threshold", params.iou_threshold)?;
    check_threshold("score_threshold", params.score_threshold)?;
    let mut pending: Vec<Detection> = detections
        .iter()
        .filter(|d| d.score >= params.score_threshold)
        .cloned()
        .collect();
    by_score(&mut pending);
    let mut kept: Vec<Detection> = Vec::new();
    for d in pending {
        let suppressed = kept.iter().any(|k| {
            (!params.per_class || k.class == d.class) && iou(&k.region, &d.region) > params.iou_threshold
        });
        if !suppressed {
            kept.push(d);
        }
    }
    Ok(kept)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectParams {
    pub scales: Option<Vec<usize>>,
    pub stride_fraction: f64,
    pub nms: NmsParams,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self {
            scales: None,
            stride_fraction: 0.25,
            nms: NmsParams::default(),
        }
    }
}

/// Proposals, classification and suppression for one image. Without
/// explicit scales the model's input side is used.
pub fn detect_objects<T: Real>(model: &Model<T>, image: &ImageRecord, params: &DetectParams) -> Result<Vec<Detection>> {
    let (_, h, w) = model.arch().input_size;
    let scales = params.scales.clone().unwrap_or_else(|| vec![h.max(w)]);
    let regions = propose_regions(image.width(), image.height(), &scales, params.stride_fraction)?;
    let classified = classify_regions(model, image, &regions)?;
    nms(&classified.detections, &params.nms)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDetectionMetrics {
    pub class: ClassId,
    pub ground_truth: usize,
    pub detections: usize,
    pub true_positives: usize,
    pub precision: f64,
    pub recall: f64,
    /// No detections of this class, so precision is reported as 0.
    pub precision_undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub iou_threshold: f64,
    pub per_class: Vec<ClassDetectionMetrics>,
    pub ground_truth: usize,
    pub detections: usize,
    pub true_positives: usize,
    pub precision: f64,
    pub recall: f64,
    pub precision_undefined: bool,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Greedy matching per image in descending score order. A detection is a
/// true positive when it overlaps an unmatched ground-truth region of the
/// same class with IoU at or above the threshold; the best-overlapping
/// candidate is taken.
pub fn evaluate_detections(
    detections: &[Vec<Detection>],
    truths: &[Vec<(Region, ClassId)>],
    iou_threshold: f64,
) -> Result<DetectionReport> {
    check_threshold("iou_threshold", iou_threshold)?;
    if detections.len() != truths.len() {
        return Err(DetectError::LengthMismatch {
            detections: detections.len(),
            truths: truths.len(),
        });
    }
    // class -> (gt, dets, tp)
    let mut tally: BTreeMap<ClassId, (usize, usize, usize)> = BTreeMap::new();
    for (dets, gts) in detections.iter().zip(truths) {
        for (_, c) in gts {
            tally.entry(c.clone()).or_default().0 += 1;
        }
        let mut order = dets.clone();
        by_score(&mut order);
        let mut matched = vec![false; gts.len()];
        for d in &order {
            let entry = tally.entry(d.class.clone()).or_default();
            entry.1 += 1;
            let best = gts
                .iter()
                .enumerate()
                .filter(|(j, (_, c))| !matched[*j] && *c == d.class)
                .map(|(j, (r, _))| (j, iou(r, &d.region)))
                .filter(|&(_, o)| o >= iou_threshold)
                .fold(None, |acc: Option<(usize, f64)>, cur| match acc {
                    Some(a) if a.1 >= cur.1 => Some(a),
                    _ => Some(cur),
                });
            if let Some((j, _)) = best {
                matched[j] = true;
                entry.2 += 1;
            }
        }
    }
    let per_class: Vec<ClassDetectionMetrics> = tally
        .into_iter()
        .map(|(class, (gt, dets, tp))| ClassDetectionMetrics {
            class,
            ground_truth: gt,
            detections: dets,
            true_positives: tp,
            precision: ratio(tp, dets),
            recall: ratio(tp, gt),
            precision_undefined: dets == 0,
        })
        .collect();
    let gt: usize = per_class.iter().map(|m| m.ground_truth).sum();
    let dets: usize = per_class.iter().map(|m| m.detections).sum();
    let tp: usize = per_class.iter().map(|m| m.true_positives).sum();
    Ok(DetectionReport {
        iou_threshold,
        per_class,
        ground_truth: gt,
        detections: dets,
        true_positives: tp,
        precision: ratio(tp, dets),
        recall: ratio(tp, gt),
        precision_undefined: dets == 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub class: ClassId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    /// Corner list, clockwise from the top-left.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polygon: Option<[(usize, usize); 4]>,
}

impl RegionRecord {
    pub fn rect(&self) -> Rect {
        Rect::new(self.x, self.y, self.w, self.h)
    }
}

impl From<&Detection> for RegionRecord {
    fn from(d: &Detection) -> Self {
        let r = d.region;
        Self {
            x: r.x,
            y: r.y,
            w: r.w,
            h: r.h,
            class: d.class.clone(),
            score: Some(d.score),
            polygon: Some(r.polygon()),
        }
    }
}

/// One line of a region file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRegions {
    pub image: String,
    pub regions: Vec<RegionRecord>,
}

impl ImageRegions {
    pub fn from_detections(image: impl Into<String>, detections: &[Detection]) -> Self {
        Self {
            image: image.into(),
            regions: detections.iter().map(RegionRecord::from).collect(),
        }
    }

    pub fn truths(&self) -> Vec<(Region, ClassId)> {
        self.regions.iter().map(|r| (r.rect(), r.class.clone())).collect()
    }

    /// Turns stored regions back into detections, in file order.
    pub fn detections(&self) -> Vec<Detection> {
        self.regions
            .iter()
            .enumerate()
            .map(|(i, r)| Detection {
                region: r.rect(),
                class: r.class.clone(),
                score: r.score.unwrap_or(1.0),
                proposal: i,
            })
            .collect()
    }
}

pub fn regions_to_jsonl(lines: &[ImageRegions]) -> String {
    lines
        .iter()
        .map(|l| serde_json::to_string(l).expect("regions serialize") + "\n")
        .collect()
}

pub fn regions_from_jsonl(text: &str) -> Result<Vec<ImageRegions>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

pub fn read_regions(path: impl AsRef<Path>) -> Result<Vec<ImageRegions>> {
    regions_from_jsonl(&std::fs::read_to_string(path)?)
}

/// Ground-truth region annotations of every manifest sample with boxes.
pub fn annotations_from_manifest(manifest: &CorpusManifest) -> Vec<ImageRegions> {
    manifest
        .samples
        .iter()
        .filter(|s| !s.boxes.is_empty())
        .map(|s| ImageRegions {
            image: s.path.clone(),
            regions: s
                .boxes
                .iter()
                .map(|b| RegionRecord {
                    x: b.x,
                    y: b.y,
                    w: b.w,
                    h: b.h,
                    class: b.class.clone(),
                    score: None,
                    polygon: None,
                })
                .collect(),
        })
        .collect()
}
