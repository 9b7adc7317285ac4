use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::image::{ImageRecord, Rgb, DEFAULT_FILL};
use super::{CorpusError, CorpusManifest, Depiction, ImageSource, Result, Sample};
use crate::taxonomy::ClassId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurationRules {
    /// Depictions kept as they are when a sample carries no boxes.
    pub keep: Vec<Depiction>,
    /// Expand multi-object samples into one crop per box.
    pub split_boxes: bool,
    /// Colour covering neighbouring objects inside a crop.
    pub fill: Rgb,
}

impl Default for CurationRules {
    fn default() -> Self {
        Self {
            keep: vec![Depiction::Whole],
            split_boxes: true,
            fill: DEFAULT_FILL,
        }
    }
}

/// An excluded sample and the reason code.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub path: String,
    pub artifact_id: String,
    pub class: ClassId,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct CurationOutcome {
    pub kept: CorpusManifest,
    pub excluded: Vec<Exclusion>,
    /// Crops produced by splitting, keyed by their new manifest path.
    pub derived_images: Vec<(String, ImageRecord)>,
}

/// Manifest path for crop `index` of `path`: `dir/stem__box{index}.ppm`.
pub(crate) fn crop_path(path: &str, index: usize) -> String {
    let (dir, file) = match path.rfind('/') {
        Some(i) => (&path[..=i], &path[i + 1..]),
        None => ("", path),
    };
    let stem = file.rsplit_once('.').map_or(file, |(s, _)| s);
    format!("{dir}{stem}__box{index}.ppm")
}

/// One whole-object sample per box: the image is cropped to the box and
/// every other box that reaches into the crop is covered with `fill`.
pub fn split_by_boxes(
    sample: &Sample,
    image: &ImageRecord,
    fill: Rgb,
) -> Result<Vec<(Sample, ImageRecord)>> {
    if sample.boxes.is_empty() {
        return Err(CorpusError::NoBoxes(sample.path.clone()));
    }
    for (index, b) in sample.boxes.iter().enumerate() {
        let rect = b.rect();
        if rect.is_empty() || !rect.fits_in(image.width(), image.height()) {
            return Err(CorpusError::BoxOutOfBounds {
                path: sample.path.clone(),
                index,
                rect,
                width: image.width(),
                height: image.height(),
            });
        }
    }
    sample
        .boxes
        .iter()
        .enumerate()
        .map(|(i, target)| {
            let rect = target.rect();
            let mut crop = image.crop(&rect)?;
            for (j, other) in sample.boxes.iter().enumerate() {
                if j == i {
                    continue;
                }
                if let Some(overlap) = rect.intersection(&other.rect()) {
                    let local = crate::geometry::Rect::new(
                        overlap.x - rect.x,
                        overlap.y - rect.y,
                        overlap.w,
                        overlap.h,
                    );
                    crop.fill_rect(&local, fill)?;
                }
            }
            let derived = Sample {
                path: crop_path(&sample.path, i),
                class: target.class.clone(),
                artifact_id: if sample.boxes.len() == 1 {
                    sample.artifact_id.clone()
                } else {
                    format!("{}#{i}", sample.artifact_id)
                },
                depiction: Depiction::Whole,
                boxes: Vec::new(),
            };
            Ok((derived, crop))
        })
        .collect()
}

enum Verdict {
    Keep(Sample),
    Split(Vec<(Sample, ImageRecord)>),
    Exclude(Exclusion),
}

/// Applies the curation rules: boxed samples are split into crops, samples
/// with a kept depiction pass through, everything else is excluded with a
/// reason code. Repeated paths under different artifact ids are all kept.
pub fn curate(
    manifest: &CorpusManifest,
    rules: &CurationRules,
    source: &dyn ImageSource,
) -> Result<CurationOutcome> {
    let exclude = |s: &Sample, reason: String| {
        Verdict::Exclude(Exclusion {
            path: s.path.clone(),
            artifact_id: s.artifact_id.clone(),
            class: s.class.clone(),
            reason,
        })
    };
    let verdicts: Vec<Verdict> = manifest
        .samples
        .par_iter()
        .map(|s| {
            if !s.boxes.is_empty() {
                if !rules.split_boxes {
                    return Ok(exclude(s, "multi_object".into()));
                }
                let image = source.load(&s.path)?;
                return Ok(match split_by_boxes(s, &image, rules.fill) {
                    Ok(parts) => Verdict::Split(parts),
                    Err(CorpusError::BoxOutOfBounds { .. }) => exclude(s, "invalid_boxes".into()),
                    Err(e) => return Err(e),
                });
            }
            if rules.keep.contains(&s.depiction) {
                Ok(Verdict::Keep(s.clone()))
            } else {
                Ok(exclude(s, s.depiction.to_string()))
            }
        })
        .collect::<Result<_>>()?;

    let mut out = CurationOutcome::default();
    for v in verdicts {
        match v {
            Verdict::Keep(s) => out.kept.samples.push(s),
            Verdict::Split(parts) => {
                for (s, img) in parts {
                    out.derived_images.push((s.path.clone(), img));
                    out.kept.samples.push(s);
                }
            }
            Verdict::Exclude(e) => out.excluded.push(e),
        }
    }
    Ok(out)
}
