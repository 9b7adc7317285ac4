//! Corpus records and the operations that turn raw image collections into
//! train/test material: curation, splitting, normalization, and a seeded
//! synthetic generator.

mod curate;
mod image;
mod normalize;
mod split;
pub mod synth;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use curate::{curate, split_by_boxes, CurationOutcome, CurationRules, Exclusion};
pub use image::{
    decode_ppm, encode_ppm, mask_region, resize_bilinear, ImageError, ImageRecord, PpmError, Rgb,
    DEFAULT_FILL,
};
pub use normalize::{channel_stats, normalize_batch, STD_FLOOR};
pub use split::{stratified_split, SplitDescriptor, SplitOutcome, SplitParams};
pub use synth::{generate_synthetic_corpus, ClutterSpec, GlyphKind, SynthSpec, SyntheticCorpus};

use crate::geometry::Rect;
use crate::taxonomy::{ClassId, Taxonomy};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Ppm { path: String, source: PpmError },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest line {line}: {source}")]
    ManifestLine {
        line: usize,
        source: serde_json::Error,
    },
    #[error("sample {0} has no boxes; pass it through unchanged instead of splitting")]
    NoBoxes(String),
    #[error("sample {path}: box {index} {rect:?} exceeds {width}x{height} image")]
    BoxOutOfBounds {
        path: String,
        index: usize,
        rect: Rect,
        width: usize,
        height: usize,
    },
    #[error("sample {0} has an empty artifact_id")]
    EmptyArtifactId(String),
    #[error("classes not in the taxonomy: {0:?}")]
    UnknownClasses(Vec<String>),
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("test ratio must lie in (0, 1), got {0}")]
    BadRatio(f64),
    #[error("images differ in size: {first:?} vs {other:?}")]
    MixedSizes {
        first: (usize, usize),
        other: (usize, usize),
    },
    #[error("normalization has {actual} channels, images have 3")]
    ChannelCount { actual: usize },
    #[error("no image named {0}")]
    MissingImage(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Depiction {
    Whole,
    Partial,
    Closeup,
    Interior,
}

impl fmt::Display for Depiction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Depiction::Whole => "whole",
            Depiction::Partial => "partial",
            Depiction::Closeup => "closeup",
            Depiction::Interior => "interior",
        })
    }
}

/// A labeled object region inside a multi-object image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub class: ClassId,
}

impl BoxAnnotation {
    pub fn rect(&self) -> Rect {
        Rect::new(self.x, self.y, self.w, self.h)
    }

    pub fn from_rect(rect: Rect, class: ClassId) -> Self {
        Self {
            x: rect.x,
            y: rect.y,
            w: rect.w,
            h: rect.h,
            class,
        }
    }
}

/// One manifest line. `path` is relative to the corpus root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub path: String,
    pub class: ClassId,
    pub artifact_id: String,
    pub depiction: Depiction,
    #[serde(default)]
    pub boxes: Vec<BoxAnnotation>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusManifest {
    pub samples: Vec<Sample>,
}

impl CorpusManifest {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Serializes as JSON Lines, one sample per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s).expect("sample serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let samples = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|source| CorpusError::ManifestLine {
                    line: i + 1,
                    source,
                })
            })
            .collect::<Result<Vec<Sample>>>()?;
        Ok(Self { samples })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_jsonl(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), self.to_jsonl().as_bytes())
    }

    /// Sorted set of sample classes.
    pub fn classes(&self) -> Vec<ClassId> {
        let mut v: Vec<ClassId> = self.histogram().into_keys().collect();
        v.sort();
        v
    }

    pub fn histogram(&self) -> BTreeMap<ClassId, usize> {
        let mut h = BTreeMap::new();
        for s in &self.samples {
            *h.entry(s.class.clone()).or_insert(0) += 1;
        }
        h
    }

    /// Checks the manifest invariants against a taxonomy.
    pub fn validate(&self, taxonomy: &Taxonomy) -> Result<()> {
        if let Some(s) = self.samples.iter().find(|s| s.artifact_id.is_empty()) {
            return Err(CorpusError::EmptyArtifactId(s.path.clone()));
        }
        let mut unknown: Vec<String> = self
            .samples
            .iter()
            .flat_map(|s| std::iter::once(&s.class).chain(s.boxes.iter().map(|b| &b.class)))
            .filter(|c| !taxonomy.contains(c))
            .map(|c| c.to_string())
            .collect();
        unknown.sort();
        unknown.dedup();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CorpusError::UnknownClasses(unknown))
        }
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    std::fs::write(path, bytes).map_err(io)
}

/// Where sample images come from.
pub trait ImageSource: Sync {
    fn load(&self, path: &str) -> Result<ImageRecord>;
}

/// Images stored as PPM files under a corpus root.
#[derive(Debug, Clone)]
pub struct DirSource {
    root: PathBuf,
}

impl DirSource {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl ImageSource for DirSource {
    fn load(&self, path: &str) -> Result<ImageRecord> {
        let full = self.root.join(path);
        let bytes = std::fs::read(&full).map_err(|source| CorpusError::Io { path: full, source })?;
        decode_ppm(&bytes).map_err(|source| CorpusError::Ppm {
            path: path.to_string(),
            source,
        })
    }
}

/// In-memory images keyed by manifest path.
#[derive(Debug, Clone, Default)]
pub struct MemorySource {
    images: HashMap<String, ImageRecord>,
}

impl MemorySource {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, image: ImageRecord) {
        self.images.insert(path.into(), image);
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

impl FromIterator<(String, ImageRecord)> for MemorySource {
    fn from_iter<I: IntoIterator<Item = (String, ImageRecord)>>(iter: I) -> Self {
        Self {
            images: iter.into_iter().collect(),
        }
    }
}

impl ImageSource for MemorySource {
    fn load(&self, path: &str) -> Result<ImageRecord> {
        self.images
            .get(path)
            .cloned()
            .ok_or_else(|| CorpusError::MissingImage(path.to_string()))
    }
}

/// Looks in `first`, then in `second`.
pub struct Layered<'a, A: ?Sized, B: ?Sized> {
    pub first: &'a A,
    pub second: &'a B,
}

impl<A: ImageSource + ?Sized, B: ImageSource + ?Sized> ImageSource for Layered<'_, A, B> {
    fn load(&self, path: &str) -> Result<ImageRecord> {
        self.first.load(path).or_else(|_| self.second.load(path))
    }
}

/// Builds a manifest from a folder taxonomy: one whole-object sample per
/// image file, labeled by its directory, artifact id from the file stem.
/// Samples come out in path-sorted order.
pub fn manifest_from_taxonomy(taxonomy: &Taxonomy) -> CorpusManifest {
    let mut samples: Vec<Sample> = taxonomy
        .classes()
        .into_iter()
        .flat_map(|class| {
            let images = taxonomy.images(&class).unwrap_or_default().to_vec();
            images.into_iter().map(move |p| Sample {
                path: p.to_string_lossy().replace('\\', "/"),
                artifact_id: p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                class: class.clone(),
                depiction: Depiction::Whole,
                boxes: Vec::new(),
            })
        })
        .collect();
    samples.sort_by(|a, b| a.path.cmp(&b.path));
    CorpusManifest::new(samples)
}
