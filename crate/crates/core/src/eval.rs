//! Confusion matrices, per-class metrics and the report built from them.
//!
//! Means are taken over classes that are neither excluded by the split nor
//! missing from the test set. `overall_accuracy` always covers every sample.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{normalize_batch, resize_bilinear, CorpusError, CorpusManifest, ImageSource, SplitDescriptor};
use crate::model::{Model, ModelError};
use crate::taxonomy::{ClassId, Taxonomy, TaxonomyError};
use crate::tensor::Real;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("label {0} is not in the class list")]
    UnknownLabel(String),
    #[error("{truths} truths but {predictions} predictions")]
    LengthMismatch { truths: usize, predictions: usize },
    #[error("no computable classes")]
    NoComputableClasses,
    #[error("counts must be a {0}x{0} matrix")]
    BadCounts(usize),
    #[error("classes not covered by the model: {}", .0.join(", "))]
    OrphanClasses(Vec<String>),
    #[error("predictions: {0}")]
    Json(#[from] serde_json::Error),
    #[error("predictions io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: Vec<ClassId>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<ClassId>) -> Self {
        let k = classes.len();
        Self {
            classes,
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn from_counts(classes: Vec<ClassId>, counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = classes.len();
        if counts.len() != k || counts.iter().any(|r| r.len() != k) {
            return Err(EvalError::BadCounts(k));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn index_of(&self, class: &ClassId) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == class)
            .ok_or_else(|| EvalError::UnknownLabel(class.to_string()))
    }

    pub fn add(&mut self, truth: &ClassId, predicted: &ClassId) -> Result<()> {
        let (t, p) = (self.index_of(truth)?, self.index_of(predicted)?);
        self.counts[t][p] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes.len()).map(|i| self.counts[i][i]).sum()
    }

    /// True samples of class `c`.
    pub fn support(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    /// Samples predicted as class `c`.
    pub fn predicted(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    /// Adds another matrix over the same class list.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(EvalError::BadCounts(self.classes.len()));
        }
        for (row, o) in self.counts.iter_mut().zip(&other.counts) {
            for (a, b) in row.iter_mut().zip(o) {
                *a += b;
            }
        }
        Ok(())
    }

    fn eligible(&self, excluded: &[ClassId]) -> Vec<usize> {
        (0..self.classes.len())
            .filter(|&c| self.support(c) > 0 && !excluded.contains(&self.classes[c]))
            .collect()
    }

    pub fn class_metrics(&self, c: usize) -> ClassMetrics {
        let tp = self.counts[c][c];
        let support = self.support(c);
        let predicted = self.predicted(c);
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        ClassMetrics {
            class: self.classes[c].clone(),
            support,
            predicted,
            correct: tp,
            accuracy: ratio(tp, support),
            precision: ratio(tp, predicted),
            f1: ratio(2 * tp, support + predicted),
        }
    }
}

pub fn confusion_matrix(truths: &[ClassId], predictions: &[ClassId], classes: &[ClassId]) -> Result<ConfusionMatrix> {
    if truths.len() != predictions.len() {
        return Err(EvalError::LengthMismatch {
            truths: truths.len(),
            predictions: predictions.len(),
        });
    }
    let mut cm = ConfusionMatrix::new(classes.to_vec());
    for (t, p) in truths.iter().zip(predictions) {
        cm.add(t, p)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: ClassId,
    pub support: u64,
    pub predicted: u64,
    pub correct: u64,
    /// Recall: correct / support.
    pub accuracy: f64,
    pub precision: f64,
    /// One-vs-rest `2TP / (2TP + FP + FN)`.
    pub f1: f64,
}

fn mean_over(cm: &ConfusionMatrix, excluded: &[ClassId], f: impl Fn(&ClassMetrics) -> f64) -> Result<f64> {
    let eligible = cm.eligible(excluded);
    if eligible.is_empty() {
        return Err(EvalError::NoComputableClasses);
    }
    let sum: f64 = eligible.iter().map(|&c| f(&cm.class_metrics(c))).sum();
    Ok(sum / eligible.len() as f64)
}

/// Unweighted mean of per-class recall.
pub fn mean_class_accuracy(cm: &ConfusionMatrix, excluded: &[ClassId]) -> Result<f64> {
    mean_over(cm, excluded, |m| m.accuracy)
}

/// Unweighted mean of per-class F1.
pub fn macro_f1(cm: &ConfusionMatrix, excluded: &[ClassId]) -> Result<f64> {
    mean_over(cm, excluded, |m| m.f1)
}

/// Support-weighted mean of per-class F1.
pub fn weighted_f1(cm: &ConfusionMatrix, excluded: &[ClassId]) -> Result<f64> {
    let eligible = cm.eligible(excluded);
    if eligible.is_empty() {
        return Err(EvalError::NoComputableClasses);
    }
    let mut num = 0.0;
    let mut den = 0u64;
    for c in eligible {
        let m = cm.class_metrics(c);
        num += m.f1 * m.support as f64;
        den += m.support;
    }
    Ok(num / den as f64)
}

/// `trace / total`, or 0 for an empty matrix.
pub fn overall_accuracy(cm: &ConfusionMatrix) -> f64 {
    match cm.total() {
        0 => 0.0,
        total => cm.trace() as f64 / total as f64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    /// The split left the class with no sample on one side.
    NonComputable,
    /// The class has no test samples.
    NoTestSupport,
}

impl std::fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ExclusionReason::NonComputable => "non_computable",
            ExclusionReason::NoTestSupport => "no_test_support",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExcludedClass {
    pub class: ClassId,
    pub reason: ExclusionReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub samples: u64,
    pub per_class: Vec<ClassMetrics>,
    pub mean_class_accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub overall_accuracy: f64,
    pub excluded_classes: Vec<ExcludedClass>,
    pub confusion: ConfusionMatrix,
}

impl Metrics {
    /// `non_computable` classes are excluded with that reason; classes with
    /// no test support are excluded as well.
    pub fn from_confusion(cm: ConfusionMatrix, non_computable: &[ClassId]) -> Result<Self> {
        let mut excluded_classes = Vec::new();
        for (c, class) in cm.classes().iter().enumerate() {
            if non_computable.contains(class) {
                excluded_classes.push(ExcludedClass {
                    class: class.clone(),
                    reason: ExclusionReason::NonComputable,
                });
            } else if cm.support(c) == 0 {
                excluded_classes.push(ExcludedClass {
                    class: class.clone(),
                    reason: ExclusionReason::NoTestSupport,
                });
            }
        }
        for class in non_computable {
            if !cm.classes().contains(class) {
                excluded_classes.push(ExcludedClass {
                    class: class.clone(),
                    reason: ExclusionReason::NonComputable,
                });
            }
        }
        Ok(Self {
            samples: cm.total(),
            per_class: (0..cm.classes().len()).map(|c| cm.class_metrics(c)).collect(),
            mean_class_accuracy: mean_class_accuracy(&cm, non_computable)?,
            macro_f1: macro_f1(&cm, non_computable)?,
            weighted_f1: weighted_f1(&cm, non_computable)?,
            overall_accuracy: overall_accuracy(&cm),
            excluded_classes,
            confusion: cm,
        })
    }

    fn is_excluded(&self, class: &ClassId) -> Option<ExclusionReason> {
        self.excluded_classes
            .iter()
            .find(|e| &e.class == class)
            .map(|e| e.reason)
    }

    fn render(&self, out: &mut String) {
        let width = self
            .per_class
            .iter()
            .map(|m| m.class.as_str().len())
            .max()
            .unwrap_or(5)
            .max(5);
        let _ = writeln!(
            out,
            "{:<width$}  {:>7}  {:>8}  {:>9}  {:>6}  note",
            "class", "support", "accuracy", "precision", "f1"
        );
        for m in &self.per_class {
            let note = self.is_excluded(&m.class).map(|r| format!("excluded: {r}")).unwrap_or_default();
            let row = format!(
                "{:<width$}  {:>7}  {:>8.4}  {:>9.4}  {:>6.4}  {note}",
                m.class.as_str(),
                m.support,
                m.accuracy,
                m.precision,
                m.f1
            );
            let _ = writeln!(out, "{}", row.trim_end());
        }
        let _ = writeln!(out, "samples              {}", self.samples);
        let _ = writeln!(out, "mean_class_accuracy  {:.4}", self.mean_class_accuracy);
        let _ = writeln!(out, "macro_f1             {:.4}", self.macro_f1);
        let _ = writeln!(out, "weighted_f1          {:.4}", self.weighted_f1);
        let _ = writeln!(out, "overall_accuracy     {:.4}", self.overall_accuracy);
        if self.excluded_classes.is_empty() {
            let _ = writeln!(out, "excluded classes     none");
        } else {
            let _ = writeln!(out, "excluded classes (removed from means):");
            for e in &self.excluded_classes {
                let _ = writeln!(out, "  {}  {}", e.class, e.reason);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RollupMetrics {
    pub depth: usize,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub leaf: Metrics,
    pub rollup: Option<RollupMetrics>,
    pub split: Option<SplitDescriptor>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Human-readable table, including the excluded classes.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        if let Some(split) = &self.split {
            let mode = if split.group_by_artifact { "per-artifact" } else { "per-image" };
            let _ = writeln!(
                out,
                "split: test_ratio={} seed={} mode={mode}",
                split.test_ratio, split.seed
            );
        }
        let _ = writeln!(out, "leaf classes");
        self.leaf.render(&mut out);
        if let Some(r) = &self.rollup {
            let _ = writeln!(out, "\nrolled up to depth {}", r.depth);
            r.metrics.render(&mut out);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub path: String,
    pub truth: ClassId,
    pub predicted: ClassId,
    pub probability: f64,
}

pub fn predictions_to_jsonl(predictions: &[Prediction]) -> String {
    predictions
        .iter()
        .map(|p| serde_json::to_string(p).expect("prediction serializes") + "\n")
        .collect()
}

pub fn predictions_from_jsonl(text: &str) -> Result<Vec<Prediction>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    predictions_from_jsonl(&std::fs::read_to_string(path)?)
}

/// Classes in first-seen order: `classes` first, then any label only seen
/// in the predictions.
fn class_list(classes: &[ClassId], predictions: &[Prediction]) -> Vec<ClassId> {
    let mut list = classes.to_vec();
    for p in predictions {
        for c in [&p.truth, &p.predicted] {
            if !list.contains(c) {
                list.push(c.clone());
            }
        }
    }
    list
}

/// Builds a report from persisted predictions. With a taxonomy and depth,
/// truths and predictions are also rolled up and scored again.
pub fn evaluate_predictions(
    predictions: &[Prediction],
    classes: &[ClassId],
    non_computable: &[ClassId],
    split: Option<SplitDescriptor>,
    rollup: Option<(&Taxonomy, usize)>,
) -> Result<MetricsReport> {
    let list = class_list(classes, predictions);
    let truths: Vec<ClassId> = predictions.iter().map(|p| p.truth.clone()).collect();
    let preds: Vec<ClassId> = predictions.iter().map(|p| p.predicted.clone()).collect();
    let leaf = Metrics::from_confusion(confusion_matrix(&truths, &preds, &list)?, non_computable)?;

    let rollup = match rollup {
        None => None,
        Some((taxonomy, depth)) => {
            let up = |c: &ClassId| taxonomy.rollup(c, depth);
            let mut rolled_list = Vec::new();
            for c in &list {
                let r = up(c)?;
                if !rolled_list.contains(&r) {
                    rolled_list.push(r);
                }
            }
            let rt = truths.iter().map(up).collect::<std::result::Result<Vec<_>, _>>()?;
            let rp = preds.iter().map(up).collect::<std::result::Result<Vec<_>, _>>()?;
            // A coarse class is non-computable only if all of its leaves are.
            let rolled_nc: Vec<ClassId> = rolled_list
                .iter()
                .filter(|r| {
                    let leaves: Vec<&ClassId> = list.iter().filter(|c| up(c).ok().as_ref() == Some(*r)).collect();
                    leaves.iter().all(|c| non_computable.contains(c))
                })
                .cloned()
                .collect();
            let metrics = Metrics::from_confusion(confusion_matrix(&rt, &rp, &rolled_list)?, &rolled_nc)?;
            Some(RollupMetrics { depth, metrics })
        }
    };
    Ok(MetricsReport {
        leaf,
        rollup,
        split,
    })
}

/// Images per inference batch.
pub const EVAL_BATCH: usize = 64;

/// Classifies every sample of `manifest`, resizing to the model input and
/// normalizing with the model's stored statistics.
pub fn predict_manifest<T: Real>(
    model: &Model<T>,
    manifest: &CorpusManifest,
    source: &dyn ImageSource,
) -> Result<Vec<Prediction>> {
    let (_, h, w) = model.arch().input_size;
    let mut out = Vec::with_capacity(manifest.len());
    for chunk in manifest.samples.chunks(EVAL_BATCH) {
        let images = chunk
            .iter()
            .map(|s| Ok(resize_bilinear(&source.load(&s.path)?, w, h)))
            .collect::<Result<Vec<_>>>()?;
        let batch = normalize_batch::<T>(&images, &model.normalization)?;
        for (s, (c, p)) in chunk.iter().zip(model.predict(&batch)?) {
            out.push(Prediction {
                path: s.path.clone(),
                truth: s.class.clone(),
                predicted: ClassId::new(&model.class_names[c]),
                probability: p.to_f64_lossy(),
            });
        }
    }
    Ok(out)
}

/// Manifest classes the model cannot predict, even after rollup.
pub fn orphan_classes<T>(model: &Model<T>, manifest: &CorpusManifest, rollup: Option<(&Taxonomy, usize)>) -> Vec<String> {
    let known: BTreeSet<&str> = model.class_names.iter().map(String::as_str).collect();
    manifest
        .classes()
        .into_iter()
        .filter(|c| {
            if known.contains(c.as_str()) {
                return false;
            }
            match rollup {
                Some((t, d)) => t.rollup(c, d).map_or(true, |r| !known.contains(r.as_str())),
                None => true,
            }
        })
        .map(|c| c.to_string())
        .collect()
}

/// End-to-end evaluation of a model on a test manifest.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    manifest: &CorpusManifest,
    source: &dyn ImageSource,
    non_computable: &[ClassId],
    split: Option<SplitDescriptor>,
    rollup: Option<(&Taxonomy, usize)>,
) -> Result<(MetricsReport, Vec<Prediction>)> {
    let orphans = orphan_classes(model, manifest, rollup);
    if !orphans.is_empty() {
        return Err(EvalError::OrphanClasses(orphans));
    }
    let predictions = predict_manifest(model, manifest, source)?;
    let classes: Vec<ClassId> = model.class_names.iter().map(|c| ClassId::new(c)).collect();
    let report = evaluate_predictions(&predictions, &classes, non_computable, split, rollup)?;
    Ok((report, predictions))
}
