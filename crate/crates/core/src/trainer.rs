//! Epoch loop for pre-training and fine-tuning.
//!
//! Each epoch shuffles sample indices with a generator seeded from
//! `(seed, epoch)`, walks the batches in order (the last one may be short)
//! and applies SGD with momentum. The learning rate decays once per epoch.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{channel_stats, normalize_batch, resize_bilinear, CorpusError, CorpusManifest, ImageRecord, ImageSource};
use crate::eval::{mean_class_accuracy, ConfusionMatrix};
use crate::model::{argmax, checkpoint_digest, ArchitectureConfig, Model, ModelError};
use crate::rng::{derive_seed, stream_rng};
use crate::taxonomy::ClassId;
use crate::tensor::{sgd_momentum_step, softmax_cross_entropy, Precision, Real, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (lr {lr})")]
    NonFiniteLoss { epoch: usize, batch: usize, lr: f64 },
    #[error("non-finite gradient at epoch {epoch}, batch {batch} (lr {lr}): {detail}")]
    NonFiniteGradient {
        epoch: usize,
        batch: usize,
        lr: f64,
        detail: String,
    },
    #[error("class {0} is not one of the model's classes")]
    UnknownClass(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Epochs during which the conv blocks stay fixed.
    pub freeze_blocks_epochs: usize,
    /// Multiplied into the learning rate after every epoch.
    pub lr_decay: f64,
    pub precision: Precision,
    /// Stop after this many epochs without improvement.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            lr: 0.01,
            momentum: 0.9,
            seed: 0,
            freeze_blocks_epochs: 0,
            lr_decay: 0.95,
            precision: Precision::F32,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        // lr = 0 is accepted so that training can be checked as a no-op.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be a finite value >= 0, got {}", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must be in (0, 1], got {}", self.lr_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_mean_class_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn final_record(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// `epoch,train_loss,train_acc,test_mean_class_acc`; the last column is
    /// empty without a test set.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,test_mean_class_acc\n");
        for r in &self.records {
            let test = r.test_mean_class_acc.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, r.train_acc, test);
        }
        out
    }
}

/// Images resized to the model input with class indices attached.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub paths: Vec<String>,
    pub images: Vec<ImageRecord>,
    pub labels: Vec<usize>,
    pub classes: Vec<ClassId>,
}

impl Dataset {
    /// Loads every sample of `manifest`; labels index into `classes`.
    pub fn load(
        manifest: &CorpusManifest,
        source: &dyn ImageSource,
        classes: &[ClassId],
        size: (usize, usize),
    ) -> Result<Self> {
        use rayon::prelude::*;
        let labels = manifest
            .samples
            .iter()
            .map(|s| {
                classes
                    .iter()
                    .position(|c| c == &s.class)
                    .ok_or_else(|| TrainError::UnknownClass(s.class.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let images = manifest
            .samples
            .par_iter()
            .map(|s| Ok(resize_bilinear(&source.load(&s.path)?, size.0, size.1)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            paths: manifest.samples.iter().map(|s| s.path.clone()).collect(),
            images,
            labels,
            classes: classes.to_vec(),
        })
    }

    pub fn from_parts(images: Vec<ImageRecord>, labels: Vec<usize>, classes: Vec<ClassId>) -> Self {
        let paths = (0..images.len()).map(|i| i.to_string()).collect();
        Self {
            paths,
            images,
            labels,
            classes,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Sorted class list of a manifest, as model class names.
pub fn class_names(manifest: &CorpusManifest) -> Vec<String> {
    manifest.classes().into_iter().map(|c| c.to_string()).collect()
}

fn class_ids<T>(model: &Model<T>) -> Vec<ClassId> {
    model.class_names.iter().map(|c| ClassId::new(c)).collect()
}

fn check_labels<T>(model: &Model<T>, data: &Dataset) -> Result<()> {
    let ids = class_ids(model);
    if data.classes != ids {
        if let Some(c) = data.classes.iter().find(|c| !ids.contains(c)) {
            return Err(TrainError::UnknownClass(c.to_string()));
        }
        return Err(TrainError::InvalidConfig(
            "dataset class order differs from the model's class names".into(),
        ));
    }
    Ok(())
}

/// Sets the model's input statistics from the training images.
pub fn fit_normalization<T>(model: &mut Model<T>, data: &Dataset) {
    model.normalization = channel_stats(&data.images);
}

fn gather<T: Real>(all: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>> {
    let per = all.len() / all.shape()[0];
    let mut data = Vec::with_capacity(rows.len() * per);
    for &r in rows {
        data.extend_from_slice(&all.data()[r * per..(r + 1) * per]);
    }
    let mut shape = all.shape().to_vec();
    shape[0] = rows.len();
    Ok(Tensor::new(shape, data)?)
}

/// Mean-class accuracy of `model` on a normalized set, if any class is
/// computable.
fn test_accuracy<T: Real>(model: &Model<T>, inputs: &Tensor<T>, data: &Dataset) -> Result<Option<f64>> {
    let mut cm = ConfusionMatrix::new(data.classes.clone());
    let n = data.len();
    let mut start = 0;
    while start < n {
        let end = (start + crate::eval::EVAL_BATCH).min(n);
        let rows: Vec<usize> = (start..end).collect();
        let batch = gather(inputs, &rows)?;
        for (i, (pred, _)) in model.predict(&batch)?.into_iter().enumerate() {
            let (t, p) = (&data.classes[data.labels[start + i]], &data.classes[pred]);
            cm.add(t, p).expect("labels come from the class list");
        }
        start = end;
    }
    Ok(mean_class_accuracy(&cm, &[]).ok())
}

/// Trains `model` in place on `train`, scoring `test` after every epoch.
pub fn train<T: Real>(
    model: &mut Model<T>,
    train: &Dataset,
    config: &TrainConfig,
    test: Option<&Dataset>,
) -> Result<TrainHistory> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    check_labels(model, train)?;
    if let Some(t) = test {
        check_labels(model, t)?;
    }
    let inputs = normalize_batch::<T>(&train.images, &model.normalization)?;
    let test_inputs = match test {
        Some(t) if !t.is_empty() => Some(normalize_batch::<T>(&t.images, &model.normalization)?),
        _ => None,
    };

    let mut history = TrainHistory::default();
    let mut best: Option<f64> = None;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let frozen = epoch < config.freeze_blocks_epochs;
        order.sort_unstable();
        order.shuffle(&mut stream_rng(config.seed, epoch as u64));

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, rows) in order.chunks(config.batch_size).enumerate() {
            let batch = gather(&inputs, rows)?;
            let targets: Vec<usize> = rows.iter().map(|&r| train.labels[r]).collect();
            let trace = match model.forward_trace(&batch) {
                Ok(t) => t,
                Err(ModelError::Tensor(TensorError::NonFinite { .. })) => {
                    return Err(TrainError::NonFiniteLoss { epoch, batch: b, lr });
                }
                Err(e) => return Err(e.into()),
            };
            let (loss, grad) = match softmax_cross_entropy(&trace.logits, &targets) {
                Ok(v) => v,
                Err(TensorError::NonFinite { .. }) => {
                    return Err(TrainError::NonFiniteLoss { epoch, batch: b, lr });
                }
                Err(e) => return Err(e.into()),
            };
            let loss = loss.to_f64_lossy();
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b, lr });
            }
            loss_sum += loss * rows.len() as f64;
            let k = model.num_classes();
            correct += trace
                .logits
                .data()
                .chunks_exact(k)
                .zip(&targets)
                .filter(|(row, &t)| argmax(row) == t)
                .count();

            model.backward(&trace, &grad)?;
            let (body, head) = model.split_params_mut();
            let step = if frozen {
                body.iter_mut().for_each(|p| p.zero_grad());
                sgd_momentum_step(head.iter_mut(), lr, config.momentum)
            } else {
                sgd_momentum_step(body.iter_mut().chain(head.iter_mut()), lr, config.momentum)
            };
            if let Err(e) = step {
                model.zero_grad();
                return Err(TrainError::NonFiniteGradient {
                    epoch,
                    batch: b,
                    lr,
                    detail: e.to_string(),
                });
            }
        }

        let test_acc = match (&test_inputs, test) {
            (Some(x), Some(t)) => test_accuracy(model, x, t)?,
            _ => None,
        };
        let train_loss = loss_sum / train.len() as f64;
        history.records.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            train_acc: correct as f64 / train.len() as f64,
            test_mean_class_acc: test_acc,
        });

        if let Some(patience) = config.patience {
            // Higher is better for accuracy; loss is negated to match.
            let score = test_acc.unwrap_or(-train_loss);
            if best.is_none_or(|b| score > b) {
                best = Some(score);
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    break;
                }
            }
        }
    }
    Ok(history)
}

/// Builds a fresh model for `train.classes`, fits the input statistics on
/// the training images and trains it.
pub fn train_from_scratch<T: Real>(
    arch: ArchitectureConfig,
    train_set: &Dataset,
    config: &TrainConfig,
    test: Option<&Dataset>,
) -> Result<(Model<T>, TrainHistory)> {
    let mut arch = arch;
    arch.num_classes = train_set.classes.len();
    let mut model = Model::<T>::build(arch, config.seed)?;
    model.class_names = train_set.classes.iter().map(|c| c.to_string()).collect();
    fit_normalization(&mut model, train_set);
    let history = train(&mut model, train_set, config, test)?;
    Ok((model, history))
}

/// Replaces the head of a pre-trained model with one sized for
/// `train.classes` and trains on the target set. The input statistics of
/// the pre-trained model are kept. `lineage` is the digest of the
/// pre-trained checkpoint bytes.
pub fn finetune<T: Real>(
    pretrained: &Model<T>,
    lineage: String,
    train_set: &Dataset,
    config: &TrainConfig,
    test: Option<&Dataset>,
) -> Result<(Model<T>, TrainHistory)> {
    let mut model = head_reinit(pretrained, &train_set.classes, config.seed)?;
    model.lineage = Some(lineage);
    let history = train(&mut model, train_set, config, test)?;
    Ok((model, history))
}

/// The pre-trained model with a fresh head for `classes`.
pub fn head_reinit<T: Real>(pretrained: &Model<T>, classes: &[ClassId], seed: u64) -> Result<Model<T>> {
    let mut model = pretrained.clone();
    model.reinit_head(classes.len(), derive_seed(seed, HEAD_STREAM))?;
    model.class_names = classes.iter().map(|c| c.to_string()).collect();
    model.zero_grad();
    Ok(model)
}

const HEAD_STREAM: u64 = 0x4845_4144;

/// [`finetune`] from serialized checkpoint bytes.
pub fn finetune_from_bytes<T: Real>(
    checkpoint: &[u8],
    train_set: &Dataset,
    config: &TrainConfig,
    test: Option<&Dataset>,
) -> Result<(Model<T>, TrainHistory)> {
    let pretrained = Model::<T>::from_checkpoint_bytes(checkpoint)?;
    finetune(&pretrained, checkpoint_digest(checkpoint), train_set, config, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ImageRecord;

    fn tiny_arch(k: usize) -> ArchitectureConfig {
        ArchitectureConfig {
            input_size: (3, 8, 8),
            blocks: vec![crate::model::BlockSpec {
                conv_count: 1,
                out_channels: 4,
            }],
            head: vec![8],
            num_classes: k,
        }
    }

    /// Dark-left versus dark-right images.
    fn separable(n: usize) -> Dataset {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = i % 2;
            let mut img = ImageRecord::filled(8, 8, [220, 220, 220]);
            for y in 0..8 {
                for x in 0..8 {
                    let dark = if label == 0 { x < 4 } else { x >= 4 };
                    if dark {
                        let v = 20 + (i * 7 % 30) as u8;
                        img.set(x, y, [v, v, v]);
                    }
                }
            }
            images.push(img);
            labels.push(label);
        }
        Dataset::from_parts(images, labels, vec![ClassId::new("left"), ClassId::new("right")])
    }

    #[test]
    fn separable_set_is_learned() {
        let data = separable(24);
        let config = TrainConfig {
            epochs: 10,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let (_, history) = train_from_scratch::<f64>(tiny_arch(2), &data, &config, None).unwrap();
        assert_eq!(history.records.len(), 10);
        assert_eq!(history.final_record().unwrap().train_acc, 1.0);
    }

    #[test]
    fn zero_lr_is_a_fixed_point() {
        let data = separable(10);
        let config = TrainConfig {
            epochs: 1,
            lr: 0.0,
            ..TrainConfig::default()
        };
        let mut model = Model::<f64>::build(tiny_arch(2), 1).unwrap();
        model.class_names = vec!["left".into(), "right".into()];
        let before = model.clone();
        let history = train(&mut model, &data, &config, None).unwrap();
        for (a, b) in model.params().iter().zip(before.params()) {
            assert_eq!(a.value, b.value);
        }
        let loss = history.records[0].train_loss;
        assert!((loss - 2f64.ln()).abs() < 0.1, "loss {loss}");
    }

    #[test]
    fn same_config_same_history() {
        let data = separable(12);
        let config = TrainConfig {
            epochs: 3,
            batch_size: 5,
            seed: 4,
            ..TrainConfig::default()
        };
        let (m1, h1) = train_from_scratch::<f32>(tiny_arch(2), &data, &config, Some(&data)).unwrap();
        let (m2, h2) = train_from_scratch::<f32>(tiny_arch(2), &data, &config, Some(&data)).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(m1.to_checkpoint_bytes().unwrap(), m2.to_checkpoint_bytes().unwrap());
        assert_eq!(h1.to_csv().lines().count(), 4);
    }

    #[test]
    fn frozen_blocks_stay_bit_identical() {
        let data = separable(12);
        let config = TrainConfig {
            epochs: 3,
            freeze_blocks_epochs: 3,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let pretrained = Model::<f32>::build(tiny_arch(3), 8).unwrap();
        let (tuned, _) = finetune(&pretrained, "abc".into(), &data, &config, None).unwrap();
        assert_eq!(tuned.body_params().len(), 2);
        for (a, b) in tuned.body_params().iter().zip(pretrained.body_params()) {
            assert_eq!(a.value, b.value);
        }
        assert_ne!(tuned.params()[2].value, pretrained.params()[2].value);
        assert_eq!(tuned.lineage.as_deref(), Some("abc"));
        assert_eq!(tuned.class_names, ["left", "right"]);
    }

    #[test]
    fn zero_lr_finetune_matches_head_reinit() {
        let data = separable(8);
        let config = TrainConfig {
            epochs: 2,
            lr: 0.0,
            ..TrainConfig::default()
        };
        let pretrained = Model::<f64>::build(tiny_arch(2), 3).unwrap();
        let (tuned, _) = finetune(&pretrained, String::new(), &data, &config, None).unwrap();
        let reinit = head_reinit(&pretrained, &data.classes, config.seed).unwrap();
        let x = normalize_batch::<f64>(&data.images, &reinit.normalization).unwrap();
        assert_eq!(tuned.predict(&x).unwrap(), reinit.predict(&x).unwrap());
    }

    #[test]
    fn exploding_lr_reports_where() {
        let data = separable(8);
        let config = TrainConfig {
            epochs: 5,
            lr: 1e30,
            momentum: 0.0,
            ..TrainConfig::default()
        };
        let err = train_from_scratch::<f32>(tiny_arch(2), &data, &config, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("non-finite") && msg.contains("epoch"), "{msg}");
    }

    #[test]
    fn unknown_class_rejected() {
        let data = separable(4);
        let mut model = Model::<f32>::build(tiny_arch(2), 1).unwrap();
        model.class_names = vec!["up".into(), "down".into()];
        let err = train(&mut model, &data, &TrainConfig::default(), None).unwrap_err();
        assert!(matches!(err, TrainError::UnknownClass(_)));
    }
}
