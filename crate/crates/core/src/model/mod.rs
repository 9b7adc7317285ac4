//! VGG-style classifier: stacks of 3×3 conv + relu closed by a 2×2 max pool,
//! then a dense head. Supports head replacement for fine-tuning and a
//! self-contained checkpoint format.

mod checkpoint;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{checkpoint_digest, load_checkpoint, save_checkpoint, MAGIC};

use crate::rng::derive_seed;
use crate::tensor::{
    conv2d, conv2d_backward, dense, dense_backward, he_init, maxpool2, maxpool2_backward, relu,
    relu_backward, softmax, Parameter, Real, Tensor, TensorError,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    InvalidConfig(String),
    #[error("input batch shape {actual:?} does not match model input {expected:?}")]
    InputMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("class count must be at least 2, got {0}")]
    TooFewClasses(usize),
    #[error("model has {expected} outputs but {actual} class names")]
    ClassNames { expected: usize, actual: usize },
    #[error("not a checkpoint: bad magic bytes {0:?}")]
    BadMagic(Vec<u8>),
    #[error("checkpoint truncated: expected {expected} bytes of {section}, found {actual}")]
    Truncated {
        section: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("checkpoint weights do not fit architecture: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub conv_count: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    /// `(channels, height, width)`
    pub input_size: (usize, usize, usize),
    pub blocks: Vec<BlockSpec>,
    pub head: Vec<usize>,
    pub num_classes: usize,
}

impl ArchitectureConfig {
    /// Desk-scale default: 3×64×64 input, blocks (1,8),(1,16),(2,32), head [64].
    pub fn desk_default(num_classes: usize) -> Self {
        Self::desk_with_input(64, num_classes)
    }

    /// The default block layout at a square input of `side` pixels.
    pub fn desk_with_input(side: usize, num_classes: usize) -> Self {
        let block = |conv_count, out_channels| BlockSpec {
            conv_count,
            out_channels,
        };
        Self {
            input_size: (3, side, side),
            blocks: vec![block(1, 8), block(1, 16), block(2, 32)],
            head: vec![64],
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input_size;
        let invalid = |msg: String| Err(ModelError::InvalidConfig(msg));
        if c == 0 || h == 0 || w == 0 {
            return invalid(format!("input size {:?} has a zero dimension", self.input_size));
        }
        let factor = 1usize << self.blocks.len();
        if h % factor != 0 || w % factor != 0 {
            return invalid(format!(
                "input {h}x{w} is not divisible by 2^{} = {factor} (one halving per block)",
                self.blocks.len()
            ));
        }
        if self.num_classes < 2 {
            return invalid(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if let Some(i) = self
            .blocks
            .iter()
            .position(|b| b.conv_count == 0 || b.out_channels == 0)
        {
            return invalid(format!("block {i} needs conv_count and out_channels >= 1"));
        }
        if self.head.contains(&0) {
            return invalid("head widths must be >= 1".into());
        }
        Ok(())
    }

    /// Width of the flattened feature vector entering the head.
    pub fn feature_len(&self) -> usize {
        let (c, h, w) = self.input_size;
        let factor = 1usize << self.blocks.len();
        let channels = self.blocks.last().map_or(c, |b| b.out_channels);
        channels * (h / factor) * (w / factor)
    }

    /// Parameter shapes in storage order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = Vec::new();
        let mut channels = self.input_size.0;
        for (b, block) in self.blocks.iter().enumerate() {
            for i in 0..block.conv_count {
                let prefix = format!("block{b}.conv{i}");
                shapes.push((
                    format!("{prefix}.kernels"),
                    vec![block.out_channels, channels, 3, 3],
                ));
                shapes.push((format!("{prefix}.bias"), vec![block.out_channels]));
                channels = block.out_channels;
            }
        }
        let mut width = self.feature_len();
        for (j, &next) in self.head.iter().enumerate() {
            shapes.push((format!("head.dense{j}.weights"), vec![width, next]));
            shapes.push((format!("head.dense{j}.bias"), vec![next]));
            width = next;
        }
        shapes.push(("classifier.weights".into(), vec![width, self.num_classes]));
        shapes.push(("classifier.bias".into(), vec![self.num_classes]));
        shapes
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Number of parameter tensors belonging to the conv blocks.
    pub fn body_tensor_count(&self) -> usize {
        2 * self.blocks.iter().map(|b| b.conv_count).sum::<usize>()
    }

    fn ops(&self) -> Vec<Op> {
        let mut ops = Vec::new();
        let mut param = 0;
        for block in &self.blocks {
            for _ in 0..block.conv_count {
                ops.push(Op::Conv(param));
                ops.push(Op::Relu);
                param += 2;
            }
            ops.push(Op::Pool);
        }
        ops.push(Op::Flatten);
        for _ in &self.head {
            ops.push(Op::Dense(param));
            ops.push(Op::Relu);
            param += 2;
        }
        ops.push(Op::Dense(param));
        ops
    }
}

/// Per-channel input standardization applied to `pixel / 255`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    /// Index of the kernel tensor; the bias follows it.
    Conv(usize),
    Relu,
    Pool,
    Flatten,
    /// Index of the weight tensor; the bias follows it.
    Dense(usize),
}

/// Activations recorded by a training forward pass.
pub struct Trace<T> {
    inputs: Vec<Tensor<T>>,
    argmax: Vec<Option<Vec<usize>>>,
    pub logits: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    arch: ArchitectureConfig,
    pub class_names: Vec<String>,
    pub normalization: Normalization,
    /// Digest of the checkpoint this model was fine-tuned from.
    pub lineage: Option<String>,
    params: Vec<Parameter<T>>,
}

impl<T: Real> Model<T> {
    /// Builds a model with He-initialized weights and zero biases.
    pub fn build(arch: ArchitectureConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.parameter_shapes();
        let classifier = shapes.len() - 2;
        let params = shapes
            .into_iter()
            .enumerate()
            .map(|(i, (name, shape))| {
                let scale = if i >= classifier { CLASSIFIER_INIT_SCALE } else { 1.0 };
                init_param(name, &shape, seed, i as u64, scale)
            })
            .collect();
        let class_names = (0..arch.num_classes).map(|i| format!("class_{i}")).collect();
        let normalization = Normalization::identity(arch.input_size.0);
        Ok(Self {
            arch,
            class_names,
            normalization,
            lineage: None,
            params,
        })
    }

    pub(crate) fn from_parts(
        arch: ArchitectureConfig,
        class_names: Vec<String>,
        normalization: Normalization,
        lineage: Option<String>,
        params: Vec<Parameter<T>>,
    ) -> Self {
        Self {
            arch,
            class_names,
            normalization,
            lineage,
            params,
        }
    }

    pub fn arch(&self) -> &ArchitectureConfig {
        &self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    /// Parameters of the conv blocks (everything before the dense head).
    pub fn body_params(&self) -> &[Parameter<T>] {
        &self.params[..self.arch.body_tensor_count()]
    }

    /// `(body, head)` split of the parameters for selective updates.
    pub fn split_params_mut(&mut self) -> (&mut [Parameter<T>], &mut [Parameter<T>]) {
        let n = self.arch.body_tensor_count();
        self.params.split_at_mut(n)
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    pub fn input_shape(&self, batch: usize) -> Vec<usize> {
        let (c, h, w) = self.arch.input_size;
        vec![batch, c, h, w]
    }

    fn check_input(&self, batch: &Tensor<T>) -> Result<()> {
        let expected = self.input_shape(batch.shape().first().copied().unwrap_or(0));
        if batch.shape() != expected.as_slice() {
            return Err(ModelError::InputMismatch {
                expected,
                actual: batch.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Forward pass that keeps what the backward pass needs.
    pub fn forward_trace(&self, batch: &Tensor<T>) -> Result<Trace<T>> {
        self.check_input(batch)?;
        let ops = self.arch.ops();
        let mut inputs = Vec::with_capacity(ops.len());
        let mut argmax = Vec::with_capacity(ops.len());
        let mut x = batch.clone();
        for op in ops {
            let (next, pooled) = self.apply(op, &x)?;
            inputs.push(x);
            argmax.push(pooled);
            x = next;
        }
        Ok(Trace {
            inputs,
            argmax,
            logits: x,
        })
    }

    fn apply(&self, op: Op, x: &Tensor<T>) -> Result<(Tensor<T>, Option<Vec<usize>>)> {
        Ok(match op {
            Op::Conv(p) => (
                conv2d(x, &self.params[p].value, &self.params[p + 1].value, 1, 1)?,
                None,
            ),
            Op::Relu => (relu(x), None),
            Op::Pool => {
                let pooled = maxpool2(x)?;
                (pooled.output, Some(pooled.argmax))
            }
            Op::Flatten => {
                let n = x.shape()[0];
                let d = x.len() / n;
                (x.clone().reshape(vec![n, d])?, None)
            }
            Op::Dense(p) => (
                dense(x, &self.params[p].value, &self.params[p + 1].value)?,
                None,
            ),
        })
    }

    /// Back-propagates `grad_logits` through a recorded pass and adds the
    /// parameter gradients into the accumulators.
    pub fn backward(&mut self, trace: &Trace<T>, grad_logits: &Tensor<T>) -> Result<()> {
        let ops = self.arch.ops();
        let mut grad = grad_logits.clone();
        for (i, op) in ops.iter().enumerate().rev() {
            let input = &trace.inputs[i];
            grad = match *op {
                Op::Conv(p) => {
                    let g = conv2d_backward(input, &self.params[p].value, &grad, 1, 1)?;
                    self.params[p].accumulate(&g.kernels)?;
                    self.params[p + 1].accumulate(&g.bias)?;
                    g.input
                }
                Op::Relu => relu_backward(input, &grad)?,
                Op::Pool => maxpool2_backward(
                    &grad,
                    trace.argmax[i].as_deref().expect("pool records argmax"),
                    input.shape(),
                )?,
                Op::Flatten => grad.reshape(input.shape().to_vec())?,
                Op::Dense(p) => {
                    let g = dense_backward(input, &self.params[p].value, &grad)?;
                    self.params[p].accumulate(&g.weights)?;
                    self.params[p + 1].accumulate(&g.bias)?;
                    g.input
                }
            };
        }
        Ok(())
    }

    pub fn logits(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        for op in self.arch.ops() {
            x = self.apply(op, &x)?.0;
        }
        Ok(x)
    }

    /// Class probabilities, one softmax row per image.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(softmax(&self.logits(batch)?)?)
    }

    /// `(class index, probability)` per image.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Vec<(usize, T)>> {
        let logits = self.logits(batch)?;
        let probs = softmax(&logits)?;
        let k = self.num_classes();
        Ok(logits
            .data()
            .chunks_exact(k)
            .zip(probs.data().chunks_exact(k))
            .map(|(l, p)| {
                let c = argmax(l);
                (c, p[c])
            })
            .collect())
    }

    /// Replaces the final dense layer with a fresh one of `new_num_classes`
    /// outputs. Every other parameter is kept bit-exactly; class names are
    /// cleared until the caller assigns the new label set.
    pub fn reinit_head(&mut self, new_num_classes: usize, seed: u64) -> Result<()> {
        if new_num_classes < 2 {
            return Err(ModelError::TooFewClasses(new_num_classes));
        }
        self.arch.num_classes = new_num_classes;
        let shapes = self.arch.parameter_shapes();
        let n = shapes.len();
        for i in [n - 2, n - 1] {
            let (name, shape) = &shapes[i];
            // Offset the stream so a reinit never reproduces the original head.
            self.params[i] = init_param(
                name.clone(),
                shape,
                seed,
                (1 << 32) + i as u64,
                CLASSIFIER_INIT_SCALE,
            );
        }
        self.class_names.clear();
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            class_names: self.class_names.clone(),
            normalization: self.normalization.clone(),
            lineage: self.lineage.clone(),
            params: self
                .params
                .iter()
                .map(|p| Parameter::new(p.name.clone(), p.value.cast()))
                .collect(),
        }
    }
}

/// The classifier layer starts at a tenth of the He scale. With full He
/// scale the pooled features give initial logits with a spread of several
/// units, so a fresh model is already confidently wrong.
const CLASSIFIER_INIT_SCALE: f64 = 0.1;

fn init_param<T: Real>(
    name: String,
    shape: &[usize],
    seed: u64,
    stream: u64,
    scale: f64,
) -> Parameter<T> {
    let value = if shape.len() == 1 {
        Tensor::zeros(shape)
    } else {
        let scale = T::from_f64_lossy(scale);
        he_init::<T>(shape, derive_seed(seed, stream)).map(|v| v * scale)
    };
    Parameter::new(name, value)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(model: &Model<f32>, n: usize, seed: u64) -> Tensor<f32> {
        let shape = model.input_shape(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.iter().product())
            .map(|_| rng.random_range(-1.5f32..1.5))
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn desk_default_parameter_count_matches_hand_count() {
        // conv 3→8: 8·3·9+8 = 224;  conv 8→16: 16·8·9+16 = 1168
        // conv 16→32: 32·16·9+32 = 4640;  conv 32→32: 32·32·9+32 = 9248
        // flatten 32·8·8 = 2048 → dense 64: 2048·64+64 = 131136
        // classifier 64→5: 64·5+5 = 325
        let expected = 224 + 1168 + 4640 + 9248 + 131_136 + 325;
        assert_eq!(expected, 146_741);
        let model = Model::<f32>::build(ArchitectureConfig::desk_default(5), 1).unwrap();
        assert_eq!(model.parameter_count(), expected);
        assert_eq!(model.arch().parameter_count(), expected);
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let mut arch = ArchitectureConfig::desk_default(5);
        arch.input_size = (3, 65, 64);
        let err = Model::<f32>::build(arch, 1).unwrap_err();
        assert!(matches!(err, ModelError::InvalidConfig(ref m) if m.contains("divisible")), "{err}");

        let mut arch = ArchitectureConfig::desk_default(1);
        arch.num_classes = 1;
        assert!(matches!(
            Model::<f32>::build(arch, 1),
            Err(ModelError::InvalidConfig(ref m)) if m.contains("num_classes")
        ));
    }

    #[test]
    fn build_is_deterministic() {
        let arch = ArchitectureConfig::desk_with_input(32, 5);
        let a = Model::<f32>::build(arch.clone(), 9).unwrap();
        let b = Model::<f32>::build(arch.clone(), 9).unwrap();
        let c = Model::<f32>::build(arch, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params()[0].value, c.params()[0].value);
    }

    #[test]
    fn forward_rows_are_distributions_and_near_uniform() {
        let model = Model::<f32>::build(ArchitectureConfig::desk_with_input(32, 5), 3).unwrap();
        let probs = model.forward(&random_batch(&model, 6, 4)).unwrap();
        for row in probs.data().chunks(5) {
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&p| (p - 0.2).abs() < 0.2), "{row:?}");
        }
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let model = Model::<f32>::build(ArchitectureConfig::desk_with_input(32, 5), 3).unwrap();
        let batch = Tensor::<f32>::zeros(&[1, 3, 16, 32]);
        assert!(matches!(model.logits(&batch), Err(ModelError::InputMismatch { .. })));
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.25, 0.5, 0.5, 0.1]), 1);
        assert_eq!(argmax(&[1.0, 1.0]), 0);
        assert_eq!(argmax(&[-3.0, -1.0, -2.0]), 1);
    }

    #[test]
    fn reinit_head_preserves_body() {
        let mut model = Model::<f32>::build(ArchitectureConfig::desk_with_input(32, 10), 3).unwrap();
        let before = model.clone();
        model.reinit_head(10, 77).unwrap();
        let n = model.params().len();
        assert_eq!(model.params()[..n - 2], before.params()[..n - 2]);
        assert_ne!(model.params()[n - 2].value, before.params()[n - 2].value);
        assert!(model.class_names.is_empty());

        model.reinit_head(5, 78).unwrap();
        let probs = model.forward(&random_batch(&model, 2, 1)).unwrap();
        assert_eq!(probs.shape(), &[2, 5]);
        assert_eq!(model.body_params(), before.body_params());

        assert!(matches!(model.reinit_head(1, 0), Err(ModelError::TooFewClasses(1))));
    }

    #[test]
    fn batched_rows_match_single_image_predictions() {
        let model = Model::<f32>::build(ArchitectureConfig::desk_with_input(32, 4), 8).unwrap();
        let batch = random_batch(&model, 3, 5);
        let all = model.logits(&batch).unwrap();
        let per = batch.data().len() / 3;
        for i in 0..3 {
            let single = Tensor::new(
                model.input_shape(1),
                batch.data()[i * per..(i + 1) * per].to_vec(),
            )
            .unwrap();
            let logits = model.logits(&single).unwrap();
            assert_eq!(logits.data(), &all.data()[i * 4..(i + 1) * 4]);
        }
    }

    #[test]
    fn whole_model_gradient_matches_finite_differences() {
        use crate::tensor::{gradcheck::grad_check, softmax_cross_entropy};
        let arch = ArchitectureConfig {
            input_size: (2, 4, 4),
            blocks: vec![BlockSpec {
                conv_count: 1,
                out_channels: 3,
            }],
            head: vec![4],
            num_classes: 3,
        };
        let mut model = Model::<f64>::build(arch, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = Tensor::new(
            vec![2, 2, 4, 4],
            (0..64).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let targets = [0usize, 2];
        let trace = model.forward_trace(&batch).unwrap();
        let (_, g) = softmax_cross_entropy(&trace.logits, &targets).unwrap();
        model.backward(&trace, &g).unwrap();

        for idx in [0, 1, 2, 4] {
            let analytic = model.params()[idx].gradient.clone();
            let point = model.params()[idx].value.clone();
            let err = grad_check(
                |x| {
                    let mut probe = model.clone();
                    probe.params_mut()[idx].value = x.clone();
                    let logits = probe.logits(&batch).unwrap();
                    softmax_cross_entropy(&logits, &targets).unwrap().0
                },
                &point,
                &analytic,
                1e-6,
            );
            assert!(err < 1e-4, "param {idx}: {err}");
        }
    }
}
