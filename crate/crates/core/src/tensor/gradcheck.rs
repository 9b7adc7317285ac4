//! Central finite-difference oracle for the layer backward passes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{
    conv2d, conv2d_backward, dense, dense_backward, maxpool2, maxpool2_backward, relu,
    relu_backward, softmax_cross_entropy, Precision, Real, Tensor,
};

pub const TOLERANCE_F64: f64 = 1e-5;
pub const TOLERANCE_F32: f64 = 1e-3;
pub const DEFAULT_EPS: f64 = 1e-5;

/// Worst relative error between `analytic` and the central difference
/// `(f(x+eps) − f(x−eps)) / 2eps` taken coordinate by coordinate at `point`.
/// The denominator is `max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, analytic: &Tensor<f64>, eps: f64) -> f64
where
    F: Fn(&Tensor<f64>) -> f64,
{
    assert_eq!(point.shape(), analytic.shape(), "gradient shape must match point");
    let mut probe = point.clone();
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let x = point.data()[i];
        probe.data_mut()[i] = x + eps;
        let up = f(&probe);
        probe.data_mut()[i] = x - eps;
        let down = f(&probe);
        probe.data_mut()[i] = x;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}

/// Which layer and which input of it a check differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Conv2dInput,
    Conv2dKernels,
    Conv2dBias,
    Maxpool2,
    Relu,
    DenseInput,
    DenseWeights,
    DenseBias,
    SoftmaxCrossEntropy,
}

impl Target {
    pub const ALL: [Target; 9] = [
        Target::Conv2dInput,
        Target::Conv2dKernels,
        Target::Conv2dBias,
        Target::Maxpool2,
        Target::Relu,
        Target::DenseInput,
        Target::DenseWeights,
        Target::DenseBias,
        Target::SoftmaxCrossEntropy,
    ];

    pub fn layer(self) -> &'static str {
        match self {
            Target::Conv2dInput | Target::Conv2dKernels | Target::Conv2dBias => "conv2d",
            Target::Maxpool2 => "maxpool2",
            Target::Relu => "relu",
            Target::DenseInput | Target::DenseWeights | Target::DenseBias => "dense",
            Target::SoftmaxCrossEntropy => "softmax_cross_entropy",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub target: Target,
    pub layer: &'static str,
    pub precision: Precision,
    pub seed: u64,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Random layer inputs for one seed. Every scalar loss is the dot product of
/// the layer output with a fixed random projection, except cross-entropy.
#[derive(Debug, Clone)]
struct Fixture {
    conv_input: Tensor<f64>,
    conv_kernels: Tensor<f64>,
    conv_bias: Tensor<f64>,
    conv_stride: usize,
    conv_pad: usize,
    conv_projection: Tensor<f64>,
    pool_input: Tensor<f64>,
    pool_projection: Tensor<f64>,
    relu_input: Tensor<f64>,
    relu_projection: Tensor<f64>,
    dense_input: Tensor<f64>,
    dense_weights: Tensor<f64>,
    dense_bias: Tensor<f64>,
    dense_projection: Tensor<f64>,
    logits: Tensor<f64>,
    targets: Vec<usize>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape is valid")
}

impl Fixture {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (conv_stride, conv_pad) = if seed % 2 == 0 { (1, 1) } else { (2, 1) };
        let out_side = (5 + 2 * conv_pad - 3) / conv_stride + 1;

        // Distinct, well separated values keep every pooling window away
        // from a tie under the finite-difference perturbation.
        let pool_len = 2 * 2 * 4 * 4;
        let mut ranks: Vec<usize> = (0..pool_len).collect();
        ranks.shuffle(&mut rng);
        let pool_values: Vec<f64> = ranks
            .iter()
            .map(|&r| r as f64 * 0.05 - 0.8)
            .collect();

        // Keep relu inputs clear of the kink at zero.
        let relu_values: Vec<f64> = (0..21)
            .map(|_| {
                let magnitude = rng.random_range(0.1..1.0);
                if rng.random_bool(0.5) {
                    magnitude
                } else {
                    -magnitude
                }
            })
            .collect();

        Self {
            conv_input: uniform(&mut rng, &[1, 2, 5, 5]),
            conv_kernels: uniform(&mut rng, &[3, 2, 3, 3]),
            conv_bias: uniform(&mut rng, &[3]),
            conv_stride,
            conv_pad,
            conv_projection: uniform(&mut rng, &[1, 3, out_side, out_side]),
            pool_input: Tensor::new(vec![2, 2, 4, 4], pool_values).expect("valid"),
            pool_projection: uniform(&mut rng, &[2, 2, 2, 2]),
            relu_input: Tensor::new(vec![3, 7], relu_values).expect("valid"),
            relu_projection: uniform(&mut rng, &[3, 7]),
            dense_input: uniform(&mut rng, &[3, 4]),
            dense_weights: uniform(&mut rng, &[4, 5]),
            dense_bias: uniform(&mut rng, &[5]),
            dense_projection: uniform(&mut rng, &[3, 5]),
            logits: uniform(&mut rng, &[3, 5]).map(|v| 3.0 * v),
            targets: (0..3).map(|_| rng.random_range(0..5)).collect(),
        }
    }

    fn point(&self, target: Target) -> &Tensor<f64> {
        match target {
            Target::Conv2dInput => &self.conv_input,
            Target::Conv2dKernels => &self.conv_kernels,
            Target::Conv2dBias => &self.conv_bias,
            Target::Maxpool2 => &self.pool_input,
            Target::Relu => &self.relu_input,
            Target::DenseInput => &self.dense_input,
            Target::DenseWeights => &self.dense_weights,
            Target::DenseBias => &self.dense_bias,
            Target::SoftmaxCrossEntropy => &self.logits,
        }
    }

    /// Scalar loss with `x` substituted for the target slot.
    fn loss<T: Real>(&self, target: Target, x: &Tensor<T>) -> T {
        let c = |t: &Tensor<f64>| t.cast::<T>();
        let result = match target {
            Target::Conv2dInput | Target::Conv2dKernels | Target::Conv2dBias => {
                let (mut input, mut kernels, mut bias) =
                    (c(&self.conv_input), c(&self.conv_kernels), c(&self.conv_bias));
                match target {
                    Target::Conv2dInput => input = x.clone(),
                    Target::Conv2dKernels => kernels = x.clone(),
                    _ => bias = x.clone(),
                }
                conv2d(&input, &kernels, &bias, self.conv_stride, self.conv_pad)
                    .map(|out| out.dot(&c(&self.conv_projection)))
            }
            Target::Maxpool2 => maxpool2(x).map(|p| p.output.dot(&c(&self.pool_projection))),
            Target::Relu => Ok(relu(x).dot(&c(&self.relu_projection))),
            Target::DenseInput | Target::DenseWeights | Target::DenseBias => {
                let (mut input, mut weights, mut bias) =
                    (c(&self.dense_input), c(&self.dense_weights), c(&self.dense_bias));
                match target {
                    Target::DenseInput => input = x.clone(),
                    Target::DenseWeights => weights = x.clone(),
                    _ => bias = x.clone(),
                }
                dense(&input, &weights, &bias).map(|out| out.dot(&c(&self.dense_projection)))
            }
            Target::SoftmaxCrossEntropy => softmax_cross_entropy(x, &self.targets).map(|(l, _)| l),
        };
        result.expect("fixture shapes are consistent")
    }

    /// Analytic gradient of `loss` via the backward functions, at precision `T`.
    fn analytic<T: Real>(&self, target: Target) -> Tensor<T> {
        let c = |t: &Tensor<f64>| t.cast::<T>();
        let result = match target {
            Target::Conv2dInput | Target::Conv2dKernels | Target::Conv2dBias => conv2d_backward(
                &c(&self.conv_input),
                &c(&self.conv_kernels),
                &c(&self.conv_projection),
                self.conv_stride,
                self.conv_pad,
            )
            .map(|g| match target {
                Target::Conv2dInput => g.input,
                Target::Conv2dKernels => g.kernels,
                _ => g.bias,
            }),
            Target::Maxpool2 => {
                let input = c(&self.pool_input);
                maxpool2(&input).and_then(|p| {
                    maxpool2_backward(&c(&self.pool_projection), &p.argmax, input.shape())
                })
            }
            Target::Relu => relu_backward(&c(&self.relu_input), &c(&self.relu_projection)),
            Target::DenseInput | Target::DenseWeights | Target::DenseBias => dense_backward(
                &c(&self.dense_input),
                &c(&self.dense_weights),
                &c(&self.dense_projection),
            )
            .map(|g| match target {
                Target::DenseInput => g.input,
                Target::DenseWeights => g.weights,
                _ => g.bias,
            }),
            Target::SoftmaxCrossEntropy => {
                softmax_cross_entropy(&c(&self.logits), &self.targets).map(|(_, g)| g)
            }
        };
        result.expect("fixture shapes are consistent")
    }
}

/// Checks one layer input at one seed. The numeric side is always evaluated
/// in 64-bit; `precision` selects where the analytic gradient is computed.
pub fn check_target(target: Target, seed: u64, precision: Precision, eps: f64) -> CheckResult {
    let fixture = Fixture::new(seed);
    let analytic = match precision {
        Precision::F64 => fixture.analytic::<f64>(target),
        Precision::F32 => fixture.analytic::<f32>(target).cast::<f64>(),
    };
    let max_rel_error = grad_check(
        |x| fixture.loss::<f64>(target, x),
        fixture.point(target),
        &analytic,
        eps,
    );
    CheckResult {
        target,
        layer: target.layer(),
        precision,
        seed,
        max_rel_error,
        tolerance: match precision {
            Precision::F64 => TOLERANCE_F64,
            Precision::F32 => TOLERANCE_F32,
        },
    }
}

/// Every target over `seeds`, at 64-bit and at 32-bit.
pub fn run_suite(seeds: std::ops::Range<u64>) -> Vec<CheckResult> {
    let mut results = Vec::new();
    for precision in [Precision::F64, Precision::F32] {
        for target in Target::ALL {
            for seed in seeds.clone() {
                results.push(check_target(target, seed, precision, DEFAULT_EPS));
            }
        }
    }
    results
}
