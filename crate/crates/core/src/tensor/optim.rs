use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Real, Result, Tensor, TensorError};

/// A trainable tensor with its gradient accumulator and momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub gradient: Tensor<T>,
    pub velocity: Tensor<T>,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let gradient = Tensor::zeros(value.shape());
        let velocity = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            gradient,
            velocity,
        }
    }

    pub fn zero_grad(&mut self) {
        self.gradient.fill_zero();
    }

    /// Adds `grad` into the accumulated gradient.
    pub fn accumulate(&mut self, grad: &Tensor<T>) -> Result<()> {
        if grad.shape() != self.value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "accumulate",
                detail: format!(
                    "gradient {:?} for parameter `{}` of shape {:?}",
                    grad.shape(),
                    self.name,
                    self.value.shape()
                ),
            });
        }
        for (g, &d) in self.gradient.data_mut().iter_mut().zip(grad.data()) {
            *g += d;
        }
        Ok(())
    }
}

/// One SGD step with classical momentum:
/// `v ← momentum·v − lr·g`, `w ← w + v`, then `g ← 0`.
///
/// All gradients are checked before anything is updated, so a non-finite
/// gradient leaves every parameter untouched.
pub fn sgd_momentum_step<'a, T, I>(params: I, lr: f64, momentum: f64) -> Result<()>
where
    T: Real,
    I: IntoIterator<Item = &'a mut Parameter<T>>,
{
    let mut params: Vec<&mut Parameter<T>> = params.into_iter().collect();
    if let Some(bad) = params.iter().find(|p| !p.gradient.is_finite()) {
        return Err(TensorError::NonFiniteGradient(bad.name.clone()));
    }
    let lr = T::from_f64_lossy(lr);
    let momentum = T::from_f64_lossy(momentum);
    for p in params.iter_mut() {
        let Parameter {
            value,
            gradient,
            velocity,
            ..
        } = &mut **p;
        for ((w, v), g) in value
            .data_mut()
            .iter_mut()
            .zip(velocity.data_mut().iter_mut())
            .zip(gradient.data())
        {
            *v = momentum * *v - lr * *g;
            *w += *v;
        }
        gradient.fill_zero();
    }
    Ok(())
}

/// Fan-in of a weight tensor: `C·kh·kw` for conv kernels `[K,C,kh,kw]`,
/// `D` for dense weights `[D,M]`.
pub(crate) fn fan_in(shape: &[usize]) -> usize {
    match shape.len() {
        4 => shape[1..].iter().product(),
        2 => shape[0],
        _ => shape.iter().product(),
    }
}

/// He-normal initialization: zero-mean Gaussian with std `sqrt(2/fan_in)`.
pub fn he_init<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let std = (2.0 / fan_in(shape) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("std is finite and positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| T::from_f64_lossy(normal.sample(&mut rng)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}
