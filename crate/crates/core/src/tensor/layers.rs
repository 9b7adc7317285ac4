use rayon::prelude::*;

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::{Real, Result, Tensor, TensorError};

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel_h: usize,
    kernel_w: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Unfolds one image into a `[C·kh·kw, H'·W']` patch matrix.
    fn im2col<T: Real>(&self, image: &[T]) -> Vec<T> {
        let positions = self.positions();
        let mut cols = vec![T::zero(); self.patch_len() * positions];
        for c in 0..self.channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ky) * self.kernel_w + kx;
                    let dst = &mut cols[row * positions..(row + 1) * positions];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.width as isize {
                                dst[oy * self.out_w + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of `im2col`: scatters patch gradients back onto the image.
    fn col2im<T: Real>(&self, cols: &[T]) -> Vec<T> {
        let positions = self.positions();
        let mut image = vec![T::zero(); self.image_len()];
        for c in 0..self.channels {
            let plane =
                &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ky) * self.kernel_w + kx;
                    let src = &cols[row * positions..(row + 1) * positions];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.width as isize {
                                plane[iy as usize * self.width + ix as usize] +=
                                    src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
        image
    }
}

fn conv_geometry<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeometry> {
    const OP: &str = "conv2d";
    input.require_rank(OP, 4)?;
    kernels.require_rank(OP, 4)?;
    let [_, channels, height, width] = [input.shape[0], input.shape[1], input.shape[2], input.shape[3]];
    let [_, kc, kernel_h, kernel_w] =
        [kernels.shape[0], kernels.shape[1], kernels.shape[2], kernels.shape[3]];
    if kc != channels {
        return Err(mismatch(
            OP,
            format!("input has {channels} channels but kernels expect {kc}"),
        ));
    }
    if stride == 0 {
        return Err(mismatch(OP, "stride must be positive".into()));
    }
    if kernel_h > height + 2 * pad || kernel_w > width + 2 * pad {
        return Err(mismatch(
            OP,
            format!("kernel {kernel_h}x{kernel_w} larger than padded input {height}x{width} (pad {pad})"),
        ));
    }
    Ok(ConvGeometry {
        channels,
        height,
        width,
        kernel_h,
        kernel_w,
        stride,
        pad,
        out_h: (height + 2 * pad - kernel_h) / stride + 1,
        out_w: (width + 2 * pad - kernel_w) / stride + 1,
    })
}

/// 2-D cross-correlation with zero padding.
///
/// `input` is `[N,C,H,W]`, `kernels` is `[K,C,kh,kw]`, `bias` is `[K]`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let geo = conv_geometry(input, kernels, stride, pad)?;
    let out_channels = kernels.shape[0];
    if bias.shape != [out_channels] {
        return Err(mismatch(
            "conv2d",
            format!("bias shape {:?} does not match {out_channels} kernels", bias.shape),
        ));
    }
    input.require_finite("conv2d", "input")?;

    let positions = geo.positions();
    let per_sample: Vec<Vec<T>> = input
        .data
        .par_chunks(geo.image_len())
        .map(|image| {
            let cols = geo.im2col(image);
            let mut out = vec![T::zero(); out_channels * positions];
            for (row, &b) in out.chunks_exact_mut(positions).zip(&bias.data) {
                row.iter_mut().for_each(|v| *v = b);
            }
            gemm_nn(out_channels, geo.patch_len(), positions, &kernels.data, &cols, &mut out);
            out
        })
        .collect();

    Tensor::new(
        vec![input.shape[0], out_channels, geo.out_h, geo.out_w],
        per_sample.concat(),
    )
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads<T>> {
    let geo = conv_geometry(input, kernels, stride, pad)?;
    let batch = input.shape[0];
    let out_channels = kernels.shape[0];
    let expected = [batch, out_channels, geo.out_h, geo.out_w];
    if grad_out.shape != expected {
        return Err(mismatch(
            "conv2d_backward",
            format!("grad_out shape {:?}, expected {expected:?}", grad_out.shape),
        ));
    }
    grad_out.require_finite("conv2d_backward", "grad_out")?;

    let positions = geo.positions();
    let patch = geo.patch_len();
    let per_sample: Vec<(Vec<T>, Vec<T>, Vec<T>)> = input
        .data
        .par_chunks(geo.image_len())
        .zip(grad_out.data.par_chunks(out_channels * positions))
        .map(|(image, dy)| {
            let cols = geo.im2col(image);
            let mut dk = vec![T::zero(); out_channels * patch];
            gemm_nt(out_channels, positions, patch, dy, &cols, &mut dk);
            let mut dcols = vec![T::zero(); patch * positions];
            gemm_tn(out_channels, patch, positions, &kernels.data, dy, &mut dcols);
            let db = dy.chunks_exact(positions).map(|r| r.iter().copied().sum()).collect();
            (geo.col2im(&dcols), dk, db)
        })
        .collect();

    // Fixed index-order reduction keeps gradients independent of scheduling.
    let mut grad_kernels = vec![T::zero(); out_channels * patch];
    let mut grad_bias = vec![T::zero(); out_channels];
    let mut grad_input = Vec::with_capacity(input.len());
    for (dx, dk, db) in per_sample {
        grad_input.extend(dx);
        grad_kernels.iter_mut().zip(dk).for_each(|(a, b)| *a += b);
        grad_bias.iter_mut().zip(db).for_each(|(a, b)| *a += b);
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape.clone(), grad_input)?,
        kernels: Tensor::new(kernels.shape.clone(), grad_kernels)?,
        bias: Tensor::new(vec![out_channels], grad_bias)?,
    })
}

#[derive(Debug, Clone)]
pub struct PoolOutput<T> {
    pub output: Tensor<T>,
    /// Flat input index chosen for every output element.
    pub argmax: Vec<usize>,
}

/// Non-overlapping 2×2 max pooling. Ties go to the first element in
/// row-major order within the window.
pub fn maxpool2<T: Real>(input: &Tensor<T>) -> Result<PoolOutput<T>> {
    input.require_rank("maxpool2", 4)?;
    input.require_finite("maxpool2", "input")?;
    let (n, c, h, w) = (input.shape[0], input.shape[1], input.shape[2], input.shape[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::OddPoolInput { height: h, width: w });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut output = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for idx in [
                    base + 2 * oy * w + 2 * ox + 1,
                    base + (2 * oy + 1) * w + 2 * ox,
                    base + (2 * oy + 1) * w + 2 * ox + 1,
                ] {
                    if input.data[idx] > input.data[best] {
                        best = idx;
                    }
                }
                output.push(input.data[best]);
                argmax.push(best);
            }
        }
    }
    Ok(PoolOutput {
        output: Tensor::new(vec![n, c, oh, ow], output)?,
        argmax,
    })
}

pub fn maxpool2_backward<T: Real>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    if grad_out.len() != argmax.len() {
        return Err(mismatch(
            "maxpool2_backward",
            format!("{} gradients for {} pooled positions", grad_out.len(), argmax.len()),
        ));
    }
    let mut grad = Tensor::zeros(input_shape);
    for (&idx, &g) in argmax.iter().zip(&grad_out.data) {
        grad.data[idx] += g;
    }
    Ok(grad)
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes the gradient where the forward input was strictly positive.
pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape != grad_out.shape {
        return Err(mismatch(
            "relu_backward",
            format!("input {:?} vs grad {:?}", input.shape, grad_out.shape),
        ));
    }
    let data = input
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape.clone(), data)
}

fn dense_dims<T: Real>(input: &Tensor<T>, weights: &Tensor<T>) -> Result<(usize, usize, usize)> {
    input.require_rank("dense", 2)?;
    weights.require_rank("dense", 2)?;
    let (n, d) = (input.shape[0], input.shape[1]);
    let (wd, m) = (weights.shape[0], weights.shape[1]);
    if d != wd {
        return Err(mismatch(
            "dense",
            format!("input {:?} cannot multiply weights {:?}", input.shape, weights.shape),
        ));
    }
    Ok((n, d, m))
}

/// `input[N,D] · weights[D,M] + bias[M]`
pub fn dense<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d, m) = dense_dims(input, weights)?;
    if bias.shape != [m] {
        return Err(mismatch(
            "dense",
            format!("bias shape {:?} does not match output width {m}", bias.shape),
        ));
    }
    input.require_finite("dense", "input")?;
    let mut out = Vec::with_capacity(n * m);
    for _ in 0..n {
        out.extend_from_slice(&bias.data);
    }
    gemm_nn(n, d, m, &input.data, &weights.data, &mut out);
    Tensor::new(vec![n, m], out)
}

#[derive(Debug, Clone)]
pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn dense_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<DenseGrads<T>> {
    let (n, d, m) = dense_dims(input, weights)?;
    if grad_out.shape != [n, m] {
        return Err(mismatch(
            "dense_backward",
            format!("grad_out shape {:?}, expected [{n}, {m}]", grad_out.shape),
        ));
    }
    grad_out.require_finite("dense_backward", "grad_out")?;
    let mut gi = vec![T::zero(); n * d];
    gemm_nt(n, m, d, &grad_out.data, &weights.data, &mut gi);
    let mut gw = vec![T::zero(); d * m];
    gemm_tn(n, d, m, &input.data, &grad_out.data, &mut gw);
    let mut gb = vec![T::zero(); m];
    for row in grad_out.data.chunks_exact(m) {
        gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
    }
    Ok(DenseGrads {
        input: Tensor::new(vec![n, d], gi)?,
        weights: Tensor::new(vec![d, m], gw)?,
        bias: Tensor::new(vec![m], gb)?,
    })
}

/// Row-wise softmax of `[N,K]` logits, stabilized by the row maximum.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    logits.require_rank("softmax", 2)?;
    logits.require_finite("softmax", "logits")?;
    let k = logits.shape[1];
    let mut out = logits.data.clone();
    for row in out.chunks_exact_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v = *v / total);
    }
    Tensor::new(logits.shape.clone(), out)
}

/// Mean cross-entropy of `targets` under softmax(`logits`) and its gradient
/// with respect to the logits, `(softmax − one_hot) / N`.
pub fn softmax_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    targets: &[usize],
) -> Result<(T, Tensor<T>)> {
    logits.require_rank("softmax_cross_entropy", 2)?;
    let (n, k) = (logits.shape[0], logits.shape[1]);
    if targets.len() != n {
        return Err(mismatch(
            "softmax_cross_entropy",
            format!("{} targets for {n} rows", targets.len()),
        ));
    }
    if let Some((row, &target)) = targets.iter().enumerate().find(|(_, &t)| t >= k) {
        return Err(TensorError::TargetOutOfRange {
            row,
            target,
            classes: k,
        });
    }
    logits.require_finite("softmax_cross_entropy", "logits")?;

    let scale = T::one() / T::from_usize(n).expect("batch size fits");
    let mut grad = Vec::with_capacity(n * k);
    let mut loss = T::zero();
    for (row, &target) in logits.data.chunks_exact(k).zip(targets) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&z| (z - max).exp()).sum();
        let log_sum = sum.ln();
        loss += log_sum - (row[target] - max);
        for (j, &z) in row.iter().enumerate() {
            let p = (z - max).exp() / sum;
            let indicator = if j == target { T::one() } else { T::zero() };
            grad.push((p - indicator) * scale);
        }
    }
    Ok((loss * scale, Tensor::new(logits.shape.clone(), grad)?))
}
