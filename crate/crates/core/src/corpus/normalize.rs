use super::{CorpusError, ImageRecord, Result};
use crate::model::Normalization;
use crate::tensor::{Real, Tensor};

/// Smallest standard deviation used when dividing.
pub const STD_FLOOR: f64 = 1e-6;

/// Per-channel mean and population standard deviation of `pixel / 255`
/// over every pixel of `images`. Standard deviations are floored at
/// [`STD_FLOOR`].
pub fn channel_stats(images: &[ImageRecord]) -> Normalization {
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let mut count = 0usize;
    for img in images {
        for px in img.pixels().chunks_exact(3) {
            for c in 0..3 {
                let v = px[c] as f64 / 255.0;
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        count += img.width() * img.height();
    }
    if count == 0 {
        return Normalization::identity(3);
    }
    let n = count as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(STD_FLOOR))
        .collect();
    Normalization { mean, std }
}

/// Stacks equally sized images into `[N,3,H,W]` with
/// `(pixel/255 − mean) / std` per channel.
pub fn normalize_batch<T: Real>(images: &[ImageRecord], stats: &Normalization) -> Result<Tensor<T>> {
    let Some(first) = images.first() else {
        return Err(CorpusError::EmptyManifest);
    };
    if stats.mean.len() != 3 || stats.std.len() != 3 {
        return Err(CorpusError::ChannelCount {
            actual: stats.mean.len().min(stats.std.len()),
        });
    }
    let (w, h) = (first.width(), first.height());
    if let Some(other) = images.iter().find(|i| (i.width(), i.height()) != (w, h)) {
        return Err(CorpusError::MixedSizes {
            first: (w, h),
            other: (other.width(), other.height()),
        });
    }
    // Precompute the 256 possible values per channel.
    let table: Vec<[T; 256]> = (0..3)
        .map(|c| {
            let std = stats.std[c].max(STD_FLOOR);
            std::array::from_fn(|v| T::from_f64_lossy((v as f64 / 255.0 - stats.mean[c]) / std))
        })
        .collect();
    let plane = w * h;
    let mut data = Vec::with_capacity(images.len() * 3 * plane);
    for img in images {
        for (c, lut) in table.iter().enumerate() {
            data.extend(img.pixels()[c..].iter().step_by(3).map(|&v| lut[v as usize]));
        }
    }
    Ok(Tensor::new(vec![images.len(), 3, h, w], data).expect("sizes consistent"))
}
