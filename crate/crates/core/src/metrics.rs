//! Estimators and image-quality metrics.

use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::diffcore::Tensor;
use crate::model::CTrumpet;
use crate::{Error, Result};

/// `10 log10(|x|^2 / |x - x_hat|^2)`; `+inf` when the two agree exactly.
pub fn snr_db(reference: &[f64], estimate: &[f64]) -> f64 {
    let signal: f64 = reference.iter().map(|v| v * v).sum();
    let err: f64 = reference.iter().zip(estimate).map(|(a, b)| (a - b).powi(2)).sum();
    if err == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (signal / err).log10()
}

pub const SSIM_WINDOW: usize = 8;

/// Mean structural similarity over all 8x8 windows (stride 1) of two
/// `rows x cols` images, with `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2` and `L` the
/// data range of the reference.
pub fn ssim(reference: &[f64], estimate: &[f64], rows: usize, cols: usize) -> Result<f64> {
    if reference.len() != rows * cols || estimate.len() != rows * cols {
        return Err(Error::Contract(format!("ssim expects two {rows}x{cols} images")));
    }
    let w = SSIM_WINDOW;
    if rows < w || cols < w {
        return Err(Error::Contract(format!("ssim needs images of at least {w}x{w}")));
    }
    let (lo, hi) = reference.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
    let n = (w * w) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=rows - w {
        for c0 in 0..=cols - w {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in r0..r0 + w {
                for c in c0..c0 + w {
                    let (x, y) = (reference[r * cols + c], estimate[r * cols + c]);
                    sx += x;
                    sy += y;
                    sxx += x * x;
                    syy += y * y;
                    sxy += x * y;
                }
            }
            let (mx, my) = (sx / n, sy / n);
            // sample (unbiased) window statistics
            let vx = (sxx - n * mx * mx) / (n - 1.0);
            let vy = (syy - n * my * my) / (n - 1.0);
            let cxy = (sxy - n * mx * my) / (n - 1.0);
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Pixel-wise sample mean and standard deviation of `K` samples (`[K, D]`);
/// the square root is taken after averaging the squared deviations.
pub fn sample_moments(samples: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    if samples.rank() != 2 || samples.rows() < 2 {
        return Err(Error::Contract(format!("need at least two samples as rows, got {:?}", samples.shape())));
    }
    let (k, d) = (samples.rows(), samples.cols());
    let mut mean = vec![0.0; d];
    for i in 0..k {
        for (m, v) in mean.iter_mut().zip(samples.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= k as f64);
    let mut var = vec![0.0; d];
    for i in 0..k {
        for ((s, v), m) in var.iter_mut().zip(samples.row(i)).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    Ok((mean, var.into_iter().map(|s| (s / k as f64).sqrt()).collect()))
}

/// MMSE estimate and pixel-wise UQ from `k` posterior samples for one conditioning row.
pub fn mmse_uq<R: Rng + ?Sized>(model: &CTrumpet, cond: &Tensor, k: usize, rng: &mut R) -> Result<(Vec<f64>, Vec<f64>)> {
    if k < 2 {
        return Err(Error::Contract(format!("need K >= 2 posterior samples, got {k}")));
    }
    sample_moments(&model.sample_posterior(cond, k, rng)?)
}

/// Pearson correlation; 0 when either input is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Kolmogorov-Smirnov statistic of a sample against the standard normal.
pub fn ks_standard_normal(samples: &[f64]) -> f64 {
    let normal = Normal::standard();
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = normal.cdf(v);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}
