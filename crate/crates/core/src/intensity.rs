//! Intensity operators: Otsu foreground, unit rescaling, percentile clipping
//! with z-score normalisation.

use crate::error::{Error, Result};
use crate::volume::{Mask, Volume};

pub const OTSU_BINS: usize = 256;

/// Relative tolerance under which two between-class variances count as tied.
pub const OTSU_TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct OtsuResult {
    pub threshold: f64,
    /// Index of the last bin assigned to the background class.
    pub bin: usize,
    pub mask: Mask,
}

/// Bin `b` covers `(lo + b*w, lo + (b+1)*w]`, with `lo` itself in bin 0, so
/// `v > upper_edge(b)` holds exactly when `bin_of(v) > b`.
#[inline]
pub(crate) fn otsu_bin(v: f64, lo: f64, width: f64) -> usize {
    let x = ((v - lo) / width).ceil() as i64 - 1;
    x.clamp(0, OTSU_BINS as i64 - 1) as usize
}

/// Otsu threshold over a 256-bin histogram of `[min, max]`.
///
/// Class means use the exact voxel values collected per bin, and among
/// maximal splits the lowest threshold wins. The mask selects voxels strictly
/// above the threshold.
pub fn otsu_foreground(vol: &Volume) -> Result<OtsuResult> {
    let (lo, hi) = vol.min_max();
    let (lo, hi) = (lo as f64, hi as f64);
    if lo >= hi {
        return Err(Error::Degenerate(
            "Otsu threshold is undefined on a constant volume".into(),
        ));
    }
    let width = (hi - lo) / OTSU_BINS as f64;
    let mut count = [0u64; OTSU_BINS];
    let mut sum = [0f64; OTSU_BINS];
    let bins: Vec<u16> = vol
        .data
        .iter()
        .map(|&v| {
            let b = otsu_bin(v as f64, lo, width);
            count[b] += 1;
            sum[b] += v as f64;
            b as u16
        })
        .collect();

    let total_n = vol.data.len() as f64;
    let total_sum: f64 = sum.iter().sum();
    let mut best_bin = 0usize;
    let mut best_var = f64::NEG_INFINITY;
    let (mut n0, mut s0) = (0u64, 0f64);
    for b in 0..OTSU_BINS - 1 {
        n0 += count[b];
        s0 += sum[b];
        let n1 = total_n - n0 as f64;
        if n0 == 0 || n1 == 0.0 {
            continue;
        }
        let w0 = n0 as f64 / total_n;
        let w1 = n1 / total_n;
        let m0 = s0 / n0 as f64;
        let m1 = (total_sum - s0) / n1;
        let var = w0 * w1 * (m0 - m1) * (m0 - m1);
        if var > best_var * (1.0 + OTSU_TIE_TOLERANCE) || best_var == f64::NEG_INFINITY {
            best_var = var;
            best_bin = b;
        }
    }
    let threshold = lo + (best_bin + 1) as f64 * width;
    let mask = Mask {
        dims: vol.dims(),
        data: bins.iter().map(|&b| b as usize > best_bin).collect(),
    };
    Ok(OtsuResult {
        threshold,
        bin: best_bin,
        mask,
    })
}

/// Affine map of the (masked) range onto `[0, 1]`; voxels outside the mask
/// become 0.
pub fn rescale_unit(vol: &Volume, mask: Option<&Mask>) -> Result<Volume> {
    if let Some(m) = mask {
        m.ensure_dims(vol.dims())?;
    }
    let (lo, hi) = vol
        .masked_min_max(mask)
        .ok_or_else(|| Error::Degenerate("rescale mask selects no voxels".into()))?;
    if lo >= hi {
        return Err(Error::Degenerate("constant intensity under rescale mask".into()));
    }
    let (lo, hi) = (lo as f64, hi as f64);
    let range = hi - lo;
    let data = vol
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if mask.is_none_or(|m| m.data[i]) {
                ((v as f64 - lo) / range) as f32
            } else {
                0.0
            }
        })
        .collect();
    Ok(Volume {
        grid: vol.grid.clone(),
        data,
    })
}

/// Percentile with linear interpolation between order statistics
/// (position `p/100 * (n-1)`). `sorted` must be ascending and non-empty.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = (p / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let t = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * t
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZScoreStats {
    pub clip_low: f64,
    pub clip_high: f64,
    pub mean: f64,
    pub std: f64,
}

/// Clip to the 0.5 / 99.5 percentiles of the region and z-score with the
/// clipped region's mean and population standard deviation. With a mask the
/// statistics come from the masked voxels and voxels outside it are set to 0.
pub fn clip_zscore(vol: &Volume, mask: Option<&Mask>) -> Result<Volume> {
    clip_zscore_with_stats(vol, mask).map(|(v, _)| v)
}

pub fn clip_zscore_with_stats(vol: &Volume, mask: Option<&Mask>) -> Result<(Volume, ZScoreStats)> {
    if let Some(m) = mask {
        m.ensure_dims(vol.dims())?;
    }
    let mut region: Vec<f64> = vol
        .data
        .iter()
        .enumerate()
        .filter(|(i, _)| mask.is_none_or(|m| m.data[*i]))
        .map(|(_, &v)| v as f64)
        .collect();
    if region.len() < 2 {
        return Err(Error::Degenerate("z-score region has fewer than 2 voxels".into()));
    }
    region.sort_by(|a, b| a.total_cmp(b));
    let clip_low = percentile_sorted(&region, 0.5);
    let clip_high = percentile_sorted(&region, 99.5);
    let n = region.len() as f64;
    let mean = region.iter().map(|v| v.clamp(clip_low, clip_high)).sum::<f64>() / n;
    let var = region
        .iter()
        .map(|v| {
            let d = v.clamp(clip_low, clip_high) - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if !(std > 0.0) {
        return Err(Error::Degenerate("zero standard deviation after clipping".into()));
    }
    let data = vol
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if mask.is_none_or(|m| m.data[i]) {
                (((v as f64).clamp(clip_low, clip_high) - mean) / std) as f32
            } else {
                0.0
            }
        })
        .collect();
    Ok((
        Volume {
            grid: vol.grid.clone(),
            data,
        },
        ZScoreStats {
            clip_low,
            clip_high,
            mean,
            std,
        },
    ))
}
