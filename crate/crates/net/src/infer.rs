//! Sliding-window inference with Gaussian-weighted fusion.
//!
//! Window scores are accumulated in 64-bit fixed point, so the fused result
//! does not depend on the order in which windows are visited.

use pvseg_core::{Grid, LabelMap, Volume};
use rayon::prelude::*;

use crate::error::{NetError, Result};
use crate::model::NetModel;
use crate::ops::{self, Act};

/// Fixed-point scale of accumulated weights and scores. At most four windows
/// cover a voxel along each axis, and 64 * 2^55 stays below `i64::MAX`.
const FIXED_SCALE: f64 = (1u64 << 55) as f64;
/// Floor on the importance map so that every voxel of a window counts.
const MIN_WEIGHT: f64 = 1e-6;
/// Windows evaluated per parallel chunk.
const CHUNK: usize = 8;

/// Window start offsets along one axis with 50% overlap; the last window is
/// clamped to the end of the axis.
pub fn window_starts(d: usize, p: usize) -> Vec<usize> {
    if d <= p {
        return vec![0];
    }
    let step = (p / 2).max(1);
    let n = (d - p).div_ceil(step) + 1;
    (0..n)
        .map(|i| ((i * (d - p)) as f64 / (n - 1) as f64).round() as usize)
        .collect()
}

/// Gaussian importance map over a patch: sigma = patch/8 per axis, peak 1 at
/// the centre.
pub fn gaussian_importance(patch: [usize; 3]) -> Vec<f64> {
    let axis = |p: usize| -> Vec<f64> {
        let c = (p as f64 - 1.0) / 2.0;
        let s = p as f64 / 8.0;
        (0..p).map(|i| (-(i as f64 - c).powi(2) / (2.0 * s * s)).exp()).collect()
    };
    let (gx, gy, gz) = (axis(patch[0]), axis(patch[1]), axis(patch[2]));
    let mut w = Vec::with_capacity(patch.iter().product());
    for z in &gz {
        for y in &gy {
            for x in &gx {
                w.push(x * y * z);
            }
        }
    }
    let max = w.iter().copied().fold(0.0, f64::max);
    w.iter().map(|v| (v / max).max(MIN_WEIGHT)).collect()
}

/// Window origins in z-major, then y, then x order.
pub fn window_origins(dims: [usize; 3], patch: [usize; 3]) -> Vec<[usize; 3]> {
    let (sx, sy, sz) = (
        window_starts(dims[0], patch[0]),
        window_starts(dims[1], patch[1]),
        window_starts(dims[2], patch[2]),
    );
    let mut out = Vec::new();
    for &z in &sz {
        for &y in &sy {
            for &x in &sx {
                out.push([x, y, z]);
            }
        }
    }
    out
}

/// Fused class probabilities, `[class][voxel]`, on the input grid.
#[derive(Debug, Clone)]
pub struct Probabilities {
    pub classes: usize,
    pub dims: [usize; 3],
    pub data: Vec<f64>,
    /// Accumulated class scores in fixed point, used for the argmax.
    scores: Vec<i64>,
}

impl Probabilities {
    /// Per-voxel argmax with ties going to the lower class id.
    pub fn argmax(&self) -> Vec<u8> {
        let n = self.dims.iter().product();
        (0..n)
            .map(|i| {
                let mut best = 0;
                for c in 1..self.classes {
                    if self.scores[c * n + i] > self.scores[best * n + i] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }
}

fn stack_channels(channels: &[Volume], pad_to: [usize; 3]) -> Result<Act> {
    let first = channels.first().ok_or_else(|| NetError::Shape("no input channels".into()))?;
    for c in &channels[1..] {
        first.grid.ensure_matches(&c.grid, "image channels")?;
    }
    let dims = first.dims();
    let mut a = Act::zeros(channels.len(), pad_to);
    let n = a.voxels();
    for (c, v) in channels.iter().enumerate() {
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    a.data[c * n + i + pad_to[0] * (j + pad_to[1] * k)] = v.get(i, j, k) as f64;
                }
            }
        }
    }
    Ok(a)
}

fn crop(src: &Act, origin: [usize; 3], patch: [usize; 3]) -> Act {
    let mut out = Act::zeros(src.c, patch);
    let (n_in, n_out) = (src.voxels(), out.voxels());
    let d = src.dims;
    for c in 0..src.c {
        for k in 0..patch[2] {
            for j in 0..patch[1] {
                let s = c * n_in + origin[0] + d[0] * ((origin[1] + j) + d[1] * (origin[2] + k));
                let o = c * n_out + patch[0] * (j + patch[1] * k);
                out.data[o..o + patch[0]].copy_from_slice(&src.data[s..s + patch[0]]);
            }
        }
    }
    out
}

/// Fused probabilities with windows accumulated in the given order. `order`
/// must be a permutation of the window indices from [`window_origins`] on
/// the padded volume; `None` uses the natural order.
pub fn infer_probabilities(model: &NetModel, channels: &[Volume], order: Option<&[usize]>) -> Result<Probabilities> {
    let cfg = &model.cfg;
    if channels.len() != cfg.in_channels {
        return Err(NetError::Shape(format!(
            "model expects {} input channels, got {}",
            cfg.in_channels,
            channels.len()
        )));
    }
    let dims = channels[0].dims();
    let patch = cfg.patch_size;
    let padded: [usize; 3] = std::array::from_fn(|a| dims[a].max(patch[a]));
    let input = stack_channels(channels, padded)?;
    if input.data.iter().any(|v| !v.is_finite()) {
        return Err(NetError::NonFinite("input volume".into()));
    }
    let origins = window_origins(padded, patch);
    let order: Vec<usize> = match order {
        Some(o) => {
            let mut sorted = o.to_vec();
            sorted.sort_unstable();
            if sorted != (0..origins.len()).collect::<Vec<_>>() {
                return Err(NetError::Shape("window order is not a permutation".into()));
            }
            o.to_vec()
        }
        None => (0..origins.len()).collect(),
    };
    let weights = gaussian_importance(patch);
    let wq: Vec<i64> = weights.iter().map(|w| (w * FIXED_SCALE).round() as i64).collect();
    let k = cfg.num_classes;
    let n_pad = input.voxels();
    let mut scores = vec![0i64; k * n_pad];
    let mut wsum = vec![0i64; n_pad];
    let pn: usize = patch.iter().product();

    for chunk in order.chunks(CHUNK) {
        let probs: Vec<Result<Act>> = chunk
            .par_iter()
            .map(|&w| {
                let x = crop(&input, origins[w], patch);
                let logits = model.forward(std::slice::from_ref(&x))?;
                Ok(ops::softmax(&logits[0]))
            })
            .collect();
        for (&w, u) in chunk.iter().zip(probs) {
            let u = u?;
            let o = origins[w];
            for z in 0..patch[2] {
                for y in 0..patch[1] {
                    for x in 0..patch[0] {
                        let p = x + patch[0] * (y + patch[1] * z);
                        let g = o[0] + x + padded[0] * ((o[1] + y) + padded[1] * (o[2] + z));
                        wsum[g] += wq[p];
                        for c in 0..k {
                            scores[c * n_pad + g] += (weights[p] * u.data[c * pn + p] * FIXED_SCALE).round() as i64;
                        }
                    }
                }
            }
        }
    }

    let n: usize = dims.iter().product();
    let mut data = vec![0.0; k * n];
    let mut cropped = vec![0i64; k * n];
    for kz in 0..dims[2] {
        for jy in 0..dims[1] {
            for ix in 0..dims[0] {
                let g = ix + padded[0] * (jy + padded[1] * kz);
                let o = ix + dims[0] * (jy + dims[1] * kz);
                for c in 0..k {
                    cropped[c * n + o] = scores[c * n_pad + g];
                    data[c * n + o] = scores[c * n_pad + g] as f64 / wsum[g] as f64;
                }
            }
        }
    }
    Ok(Probabilities {
        classes: k,
        dims,
        data,
        scores: cropped,
    })
}

/// Label map predicted for a preprocessed image (one volume per channel).
pub fn infer(model: &NetModel, channels: &[Volume]) -> Result<LabelMap> {
    let probs = infer_probabilities(model, channels, None)?;
    let grid: Grid = channels[0].grid.clone();
    Ok(LabelMap::new(grid, probs.argmax())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starts_cover_with_half_overlap() {
        assert_eq!(window_starts(32, 32), vec![0]);
        assert_eq!(window_starts(20, 32), vec![0]);
        assert_eq!(window_starts(48, 32), vec![0, 16]);
        assert_eq!(window_starts(64, 32), vec![0, 16, 32]);
        let s = window_starts(50, 32);
        assert_eq!((s[0], *s.last().unwrap()), (0, 18));
        for w in s.windows(2) {
            assert!(w[1] - w[0] <= 16);
        }
    }

    #[test]
    fn at_most_four_windows_cover_a_voxel() {
        for p in [2, 4, 8, 16, 32] {
            for d in p..6 * p {
                let s = window_starts(d, p);
                for x in 0..d {
                    let n = s.iter().filter(|&&o| o <= x && x < o + p).count();
                    assert!((1..=4).contains(&n), "d {d} p {p} x {x}: {n}");
                }
            }
        }
    }

    #[test]
    fn importance_peaks_at_centre() {
        let w = gaussian_importance([8, 8, 8]);
        let max = w.iter().copied().fold(0.0, f64::max);
        assert_eq!(max, 1.0);
        assert!(w.iter().all(|&v| v >= MIN_WEIGHT));
        // symmetric under reflection through the centre
        assert_eq!(w[0], w[511]);
    }
}
