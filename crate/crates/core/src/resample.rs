//! Resampling under an explicit spacing policy.
//!
//! Output voxel `o` along an axis maps to input index `o * target / native`
//! (voxel 0 centres coincide), clamped to the input extent.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Grid, LabelMap, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum SpacingPolicy {
    /// Keep every image on its native lattice.
    Agnostic,
    /// Resample to a common voxel spacing in mm.
    Target { spacing: [f64; 3] },
}

impl SpacingPolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            SpacingPolicy::Agnostic => Ok(()),
            SpacingPolicy::Target { spacing } => {
                if spacing.iter().all(|s| *s > 0.0 && s.is_finite()) {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument(format!(
                        "target spacing must be positive, got {spacing:?}"
                    )))
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interp {
    Trilinear,
    Nearest,
}

fn target_grid(grid: &Grid, target: [f64; 3]) -> Result<Grid> {
    let mut dims = [0usize; 3];
    for a in 0..3 {
        let d = (grid.dims[a] as f64 * grid.spacing[a] / target[a]).round();
        if d < 1.0 {
            return Err(Error::InvalidArgument(format!(
                "target spacing {:?} leaves axis {a} with zero voxels",
                target
            )));
        }
        dims[a] = d as usize;
    }
    let mut affine = grid.affine;
    for (a, t) in target.iter().enumerate() {
        let ratio = t / grid.spacing[a];
        for row in affine.iter_mut().take(3) {
            row[a] *= ratio;
        }
    }
    Ok(Grid {
        dims,
        spacing: target,
        affine,
    })
}

/// Input-space coordinate of output voxel `o` along one axis.
#[inline]
fn source_coord(o: usize, ratio: f64, n_in: usize) -> f64 {
    (o as f64 * ratio).clamp(0.0, (n_in - 1) as f64)
}

struct AxisWeights {
    lo: Vec<usize>,
    hi: Vec<usize>,
    t: Vec<f64>,
}

fn axis_weights(n_out: usize, n_in: usize, ratio: f64) -> AxisWeights {
    let mut w = AxisWeights {
        lo: Vec::with_capacity(n_out),
        hi: Vec::with_capacity(n_out),
        t: Vec::with_capacity(n_out),
    };
    for o in 0..n_out {
        let x = source_coord(o, ratio, n_in);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        w.lo.push(lo);
        w.hi.push(hi);
        w.t.push(x - lo as f64);
    }
    w
}

fn nearest_index(n_out: usize, n_in: usize, ratio: f64) -> Vec<usize> {
    (0..n_out)
        .map(|o| ((source_coord(o, ratio, n_in) + 0.5).floor() as usize).min(n_in - 1))
        .collect()
}

fn trilinear(vol: &Volume, out: &Grid) -> Vec<f32> {
    let g = &vol.grid;
    let ratio: Vec<f64> = (0..3).map(|a| out.spacing[a] / g.spacing[a]).collect();
    let wx = axis_weights(out.dims[0], g.dims[0], ratio[0]);
    let wy = axis_weights(out.dims[1], g.dims[1], ratio[1]);
    let wz = axis_weights(out.dims[2], g.dims[2], ratio[2]);
    let [ox, oy, _] = out.dims;
    let mut data = vec![0.0f32; out.len()];
    data.par_chunks_mut(ox * oy).enumerate().for_each(|(k, slab)| {
        let (z0, z1, tz) = (wz.lo[k], wz.hi[k], wz.t[k]);
        for j in 0..oy {
            let (y0, y1, ty) = (wy.lo[j], wy.hi[j], wy.t[j]);
            for i in 0..ox {
                let (x0, x1, tx) = (wx.lo[i], wx.hi[i], wx.t[i]);
                let v = |x, y, z| vol.get(x, y, z) as f64;
                let c00 = v(x0, y0, z0) * (1.0 - tx) + v(x1, y0, z0) * tx;
                let c10 = v(x0, y1, z0) * (1.0 - tx) + v(x1, y1, z0) * tx;
                let c01 = v(x0, y0, z1) * (1.0 - tx) + v(x1, y0, z1) * tx;
                let c11 = v(x0, y1, z1) * (1.0 - tx) + v(x1, y1, z1) * tx;
                let c0 = c00 * (1.0 - ty) + c10 * ty;
                let c1 = c01 * (1.0 - ty) + c11 * ty;
                slab[i + ox * j] = (c0 * (1.0 - tz) + c1 * tz) as f32;
            }
        }
    });
    data
}

fn nearest<T: Copy + Send + Sync>(src: &[T], g: &Grid, out: &Grid) -> Vec<T> {
    let ix = nearest_index(out.dims[0], g.dims[0], out.spacing[0] / g.spacing[0]);
    let iy = nearest_index(out.dims[1], g.dims[1], out.spacing[1] / g.spacing[1]);
    let iz = nearest_index(out.dims[2], g.dims[2], out.spacing[2] / g.spacing[2]);
    let mut data = Vec::with_capacity(out.len());
    for &z in &iz {
        for &y in &iy {
            for &x in &ix {
                data.push(src[g.index(x, y, z)]);
            }
        }
    }
    data
}

/// Resamples an image. `Agnostic` returns a bit-identical copy.
pub fn resample_volume(vol: &Volume, policy: &SpacingPolicy, interp: Interp) -> Result<Volume> {
    policy.validate()?;
    match policy {
        SpacingPolicy::Agnostic => Ok(vol.clone()),
        SpacingPolicy::Target { spacing } => {
            let out = target_grid(&vol.grid, *spacing)?;
            let data = match interp {
                Interp::Trilinear => trilinear(vol, &out),
                Interp::Nearest => nearest(&vol.data, &vol.grid, &out),
            };
            Ok(Volume { grid: out, data })
        }
    }
}

/// Resamples a label map; only nearest-neighbour interpolation is allowed.
pub fn resample_labels(labels: &LabelMap, policy: &SpacingPolicy, interp: Interp) -> Result<LabelMap> {
    policy.validate()?;
    if interp != Interp::Nearest {
        return Err(Error::InvalidArgument(
            "label maps can only be resampled with nearest-neighbour interpolation".into(),
        ));
    }
    match policy {
        SpacingPolicy::Agnostic => Ok(labels.clone()),
        SpacingPolicy::Target { spacing } => {
            let out = target_grid(&labels.grid, *spacing)?;
            let data = nearest(&labels.data, &labels.grid, &out);
            Ok(LabelMap { grid: out, data })
        }
    }
}
