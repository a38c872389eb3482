use rayon::prelude::*;

use super::{EnhanceConfig, Sigma};
use crate::error::{Error, Result};
use crate::volume::{Mask, Volume};

/// Population standard deviation of the voxels under `background`.
pub fn estimate_sigma(vol: &Volume, background: &Mask) -> Result<f64> {
    background.ensure_dims(vol.dims())?;
    let values: Vec<f64> = vol
        .data
        .iter()
        .zip(&background.data)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v as f64)
        .collect();
    if values.len() < 27 {
        return Err(Error::Degenerate(format!(
            "background mask selects {} voxels, need at least 27",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(Error::Degenerate("background has zero variance".into()));
    }
    Ok(var.sqrt())
}

/// Intersection of `[-r, r]` with the offsets keeping both `a + p` and
/// `b + p` inside `[0, n)`.
#[inline]
fn patch_range(a: usize, b: usize, r: usize, n: usize) -> (isize, isize) {
    let lo = -(r.min(a).min(b) as isize);
    let hi = r.min(n - 1 - a).min(n - 1 - b) as isize;
    (lo, hi)
}

/// Non-local means with `h = sigma`.
///
/// Each output voxel is the normalised weighted mean of the centres of all
/// patches in its search block, including itself, with
/// `w = exp(-max(d2 - 2 sigma^2 |P|, 0) / (sigma^2 |P|))`. Blocks and patches
/// are clipped at the volume border, so `|P|` counts only the patch offsets
/// valid for both voxels.
pub fn nlm_filter(vol: &Volume, cfg: &EnhanceConfig) -> Result<Volume> {
    let sigma = match cfg.nlm_sigma {
        Sigma::Fixed(s) => s,
        Sigma::Auto => {
            return Err(Error::InvalidArgument(
                "nlm_filter needs a resolved sigma; call estimate_sigma first".into(),
            ))
        }
    };
    nlm_filter_with_sigma(vol, cfg.nlm_patch_radius, cfg.nlm_block_radius, sigma)
}

pub fn nlm_filter_with_sigma(
    vol: &Volume,
    patch_radius: usize,
    block_radius: usize,
    sigma: f64,
) -> Result<Volume> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    if let Some(pos) = vol.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite input at voxel {pos}")));
    }
    let [nx, ny, nz] = vol.dims();
    let src: Vec<f64> = vol.data.iter().map(|&v| v as f64).collect();
    let at = |i: usize, j: usize, k: usize| src[i + nx * (j + ny * k)];
    let var2 = 2.0 * sigma * sigma;
    let h2 = sigma * sigma;
    let (pr, br) = (patch_radius, block_radius as isize);

    let mut out = vec![0.0f32; src.len()];
    out.par_chunks_mut(nx * ny).enumerate().for_each(|(z, slab)| {
        for y in 0..ny {
            for x in 0..nx {
                let mut wsum = 0.0;
                let mut acc = 0.0;
                for dz in -br..=br {
                    let qz = z as isize + dz;
                    if qz < 0 || qz >= nz as isize {
                        continue;
                    }
                    let qz = qz as usize;
                    let (pz0, pz1) = patch_range(z, qz, pr, nz);
                    for dy in -br..=br {
                        let qy = y as isize + dy;
                        if qy < 0 || qy >= ny as isize {
                            continue;
                        }
                        let qy = qy as usize;
                        let (py0, py1) = patch_range(y, qy, pr, ny);
                        for dx in -br..=br {
                            let qx = x as isize + dx;
                            if qx < 0 || qx >= nx as isize {
                                continue;
                            }
                            let qx = qx as usize;
                            let (px0, px1) = patch_range(x, qx, pr, nx);
                            let mut d2 = 0.0;
                            for pz in pz0..=pz1 {
                                let (az, bz) = ((z as isize + pz) as usize, (qz as isize + pz) as usize);
                                for py in py0..=py1 {
                                    let (ay, by) = ((y as isize + py) as usize, (qy as isize + py) as usize);
                                    let arow = nx * (ay + ny * az);
                                    let brow = nx * (by + ny * bz);
                                    for px in px0..=px1 {
                                        let d = src[arow + (x as isize + px) as usize]
                                            - src[brow + (qx as isize + px) as usize];
                                        d2 += d * d;
                                    }
                                }
                            }
                            let np = ((pz1 - pz0 + 1) * (py1 - py0 + 1) * (px1 - px0 + 1)) as f64;
                            let w = (-(d2 - var2 * np).max(0.0) / (h2 * np)).exp();
                            wsum += w;
                            acc += w * at(qx, qy, qz);
                        }
                    }
                }
                slab[x + nx * y] = (acc / wsum) as f32;
            }
        }
    });
    Ok(Volume {
        grid: vol.grid.clone(),
        data: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;

    #[test]
    fn constant_is_fixed_point() {
        let v = Volume::filled(Grid::new([6, 5, 4], [1.0; 3]).unwrap(), 0.3);
        let r = nlm_filter_with_sigma(&v, 1, 2, 0.1).unwrap();
        assert!(r.data.iter().all(|&x| x == 0.3));
    }

    #[test]
    fn sigma_from_alternating_background() {
        let g = Grid::new([6, 6, 6], [1.0; 3]).unwrap();
        let v = Volume::from_fn(g, |i, j, k| if (i + j + k) % 2 == 0 { -0.5 } else { 0.5 });
        let m = Mask::full([6, 6, 6], true);
        assert!((estimate_sigma(&v, &m).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sigma_errors() {
        let g = Grid::new([3, 3, 3], [1.0; 3]).unwrap();
        let v = Volume::filled(g, 1.0);
        assert!(estimate_sigma(&v, &Mask::full([3, 3, 3], true)).is_err());
        let mut m = Mask::full([3, 3, 3], true);
        m.data[0] = false;
        assert!(estimate_sigma(&v, &m).is_err());
        assert!(nlm_filter_with_sigma(&v, 1, 1, 0.0).is_err());
    }

    #[test]
    fn patch_range_clips_both_sides() {
        assert_eq!(patch_range(0, 2, 1, 5), (0, 1));
        assert_eq!(patch_range(4, 3, 1, 5), (-1, 0));
        assert_eq!(patch_range(2, 2, 3, 5), (-2, 2));
    }
}
