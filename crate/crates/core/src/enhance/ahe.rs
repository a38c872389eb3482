use rayon::prelude::*;

use super::EnhanceConfig;
use crate::error::{Error, Result};
use crate::volume::Volume;

pub const AHE_BINS: usize = 256;

#[inline]
fn ahe_bin(v: f32) -> usize {
    ((v as f64 * AHE_BINS as f64) as usize).min(AHE_BINS - 1)
}

/// Tile layout along one axis: tiles of `k` voxels from the origin, the last
/// one possibly shorter.
struct AxisTiles {
    starts: Vec<usize>,
    centers: Vec<f64>,
}

fn axis_tiles(n: usize, k: usize) -> AxisTiles {
    let count = n.div_ceil(k);
    let starts: Vec<usize> = (0..count).map(|t| t * k).collect();
    let centers = starts
        .iter()
        .map(|&s| {
            let end = (s + k).min(n);
            (s + end - 1) as f64 / 2.0
        })
        .collect();
    AxisTiles { starts, centers }
}

/// The two tiles whose centres bracket `x`, and the weight of the second.
#[inline]
fn bracket(tiles: &AxisTiles, x: usize) -> (usize, usize, f64) {
    let c = &tiles.centers;
    let x = x as f64;
    if x <= c[0] {
        return (0, 0, 0.0);
    }
    let last = c.len() - 1;
    if x >= c[last] {
        return (last, last, 0.0);
    }
    let hi = c.partition_point(|&ci| ci < x).max(1);
    let lo = hi - 1;
    (lo, hi, (x - c[lo]) / (c[hi] - c[lo]))
}

/// Contrast-limited AHE over a 3D tile grid.
///
/// Each tile gets a 256-bin histogram of its voxels, clipped at
/// `clip_limit * tile_voxels` with the excess spread evenly over all bins,
/// and its normalised cumulative histogram as mapping. A voxel's output is the
/// trilinear blend of the mappings of the (up to 8) tiles whose centres
/// surround it. A clip limit of 1 disables clipping.
pub fn adaptive_hist_eq(vol: &Volume, cfg: &EnhanceConfig) -> Result<Volume> {
    let dims = vol.dims();
    let kernel = cfg.ahe_kernel_for(dims);
    let clip_limit = cfg.ahe_clip_limit;
    if !(clip_limit > 0.0 && clip_limit <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "clip limit must lie in (0, 1], got {clip_limit}"
        )));
    }
    for a in 0..3 {
        if kernel[a] == 0 || kernel[a] > dims[a] {
            return Err(Error::InvalidArgument(format!(
                "AHE kernel {kernel:?} does not fit volume dims {dims:?}"
            )));
        }
    }
    if let Some(v) = vol.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!(
            "AHE expects intensities in [0, 1], found {v}"
        )));
    }
    let [nx, ny, nz] = dims;
    let tiles = [
        axis_tiles(nx, kernel[0]),
        axis_tiles(ny, kernel[1]),
        axis_tiles(nz, kernel[2]),
    ];
    let counts = [tiles[0].starts.len(), tiles[1].starts.len(), tiles[2].starts.len()];
    let bins: Vec<u8> = vol.data.iter().map(|&v| ahe_bin(v) as u8).collect();

    let n_tiles = counts[0] * counts[1] * counts[2];
    let maps: Vec<[f64; AHE_BINS]> = (0..n_tiles)
        .into_par_iter()
        .map(|t| {
            let tx = t % counts[0];
            let ty = (t / counts[0]) % counts[1];
            let tz = t / (counts[0] * counts[1]);
            let x0 = tiles[0].starts[tx];
            let y0 = tiles[1].starts[ty];
            let z0 = tiles[2].starts[tz];
            let (x1, y1, z1) = (
                (x0 + kernel[0]).min(nx),
                (y0 + kernel[1]).min(ny),
                (z0 + kernel[2]).min(nz),
            );
            let mut hist = [0f64; AHE_BINS];
            for z in z0..z1 {
                for y in y0..y1 {
                    let row = nx * (y + ny * z);
                    for x in x0..x1 {
                        hist[bins[row + x] as usize] += 1.0;
                    }
                }
            }
            let n = ((x1 - x0) * (y1 - y0) * (z1 - z0)) as f64;
            let clim = clip_limit * n;
            let mut excess = 0.0;
            for h in hist.iter_mut() {
                if *h > clim {
                    excess += *h - clim;
                    *h = clim;
                }
            }
            let spread = excess / AHE_BINS as f64;
            let mut map = [0f64; AHE_BINS];
            let mut cum = 0.0;
            for b in 0..AHE_BINS {
                cum += hist[b] + spread;
                map[b] = (cum / n).min(1.0);
            }
            map
        })
        .collect();

    let mut out = vec![0f32; vol.data.len()];
    out.par_chunks_mut(nx * ny).enumerate().for_each(|(z, slab)| {
        let (z0, z1, wz) = bracket(&tiles[2], z);
        for y in 0..ny {
            let (y0, y1, wy) = bracket(&tiles[1], y);
            for x in 0..nx {
                let (x0, x1, wx) = bracket(&tiles[0], x);
                let b = bins[x + nx * (y + ny * z)] as usize;
                let m = |tx: usize, ty: usize, tz: usize| maps[tx + counts[0] * (ty + counts[1] * tz)][b];
                let c00 = m(x0, y0, z0) * (1.0 - wx) + m(x1, y0, z0) * wx;
                let c10 = m(x0, y1, z0) * (1.0 - wx) + m(x1, y1, z0) * wx;
                let c01 = m(x0, y0, z1) * (1.0 - wx) + m(x1, y0, z1) * wx;
                let c11 = m(x0, y1, z1) * (1.0 - wx) + m(x1, y1, z1) * wx;
                let c0 = c00 * (1.0 - wy) + c10 * wy;
                let c1 = c01 * (1.0 - wy) + c11 * wy;
                slab[x + nx * y] = (c0 * (1.0 - wz) + c1 * wz).clamp(0.0, 1.0) as f32;
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

    fn cfg(kernel: [usize; 3], clip: f64) -> EnhanceConfig {
        EnhanceConfig {
            ahe_kernel: Some(kernel),
            ahe_clip_limit: clip,
            ..Default::default()
        }
    }

    #[test]
    fn constant_volume_maps_to_constant() {
        let v = Volume::filled(Grid::new([10, 9, 7], [1.0; 3]).unwrap(), 0.4);
        let r = adaptive_hist_eq(&v, &cfg([4, 4, 4], 0.01)).unwrap();
        let first = r.data[0];
        assert!((0.0..=1.0).contains(&first));
        assert!(r.data.iter().all(|&x| (x - first).abs() < 1e-6));
    }

    #[test]
    fn rejects_bad_inputs() {
        let g = Grid::new([4, 4, 4], [1.0; 3]).unwrap();
        let v = Volume::filled(g.clone(), 1.5);
        assert!(adaptive_hist_eq(&v, &cfg([4, 4, 4], 0.5)).is_err());
        let v = Volume::filled(g, 0.5);
        assert!(adaptive_hist_eq(&v, &cfg([5, 4, 4], 0.5)).is_err());
    }

    #[test]
    fn bracket_interpolates_between_centres() {
        let t = axis_tiles(8, 4);
        assert_eq!(t.centers, vec![1.5, 5.5]);
        assert_eq!(bracket(&t, 0), (0, 0, 0.0));
        assert_eq!(bracket(&t, 7), (1, 1, 0.0));
        let (lo, hi, w) = bracket(&t, 3);
        assert_eq!((lo, hi), (0, 1));
        assert!((w - 0.375).abs() < 1e-12);
    }
}
