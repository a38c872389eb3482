//! Training cases in memory and patch sampling with foreground oversampling.

use pvseg_core::volume::{BACKGROUND, IGNORE};
use rand::Rng;

use crate::augment::Patch;
use crate::error::{NetError, Result};
use crate::ops::Act;

/// A fully loaded training case: channel-major image and flat labels.
#[derive(Debug, Clone)]
pub struct TrainCase {
    pub id: String,
    pub image: Act,
    pub labels: Vec<u8>,
    /// Flat indices of non-background, non-ignore voxels.
    pub foreground: Vec<usize>,
}

impl TrainCase {
    pub fn new(id: impl Into<String>, image: Act, labels: Vec<u8>) -> Result<Self> {
        let id = id.into();
        if labels.len() != image.voxels() || image.data.len() != image.c * image.voxels() {
            return Err(NetError::Shape(format!("case {id}: image and labels differ in size")));
        }
        let foreground = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != BACKGROUND && l != IGNORE)
            .map(|(i, _)| i)
            .collect();
        Ok(TrainCase {
            id,
            image,
            labels,
            foreground,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.image.dims
    }

    /// True when at least one voxel carries a usable label.
    pub fn is_supervised(&self) -> bool {
        self.labels.iter().any(|&l| l != IGNORE)
    }
}

/// Patch centre: with probability `fg_oversample` a uniformly chosen
/// foreground voxel, otherwise uniform over the volume.
pub fn sample_center(case: &TrainCase, fg_oversample: f64, rng: &mut impl Rng) -> [usize; 3] {
    let dims = case.dims();
    let use_fg = rng.random::<f64>() < fg_oversample;
    if use_fg && !case.foreground.is_empty() {
        let idx = case.foreground[rng.random_range(0..case.foreground.len())];
        [idx % dims[0], (idx / dims[0]) % dims[1], idx / (dims[0] * dims[1])]
    } else {
        std::array::from_fn(|a| rng.random_range(0..dims[a]))
    }
}

/// Crops a patch whose voxel `patch/2` (per axis) sits at `center`. Outside
/// the volume the image is 0 and the labels are ignore.
pub fn crop_patch(case: &TrainCase, center: [usize; 3], patch: [usize; 3]) -> Patch {
    let dims = case.dims();
    let n_in = case.image.voxels();
    let n_out: usize = patch.iter().product();
    let origin: [i64; 3] = std::array::from_fn(|a| center[a] as i64 - (patch[a] / 2) as i64);
    let mut image = Act::zeros(case.image.c, patch);
    let mut labels = vec![IGNORE; n_out];
    for k in 0..patch[2] {
        let z = origin[2] + k as i64;
        if z < 0 || z >= dims[2] as i64 {
            continue;
        }
        for j in 0..patch[1] {
            let y = origin[1] + j as i64;
            if y < 0 || y >= dims[1] as i64 {
                continue;
            }
            for i in 0..patch[0] {
                let x = origin[0] + i as i64;
                if x < 0 || x >= dims[0] as i64 {
                    continue;
                }
                let src = x as usize + dims[0] * (y as usize + dims[1] * z as usize);
                let dst = i + patch[0] * (j + patch[1] * k);
                labels[dst] = case.labels[src];
                for c in 0..case.image.c {
                    image.data[c * n_out + dst] = case.image.data[c * n_in + src];
                }
            }
        }
    }
    Patch { image, labels }
}

pub fn sample_patch(case: &TrainCase, patch: [usize; 3], fg_oversample: f64, rng: &mut impl Rng) -> Patch {
    let c = sample_center(case, fg_oversample, rng);
    crop_patch(case, c, patch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn case(dims: [usize; 3], fg: &[usize]) -> TrainCase {
        let n = dims.iter().product();
        let mut labels = vec![0u8; n];
        for &i in fg {
            labels[i] = 1;
        }
        TrainCase::new(
            "c",
            Act {
                c: 1,
                dims,
                data: (0..n).map(|i| i as f64 + 1.0).collect(),
            },
            labels,
        )
        .unwrap()
    }

    #[test]
    fn forced_foreground_always_inside() {
        let dims = [20, 18, 16];
        let target = 3 + 20 * (17 + 18 * 9);
        let c = case(dims, &[target]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let p = sample_patch(&c, [8, 8, 8], 1.0, &mut rng);
            assert_eq!(p.labels.iter().filter(|&&l| l == 1).count(), 1);
        }
    }

    #[test]
    fn oversized_patch_pads() {
        let c = case([4, 4, 4], &[]);
        let p = crop_patch(&c, [2, 2, 2], [8, 8, 8]);
        assert_eq!(p.labels.iter().filter(|&&l| l == IGNORE).count(), 512 - 64);
        assert_eq!(p.image.data.iter().filter(|&&v| v == 0.0).count(), 512 - 64);
    }

    #[test]
    fn crop_copies_the_right_voxels() {
        let c = case([10, 10, 10], &[]);
        let p = crop_patch(&c, [5, 5, 5], [4, 4, 4]);
        // patch voxel (2,2,2) is the centre
        assert_eq!(p.image.data[2 + 4 * (2 + 4 * 2)], c.image.data[5 + 10 * (5 + 10 * 5)]);
        assert_eq!(p.image.data[0], c.image.data[3 + 10 * (3 + 10 * 3)]);
    }
}
