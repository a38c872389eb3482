//! Paired spatial and intensity augmentation of training patches.
//!
//! A spatial transform maps each output voxel `p` to a source coordinate
//! `c + A (q - c) + d(q)`, where `q` is `p` after the optional per-axis
//! mirror, `c` the patch centre, `A` a rotation/zoom matrix and `d` a smooth
//! displacement. Images are sampled trilinearly with zero padding, labels by
//! nearest neighbour with ignore padding.

use pvseg_core::volume::IGNORE;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};
use crate::ops::Act;

/// An image patch and its labels on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub image: Act,
    pub labels: Vec<u8>,
}

impl Patch {
    pub fn dims(&self) -> [usize; 3] {
        self.image.dims
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub mirror: bool,
    /// Flip probability per axis.
    pub mirror_p: f64,
    pub rotation: bool,
    pub rotation_p: f64,
    /// Per-axis angle drawn uniformly from `[-max, max]` degrees.
    pub rotation_max_deg: f64,
    pub scale: bool,
    pub scale_p: f64,
    pub scale_range: [f64; 2],
    pub elastic: bool,
    pub elastic_p: f64,
    /// Standard deviation of the coarse displacement nodes, in voxels.
    pub elastic_amplitude: f64,
    /// Node spacing of the coarse displacement grid, in voxels.
    pub elastic_spacing: usize,
    pub noise: bool,
    pub noise_p: f64,
    /// Noise sigma is drawn from `[0, max * intensity range]`.
    pub noise_max_rel_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            mirror: true,
            mirror_p: 0.5,
            rotation: true,
            rotation_p: 0.2,
            rotation_max_deg: 15.0,
            scale: true,
            scale_p: 0.2,
            scale_range: [0.9, 1.1],
            elastic: true,
            elastic_p: 0.2,
            elastic_amplitude: 2.0,
            elastic_spacing: 8,
            noise: true,
            noise_p: 0.15,
            noise_max_rel_sigma: 0.05,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            mirror: false,
            rotation: false,
            scale: false,
            elastic: false,
            noise: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("mirror_p", self.mirror_p),
            ("rotation_p", self.rotation_p),
            ("scale_p", self.scale_p),
            ("elastic_p", self.elastic_p),
            ("noise_p", self.noise_p),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(NetError::Config(format!("{name} = {p} is not a probability")));
            }
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(NetError::Config(format!("scale_range {:?} must be positive and ordered", self.scale_range)));
        }
        if !(self.rotation_max_deg >= 0.0 && self.rotation_max_deg <= 180.0) {
            return Err(NetError::Config("rotation_max_deg must lie in [0, 180]".into()));
        }
        if !(self.elastic_amplitude >= 0.0 && self.elastic_amplitude.is_finite()) || self.elastic_spacing == 0 {
            return Err(NetError::Config("elastic amplitude must be non-negative and spacing positive".into()));
        }
        if !(self.noise_max_rel_sigma >= 0.0 && self.noise_max_rel_sigma.is_finite()) {
            return Err(NetError::Config("noise_max_rel_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Smooth displacement field given on a coarse node lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct Displacement {
    pub spacing: usize,
    pub nodes: [usize; 3],
    /// One vector per node, x fastest.
    pub data: Vec<[f64; 3]>,
}

impl Displacement {
    /// Node lattice covering `dims`, with each component drawn from
    /// `N(0, amplitude^2)`.
    pub fn random(dims: [usize; 3], spacing: usize, amplitude: f64, rng: &mut impl Rng) -> Self {
        let nodes = dims.map(|d| (d.saturating_sub(1)) / spacing + 2);
        let n = nodes.iter().product();
        let normal = Normal::new(0.0, amplitude).expect("finite amplitude");
        let data = (0..n)
            .map(|_| [normal.sample(rng), normal.sample(rng), normal.sample(rng)])
            .collect();
        Displacement { spacing, nodes, data }
    }

    /// Constant displacement everywhere.
    pub fn constant(dims: [usize; 3], spacing: usize, d: [f64; 3]) -> Self {
        let nodes = dims.map(|n| (n.saturating_sub(1)) / spacing + 2);
        Displacement {
            spacing,
            nodes,
            data: vec![d; nodes.iter().product()],
        }
    }

    pub fn at(&self, p: [f64; 3]) -> [f64; 3] {
        let s = self.spacing as f64;
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let g = (p[a] / s).max(0.0);
            let b = (g.floor() as usize).min(self.nodes[a] - 2);
            base[a] = b;
            frac[a] = g - b as f64;
        }
        let mut out = [0.0; 3];
        for corner in 0..8 {
            let o = [corner & 1, (corner >> 1) & 1, corner >> 2];
            let mut w = 1.0;
            for a in 0..3 {
                w *= if o[a] == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            if w == 0.0 {
                continue;
            }
            let idx = (base[0] + o[0]) + self.nodes[0] * ((base[1] + o[1]) + self.nodes[1] * (base[2] + o[2]));
            for a in 0..3 {
                out[a] += w * self.data[idx][a];
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialTransform {
    pub matrix: [[f64; 3]; 3],
    pub flips: [bool; 3],
    pub displacement: Option<Displacement>,
}

const IDENTITY: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

impl Default for SpatialTransform {
    fn default() -> Self {
        SpatialTransform {
            matrix: IDENTITY,
            flips: [false; 3],
            displacement: None,
        }
    }
}

impl SpatialTransform {
    fn is_resampling(&self) -> bool {
        self.matrix != IDENTITY || self.displacement.is_some()
    }

    /// Source coordinate of output voxel `p` in a patch of size `dims`.
    pub fn source(&self, p: [usize; 3], dims: [usize; 3]) -> [f64; 3] {
        let q: [f64; 3] = std::array::from_fn(|a| {
            if self.flips[a] {
                (dims[a] - 1 - p[a]) as f64
            } else {
                p[a] as f64
            }
        });
        let c: [f64; 3] = std::array::from_fn(|a| (dims[a] as f64 - 1.0) / 2.0);
        let d = self.displacement.as_ref().map_or([0.0; 3], |f| f.at(q));
        std::array::from_fn(|r| {
            c[r] + (0..3).map(|k| self.matrix[r][k] * (q[k] - c[k])).sum::<f64>() + d[r]
        })
    }
}

/// Rotation `Rz * Ry * Rx` for angles in radians about x, y and z.
pub fn rotation_matrix(angles: [f64; 3]) -> [[f64; 3]; 3] {
    let (sx, cx) = angles[0].sin_cos();
    let (sy, cy) = angles[1].sin_cos();
    let (sz, cz) = angles[2].sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    matmul(&rz, &matmul(&ry, &rx))
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|r| std::array::from_fn(|c| (0..3).map(|k| a[r][k] * b[k][c]).sum()))
}

fn trilinear(src: &[f64], dims: [usize; 3], p: [f64; 3]) -> f64 {
    let base = p.map(|v| v.floor());
    let frac = [p[0] - base[0], p[1] - base[1], p[2] - base[2]];
    let mut acc = 0.0;
    for corner in 0..8 {
        let o = [corner & 1, (corner >> 1) & 1, corner >> 2];
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        let mut inside = true;
        for a in 0..3 {
            w *= if o[a] == 1 { frac[a] } else { 1.0 - frac[a] };
            let i = base[a] as i64 + o[a] as i64;
            if i < 0 || i >= dims[a] as i64 {
                inside = false;
            } else {
                idx[a] = i as usize;
            }
        }
        if inside && w != 0.0 {
            acc += w * src[idx[0] + dims[0] * (idx[1] + dims[1] * idx[2])];
        }
    }
    acc
}

fn nearest(src: &[u8], dims: [usize; 3], p: [f64; 3]) -> u8 {
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let i = (p[a] + 0.5).floor();
        if i < 0.0 || i >= dims[a] as f64 {
            return IGNORE;
        }
        idx[a] = i as usize;
    }
    src[idx[0] + dims[0] * (idx[1] + dims[1] * idx[2])]
}

/// Applies one spatial transform to image and labels alike.
pub fn apply_spatial(patch: &Patch, t: &SpatialTransform) -> Patch {
    let dims = patch.dims();
    let n = patch.image.voxels();
    let mut image = Act::zeros(patch.image.c, dims);
    let mut labels = vec![0u8; n];
    let resample = t.is_resampling();
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let o = i + dims[0] * (j + dims[1] * k);
                let src = t.source([i, j, k], dims);
                if resample {
                    labels[o] = nearest(&patch.labels, dims, src);
                    for c in 0..patch.image.c {
                        image.data[c * n + o] = trilinear(patch.image.channel(c), dims, src);
                    }
                } else {
                    let s = src[0] as usize + dims[0] * (src[1] as usize + dims[1] * src[2] as usize);
                    labels[o] = patch.labels[s];
                    for c in 0..patch.image.c {
                        image.data[c * n + o] = patch.image.data[c * n + s];
                    }
                }
            }
        }
    }
    Patch { image, labels }
}

/// Draws a random spatial transform and noise level and applies them.
/// Random numbers are consumed in a fixed order for a given configuration.
pub fn augment(patch: Patch, cfg: &AugmentConfig, rng: &mut impl Rng) -> Patch {
    let dims = patch.dims();
    let mut t = SpatialTransform::default();
    if cfg.mirror {
        for f in &mut t.flips {
            *f = rng.random_bool(cfg.mirror_p);
        }
    }
    if cfg.rotation && rng.random_bool(cfg.rotation_p) {
        let m = cfg.rotation_max_deg.to_radians();
        let angles: [f64; 3] = std::array::from_fn(|_| rng.random_range(-m..=m));
        t.matrix = rotation_matrix(angles);
    }
    if cfg.scale && rng.random_bool(cfg.scale_p) {
        let s = rng.random_range(cfg.scale_range[0]..=cfg.scale_range[1]);
        for row in &mut t.matrix {
            for v in row {
                *v /= s;
            }
        }
    }
    if cfg.elastic && rng.random_bool(cfg.elastic_p) && cfg.elastic_amplitude > 0.0 {
        t.displacement = Some(Displacement::random(dims, cfg.elastic_spacing, cfg.elastic_amplitude, rng));
    }
    let mut out = if t == SpatialTransform::default() {
        patch
    } else {
        apply_spatial(&patch, &t)
    };
    if cfg.noise && rng.random_bool(cfg.noise_p) {
        let (lo, hi) = out
            .image
            .data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let range = if hi > lo { hi - lo } else { 0.0 };
        let sigma = rng.random_range(0.0..=1.0) * cfg.noise_max_rel_sigma * range;
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("positive sigma");
            for v in &mut out.image.data {
                *v += normal.sample(rng);
            }
        }
    }
    out
}
