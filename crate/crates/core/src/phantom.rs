//! Synthetic tubular phantoms with known ground truth.
//!
//! A brain-like ellipsoid sits in a zero background. An inner ellipsoid forms
//! the basal-ganglia compartment and the shell around it the white-matter
//! compartment. Straight tubes are swept inside one compartment each and
//! labelled by it.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::median_split;
use crate::manifest::{CaseEntry, Manifest};
use crate::morphology::{connected_components, ClusterStats, Connectivity};
use crate::nifti::{write_labels, write_volume};
use crate::volume::{Grid, LabelMap, Mask, Volume, BG_PVS, WM_PVS};

const MAX_PLACEMENT_TRIES: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub n_tubes_wm: usize,
    pub n_tubes_bg: usize,
    /// Tube radius bounds in voxels.
    pub radius_range: [f64; 2],
    /// Tube length bounds in voxels.
    pub length_range: [f64; 2],
    /// Intensity offset of tube voxels; negative gives dark tubes.
    pub tube_contrast: f64,
    pub background_level: f64,
    pub noise_sigma: f64,
    /// Share of the brain ellipsoid volume taken by the inner (BG) compartment.
    pub bg_fraction: f64,
    /// Brain semi-axes as a fraction of the grid extent per axis.
    pub brain_extent: f64,
    /// Number of WMH-like blobs written to a separate probability map.
    pub wmh_blobs: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: [64, 64, 64],
            spacing: [1.0; 3],
            n_tubes_wm: 24,
            n_tubes_bg: 6,
            radius_range: [1.0, 1.6],
            length_range: [8.0, 18.0],
            tube_contrast: -0.3,
            background_level: 1.0,
            noise_sigma: 0.05,
            bg_fraction: 0.15,
            brain_extent: 0.45,
            wmh_blobs: 0,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        Grid::new(self.dims, self.spacing)?;
        let [rlo, rhi] = self.radius_range;
        if !(rlo >= 0.5 && rlo <= rhi && rhi.is_finite()) {
            return bad(format!("radius range {:?} must satisfy 0.5 <= min <= max", self.radius_range));
        }
        let [llo, lhi] = self.length_range;
        if !(llo >= 0.0 && llo <= lhi && lhi.is_finite()) {
            return bad(format!("length range {:?} must satisfy 0 <= min <= max", self.length_range));
        }
        if !(self.tube_contrast != 0.0 && self.tube_contrast.is_finite()) {
            return bad("tube contrast must be finite and non-zero".into());
        }
        if !(self.background_level > 0.0 && self.background_level.is_finite()) {
            return bad("background level must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise sigma must be non-negative".into());
        }
        if !(self.bg_fraction > 0.0 && self.bg_fraction < 1.0) {
            return bad(format!("bg_fraction must lie in (0, 1), got {}", self.bg_fraction));
        }
        if !(self.brain_extent > 0.0 && self.brain_extent <= 0.5) {
            return bad(format!("brain_extent must lie in (0, 0.5], got {}", self.brain_extent));
        }
        Ok(())
    }

    fn centre(&self) -> [f64; 3] {
        self.dims.map(|d| (d as f64 - 1.0) / 2.0)
    }

    fn brain_axes(&self) -> [f64; 3] {
        self.dims.map(|d| self.brain_extent * d as f64)
    }

    fn inner_axes(&self) -> [f64; 3] {
        let s = self.bg_fraction.cbrt();
        self.brain_axes().map(|a| a * s)
    }

    fn ellipsoid(&self, p: [f64; 3], axes: [f64; 3]) -> bool {
        let c = self.centre();
        (0..3).map(|a| ((p[a] - c[a]) / axes[a]).powi(2)).sum::<f64>() <= 1.0
    }

    /// Compartment of a voxel centre: `Some(WM_PVS)`, `Some(BG_PVS)` or
    /// `None` outside the brain.
    pub fn compartment(&self, p: [f64; 3]) -> Option<u8> {
        if self.ellipsoid(p, self.inner_axes()) {
            Some(BG_PVS)
        } else if self.ellipsoid(p, self.brain_axes()) {
            Some(WM_PVS)
        } else {
            None
        }
    }

    /// Brain mask and the BG-compartment mask.
    pub fn compartment_masks(&self) -> (Mask, Mask) {
        let [nx, ny, nz] = self.dims;
        let mut brain = Vec::with_capacity(nx * ny * nz);
        let mut bg = Vec::with_capacity(nx * ny * nz);
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let c = self.compartment([i as f64, j as f64, k as f64]);
                    brain.push(c.is_some());
                    bg.push(c == Some(BG_PVS));
                }
            }
        }
        (
            Mask { dims: self.dims, data: brain },
            Mask { dims: self.dims, data: bg },
        )
    }
}

/// A straight segment swept by a sphere, in voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tube {
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub radius: f64,
    pub class_id: u8,
}

impl Tube {
    pub fn distance(&self, p: [f64; 3]) -> f64 {
        let d: [f64; 3] = std::array::from_fn(|a| self.end[a] - self.start[a]);
        let w: [f64; 3] = std::array::from_fn(|a| p[a] - self.start[a]);
        let dd: f64 = d.iter().map(|v| v * v).sum();
        let t = if dd > 0.0 {
            (d.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / dd).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (0..3)
            .map(|a| (w[a] - t * d[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Linear indices of voxel centres within `radius` of the segment, or
    /// `None` when the swept volume leaves the grid.
    fn voxels(&self, dims: [usize; 3]) -> Option<Vec<usize>> {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            let min = self.start[a].min(self.end[a]) - self.radius;
            let max = self.start[a].max(self.end[a]) + self.radius;
            if min < 0.0 || max > (dims[a] - 1) as f64 {
                return None;
            }
            lo[a] = min.ceil() as usize;
            hi[a] = max.floor() as usize;
        }
        let mut out = Vec::new();
        for k in lo[2]..=hi[2] {
            for j in lo[1]..=hi[1] {
                for i in lo[0]..=hi[0] {
                    if self.distance([i as f64, j as f64, k as f64]) <= self.radius {
                        out.push(i + dims[0] * (j + dims[1] * k));
                    }
                }
            }
        }
        Some(out)
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub image: Volume,
    pub labels: LabelMap,
    /// Ground-truth cluster statistics for WM-PVS and BG-PVS, 26-connected.
    pub clusters: Vec<ClusterStats>,
    pub tubes: Vec<Tube>,
    /// WMH probability map, present when blobs were requested.
    pub wmh: Option<Volume>,
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.map(|x| x / n);
        }
    }
}

fn random_point(cfg: &PhantomConfig, class_id: u8, rng: &mut ChaCha8Rng) -> Option<[f64; 3]> {
    let c = cfg.centre();
    let axes = cfg.brain_axes();
    for _ in 0..MAX_PLACEMENT_TRIES {
        let p: [f64; 3] = std::array::from_fn(|a| c[a] + rng.random_range(-axes[a]..=axes[a]));
        if cfg.compartment(p) == Some(class_id) {
            return Some(p);
        }
    }
    None
}

fn place_tube(cfg: &PhantomConfig, class_id: u8, labels: &mut [u8], rng: &mut ChaCha8Rng) -> Result<Tube> {
    for _ in 0..MAX_PLACEMENT_TRIES {
        let Some(start) = random_point(cfg, class_id, rng) else {
            break;
        };
        let dir = unit_vector(rng);
        let len = rng.random_range(cfg.length_range[0]..=cfg.length_range[1]);
        let radius = rng.random_range(cfg.radius_range[0]..=cfg.radius_range[1]);
        let tube = Tube {
            start,
            end: std::array::from_fn(|a| start[a] + dir[a] * len),
            radius,
            class_id,
        };
        let Some(vox) = tube.voxels(cfg.dims) else {
            continue;
        };
        let inside = !vox.is_empty()
            && vox.iter().all(|&idx| {
                let [nx, ny, _] = cfg.dims;
                let p = [(idx % nx) as f64, ((idx / nx) % ny) as f64, (idx / (nx * ny)) as f64];
                cfg.compartment(p) == Some(class_id)
            });
        if inside {
            for idx in vox {
                labels[idx] = class_id;
            }
            return Ok(tube);
        }
    }
    Err(Error::Crowded(format!(
        "could not place a class-{class_id} tube inside its compartment after {MAX_PLACEMENT_TRIES} tries"
    )))
}

fn wmh_map(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Result<Volume> {
    let grid = Grid::new(cfg.dims, cfg.spacing)?;
    let mut data = vec![0f32; grid.len()];
    let [nx, ny, nz] = cfg.dims;
    for _ in 0..cfg.wmh_blobs {
        let centre = random_point(cfg, WM_PVS, rng)
            .ok_or_else(|| Error::Crowded("no room for a WMH blob".into()))?;
        let r: f64 = rng.random_range(2.0..=4.0);
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let d2 = (i as f64 - centre[0]).powi(2)
                        + (j as f64 - centre[1]).powi(2)
                        + (k as f64 - centre[2]).powi(2);
                    // 0.5 exactly at distance r
                    let p = (-(d2 / (r * r)) * std::f64::consts::LN_2).exp() as f32;
                    let slot = &mut data[i + nx * (j + ny * k)];
                    *slot = slot.max(p);
                }
            }
        }
    }
    Volume::new(grid, data)
}

/// Generates one phantom. Everything is derived from `cfg.seed`.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<Phantom> {
    cfg.validate()?;
    let grid = Grid::new(cfg.dims, cfg.spacing)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise_seed: u64 = rng.random();
    let wmh_seed: u64 = rng.random();

    let (brain, _) = cfg.compartment_masks();
    let mut labels = vec![0u8; grid.len()];
    let mut tubes = Vec::with_capacity(cfg.n_tubes_wm + cfg.n_tubes_bg);
    for _ in 0..cfg.n_tubes_wm {
        tubes.push(place_tube(cfg, WM_PVS, &mut labels, &mut rng)?);
    }
    for _ in 0..cfg.n_tubes_bg {
        tubes.push(place_tube(cfg, BG_PVS, &mut labels, &mut rng)?);
    }

    let bg = cfg.background_level as f32;
    let tube_level = (cfg.background_level + cfg.tube_contrast) as f32;
    let mut data: Vec<f32> = brain
        .data
        .iter()
        .zip(&labels)
        .map(|(&b, &l)| match (b, l) {
            (_, l) if l != 0 => tube_level,
            (true, _) => bg,
            _ => 0.0,
        })
        .collect();
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut nrng = ChaCha8Rng::seed_from_u64(noise_seed);
        for v in &mut data {
            *v += normal.sample(&mut nrng) as f32;
        }
    }

    let labels = LabelMap { grid: grid.clone(), data: labels };
    let clusters = vec![
        connected_components(&labels, WM_PVS, Connectivity::TwentySix)?,
        connected_components(&labels, BG_PVS, Connectivity::TwentySix)?,
    ];
    let wmh = if cfg.wmh_blobs > 0 {
        Some(wmh_map(cfg, &mut ChaCha8Rng::seed_from_u64(wmh_seed))?)
    } else {
        None
    };
    Ok(Phantom {
        image: Volume::new(grid, data)?,
        labels,
        clusters,
        tubes,
        wmh,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub n_cases: usize,
    pub seed: u64,
    /// Dataset tags, assigned to cases round-robin.
    pub datasets: Vec<String>,
    /// Per-case tube counts are scaled by a factor drawn from `1 ± spread`.
    pub burden_spread: f64,
    /// When set, that many axial slices evenly spread over the brain are
    /// recorded as annotated in the manifest.
    pub annotated_slices: Option<usize>,
    pub with_labels: bool,
    pub id_prefix: String,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            n_cases: 30,
            seed: 0,
            datasets: vec!["phantom".into()],
            burden_spread: 0.5,
            annotated_slices: None,
            with_labels: true,
            id_prefix: "ph".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortCase {
    pub id: String,
    pub dataset: String,
    pub config: PhantomConfig,
}

/// Per-case ids, dataset tags and configs derived from the cohort seed.
pub fn cohort_cases(template: &PhantomConfig, cohort: &CohortConfig) -> Result<Vec<CohortCase>> {
    if cohort.n_cases == 0 {
        return Err(Error::InvalidArgument("cohort needs at least one case".into()));
    }
    if cohort.datasets.is_empty() {
        return Err(Error::InvalidArgument("cohort needs at least one dataset tag".into()));
    }
    if !(0.0..1.0).contains(&cohort.burden_spread) {
        return Err(Error::InvalidArgument(format!(
            "burden_spread must lie in [0, 1), got {}",
            cohort.burden_spread
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cohort.seed);
    let s = cohort.burden_spread;
    Ok((0..cohort.n_cases)
        .map(|i| {
            let mut config = template.clone();
            config.seed = rng.random();
            let scale: f64 = if s > 0.0 { rng.random_range(1.0 - s..=1.0 + s) } else { 1.0 };
            config.n_tubes_wm = (template.n_tubes_wm as f64 * scale).round() as usize;
            config.n_tubes_bg = (template.n_tubes_bg as f64 * scale).round() as usize;
            CohortCase {
                id: format!("{}{i:03}", cohort.id_prefix),
                dataset: cohort.datasets[i % cohort.datasets.len()].clone(),
                config,
            }
        })
        .collect())
}

fn annotated(cfg: &PhantomConfig, n: usize) -> Vec<usize> {
    let nz = cfg.dims[2];
    let c = cfg.centre()[2];
    let a = cfg.brain_axes()[2];
    let lo = (c - a).ceil().max(0.0);
    let hi = (c + a).floor().min((nz - 1) as f64);
    let mut out: Vec<usize> = (0..n)
        .map(|i| (lo + (hi - lo) * (i as f64 + 0.5) / n as f64).round() as usize)
        .collect();
    out.dedup();
    out
}

/// Generates a cohort into `out_dir` (images/, labels/, wmh/) and writes
/// `out_dir/manifest.json`. Burden classes come from a per-dataset median
/// split of foreground voxel counts.
pub fn phantom_cohort(template: &PhantomConfig, cohort: &CohortConfig, out_dir: &Path) -> Result<Manifest> {
    let cases = cohort_cases(template, cohort)?;
    for sub in ["images", "labels", "wmh"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let results: Vec<Result<(CaseEntry, usize)>> = cases
        .par_iter()
        .map(|c| {
            let ph = generate_phantom(&c.config)?;
            let image = out_dir.join("images").join(format!("{}.nii.gz", c.id));
            write_volume(&ph.image, &image)?;
            let mut entry = CaseEntry::new(&c.id, &c.dataset, image);
            if cohort.with_labels {
                let labels = out_dir.join("labels").join(format!("{}.nii.gz", c.id));
                write_labels(&ph.labels, &labels)?;
                entry.labels = Some(labels);
            }
            if let Some(w) = &ph.wmh {
                let p = out_dir.join("wmh").join(format!("{}.nii.gz", c.id));
                write_volume(w, &p)?;
                entry.wmh = Some(p);
            }
            if let Some(n) = cohort.annotated_slices {
                entry.annotated_slices = Some(annotated(&c.config, n));
            }
            Ok((entry, ph.labels.foreground_count()))
        })
        .collect();
    let mut entries = Vec::with_capacity(results.len());
    let mut counts = Vec::with_capacity(results.len());
    for r in results {
        let (entry, fg) = r?;
        counts.push((entry.id.clone(), entry.dataset.clone(), fg));
        entries.push(entry);
    }
    let burden = median_split(&counts);
    for e in &mut entries {
        e.burden = burden.get(&e.id).copied();
    }
    let manifest = Manifest::new(entries);
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomConfig {
        PhantomConfig {
            dims: [32, 32, 32],
            n_tubes_wm: 6,
            n_tubes_bg: 2,
            ..Default::default()
        }
    }

    #[test]
    fn empty_phantom() {
        let cfg = PhantomConfig {
            n_tubes_wm: 0,
            n_tubes_bg: 0,
            noise_sigma: 0.0,
            ..small()
        };
        let p = generate_phantom(&cfg).unwrap();
        assert_eq!(p.labels.foreground_count(), 0);
        assert!(p.clusters.iter().all(|c| c.cluster_count == 0 && c.voxel_count == 0));
    }

    #[test]
    fn labels_stay_in_compartments() {
        let cfg = small();
        let p = generate_phantom(&cfg).unwrap();
        let (brain, bg) = cfg.compartment_masks();
        for (i, &l) in p.labels.data.iter().enumerate() {
            match l {
                WM_PVS => assert!(brain.data[i] && !bg.data[i]),
                BG_PVS => assert!(bg.data[i]),
                _ => {}
            }
        }
        assert_eq!(p.tubes.len(), 8);
    }

    #[test]
    fn deterministic() {
        let a = generate_phantom(&small()).unwrap();
        let b = generate_phantom(&small()).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn crowded_fails() {
        let cfg = PhantomConfig {
            dims: [12, 12, 12],
            n_tubes_bg: 1,
            length_range: [30.0, 40.0],
            ..small()
        };
        assert!(matches!(generate_phantom(&cfg), Err(Error::Crowded(_))));
    }

    #[test]
    fn wmh_blobs_map() {
        let cfg = PhantomConfig { wmh_blobs: 2, ..small() };
        let w = generate_phantom(&cfg).unwrap().wmh.unwrap();
        let (lo, hi) = w.min_max();
        assert!(lo >= 0.0 && hi <= 1.0 && hi > 0.5);
    }

    #[test]
    fn annotated_slices_inside_brain() {
        let s = annotated(&PhantomConfig { dims: [8, 8, 50], ..small() }, 10);
        assert_eq!(s.len(), 10);
        assert!(s.iter().all(|&z| z < 50));
    }
}
