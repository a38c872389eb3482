//! Volume, label-map and mask containers.
//!
//! All grids use the same fixed voxel order: the first axis varies fastest,
//! so the linear index of `(i, j, k)` is `i + nx * (j + ny * k)`. The affine
//! is carried along verbatim and never used to reorient data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BACKGROUND: u8 = 0;
pub const WM_PVS: u8 = 1;
pub const BG_PVS: u8 = 2;
pub const WMH: u8 = 3;
pub const IGNORE: u8 = 255;

/// Returns true for the label ids understood by the pipeline.
pub fn is_valid_label(v: u8) -> bool {
    matches!(v, BACKGROUND | WM_PVS | BG_PVS | WMH | IGNORE)
}

pub type Affine = [[f64; 4]; 4];

pub fn identity_affine(spacing: [f64; 3]) -> Affine {
    let mut a = [[0.0; 4]; 4];
    for (i, s) in spacing.iter().enumerate() {
        a[i][i] = *s;
    }
    a[3][3] = 1.0;
    a
}

/// Geometry shared by every image and label map on the same voxel lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub affine: Affine,
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let g = Grid {
            dims,
            spacing,
            affine: identity_affine(spacing),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn with_affine(mut self, affine: Affine) -> Self {
        self.affine = affine;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidGrid(format!("zero dimension in {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidGrid(format!(
                "spacing must be positive, got {:?}",
                self.spacing
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let rest = idx / self.dims[0];
        [i, rest % self.dims[1], rest / self.dims[1]]
    }

    /// Same lattice: dims and spacing must agree exactly.
    pub fn same_lattice(&self, other: &Grid) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }

    pub fn ensure_matches(&self, other: &Grid, what: &str) -> Result<()> {
        if self.same_lattice(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: dims {:?} spacing {:?} vs dims {:?} spacing {:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )))
        }
    }
}

/// Scalar image.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub grid: Grid,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f32>) -> Result<Self> {
        grid.validate()?;
        if data.len() != grid.len() {
            return Err(Error::InvalidGrid(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                grid.dims
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite voxel value at index {pos}"
            )));
        }
        Ok(Volume { grid, data })
    }

    pub fn filled(grid: Grid, value: f32) -> Self {
        let n = grid.len();
        Volume {
            grid,
            data: vec![value; n],
        }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let [nx, ny, nz] = grid.dims;
        let mut data = Vec::with_capacity(grid.len());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    data.push(f(i, j, k));
                }
            }
        }
        Volume { grid, data }
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Min and max restricted to a mask; `None` when the mask is empty.
    pub fn masked_min_max(&self, mask: Option<&Mask>) -> Option<(f32, f32)> {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        let mut any = false;
        for (i, &v) in self.data.iter().enumerate() {
            if mask.is_none_or(|m| m.data[i]) {
                lo = lo.min(v);
                hi = hi.max(v);
                any = true;
            }
        }
        any.then_some((lo, hi))
    }
}

/// Integer label map on a volume lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub grid: Grid,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(grid: Grid, data: Vec<u8>) -> Result<Self> {
        grid.validate()?;
        if data.len() != grid.len() {
            return Err(Error::InvalidGrid(format!(
                "label length {} does not match dims {:?}",
                data.len(),
                grid.dims
            )));
        }
        if let Some(&bad) = data.iter().find(|&&v| !is_valid_label(v)) {
            return Err(Error::InvalidLabel(bad));
        }
        Ok(LabelMap { grid, data })
    }

    pub fn filled(grid: Grid, value: u8) -> Self {
        let n = grid.len();
        LabelMap {
            grid,
            data: vec![value; n],
        }
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> u8 {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn count(&self, class_id: u8) -> usize {
        self.data.iter().filter(|&&v| v == class_id).count()
    }

    /// Voxels that are neither background nor ignore.
    pub fn foreground_count(&self) -> usize {
        self.data
            .iter()
            .filter(|&&v| v != BACKGROUND && v != IGNORE)
            .count()
    }
}

/// Binary voxel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub dims: [usize; 3],
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::InvalidGrid(format!(
                "mask length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Mask { dims, data })
    }

    pub fn full(dims: [usize; 3], value: bool) -> Self {
        Mask {
            dims,
            data: vec![value; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn not(&self) -> Mask {
        Mask {
            dims: self.dims,
            data: self.data.iter().map(|b| !b).collect(),
        }
    }

    pub fn ensure_dims(&self, dims: [usize; 3]) -> Result<()> {
        if self.dims == dims {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "mask dims {:?} vs volume dims {:?}",
                self.dims, dims
            )))
        }
    }
}
