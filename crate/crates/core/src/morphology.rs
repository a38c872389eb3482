//! Connected-component counting for cluster-wise PVS quantification.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelMap, IGNORE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    Eighteen,
    TwentySix,
}

impl Default for Connectivity {
    fn default() -> Self {
        Connectivity::TwentySix
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            other => Err(format!("connectivity must be 6, 18 or 26, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }
}

impl Connectivity {
    /// Neighbour offsets that precede a voxel in raster order.
    fn backward_offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1isize..=0 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let before = dz < 0 || (dz == 0 && (dy < 0 || (dy == 0 && dx < 0)));
                    if !before {
                        continue;
                    }
                    let order = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => order == 1,
                        Connectivity::Eighteen => order <= 2,
                        Connectivity::TwentySix => true,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

/// Component statistics for one class.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub class_id: u8,
    pub cluster_count: usize,
    pub voxel_count: usize,
    /// Component sizes, ascending.
    pub cluster_sizes: Vec<usize>,
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Labels each voxel of `labels == class_id` with a component index (0 for
/// voxels outside the class, components numbered from 1 in raster order).
pub fn label_components(labels: &LabelMap, class_id: u8, conn: Connectivity) -> Result<(Vec<u32>, usize)> {
    if class_id == IGNORE {
        return Err(Error::InvalidArgument("cannot count clusters of the ignore label".into()));
    }
    let [nx, ny, nz] = labels.dims();
    let offsets = conn.backward_offsets();
    let n = labels.data.len();
    let mut provisional = vec![u32::MAX; n];
    let mut ds = DisjointSet { parent: Vec::new() };

    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let idx = x + nx * (y + ny * z);
                if labels.data[idx] != class_id {
                    continue;
                }
                let mut root: Option<u32> = None;
                for [dx, dy, dz] in &offsets {
                    let (qx, qy, qz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                    if qx < 0 || qy < 0 || qz < 0 || qx >= nx as isize || qy >= ny as isize {
                        continue;
                    }
                    let q = qx as usize + nx * (qy as usize + ny * qz as usize);
                    let l = provisional[q];
                    if l == u32::MAX {
                        continue;
                    }
                    match root {
                        None => root = Some(l),
                        Some(r) => ds.union(r, l),
                    }
                }
                provisional[idx] = root.unwrap_or_else(|| {
                    let id = ds.parent.len() as u32;
                    ds.parent.push(id);
                    id
                });
            }
        }
    }

    let mut final_id = vec![0u32; ds.parent.len()];
    let mut next = 0u32;
    let mut out = vec![0u32; n];
    for idx in 0..n {
        let p = provisional[idx];
        if p == u32::MAX {
            continue;
        }
        let r = ds.find(p) as usize;
        if final_id[r] == 0 {
            next += 1;
            final_id[r] = next;
        }
        out[idx] = final_id[r];
    }
    Ok((out, next as usize))
}

pub fn connected_components(labels: &LabelMap, class_id: u8, conn: Connectivity) -> Result<ClusterStats> {
    let (comp, count) = label_components(labels, class_id, conn)?;
    let mut sizes = vec![0usize; count];
    for &c in &comp {
        if c > 0 {
            sizes[c as usize - 1] += 1;
        }
    }
    sizes.sort_unstable();
    Ok(ClusterStats {
        class_id,
        cluster_count: count,
        voxel_count: sizes.iter().sum(),
        cluster_sizes: sizes,
    })
}

/// Paired per-case cluster counts `(predicted, reference)`.
pub fn cluster_count_vector(
    cases: &[(LabelMap, LabelMap)],
    class_id: u8,
    conn: Connectivity,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("no cases to count".into()));
    }
    let mut pred = Vec::with_capacity(cases.len());
    let mut refs = Vec::with_capacity(cases.len());
    for (p, r) in cases {
        p.grid.ensure_matches(&r.grid, "prediction vs reference")?;
        pred.push(connected_components(p, class_id, conn)?.cluster_count as f64);
        refs.push(connected_components(r, class_id, conn)?.cluster_count as f64);
    }
    Ok((pred, refs))
}
