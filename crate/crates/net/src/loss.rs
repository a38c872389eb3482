//! Partial dice + cross-entropy loss over softmax outputs.
//!
//! Voxels labelled 255 are excluded from every sum of both terms.

use pvseg_core::volume::IGNORE;
use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};
use crate::ops::Act;

/// Lower clamp inside the cross-entropy logarithm.
pub const CE_EPS: f64 = 1e-12;

/// Softmax output and labels of a batch. `u` is laid out `[batch][class][voxel]`.
#[derive(Debug, Clone)]
pub struct LossInputs {
    pub u: Vec<f64>,
    pub labels: Vec<u8>,
    pub batch: usize,
    pub classes: usize,
    pub voxels: usize,
    /// Classes averaged by the dice term.
    pub foreground: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub dice: f64,
    pub ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { dice: 1.0, ce: 1.0 }
    }
}

impl LossWeights {
    pub const CE_ONLY: LossWeights = LossWeights { dice: 0.0, ce: 1.0 };
    pub const DICE_ONLY: LossWeights = LossWeights { dice: 1.0, ce: 0.0 };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub dice: f64,
    pub ce: f64,
    pub total: f64,
}

impl LossInputs {
    pub fn new(
        u: Vec<f64>,
        labels: Vec<u8>,
        batch: usize,
        classes: usize,
        voxels: usize,
        foreground: Vec<u8>,
    ) -> Result<Self> {
        if u.len() != batch * classes * voxels || labels.len() != batch * voxels {
            return Err(NetError::Shape(format!(
                "loss inputs: {} probabilities and {} labels for batch {batch}, {classes} classes, {voxels} voxels",
                u.len(),
                labels.len()
            )));
        }
        if foreground.iter().any(|&k| k as usize >= classes || k == 0) {
            return Err(NetError::Config(format!(
                "dice classes {foreground:?} must lie in 1..{classes}"
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l != IGNORE && l as usize >= classes) {
            return Err(NetError::Shape(format!("label {l} outside the {classes} network classes")));
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(NetError::NonFinite("softmax output".into()));
        }
        Ok(LossInputs {
            u,
            labels,
            batch,
            classes,
            voxels,
            foreground,
        })
    }

    /// Packs per-item probability maps and label vectors.
    pub fn from_probs(probs: &[Act], labels: &[Vec<u8>], foreground: &[u8]) -> Result<Self> {
        let first = probs.first().ok_or_else(|| NetError::Shape("empty batch".into()))?;
        let (k, n) = (first.c, first.voxels());
        if labels.len() != probs.len() || probs.iter().any(|p| p.c != k || p.voxels() != n) {
            return Err(NetError::Shape("batch items differ in shape".into()));
        }
        let u = probs.iter().flat_map(|p| p.data.iter().copied()).collect();
        let l = labels.iter().flat_map(|l| l.iter().copied()).collect();
        Self::new(u, l, probs.len(), k, n, foreground.to_vec())
    }

    fn kept(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE).count()
    }

    fn require_kept(&self) -> Result<usize> {
        match self.kept() {
            0 => Err(NetError::Degenerate("every voxel is ignored; the loss is undefined".into())),
            n => Ok(n),
        }
    }

    fn u_at(&self, b: usize, k: usize, i: usize) -> f64 {
        self.u[(b * self.classes + k) * self.voxels + i]
    }

    /// Per-class (intersection, denominator) over non-ignored voxels.
    fn dice_sums(&self) -> Vec<(f64, f64)> {
        self.foreground
            .iter()
            .map(|&k| {
                let (mut inter, mut den) = (0.0, 0.0);
                for b in 0..self.batch {
                    for i in 0..self.voxels {
                        let l = self.labels[b * self.voxels + i];
                        if l == IGNORE {
                            continue;
                        }
                        let u = self.u_at(b, k as usize, i);
                        let v = (l == k) as u8 as f64;
                        inter += u * v;
                        den += u + v;
                    }
                }
                (inter, den)
            })
            .collect()
    }

    pub fn dice_loss(&self) -> Result<f64> {
        self.require_kept()?;
        if self.foreground.is_empty() {
            return Ok(0.0);
        }
        let s: f64 = self
            .dice_sums()
            .iter()
            .map(|&(i, d)| if d > 0.0 { i / d } else { 0.0 })
            .sum();
        Ok(-2.0 / self.foreground.len() as f64 * s)
    }

    pub fn cross_entropy_loss(&self) -> Result<f64> {
        let n = self.require_kept()?;
        let mut s = 0.0;
        for b in 0..self.batch {
            for i in 0..self.voxels {
                let l = self.labels[b * self.voxels + i];
                if l != IGNORE {
                    s -= self.u_at(b, l as usize, i).max(CE_EPS).ln();
                }
            }
        }
        Ok(s / n as f64)
    }

    pub fn total_loss(&self) -> Result<f64> {
        Ok(self.dice_loss()? + self.cross_entropy_loss()?)
    }

    pub fn evaluate(&self, w: LossWeights) -> Result<LossValue> {
        let dice = self.dice_loss()?;
        let ce = self.cross_entropy_loss()?;
        Ok(LossValue {
            dice,
            ce,
            total: w.dice * dice + w.ce * ce,
        })
    }

    /// Weighted loss and its gradient with respect to `u`.
    pub fn value_and_grad(&self, w: LossWeights) -> Result<(LossValue, Vec<f64>)> {
        let value = self.evaluate(w)?;
        let n_kept = self.kept() as f64;
        let mut g = vec![0.0; self.u.len()];
        if w.dice != 0.0 && !self.foreground.is_empty() {
            let scale = -2.0 / self.foreground.len() as f64 * w.dice;
            for (&k, (inter, den)) in self.foreground.iter().zip(self.dice_sums()) {
                if den <= 0.0 {
                    continue;
                }
                for b in 0..self.batch {
                    for i in 0..self.voxels {
                        let l = self.labels[b * self.voxels + i];
                        if l == IGNORE {
                            continue;
                        }
                        let v = (l == k) as u8 as f64;
                        g[(b * self.classes + k as usize) * self.voxels + i] += scale * (v * den - inter) / (den * den);
                    }
                }
            }
        }
        if w.ce != 0.0 {
            for b in 0..self.batch {
                for i in 0..self.voxels {
                    let l = self.labels[b * self.voxels + i];
                    if l == IGNORE {
                        continue;
                    }
                    let idx = (b * self.classes + l as usize) * self.voxels + i;
                    let u = self.u[idx];
                    if u >= CE_EPS {
                        g[idx] -= w.ce / (n_kept * u);
                    }
                }
            }
        }
        Ok((value, g))
    }
}

/// Chain rule through the per-voxel softmax: `dz = u * (g - <g, u>)` for one
/// item laid out `[class][voxel]`.
pub fn softmax_backward(u: &[f64], g: &[f64], classes: usize, voxels: usize) -> Vec<f64> {
    let mut dz = vec![0.0; u.len()];
    for i in 0..voxels {
        let dot: f64 = (0..classes).map(|c| g[c * voxels + i] * u[c * voxels + i]).sum();
        for c in 0..classes {
            let j = c * voxels + i;
            dz[j] = u[j] * (g[j] - dot);
        }
    }
    dz
}
