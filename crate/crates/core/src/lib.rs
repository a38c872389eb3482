//! Core data model and image-processing operators for perivascular-space
//! (PVS) segmentation: volumes and label maps, NIfTI-1 I/O, resampling,
//! intensity normalisation, enhancement filters, label-scheme handling,
//! cluster counting, evaluation statistics and a synthetic phantom generator.

pub mod annotation;
pub mod enhance;
pub mod error;
pub mod eval;
pub mod intensity;
pub mod manifest;
pub mod morphology;
pub mod nifti;
pub mod phantom;
pub mod preprocess;
pub mod resample;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Grid, LabelMap, Mask, Volume};
