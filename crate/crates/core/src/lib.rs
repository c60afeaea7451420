//! Training-free multimodal anomaly detection by mutual scoring.
//!
//! Unlabeled samples (2D patch-feature grids and/or 3D point clouds) score
//! each other patch by patch; the per-patch scores are turned into anomaly
//! maps, sample-level scores are recalibrated over a sample similarity graph,
//! and the results are evaluated with the usual AUROC / AP / F1-max / PRO
//! metrics.
//!
//! The numeric modules are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision used by the pipeline and by the oracles.

pub mod anomaly_maps;
pub mod geometry3d;
pub mod matrix;
pub mod metrics;
pub mod msm;
pub mod pipeline;
pub mod report;
pub mod rescon;
pub mod scalar;
pub mod snamd;
pub mod synth_bench;
pub mod tensor_io;

pub use matrix::Matrix;
pub use scalar::Scalar;

/// Precision of the end-to-end pipeline (matches the `.mt` feature dtype).
pub type Real = f32;

pub type PointCloud32 = geometry3d::PointCloud<f32>;
pub type PointCloud64 = geometry3d::PointCloud<f64>;
