//! Structural similarity metrics for microscopy image pairs.
//!
//! The crate implements windowed SSIM and MS-SSIM together with their
//! calibrated variants, MicroSSIM and MicroMS3IM. Calibration removes a
//! dataset-level background offset from ground truth and prediction,
//! downscales both by the largest ground-truth intensity, and fits a single
//! multiplicative factor for the predictions that maximizes mean SSIM.

pub mod baselines;
pub mod calibration;
pub mod cli;
pub mod error;
pub mod image;
pub mod io;
pub mod multiscale;
pub mod optimize;
pub mod percentile;
pub mod reduce;
pub mod saturation;
pub mod ssim;
pub mod stats;
pub mod synthetic;
pub mod window;

pub use calibration::{
    calibrate, calibrate_with, micro_ssim, CalibrationOptions, Calibrated, DatasetCalibration, FitReport,
};
pub use error::{Error, Result};
pub use image::Image;
pub use io::{load_image, load_manifest, save_image, ImageFormat, PairManifest};
pub use multiscale::{micro_ms3im, ms_ssim, MsSsimConfig};
pub use ssim::{mssim, Constants, DataRange, MetricConfig, SsimBreakdown};
pub use stats::{local_statistics, StatsGrid, StatsSet, VarianceMode, WindowStats};
pub use window::{Window, WindowKind};
