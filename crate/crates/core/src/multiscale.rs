//! MS-SSIM over an average-pooled pyramid, and MicroMS3IM on calibrated
//! operands.

use crate::calibration::DatasetCalibration;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::reduce;
use crate::ssim::{contrast_structure, ssim_value, Constants, MetricConfig};

/// The canonical five-level exponents. They sum to 1.0001, so the default
/// configuration uses them normalized.
pub const CANONICAL_LEVEL_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Per-level means below this are raised to it before a fractional
/// exponent is applied.
pub const LEVEL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct MsSsimConfig {
    pub base: MetricConfig,
    pub levels: usize,
    pub level_weights: Vec<f64>,
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        Self {
            base: MetricConfig::default(),
            levels: 5,
            level_weights: default_level_weights(),
        }
    }
}

/// [`CANONICAL_LEVEL_WEIGHTS`] scaled to sum to one.
pub fn default_level_weights() -> Vec<f64> {
    let total: f64 = CANONICAL_LEVEL_WEIGHTS.iter().sum();
    CANONICAL_LEVEL_WEIGHTS.iter().map(|w| w / total).collect()
}

impl MsSsimConfig {
    pub fn new(base: MetricConfig, level_weights: Vec<f64>) -> Result<Self> {
        let cfg = Self {
            base,
            levels: level_weights.len(),
            level_weights,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Default pyramid on top of `base`.
    pub fn with_base(base: MetricConfig) -> Self {
        Self { base, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.levels == 0 || self.level_weights.len() != self.levels {
            return Err(Error::invalid(format!(
                "{} level weights for {} levels",
                self.level_weights.len(),
                self.levels
            )));
        }
        if self.level_weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::invalid("level weights must be positive"));
        }
        let total: f64 = self.level_weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("level weights sum to {total}, not 1")));
        }
        Ok(())
    }
}

/// 2x2 average pooling; a trailing odd row or column is dropped.
pub fn downsample(img: &Image) -> Result<Image> {
    let (h, w) = img.dims();
    if h < 2 || w < 2 {
        return Err(Error::invalid(format!("cannot downsample a {h}x{w} image")));
    }
    Image::from_fn(h / 2, w / 2, |r, c| {
        let (r2, c2) = (2 * r, 2 * c);
        0.25 * (img.get(r2, c2) + img.get(r2, c2 + 1) + img.get(r2 + 1, c2) + img.get(r2 + 1, c2 + 1))
    })
}

/// Per-level breakdown of an MS-SSIM evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct MsSsimResult {
    pub value: f64,
    /// Mean contrast-structure term of every level but the last, then the
    /// mean full SSIM of the last level.
    pub level_means: Vec<f64>,
    /// Levels whose mean was raised to [`LEVEL_FLOOR`].
    pub floored_levels: usize,
}

/// MS-SSIM with `γ` resolved on the full-resolution ground truth `x`.
pub fn ms_ssim(x: &Image, y: &Image, config: &MsSsimConfig) -> Result<f64> {
    Ok(ms_ssim_detailed(x, y, config)?.value)
}

pub fn ms_ssim_detailed(x: &Image, y: &Image, config: &MsSsimConfig) -> Result<MsSsimResult> {
    config.validate()?;
    let k = config.base.resolve_constants(x)?;
    ms_ssim_with_constants(x, y, config, &k)
}

/// MS-SSIM with fixed constants at every level. Levels before the last
/// contribute their mean contrast-structure term; the last contributes its
/// mean SSIM, which carries the luminance comparison.
pub fn ms_ssim_with_constants(x: &Image, y: &Image, config: &MsSsimConfig, k: &Constants) -> Result<MsSsimResult> {
    config.validate()?;
    x.same_dims(y)?;
    let side = config.base.window.side();
    let (h, w) = x.dims();
    for level in 0..config.levels {
        let (lh, lw) = (h >> level, w >> level);
        if lh < side || lw < side {
            return Err(Error::invalid(format!(
                "level {level} is {lh}x{lw}, smaller than the {side}x{side} window"
            )));
        }
    }
    let mut xs = x.clone();
    let mut ys = y.clone();
    let mut level_means = Vec::with_capacity(config.levels);
    let mut value = 1.0;
    let mut floored_levels = 0;
    for (level, &weight) in config.level_weights.iter().enumerate() {
        if level > 0 {
            xs = downsample(&xs)?;
            ys = downsample(&ys)?;
        }
        let grid = config.base.local_statistics(&xs, &ys)?;
        let last = level + 1 == config.levels;
        let mean = if last {
            reduce::mean_by(grid.len(), |i| ssim_value(&grid.get(i), k))
        } else {
            reduce::mean_by(grid.len(), |i| contrast_structure(&grid.get(i), k))
        };
        level_means.push(mean);
        let base = if mean < LEVEL_FLOOR && weight.fract() != 0.0 {
            floored_levels += 1;
            LEVEL_FLOOR
        } else {
            mean
        };
        value *= base.powf(weight);
    }
    Ok(MsSsimResult {
        value,
        level_means,
        floored_levels,
    })
}

/// MS-SSIM of `(gt − β_gt)/max_gt` against `α·(pred − β_pred)/max_gt`.
pub fn micro_ms3im(gt: &Image, pred: &Image, calibration: &DatasetCalibration, config: &MsSsimConfig) -> Result<f64> {
    Ok(micro_ms3im_detailed(gt, pred, calibration, config)?.value)
}

pub fn micro_ms3im_detailed(
    gt: &Image,
    pred: &Image,
    calibration: &DatasetCalibration,
    config: &MsSsimConfig,
) -> Result<MsSsimResult> {
    let (x, y) = calibration.operands(gt, pred)?;
    let k = calibration.constants_for(&config.base, &x)?;
    ms_ssim_with_constants(&x, &y, config, &k)
}
