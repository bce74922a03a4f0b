//! Reference metrics that MicroSSIM is compared against. Each one is a
//! pre-transformation of the pair followed by the shared [`mssim`] kernel.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::reduce;
use crate::ssim::{mssim, DataRange, MetricConfig, SsimBreakdown};

/// SSIM of the untouched pair.
pub fn vanilla_ssim(gt: &Image, pred: &Image, config: &MetricConfig) -> Result<SsimBreakdown> {
    mssim(gt, pred, config)
}

/// `(v − mean)/std` with the population std.
pub fn standardize(img: &Image) -> Result<Image> {
    let (m, s) = reduce::mean_std(img.pixels());
    if !(s > 0.0) {
        return Err(Error::invalid("cannot standardize a constant image"));
    }
    img.map(|v| (v - m) / s)
}

/// SSIM after standardizing each image by its own mean and std. Unless the
/// range is explicit, `γ` is the range of the standardized ground truth.
pub fn zscore_ssim(gt: &Image, pred: &Image, config: &MetricConfig) -> Result<SsimBreakdown> {
    let x = standardize(gt)?;
    let y = standardize(pred)?;
    let cfg = match config.data_range {
        DataRange::Explicit(_) => config.clone(),
        _ => config.clone().with_data_range(DataRange::GtImageRange),
    };
    mssim(&x, &y, &cfg)
}

/// Least-squares map `scale·pred + offset ≈ gt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineFit {
    pub scale: f64,
    pub offset: f64,
    pub residual_mse: f64,
}

impl AffineFit {
    /// Mean squared error of `scale·pred + offset` against `gt`.
    pub fn mse_of(gt: &Image, pred: &Image, scale: f64, offset: f64) -> f64 {
        let (g, p) = (gt.pixels(), pred.pixels());
        reduce::mean_by(g.len(), |i| {
            let r = scale * p[i] + offset - g[i];
            r * r
        })
    }

    /// Normal-equations solution on centered data.
    pub fn fit(gt: &Image, pred: &Image) -> Result<Self> {
        gt.same_dims(pred)?;
        let (g, p) = (gt.pixels(), pred.pixels());
        let (mg, mp) = (reduce::mean(g), reduce::mean(p));
        let n = g.len();
        let var = reduce::mean_by(n, |i| (p[i] - mp) * (p[i] - mp));
        if !(var > 0.0) {
            return Err(Error::invalid("cannot fit an affine map to a constant prediction"));
        }
        let cov = reduce::mean_by(n, |i| (p[i] - mp) * (g[i] - mg));
        let scale = cov / var;
        let offset = mg - scale * mp;
        if !(scale.is_finite() && offset.is_finite()) {
            return Err(Error::invalid("degenerate affine fit"));
        }
        Ok(Self {
            scale,
            offset,
            residual_mse: Self::mse_of(gt, pred, scale, offset),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CareOptions {
    /// Center both images and fit only a scale.
    pub zero_mean: bool,
}

/// SSIM after mapping the prediction onto the ground truth by least squares,
/// fitted per pair on raw intensities.
pub fn care_ssim(gt: &Image, pred: &Image, config: &MetricConfig) -> Result<(SsimBreakdown, AffineFit)> {
    care_ssim_with(gt, pred, config, CareOptions::default())
}

pub fn care_ssim_with(
    gt: &Image,
    pred: &Image,
    config: &MetricConfig,
    options: CareOptions,
) -> Result<(SsimBreakdown, AffineFit)> {
    let fit = AffineFit::fit(gt, pred)?;
    if options.zero_mean {
        let (mg, mp) = (gt.mean(), pred.mean());
        let x = gt.map(|v| v - mg)?;
        let y = pred.map(|v| fit.scale * (v - mp))?;
        let k = config.resolve_constants(gt)?;
        let s = crate::ssim::mssim_with_constants(&x, &y, config, &k)?;
        let zero = AffineFit {
            scale: fit.scale,
            offset: 0.0,
            residual_mse: AffineFit::mse_of(&x, &pred.map(|v| v - mp)?, fit.scale, 0.0),
        };
        return Ok((s, zero));
    }
    let y = pred.map(|v| fit.scale * v + fit.offset)?;
    let k = config.resolve_constants(gt)?;
    Ok((crate::ssim::mssim_with_constants(gt, &y, config, &k)?, fit))
}

/// Marks valid-region windows whose ground-truth window mean lies below
/// `background + 0.05·(max − background)`.
pub fn background_mask(gt: &Image, config: &MetricConfig, background: f64) -> Result<Vec<bool>> {
    let threshold = background + 0.05 * (gt.max() - background);
    let grid = config.local_statistics(gt, gt)?;
    Ok(grid.ux.iter().map(|&m| m < threshold).collect())
}

/// Mean SSIM over background and foreground windows of `breakdown`.
pub fn region_scores(breakdown: &SsimBreakdown, background: &[bool]) -> (Option<f64>, Option<f64>) {
    let fg: Vec<bool> = background.iter().map(|b| !b).collect();
    (breakdown.masked_mean(background), breakdown.masked_mean(&fg))
}
