//! Saturation Δ: how strongly the stabilizing constant dominates each SSIM
//! component, `Δ = min(|c/a|, |c/b|)` for a component `(a + c)/(b + c)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::DatasetCalibration;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::reduce;
use crate::ssim::{Constants, DataRange, MetricConfig};
use crate::stats::{StatsGrid, WindowStats};

/// Magnitudes below this are raised to it before dividing.
pub const DENOMINATOR_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Luminance,
    Contrast,
    Structure,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Luminance, Component::Contrast, Component::Structure];

    pub fn as_str(&self) -> &'static str {
        match self {
            Component::Luminance => "luminance",
            Component::Contrast => "contrast",
            Component::Structure => "structure",
        }
    }
}

/// Δ of one window for one component, and whether a floor was applied.
#[inline]
fn delta(c: f64, a: f64, b: f64) -> (f64, bool) {
    let (aa, bb) = (a.abs(), b.abs());
    let clamped = aa < DENOMINATOR_FLOOR || bb < DENOMINATOR_FLOOR;
    let d = (c / aa.max(DENOMINATOR_FLOOR)).abs().min((c / bb.max(DENOMINATOR_FLOOR)).abs());
    (d, clamped)
}

/// Δ per component for one window.
pub fn window_saturation(s: &WindowStats, k: &Constants) -> [(f64, bool); 3] {
    let (sx, sy) = (s.sx(), s.sy());
    [
        delta(k.c1, 2.0 * s.ux * s.uy, s.ux * s.ux + s.uy * s.uy),
        delta(k.c2, 2.0 * sx * sy, s.vx + s.vy),
        delta(k.c3, s.vxy, sx * sy),
    ]
}

/// Per-window Δ grids, in the layout of the statistics grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SaturationMaps {
    pub luminance: Vec<f64>,
    pub contrast: Vec<f64>,
    pub structure: Vec<f64>,
    /// Windows where a denominator was floored, per component.
    pub clamped: [usize; 3],
}

impl SaturationMaps {
    pub fn component(&self, c: Component) -> &[f64] {
        match c {
            Component::Luminance => &self.luminance,
            Component::Contrast => &self.contrast,
            Component::Structure => &self.structure,
        }
    }

    /// Mean Δ per component.
    pub fn means(&self) -> [f64; 3] {
        Component::ALL.map(|c| reduce::mean(self.component(c)))
    }
}

pub fn saturation_map(grid: &StatsGrid, k: &Constants) -> Result<SaturationMaps> {
    if grid.is_empty() {
        return Err(Error::invalid("empty statistics grid"));
    }
    let per: Vec<[(f64, bool); 3]> = (0..grid.len())
        .into_par_iter()
        .map(|i| window_saturation(&grid.get(i), k))
        .collect();
    let take = |j: usize| per.iter().map(|w| w[j].0).collect::<Vec<f64>>();
    let count = |j: usize| per.iter().filter(|w| w[j].1).count();
    Ok(SaturationMaps {
        luminance: take(0),
        contrast: take(1),
        structure: take(2),
        clamped: [count(0), count(1), count(2)],
    })
}

/// Dataset summary for one component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentSaturation {
    /// Mean over images of the per-image mean Δ.
    pub mean: f64,
    /// Population std over images of the per-image mean Δ.
    pub std: f64,
    pub clamped: usize,
    pub windows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaturationReport {
    pub luminance: ComponentSaturation,
    pub contrast: ComponentSaturation,
    pub structure: ComponentSaturation,
    /// Per-image mean Δ as `[luminance, contrast, structure]`.
    pub per_image: Vec<[f64; 3]>,
}

impl SaturationReport {
    pub fn component(&self, c: Component) -> &ComponentSaturation {
        match c {
            Component::Luminance => &self.luminance,
            Component::Contrast => &self.contrast,
            Component::Structure => &self.structure,
        }
    }

    fn from_maps(maps: Vec<SaturationMaps>) -> Self {
        let per_image: Vec<[f64; 3]> = maps.iter().map(|m| m.means()).collect();
        let windows: usize = maps.iter().map(|m| m.luminance.len()).sum();
        let summary = |j: usize| {
            let vals: Vec<f64> = per_image.iter().map(|v| v[j]).collect();
            let (mean, std) = reduce::mean_std(&vals);
            ComponentSaturation {
                mean,
                std,
                clamped: maps.iter().map(|m| m.clamped[j]).sum(),
                windows,
            }
        };
        Self {
            luminance: summary(0),
            contrast: summary(1),
            structure: summary(2),
            per_image,
        }
    }
}

/// Processing applied before measuring Δ, from raw intensities to the full
/// calibrated operands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineVariant {
    /// Raw intensities with the configured range policy.
    Raw,
    /// Dataset offsets subtracted; same `γ` as `Raw`.
    BackgroundRemoved,
    /// Offsets subtracted and divided by `max_gt`, with `γ = 1`.
    Downscaled,
    /// The calibrated operands with the calibration's `γ`.
    Full,
}

impl PipelineVariant {
    pub const ALL: [PipelineVariant; 4] = [
        PipelineVariant::Raw,
        PipelineVariant::BackgroundRemoved,
        PipelineVariant::Downscaled,
        PipelineVariant::Full,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PipelineVariant::Raw => "raw",
            PipelineVariant::BackgroundRemoved => "background-removed",
            PipelineVariant::Downscaled => "downscaled",
            PipelineVariant::Full => "full",
        }
    }
}

fn check_sets(gt_set: &[Image], pred_set: &[Image]) -> Result<()> {
    if gt_set.is_empty() {
        return Err(Error::invalid("saturation needs at least one image pair"));
    }
    if gt_set.len() != pred_set.len() {
        return Err(Error::invalid(format!(
            "{} ground-truth images but {} predictions",
            gt_set.len(),
            pred_set.len()
        )));
    }
    Ok(())
}

/// `γ` for raw ground truth; dataset-range policies span every GT image.
fn raw_gamma(config: &MetricConfig, gt_set: &[Image], gt: &Image) -> Result<f64> {
    match config.data_range {
        DataRange::GtDatasetRange => {
            let max = gt_set.iter().map(Image::max).fold(f64::NEG_INFINITY, f64::max);
            let min = gt_set.iter().map(Image::min).fold(f64::INFINITY, f64::min);
            Ok(max - min)
        }
        _ => config.resolve_gamma(gt),
    }
}

fn pair_maps(x: &Image, y: &Image, config: &MetricConfig, k: &Constants) -> Result<SaturationMaps> {
    saturation_map(&config.local_statistics(x, y)?, k)
}

/// Δ summary over a dataset. With a calibration, Δ is measured on the
/// calibrated operands; otherwise on the raw pairs.
pub fn saturation_report(
    gt_set: &[Image],
    pred_set: &[Image],
    config: &MetricConfig,
    calibration: Option<&DatasetCalibration>,
) -> Result<SaturationReport> {
    match calibration {
        Some(cal) => pipeline_report(gt_set, pred_set, config, cal, PipelineVariant::Full),
        None => {
            check_sets(gt_set, pred_set)?;
            let maps = gt_set
                .iter()
                .zip(pred_set)
                .map(|(g, p)| {
                    let k = config.constants(raw_gamma(config, gt_set, g)?)?;
                    pair_maps(g, p, config, &k)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SaturationReport::from_maps(maps))
        }
    }
}

/// Δ summary after the processing of `variant`, using the offsets, scale and
/// `α` of `calibration` where the variant calls for them.
pub fn pipeline_report(
    gt_set: &[Image],
    pred_set: &[Image],
    config: &MetricConfig,
    calibration: &DatasetCalibration,
    variant: PipelineVariant,
) -> Result<SaturationReport> {
    check_sets(gt_set, pred_set)?;
    if variant != PipelineVariant::Raw && !calibration.is_fitted() {
        return Err(Error::InvalidState("calibration has not been fitted".into()));
    }
    let (bg, bp, m) = (calibration.beta_gt(), calibration.beta_pred(), calibration.max_gt());
    let maps = gt_set
        .iter()
        .zip(pred_set)
        .map(|(g, p)| match variant {
            PipelineVariant::Raw => {
                let k = config.constants(raw_gamma(config, gt_set, g)?)?;
                pair_maps(g, p, config, &k)
            }
            PipelineVariant::BackgroundRemoved => {
                let k = config.constants(raw_gamma(config, gt_set, g)?)?;
                pair_maps(&g.map(|v| v - bg)?, &p.map(|v| v - bp)?, config, &k)
            }
            PipelineVariant::Downscaled => {
                let k = config.constants(1.0)?;
                pair_maps(&g.map(|v| (v - bg) / m)?, &p.map(|v| (v - bp) / m)?, config, &k)
            }
            PipelineVariant::Full => {
                let (x, y) = calibration.operands(g, p)?;
                let k = calibration.constants_for(config, &x)?;
                pair_maps(&x, &y, config, &k)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SaturationReport::from_maps(maps))
}
