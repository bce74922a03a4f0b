//! Windowed SSIM, its luminance/contrast/structure decomposition, and the
//! alpha-scaled objective used for calibration.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::reduce;
use crate::stats::{local_statistics_with, StatsGrid, StatsSet, VarianceMode, WindowStats};
use crate::window::Window;

/// How the dynamic range `γ` behind the stabilizing constants is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DataRange {
    Explicit(f64),
    /// `max − min` of the ground-truth image being scored.
    GtImageRange,
    /// `max − min` over every ground-truth image of the dataset. Outside of a
    /// dataset context this falls back to the single image's range.
    GtDatasetRange,
    /// `2^bits − 1`.
    Dtype(u8),
}

impl DataRange {
    pub fn dtype_max(bits: u8) -> Result<f64> {
        if !(1..=32).contains(&bits) {
            return Err(Error::invalid(format!("unsupported bit depth {bits}")));
        }
        Ok(((1u64 << bits) - 1) as f64)
    }
}

/// SSIM stabilizers `c1 = (k1·γ)²`, `c2 = (k2·γ)²`, `c3 = c2/2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Constants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl Constants {
    pub fn new(c1: f64, c2: f64) -> Self {
        Self {
            c1,
            c2,
            c3: c2 / 2.0,
        }
    }

    pub fn from_range(k1: f64, k2: f64, gamma: f64) -> Self {
        Self::new((k1 * gamma).powi(2), (k2 * gamma).powi(2))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricConfig {
    pub window: Window,
    pub k1: f64,
    pub k2: f64,
    pub data_range: DataRange,
    pub variance: VarianceMode,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            window: Window::gaussian11(),
            k1: 0.01,
            k2: 0.03,
            data_range: DataRange::GtImageRange,
            variance: VarianceMode::Weighted,
        }
    }
}

impl MetricConfig {
    pub fn with_window(mut self, window: Window) -> Self {
        self.window = window;
        self
    }

    pub fn with_data_range(mut self, range: DataRange) -> Self {
        self.data_range = range;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, k) in [("k1", self.k1), ("k2", self.k2)] {
            if !(k.is_finite() && k > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {k}")));
            }
        }
        Ok(())
    }

    /// Resolves `γ` for a pair whose ground truth is `gt`.
    pub fn resolve_gamma(&self, gt: &Image) -> Result<f64> {
        let gamma = match self.data_range {
            DataRange::Explicit(v) => v,
            DataRange::GtImageRange | DataRange::GtDatasetRange => gt.range(),
            DataRange::Dtype(bits) => DataRange::dtype_max(bits)?,
        };
        check_gamma(gamma)?;
        Ok(gamma)
    }

    pub fn constants(&self, gamma: f64) -> Result<Constants> {
        self.validate()?;
        check_gamma(gamma)?;
        Ok(Constants::from_range(self.k1, self.k2, gamma))
    }

    pub fn resolve_constants(&self, gt: &Image) -> Result<Constants> {
        self.constants(self.resolve_gamma(gt)?)
    }

    pub fn local_statistics(&self, x: &Image, y: &Image) -> Result<StatsGrid> {
        local_statistics_with(x, y, &self.window, self.variance)
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::invalid(format!("data range must be positive, got {gamma}")));
    }
    Ok(())
}

/// Luminance, contrast and structure of one window.
pub fn ssim_components(s: &WindowStats, k: &Constants) -> (f64, f64, f64) {
    let (sx, sy) = (s.sx(), s.sy());
    let l = (2.0 * s.ux * s.uy + k.c1) / (s.ux * s.ux + s.uy * s.uy + k.c1);
    let c = (2.0 * sx * sy + k.c2) / (s.vx + s.vy + k.c2);
    let st = (s.vxy + k.c3) / (sx * sy + k.c3);
    (l, c, st)
}

/// Simplified single-window SSIM (exponents 1, `c3 = c2/2`).
#[inline]
pub fn ssim_value(s: &WindowStats, k: &Constants) -> f64 {
    ((2.0 * s.ux * s.uy + k.c1) * (2.0 * s.vxy + k.c2))
        / ((s.ux * s.ux + s.uy * s.uy + k.c1) * (s.vx + s.vy + k.c2))
}

/// Contrast-structure product `(2·sxy + c2)/(vx + vy + c2)`.
#[inline]
pub fn contrast_structure(s: &WindowStats, k: &Constants) -> f64 {
    (2.0 * s.vxy + k.c2) / (s.vx + s.vy + k.c2)
}

/// SSIM of the pair `(x, αy)` for one window with `c3 = c2/2`.
#[inline]
pub fn scaled_ssim(s: &WindowStats, alpha: f64, k: &Constants) -> f64 {
    ((2.0 * alpha * s.ux * s.uy + k.c1) * (2.0 * alpha * s.vxy + k.c2))
        / ((alpha * alpha * s.vy + k.c2 + s.vx) * (alpha * alpha * s.uy * s.uy + k.c1 + s.ux * s.ux))
}

/// Mean of [`scaled_ssim`] over every window in the set.
pub fn scaled_ssim_objective(stats: &StatsSet, alpha: f64, k: &Constants) -> Result<f64> {
    if stats.is_empty() {
        return Err(Error::invalid("empty window statistics"));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    Ok(stats.mean_by(|s| scaled_ssim(&s, alpha, k)))
}

/// Per-window SSIM maps over the valid region plus their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct SsimBreakdown {
    pub valid_height: usize,
    pub valid_width: usize,
    pub luminance_map: Vec<f64>,
    pub contrast_map: Vec<f64>,
    pub structure_map: Vec<f64>,
    pub ssim_map: Vec<f64>,
    pub mssim: f64,
    pub constants: Constants,
}

impl SsimBreakdown {
    pub fn from_stats(grid: &StatsGrid, k: &Constants) -> Self {
        let n = grid.len();
        let mut luminance_map = vec![0.0; n];
        let mut contrast_map = vec![0.0; n];
        let mut structure_map = vec![0.0; n];
        let mut ssim_map = vec![0.0; n];
        luminance_map
            .par_iter_mut()
            .zip(contrast_map.par_iter_mut())
            .zip(structure_map.par_iter_mut())
            .zip(ssim_map.par_iter_mut())
            .enumerate()
            .for_each(|(i, (((l, c), st), v))| {
                let s = grid.get(i);
                (*l, *c, *st) = ssim_components(&s, k);
                *v = ssim_value(&s, k);
            });
        let mssim = reduce::mean(&ssim_map);
        Self {
            valid_height: grid.height,
            valid_width: grid.width,
            luminance_map,
            contrast_map,
            structure_map,
            ssim_map,
            mssim,
            constants: *k,
        }
    }

    pub fn mean_luminance(&self) -> f64 {
        reduce::mean(&self.luminance_map)
    }

    pub fn mean_contrast(&self) -> f64 {
        reduce::mean(&self.contrast_map)
    }

    pub fn mean_structure(&self) -> f64 {
        reduce::mean(&self.structure_map)
    }

    /// Mean SSIM over the windows selected by `mask` (same layout as the maps).
    pub fn masked_mean(&self, mask: &[bool]) -> Option<f64> {
        let picked: Vec<f64> = self
            .ssim_map
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .collect();
        (!picked.is_empty()).then(|| reduce::mean(&picked))
    }
}

/// Mean structural similarity between `x` (ground truth) and `y`.
pub fn mssim(x: &Image, y: &Image, config: &MetricConfig) -> Result<SsimBreakdown> {
    let k = config.resolve_constants(x)?;
    mssim_with_constants(x, y, config, &k)
}

pub fn mssim_with_constants(
    x: &Image,
    y: &Image,
    config: &MetricConfig,
    k: &Constants,
) -> Result<SsimBreakdown> {
    let grid = config.local_statistics(x, y)?;
    Ok(SsimBreakdown::from_stats(&grid, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::window::WindowKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform3() -> MetricConfig {
        MetricConfig::default()
            .with_window(Window::new(WindowKind::Uniform, 3, None).unwrap())
            .with_data_range(DataRange::Explicit(1.0))
    }

    fn random_image(h: usize, w: usize, rng: &mut impl Rng) -> Image {
        Image::from_fn(h, w, |_, _| rng.gen::<f64>()).unwrap()
    }

    #[test]
    fn identical_windows_give_unit_components() {
        let s = WindowStats::new(0.4, 0.4, 0.02, 0.02, 0.02);
        let (l, c, st) = ssim_components(&s, &Constants::from_range(0.01, 0.03, 1.0));
        assert!((l - 1.0).abs() < 1e-15 && (c - 1.0).abs() < 1e-15 && (st - 1.0).abs() < 1e-15);
    }

    #[test]
    fn anti_correlated_structure() {
        let s = WindowStats::new(0.0, 0.0, 1.0, 1.0, -1.0);
        let k = Constants {
            c1: 0.0,
            c2: 0.0,
            c3: 0.0,
        };
        assert_eq!(ssim_components(&s, &k).2, -1.0);
    }

    #[test]
    fn worked_component_example() {
        let s = WindowStats::new(2.0, 1.0, 0.25, 0.25, 0.25);
        let k = Constants::from_range(0.01, 0.03, 1.0);
        let (l, c, st) = ssim_components(&s, &k);
        assert!((l - (4.0 + 1e-4) / (5.0 + 1e-4)).abs() < 1e-15);
        assert!((c - 1.0).abs() < 1e-15 && (st - 1.0).abs() < 1e-15);
        assert!((l * c * st - 0.800004).abs() < 1e-6);
        assert!((ssim_value(&s, &k) - l * c * st).abs() < 1e-15);
    }

    #[test]
    fn identity_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = MetricConfig::default().with_data_range(DataRange::Explicit(1.0));
        let x = random_image(24, 30, &mut rng);
        let y = random_image(24, 30, &mut rng);
        assert!((mssim(&x, &x, &cfg).unwrap().mssim - 1.0).abs() < 1e-12);
        let a = mssim(&x, &y, &cfg).unwrap().mssim;
        let b = mssim(&y, &x, &cfg).unwrap().mssim;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn decomposition_and_bounds_hold_per_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_image(20, 20, &mut rng);
        let y = Image::from_fn(20, 20, |r, c| 0.5 * x.get(r, c) + 0.2 * rng.gen::<f64>()).unwrap();
        let b = mssim(&x, &y, &uniform3()).unwrap();
        for i in 0..b.ssim_map.len() {
            let prod = b.luminance_map[i] * b.contrast_map[i] * b.structure_map[i];
            assert!((prod - b.ssim_map[i]).abs() < 1e-9);
            assert!(b.ssim_map[i].abs() <= 1.0 + 1e-9);
        }
        let mean: f64 = b.ssim_map.iter().sum::<f64>() / b.ssim_map.len() as f64;
        assert!((mean - b.mssim).abs() < 1e-12);
    }

    #[test]
    fn alpha_one_objective_matches_mssim() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_image(16, 16, &mut rng);
        let y = random_image(16, 16, &mut rng);
        let cfg = uniform3();
        let k = cfg.resolve_constants(&x).unwrap();
        let grid = cfg.local_statistics(&x, &y).unwrap();
        let set = StatsSet::from_stats(grid.iter());
        let obj = scaled_ssim_objective(&set, 1.0, &k).unwrap();
        assert!((obj - mssim(&x, &y, &cfg).unwrap().mssim).abs() < 1e-12);

        let self_set = StatsSet::from_stats(cfg.local_statistics(&x, &x).unwrap().iter());
        assert!((scaled_ssim_objective(&self_set, 1.0, &k).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn objective_rejects_empty_and_bad_alpha() {
        let k = Constants::new(1e-4, 9e-4);
        assert!(scaled_ssim_objective(&StatsSet::from_stats([]), 1.0, &k).is_err());
        let set = StatsSet::from_stats([WindowStats::new(1.0, 1.0, 1.0, 1.0, 1.0)]);
        assert!(scaled_ssim_objective(&set, 0.0, &k).is_err());
        assert!(scaled_ssim_objective(&set, f64::NAN, &k).is_err());
    }

    #[test]
    fn gamma_resolution() {
        let img = Image::new(1, 3, vec![2.0, 5.0, 3.0]).unwrap();
        let mut cfg = MetricConfig::default();
        assert_eq!(cfg.resolve_gamma(&img).unwrap(), 3.0);
        cfg.data_range = DataRange::Dtype(16);
        assert_eq!(cfg.resolve_gamma(&img).unwrap(), 65535.0);
        cfg.data_range = DataRange::Explicit(0.0);
        assert!(cfg.resolve_gamma(&img).is_err());
        cfg.data_range = DataRange::GtImageRange;
        assert!(cfg.resolve_gamma(&Image::filled(2, 2, 1.0).unwrap()).is_err());
        let k = Constants::from_range(0.01, 0.03, 2.0);
        assert!((k.c1 - 4e-4).abs() < 1e-18 && (k.c3 - k.c2 / 2.0).abs() < 1e-18);
    }
}
