//! Dataset-level calibration: background offsets, GT downscaling and the
//! prediction scale factor `α`, and the MicroSSIM score built on them.

use std::borrow::Borrow;
use std::fmt::Write as _;
use std::hash::Hasher;
use std::str::FromStr;

use log::{debug, warn};
use twox_hash::XxHash64;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::optimize;
use crate::percentile::pooled_percentile;
use crate::ssim::{self, scaled_ssim, Constants, DataRange, MetricConfig, SsimBreakdown};
use crate::stats::{Precision, StatsSet, VarianceMode, WindowStats};
use crate::window::{Window, WindowKind};

/// Default α search interval.
pub const DEFAULT_BOUNDS: (f64, f64) = (1e-3, 1e3);
/// The search interval may grow to this when the seed lies outside it.
pub const WIDEST_BOUNDS: (f64, f64) = (1e-6, 1e6);

/// Pooled statistics beyond this many bytes are stored in single precision.
const F64_BUDGET_BYTES: usize = 1 << 30;
/// At most this many windows feed the closed-form seed median.
const SEED_SAMPLE: usize = 1 << 20;

/// Pooled nearest-rank percentile of all pixels in `images`.
pub fn estimate_offset<'a>(images: impl IntoIterator<Item = &'a Image>, percentile: f64) -> Result<f64> {
    let pools: Vec<&[f64]> = images.into_iter().map(|im| im.pixels()).collect();
    if pools.is_empty() {
        return Err(Error::invalid("cannot estimate an offset from an empty collection"));
    }
    pooled_percentile(&pools, percentile)
}

/// Largest pixel over every ground-truth image.
pub fn estimate_max<'a>(gt_images: impl IntoIterator<Item = &'a Image>) -> Result<f64> {
    let mut any = false;
    let mut max = f64::NEG_INFINITY;
    for im in gt_images {
        any = true;
        max = max.max(im.max());
    }
    if !any {
        return Err(Error::invalid("cannot estimate a maximum from an empty collection"));
    }
    Ok(max)
}

/// `(v − offset) / scale` for every pixel.
pub fn preprocess(img: &Image, offset: f64, scale: f64) -> Result<Image> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::invalid(format!("scale must be positive, got {scale}")));
    }
    img.map(|v| (v - offset) / scale)
}

fn check_closed_form(s: &WindowStats) -> Result<()> {
    if s.ux > 0.0 && s.uy > 0.0 && s.vx > 0.0 && s.vy > 0.0 && s.vxy > 0.0 {
        Ok(())
    } else {
        Err(Error::UndefinedClosedForm(format!(
            "needs positive means, variances and covariance, got {s:?}"
        )))
    }
}

/// Maximizer of the single-window scaled SSIM when `c1 = c2 = 0`:
/// `α = sqrt(sx·ux / (sy·uy))`.
pub fn closed_form_alpha(stats: &WindowStats) -> Result<f64> {
    check_closed_form(stats)?;
    Ok(((stats.sx() * stats.ux) / (stats.sy() * stats.uy)).sqrt())
}

/// `d/dα` of the single-window scaled SSIM.
pub fn ssim_alpha_derivative(s: &WindowStats, alpha: f64, k: &Constants) -> f64 {
    let uy2 = s.uy * s.uy;
    let n1 = 2.0 * alpha * s.ux * s.uy + k.c1;
    let n2 = 2.0 * alpha * s.vxy + k.c2;
    let d1 = alpha * alpha * s.vy + k.c2 + s.vx;
    let d2 = alpha * alpha * uy2 + k.c1 + s.ux * s.ux;
    -2.0 * alpha * s.vy * n1 * n2 / (d1 * d1 * d2) - 2.0 * alpha * uy2 * n1 * n2 / (d1 * d2 * d2)
        + 2.0 * s.vxy * n1 / (d1 * d2)
        + 2.0 * s.ux * s.uy * n2 / (d1 * d2)
}

/// Second derivative of the single-window scaled SSIM at the closed-form
/// maximizer, with `c1 = c2 = 0`. Always negative under the closed-form
/// preconditions.
pub fn closed_form_curvature(s: &WindowStats) -> Result<f64> {
    check_closed_form(s)?;
    let (sx, sy, ux, uy) = (s.sx(), s.sy(), s.ux, s.uy);
    let p = sx * uy;
    let q = sy * ux;
    // The denominator is (sx·uy + sy·ux)^4 expanded.
    let den = p.powi(4) + 4.0 * p.powi(3) * q + 6.0 * p * p * q * q + 4.0 * p * q.powi(3) + q.powi(4);
    Ok(-32.0 * s.vy * s.vxy * ux * uy.powi(3) / den)
}

/// Mean of [`ssim_alpha_derivative`] over every window.
pub fn objective_derivative(stats: &StatsSet, alpha: f64, k: &Constants) -> f64 {
    stats.mean_by(|s| ssim_alpha_derivative(&s, alpha, k))
}

/// Outcome of [`fit_alpha`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitReport {
    pub alpha: f64,
    pub objective_at_alpha: f64,
    pub closed_form_seed: f64,
    /// Objective and derivative evaluations spent by the search.
    pub iterations: usize,
    /// Final enclosing interval of the maximum.
    pub bracket: (f64, f64),
    pub derivative_at_alpha: f64,
    /// The objective was still increasing at a search bound.
    pub at_boundary: bool,
}

/// Median closed-form α over windows meeting its preconditions. Large sets
/// are subsampled with a fixed stride.
pub fn closed_form_seed(stats: &StatsSet) -> Option<f64> {
    let n = stats.len();
    let stride = n.div_ceil(SEED_SAMPLE).max(1);
    let mut alphas: Vec<f64> = (0..n)
        .step_by(stride)
        .filter_map(|i| closed_form_alpha(&stats.get(i)).ok())
        .filter(|a| a.is_finite())
        .collect();
    if alphas.is_empty() {
        return None;
    }
    let mid = (alphas.len() - 1) / 2;
    let (_, m, _) = alphas.select_nth_unstable_by(mid, f64::total_cmp);
    Some(*m)
}

/// Finds the α in `bounds` maximizing the mean scaled SSIM of `stats`.
///
/// The search runs on `ln α`: a geometric bracket around the closed-form
/// seed, Brent refinement to a relative width of 1e-6, then a root polish on
/// the analytic derivative so the result is accurate to near machine
/// precision.
pub fn fit_alpha(stats: &StatsSet, k: &Constants, bounds: (f64, f64)) -> Result<FitReport> {
    let (mut low, mut high) = bounds;
    if !(low.is_finite() && high.is_finite() && low > 0.0 && low < high) {
        return Err(Error::invalid(format!("invalid alpha bounds ({low}, {high})")));
    }
    if stats.is_empty() {
        return Err(Error::invalid("no window statistics to fit"));
    }
    let seed = match closed_form_seed(stats) {
        Some(s) => s,
        None => {
            if stats.iter().all(|s| s.uy == 0.0 && s.vy == 0.0) {
                return Err(Error::Numeric(
                    "objective does not depend on alpha: the prediction is zero after offset removal".into(),
                ));
            }
            warn!("no window satisfies the closed-form preconditions; seeding alpha at 1");
            1.0
        }
    };
    if seed < low {
        low = seed.max(WIDEST_BOUNDS.0).min(low);
    }
    if seed > high {
        high = seed.min(WIDEST_BOUNDS.1).max(high);
    }
    let mut evaluations = 0usize;
    let mut objective = |t: f64| -> Result<f64> {
        evaluations += 1;
        ssim::scaled_ssim_objective(stats, t.exp(), k)
    };
    let (tl, th) = (low.ln(), high.ln());
    let br = optimize::bracket_maximum(&mut objective, seed.ln(), 0.05, tl, th)?;
    let (mut alpha, mut bracket, at_boundary) = if br.at_bound {
        warn!("alpha objective still increasing at the search bound {}", br.b.exp());
        (br.b.exp(), (br.a.exp(), br.c.exp()), true)
    } else {
        let m = optimize::brent_maximize(&mut objective, br.a, br.b, br.c, 2.5e-7, 500)?;
        (m.x.exp(), (m.low.exp(), m.high.exp()), false)
    };

    if !at_boundary {
        let mut derivative = |a: f64| -> Result<f64> {
            evaluations += 1;
            Ok(objective_derivative(stats, a, k))
        };
        let (a, b) = bracket;
        let ga = derivative(a)?;
        let gb = derivative(b)?;
        if ga.signum() != gb.signum() {
            let (root, _) = optimize::find_root(&mut derivative, a, b, ga, gb, 1e-14 * alpha, 200)?;
            alpha = root;
        } else {
            debug!("derivative does not change sign on the final bracket; keeping the Brent estimate");
        }
        bracket = (a.min(alpha), b.max(alpha));
    }
    let objective_at_alpha = ssim::scaled_ssim_objective(stats, alpha, k)?;
    let derivative_at_alpha = objective_derivative(stats, alpha, k);
    if !objective_at_alpha.is_finite() || !derivative_at_alpha.is_finite() {
        return Err(Error::Numeric(format!("objective is not finite at alpha = {alpha}")));
    }
    Ok(FitReport {
        alpha,
        objective_at_alpha,
        closed_form_seed: seed,
        iterations: evaluations + 2,
        bracket,
        derivative_at_alpha,
        at_boundary,
    })
}

/// The learned dataset transform `x ↦ (x − β)/max_gt`, prediction scaled by
/// `α`, together with the metric settings it was fitted under.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetCalibration {
    beta_gt: f64,
    beta_pred: f64,
    max_gt: f64,
    alpha: f64,
    percentile: f64,
    /// `γ` for preprocessed operands. `None` resolves it per GT image.
    data_range: Option<f64>,
    config: MetricConfig,
    inputs_digest: Option<String>,
    fitted: bool,
}

impl DatasetCalibration {
    /// A placeholder that scoring functions reject.
    pub fn unfitted(percentile: f64, config: MetricConfig) -> Self {
        Self {
            beta_gt: 0.0,
            beta_pred: 0.0,
            max_gt: 1.0,
            alpha: 1.0,
            percentile,
            data_range: None,
            config,
            inputs_digest: None,
            fitted: false,
        }
    }

    /// A fitted calibration from known parameters. `γ` follows
    /// `config.data_range`; image-range policies resolve per GT image.
    pub fn from_parts(beta_gt: f64, beta_pred: f64, max_gt: f64, alpha: f64, config: MetricConfig) -> Result<Self> {
        let data_range = match config.data_range {
            DataRange::Explicit(v) => Some(v),
            DataRange::Dtype(bits) => Some(DataRange::dtype_max(bits)? / max_gt),
            DataRange::GtImageRange | DataRange::GtDatasetRange => None,
        };
        let cal = Self {
            beta_gt,
            beta_pred,
            max_gt,
            alpha,
            percentile: 3.0,
            data_range,
            config,
            inputs_digest: None,
            fitted: true,
        };
        cal.validate()?;
        Ok(cal)
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta_gt", self.beta_gt),
            ("beta_pred", self.beta_pred),
            ("max_gt", self.max_gt),
            ("alpha", self.alpha),
        ] {
            if !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite, got {v}")));
            }
        }
        if !(self.max_gt > 0.0 && self.max_gt > self.beta_gt) {
            return Err(Error::invalid(format!(
                "max_gt ({}) must be positive and exceed beta_gt ({})",
                self.max_gt, self.beta_gt
            )));
        }
        if self.alpha <= 0.0 {
            return Err(Error::invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(0.0..=100.0).contains(&self.percentile) {
            return Err(Error::invalid(format!("percentile must lie in [0, 100], got {}", self.percentile)));
        }
        if let Some(g) = self.data_range {
            if !(g.is_finite() && g > 0.0) {
                return Err(Error::invalid(format!("data range must be positive, got {g}")));
            }
        }
        self.config.validate()
    }

    pub fn beta_gt(&self) -> f64 {
        self.beta_gt
    }

    pub fn beta_pred(&self) -> f64 {
        self.beta_pred
    }

    pub fn max_gt(&self) -> f64 {
        self.max_gt
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn percentile(&self) -> f64 {
        self.percentile
    }

    pub fn data_range(&self) -> Option<f64> {
        self.data_range
    }

    pub fn config(&self) -> &MetricConfig {
        &self.config
    }

    pub fn inputs_digest(&self) -> Option<&str> {
        self.inputs_digest.as_deref()
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted
    }

    fn require_fitted(&self) -> Result<()> {
        if self.fitted {
            Ok(())
        } else {
            Err(Error::InvalidState("calibration has not been fitted".into()))
        }
    }

    /// `(gt − β_gt)/max_gt`.
    pub fn preprocess_gt(&self, gt: &Image) -> Result<Image> {
        preprocess(gt, self.beta_gt, self.max_gt)
    }

    /// `α·(pred − β_pred)/max_gt`.
    pub fn preprocess_pred(&self, pred: &Image) -> Result<Image> {
        let (b, m, a) = (self.beta_pred, self.max_gt, self.alpha);
        pred.map(|v| a * ((v - b) / m))
    }

    /// Both operands of the calibrated comparison.
    pub fn operands(&self, gt: &Image, pred: &Image) -> Result<(Image, Image)> {
        self.require_fitted()?;
        gt.same_dims(pred)?;
        Ok((self.preprocess_gt(gt)?, self.preprocess_pred(pred)?))
    }

    /// Stabilizing constants for a preprocessed ground truth.
    pub fn constants_for(&self, config: &MetricConfig, preprocessed_gt: &Image) -> Result<Constants> {
        match self.data_range {
            Some(g) => config.constants(g),
            None => config.constants(preprocessed_gt.range()),
        }
    }

    /// Flat `key=value` text form; floats keep every bit.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        put("format", "micrometric-calibration".into());
        put("tool_version", env!("CARGO_PKG_VERSION").into());
        put("fitted", self.fitted.to_string());
        put("beta_gt", exact(self.beta_gt));
        put("beta_pred", exact(self.beta_pred));
        put("max_gt", exact(self.max_gt));
        put("alpha", exact(self.alpha));
        put("percentile", exact(self.percentile));
        put("k1", exact(self.config.k1));
        put("k2", exact(self.config.k2));
        put("window_kind", self.config.window.kind().to_string());
        put("window_side", self.config.window.side().to_string());
        put("sigma", self.config.window.sigma().map_or("none".into(), exact));
        put("variance", self.config.variance.as_str().into());
        put("data_range_policy", range_policy_text(&self.config.data_range));
        put("data_range", self.data_range.map_or("per_image".into(), exact));
        put("inputs_digest", self.inputs_digest.clone().unwrap_or_else(|| "none".into()));
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut fields = std::collections::BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| parse_err(i + 1, format!("expected key=value, got '{line}'")))?;
            if fields.insert(k.trim().to_string(), (i + 1, v.trim().to_string())).is_some() {
                return Err(parse_err(i + 1, format!("duplicate key '{}'", k.trim())));
            }
        }
        let get = |k: &str| -> Result<&(usize, String)> {
            fields.get(k).ok_or_else(|| parse_err(0, format!("missing key '{k}'")))
        };
        let num = |k: &str| -> Result<f64> {
            let (line, v) = get(k)?;
            v.parse::<f64>().map_err(|_| parse_err(*line, format!("{k}: '{v}' is not a number")))
        };
        let kind: WindowKind = get("window_kind")?.1.parse()?;
        let side: usize = {
            let (line, v) = get("window_side")?;
            v.parse().map_err(|_| parse_err(*line, format!("window_side: '{v}' is not an integer")))?
        };
        let sigma = match get("sigma")?.1.as_str() {
            "none" => None,
            _ => Some(num("sigma")?),
        };
        let variance = match get("variance").map(|(_, v)| v.as_str()) {
            Ok("unbiased") => VarianceMode::Unbiased,
            Ok("weighted") | Err(_) => VarianceMode::Weighted,
            Ok(other) => return Err(parse_err(get("variance")?.0, format!("unknown variance mode '{other}'"))),
        };
        let policy = match get("data_range_policy") {
            Ok((line, v)) => parse_range_policy(v).map_err(|m| parse_err(*line, m))?,
            Err(_) => DataRange::GtDatasetRange,
        };
        let data_range = match get("data_range")?.1.as_str() {
            "per_image" => None,
            _ => Some(num("data_range")?),
        };
        let fitted = match get("fitted").map(|(_, v)| v.as_str()) {
            Ok("true") | Err(_) => true,
            Ok("false") => false,
            Ok(other) => return Err(parse_err(get("fitted")?.0, format!("fitted: '{other}' is not a boolean"))),
        };
        let config = MetricConfig {
            window: Window::new(kind, side, sigma)?,
            k1: num("k1")?,
            k2: num("k2")?,
            data_range: policy,
            variance,
        };
        let cal = Self {
            beta_gt: num("beta_gt")?,
            beta_pred: num("beta_pred")?,
            max_gt: num("max_gt")?,
            alpha: num("alpha")?,
            percentile: num("percentile")?,
            data_range,
            config,
            inputs_digest: fields.get("inputs_digest").map(|(_, v)| v.clone()).filter(|v| v != "none"),
            fitted,
        };
        if cal.fitted {
            cal.validate()?;
        }
        Ok(cal)
    }
}

impl FromStr for DatasetCalibration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_text(s)
    }
}

fn parse_err(line: usize, message: String) -> Error {
    Error::Parse {
        path: "<calibration>".into(),
        line,
        message,
    }
}

/// 17 significant digits: enough to reproduce any `f64` exactly.
pub(crate) fn exact(v: f64) -> String {
    format!("{v:.16e}")
}

fn range_policy_text(r: &DataRange) -> String {
    match r {
        DataRange::Explicit(v) => format!("explicit:{}", exact(*v)),
        DataRange::GtImageRange => "gt_image_range".into(),
        DataRange::GtDatasetRange => "gt_dataset_range".into(),
        DataRange::Dtype(b) => format!("dtype:{b}"),
    }
}

fn parse_range_policy(s: &str) -> std::result::Result<DataRange, String> {
    match s {
        "gt_image_range" => Ok(DataRange::GtImageRange),
        "gt_dataset_range" => Ok(DataRange::GtDatasetRange),
        _ => {
            if let Some(v) = s.strip_prefix("explicit:") {
                v.parse().map(DataRange::Explicit).map_err(|_| format!("bad explicit range '{v}'"))
            } else if let Some(b) = s.strip_prefix("dtype:") {
                b.parse().map(DataRange::Dtype).map_err(|_| format!("bad bit depth '{b}'"))
            } else {
                Err(format!("unknown data range policy '{s}'"))
            }
        }
    }
}

/// Knobs of [`calibrate_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationOptions {
    pub percentile: f64,
    pub bounds: (f64, f64),
    /// Storage precision for pooled statistics; `None` picks single
    /// precision only when double would not fit the memory budget.
    pub precision: Option<Precision>,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            percentile: 3.0,
            bounds: DEFAULT_BOUNDS,
            precision: None,
        }
    }
}

/// A fitted calibration plus the search diagnostics.
#[derive(Debug, Clone)]
pub struct Calibrated {
    pub calibration: DatasetCalibration,
    pub report: FitReport,
}

/// Fits β_gt, β_pred, max_gt and α on a dataset of matched pairs.
pub fn calibrate(gt_set: &[Image], pred_set: &[Image], config: &MetricConfig, percentile: f64) -> Result<DatasetCalibration> {
    let options = CalibrationOptions {
        percentile,
        ..Default::default()
    };
    Ok(calibrate_with(gt_set.iter().collect(), pred_set.iter().collect(), config, &options)?.calibration)
}

/// Like [`calibrate`], returning the fit report too. Accepts owned images,
/// which are released as soon as their window statistics are pooled.
pub fn calibrate_with<I: Borrow<Image>>(
    gt_set: Vec<I>,
    pred_set: Vec<I>,
    config: &MetricConfig,
    options: &CalibrationOptions,
) -> Result<Calibrated> {
    config.validate()?;
    if gt_set.is_empty() {
        return Err(Error::invalid("calibration needs at least one image pair"));
    }
    if gt_set.len() != pred_set.len() {
        return Err(Error::invalid(format!(
            "{} ground-truth images but {} predictions",
            gt_set.len(),
            pred_set.len()
        )));
    }
    let side = config.window.side();
    for (g, p) in gt_set.iter().zip(&pred_set) {
        let (g, p) = (g.borrow(), p.borrow());
        g.same_dims(p)?;
        if g.height() < side || g.width() < side {
            return Err(Error::invalid(format!(
                "image {}x{} is smaller than the {side}x{side} window",
                g.height(),
                g.width()
            )));
        }
    }
    let p = options.percentile;
    let beta_gt = estimate_offset(gt_set.iter().map(|i| i.borrow()), p)?;
    let beta_pred = estimate_offset(pred_set.iter().map(|i| i.borrow()), p)?;
    let max_gt = estimate_max(gt_set.iter().map(|i| i.borrow()))?;
    let min_gt = gt_set.iter().map(|i| i.borrow().min()).fold(f64::INFINITY, f64::min);
    if max_gt <= beta_gt || max_gt <= 0.0 {
        return Err(Error::invalid(format!(
            "ground truth maximum {max_gt} must be positive and exceed the background {beta_gt}"
        )));
    }
    let digest = digest(gt_set.iter().chain(&pred_set).map(|i| i.borrow()));
    debug!("beta_gt={beta_gt} beta_pred={beta_pred} max_gt={max_gt}");

    let data_range = match config.data_range {
        DataRange::Explicit(v) => v,
        DataRange::Dtype(bits) => DataRange::dtype_max(bits)? / max_gt,
        // A single α is fitted for the whole dataset, so the range is
        // resolved once over all preprocessed ground truth.
        DataRange::GtDatasetRange | DataRange::GtImageRange => (max_gt - min_gt) / max_gt,
    };
    let k = config.constants(data_range)?;

    let windows: usize = gt_set
        .iter()
        .map(|g| {
            let (h, w) = g.borrow().dims();
            (h - side + 1) * (w - side + 1)
        })
        .sum();
    let precision = options.precision.unwrap_or(if windows.saturating_mul(40) > F64_BUDGET_BYTES {
        Precision::F32
    } else {
        Precision::F64
    });
    let mut stats = StatsSet::with_capacity(precision, windows);
    for (g, pr) in gt_set.into_iter().zip(pred_set) {
        let x = preprocess(g.borrow(), beta_gt, max_gt)?;
        drop(g);
        let y = preprocess(pr.borrow(), beta_pred, max_gt)?;
        drop(pr);
        stats.extend_from_grid(&config.local_statistics(&x, &y)?);
    }
    debug!("pooled {} windows ({:?})", stats.len(), stats.precision());
    let report = fit_alpha(&stats, &k, options.bounds)?;
    let calibration = DatasetCalibration {
        beta_gt,
        beta_pred,
        max_gt,
        alpha: report.alpha,
        percentile: p,
        data_range: Some(data_range),
        config: config.clone(),
        inputs_digest: Some(digest),
        fitted: true,
    };
    calibration.validate()?;
    Ok(Calibrated { calibration, report })
}

/// XxHash64 over the dimensions and pixel bits of every image, in order.
pub fn digest<'a>(images: impl IntoIterator<Item = &'a Image>) -> String {
    let mut h = XxHash64::with_seed(0);
    let mut buf = Vec::with_capacity(8 * 4096);
    for im in images {
        h.write_u64(im.height() as u64);
        h.write_u64(im.width() as u64);
        for chunk in im.pixels().chunks(4096) {
            buf.clear();
            for v in chunk {
                buf.extend_from_slice(&v.to_bits().to_le_bytes());
            }
            h.write(&buf);
        }
    }
    format!("xxh64:{:016x}", h.finish())
}

/// SSIM of the calibrated operands `(gt − β_gt)/max_gt` and
/// `α·(pred − β_pred)/max_gt`. Window, `k1`, `k2` and variance mode come from
/// `config`; `γ` comes from the calibration since `α` was fitted for it.
pub fn micro_ssim(gt: &Image, pred: &Image, calibration: &DatasetCalibration, config: &MetricConfig) -> Result<SsimBreakdown> {
    let (x, y) = calibration.operands(gt, pred)?;
    let k = calibration.constants_for(config, &x)?;
    ssim::mssim_with_constants(&x, &y, config, &k)
}

/// Mean scaled SSIM of `stats` over a geometric α grid, for sweeps and
/// uniqueness checks.
pub fn objective_grid(stats: &StatsSet, k: &Constants, low: f64, high: f64, points: usize) -> Result<Vec<(f64, f64)>> {
    if points < 2 || !(low > 0.0 && high > low) {
        return Err(Error::invalid("grid needs at least two points on a positive interval"));
    }
    let step = (high / low).ln() / (points - 1) as f64;
    (0..points)
        .map(|i| {
            let a = low * (step * i as f64).exp();
            Ok((a, ssim::scaled_ssim_objective(stats, a, k)?))
        })
        .collect()
}

/// Single-window scaled SSIM, re-exported for grid oracles.
pub fn window_objective(s: &WindowStats, alpha: f64, k: &Constants) -> f64 {
    scaled_ssim(s, alpha, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zero() -> Constants {
        Constants::new(0.0, 0.0)
    }

    fn random_stats(rng: &mut impl Rng) -> WindowStats {
        let ux = rng.gen_range(0.05..2.0);
        let uy = rng.gen_range(0.05..2.0);
        let vx: f64 = rng.gen_range(0.01..1.0);
        let vy: f64 = rng.gen_range(0.01..1.0);
        let rho = rng.gen_range(0.05..1.0);
        WindowStats::new(ux, uy, vx, vy, rho * (vx * vy).sqrt())
    }

    fn blobs(h: usize, w: usize, seed: u64, offset: f64, scale: f64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<(f64, f64, f64)> = (0..6)
            .map(|_| (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64), rng.gen_range(200.0..900.0)))
            .collect();
        Image::from_fn(h, w, |r, c| {
            let v: f64 = centers
                .iter()
                .map(|&(cy, cx, a)| a * (-((r as f64 - cy).powi(2) + (c as f64 - cx).powi(2)) / 18.0).exp())
                .sum();
            offset + v / scale
        })
        .unwrap()
    }

    #[test]
    fn offset_and_max_examples() {
        let c = Image::filled(4, 4, 7.0).unwrap();
        assert_eq!(estimate_offset([&c], 3.0).unwrap(), 7.0);
        let ramp = Image::from_fn(10, 10, |r, col| (r * 10 + col) as f64).unwrap();
        assert_eq!(estimate_offset([&ramp], 3.0).unwrap(), 3.0);
        let a = Image::filled(2, 2, 10.0).unwrap();
        let b = Image::filled(2, 2, 200.0).unwrap();
        assert_eq!(estimate_max([&a, &b]).unwrap(), 200.0);
        assert!(estimate_offset(std::iter::empty(), 3.0).is_err());
        assert!(estimate_max(std::iter::empty()).is_err());
    }

    #[test]
    fn preprocess_examples() {
        let im = Image::new(1, 2, vec![5102.0, 102.0]).unwrap();
        let p = preprocess(&im, 102.0, 5000.0).unwrap();
        assert_eq!(p.pixels(), &[1.0, 0.0]);
        assert_eq!(preprocess(&im, 0.0, 1.0).unwrap().pixels(), im.pixels());
        assert!(preprocess(&im, 0.0, 0.0).is_err());
    }

    #[test]
    fn closed_form_examples() {
        let s = WindowStats::new(1.5, 1.5, 0.3, 0.3, 0.2);
        assert!((closed_form_alpha(&s).unwrap() - 1.0).abs() < 1e-15);
        let half = WindowStats::new(2.0, 1.0, 0.4, 0.1, 0.1);
        assert!((closed_form_alpha(&half).unwrap() - 2.0).abs() < 1e-15);
        let bad = WindowStats::new(1.0, 1.0, 0.1, 0.1, -0.01);
        assert!(matches!(closed_form_alpha(&bad), Err(Error::UndefinedClosedForm(_))));
    }

    #[test]
    fn closed_form_is_grid_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let s = random_stats(&mut rng);
            let a = closed_form_alpha(&s).unwrap();
            let n = 100_000;
            let (lo, hi) = (a / 10.0, 10.0 * a);
            let step = (hi / lo).ln() / (n - 1) as f64;
            let best = (0..n)
                .map(|i| lo * (step * i as f64).exp())
                .max_by(|p, q| window_objective(&s, *p, &zero()).total_cmp(&window_objective(&s, *q, &zero())))
                .unwrap();
            assert!((best.ln() - a.ln()).abs() <= step * 1.0000001);
            assert!(ssim_alpha_derivative(&s, a, &zero()).abs() <= 1e-10 * (1.0 / a));
        }
    }

    #[test]
    fn derivative_sign_pattern() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let s = random_stats(&mut rng);
            let a = closed_form_alpha(&s).unwrap();
            assert!(ssim_alpha_derivative(&s, a / 2.0, &zero()) > 0.0);
            assert!(ssim_alpha_derivative(&s, 2.0 * a, &zero()) < 0.0);
        }
    }

    #[test]
    fn curvature_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let s = random_stats(&mut rng);
            let a = closed_form_alpha(&s).unwrap();
            let h = 1e-4 * a;
            let fd = (ssim_alpha_derivative(&s, a + h, &zero()) - ssim_alpha_derivative(&s, a - h, &zero())) / (2.0 * h);
            let cf = closed_form_curvature(&s).unwrap();
            assert!(cf < 0.0);
            assert!((fd - cf).abs() <= 1e-6 * cf.abs(), "{fd} vs {cf}");
        }
    }

    proptest! {
        #[test]
        fn derivative_matches_finite_difference(
            ux in 0.01f64..3.0, uy in 0.01f64..3.0,
            vx in 0.001f64..2.0, vy in 0.001f64..2.0, rho in -1.0f64..1.0,
            alpha in 0.05f64..20.0, c1 in 0.0f64..0.1, c2 in 0.0f64..0.1,
        ) {
            let s = WindowStats::new(ux, uy, vx, vy, rho * (vx * vy).sqrt());
            let k = Constants::new(c1, c2);
            let h = 1e-6 * alpha;
            let fd = (window_objective(&s, alpha + h, &k) - window_objective(&s, alpha - h, &k)) / (2.0 * h);
            let d = ssim_alpha_derivative(&s, alpha, &k);
            prop_assert!((fd - d).abs() <= 1e-5 * d.abs().max(1e-3), "{} vs {}", fd, d);
        }
    }

    #[test]
    fn single_window_fit_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let s = random_stats(&mut rng);
            let set = StatsSet::from_stats([s]);
            let r = fit_alpha(&set, &zero(), DEFAULT_BOUNDS).unwrap();
            let a = closed_form_alpha(&s).unwrap();
            assert!((r.alpha - a).abs() <= 1e-6 * a);
            assert!(!r.at_boundary);
        }
    }

    #[test]
    fn fit_certifies_local_maximum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let set = StatsSet::from_stats((0..500).map(|_| random_stats(&mut rng)));
        let k = Constants::new(1e-4, 9e-4);
        let r = fit_alpha(&set, &k, DEFAULT_BOUNDS).unwrap();
        let f = |a: f64| ssim::scaled_ssim_objective(&set, a, &k).unwrap();
        assert!(r.objective_at_alpha >= f(r.alpha * 1.01));
        assert!(r.objective_at_alpha >= f(r.alpha * 0.99));
        assert!(r.derivative_at_alpha.abs() <= 1e-6 * r.objective_at_alpha.abs().max(1.0));
        assert!(r.bracket.0 <= r.alpha && r.alpha <= r.bracket.1);
        assert!((r.bracket.1 - r.bracket.0) <= 1e-6 * r.alpha);
        let grid = objective_grid(&set, &k, r.bracket.0 / 10.0, r.bracket.1 * 10.0, 100_001).unwrap();
        let step = (100.0f64 * r.bracket.1 / r.bracket.0).ln() / 100_000.0;
        let best = grid.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0;
        assert!((best.ln() - r.alpha.ln()).abs() <= step * 1.0000001);
    }

    #[test]
    fn fit_rejects_bad_input() {
        let set = StatsSet::from_stats([WindowStats::new(1.0, 1.0, 0.1, 0.1, 0.05)]);
        assert!(fit_alpha(&set, &zero(), (0.0, 1.0)).is_err());
        assert!(fit_alpha(&set, &zero(), (2.0, 1.0)).is_err());
        assert!(fit_alpha(&StatsSet::new(Precision::F64), &zero(), DEFAULT_BOUNDS).is_err());
    }

    #[test]
    fn identity_dataset_fits_unit_alpha() {
        let gts: Vec<Image> = (0..3).map(|i| blobs(48, 48, i, 100.0, 1.0)).collect();
        let cfg = MetricConfig::default();
        let out = calibrate_with(gts.iter().collect(), gts.iter().collect(), &cfg, &CalibrationOptions::default()).unwrap();
        let cal = &out.calibration;
        assert_eq!(cal.beta_gt(), cal.beta_pred());
        assert!((cal.alpha() - 1.0).abs() < 1e-6);
        for g in &gts {
            assert!((micro_ssim(g, g, cal, &cfg).unwrap().mssim - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn recovers_known_scale() {
        let cfg = MetricConfig::default();
        let gts: Vec<Image> = (0..4).map(|i| blobs(64, 64, i, 100.0, 1.0)).collect();
        let preds: Vec<Image> = (0..4).map(|i| blobs(64, 64, i, 110.0, 5.0)).collect();
        let out = calibrate_with(gts.iter().collect(), preds.iter().collect(), &cfg, &CalibrationOptions::default()).unwrap();
        let cal = &out.calibration;
        assert!((cal.alpha() - 5.0).abs() < 0.05, "alpha {}", cal.alpha());
        assert!((cal.beta_gt() - 100.0).abs() < 1.0);
        assert!((cal.beta_pred() - 110.0).abs() < 1.0);
        for (g, p) in gts.iter().zip(&preds) {
            assert!(micro_ssim(g, p, cal, &cfg).unwrap().mssim >= 0.999);
        }
    }

    #[test]
    fn precision_choice_barely_moves_alpha() {
        let cfg = MetricConfig::default();
        let gts: Vec<Image> = (0..2).map(|i| blobs(64, 64, i, 100.0, 1.0)).collect();
        let preds: Vec<Image> = (0..2).map(|i| blobs(64, 64, i + 7, 105.0, 3.0)).collect();
        let run = |p| {
            let opts = CalibrationOptions {
                precision: Some(p),
                ..Default::default()
            };
            calibrate_with(gts.iter().collect(), preds.iter().collect(), &cfg, &opts).unwrap().calibration.alpha()
        };
        let (a64, a32) = (run(Precision::F64), run(Precision::F32));
        assert!((a64 - a32).abs() <= 1e-5 * a64);
    }

    #[test]
    fn unfitted_calibration_is_rejected() {
        let g = blobs(32, 32, 0, 100.0, 1.0);
        let cal = DatasetCalibration::unfitted(3.0, MetricConfig::default());
        assert!(matches!(micro_ssim(&g, &g, &cal, &MetricConfig::default()), Err(Error::InvalidState(_))));
    }

    #[test]
    fn constant_prediction_is_a_numeric_failure() {
        let g = blobs(32, 32, 0, 100.0, 1.0);
        let flat = Image::filled(32, 32, 5.0).unwrap();
        let err = calibrate(&[g], &[flat], &MetricConfig::default(), 3.0).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
    }

    #[test]
    fn calibrate_rejects_mismatched_sets() {
        let a = blobs(32, 32, 0, 100.0, 1.0);
        let b = blobs(16, 16, 0, 100.0, 1.0);
        let cfg = MetricConfig::default();
        assert!(calibrate(&[a.clone()], &[], &cfg, 3.0).is_err());
        assert!(calibrate(&[], &[], &cfg, 3.0).is_err());
        assert!(calibrate(&[a.clone()], &[b], &cfg, 3.0).is_err());
        assert!(calibrate(&[a.clone()], &[a], &cfg, 101.0).is_err());
    }

    #[test]
    fn text_round_trip_is_exact() {
        let cfg = MetricConfig::default();
        let gts: Vec<Image> = (0..2).map(|i| blobs(40, 40, i, 100.0, 1.0)).collect();
        let preds: Vec<Image> = (0..2).map(|i| blobs(40, 40, i, 97.3, 2.7)).collect();
        let cal = calibrate(&gts, &preds, &cfg, 3.0).unwrap();
        let text = cal.to_text();
        let back = DatasetCalibration::from_text(&text).unwrap();
        assert_eq!(back, cal);
        assert_eq!(back.to_text(), text);
        assert!(text.contains("inputs_digest=xxh64:"));

        let uni = MetricConfig::default().with_window(Window::uniform7()).with_data_range(DataRange::Dtype(16));
        let other = DatasetCalibration::from_parts(1.0, 2.0, 1000.0, 0.1 + 0.2, uni).unwrap();
        assert_eq!(DatasetCalibration::from_text(&other.to_text()).unwrap(), other);
    }

    #[test]
    fn malformed_text_reports_line() {
        let err = DatasetCalibration::from_text("beta_gt=1\nnonsense\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let cal = DatasetCalibration::from_parts(1.0, 2.0, 10.0, 1.0, MetricConfig::default()).unwrap();
        let broken = cal.to_text().replace("alpha=", "alpha=x");
        assert!(matches!(DatasetCalibration::from_text(&broken), Err(Error::Parse { .. })));
    }

    #[test]
    fn digest_tracks_pixels() {
        let a = blobs(16, 16, 0, 100.0, 1.0);
        let b = a.shifted(1e-9).unwrap();
        assert_eq!(digest([&a]), digest([&a.clone()]));
        assert_ne!(digest([&a]), digest([&b]));
    }
}
