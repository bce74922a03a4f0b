//! Command-line front end: `calibrate`, `score`, `diagnose` and `synth`.
//!
//! Exit codes: 0 success, 2 input error, 3 numeric failure, 4 missing
//! calibration. Reports are JSON with every float written to 17 significant
//! digits; CSV files are projections of the same numbers.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::hash::Hasher;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};
use twox_hash::XxHash64;

use crate::baselines::{background_mask, care_ssim_with, region_scores, vanilla_ssim, zscore_ssim, CareOptions};
use crate::calibration::{calibrate_with, micro_ssim, objective_grid, preprocess, Calibrated, CalibrationOptions, DatasetCalibration};
use crate::error::Error;
use crate::image::Image;
use crate::io::{load_image, load_manifest, save_image, write_manifest, ImageFormat, ManifestEntry, PairManifest};
use crate::multiscale::{micro_ms3im, ms_ssim, MsSsimConfig};
use crate::percentile::pooled_percentile;
use crate::reduce;
use crate::saturation::{pipeline_report, ComponentSaturation, PipelineVariant, SaturationReport};
use crate::ssim::{mssim, DataRange, MetricConfig, SsimBreakdown};
use crate::stats::{Precision, StatsSet};
use crate::synthetic::{generate_pair, SynthMetadata, SynthParams, RNG_ALGORITHM};
use crate::window::Window;

pub const SCORE_REPORT_SCHEMA: &str = include_str!("../schemas/score-report.schema.json");
pub const SATURATION_REPORT_SCHEMA: &str = include_str!("../schemas/saturation-report.schema.json");
pub const SYNTH_METADATA_SCHEMA: &str = include_str!("../schemas/synth-metadata.schema.json");

const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    Input = 2,
    Numeric = 3,
    MissingCalibration = 4,
}

#[derive(Debug)]
pub struct CliError {
    pub status: ExitStatus,
    pub message: String,
}

impl CliError {
    fn input(message: impl Into<String>) -> Self {
        Self {
            status: ExitStatus::Input,
            message: message.into(),
        }
    }

    fn missing_calibration() -> Self {
        Self {
            status: ExitStatus::MissingCalibration,
            message: "calibration required".into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Numeric(_) | Error::UndefinedClosedForm(_) => ExitStatus::Numeric,
            _ => ExitStatus::Input,
        };
        Self {
            status,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "micrometric", version, about = "SSIM metrics for microscopy image pairs")]
pub struct Cli {
    /// Worker threads; defaults to the number of available cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit offsets, scale and α on a manifest of pairs.
    Calibrate(CalibrateArgs),
    /// Score every pair with one or more metrics.
    Score(ScoreArgs),
    /// Saturation per pipeline variant plus offset and α sweeps.
    Diagnose(DiagnoseArgs),
    /// Write a synthetic dataset with known offsets and scale.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WindowChoice {
    Gaussian11,
    Uniform7,
}

impl WindowChoice {
    fn window(self) -> Window {
        match self {
            WindowChoice::Gaussian11 => Window::gaussian11(),
            WindowChoice::Uniform7 => Window::uniform7(),
        }
    }
}

/// `--data-range` value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RangeChoice {
    /// Dtype range when the bit depth is known, otherwise the ground-truth
    /// range. Calibrated metrics always use the dataset range.
    Auto,
    Dtype,
    Explicit(f64),
}

impl FromStr for RangeChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "auto" => Ok(RangeChoice::Auto),
            "dtype" => Ok(RangeChoice::Dtype),
            v => match v.parse::<f64>() {
                Ok(x) if x.is_finite() && x > 0.0 => Ok(RangeChoice::Explicit(x)),
                _ => Err(format!("expected auto, dtype or a positive number, got '{v}'")),
            },
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct MetricFlags {
    #[arg(long, value_enum)]
    pub window: Option<WindowChoice>,
    #[arg(long)]
    pub k1: Option<f64>,
    #[arg(long)]
    pub k2: Option<f64>,
    /// auto, dtype, or a positive number.
    #[arg(long, default_value = "auto")]
    pub data_range: RangeChoice,
    /// Background percentile for offset estimation.
    #[arg(long, default_value_t = 3.0)]
    pub percentile: f64,
}

impl MetricFlags {
    /// Window and constants from the flags, falling back to `fitted` and then
    /// to the defaults. Flags that contradict `fitted` are rejected.
    fn base(&self, fitted: Option<&MetricConfig>) -> CliResult<MetricConfig> {
        let default = MetricConfig::default();
        let from = fitted.unwrap_or(&default);
        let mut cfg = from.clone();
        if let Some(w) = self.window {
            cfg.window = w.window();
        }
        cfg.k1 = self.k1.unwrap_or(from.k1);
        cfg.k2 = self.k2.unwrap_or(from.k2);
        if let Some(f) = fitted {
            if cfg.window != f.window || cfg.k1 != f.k1 || cfg.k2 != f.k2 {
                return Err(CliError::input(
                    "--window/--k1/--k2 differ from the settings the calibration was fitted with",
                ));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn range(&self, bits: Option<u8>, fallback: DataRange) -> CliResult<DataRange> {
        Ok(match self.data_range {
            RangeChoice::Auto => bits.map(DataRange::Dtype).unwrap_or(fallback),
            RangeChoice::Dtype => DataRange::Dtype(
                bits.ok_or_else(|| CliError::input("--data-range dtype needs images with a known bit depth"))?,
            ),
            RangeChoice::Explicit(v) => DataRange::Explicit(v),
        })
    }

    /// Configuration for fitting a calibration.
    fn calibration_config(&self, bits: Option<u8>) -> CliResult<MetricConfig> {
        let range = match self.data_range {
            RangeChoice::Auto => DataRange::GtDatasetRange,
            _ => self.range(bits, DataRange::GtDatasetRange)?,
        };
        Ok(self.base(None)?.with_data_range(range))
    }
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Where the calibration is written.
    #[arg(long, default_value = "calibration.txt")]
    pub out: PathBuf,
    #[command(flatten)]
    pub flags: MetricFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum Metric {
    #[value(name = "microssim")]
    #[serde(rename = "microssim")]
    MicroSsim,
    #[value(name = "microms3im")]
    #[serde(rename = "microms3im")]
    MicroMs3im,
    #[value(name = "ssim")]
    #[serde(rename = "ssim")]
    Ssim,
    #[value(name = "zscore-ssim")]
    #[serde(rename = "zscore-ssim")]
    ZscoreSsim,
    #[value(name = "care-ssim")]
    #[serde(rename = "care-ssim")]
    CareSsim,
    #[value(name = "ms-ssim")]
    #[serde(rename = "ms-ssim")]
    MsSsim,
}

impl Metric {
    pub fn needs_calibration(self) -> bool {
        matches!(self, Metric::MicroSsim | Metric::MicroMs3im)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::MicroSsim => "microssim",
            Metric::MicroMs3im => "microms3im",
            Metric::Ssim => "ssim",
            Metric::ZscoreSsim => "zscore-ssim",
            Metric::CareSsim => "care-ssim",
            Metric::MsSsim => "ms-ssim",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    /// JSON report path; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optional CSV projection of the per-pair records.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "microssim")]
    pub metric: Vec<Metric>,
    /// Fit CARE-SSIM on centered images with a scale only.
    #[arg(long)]
    pub care_zero_mean: bool,
    #[command(flatten)]
    pub flags: MetricFlags,
}

#[derive(Debug, Clone, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Fitted here when omitted.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "diagnose")]
    pub out: PathBuf,
    /// Shared offsets added to ground truth and prediction.
    #[arg(long, value_delimiter = ',', default_value = "0,100,1000,10000")]
    pub offsets: Vec<f64>,
    /// Points of the geometric α grid over [α/100, 100α].
    #[arg(long, default_value_t = 401)]
    pub sweep_points: usize,
    #[command(flatten)]
    pub flags: MetricFlags,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub pairs: usize,
    /// Pair `i` uses seed `seed + i`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// pgm, tif or mfr.
    #[arg(long, default_value = "tif")]
    pub format: ImageFormat,
    /// JSON generator parameters; individual flags override them.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub blobs: Option<usize>,
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub beta_gt: Option<f64>,
    #[arg(long)]
    pub beta_pred: Option<f64>,
    #[arg(long)]
    pub poisson_gain: Option<f64>,
    #[arg(long)]
    pub read_noise: Option<f64>,
    #[arg(long)]
    pub gt_read_noise: Option<f64>,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("MICROMETRIC_LOG", "warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitStatus::Input } else { ExitStatus::Success } as i32;
        }
    };
    match run(&cli) {
        Ok(()) => ExitStatus::Success as i32,
        Err(e) => {
            eprintln!("error: {e}");
            e.status as i32
        }
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match cli.threads {
        Some(0) => Err(CliError::input("--threads must be positive")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::input(e.to_string()))?
            .install(|| dispatch(&cli.command)),
        None => dispatch(&cli.command),
    }
}

fn dispatch(command: &Command) -> CliResult<()> {
    match command {
        Command::Calibrate(a) => {
            let c = run_calibrate(a)?;
            let r = &c.report;
            let cal = &c.calibration;
            let mut out = io::stdout().lock();
            let lines = [
                ("beta_gt", exact(cal.beta_gt())),
                ("beta_pred", exact(cal.beta_pred())),
                ("max_gt", exact(cal.max_gt())),
                ("alpha", exact(cal.alpha())),
                ("objective", exact(r.objective_at_alpha)),
                ("iterations", r.iterations.to_string()),
            ];
            for (k, v) in lines {
                writeln!(out, "{k}: {v}").map_err(|e| CliError::input(e.to_string()))?;
            }
            Ok(())
        }
        Command::Score(a) => run_score(a).map(|_| ()),
        Command::Diagnose(a) => run_diagnose(a).map(|_| ()),
        Command::Synth(a) => run_synth(a).map(|_| ()),
    }
}

fn exact(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e).into())
}

fn nonempty_manifest(path: &Path) -> CliResult<PairManifest> {
    let m = load_manifest(path)?;
    if m.entries.is_empty() {
        return Err(CliError::input(format!("empty manifest: {}", path.display())));
    }
    Ok(m)
}

fn load_entry(e: &ManifestEntry) -> CliResult<(Image, Image)> {
    let gt = load_image(&e.gt)?;
    let pred = load_image(&e.pred)?;
    gt.same_dims(&pred)
        .map_err(|err| CliError::input(format!("pair '{}': {err}", e.id)))?;
    Ok((gt, pred))
}

fn load_all(m: &PairManifest) -> CliResult<(Vec<Image>, Vec<Image>)> {
    let pairs: Vec<(Image, Image)> = m.entries.par_iter().map(load_entry).collect::<CliResult<_>>()?;
    Ok(pairs.into_iter().unzip())
}

fn common_bit_depth(images: &[Image]) -> Option<u8> {
    let first = images.first()?.bit_depth()?;
    images.iter().all(|i| i.bit_depth() == Some(first)).then_some(first)
}

fn load_calibration(path: &Path) -> CliResult<(DatasetCalibration, String)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cal = DatasetCalibration::from_text(&text)?;
    if !cal.is_fitted() {
        return Err(CliError::missing_calibration());
    }
    Ok((cal, text_digest(&text)))
}

fn text_digest(text: &str) -> String {
    let mut h = XxHash64::with_seed(0);
    h.write(text.as_bytes());
    format!("xxh64:{:016x}", h.finish())
}

fn fit(gts: Vec<&Image>, preds: Vec<&Image>, config: &MetricConfig, percentile: f64) -> CliResult<Calibrated> {
    let options = CalibrationOptions {
        percentile,
        ..Default::default()
    };
    Ok(calibrate_with(gts, preds, config, &options)?)
}

/// Fits a calibration on the manifest and writes its text form to `--out`.
pub fn run_calibrate(args: &CalibrateArgs) -> CliResult<Calibrated> {
    let manifest = nonempty_manifest(&args.manifest)?;
    let (gts, preds) = load_all(&manifest)?;
    let config = args.flags.calibration_config(common_bit_depth(&gts))?;
    info!("calibrating {} pairs", gts.len());
    let options = CalibrationOptions {
        percentile: args.flags.percentile,
        ..Default::default()
    };
    let c = calibrate_with(gts, preds, &config, &options)?;
    info!("alpha={} after {} iterations", c.calibration.alpha(), c.report.iterations);
    write_file(&args.out, c.calibration.to_text())?;
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub luminance: f64,
    pub contrast: f64,
    pub structure: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub pair_id: String,
    pub metric: Metric,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<Components>,
    /// Mean SSIM over windows whose ground-truth mean is near the background.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub foreground: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: Metric,
    pub count: usize,
    /// Population mean and standard deviation of the per-pair values.
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub format: String,
    pub tool_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration_digest: Option<String>,
    pub metrics: Vec<Metric>,
    pub records: Vec<ScoreRecord>,
    pub summary: Vec<MetricSummary>,
}

impl ScoreReport {
    pub fn values(&self, metric: Metric) -> Vec<f64> {
        self.records.iter().filter(|r| r.metric == metric).map(|r| r.value).collect()
    }

    pub fn summary_for(&self, metric: Metric) -> Option<&MetricSummary> {
        self.summary.iter().find(|s| s.metric == metric)
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(exact).unwrap_or_default();
        let mut out = String::from("pair_id,metric,value,luminance,contrast,structure,background,foreground\n");
        for r in &self.records {
            let c = r.components;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.pair_id,
                r.metric.as_str(),
                exact(r.value),
                opt(c.map(|c| c.luminance)),
                opt(c.map(|c| c.contrast)),
                opt(c.map(|c| c.structure)),
                opt(r.background),
                opt(r.foreground),
            ));
        }
        out
    }
}

fn breakdown_record(id: &str, metric: Metric, b: &SsimBreakdown, mask: &[bool], digest: Option<&str>) -> ScoreRecord {
    let (background, foreground) = region_scores(b, mask);
    ScoreRecord {
        pair_id: id.to_string(),
        metric,
        value: b.mssim,
        components: Some(Components {
            luminance: b.mean_luminance(),
            contrast: b.mean_contrast(),
            structure: b.mean_structure(),
        }),
        background,
        foreground,
        calibration_digest: digest.map(str::to_string),
    }
}

struct ScoreContext<'a> {
    metrics: &'a [Metric],
    calibration: Option<&'a (DatasetCalibration, String)>,
    base: &'a MetricConfig,
    flags: &'a MetricFlags,
    care: CareOptions,
}

fn score_pair(entry: &ManifestEntry, ctx: &ScoreContext<'_>) -> CliResult<Vec<ScoreRecord>> {
    let (gt, pred) = load_entry(entry)?;
    let fallback = DataRange::GtImageRange;
    let baseline = ctx.base.clone().with_data_range(ctx.flags.range(gt.bit_depth(), fallback)?);
    let background = match ctx.calibration {
        Some((cal, _)) => cal.beta_gt(),
        None => pooled_percentile(&[gt.pixels()], ctx.flags.percentile)?,
    };
    let mask = background_mask(&gt, ctx.base, background)?;
    let id = entry.id.as_str();
    ctx.metrics
        .iter()
        .map(|&metric| {
            let record = match metric {
                Metric::MicroSsim | Metric::MicroMs3im => {
                    let (cal, digest) = ctx.calibration.ok_or_else(CliError::missing_calibration)?;
                    if metric == Metric::MicroSsim {
                        let b = micro_ssim(&gt, &pred, cal, cal.config())?;
                        breakdown_record(id, metric, &b, &mask, Some(digest))
                    } else {
                        let cfg = MsSsimConfig::with_base(cal.config().clone());
                        ScoreRecord {
                            pair_id: id.to_string(),
                            metric,
                            value: micro_ms3im(&gt, &pred, cal, &cfg)?,
                            components: None,
                            background: None,
                            foreground: None,
                            calibration_digest: Some(digest.clone()),
                        }
                    }
                }
                Metric::Ssim => breakdown_record(id, metric, &vanilla_ssim(&gt, &pred, &baseline)?, &mask, None),
                Metric::ZscoreSsim => breakdown_record(id, metric, &zscore_ssim(&gt, &pred, &baseline)?, &mask, None),
                Metric::CareSsim => {
                    let (b, _) = care_ssim_with(&gt, &pred, &baseline, ctx.care)?;
                    breakdown_record(id, metric, &b, &mask, None)
                }
                Metric::MsSsim => ScoreRecord {
                    pair_id: id.to_string(),
                    metric,
                    value: ms_ssim(&gt, &pred, &MsSsimConfig::with_base(baseline.clone()))?,
                    components: None,
                    background: None,
                    foreground: None,
                    calibration_digest: None,
                },
            };
            Ok(record)
        })
        .collect()
}

/// Working memory of one scored pair is about this many bytes per pixel.
const SCORE_BYTES_PER_PIXEL: u64 = 160;
const SCORE_MEMORY_BUDGET: u64 = 1 << 30;

/// Pairs scored concurrently. Every supported format stores at least one
/// byte per pixel, so file sizes bound the pixel counts from above.
fn score_batch_size(m: &PairManifest) -> usize {
    let largest = m
        .entries
        .iter()
        .filter_map(|e| fs::metadata(&e.gt).ok().map(|md| md.len()))
        .max()
        .unwrap_or(0)
        .max(1);
    (SCORE_MEMORY_BUDGET / (largest * SCORE_BYTES_PER_PIXEL)).max(1) as usize
}

/// Scores every pair; records follow manifest order, then metric order.
/// Large images are scored one pair at a time, with the parallelism inside
/// each pair, to bound memory.
pub fn run_score(args: &ScoreArgs) -> CliResult<ScoreReport> {
    let mut metrics = args.metric.clone();
    metrics.dedup();
    if metrics.is_empty() {
        return Err(CliError::input("no metric requested"));
    }
    let calibration = match &args.calibration {
        Some(p) => Some(load_calibration(p)?),
        None if metrics.iter().any(|m| m.needs_calibration()) => return Err(CliError::missing_calibration()),
        None => None,
    };
    let manifest = nonempty_manifest(&args.manifest)?;
    let base = args.flags.base(calibration.as_ref().map(|(c, _)| c.config()))?;
    let ctx = ScoreContext {
        metrics: &metrics,
        calibration: calibration.as_ref(),
        base: &base,
        flags: &args.flags,
        care: CareOptions {
            zero_mean: args.care_zero_mean,
        },
    };
    let mut records = Vec::with_capacity(manifest.entries.len() * metrics.len());
    for batch in manifest.entries.chunks(score_batch_size(&manifest)) {
        let per_pair: Vec<Vec<ScoreRecord>> = batch.par_iter().map(|e| score_pair(e, &ctx)).collect::<CliResult<_>>()?;
        records.extend(per_pair.into_iter().flatten());
    }
    let summary = metrics
        .iter()
        .map(|&metric| {
            let values: Vec<f64> = records.iter().filter(|r| r.metric == metric).map(|r| r.value).collect();
            let (mean, std) = reduce::mean_std(&values);
            MetricSummary {
                metric,
                count: values.len(),
                mean: Some(mean),
                std: Some(std),
            }
        })
        .collect();
    let report = ScoreReport {
        format: "micrometric.score/1".into(),
        tool_version: TOOL_VERSION.into(),
        calibration_digest: calibration.as_ref().map(|(_, d)| d.clone()),
        metrics,
        records,
        summary,
    };
    let json = to_json(&report)?;
    match &args.out {
        Some(p) => write_file(p, &json)?,
        None => io::stdout()
            .lock()
            .write_all(json.as_bytes())
            .map_err(|e| CliError::input(e.to_string()))?,
    }
    if let Some(p) = &args.csv {
        write_file(p, report.to_csv())?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSaturation {
    pub variant: String,
    pub luminance: ComponentSaturation,
    pub contrast: ComponentSaturation,
    pub structure: ComponentSaturation,
    pub per_image: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaturationDocument {
    pub format: String,
    pub tool_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration_digest: Option<String>,
    pub variants: Vec<VariantSaturation>,
}

/// One row of the offset sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OffsetRow {
    pub offset: f64,
    pub ssim_luminance: f64,
    pub ssim: f64,
    pub microssim: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnosis {
    pub saturation: SaturationDocument,
    pub offsets: Vec<OffsetRow>,
    /// `(α, objective)` over the geometric grid.
    pub alpha_sweep: Vec<(f64, f64)>,
    pub argmax: usize,
    pub alpha: f64,
}

fn mean_of<T: Sync>(items: &[T], f: impl Fn(&T) -> f64 + Sync) -> f64 {
    reduce::mean_by(items.len(), |i| f(&items[i]))
}

/// Writes `saturation.json`, `saturation.csv`, `offset_sweep.csv` and
/// `alpha_sweep.csv` into `--out`.
pub fn run_diagnose(args: &DiagnoseArgs) -> CliResult<Diagnosis> {
    if args.sweep_points < 3 {
        return Err(CliError::input("--sweep-points must be at least 3"));
    }
    let manifest = nonempty_manifest(&args.manifest)?;
    let (gts, preds) = load_all(&manifest)?;
    let bits = common_bit_depth(&gts);
    let (cal, digest) = match &args.calibration {
        Some(p) => {
            let (c, d) = load_calibration(p)?;
            (c, Some(d))
        }
        None => {
            let cfg = args.flags.calibration_config(bits)?;
            let c = fit(gts.iter().collect(), preds.iter().collect(), &cfg, args.flags.percentile)?;
            (c.calibration, None)
        }
    };
    let micro = args.flags.base(Some(cal.config()))?.with_data_range(cal.config().data_range);
    let raw = micro.clone().with_data_range(args.flags.range(bits, DataRange::GtDatasetRange)?);
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;

    let mut variants = Vec::new();
    let mut csv = String::from("variant,component,mean,std,clamped,windows\n");
    for variant in PipelineVariant::ALL {
        let r: SaturationReport = pipeline_report(&gts, &preds, &raw, &cal, variant)?;
        for (name, c) in [("luminance", &r.luminance), ("contrast", &r.contrast), ("structure", &r.structure)] {
            csv.push_str(&format!(
                "{},{name},{},{},{},{}\n",
                variant.as_str(),
                exact(c.mean),
                exact(c.std),
                c.clamped,
                c.windows
            ));
        }
        variants.push(VariantSaturation {
            variant: variant.as_str().into(),
            luminance: r.luminance,
            contrast: r.contrast,
            structure: r.structure,
            per_image: r.per_image,
        });
    }
    let saturation = SaturationDocument {
        format: "micrometric.saturation/1".into(),
        tool_version: TOOL_VERSION.into(),
        calibration_digest: digest,
        variants,
    };
    write_file(&args.out.join("saturation.json"), to_json(&saturation)?)?;
    write_file(&args.out.join("saturation.csv"), csv)?;

    let mut offsets = Vec::with_capacity(args.offsets.len());
    let mut csv = String::from("offset,ssim_luminance,ssim,microssim,alpha\n");
    for &d in &args.offsets {
        let (sg, sp): (Vec<Image>, Vec<Image>) = if d == 0.0 {
            (gts.clone(), preds.clone())
        } else {
            let sg = gts.iter().map(|g| g.shifted(d)).collect::<Result<_, _>>()?;
            let sp = preds.iter().map(|p| p.shifted(d)).collect::<Result<_, _>>()?;
            (sg, sp)
        };
        let vanilla = sg
            .par_iter()
            .zip(&sp)
            .map(|(g, p)| mssim(g, p, &raw))
            .collect::<Result<Vec<_>, _>>()?;
        let refit = fit(sg.iter().collect(), sp.iter().collect(), &micro, cal.percentile())?.calibration;
        let scores = sg
            .par_iter()
            .zip(&sp)
            .map(|(g, p)| Ok(micro_ssim(g, p, &refit, &micro)?.mssim))
            .collect::<CliResult<Vec<f64>>>()?;
        let row = OffsetRow {
            offset: d,
            ssim_luminance: mean_of(&vanilla, |b| b.mean_luminance()),
            ssim: mean_of(&vanilla, |b| b.mssim),
            microssim: mean_of(&scores, |&v| v),
            alpha: refit.alpha(),
        };
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            exact(row.offset),
            exact(row.ssim_luminance),
            exact(row.ssim),
            exact(row.microssim),
            exact(row.alpha)
        ));
        offsets.push(row);
    }
    write_file(&args.out.join("offset_sweep.csv"), csv)?;

    let side = micro.window.side();
    let windows: usize = gts.iter().map(|g| (g.height() + 1 - side) * (g.width() + 1 - side)).sum();
    let precision = if windows.saturating_mul(40) > 1 << 30 {
        Precision::F32
    } else {
        Precision::F64
    };
    let mut stats = StatsSet::with_capacity(precision, windows);
    let mut k = None;
    for (g, p) in gts.iter().zip(&preds) {
        let x = cal.preprocess_gt(g)?;
        let y = preprocess(p, cal.beta_pred(), cal.max_gt())?;
        if k.is_none() {
            k = Some(cal.constants_for(&micro, &x)?);
        }
        stats.extend_from_grid(&micro.local_statistics(&x, &y)?);
    }
    let k = k.expect("manifest is non-empty");
    let alpha = cal.alpha();
    let sweep = objective_grid(&stats, &k, alpha / 100.0, alpha * 100.0, args.sweep_points)?;
    let argmax = sweep
        .iter()
        .enumerate()
        .fold(0, |best, (i, &(_, f))| if f > sweep[best].1 { i } else { best });
    let mut csv = String::from("alpha,objective,argmax\n");
    for (i, &(a, f)) in sweep.iter().enumerate() {
        csv.push_str(&format!("{},{},{}\n", exact(a), exact(f), u8::from(i == argmax)));
    }
    write_file(&args.out.join("alpha_sweep.csv"), csv)?;

    Ok(Diagnosis {
        saturation,
        offsets,
        alpha_sweep: sweep,
        argmax,
        alpha,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthPairRecord {
    pub id: String,
    pub gt: String,
    pub pred: String,
    pub metadata: SynthMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDocument {
    pub format: String,
    pub tool_version: String,
    pub rng: String,
    pub image_format: String,
    pub params: SynthParams,
    pub pairs: Vec<SynthPairRecord>,
}

/// Writes `pairs` generated pairs, `manifest.jsonl` and `metadata.json`.
/// Integer formats store quantized 16-bit values.
pub fn run_synth(args: &SynthArgs) -> CliResult<SynthDocument> {
    let mut params = match &args.params {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<SynthParams>(&text)
                .map_err(|e| CliError::input(format!("{}: {e}", p.display())))?
        }
        None => SynthParams::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = args.$flag { params.$field = v; })*
        };
    }
    set!(height => height, width => width, blobs => n_blobs, scale => scale, beta_gt => beta_gt,
         beta_pred => beta_pred, poisson_gain => poisson_gain, read_noise => read_noise_sigma,
         gt_read_noise => gt_read_noise_sigma);
    params.seed = args.seed;
    params.quantize_u16 = args.format != ImageFormat::Mfr;
    params.validate()?;

    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let ext = args.format.extension();
    let mut entries = Vec::with_capacity(args.pairs);
    let mut pairs = Vec::with_capacity(args.pairs);
    for i in 0..args.pairs {
        let p = SynthParams {
            seed: params.seed.wrapping_add(i as u64),
            ..params.clone()
        };
        let pair = generate_pair(&p)?;
        let id = format!("pair_{i:04}");
        let (gt_name, pred_name) = (format!("{id}_gt.{ext}"), format!("{id}_pred.{ext}"));
        let (gt_path, pred_path) = (args.out.join(&gt_name), args.out.join(&pred_name));
        save_image(&pair.gt, &gt_path, args.format)?;
        save_image(&pair.low, &pred_path, args.format)?;
        entries.push(ManifestEntry {
            id: id.clone(),
            gt: gt_path,
            pred: pred_path,
        });
        pairs.push(SynthPairRecord {
            id,
            gt: gt_name,
            pred: pred_name,
            metadata: pair.metadata,
        });
    }
    write_manifest(args.out.join("manifest.jsonl"), &entries)?;
    let doc = SynthDocument {
        format: "micrometric.synth/1".into(),
        tool_version: TOOL_VERSION.into(),
        rng: RNG_ALGORITHM.into(),
        image_format: ext.into(),
        params,
        pairs,
    };
    write_file(&args.out.join("metadata.json"), to_json(&doc)?)?;
    info!("wrote {} pairs to {}", args.pairs, args.out.display());
    Ok(doc)
}

/// Pretty JSON whose floats carry 17 significant digits.
struct ExactFormatter<'a>(PrettyFormatter<'a>);

impl Formatter for ExactFormatter<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }

    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }

    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }

    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }

    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }

    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }

    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Serializes `value` as pretty JSON with 17-significant-digit floats.
pub fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, ExactFormatter(PrettyFormatter::new()));
    value
        .serialize(&mut ser)
        .map_err(|e| CliError::input(format!("cannot serialize report: {e}")))?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_json_round_trips() {
        let values: [f64; 6] = [0.1, 1.0 / 3.0, 1e-300, 6.02e23, -0.0, 12345.678901234567];
        let json = to_json(&values.to_vec()).unwrap();
        assert!(json.contains("1.0000000000000001e-1"));
        let back: Vec<f64> = serde_json::from_str(&json).unwrap();
        for (a, b) in values.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(to_json(&f64::NAN).unwrap().trim(), "null");
    }

    #[test]
    fn range_choice_parsing() {
        assert_eq!("auto".parse::<RangeChoice>().unwrap(), RangeChoice::Auto);
        assert_eq!("dtype".parse::<RangeChoice>().unwrap(), RangeChoice::Dtype);
        assert_eq!("1".parse::<RangeChoice>().unwrap(), RangeChoice::Explicit(1.0));
        assert!("-2".parse::<RangeChoice>().is_err());
        assert!("wide".parse::<RangeChoice>().is_err());
    }

    #[test]
    fn error_statuses() {
        assert_eq!(CliError::from(Error::Numeric("x".into())).status, ExitStatus::Numeric);
        assert_eq!(CliError::from(Error::UndefinedClosedForm("x".into())).status, ExitStatus::Numeric);
        assert_eq!(CliError::from(Error::invalid("x")).status, ExitStatus::Input);
        assert_eq!(CliError::missing_calibration().message, "calibration required");
    }

    #[test]
    fn parses_shared_flags() {
        let cli = Cli::try_parse_from([
            "micrometric",
            "--threads",
            "2",
            "score",
            "--manifest",
            "m.jsonl",
            "--metric",
            "ssim,care-ssim",
            "--window",
            "uniform7",
            "--data-range",
            "dtype",
            "--k1",
            "0.02",
        ])
        .unwrap();
        assert_eq!(cli.threads, Some(2));
        let Command::Score(a) = cli.command else { panic!() };
        assert_eq!(a.metric, vec![Metric::Ssim, Metric::CareSsim]);
        assert_eq!(a.flags.window, Some(WindowChoice::Uniform7));
        assert_eq!(a.flags.data_range, RangeChoice::Dtype);
        assert_eq!(a.flags.percentile, 3.0);
        let cfg = a.flags.base(None).unwrap();
        assert_eq!(cfg.k1, 0.02);
        assert_eq!(cfg.window, Window::uniform7());
    }

    #[test]
    fn flags_must_match_the_calibration() {
        let flags = MetricFlags {
            window: Some(WindowChoice::Uniform7),
            k1: None,
            k2: None,
            data_range: RangeChoice::Auto,
            percentile: 3.0,
        };
        assert!(flags.base(Some(&MetricConfig::default())).is_err());
        let same = MetricFlags { window: None, ..flags };
        let fitted = MetricConfig::default().with_window(Window::uniform7());
        assert_eq!(same.base(Some(&fitted)).unwrap().window, Window::uniform7());
    }

    #[test]
    fn auto_range_prefers_dtype() {
        let flags = MetricFlags {
            window: None,
            k1: None,
            k2: None,
            data_range: RangeChoice::Auto,
            percentile: 3.0,
        };
        assert_eq!(flags.range(Some(16), DataRange::GtImageRange).unwrap(), DataRange::Dtype(16));
        assert_eq!(flags.range(None, DataRange::GtImageRange).unwrap(), DataRange::GtImageRange);
        assert_eq!(flags.calibration_config(Some(16)).unwrap().data_range, DataRange::GtDatasetRange);
        let dtype = MetricFlags {
            data_range: RangeChoice::Dtype,
            ..flags
        };
        assert!(dtype.range(None, DataRange::GtImageRange).is_err());
    }
}
