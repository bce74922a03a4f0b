//! Per-window first and second moments.

use std::ops::Range;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::reduce;
use crate::window::Window;

/// Local moments of one window position: means, variances, covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowStats {
    pub ux: f64,
    pub uy: f64,
    pub vx: f64,
    pub vy: f64,
    pub vxy: f64,
}

impl WindowStats {
    pub fn new(ux: f64, uy: f64, vx: f64, vy: f64, vxy: f64) -> Self {
        Self { ux, uy, vx, vy, vxy }
    }

    pub fn sx(&self) -> f64 {
        self.vx.sqrt()
    }

    pub fn sy(&self) -> f64 {
        self.vy.sqrt()
    }

    /// Stats of the pair with the second image multiplied by `alpha`.
    pub fn scale_y(&self, alpha: f64) -> Self {
        Self {
            ux: self.ux,
            uy: alpha * self.uy,
            vx: self.vx,
            vy: alpha * alpha * self.vy,
            vxy: alpha * self.vxy,
        }
    }
}

/// How local variances are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VarianceMode {
    /// Weighted second central moment, `Σw·z² − (Σw·z)²`.
    #[default]
    Weighted,
    /// `K/(K−1)` bias correction; only meaningful for uniform windows.
    Unbiased,
}

impl VarianceMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            VarianceMode::Weighted => "weighted",
            VarianceMode::Unbiased => "unbiased",
        }
    }
}

/// Structure-of-arrays window moments over the valid region of an image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsGrid {
    pub height: usize,
    pub width: usize,
    pub ux: Vec<f64>,
    pub uy: Vec<f64>,
    pub vx: Vec<f64>,
    pub vy: Vec<f64>,
    pub vxy: Vec<f64>,
}

impl StatsGrid {
    pub fn len(&self) -> usize {
        self.ux.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ux.is_empty()
    }

    pub fn get(&self, i: usize) -> WindowStats {
        WindowStats {
            ux: self.ux[i],
            uy: self.uy[i],
            vx: self.vx[i],
            vy: self.vy[i],
            vxy: self.vxy[i],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = WindowStats> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }
}

/// Weighted local statistics of `x` and `y` at every position where the window
/// fits entirely inside the images.
pub fn local_statistics(x: &Image, y: &Image, window: &Window) -> Result<StatsGrid> {
    local_statistics_with(x, y, window, VarianceMode::Weighted)
}

pub fn local_statistics_with(
    x: &Image,
    y: &Image,
    window: &Window,
    mode: VarianceMode,
) -> Result<StatsGrid> {
    x.same_dims(y)?;
    let (h, w) = x.dims();
    let s = window.side();
    if h < s || w < s {
        return Err(Error::invalid(format!(
            "image {h}x{w} is smaller than the {s}x{s} window"
        )));
    }
    let bias = match mode {
        VarianceMode::Weighted => 1.0,
        VarianceMode::Unbiased => {
            let k = window.pixel_count() as f64;
            k / (k - 1.0)
        }
    };
    let vh = h - s + 1;
    let vw = w - s + 1;
    let taps = window.taps();

    // Moments are taken about the global means; this keeps the
    // E[z²] − E[z]² cancellation small for data sitting on a large offset.
    let mx = x.mean();
    let my = y.mean();

    // Horizontal pass: each input row yields a block [x | y | xx | yy | xy] of vw values.
    let mut horiz = vec![0.0f64; h * 5 * vw];
    horiz
        .par_chunks_mut(5 * vw)
        .enumerate()
        .for_each(|(r, block)| {
            let xr: Vec<f64> = x.row(r).iter().map(|v| v - mx).collect();
            let yr: Vec<f64> = y.row(r).iter().map(|v| v - my).collect();
            let xx: Vec<f64> = xr.iter().map(|v| v * v).collect();
            let yy: Vec<f64> = yr.iter().map(|v| v * v).collect();
            let xy: Vec<f64> = xr.iter().zip(&yr).map(|(a, b)| a * b).collect();
            for (k, src) in [&xr, &yr, &xx, &yy, &xy].into_iter().enumerate() {
                let dst = &mut block[k * vw..(k + 1) * vw];
                for (t, &wt) in taps.iter().enumerate() {
                    for (d, &v) in dst.iter_mut().zip(&src[t..t + vw]) {
                        *d += wt * v;
                    }
                }
            }
        });

    let n = vh * vw;
    let mut ux = vec![0.0; n];
    let mut uy = vec![0.0; n];
    let mut vx = vec![0.0; n];
    let mut vy = vec![0.0; n];
    let mut vxy = vec![0.0; n];
    ux.par_chunks_mut(vw)
        .zip(uy.par_chunks_mut(vw))
        .zip(vx.par_chunks_mut(vw))
        .zip(vy.par_chunks_mut(vw))
        .zip(vxy.par_chunks_mut(vw))
        .enumerate()
        .for_each(|(i, ((((oux, ouy), ovx), ovy), ovxy))| {
            let mut acc = vec![0.0f64; 5 * vw];
            for (t, &wt) in taps.iter().enumerate() {
                let block = &horiz[(i + t) * 5 * vw..(i + t + 1) * 5 * vw];
                for (a, &b) in acc.iter_mut().zip(block) {
                    *a += wt * b;
                }
            }
            let (ex, rest) = acc.split_at(vw);
            let (ey, rest) = rest.split_at(vw);
            let (exx, rest) = rest.split_at(vw);
            let (eyy, exy) = rest.split_at(vw);
            for c in 0..vw {
                let var_x = settle_variance(exx[c], ex[c]);
                let var_y = settle_variance(eyy[c], ey[c]);
                let mut cov = exy[c] - ex[c] * ey[c];
                let bound = (var_x * var_y).sqrt();
                if cov.abs() > bound {
                    cov = bound.copysign(cov);
                }
                oux[c] = ex[c] + mx;
                ouy[c] = ey[c] + my;
                ovx[c] = bias * var_x;
                ovy[c] = bias * var_y;
                ovxy[c] = bias * cov;
            }
        });

    Ok(StatsGrid {
        height: vh,
        width: vw,
        ux,
        uy,
        vx,
        vy,
        vxy,
    })
}

/// `E[z²] − E[z]²`, clamped at zero and snapped to zero when it is within
/// rounding of the second moment it was computed from.
#[inline]
fn settle_variance(second: f64, first: f64) -> f64 {
    let v = second - first * first;
    if v <= 16.0 * f64::EPSILON * second {
        0.0
    } else {
        v
    }
}

/// Storage precision for a pooled [`StatsSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

#[derive(Debug, Clone, Default)]
struct Columns<T> {
    ux: Vec<T>,
    uy: Vec<T>,
    vx: Vec<T>,
    vy: Vec<T>,
    vxy: Vec<T>,
}

trait Scalar: Copy + Send + Sync {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl<T: Scalar> Columns<T> {
    fn with_capacity(n: usize) -> Self {
        Self {
            ux: Vec::with_capacity(n),
            uy: Vec::with_capacity(n),
            vx: Vec::with_capacity(n),
            vy: Vec::with_capacity(n),
            vxy: Vec::with_capacity(n),
        }
    }

    fn push(&mut self, s: WindowStats) {
        self.ux.push(T::from_f64(s.ux));
        self.uy.push(T::from_f64(s.uy));
        self.vx.push(T::from_f64(s.vx));
        self.vy.push(T::from_f64(s.vy));
        self.vxy.push(T::from_f64(s.vxy));
    }

    fn extend_from_grid(&mut self, g: &StatsGrid) {
        self.ux.extend(g.ux.iter().map(|&v| T::from_f64(v)));
        self.uy.extend(g.uy.iter().map(|&v| T::from_f64(v)));
        self.vx.extend(g.vx.iter().map(|&v| T::from_f64(v)));
        self.vy.extend(g.vy.iter().map(|&v| T::from_f64(v)));
        self.vxy.extend(g.vxy.iter().map(|&v| T::from_f64(v)));
    }

    /// Compensated sum of `f` over the windows in `range`, in index order.
    #[inline]
    fn accumulate<F: Fn(WindowStats) -> f64>(&self, range: Range<usize>, acc: &mut reduce::Compensated, f: &F) {
        let ux = &self.ux[range.clone()];
        let uy = &self.uy[range.clone()];
        let vx = &self.vx[range.clone()];
        let vy = &self.vy[range.clone()];
        let vxy = &self.vxy[range];
        let it = ux.iter().zip(uy).zip(vx).zip(vy).zip(vxy);
        for ((((&a, &b), &c), &d), &e) in it {
            acc.add(f(WindowStats {
                ux: a.to_f64(),
                uy: b.to_f64(),
                vx: c.to_f64(),
                vy: d.to_f64(),
                vxy: e.to_f64(),
            }));
        }
    }

    #[inline]
    fn get(&self, i: usize) -> WindowStats {
        WindowStats {
            ux: self.ux[i].to_f64(),
            uy: self.uy[i].to_f64(),
            vx: self.vx[i].to_f64(),
            vy: self.vy[i].to_f64(),
            vxy: self.vxy[i].to_f64(),
        }
    }
}

#[derive(Debug, Clone)]
enum Storage {
    F64(Columns<f64>),
    F32(Columns<f32>),
}

/// A pooled collection of window statistics, e.g. every window of every
/// image pair in a dataset.
///
/// Large datasets can be stored in single precision; all arithmetic on the
/// stored values is still done in `f64`.
#[derive(Debug, Clone)]
pub struct StatsSet {
    storage: Storage,
}

impl StatsSet {
    pub fn new(precision: Precision) -> Self {
        Self::with_capacity(precision, 0)
    }

    pub fn with_capacity(precision: Precision, n: usize) -> Self {
        let storage = match precision {
            Precision::F64 => Storage::F64(Columns::with_capacity(n)),
            Precision::F32 => Storage::F32(Columns::with_capacity(n)),
        };
        Self { storage }
    }

    pub fn from_stats(stats: impl IntoIterator<Item = WindowStats>) -> Self {
        let mut set = Self::new(Precision::F64);
        for s in stats {
            set.push(s);
        }
        set
    }

    pub fn precision(&self) -> Precision {
        match self.storage {
            Storage::F64(_) => Precision::F64,
            Storage::F32(_) => Precision::F32,
        }
    }

    pub fn push(&mut self, s: WindowStats) {
        match &mut self.storage {
            Storage::F64(c) => c.push(s),
            Storage::F32(c) => c.push(s),
        }
    }

    pub fn extend_from_grid(&mut self, grid: &StatsGrid) {
        match &mut self.storage {
            Storage::F64(c) => c.extend_from_grid(grid),
            Storage::F32(c) => c.extend_from_grid(grid),
        }
    }

    pub fn len(&self) -> usize {
        match &self.storage {
            Storage::F64(c) => c.ux.len(),
            Storage::F32(c) => c.ux.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> WindowStats {
        match &self.storage {
            Storage::F64(c) => c.get(i),
            Storage::F32(c) => c.get(i),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = WindowStats> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }

    /// Order-fixed compensated mean of `f` over all windows.
    pub fn mean_by<F>(&self, f: F) -> f64
    where
        F: Fn(WindowStats) -> f64 + Sync,
    {
        let n = self.len();
        if n == 0 {
            return f64::NAN;
        }
        let sum = match &self.storage {
            Storage::F64(c) => reduce::sum_by_chunk(n, |r, acc| c.accumulate(r, acc, &f)),
            Storage::F32(c) => reduce::sum_by_chunk(n, |r, acc| c.accumulate(r, acc, &f)),
        };
        sum / n as f64
    }
}
