//! Sliding-window kernels.
//!
//! Both supported kernels are separable: the 2D weights are the outer
//! product of a normalized 1D profile with itself, which is what lets
//! [`crate::ssim::local_statistics`] run as two 1D passes.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    Gaussian,
    Uniform,
}

impl WindowKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            WindowKind::Gaussian => "gaussian",
            WindowKind::Uniform => "uniform",
        }
    }
}

impl fmt::Display for WindowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WindowKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(WindowKind::Gaussian),
            "uniform" => Ok(WindowKind::Uniform),
            other => Err(Error::invalid(format!("unknown window kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    kind: WindowKind,
    side: usize,
    sigma: Option<f64>,
    taps: Vec<f64>,
    weights: Vec<f64>,
}

impl Window {
    /// Builds a normalized window. `sigma` is required for gaussian kernels
    /// and ignored for uniform ones.
    pub fn new(kind: WindowKind, side: usize, sigma: Option<f64>) -> Result<Self> {
        if side < 3 || side % 2 == 0 {
            return Err(Error::invalid(format!(
                "window side must be odd and >= 3, got {side}"
            )));
        }
        let half = (side / 2) as f64;
        let raw: Vec<f64> = match kind {
            WindowKind::Uniform => vec![1.0; side],
            WindowKind::Gaussian => {
                let sigma = match sigma {
                    Some(s) if s.is_finite() && s > 0.0 => s,
                    Some(s) => {
                        return Err(Error::invalid(format!(
                            "gaussian sigma must be positive, got {s}"
                        )))
                    }
                    None => return Err(Error::invalid("gaussian window requires sigma")),
                };
                (0..side)
                    .map(|i| {
                        let d = i as f64 - half;
                        (-(d * d) / (2.0 * sigma * sigma)).exp()
                    })
                    .collect()
            }
        };
        let total: f64 = raw.iter().sum();
        let taps: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let weights = taps
            .iter()
            .flat_map(|&a| taps.iter().map(move |&b| a * b))
            .collect();
        Ok(Self {
            kind,
            side,
            sigma: match kind {
                WindowKind::Gaussian => sigma,
                WindowKind::Uniform => None,
            },
            taps,
            weights,
        })
    }

    /// 11x11 gaussian with sigma 1.5.
    pub fn gaussian11() -> Self {
        Self::new(WindowKind::Gaussian, 11, Some(1.5)).expect("valid default window")
    }

    pub fn uniform7() -> Self {
        Self::new(WindowKind::Uniform, 7, None).expect("valid default window")
    }

    pub fn kind(&self) -> WindowKind {
        self.kind
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn sigma(&self) -> Option<f64> {
        self.sigma
    }

    /// Pixel count `K = side²`.
    pub fn pixel_count(&self) -> usize {
        self.side * self.side
    }

    /// Normalized 1D profile.
    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    /// Row-major `side x side` weights.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, dy: usize, dx: usize) -> f64 {
        self.weights[dy * self.side + dx]
    }
}

impl Default for Window {
    fn default() -> Self {
        Self::gaussian11()
    }
}
