//! Order-fixed compensated reductions.
//!
//! Every mean reported by the crate goes through here. Work is split into
//! fixed-size chunks whose partial sums are combined left to right, so the
//! result does not depend on how many threads evaluated the chunks.

use std::ops::Range;

use rayon::prelude::*;

const CHUNK: usize = 1 << 14;

/// Neumaier's compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct Compensated {
    sum: f64,
    comp: f64,
}

impl Compensated {
    #[inline]
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: Compensated) {
        self.add(other.sum);
        self.add(other.comp);
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// `Σ f(i)` for `i in 0..n`.
pub fn sum_by<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    let partials: Vec<Compensated> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = Compensated::default();
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                acc.add(f(i));
            }
            acc
        })
        .collect();
    let mut total = Compensated::default();
    for p in partials {
        total.merge(p);
    }
    total.value()
}

/// Like [`sum_by`], but `f` accumulates a whole chunk `range` into the
/// accumulator it is handed. Chunk boundaries and merge order are the same,
/// so the two agree bit for bit when `f` adds the same terms in index order.
pub fn sum_by_chunk<F>(n: usize, f: F) -> f64
where
    F: Fn(Range<usize>, &mut Compensated) + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    let partials: Vec<Compensated> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = Compensated::default();
            f(c * CHUNK..((c + 1) * CHUNK).min(n), &mut acc);
            acc
        })
        .collect();
    let mut total = Compensated::default();
    for p in partials {
        total.merge(p);
    }
    total.value()
}

/// Mean of `f(i)` for `i in 0..n`; `NaN` when `n == 0`.
pub fn mean_by<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    if n == 0 {
        return f64::NAN;
    }
    sum_by(n, f) / n as f64
}

pub fn mean(values: &[f64]) -> f64 {
    mean_by(values.len(), |i| values[i])
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let m = mean(values);
    let var = mean_by(values.len(), |i| {
        let d = values[i] - m;
        d * d
    });
    (m, var.sqrt())
}
