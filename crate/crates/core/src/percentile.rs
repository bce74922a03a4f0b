//! Exact nearest-rank percentiles over pixel pools that are too large to copy.
//!
//! Selection runs as a radix search on an order-preserving 64-bit key: each
//! pass histograms 16 key bits of the still-eligible values, so the pooled
//! slices are only ever read, never sorted or concatenated.

use rayon::prelude::*;

use crate::error::{Error, Result};

const RADIX_BITS: u32 = 16;
const BUCKETS: usize = 1 << RADIX_BITS;
/// Below this many candidates the remainder is gathered and selected directly.
const GATHER_LIMIT: u64 = 1 << 20;

/// Maps finite floats to `u64` such that key order equals numeric order.
#[inline]
fn key(v: f64) -> u64 {
    let bits = v.to_bits();
    if bits >> 63 == 1 {
        !bits
    } else {
        bits | (1 << 63)
    }
}

#[inline]
fn from_key(k: u64) -> f64 {
    if k >> 63 == 1 {
        f64::from_bits(k & !(1 << 63))
    } else {
        f64::from_bits(!k)
    }
}

/// Zero-based rank of the `p`-th percentile among `n` sorted values:
/// `p/100·(n−1)` rounded to the nearest index, ties to the lower one.
pub fn nearest_rank(n: usize, p: f64) -> usize {
    debug_assert!(n > 0);
    let pos = p / 100.0 * (n - 1) as f64;
    let lower = pos.floor();
    let idx = if pos - lower > 0.5 { lower + 1.0 } else { lower };
    (idx as usize).min(n - 1)
}

/// The `p`-th percentile of all values in `pools`, as if they were one array.
pub fn pooled_percentile(pools: &[&[f64]], p: f64) -> Result<f64> {
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::invalid(format!("percentile must lie in [0, 100], got {p}")));
    }
    let n: usize = pools.iter().map(|s| s.len()).sum();
    if n == 0 {
        return Err(Error::invalid("cannot take a percentile of an empty collection"));
    }
    Ok(select_kth(pools, nearest_rank(n, p) as u64))
}

/// The `k`-th smallest (zero-based) value across all pools.
fn select_kth(pools: &[&[f64]], mut k: u64) -> f64 {
    let mut prefix = 0u64;
    let mut mask = 0u64;
    let mut shift = 64 - RADIX_BITS;
    loop {
        let hist = pools
            .par_iter()
            .map(|pool| {
                let mut h = vec![0u64; BUCKETS];
                for &v in pool.iter() {
                    let kv = key(v);
                    if kv & mask == prefix {
                        h[((kv >> shift) as usize) & (BUCKETS - 1)] += 1;
                    }
                }
                h
            })
            .reduce(
                || vec![0u64; BUCKETS],
                |mut a, b| {
                    a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
                    a
                },
            );
        let mut bucket = 0;
        for (b, &count) in hist.iter().enumerate() {
            if k < count {
                bucket = b;
                break;
            }
            k -= count;
        }
        prefix |= (bucket as u64) << shift;
        mask |= ((BUCKETS - 1) as u64) << shift;
        if shift == 0 {
            return from_key(prefix);
        }
        let remaining = hist[bucket];
        if remaining <= GATHER_LIMIT {
            let mut keys: Vec<u64> = pools
                .iter()
                .flat_map(|pool| pool.iter().map(|&v| key(v)))
                .filter(|kv| kv & mask == prefix)
                .collect();
            let (_, kth, _) = keys.select_nth_unstable(k as usize);
            return from_key(*kth);
        }
        shift -= RADIX_BITS;
    }
}
