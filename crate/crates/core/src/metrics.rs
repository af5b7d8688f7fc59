//! Closed-form signal-quality metrics over channel coefficients.

use std::cmp::Ordering;
use std::fmt;

use serde::{Serialize, Serializer};

use crate::channel::ChannelResponse;

/// A non-negative ratio that may be infinite (zero denominator).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ratio {
    Finite(f64),
    Infinite,
}

impl Ratio {
    fn of(num: f64, den: f64) -> Self {
        if den > 0.0 {
            Ratio::Finite(num / den)
        } else {
            Ratio::Infinite
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Ratio::Infinite)
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            Ratio::Finite(v) => Some(v),
            Ratio::Infinite => None,
        }
    }

    /// As an `f64`, with `Infinite` mapped to `f64::INFINITY`.
    pub fn to_f64(self) -> f64 {
        self.finite().unwrap_or(f64::INFINITY)
    }
}

impl PartialOrd for Ratio {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match (self, other) {
            (Ratio::Infinite, Ratio::Infinite) => Some(Ordering::Equal),
            (Ratio::Infinite, _) => Some(Ordering::Greater),
            (_, Ratio::Infinite) => Some(Ordering::Less),
            (Ratio::Finite(a), Ratio::Finite(b)) => a.partial_cmp(b),
        }
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ratio::Finite(v) => write!(f, "{v}"),
            Ratio::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for Ratio {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Ratio::Finite(v) => s.serialize_f64(*v),
            Ratio::Infinite => s.serialize_str("inf"),
        }
    }
}

/// Signal-to-interference-and-noise amplitude ratio for `m` molecules per
/// bit-1:
///
/// ```text
///                     m h_1
/// ------------------------------------------------
/// sum_{k>=2} m h_k + sum_{k>=1} sqrt(m h_k (1 - h_k))
/// ```
///
/// The noise term is a sum of per-tap standard deviations, not the
/// standard deviation of the summed count.
pub fn sinar(m: f64, h: &[f64]) -> Ratio {
    let Some((&h1, tail)) = h.split_first() else {
        return Ratio::Finite(0.0);
    };
    let isi: f64 = tail.iter().map(|&hk| m * hk).sum();
    let noise: f64 = h.iter().map(|&hk| (m * hk * (1.0 - hk)).max(0.0).sqrt()).sum();
    Ratio::of(m * h1, isi + noise)
}

/// Signal-to-interference ratio `h_1 / sum_{k>=2} h_k`.
pub fn sir(h: &[f64]) -> Ratio {
    let Some((&h1, tail)) = h.split_first() else {
        return Ratio::Finite(0.0);
    };
    Ratio::of(h1, tail.iter().sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricReport {
    pub m: u64,
    pub sinar: Ratio,
    pub sir: Ratio,
}

pub fn report(m: u64, resp: &ChannelResponse) -> MetricReport {
    MetricReport {
        m,
        sinar: sinar(m as f64, &resp.h),
        sir: sir(&resp.h),
    }
}
