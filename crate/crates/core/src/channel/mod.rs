//! Hitting-time distributions and the channel coefficients derived from
//! them.

pub mod cache;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Topology;
use crate::walker::HitTimeRecord;

use self::cache::CacheKey;

/// Horizon assumed for analytic channels when no memory length is given (s).
pub const DEFAULT_ANALYTIC_HORIZON: f64 = 10.0;

/// Complementary error function.
#[inline]
pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

fn free_space(topo: &Topology) -> Result<()> {
    if topo.has_plane() {
        Err(Error::PlaneNotSupported)
    } else {
        Ok(())
    }
}

/// First-passage density of a point source onto an absorbing sphere in
/// free space (1/s). Zero for `t <= 0`.
pub fn f_hit_analytic(t: f64, topo: &Topology) -> Result<f64> {
    free_space(topo)?;
    if t <= 0.0 {
        return Ok(0.0);
    }
    let (r_r, r0, d) = (topo.r_r(), topo.r0(), topo.diffusion());
    let gap = r0 - r_r;
    let four_dt = 4.0 * d * t;
    Ok(r_r / r0 / (std::f64::consts::PI * four_dt).sqrt() * gap / t * (-gap * gap / four_dt).exp())
}

/// Probability that a molecule has been absorbed by time `t` in free space.
pub fn cdf_hit_analytic(t: f64, topo: &Topology) -> Result<f64> {
    free_space(topo)?;
    if t <= 0.0 {
        return Ok(0.0);
    }
    let (r_r, r0, d) = (topo.r_r(), topo.r0(), topo.diffusion());
    Ok(r_r / r0 * erfc((r0 - r_r) / (4.0 * d * t).sqrt()))
}

/// Where a set of channel coefficients came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChannelSource {
    Analytic,
    Simulated { key: CacheKey, n_particles: u64 },
    /// Supplied directly, e.g. a test fixture.
    Given,
}

/// A hitting-probability CDF that coefficients can be read from.
pub trait HitCdf {
    fn cdf(&self, t: f64) -> f64;

    /// Latest time the CDF is known for, if bounded.
    fn horizon(&self) -> Option<f64>;

    fn source(&self) -> ChannelSource;
}

/// Free-space analytic channel.
#[derive(Debug, Clone, Copy)]
pub struct AnalyticChannel(Topology);

impl AnalyticChannel {
    pub fn new(topo: &Topology) -> Result<Self> {
        free_space(topo)?;
        Ok(Self(*topo))
    }
}

impl HitCdf for AnalyticChannel {
    fn cdf(&self, t: f64) -> f64 {
        cdf_hit_analytic(t, &self.0).expect("checked at construction")
    }

    fn horizon(&self) -> Option<f64> {
        None
    }

    fn source(&self) -> ChannelSource {
        ChannelSource::Analytic
    }
}

impl HitCdf for HitTimeRecord {
    fn cdf(&self, t: f64) -> f64 {
        self.empirical_cdf(t)
    }

    fn horizon(&self) -> Option<f64> {
        Some(HitTimeRecord::horizon(self))
    }

    fn source(&self) -> ChannelSource {
        ChannelSource::Simulated {
            key: self.key(),
            n_particles: self.n_emitted(),
        }
    }
}

/// Any `Fn(t) -> F(t)` is an unbounded CDF.
pub struct FnCdf<F>(pub F);

impl<F: Fn(f64) -> f64> HitCdf for FnCdf<F> {
    fn cdf(&self, t: f64) -> f64 {
        (self.0)(t)
    }

    fn horizon(&self) -> Option<f64> {
        None
    }

    fn source(&self) -> ChannelSource {
        ChannelSource::Given
    }
}

/// Per-slot arrival probabilities `h_1..h_L` at symbol duration `t_s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelResponse {
    pub t_s: f64,
    pub h: Vec<f64>,
    pub source: ChannelSource,
}

impl ChannelResponse {
    /// Validates directly supplied coefficients.
    pub fn from_coefficients(t_s: f64, h: Vec<f64>, source: ChannelSource) -> Result<Self> {
        if !(t_s.is_finite() && t_s > 0.0) {
            return Err(Error::InvalidLink(format!("t_s must be > 0, got {t_s}")));
        }
        if h.is_empty() {
            return Err(Error::InvalidLink("need at least one channel coefficient".into()));
        }
        if let Some(bad) = h.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidLink(format!("coefficient {bad} outside [0, 1]")));
        }
        let total: f64 = h.iter().sum();
        if total > 1.0 + 1e-9 {
            return Err(Error::InvalidLink(format!("coefficients sum to {total} > 1")));
        }
        Ok(Self { t_s, h, source })
    }

    /// Channel memory `L`.
    pub fn memory(&self) -> usize {
        self.h.len()
    }

    pub fn total(&self) -> f64 {
        self.h.iter().sum()
    }

    /// Keeps the first `memory` taps.
    pub fn truncated(&self, memory: usize) -> Self {
        let mut out = self.clone();
        out.h.truncate(memory.max(1));
        out
    }
}

/// Default memory: as many whole symbols as fit in `horizon`.
pub fn default_memory(horizon: f64, t_s: f64) -> usize {
    ((horizon / t_s + 1e-9).floor() as usize).max(1)
}

/// `h_k = F(k t_s) - F((k-1) t_s)` for `k = 1..=L`. `memory = None` uses
/// the whole horizon of the CDF ([`DEFAULT_ANALYTIC_HORIZON`] if unbounded).
pub fn coefficients_from_cdf<C: HitCdf + ?Sized>(
    cdf: &C,
    t_s: f64,
    memory: Option<usize>,
) -> Result<ChannelResponse> {
    if !(t_s.is_finite() && t_s > 0.0) {
        return Err(Error::InvalidLink(format!("t_s must be > 0, got {t_s}")));
    }
    let horizon = cdf.horizon();
    let memory = memory.unwrap_or_else(|| default_memory(horizon.unwrap_or(DEFAULT_ANALYTIC_HORIZON), t_s));
    if memory == 0 {
        return Err(Error::InvalidLink("channel memory must be >= 1".into()));
    }
    if let Some(horizon) = horizon {
        let needed = memory as f64 * t_s;
        if needed > horizon * (1.0 + 1e-9) {
            return Err(Error::HorizonExceeded {
                memory,
                t_s,
                needed,
                horizon,
            });
        }
    }
    let mut prev = 0.0;
    let h = (1..=memory)
        .map(|k| {
            let cur = cdf.cdf(k as f64 * t_s);
            let hk = (cur - prev).max(0.0);
            prev = cur;
            hk
        })
        .collect();
    Ok(ChannelResponse {
        t_s,
        h,
        source: cdf.source(),
    })
}

/// One row of a CDF export.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CdfRow {
    pub t: f64,
    /// Sample lies on a symbol boundary (multiple of `t_s`).
    pub symbol_boundary: bool,
    pub empirical: f64,
    pub analytic: Option<f64>,
}

/// Samples the empirical CDF at every multiple of `t_s` and of `fine_step`
/// up to the record horizon, plus the analytic curve when it exists.
pub fn cdf_curve(rec: &HitTimeRecord, t_s: f64, fine_step: f64) -> Vec<CdfRow> {
    let horizon = rec.horizon();
    let analytic = AnalyticChannel::new(rec.topology()).ok();
    let mut times: Vec<(f64, bool)> = Vec::new();
    let n_sym = default_memory(horizon, t_s);
    times.extend((1..=n_sym).map(|k| (k as f64 * t_s, true)));
    let n_fine = default_memory(horizon, fine_step);
    times.extend((1..=n_fine).map(|k| (k as f64 * fine_step, false)));
    times.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
    times.dedup_by(|b, a| (a.0 - b.0).abs() <= 1e-9 * a.0.abs().max(1.0));
    times
        .into_iter()
        .map(|(t, symbol_boundary)| CdfRow {
            t,
            symbol_boundary,
            empirical: rec.empirical_cdf(t),
            analytic: analytic.as_ref().map(|a| a.cdf(t)),
        })
        .collect()
}

pub fn write_cdf_csv<W: Write>(mut w: W, rows: &[CdfRow]) -> Result<()> {
    writeln!(w, "t_s,symbol_boundary,f_hit_empirical,f_hit_analytic")?;
    for r in rows {
        match r.analytic {
            Some(a) => writeln!(w, "{:.6},{},{:.8},{:.8}", r.t, r.symbol_boundary as u8, r.empirical, a)?,
            None => writeln!(w, "{:.6},{},{:.8},", r.t, r.symbol_boundary as u8, r.empirical)?,
        }
    }
    Ok(())
}
