//! BCSK link simulation: bit-1 releases `M` molecules, bit-0 releases
//! none, and the receiver compares the slot count against a threshold.

use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::channel::ChannelResponse;
use crate::error::{Error, Result};
use crate::par::Parallelism;
use crate::rng::{self, Purpose};

/// Bits per parallel work item.
const BIT_BLOCK: u64 = 1 << 14;

/// 97.5% standard normal quantile.
const Z_95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalModel {
    /// Sum of per-tap binomial draws.
    #[default]
    Binomial,
    /// Moment-matched normal approximation, rounded and clamped at zero.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum ThresholdPolicy {
    Fixed { tau: u64 },
    /// Empirical minimum-error threshold from a pilot stream.
    Optimized {
        #[serde(default = "default_pilot_bits")]
        pilot_bits: u64,
    },
}

fn default_pilot_bits() -> u64 {
    100_000
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::Optimized {
            pilot_bits: default_pilot_bits(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    /// Molecules released for a bit-1.
    pub m: u64,
    /// Symbol duration (s).
    pub t_s: f64,
    #[serde(default = "LinkConfig::default_n_bits")]
    pub n_bits: u64,
    #[serde(default)]
    pub threshold: ThresholdPolicy,
    #[serde(default)]
    pub arrival_model: ArrivalModel,
    #[serde(default = "LinkConfig::default_seed")]
    pub seed: u64,
    /// Channel memory `L`; defaults to the whole simulated horizon.
    #[serde(default)]
    pub memory: Option<usize>,
}

impl LinkConfig {
    fn default_n_bits() -> u64 {
        1_000_000
    }

    fn default_seed() -> u64 {
        1
    }

    pub fn new(m: u64, t_s: f64) -> Self {
        Self {
            m,
            t_s,
            n_bits: Self::default_n_bits(),
            threshold: ThresholdPolicy::default(),
            arrival_model: ArrivalModel::default(),
            seed: Self::default_seed(),
            memory: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::InvalidLink("m must be >= 1".into()));
        }
        if self.n_bits == 0 {
            return Err(Error::InvalidLink("n_bits must be >= 1".into()));
        }
        if !(self.t_s.is_finite() && self.t_s > 0.0) {
            return Err(Error::InvalidLink(format!("t_s must be > 0, got {}", self.t_s)));
        }
        if self.memory == Some(0) {
            return Err(Error::InvalidLink("memory must be >= 1".into()));
        }
        if let ThresholdPolicy::Optimized { pilot_bits: 0 } = self.threshold {
            return Err(Error::InvalidLink("pilot_bits must be >= 1".into()));
        }
        Ok(())
    }
}

/// Molecules counted in one slot. `tx_history[0]` is the current symbol's
/// release, `tx_history[k]` the release `k` symbols earlier; releases older
/// than the history are zero.
pub fn sample_arrivals<R: Rng + ?Sized>(tx_history: &[u64], h: &[f64], model: ArrivalModel, rng: &mut R) -> u64 {
    match model {
        ArrivalModel::Binomial => tx_history
            .iter()
            .zip(h)
            .filter(|(&n, &p)| n > 0 && p > 0.0)
            .map(|(&n, &p)| Binomial::new(n, p.min(1.0)).expect("valid binomial").sample(rng))
            .sum(),
        ArrivalModel::Gaussian => {
            let (mean, var) = tx_history
                .iter()
                .zip(h)
                .fold((0.0, 0.0), |(m, v), (&n, &p)| {
                    let n = n as f64;
                    (m + n * p, v + n * p * (1.0 - p))
                });
            gaussian_count(mean, var, rng)
        }
    }
}

#[inline]
fn gaussian_count<R: Rng + ?Sized>(mean: f64, var: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    let z: f64 = rng.sample(StandardNormal);
    (mean + var.sqrt() * z).round().max(0.0) as u64
}

/// `true` (bit-1) iff `r > tau`; a tie decides bit-0.
#[inline]
pub fn demodulate(r: u64, tau: u64) -> bool {
    r > tau
}

/// Per-tap samplers for a fixed `M`.
struct SlotSampler<'a> {
    h: &'a [f64],
    m: f64,
    taps: Vec<Option<Binomial>>,
    model: ArrivalModel,
}

impl<'a> SlotSampler<'a> {
    fn new(m: u64, h: &'a [f64], model: ArrivalModel) -> Self {
        let taps = h
            .iter()
            .map(|&p| (p > 0.0).then(|| Binomial::new(m, p.min(1.0)).expect("valid binomial")))
            .collect();
        Self {
            h,
            m: m as f64,
            taps,
            model,
        }
    }

    /// Count in slot `i` of a stream whose bits are all known.
    #[inline]
    fn sample<R: Rng + ?Sized>(&self, bits: &[bool], i: usize, rng: &mut R) -> u64 {
        let depth = self.h.len().min(i + 1);
        match self.model {
            ArrivalModel::Binomial => {
                let mut r = 0;
                for k in 0..depth {
                    if bits[i - k] {
                        if let Some(b) = &self.taps[k] {
                            r += b.sample(rng);
                        }
                    }
                }
                r
            }
            ArrivalModel::Gaussian => {
                let (mut mean, mut var) = (0.0, 0.0);
                for k in 0..depth {
                    if bits[i - k] {
                        let p = self.h[k];
                        mean += self.m * p;
                        var += self.m * p * (1.0 - p);
                    }
                }
                gaussian_count(mean, var, rng)
            }
        }
    }
}

/// Equiprobable bits, generated block by block from `(seed, purpose)`.
fn generate_bits(seed: u64, purpose: Purpose, n: u64, par: Parallelism) -> Vec<bool> {
    par.map_chunks(n, BIT_BLOCK, |range| {
        let mut rng = rng::stream(seed, purpose, range.start / BIT_BLOCK);
        range.map(|_| rng.random::<bool>()).collect::<Vec<_>>()
    })
    .concat()
}

/// Per-block pass over a simulated stream. `visit` sees (bit, count) pairs.
fn simulate_stream<T, F>(
    cfg: &LinkConfig,
    h: &[f64],
    bits: &[bool],
    purpose: Purpose,
    par: Parallelism,
    init: impl Fn() -> T + Sync + Send,
    visit: F,
) -> Vec<T>
where
    T: Send,
    F: Fn(&mut T, bool, u64) + Sync + Send,
{
    let sampler = SlotSampler::new(cfg.m, h, cfg.arrival_model);
    par.map_chunks(bits.len() as u64, BIT_BLOCK, |range| {
        let mut rng = rng::stream(cfg.seed, purpose, range.start / BIT_BLOCK);
        let mut acc = init();
        for i in range {
            let i = i as usize;
            let r = sampler.sample(bits, i, &mut rng);
            visit(&mut acc, bits[i], r);
        }
        acc
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdChoice {
    pub tau: u64,
    pub pilot_bits: u64,
    pub pilot_errors: u64,
    /// All-zero channel: nothing can be detected.
    pub degenerate: bool,
}

/// Searches every integer threshold in `[0, M]` on a pilot stream and
/// returns the one with the fewest errors (smallest on ties).
pub fn optimize_threshold(cfg: &LinkConfig, resp: &ChannelResponse, par: Parallelism) -> Result<ThresholdChoice> {
    cfg.validate()?;
    let pilot_bits = match cfg.threshold {
        ThresholdPolicy::Optimized { pilot_bits } => pilot_bits,
        ThresholdPolicy::Fixed { .. } => default_pilot_bits(),
    };
    if resp.h.iter().all(|&p| p == 0.0) {
        log::warn!("all-zero channel coefficients; threshold fixed at 0");
        return Ok(ThresholdChoice {
            tau: 0,
            pilot_bits,
            pilot_errors: pilot_bits.div_ceil(2),
            degenerate: true,
        });
    }
    let m = cfg.m as usize;
    let bits = generate_bits(cfg.seed, Purpose::PilotBits, pilot_bits, par);
    // hist[b][r] = pilot slots with bit b and count r, counts above M lumped in the last bin
    let hists = simulate_stream(
        cfg,
        &resp.h,
        &bits,
        Purpose::PilotArrivals,
        par,
        || [vec![0u64; m + 2], vec![0u64; m + 2]],
        |acc, bit, r| acc[bit as usize][(r as usize).min(m + 1)] += 1,
    );
    let mut zeros = vec![0u64; m + 2];
    let mut ones = vec![0u64; m + 2];
    for [h0, h1] in hists {
        zeros.iter_mut().zip(h0).for_each(|(a, b)| *a += b);
        ones.iter_mut().zip(h1).for_each(|(a, b)| *a += b);
    }
    let n_zeros: u64 = zeros.iter().sum();
    let (mut ones_at_or_below, mut zeros_at_or_below) = (0u64, 0u64);
    let mut best = (u64::MAX, 0u64);
    for tau in 0..=m {
        ones_at_or_below += ones[tau];
        zeros_at_or_below += zeros[tau];
        let errors = ones_at_or_below + (n_zeros - zeros_at_or_below);
        if errors < best.0 {
            best = (errors, tau as u64);
        }
    }
    Ok(ThresholdChoice {
        tau: best.1,
        pilot_bits,
        pilot_errors: best.0,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BerEstimate {
    pub errors: u64,
    pub n_bits: u64,
    pub ber: f64,
    /// 95% interval; normal approximation, or `[0, 3/n]` with no errors.
    pub ci95: (f64, f64),
    pub tau: u64,
    /// No errors observed; the interval is a one-sided upper bound.
    pub one_sided: bool,
    /// Fewer than 10 errors; the interval is unreliable.
    pub wide_ci: bool,
}

impl BerEstimate {
    pub fn from_counts(errors: u64, n_bits: u64, tau: u64) -> Self {
        let n = n_bits as f64;
        let ber = errors as f64 / n;
        let ci95 = if errors == 0 {
            (0.0, (3.0 / n).min(1.0))
        } else {
            let half = Z_95 * (ber * (1.0 - ber) / n).sqrt();
            ((ber - half).max(0.0), (ber + half).min(1.0))
        };
        Self {
            errors,
            n_bits,
            ber,
            ci95,
            tau,
            one_sided: errors == 0,
            wide_ci: errors < 10,
        }
    }

    /// `no_errors`, `few_errors` or empty.
    pub fn flag(&self) -> &'static str {
        if self.one_sided {
            "no_errors"
        } else if self.wide_ci {
            "few_errors"
        } else {
            ""
        }
    }

    pub fn overlaps(&self, other: &BerEstimate) -> bool {
        self.ci95.0 <= other.ci95.1 && other.ci95.0 <= self.ci95.1
    }
}

/// Resolves the threshold policy, then simulates the evaluation stream.
pub fn run_ber(cfg: &LinkConfig, resp: &ChannelResponse, par: Parallelism) -> Result<(BerEstimate, Option<ThresholdChoice>)> {
    cfg.validate()?;
    let (tau, choice) = match cfg.threshold {
        ThresholdPolicy::Fixed { tau } => (tau, None),
        ThresholdPolicy::Optimized { .. } => {
            let c = optimize_threshold(cfg, resp, par)?;
            (c.tau, Some(c))
        }
    };
    Ok((evaluate_ber(cfg, resp, tau, par), choice))
}

/// BER of the evaluation stream at a fixed threshold.
pub fn evaluate_ber(cfg: &LinkConfig, resp: &ChannelResponse, tau: u64, par: Parallelism) -> BerEstimate {
    let bits = generate_bits(cfg.seed, Purpose::EvalBits, cfg.n_bits, par);
    let errors: u64 = simulate_stream(
        cfg,
        &resp.h,
        &bits,
        Purpose::EvalArrivals,
        par,
        || 0u64,
        |acc, bit, r| *acc += (demodulate(r, tau) != bit) as u64,
    )
    .into_iter()
    .sum();
    BerEstimate::from_counts(errors, cfg.n_bits, tau)
}
