//! Particle-based random walk from the point transmitter to the absorbing
//! receiver.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::channel::cache::CacheKey;
use crate::error::{Error, Result};
use crate::geometry::{Point3, Segment, Side, StepOutcome, Topology};
use crate::par::Parallelism;
use crate::rng::{self, Purpose};

/// Particles per parallel work item.
const PARTICLE_CHUNK: u64 = 256;

/// Per-axis excursion, in units of the leap standard deviation, that a leap
/// must stay within. A 3-D Brownian path exceeds `LEAP_Z * sqrt(3)` leap
/// sigmas of radial distance with probability below 12 Q(7.5) < 4e-13.
const LEAP_Z: f64 = 7.5;

/// How molecules are advanced through time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    /// One Gaussian step of variance `2 D dt` per axis per time step, with
    /// the plane and receiver checked after every step.
    #[default]
    Stepwise,
    /// Identical per-step rules near the aperture and receiver. Far from
    /// them, `n` steps are taken as one Gaussian move of variance
    /// `2 D n dt`, folded back across the plane body. The fold is exact for
    /// a reflecting plane; `n` is capped so that the skipped path reaches the
    /// aperture or receiver with negligible probability.
    Leaping,
}

/// The Monte Carlo contract for one channel characterization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimProtocol {
    #[serde(default = "SimProtocol::default_particles")]
    pub n_particles: u64,
    /// Time step (s).
    #[serde(default = "SimProtocol::default_dt")]
    pub dt: f64,
    /// Horizon (s).
    #[serde(default = "SimProtocol::default_t_total")]
    pub t_total: f64,
    #[serde(default = "SimProtocol::default_seed")]
    pub master_seed: u64,
    #[serde(default)]
    pub kernel: Kernel,
}

impl Default for SimProtocol {
    fn default() -> Self {
        Self {
            n_particles: Self::default_particles(),
            dt: Self::default_dt(),
            t_total: Self::default_t_total(),
            master_seed: Self::default_seed(),
            kernel: Kernel::Stepwise,
        }
    }
}

impl SimProtocol {
    fn default_particles() -> u64 {
        100_000
    }
    fn default_dt() -> f64 {
        1e-4
    }
    fn default_t_total() -> f64 {
        10.0
    }
    fn default_seed() -> u64 {
        20_200_101
    }

    /// 1e4 particles at dt = 1e-3 s over the default horizon.
    pub fn quick() -> Self {
        Self {
            n_particles: 10_000,
            dt: 1e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 {
            return Err(Error::InvalidProtocol("n_particles must be >= 1".into()));
        }
        if !(self.dt.is_finite() && self.t_total.is_finite() && self.dt > 0.0 && self.dt < self.t_total)
        {
            return Err(Error::InvalidProtocol(format!(
                "need 0 < dt < t_total, got dt = {}, t_total = {}",
                self.dt, self.t_total
            )));
        }
        if self.t_total / self.dt > u32::MAX as f64 {
            return Err(Error::InvalidProtocol("too many time steps".into()));
        }
        Ok(())
    }

    /// Number of whole steps inside the horizon.
    pub fn n_steps(&self) -> u32 {
        (self.t_total / self.dt + 1e-9).floor() as u32
    }

    /// End of the last simulated step.
    pub fn horizon(&self) -> f64 {
        self.n_steps() as f64 * self.dt
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(36);
        out.extend_from_slice(b"prot");
        out.extend_from_slice(&self.n_particles.to_le_bytes());
        out.extend_from_slice(&self.dt.to_bits().to_le_bytes());
        out.extend_from_slice(&self.t_total.to_bits().to_le_bytes());
        out.extend_from_slice(&self.master_seed.to_le_bytes());
        out.push(self.kernel as u8);
        out
    }
}

/// Absorption times of one simulated channel, stored as step indices.
#[derive(Debug, Clone, PartialEq)]
pub struct HitTimeRecord {
    topology: Topology,
    protocol: SimProtocol,
    /// Sorted, each in `1..=n_steps`.
    hit_steps: Vec<u32>,
}

impl HitTimeRecord {
    /// Builds a record from raw step indices (sorted here).
    pub fn from_steps(topology: Topology, protocol: SimProtocol, mut hit_steps: Vec<u32>) -> Result<Self> {
        protocol.validate()?;
        if hit_steps.len() as u64 > protocol.n_particles {
            return Err(Error::InvalidProtocol(format!(
                "{} hits for {} particles",
                hit_steps.len(),
                protocol.n_particles
            )));
        }
        let n_steps = protocol.n_steps();
        if let Some(&bad) = hit_steps.iter().find(|&&s| s == 0 || s > n_steps) {
            return Err(Error::InvalidProtocol(format!(
                "hit step {bad} outside 1..={n_steps}"
            )));
        }
        hit_steps.sort_unstable();
        Ok(Self {
            topology,
            protocol,
            hit_steps,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn protocol(&self) -> &SimProtocol {
        &self.protocol
    }

    pub fn n_emitted(&self) -> u64 {
        self.protocol.n_particles
    }

    pub fn n_absorbed(&self) -> usize {
        self.hit_steps.len()
    }

    pub fn hit_steps(&self) -> &[u32] {
        &self.hit_steps
    }

    /// Absorption times in seconds, non-decreasing.
    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        let dt = self.protocol.dt;
        self.hit_steps.iter().map(move |&s| s as f64 * dt)
    }

    pub fn horizon(&self) -> f64 {
        self.protocol.horizon()
    }

    pub fn key(&self) -> CacheKey {
        CacheKey::of(&self.topology, &self.protocol)
    }

    /// Absorptions with time <= `t`.
    pub fn hits_until(&self, t: f64) -> usize {
        if t <= 0.0 {
            return 0;
        }
        let last = (t / self.protocol.dt + 1e-9).floor();
        let last = if last >= u32::MAX as f64 { u32::MAX } else { last as u32 };
        self.hit_steps.partition_point(|&s| s <= last)
    }

    /// Empirical hitting probability by time `t`, normalized by the number
    /// of emitted particles.
    pub fn empirical_cdf(&self, t: f64) -> f64 {
        self.hits_until(t) as f64 / self.n_emitted() as f64
    }
}

/// Per-axis standard deviation of one step, `sqrt(2 D dt)`.
pub fn step_sigma(diffusion: f64, dt: f64) -> f64 {
    (2.0 * diffusion * dt).sqrt()
}

/// Adds an independent N(0, sigma^2) displacement to each coordinate,
/// drawn in x, y, z order.
#[inline]
pub fn step_particle<R: Rng + ?Sized>(pos: Point3, sigma: f64, rng: &mut R) -> Point3 {
    let dx: f64 = rng.sample(StandardNormal);
    let dy: f64 = rng.sample(StandardNormal);
    let dz: f64 = rng.sample(StandardNormal);
    Point3::new(pos.x + sigma * dx, pos.y + sigma * dy, pos.z + sigma * dz)
}

/// Walks one particle from the origin; returns its absorption step.
fn walk_particle(topo: &Topology, sigma: f64, n_steps: u32, rng: &mut impl Rng) -> Option<u32> {
    let mut pos = Point3::ORIGIN;
    let mut side = Side::Tx;
    for step in 1..=n_steps {
        let proposal = step_particle(pos, sigma, rng);
        let (outcome, new_side) = topo.advance(Segment::new(pos, proposal), side);
        match outcome {
            StepOutcome::Absorbed(_) => return Some(step),
            StepOutcome::Free(p) | StepOutcome::Reflected(p) => {
                pos = p;
                side = new_side;
            }
        }
    }
    None
}

fn walk_particle_leaping(topo: &Topology, sigma: f64, n_steps: u32, rng: &mut impl Rng) -> Option<u32> {
    let mut pos = Point3::ORIGIN;
    let mut side = Side::Tx;
    let mut step = 0u32;
    let unit = LEAP_Z * 3f64.sqrt() * sigma;
    while step < n_steps {
        let reach = topo.clearance(pos, side) / unit;
        let n = if reach >= 1.5 {
            ((reach * reach) as u64).min((n_steps - step) as u64) as u32
        } else {
            1
        };
        if n >= 2 {
            pos = topo.fold(step_particle(pos, sigma * (n as f64).sqrt(), rng), side);
            step += n;
            continue;
        }
        step += 1;
        let proposal = step_particle(pos, sigma, rng);
        let (outcome, new_side) = topo.advance(Segment::new(pos, proposal), side);
        match outcome {
            StepOutcome::Absorbed(_) => return Some(step),
            StepOutcome::Free(p) | StepOutcome::Reflected(p) => {
                pos = p;
                side = new_side;
            }
        }
    }
    None
}

/// Runs the full particle simulation. Output is identical for every
/// [`Parallelism`] and worker count.
pub fn simulate_channel(topo: &Topology, proto: &SimProtocol, par: Parallelism) -> Result<HitTimeRecord> {
    proto.validate()?;
    let sigma = step_sigma(topo.diffusion(), proto.dt);
    let n_steps = proto.n_steps();
    let seed = proto.master_seed;

    let per_chunk = par.map_chunks(proto.n_particles, PARTICLE_CHUNK, |range| {
        let mut hits: Vec<u32> = range
            .filter_map(|i| {
                let mut rng = rng::stream(seed, Purpose::Walk, i);
                match proto.kernel {
                    Kernel::Stepwise => walk_particle(topo, sigma, n_steps, &mut rng),
                    Kernel::Leaping => walk_particle_leaping(topo, sigma, n_steps, &mut rng),
                }
            })
            .collect();
        hits.sort_unstable();
        hits
    });
    let hit_steps = merge_sorted(per_chunk);
    Ok(HitTimeRecord {
        topology: *topo,
        protocol: *proto,
        hit_steps,
    })
}

/// k-way merge of sorted runs.
fn merge_sorted(runs: Vec<Vec<u32>>) -> Vec<u32> {
    use std::cmp::Reverse;
    use std::collections::BinaryHeap;

    let total = runs.iter().map(Vec::len).sum();
    let mut out = Vec::with_capacity(total);
    let mut heap: BinaryHeap<Reverse<(u32, usize, usize)>> = runs
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.is_empty())
        .map(|(i, r)| Reverse((r[0], i, 0)))
        .collect();
    while let Some(Reverse((v, run, pos))) = heap.pop() {
        out.push(v);
        if let Some(&next) = runs[run].get(pos + 1) {
            heap.push(Reverse((next, run, pos + 1)));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SurvivalSummary {
    pub absorbed_fraction: f64,
    /// `None` when nothing was absorbed.
    pub mean_hit_time: Option<f64>,
    pub median_hit_time: Option<f64>,
}

pub fn survival_summary(rec: &HitTimeRecord) -> SurvivalSummary {
    let n = rec.n_absorbed();
    let absorbed_fraction = n as f64 / rec.n_emitted() as f64;
    if n == 0 {
        return SurvivalSummary {
            absorbed_fraction,
            mean_hit_time: None,
            median_hit_time: None,
        };
    }
    let dt = rec.protocol.dt;
    let steps = &rec.hit_steps;
    let mean = steps.iter().map(|&s| s as f64).sum::<f64>() / n as f64 * dt;
    let median = if n % 2 == 1 {
        steps[n / 2] as f64 * dt
    } else {
        (steps[n / 2 - 1] as f64 + steps[n / 2] as f64) / 2.0 * dt
    };
    SurvivalSummary {
        absorbed_fraction,
        mean_hit_time: Some(mean),
        median_hit_time: Some(median),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ApertureSpec, TopologySpec};
    use approx::assert_relative_eq;

    fn free() -> Topology {
        Topology::new(TopologySpec::free_space_default()).unwrap()
    }

    fn small(n: u64) -> SimProtocol {
        SimProtocol {
            n_particles: n,
            dt: 1e-3,
            t_total: 2.0,
            master_seed: 7,
            kernel: Kernel::Stepwise,
        }
    }

    #[test]
    fn step_sigma_matches_closed_form() {
        // sqrt(2 * 79.4 * 1e-4) = 0.12601587...
        assert_relative_eq!(step_sigma(79.4, 1e-4), 0.126_015_872_015_745_3, epsilon = 1e-12);
        assert!(step_sigma(79.4, 1e-16) < 1e-6);
    }

    #[test]
    fn step_moments() {
        let sigma = step_sigma(79.4, 1e-4);
        let n = 1_000_000;
        let mut rng = rng::stream(3, Purpose::Walk, 0);
        let (mut s, mut s2) = ([0.0f64; 3], [0.0f64; 3]);
        for _ in 0..n {
            let p = step_particle(Point3::ORIGIN, sigma, &mut rng);
            for (k, v) in [p.x, p.y, p.z].into_iter().enumerate() {
                s[k] += v;
                s2[k] += v * v;
            }
        }
        for k in 0..3 {
            let mean = s[k] / n as f64;
            let var = s2[k] / n as f64 - mean * mean;
            assert!(mean.abs() < 4.0 * sigma / (n as f64).sqrt(), "axis {k} mean {mean}");
            assert!((var / (sigma * sigma) - 1.0).abs() < 0.01, "axis {k} var {var}");
        }
    }

    #[test]
    fn protocol_validation() {
        assert!(SimProtocol::default().validate().is_ok());
        assert_eq!(SimProtocol::default().n_steps(), 100_000);
        assert!(SimProtocol { n_particles: 0, ..small(1) }.validate().is_err());
        assert!(SimProtocol { dt: 3.0, ..small(1) }.validate().is_err());
        assert!(SimProtocol { dt: -1.0, ..small(1) }.validate().is_err());
    }

    #[test]
    fn closed_plane_blocks_everything() {
        let topo = Topology::new(
            TopologySpec::free_space_default().with_plane(ApertureSpec::concentric(3.0, 0.0)),
        )
        .unwrap();
        let rec = simulate_channel(&topo, &small(500), Parallelism::Rayon).unwrap();
        assert_eq!(rec.n_absorbed(), 0);
        // Same particles without the plane do reach the receiver.
        let rec = simulate_channel(&topo.without_plane(), &small(500), Parallelism::Rayon).unwrap();
        assert!(rec.n_absorbed() > 0);
    }

    #[test]
    fn record_invariants_and_determinism() {
        let a = simulate_channel(&free(), &small(2000), Parallelism::Sequential).unwrap();
        let b = crate::par::with_workers(4, |par| simulate_channel(&free(), &small(2000), par)).unwrap();
        assert_eq!(a, b);
        assert!(a.hit_steps().windows(2).all(|w| w[0] <= w[1]));
        assert!(a.times().all(|t| t > 0.0 && t <= 2.0 + 1e-12));
        assert!(a.n_absorbed() as u64 <= a.n_emitted());
        let c = simulate_channel(&free(), &SimProtocol { master_seed: 8, ..small(2000) }, Parallelism::Sequential).unwrap();
        assert_ne!(a, c);
    }

    /// Two-sample Kolmogorov-Smirnov distance between hit-step
    /// distributions, with survivors treated as hits at infinity.
    fn ks_distance(a: &HitTimeRecord, b: &HitTimeRecord) -> f64 {
        let (na, nb) = (a.n_emitted() as f64, b.n_emitted() as f64);
        let mut steps: Vec<u32> = a.hit_steps().iter().chain(b.hit_steps()).copied().collect();
        steps.dedup();
        steps
            .iter()
            .map(|&s| {
                let fa = a.hit_steps().partition_point(|&x| x <= s) as f64 / na;
                let fb = b.hit_steps().partition_point(|&x| x <= s) as f64 / nb;
                (fa - fb).abs()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn leaping_matches_stepwise_in_distribution() {
        let n = 20_000;
        let stepwise = SimProtocol { n_particles: n, ..small(n) };
        let leaping = SimProtocol {
            kernel: Kernel::Leaping,
            master_seed: 99,
            ..stepwise
        };
        let tilted = ApertureSpec {
            r_off: 1.0,
            theta: 0.4,
            ..ApertureSpec::concentric(2.0, 3.0)
        };
        for spec in [
            TopologySpec::free_space_default(),
            TopologySpec::free_space_default().with_plane(ApertureSpec::concentric(3.0, 2.4)),
            TopologySpec::free_space_default().with_plane(tilted),
        ] {
            let topo = Topology::new(spec).unwrap();
            let a = simulate_channel(&topo, &stepwise, Parallelism::Rayon).unwrap();
            let b = simulate_channel(&topo, &leaping, Parallelism::Rayon).unwrap();
            // KS critical value at alpha = 0.001 for two samples of size n.
            let crit = 1.95 * (2.0 / n as f64).sqrt();
            let ks = ks_distance(&a, &b);
            assert!(ks < crit, "{spec:?}: KS {ks:.4} >= {crit:.4}");
        }
    }

    #[test]
    fn leaping_respects_closed_plane() {
        let topo = Topology::new(
            TopologySpec::free_space_default().with_plane(ApertureSpec::concentric(3.0, 0.0)),
        )
        .unwrap();
        let proto = SimProtocol {
            kernel: Kernel::Leaping,
            ..small(2000)
        };
        assert_eq!(simulate_channel(&topo, &proto, Parallelism::Rayon).unwrap().n_absorbed(), 0);
    }

    #[test]
    fn summary_arithmetic() {
        let proto = SimProtocol {
            n_particles: 10,
            dt: 0.1,
            t_total: 1.0,
            master_seed: 0,
            kernel: Kernel::Stepwise,
        };
        let rec = HitTimeRecord::from_steps(free(), proto, vec![3, 1, 2]).unwrap();
        let s = survival_summary(&rec);
        assert_relative_eq!(s.absorbed_fraction, 0.3);
        assert_relative_eq!(s.mean_hit_time.unwrap(), 0.2, epsilon = 1e-12);
        assert_relative_eq!(s.median_hit_time.unwrap(), 0.2, epsilon = 1e-12);

        let empty = HitTimeRecord::from_steps(free(), proto, vec![]).unwrap();
        let s = survival_summary(&empty);
        assert_eq!(s.absorbed_fraction, 0.0);
        assert!(s.mean_hit_time.is_none() && s.median_hit_time.is_none());
    }

    #[test]
    fn from_steps_rejects_out_of_range() {
        let proto = SimProtocol {
            n_particles: 2,
            dt: 0.1,
            t_total: 1.0,
            master_seed: 0,
            kernel: Kernel::Stepwise,
        };
        assert!(HitTimeRecord::from_steps(free(), proto, vec![0]).is_err());
        assert!(HitTimeRecord::from_steps(free(), proto, vec![11]).is_err());
        assert!(HitTimeRecord::from_steps(free(), proto, vec![1, 2, 3]).is_err());
    }

    #[test]
    fn merge_keeps_order() {
        let merged = merge_sorted(vec![vec![1, 4, 9], vec![], vec![2, 2, 10], vec![0]]);
        assert_eq!(merged, vec![0, 1, 2, 2, 4, 9, 10]);
    }
}
