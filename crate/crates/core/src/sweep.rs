//! Parameter sweeps: grids of link configurations evaluated cell by cell,
//! plus optimum and crossover extraction from the results.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::channel::cache::{CacheKey, CacheStatus, ChannelCache};
use crate::channel::{coefficients_from_cdf, AnalyticChannel, ChannelResponse, ChannelSource};
use crate::error::{Error, Result};
use crate::geometry::{ApertureSpec, Topology, TopologySpec};
use crate::link::{run_ber, BerEstimate, LinkConfig, ThresholdChoice};
use crate::metrics::{sinar, sir, Ratio};
use crate::par::Parallelism;
use crate::walker::{simulate_channel, HitTimeRecord, SimProtocol};

/// A sweepable scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Param {
    RA,
    DA,
    ROff,
    PhiOff,
    /// Tilt in radians.
    Theta,
    /// Tilt in degrees.
    ThetaDeg,
    M,
    TS,
    D,
}

impl Param {
    pub fn name(self) -> &'static str {
        match self {
            Param::RA => "r_a",
            Param::DA => "d_a",
            Param::ROff => "r_off",
            Param::PhiOff => "phi_off",
            Param::Theta => "theta",
            Param::ThetaDeg => "theta_deg",
            Param::M => "m",
            Param::TS => "t_s",
            Param::D => "d",
        }
    }

    /// CSV column name with its unit.
    pub fn column(self) -> &'static str {
        match self {
            Param::RA => "r_a_um",
            Param::DA => "d_a_um",
            Param::ROff => "r_off_um",
            Param::PhiOff => "phi_off_rad",
            Param::Theta => "theta_rad",
            Param::ThetaDeg => "theta_deg",
            Param::M => "m_molecules",
            Param::TS => "t_s_s",
            Param::D => "d_um",
        }
    }

    /// Describes the plane, so meaningless for the no-plane benchmark.
    pub fn is_geometric(self) -> bool {
        matches!(
            self,
            Param::RA | Param::DA | Param::ROff | Param::PhiOff | Param::Theta | Param::ThetaDeg
        )
    }

    fn apply(self, topo: &mut TopologySpec, link: &mut LinkConfig, v: f64) -> Result<()> {
        fn plane(p: Param, topo: &mut TopologySpec) -> Result<&mut ApertureSpec> {
            topo.plane
                .as_mut()
                .ok_or_else(|| Error::InvalidSweep(format!("cannot sweep {} without a plane", p.name())))
        }
        let plane = |topo| plane(self, topo);
        match self {
            Param::RA => plane(topo)?.r_a = v,
            Param::DA => plane(topo)?.d_a = v,
            Param::ROff => plane(topo)?.r_off = v,
            Param::PhiOff => plane(topo)?.phi_off = v,
            Param::Theta => plane(topo)?.theta = v,
            Param::ThetaDeg => plane(topo)?.theta = v.to_radians(),
            Param::D => topo.d = v,
            Param::TS => link.t_s = v,
            Param::M => {
                if !(v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64) {
                    return Err(Error::InvalidSweep(format!("m must be a positive integer, got {v}")));
                }
                link.m = v as u64;
            }
        }
        Ok(())
    }
}

impl fmt::Display for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Grid values, either listed or as an inclusive `start..=stop` range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Grid {
    Values { values: Vec<f64> },
    Range { start: f64, stop: f64, step: f64 },
}

impl Grid {
    pub fn values(&self) -> Result<Vec<f64>> {
        match *self {
            Grid::Values { ref values } => Ok(values.clone()),
            Grid::Range { start, stop, step } => {
                if !(start.is_finite() && stop.is_finite() && step.is_finite() && step > 0.0 && stop >= start) {
                    return Err(Error::InvalidSweep(format!(
                        "bad range start = {start}, stop = {stop}, step = {step}"
                    )));
                }
                let n = ((stop - start) / step + 1e-6).floor() as usize + 1;
                // Rounded to 1e-9 so that 0.1 + 2 * 0.2 prints as 0.5.
                Ok((0..n)
                    .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
                    .collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub param: Param,
    #[serde(flatten)]
    pub grid: Grid,
}

/// Where each cell's channel coefficients come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChannelMode {
    /// Particle simulation through the channel cache.
    #[default]
    Simulated,
    /// Free-space closed form; only for topologies without a plane.
    Analytic,
    /// Fixed coefficients, used as-is for every cell.
    Given { h: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub topology: TopologySpec,
    pub link: LinkConfig,
    #[serde(default)]
    pub protocol: SimProtocol,
    #[serde(default)]
    pub channel: ChannelMode,
    /// Zero, one or two axes; the first is the outer loop.
    #[serde(default)]
    pub axes: Vec<Axis>,
    /// Adds no-plane reference rows, one per distinct link configuration.
    #[serde(default)]
    pub include_benchmark: bool,
    /// Result CSV; the metadata sidecar goes next to it.
    #[serde(default)]
    pub output: Option<std::path::PathBuf>,
}

/// One fully resolved cell configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CellConfig {
    pub topology: TopologySpec,
    pub link: LinkConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellMetrics {
    pub key: Option<CacheKey>,
    pub absorbed_fraction: Option<f64>,
    pub memory: usize,
    pub ber: BerEstimate,
    pub threshold: Option<ThresholdChoice>,
    pub sinar: Ratio,
    pub sir: Ratio,
    pub cache: Option<CacheStatus>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellOutcome {
    Done(CellMetrics),
    Skipped { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub index: usize,
    /// Axis values in axis order; `None` on benchmark rows for plane axes.
    pub values: Vec<Option<f64>>,
    pub benchmark: bool,
    pub config: CellConfig,
    pub outcome: CellOutcome,
}

impl CellResult {
    pub fn metrics(&self) -> Option<&CellMetrics> {
        match &self.outcome {
            CellOutcome::Done(m) => Some(m),
            CellOutcome::Skipped { .. } => None,
        }
    }

    pub fn value(&self, axis: usize) -> Option<f64> {
        self.values.get(axis).copied().flatten()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelRun {
    pub key: CacheKey,
    pub cache: Option<CacheStatus>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub spec: SweepSpec,
    pub axes: Vec<(Param, Vec<f64>)>,
    /// Grid cells in row-major order, then benchmark rows.
    pub cells: Vec<CellResult>,
    pub channels: Vec<ChannelRun>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPlan {
    pub n_cells: usize,
    pub n_benchmark: usize,
    pub n_invalid: usize,
    pub n_channels: usize,
    /// Channels already present in the cache.
    pub n_cached: usize,
}

/// Axis values, benchmark flag, and the cell's config or why it is invalid.
type PlannedCell = (Vec<Option<f64>>, bool, std::result::Result<CellConfig, String>);

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.axes.len() > 2 {
            return Err(Error::InvalidSweep(format!("at most 2 axes, got {}", self.axes.len())));
        }
        if self.axes.len() == 2 && self.axes[0].param == self.axes[1].param {
            return Err(Error::InvalidSweep(format!("axis {} given twice", self.axes[0].param)));
        }
        let has = |p: Param| self.axes.iter().any(|a| a.param == p);
        if has(Param::Theta) && has(Param::ThetaDeg) {
            return Err(Error::InvalidSweep("sweep theta or theta_deg, not both".into()));
        }
        self.protocol.validate()?;
        self.link.validate()?;
        Topology::new(self.topology)?;
        for axis in &self.axes {
            let values = axis.grid.values()?;
            if values.is_empty() {
                return Err(Error::InvalidSweep(format!("axis {} has no values", axis.param)));
            }
            if let Some(v) = values.iter().find(|v| !v.is_finite()) {
                return Err(Error::InvalidSweep(format!("axis {}: non-finite value {v}", axis.param)));
            }
            let mut topo = self.topology;
            let mut link = self.link;
            for &v in &values {
                axis.param.apply(&mut topo, &mut link, v)?;
            }
            if axis.param == Param::DA && !has(Param::D) {
                if let Some(v) = values.iter().find(|&&v| !(v > 0.0 && v < self.topology.d)) {
                    return Err(Error::InvalidSweep(format!(
                        "d_a = {v} outside (0, d = {})",
                        self.topology.d
                    )));
                }
            }
        }
        match &self.channel {
            ChannelMode::Analytic if self.topology.plane.is_some() => Err(Error::PlaneNotSupported),
            ChannelMode::Given { h } => {
                ChannelResponse::from_coefficients(self.link.t_s, h.clone(), ChannelSource::Given)?;
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn axis_values(&self) -> Result<Vec<(Param, Vec<f64>)>> {
        self.axes.iter().map(|a| Ok((a.param, a.grid.values()?))).collect()
    }

    /// Grid cells in row-major order, then benchmark rows.
    fn cells(&self) -> Result<Vec<PlannedCell>> {
        let axes = self.axis_values()?;
        let mut combos: Vec<Vec<f64>> = vec![vec![]];
        for (_, values) in &axes {
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    values.iter().map(move |&v| {
                        let mut c = c.clone();
                        c.push(v);
                        c
                    })
                })
                .collect();
        }
        let mut out = Vec::with_capacity(combos.len());
        let mut benchmarks: Vec<(Vec<Option<f64>>, CellConfig)> = Vec::new();
        for combo in combos {
            let mut topology = self.topology;
            let mut link = self.link;
            for ((param, _), &v) in axes.iter().zip(&combo) {
                param.apply(&mut topology, &mut link, v)?;
            }
            let config = Topology::new(topology)
                .map(|_| CellConfig { topology, link })
                .map_err(|e| e.to_string());
            if self.include_benchmark {
                let mut bench = CellConfig { topology, link };
                bench.topology.plane = None;
                let values: Vec<Option<f64>> = axes
                    .iter()
                    .zip(&combo)
                    .map(|((p, _), &v)| (!p.is_geometric()).then_some(v))
                    .collect();
                if !benchmarks.iter().any(|(v, _)| *v == values) {
                    benchmarks.push((values, bench));
                }
            }
            out.push((combo.into_iter().map(Some).collect(), false, config));
        }
        out.extend(benchmarks.into_iter().map(|(v, c)| (v, true, Ok(c))));
        Ok(out)
    }

    fn needs_simulation(&self) -> bool {
        self.channel == ChannelMode::Simulated
    }

    /// Unique simulated topologies in first-use order.
    fn channel_topologies(&self) -> Result<Vec<Topology>> {
        if !self.needs_simulation() {
            return Ok(Vec::new());
        }
        let mut seen = Vec::new();
        let mut topos = Vec::new();
        for (_, _, cfg) in self.cells()? {
            if let Ok(cfg) = cfg {
                let topo = Topology::new(cfg.topology)?;
                let key = CacheKey::of(&topo, &self.protocol);
                if !seen.contains(&key) {
                    seen.push(key);
                    topos.push(topo);
                }
            }
        }
        Ok(topos)
    }

    /// Counts what [`run_sweep`] would do without running anything.
    pub fn plan(&self, cache: Option<&ChannelCache>) -> Result<SweepPlan> {
        self.validate()?;
        let cells = self.cells()?;
        let topos = self.channel_topologies()?;
        let n_cached = match cache {
            Some(c) => topos.iter().filter(|t| c.contains(CacheKey::of(t, &self.protocol))).count(),
            None => 0,
        };
        Ok(SweepPlan {
            n_cells: cells.iter().filter(|c| !c.1).count(),
            n_benchmark: cells.iter().filter(|c| c.1).count(),
            n_invalid: cells.iter().filter(|c| c.2.is_err()).count(),
            n_channels: topos.len(),
            n_cached,
        })
    }
}

/// Hit-time record for one topology, through the cache when there is one.
pub fn obtain_record(
    topo: &Topology,
    proto: &SimProtocol,
    cache: Option<&ChannelCache>,
    par: Parallelism,
) -> Result<(HitTimeRecord, Option<CacheStatus>)> {
    match cache {
        Some(c) => c.get_or_simulate(topo, proto, par).map(|(r, s)| (r, Some(s))),
        None => simulate_channel(topo, proto, par).map(|r| (r, None)),
    }
}

/// Coefficients for one cell under `mode`.
pub fn cell_response(
    mode: &ChannelMode,
    topo: &Topology,
    link: &LinkConfig,
    record: Option<&HitTimeRecord>,
) -> Result<ChannelResponse> {
    let resp = match mode {
        ChannelMode::Simulated => {
            let rec = record.expect("simulated mode always has a record");
            coefficients_from_cdf(rec, link.t_s, link.memory)?
        }
        ChannelMode::Analytic => coefficients_from_cdf(&AnalyticChannel::new(topo)?, link.t_s, link.memory)?,
        ChannelMode::Given { h } => ChannelResponse::from_coefficients(link.t_s, h.clone(), ChannelSource::Given)?,
    };
    Ok(match link.memory {
        Some(l) if l < resp.memory() => resp.truncated(l),
        _ => resp,
    })
}

/// Evaluates every cell: channel (cache-aware), threshold, BER, SINAR and
/// SIR. Cells whose geometry is invalid are recorded as skipped.
pub fn run_sweep(spec: &SweepSpec, cache: Option<&ChannelCache>, par: Parallelism) -> Result<SweepResult> {
    spec.validate()?;
    let started = Instant::now();
    let cells = spec.cells()?;

    let mut records: HashMap<CacheKey, HitTimeRecord> = HashMap::new();
    let mut channels = Vec::new();
    for topo in spec.channel_topologies()? {
        let t0 = Instant::now();
        let (rec, status) = obtain_record(&topo, &spec.protocol, cache, par)?;
        let key = rec.key();
        channels.push(ChannelRun {
            key,
            cache: status,
            seconds: t0.elapsed().as_secs_f64(),
        });
        records.insert(key, rec);
    }
    let status_of: HashMap<CacheKey, Option<CacheStatus>> = channels.iter().map(|c| (c.key, c.cache)).collect();

    let mut results = Vec::with_capacity(cells.len());
    for (index, (values, benchmark, cfg)) in cells.into_iter().enumerate() {
        let (config, outcome) = match cfg {
            Err(reason) => {
                log::warn!("skipping cell {index}: {reason}");
                let mut topology = spec.topology;
                let mut link = spec.link;
                for ((p, _), v) in spec.axis_values()?.iter().zip(&values) {
                    if let Some(v) = v {
                        p.apply(&mut topology, &mut link, *v)?;
                    }
                }
                (CellConfig { topology, link }, CellOutcome::Skipped { reason })
            }
            Ok(config) => {
                let topo = Topology::new(config.topology)?;
                let key = spec.needs_simulation().then(|| CacheKey::of(&topo, &spec.protocol));
                let record = key.map(|k| &records[&k]);
                let resp = cell_response(&spec.channel, &topo, &config.link, record)?;
                let (ber, threshold) = run_ber(&config.link, &resp, par)?;
                let m = config.link.m as f64;
                let metrics = CellMetrics {
                    key,
                    absorbed_fraction: record.map(|r| r.n_absorbed() as f64 / r.n_emitted() as f64),
                    memory: resp.memory(),
                    ber,
                    threshold,
                    sinar: sinar(m, &resp.h),
                    sir: sir(&resp.h),
                    cache: key.and_then(|k| status_of[&k]),
                };
                (config, CellOutcome::Done(metrics))
            }
        };
        results.push(CellResult {
            index,
            values,
            benchmark,
            config,
            outcome,
        });
    }
    Ok(SweepResult {
        spec: spec.clone(),
        axes: spec.axis_values()?,
        cells: results,
        channels,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// [`run_sweep`] over misalignment axes, always with benchmark rows.
pub fn offset_sweep(spec: &SweepSpec, cache: Option<&ChannelCache>, par: Parallelism) -> Result<SweepResult> {
    let offsets = [Param::ROff, Param::PhiOff, Param::Theta, Param::ThetaDeg];
    if !spec.axes.iter().any(|a| offsets.contains(&a.param)) {
        return Err(Error::InvalidSweep("offset sweep needs an r_off, phi_off or theta axis".into()));
    }
    let mut spec = spec.clone();
    spec.include_benchmark = true;
    run_sweep(&spec, cache, par)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl SweepResult {
    /// One row per cell. Cache status is left out so that re-runs produce
    /// identical bytes; it is in the sidecar.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["cell", "benchmark"];
        header.extend(self.axes.iter().map(|(p, _)| p.column()));
        header.extend([
            "status",
            "absorbed_fraction",
            "memory_symbols",
            "tau_molecules",
            "errors",
            "n_bits",
            "ber",
            "ber_ci95_low",
            "ber_ci95_high",
            "ber_flag",
            "sinar",
            "sir",
            "channel_key",
            "reason",
        ]);
        out.write_record(&header).map_err(csv_error)?;
        for cell in &self.cells {
            let mut row = vec![cell.index.to_string(), (cell.benchmark as u8).to_string()];
            row.extend(cell.values.iter().map(|v| fmt_opt(*v)));
            match &cell.outcome {
                CellOutcome::Done(m) => {
                    row.extend([
                        "ok".to_string(),
                        fmt_opt(m.absorbed_fraction),
                        m.memory.to_string(),
                        m.ber.tau.to_string(),
                        m.ber.errors.to_string(),
                        m.ber.n_bits.to_string(),
                        m.ber.ber.to_string(),
                        m.ber.ci95.0.to_string(),
                        m.ber.ci95.1.to_string(),
                        m.ber.flag().to_string(),
                        m.sinar.to_string(),
                        m.sir.to_string(),
                        m.key.map(|k| k.to_hex()).unwrap_or_default(),
                        String::new(),
                    ]);
                }
                CellOutcome::Skipped { reason } => {
                    row.push("skipped".to_string());
                    row.extend(std::iter::repeat_n(String::new(), 12));
                    row.push(reason.clone());
                }
            }
            out.write_record(&row).map_err(csv_error)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Non-benchmark cells that completed.
    pub fn done(&self) -> impl Iterator<Item = (&CellResult, &CellMetrics)> {
        self.cells
            .iter()
            .filter(|c| !c.benchmark)
            .filter_map(|c| c.metrics().map(|m| (c, m)))
    }

    /// The benchmark row matching `cell`'s link parameters.
    pub fn benchmark_for(&self, cell: &CellResult) -> Option<&CellResult> {
        self.cells.iter().find(|b| {
            b.benchmark
                && b.values
                    .iter()
                    .zip(&cell.values)
                    .zip(&self.axes)
                    .all(|((bv, cv), (p, _))| p.is_geometric() || bv == cv)
        })
    }

    fn axis_index(&self, param: Param) -> Result<usize> {
        self.axes
            .iter()
            .position(|(p, _)| *p == param)
            .ok_or_else(|| Error::InvalidSweep(format!("no {param} axis in this sweep")))
    }
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    MinBer,
    MaxSinar,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Optimum {
    /// The other axis and its value, for 2-D sweeps.
    pub group: Option<(Param, f64)>,
    pub value: f64,
    /// Position on the optimized axis grid.
    pub grid_index: usize,
    pub cell: usize,
    pub ber: BerEstimate,
    pub sinar: Ratio,
    /// Some cell at least two grid steps away is statistically as good.
    pub indistinct: bool,
}

/// Grid optimum along `param`, separately for every value of the other axis
/// in a 2-D sweep. Ties go to the smaller parameter value.
pub fn optimal_aperture(result: &SweepResult, param: Param, criterion: Criterion) -> Result<Vec<Optimum>> {
    let axis = result.axis_index(param)?;
    let grid = &result.axes[axis].1;
    if grid.len() < 3 {
        return Err(Error::InvalidSweep(format!(
            "optimum search needs >= 3 {param} values, got {}",
            grid.len()
        )));
    }
    let other = (result.axes.len() == 2).then_some(1 - axis);
    let groups: Vec<Option<f64>> = match other {
        Some(o) => result.axes[o].1.iter().map(|&v| Some(v)).collect(),
        None => vec![None],
    };
    let mut out = Vec::new();
    for g in groups {
        let mut members: Vec<(usize, &CellResult, &CellMetrics)> = result
            .done()
            .filter(|(c, _)| other.is_none_or(|o| c.value(o) == g))
            .filter_map(|(c, m)| {
                let v = c.value(axis)?;
                let i = grid.iter().position(|&x| x == v)?;
                Some((i, c, m))
            })
            .collect();
        members.sort_by_key(|(i, _, _)| *i);
        let best = match criterion {
            Criterion::MinBer => members
                .iter()
                .min_by(|a, b| a.2.ber.ber.total_cmp(&b.2.ber.ber).then(a.0.cmp(&b.0))),
            Criterion::MaxSinar => members.iter().max_by(|a, b| {
                a.2.sinar
                    .partial_cmp(&b.2.sinar)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(b.0.cmp(&a.0))
            }),
        };
        let Some(&(i, cell, m)) = best else { continue };
        let indistinct = match criterion {
            Criterion::MinBer => members
                .iter()
                .any(|(j, _, o)| j.abs_diff(i) >= 2 && o.ber.overlaps(&m.ber)),
            Criterion::MaxSinar => false,
        };
        out.push(Optimum {
            group: other.zip(g).map(|(o, v)| (result.axes[o].0, v)),
            value: grid[i],
            grid_index: i,
            cell: cell.index,
            ber: m.ber,
            sinar: m.sinar,
            indistinct,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Crossover {
    /// Largest swept value before the first cell worse than the benchmark.
    pub last_below: Option<f64>,
    /// First swept value whose BER exceeds the benchmark BER.
    pub first_above: Option<f64>,
    /// Crossing of log10 BER by linear interpolation between the two.
    pub estimate: Option<f64>,
}

/// Where the apertured BER first exceeds the no-plane benchmark along a 1-D
/// sweep of `param`.
pub fn crossover(result: &SweepResult, param: Param) -> Result<Crossover> {
    let axis = result.axis_index(param)?;
    let mut rows: Vec<(f64, f64, f64)> = Vec::new();
    for (cell, m) in result.done() {
        let bench = result
            .benchmark_for(cell)
            .and_then(CellResult::metrics)
            .ok_or_else(|| Error::InvalidSweep("sweep has no benchmark rows".into()))?;
        if let Some(v) = cell.value(axis) {
            rows.push((v, m.ber.ber, bench.ber.ber));
        }
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let Some(pos) = rows.iter().position(|&(_, ber, bench)| ber > bench) else {
        return Ok(Crossover {
            last_below: rows.last().map(|r| r.0),
            first_above: None,
            estimate: None,
        });
    };
    let above = rows[pos];
    let below = pos.checked_sub(1).map(|p| rows[p]);
    let log = |x: f64| x.max(1e-300).log10();
    let estimate = below.map(|b| {
        let gap_b = log(b.1) - log(b.2);
        let gap_a = log(above.1) - log(above.2);
        let s = if gap_a > gap_b { -gap_b / (gap_a - gap_b) } else { 1.0 };
        b.0 + s.clamp(0.0, 1.0) * (above.0 - b.0)
    });
    Ok(Crossover {
        last_below: below.map(|b| b.0),
        first_above: Some(above.0),
        estimate,
    })
}
