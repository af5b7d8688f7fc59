//! The `apmc` command-line tool.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::channel::cache::{write_atomic, CacheKey, ChannelCache, ManifestEntry, VerifyStatus, CACHE_DIR_ENV};
use crate::channel::{cdf_curve, write_cdf_csv, ChannelResponse};
use crate::error::{Error, Result};
use crate::geometry::{Topology, TopologySpec};
use crate::link::{run_ber, LinkConfig};
use crate::metrics::{sinar, sir};
use crate::par::{with_workers, Parallelism};
use crate::sweep::{cell_response, csv_error, obtain_record, run_sweep, ChannelMode, SweepSpec};
use crate::walker::{survival_summary, SimProtocol};

/// Version plus `git describe` of the source tree when available.
pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("APMC_GIT_DESCRIBE"), ")");

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "apmc", version = VERSION, about = "Apertured-plane molecular communication simulator")]
pub struct Cli {
    /// Worker threads; 0 uses every core, 1 runs sequentially.
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,

    /// Channel cache directory.
    #[arg(long, global = true, env = CACHE_DIR_ENV, default_value = ".apmc-cache")]
    pub cache_dir: PathBuf,

    /// Simulate without reading or writing the cache.
    #[arg(long, global = true)]
    pub no_cache: bool,

    /// More logging (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON config file.
    pub config: PathBuf,

    /// Output file; stdout when omitted (no manifest is written then).
    #[arg(short, long)]
    pub out: Option<PathBuf>,

    /// Override a config field, e.g. `--set link.m=500` or
    /// `--set topology.plane.r_a=2.0`. Values are parsed as JSON when
    /// possible, otherwise taken as strings.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a channel and export its hitting-time CDF.
    Characterize(RunArgs),
    /// Export the channel coefficients h_k.
    Coefficients(RunArgs),
    /// Estimate the bit error rate of one link.
    Ber(RunArgs),
    /// SINAR and SIR for one or more molecule counts.
    Sinar(RunArgs),
    /// Run a parameter sweep.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Validate and report the grid without running it.
        #[arg(long)]
        dry_run: bool,
    },
    /// Inspect or maintain the channel cache.
    #[command(subcommand)]
    Cache(CacheCommand),
}

#[derive(Debug, Subcommand)]
pub enum CacheCommand {
    /// List cached channels.
    List,
    /// Remove cached channels by key or parameter filter.
    Purge {
        /// Cache key (repeatable).
        #[arg(long)]
        key: Vec<String>,
        /// Parameter filter such as `r_a=2.4` or `plane=none` (repeatable,
        /// all must match).
        #[arg(long = "where", value_name = "NAME=VALUE")]
        filters: Vec<String>,
        /// Remove everything.
        #[arg(long)]
        all: bool,
    },
    /// Re-check every record against its checksum.
    Verify,
}

/// Config for the single-link commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub topology: TopologySpec,
    #[serde(default)]
    pub protocol: SimProtocol,
    #[serde(default)]
    pub link: Option<LinkConfig>,
    #[serde(default)]
    pub channel: ChannelMode,
    /// Fine sampling step of `characterize` output (s).
    #[serde(default = "RunConfig::default_fine_step")]
    pub fine_step: f64,
    /// Molecule counts for `sinar`; defaults to `link.m`.
    #[serde(default)]
    pub m_values: Vec<u64>,
}

impl RunConfig {
    fn default_fine_step() -> f64 {
        0.01
    }

    fn link(&self) -> Result<LinkConfig> {
        self.link
            .ok_or_else(|| Error::InvalidLink("this command needs a \"link\" section".into()))
    }
}

/// Everything needed to reproduce one run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: &'static str,
    pub config_path: PathBuf,
    pub config: Value,
    pub seeds: Value,
    pub workers: usize,
    pub cache_dir: Option<PathBuf>,
    pub started: String,
    pub finished: String,
    pub seconds: f64,
    pub outputs: Vec<PathBuf>,
    pub details: Value,
}

/// Sets `path` (dot-separated, numeric segments index arrays) to `raw`.
pub fn apply_override(config: &mut Value, assignment: &str) -> Result<()> {
    let bad = |reason: String| Error::Config {
        path: PathBuf::from("--set"),
        reason,
    };
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| bad(format!("expected PATH=VALUE, got {assignment:?}")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = config;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| json!({}))
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| bad(format!("{path}: {part:?} is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| bad(format!("{path}: index {idx} out of range ({len} items)")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(bad(format!("{path}: {part:?} is not inside an object or array"))),
        };
    }
    Err(bad("empty override path".into()))
}

/// Reads a JSON config, applies overrides and deserializes it, reporting
/// syntax and schema errors with line and column. Also returns the
/// resolved config, defaults included.
pub fn load_config<T: for<'de> Deserialize<'de> + Serialize>(path: &Path, overrides: &[String]) -> Result<(T, Value)> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let located = |e: serde_json::Error| {
        let (line, column) = (e.line(), e.column());
        let msg = e.to_string();
        let msg = msg.trim_end_matches(&format!(" at line {line} column {column}"));
        Error::Config {
            path: path.to_path_buf(),
            reason: if line == 0 { msg.to_string() } else { format!("line {line}, column {column}: {msg}") },
        }
    };
    let mut value: Value = serde_json::from_str(&text).map_err(located)?;
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let parsed = if overrides.is_empty() {
        serde_json::from_str(&text).map_err(located)?
    } else {
        serde_json::from_value(value.clone()).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            reason: format!("after --set overrides: {e}"),
        })?
    };
    let resolved = serde_json::to_value(&parsed)?;
    Ok((parsed, resolved))
}

/// `<out>.manifest.json`
pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(OsString::from).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn now() -> String {
    jiff::Timestamp::now().to_string()
}

struct Context {
    workers: usize,
    cache: Option<ChannelCache>,
    argv: Vec<String>,
    started: String,
    clock: Instant,
}

impl Context {
    fn cache(&self) -> Option<&ChannelCache> {
        self.cache.as_ref()
    }

    /// Writes `bytes` to `out` (or stdout) and the manifest next to it.
    #[allow(clippy::too_many_arguments)]
    fn emit(&self, command: &str, args: &RunArgs, out: Option<&Path>, config: Value, seeds: Value, details: Value, bytes: &[u8]) -> Result<()> {
        let Some(out) = out else {
            std::io::stdout().write_all(bytes)?;
            return Ok(());
        };
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        write_atomic(out, bytes)?;
        let manifest = RunManifest {
            command: command.to_string(),
            argv: self.argv.clone(),
            version: VERSION,
            config_path: args.config.clone(),
            config,
            seeds,
            workers: self.workers,
            cache_dir: self.cache.as_ref().map(|c| c.dir().to_path_buf()),
            started: self.started.clone(),
            finished: now(),
            seconds: self.clock.elapsed().as_secs_f64(),
            outputs: vec![out.to_path_buf()],
            details,
        };
        write_atomic(&manifest_path(out), &serde_json::to_vec_pretty(&manifest)?)?;
        eprintln!("wrote {}", out.display());
        Ok(())
    }
}

fn protocol_seeds(cfg: &RunConfig) -> Value {
    json!({
        "master_seed": cfg.protocol.master_seed,
        "link_seed": cfg.link.map(|l| l.seed),
    })
}

fn validate_run(cfg: &RunConfig) -> Result<Topology> {
    let topo = Topology::new(cfg.topology)?;
    cfg.protocol.validate()?;
    if let Some(link) = &cfg.link {
        link.validate()?;
    }
    if !(cfg.fine_step.is_finite() && cfg.fine_step > 0.0) {
        return Err(Error::InvalidProtocol(format!("fine_step must be > 0, got {}", cfg.fine_step)));
    }
    Ok(topo)
}

/// Coefficients for a single-link config, plus cache details.
fn response(ctx: &Context, cfg: &RunConfig, topo: &Topology, link: &LinkConfig, par: Parallelism) -> Result<(ChannelResponse, Value)> {
    match cfg.channel {
        ChannelMode::Simulated => {
            let (rec, status) = obtain_record(topo, &cfg.protocol, ctx.cache(), par)?;
            let resp = cell_response(&cfg.channel, topo, link, Some(&rec))?;
            Ok((resp, json!({"channel_key": rec.key(), "cache": status})))
        }
        _ => Ok((cell_response(&cfg.channel, topo, link, None)?, json!({}))),
    }
}

fn cmd_characterize(ctx: &Context, args: &RunArgs, par: Parallelism) -> Result<()> {
    let (cfg, value): (RunConfig, Value) = load_config(&args.config, &args.overrides)?;
    let topo = validate_run(&cfg)?;
    if cfg.channel != ChannelMode::Simulated {
        return Err(Error::Config {
            path: args.config.clone(),
            reason: "characterize needs a simulated channel".into(),
        });
    }
    let t_s = cfg.link.map(|l| l.t_s).unwrap_or(0.2);
    let (rec, status) = obtain_record(&topo, &cfg.protocol, ctx.cache(), par)?;
    let rows = cdf_curve(&rec, t_s, cfg.fine_step);
    let mut bytes = Vec::new();
    write_cdf_csv(&mut bytes, &rows)?;
    let summary = survival_summary(&rec);
    eprintln!(
        "absorbed {:.4} of {} molecules, channel {}",
        summary.absorbed_fraction,
        rec.n_emitted(),
        rec.key()
    );
    let details = json!({"channel_key": rec.key(), "cache": status, "summary": summary});
    ctx.emit("characterize", args, args.out.as_deref(), value, protocol_seeds(&cfg), details, &bytes)
}

fn round9(x: f64) -> f64 {
    (x * 1e9).round() / 1e9
}

fn cmd_coefficients(ctx: &Context, args: &RunArgs, par: Parallelism) -> Result<()> {
    let (cfg, value): (RunConfig, Value) = load_config(&args.config, &args.overrides)?;
    let topo = validate_run(&cfg)?;
    let link = cfg.link()?;
    let (resp, details) = response(ctx, &cfg, &topo, &link, par)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["k", "t_start_s", "t_end_s", "h_k"]).map_err(csv_error)?;
    for (i, h) in resp.h.iter().enumerate() {
        let k = i + 1;
        w.write_record([
            k.to_string(),
            round9(i as f64 * resp.t_s).to_string(),
            round9(k as f64 * resp.t_s).to_string(),
            h.to_string(),
        ])
        .map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    eprintln!("L = {} taps, sum h_k = {:.6}", resp.memory(), resp.total());
    ctx.emit("coefficients", args, args.out.as_deref(), value, protocol_seeds(&cfg), details, &bytes)
}

fn cmd_ber(ctx: &Context, args: &RunArgs, par: Parallelism) -> Result<()> {
    let (cfg, value): (RunConfig, Value) = load_config(&args.config, &args.overrides)?;
    let topo = validate_run(&cfg)?;
    let link = cfg.link()?;
    let (resp, mut details) = response(ctx, &cfg, &topo, &link, par)?;
    let (ber, choice) = run_ber(&link, &resp, par)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "m_molecules",
        "t_s_s",
        "memory_symbols",
        "tau_molecules",
        "errors",
        "n_bits",
        "ber",
        "ber_ci95_low",
        "ber_ci95_high",
        "ber_flag",
    ])
    .map_err(csv_error)?;
    w.write_record([
        link.m.to_string(),
        link.t_s.to_string(),
        resp.memory().to_string(),
        ber.tau.to_string(),
        ber.errors.to_string(),
        ber.n_bits.to_string(),
        ber.ber.to_string(),
        ber.ci95.0.to_string(),
        ber.ci95.1.to_string(),
        ber.flag().to_string(),
    ])
    .map_err(csv_error)?;
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    eprintln!(
        "BER {:.4e} (95% CI {:.3e} .. {:.3e}), tau = {}{}",
        ber.ber,
        ber.ci95.0,
        ber.ci95.1,
        ber.tau,
        if ber.wide_ci { ", fewer than 10 errors: wide CI" } else { "" }
    );
    details["threshold"] = json!(choice);
    details["ber"] = json!(ber);
    ctx.emit("ber", args, args.out.as_deref(), value, protocol_seeds(&cfg), details, &bytes)
}

fn cmd_sinar(ctx: &Context, args: &RunArgs, par: Parallelism) -> Result<()> {
    let (cfg, value): (RunConfig, Value) = load_config(&args.config, &args.overrides)?;
    let topo = validate_run(&cfg)?;
    let link = cfg.link()?;
    let (resp, details) = response(ctx, &cfg, &topo, &link, par)?;
    let ms = if cfg.m_values.is_empty() { vec![link.m] } else { cfg.m_values.clone() };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["m_molecules", "sinar", "sir"]).map_err(csv_error)?;
    for m in ms {
        w.write_record([m.to_string(), sinar(m as f64, &resp.h).to_string(), sir(&resp.h).to_string()])
            .map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    ctx.emit("sinar", args, args.out.as_deref(), value, protocol_seeds(&cfg), details, &bytes)
}

fn cmd_sweep(ctx: &Context, args: &RunArgs, dry_run: bool, par: Parallelism) -> Result<()> {
    let (spec, value): (SweepSpec, Value) = load_config(&args.config, &args.overrides)?;
    if dry_run {
        let plan = spec.plan(ctx.cache())?;
        println!(
            "{} cells ({} benchmark rows), {} invalid, {} channels to characterize, {} already cached",
            plan.n_cells + plan.n_benchmark,
            plan.n_benchmark,
            plan.n_invalid,
            plan.n_channels,
            plan.n_cached
        );
        return Ok(());
    }
    let result = run_sweep(&spec, ctx.cache(), par)?;
    let mut bytes = Vec::new();
    result.write_csv(&mut bytes)?;
    let skipped = result.cells.iter().filter(|c| c.metrics().is_none()).count();
    eprintln!("{} cells, {skipped} skipped, {:.1} s", result.cells.len(), result.seconds);
    let cells: Vec<Value> = result
        .cells
        .iter()
        .map(|c| {
            json!({
                "cell": c.index,
                "cache": c.metrics().and_then(|m| m.cache),
                "skipped": c.metrics().is_none(),
            })
        })
        .collect();
    let details = json!({
        "axes": result.axes,
        "channels": result.channels,
        "cells": cells,
        "skipped": skipped,
        "sweep_seconds": result.seconds,
    });
    let seeds = json!({"master_seed": spec.protocol.master_seed, "link_seed": spec.link.seed});
    let out = args.out.clone().or(spec.output.clone());
    ctx.emit("sweep", args, out.as_deref(), value, seeds, details, &bytes)
}

/// Parses `name=value` purge filters into a predicate over manifest entries.
fn purge_filter(filters: &[String]) -> Result<impl Fn(&ManifestEntry) -> bool> {
    let mut parsed = Vec::new();
    for f in filters {
        let bad = |reason: String| Error::Config {
            path: PathBuf::from("--where"),
            reason,
        };
        let (name, raw) = f.split_once('=').ok_or_else(|| bad(format!("expected NAME=VALUE, got {f:?}")))?;
        let value = if name == "plane" && raw == "none" {
            None
        } else {
            Some(raw.parse::<f64>().map_err(|e| bad(format!("{f}: {e}")))?)
        };
        let known = [
            "d", "r_r", "D", "plane", "d_a", "r_a", "r_off", "phi_off", "theta", "n_particles", "dt", "t_total", "master_seed",
        ];
        if !known.contains(&name) {
            return Err(bad(format!("unknown filter {name:?}; expected one of {}", known.join(", "))));
        }
        parsed.push((name.to_string(), value));
    }
    Ok(move |e: &ManifestEntry| {
        let t = &e.topology.spec();
        let ap = t.plane;
        parsed.iter().all(|(name, want)| {
            let got = match name.as_str() {
                "plane" => return want.is_none() == ap.is_none(),
                "d" => Some(t.d),
                "r_r" => Some(t.r_r),
                "D" => Some(t.diffusion),
                "d_a" => ap.map(|a| a.d_a),
                "r_a" => ap.map(|a| a.r_a),
                "r_off" => ap.map(|a| a.r_off),
                "phi_off" => ap.map(|a| a.phi_off),
                "theta" => ap.map(|a| a.theta),
                "n_particles" => Some(e.protocol.n_particles as f64),
                "dt" => Some(e.protocol.dt),
                "t_total" => Some(e.protocol.t_total),
                "master_seed" => Some(e.protocol.master_seed as f64),
                _ => None,
            };
            match (got, want) {
                (Some(g), Some(w)) => (g - w).abs() <= 1e-9 * w.abs().max(1.0),
                _ => false,
            }
        })
    })
}

fn cmd_cache(cache_dir: &Path, cmd: &CacheCommand) -> Result<i32> {
    if !cache_dir.is_dir() {
        return Err(Error::Config {
            path: cache_dir.to_path_buf(),
            reason: "cache directory does not exist".into(),
        });
    }
    let cache = ChannelCache::open(cache_dir)?;
    match cmd {
        CacheCommand::List => {
            let entries = cache.list()?;
            let mut w = csv::Writer::from_writer(std::io::stdout());
            w.write_record([
                "key", "n_hits", "n_particles", "dt_s", "t_total_s", "kernel", "d_um", "r_r_um", "D_um2_per_s", "d_a_um", "r_a_um",
                "r_off_um", "phi_off_rad", "theta_rad",
            ])
            .map_err(csv_error)?;
            for e in &entries {
                let t = e.topology.spec();
                let ap = |f: fn(&crate::geometry::ApertureSpec) -> f64| t.plane.as_ref().map(f).map(|v| v.to_string()).unwrap_or_default();
                w.write_record([
                    e.key.to_hex(),
                    e.n_hits.to_string(),
                    e.protocol.n_particles.to_string(),
                    e.protocol.dt.to_string(),
                    e.protocol.t_total.to_string(),
                    format!("{:?}", e.protocol.kernel).to_lowercase(),
                    t.d.to_string(),
                    t.r_r.to_string(),
                    t.diffusion.to_string(),
                    ap(|a| a.d_a),
                    ap(|a| a.r_a),
                    ap(|a| a.r_off),
                    ap(|a| a.phi_off),
                    ap(|a| a.theta),
                ])
                .map_err(csv_error)?;
            }
            w.flush()?;
            eprintln!("{} entries", entries.len());
            Ok(EXIT_OK)
        }
        CacheCommand::Purge { key, filters, all } => {
            if key.is_empty() && filters.is_empty() && !all {
                return Err(Error::Config {
                    path: PathBuf::from("purge"),
                    reason: "give --key, --where or --all".into(),
                });
            }
            let keys: Vec<CacheKey> = key
                .iter()
                .map(|k| {
                    k.parse().map_err(|reason| Error::Config {
                        path: PathBuf::from("--key"),
                        reason,
                    })
                })
                .collect::<Result<_>>()?;
            let matches = purge_filter(filters)?;
            let removed = cache.purge(|e| *all || keys.contains(&e.key) || (!filters.is_empty() && matches(e)))?;
            for k in &removed {
                println!("removed {k}");
            }
            eprintln!("{} entries removed", removed.len());
            Ok(EXIT_OK)
        }
        CacheCommand::Verify => {
            let reports = cache.verify()?;
            let mut bad = 0;
            for r in &reports {
                match &r.status {
                    VerifyStatus::Ok => println!("ok {}", r.path.display()),
                    VerifyStatus::Corrupt(reason) => {
                        bad += 1;
                        println!("CORRUPT {}: {reason}", r.path.display());
                    }
                }
            }
            eprintln!("{} records checked, {bad} corrupt", reports.len());
            Ok(if bad == 0 { EXIT_OK } else { EXIT_RUNTIME })
        }
    }
}

fn dispatch(cli: &Cli, argv: Vec<String>) -> Result<i32> {
    if let Command::Cache(cmd) = &cli.command {
        return cmd_cache(&cli.cache_dir, cmd);
    }
    let cache = if cli.no_cache { None } else { Some(ChannelCache::open(&cli.cache_dir)?) };
    let ctx = Context {
        workers: cli.workers,
        cache,
        argv,
        started: now(),
        clock: Instant::now(),
    };
    with_workers(cli.workers, |par| {
        match &cli.command {
            Command::Characterize(a) => cmd_characterize(&ctx, a, par),
            Command::Coefficients(a) => cmd_coefficients(&ctx, a, par),
            Command::Ber(a) => cmd_ber(&ctx, a, par),
            Command::Sinar(a) => cmd_sinar(&ctx, a, par),
            Command::Sweep { run, dry_run } => cmd_sweep(&ctx, run, *dry_run, par),
            Command::Cache(_) => unreachable!("handled above"),
        }
        .map(|()| EXIT_OK)
    })
}

/// Runs the tool and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    let argv = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(&cli, argv) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                EXIT_CONFIG
            } else {
                EXIT_RUNTIME
            }
        }
    }
}
