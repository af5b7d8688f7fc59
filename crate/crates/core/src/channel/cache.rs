//! Content-addressed on-disk cache of hit-time records.
//!
//! Layout of a cache directory:
//!
//! ```text
//! <dir>/manifest.json          key -> human-readable parameters
//! <dir>/records/<key>.hits     one binary record per (topology, protocol)
//! ```
//!
//! A record file is `MAGIC`, a little-endian `u32` header length, the JSON
//! header, `n_hits` little-endian `u32` step indices, and the SHA-256 of
//! everything before it. Files are written to a temporary name and renamed
//! into place, so readers never see a partial record.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::Topology;
use crate::par::Parallelism;
use crate::walker::{simulate_channel, HitTimeRecord, SimProtocol};

const MAGIC: &[u8; 8] = b"APMCHIT1";
const MANIFEST: &str = "manifest.json";
const RECORDS: &str = "records";
const EXTENSION: &str = "hits";

/// Environment variable overriding the cache directory.
pub const CACHE_DIR_ENV: &str = "APMC_CACHE_DIR";

/// Bumped whenever the walk kernel changes in a way that alters records.
const KERNEL_VERSION: u8 = 1;

static MANIFEST_LOCK: Mutex<()> = Mutex::new(());
static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// 128-bit content key of a (topology, protocol) pair.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey([u8; 16]);

impl CacheKey {
    pub fn of(topo: &Topology, proto: &SimProtocol) -> Self {
        let mut hasher = Sha256::new();
        hasher.update([KERNEL_VERSION]);
        hasher.update(topo.canonical_bytes());
        hasher.update(proto.canonical_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 16];
        key.copy_from_slice(&digest[..16]);
        Self(key)
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CacheKey({self})")
    }
}

impl FromStr for CacheKey {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.len() != 32 || !s.is_ascii() {
            return Err(format!("cache key must be 32 hex digits, got {s:?}"));
        }
        let mut key = [0u8; 16];
        for (i, byte) in key.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|e| format!("bad cache key {s:?}: {e}"))?;
        }
        Ok(Self(key))
    }
}

impl Serialize for CacheKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for CacheKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordHeader {
    key: CacheKey,
    topology: Topology,
    protocol: SimProtocol,
    n_hits: u64,
}

/// Serializes a record to the binary format described in the module docs.
pub fn encode_record(rec: &HitTimeRecord) -> Vec<u8> {
    let header = RecordHeader {
        key: rec.key(),
        topology: *rec.topology(),
        protocol: *rec.protocol(),
        n_hits: rec.n_absorbed() as u64,
    };
    let header = serde_json::to_vec(&header).expect("record header serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + 4 * rec.n_absorbed() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for &s in rec.hit_steps() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Parses and checks a record; `path` is only used in error messages.
pub fn decode_record(bytes: &[u8], path: &Path) -> Result<HitTimeRecord> {
    let corrupt = |reason: String| Error::CorruptRecord {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("not a hit-time record".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch".into()));
    }
    let header_len = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
    let header_end = 12usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| corrupt("truncated header".into()))?;
    let header: RecordHeader =
        serde_json::from_slice(&body[12..header_end]).map_err(|e| corrupt(format!("bad header: {e}")))?;
    let payload = &body[header_end..];
    if payload.len() as u64 != header.n_hits * 4 {
        return Err(corrupt(format!(
            "expected {} hits, found {} bytes",
            header.n_hits,
            payload.len()
        )));
    }
    let steps = payload
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let rec = HitTimeRecord::from_steps(header.topology, header.protocol, steps)
        .map_err(|e| corrupt(e.to_string()))?;
    if rec.key() != header.key {
        return Err(corrupt(format!("header key {} does not match contents {}", header.key, rec.key())));
    }
    Ok(rec)
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.{}.{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out"),
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub key: CacheKey,
    pub topology: Topology,
    pub protocol: SimProtocol,
    pub n_hits: u64,
    /// Seconds since the Unix epoch.
    pub created: u64,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Manifest {
    entries: BTreeMap<String, ManifestEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheStatus {
    Hit,
    Miss,
    /// The stored record was unreadable and has been recomputed.
    Repaired,
}

#[derive(Debug, Clone, PartialEq)]
pub enum VerifyStatus {
    Ok,
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub path: PathBuf,
    pub status: VerifyStatus,
}

#[derive(Debug, Clone)]
pub struct ChannelCache {
    dir: PathBuf,
}

impl ChannelCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(dir.join(RECORDS))?;
        Ok(Self { dir })
    }

    /// `$APMC_CACHE_DIR` if set, otherwise `default`.
    pub fn from_env_or(default: impl Into<PathBuf>) -> Result<Self> {
        match std::env::var_os(CACHE_DIR_ENV) {
            Some(dir) if !dir.is_empty() => Self::open(dir),
            _ => Self::open(default),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn record_path(&self, key: CacheKey) -> PathBuf {
        self.dir.join(RECORDS).join(format!("{key}.{EXTENSION}"))
    }

    pub fn contains(&self, key: CacheKey) -> bool {
        self.record_path(key).is_file()
    }

    /// `Ok(None)` when absent; corrupt files are an error.
    pub fn load(&self, key: CacheKey) -> Result<Option<HitTimeRecord>> {
        let path = self.record_path(key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let rec = decode_record(&bytes, &path)?;
        if rec.key() != key {
            return Err(Error::CorruptRecord {
                path,
                reason: format!("file name does not match content key {}", rec.key()),
            });
        }
        Ok(Some(rec))
    }

    pub fn store(&self, rec: &HitTimeRecord) -> Result<PathBuf> {
        let key = rec.key();
        let path = self.record_path(key);
        write_atomic(&path, &encode_record(rec))?;
        let created = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        self.update_manifest(|m| {
            m.entries.insert(
                key.to_hex(),
                ManifestEntry {
                    key,
                    topology: *rec.topology(),
                    protocol: *rec.protocol(),
                    n_hits: rec.n_absorbed() as u64,
                    created,
                },
            );
        })?;
        Ok(path)
    }

    /// Cached record for `(topo, proto)`, simulating and storing it on a miss.
    pub fn get_or_simulate(
        &self,
        topo: &Topology,
        proto: &SimProtocol,
        par: Parallelism,
    ) -> Result<(HitTimeRecord, CacheStatus)> {
        let key = CacheKey::of(topo, proto);
        let status = match self.load(key) {
            Ok(Some(rec)) => return Ok((rec, CacheStatus::Hit)),
            Ok(None) => CacheStatus::Miss,
            Err(Error::CorruptRecord { path, reason }) => {
                log::warn!("recomputing corrupt cache record {}: {reason}", path.display());
                CacheStatus::Repaired
            }
            Err(e) => return Err(e),
        };
        log::info!("simulating channel {key} ({} particles)", proto.n_particles);
        let rec = simulate_channel(topo, proto, par)?;
        self.store(&rec)?;
        Ok((rec, status))
    }

    fn read_manifest(&self) -> Result<Manifest> {
        match fs::read(self.dir.join(MANIFEST)) {
            Ok(bytes) => Ok(serde_json::from_slice(&bytes).unwrap_or_else(|e| {
                log::warn!("ignoring unreadable cache manifest: {e}");
                Manifest::default()
            })),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Manifest::default()),
            Err(e) => Err(e.into()),
        }
    }

    fn update_manifest(&self, f: impl FnOnce(&mut Manifest)) -> Result<()> {
        let _guard = MANIFEST_LOCK.lock().unwrap_or_else(|e| e.into_inner());
        let mut manifest = self.read_manifest()?;
        f(&mut manifest);
        write_atomic(&self.dir.join(MANIFEST), &serde_json::to_vec_pretty(&manifest)?)
    }

    /// Manifest entries whose record file exists, in key order.
    pub fn list(&self) -> Result<Vec<ManifestEntry>> {
        Ok(self
            .read_manifest()?
            .entries
            .into_values()
            .filter(|e| self.contains(e.key))
            .collect())
    }

    /// Removes every listed entry matching `filter`; returns the removed keys.
    pub fn purge(&self, filter: impl Fn(&ManifestEntry) -> bool) -> Result<Vec<CacheKey>> {
        let doomed: Vec<CacheKey> = self.list()?.into_iter().filter(|e| filter(e)).map(|e| e.key).collect();
        for key in &doomed {
            match fs::remove_file(self.record_path(*key)) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.update_manifest(|m| {
            for key in &doomed {
                m.entries.remove(&key.to_hex());
            }
        })?;
        Ok(doomed)
    }

    /// Re-checks every record file against its checksum and file-name key,
    /// and rebuilds the manifest from the records that pass.
    pub fn verify(&self) -> Result<Vec<VerifyReport>> {
        let mut paths: Vec<PathBuf> = fs::read_dir(self.dir.join(RECORDS))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == EXTENSION))
            .collect();
        paths.sort();
        let mut reports = Vec::with_capacity(paths.len());
        let mut good = Vec::new();
        for path in paths {
            let status = match fs::read(&path)
                .map_err(Error::from)
                .and_then(|b| decode_record(&b, &path))
            {
                Ok(rec) => {
                    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
                    if stem == rec.key().to_hex() {
                        good.push(rec);
                        VerifyStatus::Ok
                    } else {
                        VerifyStatus::Corrupt(format!("content key {} does not match file name", rec.key()))
                    }
                }
                Err(Error::CorruptRecord { reason, .. }) => VerifyStatus::Corrupt(reason),
                Err(e) => VerifyStatus::Corrupt(e.to_string()),
            };
            reports.push(VerifyReport { path, status });
        }
        self.update_manifest(|m| {
            let old = std::mem::take(&mut m.entries);
            for rec in &good {
                let key = rec.key();
                let created = old.get(&key.to_hex()).map(|e| e.created).unwrap_or(0);
                m.entries.insert(
                    key.to_hex(),
                    ManifestEntry {
                        key,
                        topology: *rec.topology(),
                        protocol: *rec.protocol(),
                        n_hits: rec.n_absorbed() as u64,
                        created,
                    },
                );
            }
        })?;
        Ok(reports)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ApertureSpec, TopologySpec};

    fn topo(r_a: f64) -> Topology {
        Topology::new(TopologySpec::free_space_default().with_plane(ApertureSpec::concentric(3.0, r_a))).unwrap()
    }

    fn proto() -> SimProtocol {
        SimProtocol {
            n_particles: 300,
            dt: 1e-3,
            t_total: 1.0,
            master_seed: 11,
            ..SimProtocol::default()
        }
    }

    #[test]
    fn key_hex_roundtrip_and_sensitivity() {
        let k = CacheKey::of(&topo(2.4), &proto());
        assert_eq!(k.to_hex().parse::<CacheKey>().unwrap(), k);
        assert_ne!(k, CacheKey::of(&topo(2.6), &proto()));
        assert_ne!(k, CacheKey::of(&topo(2.4), &SimProtocol { master_seed: 12, ..proto() }));
        assert!("zz".parse::<CacheKey>().is_err());
    }

    #[test]
    fn encode_decode_and_corruption() {
        let rec = simulate_channel(&topo(2.4).without_plane(), &proto(), Parallelism::Sequential).unwrap();
        assert!(rec.n_absorbed() > 0);
        let bytes = encode_record(&rec);
        assert_eq!(decode_record(&bytes, Path::new("x")).unwrap(), rec);
        let mut flipped = bytes.clone();
        let mid = flipped.len() - 40;
        flipped[mid] ^= 0x01;
        assert!(matches!(decode_record(&flipped, Path::new("x")), Err(Error::CorruptRecord { .. })));
        assert!(decode_record(&bytes[..10], Path::new("x")).is_err());
    }

    #[test]
    fn get_or_simulate_hits_after_miss() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ChannelCache::open(dir.path()).unwrap();
        let (a, s1) = cache.get_or_simulate(&topo(2.4), &proto(), Parallelism::Sequential).unwrap();
        let (b, s2) = cache.get_or_simulate(&topo(2.4), &proto(), Parallelism::Sequential).unwrap();
        assert_eq!((s1, s2), (CacheStatus::Miss, CacheStatus::Hit));
        assert_eq!(a, b);
        let (_, s3) = cache.get_or_simulate(&topo(2.6), &proto(), Parallelism::Sequential).unwrap();
        assert_eq!(s3, CacheStatus::Miss);
        assert_eq!(cache.list().unwrap().len(), 2);

        // Cleared cache reproduces the same bytes.
        let bytes = fs::read(cache.record_path(a.key())).unwrap();
        cache.purge(|_| true).unwrap();
        assert!(cache.list().unwrap().is_empty());
        let (c, s4) = cache.get_or_simulate(&topo(2.4), &proto(), Parallelism::Rayon).unwrap();
        assert_eq!(s4, CacheStatus::Miss);
        assert_eq!(fs::read(cache.record_path(c.key())).unwrap(), bytes);
    }

    #[test]
    fn corrupt_record_is_repaired_and_reported() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ChannelCache::open(dir.path()).unwrap();
        let (rec, _) = cache.get_or_simulate(&topo(1.0), &proto(), Parallelism::Sequential).unwrap();
        let path = cache.record_path(rec.key());
        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n / 2] ^= 0xff;
        fs::write(&path, &bytes).unwrap();

        let reports = cache.verify().unwrap();
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].path, path);
        assert!(matches!(reports[0].status, VerifyStatus::Corrupt(_)));

        let (again, status) = cache.get_or_simulate(&topo(1.0), &proto(), Parallelism::Sequential).unwrap();
        assert_eq!(status, CacheStatus::Repaired);
        assert_eq!(again, rec);
        assert!(cache.verify().unwrap().iter().all(|r| r.status == VerifyStatus::Ok));
    }

    #[test]
    fn purge_by_filter() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ChannelCache::open(dir.path()).unwrap();
        for r_a in [1.0, 2.0, 3.0] {
            cache.get_or_simulate(&topo(r_a), &proto(), Parallelism::Sequential).unwrap();
        }
        let removed = cache
            .purge(|e| e.topology.plane().is_some_and(|p| p.r_a == 2.0))
            .unwrap();
        assert_eq!(removed, vec![CacheKey::of(&topo(2.0), &proto())]);
        let left: Vec<f64> = cache.list().unwrap().iter().map(|e| e.topology.plane().unwrap().r_a).collect();
        assert_eq!(left.len(), 2);
        assert!(!left.contains(&2.0));
    }
}
