use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use tempfile::TempDir;

fn apmc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_apmc"))
        .current_dir(dir)
        .env("APMC_CACHE_DIR", dir.join("cache"))
        .args(args)
        .output()
        .expect("failed to launch apmc")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

const SMALL_PROTOCOL: &str = r#""protocol": {"n_particles": 600, "dt": 1e-3, "t_total": 4.0, "master_seed": 5}"#;

fn sweep_config(dir: &Path) -> PathBuf {
    write(
        dir,
        "sweep.json",
        &format!(
            r#"{{
  "topology": {{"d": 5, "r_r": 5, "D": 79.4, "plane": {{"d_a": 3, "r_a": 2}}}},
  {SMALL_PROTOCOL},
  "link": {{"m": 500, "t_s": 0.2, "n_bits": 20000}},
  "axes": [{{"param": "r_a", "values": [1.0, 2.4, 4.0]}}],
  "include_benchmark": true
}}"#
        ),
    )
}

#[test]
fn sweep_csv_is_identical_for_1_and_8_workers() {
    let dir = TempDir::new().unwrap();
    let cfg = sweep_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    ok(&apmc(dir.path(), &["--workers", "1", "sweep", cfg, "--out", "w1.csv"]));
    // Second run without the cache recomputes every channel.
    ok(&apmc(dir.path(), &["--workers", "8", "--no-cache", "sweep", cfg, "--out", "w8.csv"]));
    // Third run reads every channel from the cache.
    ok(&apmc(dir.path(), &["--workers", "8", "sweep", cfg, "--out", "w8c.csv"]));
    let a = fs::read(dir.path().join("w1.csv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("w8.csv")).unwrap());
    assert_eq!(a, fs::read(dir.path().join("w8c.csv")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("cell,benchmark,r_a_um,status,"));
    assert_eq!(text.lines().count(), 1 + 3 + 1);

    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("w8c.csv.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "sweep");
    assert_eq!(manifest["seeds"]["master_seed"], 5);
    assert_eq!(manifest["config"]["link"]["seed"], 1, "defaults are resolved");
    assert!(manifest["details"]["channels"].as_array().unwrap().iter().all(|c| c["cache"] == "hit"));
}

#[test]
fn characterize_is_deterministic_across_workers() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "free.json",
        &format!(r#"{{"topology": {{"d": 5, "r_r": 5, "D": 79.4}}, {SMALL_PROTOCOL}}}"#),
    );
    let cfg = cfg.to_str().unwrap();
    ok(&apmc(dir.path(), &["--workers", "1", "--no-cache", "characterize", cfg, "--out", "a.csv"]));
    ok(&apmc(dir.path(), &["--workers", "8", "--no-cache", "characterize", cfg, "--out", "b.csv"]));
    let a = fs::read_to_string(dir.path().join("a.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(dir.path().join("b.csv")).unwrap());
    assert!(a.starts_with("t_s,symbol_boundary,f_hit_empirical,f_hit_analytic\n"));
    assert!(dir.path().join("a.csv.manifest.json").is_file());
}

#[test]
fn closed_aperture_gives_all_zero_cdf() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "closed.json",
        &format!(r#"{{"topology": {{"d": 5, "r_r": 5, "D": 79.4, "plane": {{"d_a": 3, "r_a": 0}}}}, {SMALL_PROTOCOL}}}"#),
    );
    let csv = ok(&apmc(dir.path(), &["characterize", cfg.to_str().unwrap()]));
    let mut rows = 0;
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[2].parse::<f64>().unwrap(), 0.0, "{line}");
        assert_eq!(cols[3], "", "no analytic column with a plane");
        rows += 1;
    }
    assert!(rows > 100);
}

#[test]
fn perfect_channel_fixture_has_no_errors() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "ideal.json",
        r#"{"topology": {"d": 5, "r_r": 5, "D": 79.4},
            "link": {"m": 100, "t_s": 0.2, "n_bits": 100000},
            "channel": {"source": "given", "h": [1.0, 0.0, 0.0, 0.0]}}"#,
    );
    let csv = ok(&apmc(dir.path(), &["ber", cfg.to_str().unwrap()]));
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[4], "0", "errors");
    assert_eq!(row[6], "0", "ber");
    assert_eq!(row[9], "no_errors");
}

#[test]
fn tiny_ber_run_is_fast_and_flags_wide_ci() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "tiny.json",
        r#"{"topology": {"d": 5, "r_r": 5, "D": 79.4},
            "link": {"m": 1500, "t_s": 0.2, "n_bits": 100, "threshold": {"policy": "fixed", "tau": 335}},
            "channel": {"source": "analytic"}}"#,
    );
    let t0 = Instant::now();
    let csv = ok(&apmc(dir.path(), &["ber", cfg.to_str().unwrap()]));
    assert!(t0.elapsed().as_secs_f64() < 1.0, "took {:?}", t0.elapsed());
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[5], "100");
    assert!(row[9] == "few_errors" || row[9] == "no_errors", "{row:?}");
}

#[test]
fn sinar_and_coefficients_commands() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "analytic.json",
        r#"{"topology": {"d": 5, "r_r": 5, "D": 79.4},
            "link": {"m": 100, "t_s": 0.2},
            "channel": {"source": "analytic"},
            "m_values": [100, 100000000]}"#,
    );
    let cfg = cfg.to_str().unwrap();
    let csv = ok(&apmc(dir.path(), &["coefficients", cfg]));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "k,t_start_s,t_end_s,h_k");
    assert_eq!(lines.len(), 51);
    assert!(lines[1].starts_with("1,0,0.2,0.18748"));

    let csv = ok(&apmc(dir.path(), &["sinar", cfg]));
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0][1] < rows[1][1] && rows[1][1] < rows[1][2]);

    // --set reaches nested fields
    let csv = ok(&apmc(dir.path(), &["sinar", cfg, "--set", "m_values=[7]"]));
    assert!(csv.lines().nth(1).unwrap().starts_with("7,"));
}

#[test]
fn dry_run_forecasts_without_running() {
    let dir = TempDir::new().unwrap();
    let cfg = sweep_config(dir.path());
    let out = ok(&apmc(dir.path(), &["sweep", cfg.to_str().unwrap(), "--dry-run"]));
    assert!(out.contains("4 cells (1 benchmark rows), 0 invalid, 4 channels to characterize, 0 already cached"), "{out}");
    let listed = ok(&apmc(dir.path(), &["cache", "list"]));
    assert_eq!(listed.lines().count(), 1, "header only");
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = TempDir::new().unwrap();
    let bad = write(dir.path(), "bad.json", "{\n  \"topology\": {\"d\": 5, \"r_r\": 5, \"D\": 79.4},\n  \"nonsense\": true\n}\n");
    let out = apmc(dir.path(), &["ber", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    let geometry = write(
        dir.path(),
        "geom.json",
        r#"{"topology": {"d": 5, "r_r": 5, "D": 79.4, "plane": {"d_a": 6, "r_a": 1}}, "link": {"m": 10, "t_s": 0.2}}"#,
    );
    let out = apmc(dir.path(), &["ber", geometry.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("d_a"));

    assert_eq!(apmc(dir.path(), &["ber", "missing.json"]).status.code(), Some(2));
    assert_eq!(apmc(dir.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn cache_list_purge_verify() {
    let dir = TempDir::new().unwrap();
    fs::create_dir_all(dir.path().join("cache")).unwrap();
    let listed = ok(&apmc(dir.path(), &["cache", "list"]));
    assert_eq!(listed.lines().count(), 1);

    let cfg = sweep_config(dir.path());
    ok(&apmc(dir.path(), &["sweep", cfg.to_str().unwrap(), "--out", "s.csv"]));
    let listed = ok(&apmc(dir.path(), &["cache", "list"]));
    assert_eq!(listed.lines().count(), 1 + 4);

    let purged = ok(&apmc(dir.path(), &["cache", "purge", "--where", "r_a=2.4"]));
    assert_eq!(purged.lines().count(), 1);
    let listed = ok(&apmc(dir.path(), &["cache", "list"]));
    assert_eq!(listed.lines().count(), 1 + 3);
    assert!(!listed.contains(",2.4,"));

    let records: Vec<PathBuf> = fs::read_dir(dir.path().join("cache/records"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(records.len(), 3);
    let victim = &records[0];
    let mut bytes = fs::read(victim).unwrap();
    let mid = bytes.len() - 40;
    bytes[mid] ^= 0x01;
    fs::write(victim, bytes).unwrap();
    let out = apmc(dir.path(), &["cache", "verify"]);
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stdout);
    let name = victim.file_name().unwrap().to_str().unwrap();
    assert!(text.lines().any(|l| l.starts_with("CORRUPT") && l.contains(name)), "{text}");

    ok(&apmc(dir.path(), &["cache", "purge", "--all"]));
    assert_eq!(ok(&apmc(dir.path(), &["cache", "list"])).lines().count(), 1);
}
