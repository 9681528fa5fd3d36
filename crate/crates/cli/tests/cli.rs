use std::path::Path;
use std::process::Command;

use proptest::prelude::*;
use vramsim_cli::config::{parse_size, Config, ConfigError};

fn vramsim(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_vramsim")).args(args).output().unwrap()
}

fn read(dir: &Path, f: &str) -> Vec<u8> {
    std::fs::read(dir.join(f)).unwrap_or_else(|e| panic!("{f}: {e}"))
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&read(dir, "report.json")).unwrap()
}

#[test]
fn unknown_keys_are_rejected_everywhere() {
    let mut c = Config::default();
    assert_eq!(c.set("capacity", "4G"), Ok(()));
    assert_eq!(c.set("race-window", "0.1"), Ok(()));
    assert_eq!(c.raw("race_window"), "0.1");
    assert!(matches!(c.set("nonsense", "1"), Err(ConfigError::UnknownKey(_))));
    assert!(matches!(
        c.merge_text("seed = 3\n# comment\n\nbogus = 1\n"),
        Err(ConfigError::UnknownKey(k)) if k == "bogus"
    ));
    assert!(matches!(c.merge_text("seed 3"), Err(ConfigError::Syntax { line: 1, .. })));
    let args: Vec<String> = ["--seed", "9", "--race-window", "--victim-fraction=0.2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    c.merge_args(&args).unwrap();
    assert_eq!((c.raw("seed"), c.raw("race_window"), c.raw("victim_fraction")), ("9", "0.05", "0.2"));
    assert!(matches!(c.merge_args(&["--seed".into()]), Err(ConfigError::MissingValue(_))));
    assert!(matches!(c.merge_args(&["stray".into()]), Err(ConfigError::Stray(_))));
}

#[test]
fn typed_values_are_validated() {
    let mut c = Config::default();
    assert_eq!(c.size("capacity"), Ok(48 << 30));
    assert_eq!(c.size("fcn_flush"), Ok(0xdead_0000_dead_0000));
    c.set("victim_fraction", "1.5").unwrap();
    assert!(matches!(c.fraction("victim_fraction"), Err(ConfigError::Value { .. })));
    c.set("banks", "0").unwrap();
    assert!(c.positive::<u32>("banks").is_err());
    assert!(parse_size("12Q").is_err());
    assert!(parse_size("99999999999T").is_err());
}

proptest! {
    #[test]
    fn sizes_parse_with_suffixes(n in 0u64..(1 << 20), s in 0usize..5) {
        let (suffix, shift) = [("", 0), ("K", 10), ("M", 20), ("g", 30), ("T", 40)][s];
        prop_assert_eq!(parse_size(&format!("{n}{suffix}")), Ok(n << shift));
        prop_assert_eq!(parse_size(&format!("{:#x}", n)), Ok(n));
    }
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(vramsim(&["run", "no-such-scenario"]).status.code(), Some(2));
    let out = tempfile::tempdir().unwrap();
    let o = out.path().to_str().unwrap();
    let r = vramsim(&["run", "key-race", "--out", o, "--mystery", "1"]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("mystery"));
    let cfg = out.path().join("bad.cfg");
    std::fs::write(&cfg, "seed = 1\ncolour = blue\n").unwrap();
    let r = vramsim(&["run", "key-race", "--out", o, "--config", cfg.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
    let r = vramsim(&["run", "key-race", "--out", o, "--race-candidates", "0"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn failed_verification_exits_one() {
    let out = tempfile::tempdir().unwrap();
    let r = vramsim(&["run", "code-tamper", "--out", out.path().to_str().unwrap(), "--code-budget", "10"]);
    assert_eq!(r.status.code(), Some(1));
    let rep = report(out.path());
    assert_eq!(rep["verified"], false);
    assert!(rep["trials"][0]["checks"][0]["detail"].as_str().unwrap().contains("budget"));
}

#[test]
fn eq1_trace_spikes_every_508_after_420() {
    let out = tempfile::tempdir().unwrap();
    let r = vramsim(&["run", "eq1-trace", "--out", out.path().to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let mut rdr = csv::Reader::from_path(out.path().join("eq1.csv")).unwrap();
    let spikes: Vec<usize> = rdr
        .records()
        .map(|r| r.unwrap())
        .filter(|r| &r[2] == "1")
        .map(|r| r[0].parse().unwrap())
        .collect();
    let want: Vec<usize> = (0..=10).map(|k| 420 + 508 * k).collect();
    assert_eq!(spikes, want);
    let lat = String::from_utf8(read(out.path(), "latency.csv")).unwrap();
    assert!(lat.starts_with("tick,ctx,op,latency\n"));
    let first = String::from_utf8(read(out.path(), "events.jsonl")).unwrap();
    let ev: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    for k in ["tick", "event", "ctx", "frame", "detail"] {
        assert!(ev.get(k).is_some(), "event record lacks {k}");
    }
}

#[test]
fn same_config_and_seed_give_identical_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let r = vramsim(&[
            "run",
            "e2e-attack",
            "--seed",
            "7",
            "--out",
            d.path().to_str().unwrap(),
            "--capacity",
            "24G",
            "--verify-frames",
            "100",
        ]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    for f in ["report.json", "latency.csv", "events.jsonl", "transcript.json"] {
        assert!(read(a.path(), f) == read(b.path(), f), "{f} differs");
    }
    let rep = report(a.path());
    assert_eq!(rep["config"]["seed"], "7");
    assert_eq!(rep["config"]["capacity"], "24G");
    assert!(rep["config"].get("out").is_none());
}

#[test]
fn host_privesc_reports_root_and_stable_kernel() {
    let out = tempfile::tempdir().unwrap();
    let r = vramsim(&["run", "host-privesc", "--out", out.path().to_str().unwrap(), "--capacity", "24G", "--seed", "5"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let p: serde_json::Value = serde_json::from_slice(&read(out.path(), "privesc.json")).unwrap();
    assert_eq!(p["euid_before"], 1000);
    assert_eq!(p["euid_after"], 0);
    assert_eq!(p["kernel_state"], "Stable");
    assert_eq!(p["driver_state"], "Crashed");
}

#[test]
fn trials_fan_out_to_consecutive_seeds() {
    let out = tempfile::tempdir().unwrap();
    let o = out.path().to_str().unwrap();
    let r = vramsim(&["run", "code-tamper", "--out", o, "--trials", "4", "--jobs", "2", "--seed", "10"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let rep = report(out.path());
    let seeds: Vec<u64> = rep["trials"].as_array().unwrap().iter().map(|t| t["seed"].as_u64().unwrap()).collect();
    assert_eq!(seeds, vec![10, 11, 12, 13]);
    assert_eq!(rep["passed_trials"], 4);
}

#[test]
fn fingerprint_references_roundtrip_through_a_file() {
    let out = tempfile::tempdir().unwrap();
    let o = out.path().to_str().unwrap();
    assert!(vramsim(&["run", "fingerprint", "--out", o]).status.success());
    let refs = out.path().join("references.json");
    let again = tempfile::tempdir().unwrap();
    let r = vramsim(&[
        "run",
        "fingerprint",
        "--out",
        again.path().to_str().unwrap(),
        "--fp-references",
        refs.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(report(again.path())["trials"][0]["summary"]["top1"], 1.0);
}

#[test]
fn custom_fault_profile_and_code_image_load() {
    let out = tempfile::tempdir().unwrap();
    let o = out.path().to_str().unwrap();
    let r = vramsim(&["run", "code-tamper", "--out", o, "--write-image", "true", "--code-pages", "4", "--code-kernels", "24", "--code-branches", "900"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let img = out.path().join("code.bin");
    assert_eq!(std::fs::metadata(&img).unwrap().len(), 4 * 2 * 1024 * 1024);
    let again = tempfile::tempdir().unwrap();
    let r = vramsim(&["run", "code-tamper", "--out", again.path().to_str().unwrap(), "--code-image", img.to_str().unwrap()]);
    assert!(r.status.success());

    let prof = out.path().join("p.csv");
    std::fs::write(&prof, "0,1,2,3,4\n").unwrap();
    let r = vramsim(&["run", "massage-demo", "--out", o, "--fault-profile", prof.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2), "direction 4 is not a flip direction");
}
