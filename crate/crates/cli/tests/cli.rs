use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;
use smp_lab::artifacts::{sha256_hex, RunManifest};
use smp_lab::config::ExperimentConfig;

const SMALL_LQ: &str = r#"
scenario = "lq"
seed = 17

[grid]
n_modes = 16
n_steps = 128

[ensemble]
outer = 40
inner = 8

[spike]
base = 0.0
v = 1.0
epsilon_exponents = [2, 5]
"#;

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn smp_lab(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_smp-lab")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.toml");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn simulate_writes_a_summary_and_a_complete_manifest() {
    let dir = scratch("simulate");
    let cfg = write_config(&dir, SMALL_LQ);
    let out = dir.join("out");
    let o = smp_lab(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = RunManifest::load(&out).unwrap();
    let mut listed: Vec<&str> = m.files.iter().map(|f| f.path.as_str()).collect();
    listed.sort();
    assert_eq!(listed, ["cost.json", "csv_schema.json", "state_summary.csv"]);
    for f in &m.files {
        let bytes = std::fs::read(out.join(&f.path)).unwrap();
        assert_eq!((sha256_hex(&bytes), bytes.len() as u64), (f.sha256.clone(), f.bytes));
    }
    let summary = std::fs::read_to_string(out.join("state_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 129);
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(out.join("csv_schema.json")).unwrap()).unwrap();
    let cols: Vec<&str> = schema["tables"]["state_summary.csv"]["columns"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert_eq!(cols.join(","), summary.lines().next().unwrap());
    let cost: Value = serde_json::from_str(&std::fs::read_to_string(out.join("cost.json")).unwrap()).unwrap();
    assert_eq!(cost["schema_version"], smp_lab::artifacts::SCHEMA_VERSION);
    assert!(cost["cost"]["mean"].as_f64().unwrap() > 0.0);
}

#[test]
fn reruns_are_byte_identical_and_the_echoed_config_reproduces_them() {
    let dir = scratch("determinism");
    let cfg = write_config(&dir, SMALL_LQ);
    let run = |name: &str, threads: &str, config: &str| {
        let out = dir.join(name);
        let o = smp_lab(&[
            "rates",
            "--config",
            config,
            "--threads",
            threads,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(
            o.status.code().is_some_and(|c| c <= 1),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
        RunManifest::load(&out).unwrap()
    };
    let a = run("a", "1", &cfg);
    let b = run("b", "3", &cfg);
    assert_eq!(a.checksums(), b.checksums());
    // The echo carries the output directory of run `a`; only that differs.
    let echoed = ExperimentConfig::from_toml(&a.config).unwrap();
    let mut again = echoed.clone();
    again.out = None;
    let p = dir.join("echo.toml");
    std::fs::write(&p, again.to_toml()).unwrap();
    let c = run("c", "2", p.to_str().unwrap());
    assert_eq!(a.checksums(), c.checksums());
}

#[test]
fn seed_override_changes_the_samples() {
    let dir = scratch("seed");
    let cfg = write_config(&dir, SMALL_LQ);
    let run = |name: &str, seed: &str| {
        let out = dir.join(name);
        assert!(smp_lab(&[
            "simulate",
            "--config",
            &cfg,
            "--seed",
            seed,
            "--out",
            out.to_str().unwrap()
        ])
        .status
        .success());
        RunManifest::load(&out).unwrap().checksums()["state_summary.csv"].clone()
    };
    assert_ne!(run("a", "1"), run("b", "2"));
}

#[test]
fn invalid_configs_name_the_offending_key() {
    let dir = scratch("invalid");
    let cases = [
        ("scenario = \"lq\"\n[ensemble]\nouter = 0\n", "ensemble.outer"),
        ("scenario = \"lq\"\n[grid]\nn_modez = 8\n", "n_modez"),
        ("scenario = \"lq\"\n[spike]\nt0 = 0.99\n", "spike.t0"),
        ("scenario = \"no-such\"\n", "scenario"),
        ("scenario = \"lq\"\n[params]\nbeta2 = 1.0\n", "beta2"),
    ];
    for (i, (text, key)) in cases.iter().enumerate() {
        let p = dir.join(format!("bad{i}.toml"));
        std::fs::write(&p, text).unwrap();
        let o = smp_lab(&[
            "simulate",
            "--config",
            p.to_str().unwrap(),
            "--out",
            dir.join("o").to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(2));
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains(key), "{key}: {err}");
    }
}

#[test]
fn numerical_abort_reports_sample_and_knot() {
    let dir = scratch("abort");
    let cfg = write_config(&dir, &format!("{SMALL_LQ}\n[params]\nbeta = 1e6\n"));
    let o = smp_lab(&["simulate", "--config", &cfg, "--out", dir.join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("knot") && err.contains("sample"), "{err}");
}

#[test]
fn oracle_and_bdg_write_their_tables() {
    let dir = scratch("oracle");
    let cfg = write_config(
        &dir,
        &format!("{SMALL_LQ}\n[oracle]\nsamples = 30\n[bdg]\nsamples = 50\n"),
    );
    for (cmd, files) in [
        ("oracle", ["oracle.csv", "oracle.json"]),
        ("bdg", ["bdg.csv", "bdg.json"]),
    ] {
        let out = dir.join(cmd);
        let o = smp_lab(&[cmd, "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(
            o.status.code().is_some_and(|c| c <= 1),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
        let m = RunManifest::load(&out).unwrap();
        for f in files {
            assert!(m.files.iter().any(|e| e.path == f), "{cmd}: {f}");
        }
    }
}
