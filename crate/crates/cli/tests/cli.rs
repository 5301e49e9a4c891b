use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"
[gibbs]
chains = 4
samples_per_chain = 100
burn_in = 50

[mixing]
starts = 4
pairs_per_start = 50
times = [0.5, 1.0, 1.5]

[corrector]
points = 4

[homogenize]
eps = [0.5, 0.25, 0.125]
paths = 300
limit_paths = 300
energy_subsample = 100
permutations = 29
gap_tolerance = 0.2

[random_env]
environments = 16
"#;

fn homlab(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_homlab"));
    cmd.args(args).env_remove("HOMLAB_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn preset(dir: &Path, name: &str) -> PathBuf {
    config(dir, &format!("{name}.toml"), &format!("seed = 3\n[potential]\npreset = \"{name}\"\n{SMALL}"))
}

fn run(cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["pipeline", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    homlab(&args, &[])
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn verify_potential_exit_codes() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let good = preset(dir.path(), "cos-1d");
    let o = homlab(&["verify-potential", "--config", good.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("axioms.json").exists());

    let wide = config(
        dir.path(),
        "wide.toml",
        r#"
[potential.inline]
format = "homlab-potential"
version = 1
dimension = 1
range = 1

[[potential.inline.terms]]
support = [[0], [3]]
modes = [{ freq = [1, -1], cos = 0.2 }]

[geometry]
dimension = 1
half_width = 4
"#,
    );
    let o = homlab(&["verify-potential", "--config", wide.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("finite range"), "{}", stderr(&o));

    let bad = config(dir.path(), "bad.toml", "[potential\npreset = ");
    let o = homlab(&["verify-potential", "--config", bad.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 64);
}

#[test]
fn usage_errors_exit_64() {
    assert_eq!(code(&homlab(&["no-such-command"], &[])), 64);
    assert_eq!(code(&homlab(&["gibbs"], &[])), 64);
    let dir = TempDir::new().unwrap();
    let cfg = preset(dir.path(), "free");
    let o = run(&cfg, &dir.path().join("out"), &["--stages", "gibbs,bogus"]);
    assert_eq!(code(&o), 64);
    let typo = config(dir.path(), "typo.toml", "[potential]\npreset = \"free\"\n[gibbs]\nchainz = 2\n");
    assert_eq!(code(&homlab(&["gibbs", "--config", typo.to_str().unwrap()], &[])), 64);
}

#[test]
fn missing_upstream_exits_3() {
    let dir = TempDir::new().unwrap();
    let cfg = preset(dir.path(), "free");
    let out = dir.path().join("out");
    let o = homlab(&["effective", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("gibbs.csv"));
    // The check runs before any stage does work.
    let o = run(&cfg, &out, &["--stages", "gibbs,homogenize"]);
    assert_eq!(code(&o), 3);
    assert!(!out.join("gibbs.csv").exists());
}

#[test]
fn wrong_effective_matrix_fails_homogenization() {
    let dir = TempDir::new().unwrap();
    let cfg = preset(dir.path(), "free");
    let out = dir.path().join("out");
    assert_eq!(code(&run(&cfg, &out, &["--stages", "gibbs,effective"])), 0);
    let abar = std::fs::read_to_string(out.join("abar.csv")).unwrap();
    let doubled = abar.replace(",2.0000000000000004,", ",4,").replace(",2,", ",4,");
    assert_ne!(abar, doubled);
    std::fs::write(out.join("abar.csv"), doubled).unwrap();
    let o = run(&cfg, &out, &["--stages", "homogenize"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("invariant"));
}

#[test]
fn free_pipeline_reports_two() {
    let dir = TempDir::new().unwrap();
    let cfg = preset(dir.path(), "free");
    let out = dir.path().join("out");
    let o = run(&cfg, &out, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    let md = std::fs::read_to_string(out.join("report.md")).unwrap();
    assert!(md.contains("2.0000 ± 0.0000"), "{md}");
    let manifest = std::fs::read_to_string(out.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 12, "a started and a closing line per stage");
}

#[test]
fn cos_pipeline_matches_closed_form() {
    let dir = TempDir::new().unwrap();
    let cfg = preset(dir.path(), "cos-1d");
    let out = dir.path().join("out");
    let o = run(&cfg, &out, &["--stages", "gibbs,mixing,corrector,effective,homogenize,random-env,report"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    let abar = report["verdicts"]
        .as_array()
        .unwrap()
        .iter()
        .find(|v| v["check"] == "effective matrix")
        .unwrap();
    assert_eq!(abar["passed"], true, "{abar}");
    assert!(abar["detail"].as_str().unwrap().contains("1.24772"));
    assert!(out.join("random_env.csv").exists());
}

#[test]
fn reruns_are_byte_identical_across_workers() {
    let dir = TempDir::new().unwrap();
    let cfg = preset(dir.path(), "cos-1d");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(code(&run(&cfg, &a, &["--workers", "1"])), 0);
    assert_eq!(code(&run(&cfg, &b, &["--workers", "4"])), 0);
    let (fa, fb) = (csv_files(&a), csv_files(&b));
    assert_eq!(fa.len(), 5);
    assert_eq!(fa, fb);
    assert_eq!(
        std::fs::read(a.join("config.resolved.toml")).unwrap(),
        std::fs::read(b.join("config.resolved.toml")).unwrap()
    );
}

#[test]
fn seed_flag_beats_environment_beats_file() {
    let dir = TempDir::new().unwrap();
    let cfg = preset(dir.path(), "free");
    let out = dir.path().join("out");
    let seed_of = |o: &Output| {
        assert_eq!(code(o), 0, "{}", stderr(o));
        let text = std::fs::read_to_string(out.join("config.resolved.toml")).unwrap();
        text.lines().find(|l| l.starts_with("seed")).unwrap().to_string()
    };
    let c = cfg.to_str().unwrap();
    let o = out.to_str().unwrap();
    assert_eq!(seed_of(&homlab(&["gibbs", "--config", c, "--out", o], &[])), "seed = 3");
    assert_eq!(
        seed_of(&homlab(&["gibbs", "--config", c, "--out", o], &[("HOMLAB_SEED", "8")])),
        "seed = 8"
    );
    assert_eq!(
        seed_of(&homlab(&["gibbs", "--config", c, "--out", o, "--seed", "9"], &[("HOMLAB_SEED", "8")])),
        "seed = 9"
    );
}
