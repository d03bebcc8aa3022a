use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn she(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_she"))
        .args(args)
        .env_remove("SHE_OUTPUT_DIR")
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const BASE: &str = r#"
name = "base"
n_space = 32
horizon = 0.25
lambda = 1.0
n_trajectories = 3

[seed]
master_seed = 11
"#;

const PLAN: &str = r#"
name = "plan"
n_space = 16
horizon = 2.0
lambda = 2.0
dt = 0.0005
n_trajectories = 60

[seed]
master_seed = 5

[[probes]]
probe = "mass_decay"
t = 1.0

[[probes]]
probe = "mass_martingale"

[[probes]]
probe = "bernoulli_ld"
q = 0.3
eps = 0.1
n = 100
trials = 500
"#;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `dir`, relative path and bytes, sorted by path.
fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn simulate_writes_csvs_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "base.toml", BASE);
    let out = tmp.path().join("run");
    let o = she(&["simulate", "--config", s(&cfg), "--set", "lambda=2", "--set", "n_trajectories=10", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csvs = fs::read_dir(out.join("trajectories")).unwrap().count();
    assert_eq!(csvs, 10);
    let manifest = fs::read_to_string(out.join("manifest.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = manifest.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 11);
    let run = &lines[0];
    assert_eq!(run["config"]["lambda"], 2.0);
    assert_eq!(run["config"]["n_trajectories"], 10);
    assert_eq!(run["master_seed"], 11);
    let digest = run["config_digest"].as_str().unwrap();
    assert_eq!(digest.len(), 64);
    let first = fs::read_to_string(out.join("trajectories/traj_00000.csv")).unwrap();
    assert!(first.starts_with("# tool=she version="));
    assert!(first.contains(digest));
    assert!(!first.contains('\r'));
}

#[test]
fn overrides_last_one_wins() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "base.toml", BASE);
    let out = tmp.path().join("run");
    let o = she(&["simulate", "-c", s(&cfg), "--set", "lambda=3", "--set", "lambda=0.5", "--set", "sigma.kind=linear", "--set", "sigma.c=2", "-o", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest = fs::read_to_string(out.join("manifest.jsonl")).unwrap();
    let run: serde_json::Value = serde_json::from_str(manifest.lines().next().unwrap()).unwrap();
    assert_eq!(run["config"]["lambda"], 0.5);
    assert_eq!(run["config"]["sigma"]["c"], 2.0);
}

#[test]
fn simulate_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "base.toml", BASE);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&she(&["simulate", "-c", s(&cfg), "-o", s(&a), "-w", "1"])), 0);
    assert_eq!(code(&she(&["simulate", "-c", s(&cfg), "-o", s(&b), "-w", "4"])), 0);
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn output_dir_falls_back_to_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "base.toml", BASE);
    let env_dir = tmp.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_she"))
        .args(["simulate", "-c", s(&cfg)])
        .env("SHE_OUTPUT_DIR", &env_dir)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(env_dir.join("manifest.jsonl").exists());
}

#[test]
fn missing_config_exits_2_with_the_path() {
    let o = she(&["simulate", "--config", "/nonexistent/run.toml"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("/nonexistent/run.toml"), "{}", stderr(&o));
}

#[test]
fn stability_violation_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "base.toml", BASE);
    let o = she(&["simulate", "-c", s(&cfg), "--set", "n_space=128", "--set", "dt=0.1", "-o", s(&tmp.path().join("x"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("stability rule"), "{}", stderr(&o));
}

#[test]
fn unknown_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "base.toml", &format!("{BASE}\nlamda = 2\n"));
    let o = she(&["simulate", "-c", s(&cfg), "-o", s(&tmp.path().join("x"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("lamda"), "{}", stderr(&o));
}

#[test]
fn numerical_failure_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "base.toml", BASE);
    let o = she(&[
        "simulate",
        "-c",
        s(&cfg),
        "--set",
        "scheme=\"semi_implicit_em\"",
        "--set",
        "dt=0.05",
        "--set",
        "lambda=1e200",
        "-o",
        s(&tmp.path().join("x")),
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
}

#[test]
fn verify_kernel_passes_with_the_bundled_constants() {
    let tmp = tempfile::tempdir().unwrap();
    let o = she(&["verify", "kernel", "-o", s(tmp.path())]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let cert: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("kernel_certificate.json")).unwrap()).unwrap();
    assert_eq!(cert["pass"], true);
    assert_eq!(cert["tool"], "she");
}

#[test]
fn tampered_fixture_fails_verification() {
    let tmp = tempfile::tempdir().unwrap();
    let fixture = include_str!("../../core/fixtures/kernel_constants.toml");
    assert!(fixture.contains("space_lipschitz = 0.09"));
    let bad = write(tmp.path(), "bad.toml", &fixture.replace("space_lipschitz = 0.09", "space_lipschitz = 0.0"));
    let o = she(&["verify", "kernel", "--fixture", s(&bad), "-o", s(tmp.path())]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("first failure: t="), "{}", stdout(&o));
}

#[test]
fn refit_fixture_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("fit.toml");
    let o = she(&["verify", "kernel", "--write-fixture", s(&path), "-o", s(tmp.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let fitted = fs::read_to_string(&path).unwrap();
    assert_eq!(fitted, include_str!("../../core/fixtures/kernel_constants.toml"));
}

#[test]
fn verify_one_inequality_tuple() {
    let tmp = tempfile::tempdir().unwrap();
    let o = she(&["verify", "inequalities", "--eps", "0.5", "--alpha", "0", "--beta", "1", "-o", s(tmp.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cert: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("inequalities_certificate.json")).unwrap()).unwrap();
    assert_eq!(cert["ij"].as_array().unwrap().len(), 1);
    assert_eq!(stdout(&o).lines().filter(|l| l.ends_with("pass")).count(), 1);
}

#[test]
fn verify_rejects_bad_inequality_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    let o = she(&["verify", "inequalities", "--eps", "1.5", "--alpha", "0", "--beta", "1", "-o", s(tmp.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn probe_writes_rows_and_a_table() {
    let tmp = tempfile::tempdir().unwrap();
    let plan = write(
        tmp.path(),
        "plan.toml",
        &PLAN[..PLAN.find("[[probes]]\nprobe = \"mass_martingale\"").unwrap()],
    );
    let out = tmp.path().join("p");
    let o = she(&["probe", "-c", s(&plan), "-o", s(&out)]);
    assert!(code(&o) == 0 || code(&o) == 1, "{}", stderr(&o));
    let rows = fs::read_to_string(out.join("results.jsonl")).unwrap();
    assert!(rows.lines().count() >= 1);
    for l in rows.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert_eq!(v["probe"], "mass_decay");
        assert_eq!(v["seed"], 5);
    }
    assert!(stdout(&o).starts_with("probe "));
    assert!(stdout(&o).contains("mass_decay"));
}

#[test]
fn probe_is_worker_count_invariant() {
    let tmp = tempfile::tempdir().unwrap();
    let plan = write(tmp.path(), "plan.toml", &PLAN.replace("[seed]", "write_trajectories = true\n\n[seed]"));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let oa = she(&["probe", "-c", s(&plan), "-o", s(&a), "--workers", "1"]);
    let ob = she(&["probe", "-c", s(&plan), "-o", s(&b), "--workers", "4"]);
    assert_eq!(code(&oa), code(&ob));
    assert_eq!(stdout(&oa), stdout(&ob));
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 60 + 3);
    assert_eq!(ta, tb);
}

#[test]
fn unknown_probe_exits_2_listing_known_ones() {
    let tmp = tempfile::tempdir().unwrap();
    let plan = write(tmp.path(), "plan.toml", &PLAN.replace("\"mass_martingale\"", "\"mass_martingal\""));
    let o = she(&["probe", "-c", s(&plan), "-o", s(&tmp.path().join("x"))]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("mass_martingal"), "{err}");
    for known in ["mass_decay", "martingale_tail", "void_event", "lyapunov"] {
        assert!(err.contains(known), "{err}");
    }
}

#[test]
fn kernel_eval_prints_json() {
    let o = she(&["kernel-eval", "-t", "0.25", "-x", "0.5", "-y", "-0.5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    let free = std::f64::consts::PI.sqrt().recip() * (-1.0f64).exp();
    assert!((v["free_kernel"].as_f64().unwrap() - free).abs() < 1e-15);
    assert!(v["p_t"].as_f64().unwrap() > free);
    assert_eq!(code(&she(&["kernel-eval", "-t", "0", "-x", "0", "-y", "0"])), 2);
}

#[test]
fn help_lists_every_flag() {
    for (cmd, flags) in [
        ("simulate", &["--config", "--set", "--out", "--workers"][..]),
        ("probe", &["--config", "--set", "--out", "--workers"][..]),
        ("verify", &["--fixture", "--write-fixture", "--eps", "--alpha", "--beta", "--out"][..]),
        ("kernel-eval", &["--order", "--tol"][..]),
    ] {
        let o = she(&[cmd, "--help"]);
        assert_eq!(code(&o), 0);
        let text = stdout(&o);
        for f in flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
}

#[test]
fn bundled_configs_load_and_run() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let tmp = tempfile::tempdir().unwrap();
    let mut n = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_none_or(|e| e != "toml") {
            continue;
        }
        let out = tmp.path().join(path.file_stem().unwrap());
        let o = she(&["simulate", "-c", s(&path), "--set", "n_trajectories=1", "--set", "horizon=0.01", "-o", s(&out)]);
        assert_eq!(code(&o), 0, "{}: {}", path.display(), stderr(&o));
        n += 1;
    }
    assert!(n >= 4);
}
