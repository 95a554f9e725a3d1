use std::path::Path;
use std::process::{Command, Output};

fn fedpac(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedpac"))
        .args(args)
        .current_dir(cwd)
        .env_remove("FEDPAC_OUT_DIR")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = "rounds = 2\nclients = 4\n[partition]\ngroups = 2\ntrain_size = 120\ntest_size = 60\n";

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = fedpac(&["run", "--config", "does/not/exist.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("does/not/exist.cfg"), "{}", stderr(&o));
}

#[test]
fn bad_keys_and_flags_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "[train]\nstep = 0.1\n").unwrap();
    let o = fedpac(&["run", "--config", "bad.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.step"));

    let o = fedpac(&["run", "--algorithm", "fedprox"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("algorithm"));

    let o = fedpac(&["train"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn run_writes_artifacts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.cfg"), SMALL).unwrap();
    let a = fedpac(&["run", "--config", "exp.cfg", "--seed", "3", "--out", "a"], dir.path());
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert!(stdout(&a).contains("fedpac seed 3: final accuracy"));
    let b = fedpac(
        &[
            "run",
            "--config",
            "exp.cfg",
            "--seed",
            "3",
            "--out",
            "b",
            "--workers",
            "8",
        ],
        dir.path(),
    );
    assert_eq!(b.status.code(), Some(0));
    for name in [
        "metrics_fedpac_seed3.csv",
        "checkpoint_fedpac_seed3.json",
        "weights_fedpac_seed3/round_0001.csv",
        "weights_fedpac_seed3/round_0002.csv",
    ] {
        let x = std::fs::read(dir.path().join("a").join(name)).unwrap();
        let y = std::fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
    // the echo differs only in the worker count
    let echo = std::fs::read_to_string(dir.path().join("a/config_fedpac_seed3.txt")).unwrap();
    assert!(echo.contains("seeds = 3\n") && echo.contains("rounds = 2\n") && echo.contains("out_dir = a\n"));
    assert!(echo.contains("partition.train_size = 120\n"));
}

#[test]
fn zero_rounds_override() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.cfg"), SMALL).unwrap();
    let o = fedpac(
        &["run", "--config", "exp.cfg", "--rounds", "0", "--out", "z"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let csv = std::fs::read_to_string(dir.path().join("z/metrics_fedpac_seed0.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5);
    assert!(csv.lines().skip(1).all(|l| l.starts_with("0,")));
    assert!(!dir.path().join("z/weights_fedpac_seed0").exists());
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.cfg"), SMALL).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_fedpac"))
        .args(["run", "--config", "exp.cfg", "--rounds", "1", "--algorithm", "local"])
        .current_dir(dir.path())
        .env("FEDPAC_OUT_DIR", "from_env")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(dir.path().join("from_env/metrics_local_seed0.csv").exists());
}

#[test]
fn verify_fast_passes_and_negative_control_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = fedpac(&["verify", "--level", "fast"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 6);

    let o = fedpac(&["verify", "--corrupt-gradient"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).lines().any(|l| l.starts_with("FAIL gradient")));
}

#[test]
fn verify_full_reports_monte_carlo_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = fedpac(&["verify", "--level", "full"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let line = stdout(&o)
        .lines()
        .find(|l| l.contains("bias-variance"))
        .unwrap()
        .to_string();
    assert!(line.starts_with("PASS") && line.contains("10000 resamples") && line.contains("threshold 2.000e-2"));
}

fn histograms(text: &str) -> Vec<(usize, Vec<usize>)> {
    text.lines()
        .filter(|l| l.chars().next().is_some_and(|c| c.is_ascii_digit()))
        .map(|l| {
            let v: Vec<usize> = l.split(',').map(|x| x.parse().unwrap()).collect();
            (v[1], v[4..].to_vec())
        })
        .collect()
}

#[test]
fn partition_stats_follow_the_scheme() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("s0.cfg"), "clients = 10\npartition.s_percent = 0\n").unwrap();
    std::fs::write(dir.path().join("s100.cfg"), "clients = 10\npartition.s_percent = 100\n").unwrap();

    let a = fedpac(&["partition-stats", "--config", "s0.cfg"], dir.path());
    assert_eq!(a.status.code(), Some(0));
    let hists = histograms(&stdout(&a));
    assert_eq!(hists.len(), 10);
    let dominant = [[0, 1, 2], [2, 3, 4], [4, 5, 6], [6, 7, 8], [8, 9, 0]];
    for (group, h) in &hists {
        for (class, count) in h.iter().enumerate() {
            if !dominant[*group].contains(&class) {
                assert_eq!(*count, 0, "group {group} class {class}");
            }
        }
    }
    let again = fedpac(&["partition-stats", "--config", "s0.cfg"], dir.path());
    assert_eq!(a.stdout, again.stdout);

    let b = fedpac(&["partition-stats", "--config", "s100.cfg"], dir.path());
    for (_, h) in histograms(&stdout(&b)) {
        assert!(h.iter().all(|c| *c == 60), "{h:?}");
    }
}
