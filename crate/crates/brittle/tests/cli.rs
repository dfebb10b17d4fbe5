use std::path::Path;
use std::process::{Command, Output};

fn brittle(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brittle"))
        .args(args)
        .current_dir(dir)
        .env("BRITTLE_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

fn field(report: &str, key: &str) -> f64 {
    let line = report
        .lines()
        .find(|l| l.starts_with(key))
        .unwrap_or_else(|| panic!("no `{key}` in {report}"));
    line[key.len()..].trim().parse().unwrap()
}

#[test]
fn generate_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "c.toml",
        "model = \"balls\"\nseed = 11\n[data]\nsteps = 20\nn_datasets = 2\n",
    );
    for out in ["a", "b"] {
        let o = brittle(dir.path(), &["generate", "-c", "c.toml", "--out", out]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["dataset_000.csv", "dataset_001.csv", "config.toml"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let a0 = std::fs::read(dir.path().join("a/dataset_000.csv")).unwrap();
    let a1 = std::fs::read(dir.path().join("a/dataset_001.csv")).unwrap();
    assert_ne!(a0, a1);
}

#[test]
fn echoed_config_materialises_defaults() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "c.toml", "model = \"lgssm\"\n");
    let o = brittle(dir.path(), &["generate", "-c", "c.toml", "--seed", "4", "--out", "o"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let echoed = std::fs::read_to_string(dir.path().join("o/config.toml")).unwrap();
    for key in [
        "seed = 4",
        "[annulus]",
        "tau =",
        "[train]",
        "batch_size = 256",
        "[sweep]",
        "mode = \"fixed_budget\"",
    ] {
        assert!(echoed.contains(key), "missing {key} in\n{echoed}");
    }
}

#[test]
fn lgssm_baseline_never_rejects() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "c.toml",
        "model = \"lgssm\"\n[eval]\nn_traj = 20\nt_roll = 10\n",
    );
    let o = brittle(
        dir.path(),
        &["eval-rejection", "-c", "c.toml", "--n", "5000", "--out", "o"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(field(&stdout(&o), "rejection rate"), 0.0);
}

#[test]
fn untrained_model_matches_the_baseline_rate() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "c.toml",
        "model = \"annulus\"\n[train]\niterations = 0\nn_traj = 20\nt_roll = 10\n[eval]\nn_traj = 50\nt_roll = 20\n",
    );
    let o = brittle(dir.path(), &["train", "-c", "c.toml", "--out", "t"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("t/pairs.csv").exists());
    assert!(dir.path().join("t/metrics.csv").exists());
    let base = brittle(
        dir.path(),
        &["eval-rejection", "-c", "c.toml", "--n", "40000", "--out", "b"],
    );
    let learned = brittle(
        dir.path(),
        &[
            "eval-rejection",
            "-c",
            "c.toml",
            "--n",
            "40000",
            "--model",
            "t/model.json",
            "--out",
            "q",
        ],
    );
    assert!(
        base.status.success() && learned.status.success(),
        "{}",
        stderr(&learned)
    );
    let (rb, rq) = (
        field(&stdout(&base), "rejection rate"),
        field(&stdout(&learned), "rejection rate"),
    );
    // Two independent binomial estimates at n = 40000: sd of the difference < 0.0031.
    assert!((rb - rq).abs() < 0.0125, "baseline {rb} vs untrained {rq}");
    assert!(rb > 0.5, "calibrated baseline rejects most proposals: {rb}");
}

#[test]
fn model_for_another_simulator_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "c.toml",
        "model = \"lgssm\"\n[train]\niterations = 0\nn_traj = 5\nt_roll = 5\n",
    );
    write(dir.path(), "d.toml", "model = \"lgssm\"\n[lgssm]\na = 0.5\n");
    assert!(brittle(dir.path(), &["train", "-c", "c.toml", "--out", "t"])
        .status
        .success());
    let o = brittle(
        dir.path(),
        &[
            "eval-rejection",
            "-c",
            "d.toml",
            "--model",
            "t/model.json",
            "--n",
            "10",
            "--out",
            "o",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("trained for simulator"), "{}", stderr(&o));
}

#[test]
fn invalid_config_exits_with_two_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "c.toml", "[sweep]\nn_particles = 0\n");
    let o = brittle(dir.path(), &["generate", "-c", "c.toml", "--out", "o"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sweep"), "{}", stderr(&o));
    write(dir.path(), "d.toml", "[annulus]\ntua = 0.1\n");
    let o = brittle(dir.path(), &["generate", "-c", "d.toml", "--out", "o"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("tua"), "{}", stderr(&o));
    let o = brittle(dir.path(), &["no-such-command"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = brittle(dir.path(), &["sweep", "--dataset", "missing.csv", "--out", "o"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_thread_override_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_brittle"))
        .args(["generate", "--out", "o"])
        .current_dir(dir.path())
        .env("BRITTLE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_writes_per_step_and_per_sweep_tables() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "c.toml",
        "model = \"lgssm\"\n[data]\nsteps = 6\n[sweep]\nn_particles = 50\n",
    );
    assert!(brittle(dir.path(), &["generate", "-c", "c.toml", "--out", "d"])
        .status
        .success());
    let o = brittle(
        dir.path(),
        &[
            "sweep",
            "-c",
            "c.toml",
            "--dataset",
            "d/dataset_000.csv",
            "--n-sweeps",
            "4",
            "--out",
            "s",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let steps = std::fs::read_to_string(dir.path().join("s/sweep_steps.csv")).unwrap();
    assert_eq!(steps.lines().count(), 1 + 4 * 6);
    let sweeps = std::fs::read_to_string(dir.path().join("s/sweeps.csv")).unwrap();
    assert_eq!(sweeps.lines().next(), Some("sweep,log_evidence,failed,simulator_calls"));
    assert_eq!(sweeps.lines().count(), 5);
    assert!(sweeps.lines().skip(1).all(|l| l.ends_with(",false,300")), "{sweeps}");
}

#[test]
fn study_with_untrained_model_ties_on_variance() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "c.toml", "model = \"lgssm\"\n[train]\niterations = 0\nn_traj = 5\nt_roll = 5\n[data]\nsteps = 5\n[sweep]\nn_particles = 20\n");
    assert!(brittle(dir.path(), &["train", "-c", "c.toml", "--out", "t"])
        .status
        .success());
    let o = brittle(
        dir.path(),
        &[
            "study",
            "-c",
            "c.toml",
            "--model",
            "t/model.json",
            "--n-datasets",
            "3",
            "--n-sweeps",
            "4",
            "--out",
            "s",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(dir.path().join("s/study.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
    assert!(stdout(&o).contains("datasets          3"));
}

#[test]
fn select_prefers_the_generating_coefficient() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "c.toml",
        "model = \"lgssm\"\nseed = 3\n[data]\nsteps = 100\n[sweep]\nn_particles = 200\n",
    );
    write(
        dir.path(),
        "h.toml",
        "[[hypothesis]]\nname = \"a=0.5\"\nconfig = { lgssm = { a = 0.5 } }\n\n[[hypothesis]]\nname = \"a=0.9\"\nconfig = { lgssm = { a = 0.9 } }\n",
    );
    let o = brittle(
        dir.path(),
        &[
            "select",
            "-c",
            "c.toml",
            "--hypotheses",
            "h.toml",
            "--n-sweeps",
            "3",
            "--out",
            "s",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("selected          a=0.9"), "{}", stdout(&o));
    let table = std::fs::read_to_string(dir.path().join("s/selection.csv")).unwrap();
    assert!(table.lines().nth(2).unwrap().starts_with("a=0.9,") && table.lines().nth(2).unwrap().ends_with(",true"));
}

#[test]
fn select_rejects_a_single_hypothesis() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "h.toml", "[[hypothesis]]\nname = \"only\"\n");
    let o = brittle(dir.path(), &["select", "--hypotheses", "h.toml", "--out", "s"]);
    assert_eq!(o.status.code(), Some(2));
}
