//! End-to-end runs of the `injected` binary at a small scale: artifact
//! inventory, row counts, exit codes, and byte-level reproducibility.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_injected"))
        .args(args)
        .output()
        .expect("binary should run")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no exit code")
}

/// Two well-separated blobs; enough spread for normalization and k=2.
fn write_points(dir: &Path) -> PathBuf {
    let path = dir.join("pts.csv");
    let mut s = String::from("x,y\n");
    for i in 0..6 {
        s += &format!("{},{}\n", 1.0 + 0.1 * i as f64, 2.0 + 0.05 * i as f64);
        s += &format!("{},{}\n", -1.0 - 0.1 * i as f64, -2.0 + 0.07 * i as f64);
    }
    fs::write(&path, s).unwrap();
    path
}

fn write_cfg(dir: &Path) -> PathBuf {
    let path = dir.join("run.cfg");
    fs::write(
        &path,
        "t_max = 6\nepochs = 3\nbatch_size = 4\nsamples = 5\nk = 2\ngrid = 6x6\nseed = 7\n",
    )
    .unwrap();
    path
}

fn data_rows(path: &Path) -> usize {
    fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .count()
}

/// Map of relative path -> bytes for every file under `root`.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                files.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn run_all(dir: &Path, out_name: &str) -> (PathBuf, PathBuf) {
    let pts = write_points(dir);
    let cfg = write_cfg(dir);
    let out_root = dir.join(out_name);
    let out = run(&[
        "all",
        "--config-file",
        cfg.to_str().unwrap(),
        "--dataset",
        pts.to_str().unwrap(),
        "--out",
        out_root.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
    (out_root.join("pts").join("fourier-fourier-0.95"), out_root)
}

#[test]
fn full_pipeline_writes_every_artifact_with_expected_row_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (run_dir, _) = run_all(dir.path(), "out");

    for name in [
        "model.txt",
        "loss_epoch.csv",
        "mse_per_timestep.csv",
        "trajectories.csv",
        "displacement.csv",
        "velocity.csv",
        "clusters.csv",
        "alignment.csv",
        "forward_field.csv",
        "backward_field.csv",
        "metrics.txt",
    ] {
        assert!(run_dir.join(name).is_file(), "missing {name}");
    }

    assert_eq!(data_rows(&run_dir.join("loss_epoch.csv")), 3, "one row per epoch");
    assert_eq!(data_rows(&run_dir.join("mse_per_timestep.csv")), 6);
    assert_eq!(data_rows(&run_dir.join("trajectories.csv")), 5 * 7, "samples x (t_max + 1)");
    assert_eq!(data_rows(&run_dir.join("displacement.csv")), 5);
    assert_eq!(data_rows(&run_dir.join("velocity.csv")), 6);
    assert_eq!(data_rows(&run_dir.join("clusters.csv")), 5);
    assert_eq!(data_rows(&run_dir.join("alignment.csv")), 6);
    // five field timesteps for t_max = 6, each a full 6x6 grid
    assert_eq!(data_rows(&run_dir.join("forward_field.csv")), 5 * 36);
    assert_eq!(data_rows(&run_dir.join("backward_field.csv")), 5 * 36);

    let metrics = fs::read_to_string(run_dir.join("metrics.txt")).unwrap();
    let mut expected: Vec<String> =
        vec!["wasserstein.combined".into(), "wasserstein.x".into(), "wasserstein.y".into()];
    expected.extend((0..6).map(|i| format!("velocity.{i}")));
    expected.extend((1..=6).map(|t| format!("alignment.{t}")));
    for key in expected {
        assert!(
            metrics.lines().any(|l| l.starts_with(&format!("{key} = "))),
            "metrics.txt lacks key {key}"
        );
    }

    let svgs: Vec<PathBuf> = snapshot(&run_dir)
        .into_keys()
        .filter(|p| p.extension().is_some_and(|e| e == "svg"))
        .collect();
    assert!(svgs.len() >= 8, "figure inventory too small: {svgs:?}");
}

#[test]
fn plot_prints_the_figure_inventory() {
    let dir = tempfile::tempdir().unwrap();
    let (_, out_root) = run_all(dir.path(), "out");
    let pts = dir.path().join("pts.csv");
    let cfg = dir.path().join("run.cfg");
    let out = run(&[
        "plot",
        "--config-file",
        cfg.to_str().unwrap(),
        "--dataset",
        pts.to_str().unwrap(),
        "--out",
        out_root.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
    let wrote = stdout_of(&out)
        .lines()
        .filter(|l| l.starts_with("wrote ") && l.ends_with(".svg"))
        .count();
    assert!(wrote >= 8, "plot should list at least 8 figures, got {wrote}");
}

#[test]
fn train_with_one_epoch_writes_one_loss_row() {
    let dir = tempfile::tempdir().unwrap();
    let pts = write_points(dir.path());
    let cfg = write_cfg(dir.path());
    let out_root = dir.path().join("out");
    let out = run(&[
        "train",
        "--config-file",
        cfg.to_str().unwrap(),
        "--dataset",
        pts.to_str().unwrap(),
        "--epochs",
        "1",
        "--out",
        out_root.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
    let loss = out_root.join("pts/fourier-fourier-0.95/loss_epoch.csv");
    assert_eq!(data_rows(&loss), 1);
}

#[test]
fn unknown_config_name_is_a_usage_error_listing_the_names() {
    let out = run(&["train", "--dataset", "x.csv", "--config", "swirl"]);
    assert_eq!(code(&out), 1);
    let err = stderr_of(&out);
    for name in [
        "identity-zero-0.95",
        "fourier-linear-0.95",
        "fourier-fourier-0.95",
        "fourier-fourier-0.98",
    ] {
        assert!(err.contains(name), "stderr should list {name}: {err}");
    }
}

#[test]
fn missing_dataset_is_a_usage_error() {
    let out = run(&["train"]);
    assert_eq!(code(&out), 1);
    assert!(stderr_of(&out).contains("dataset"), "{}", stderr_of(&out));
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
    assert_eq!(code(&run(&["train", "--help"])), 0);
}

#[test]
fn unreadable_dataset_is_a_pipeline_error_naming_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "train",
        "--dataset",
        dir.path().join("nope.csv").to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr_of(&out).contains("load-dataset"), "{}", stderr_of(&out));
}

#[test]
fn sampling_without_a_model_file_fails_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let pts = write_points(dir.path());
    let out = run(&[
        "sample",
        "--dataset",
        pts.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr_of(&out).contains("model.txt"), "{}", stderr_of(&out));
}

#[test]
fn analyze_rejects_mismatched_trajectory_and_model_t_naming_both() {
    let dir = tempfile::tempdir().unwrap();
    let (run_dir, out_root) = run_all(dir.path(), "out");
    // Drop the final step of every trajectory: a dense table with t_max = 5.
    let traj = run_dir.join("trajectories.csv");
    let trimmed: String = fs::read_to_string(&traj)
        .unwrap()
        .lines()
        .filter(|l| l.split(',').nth(1) != Some("6"))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(&traj, trimmed).unwrap();

    let out = run(&[
        "analyze",
        "--config-file",
        dir.path().join("run.cfg").to_str().unwrap(),
        "--dataset",
        dir.path().join("pts.csv").to_str().unwrap(),
        "--out",
        out_root.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    let err = stderr_of(&out);
    assert!(err.contains("t_max=5") && err.contains("t_max=6"), "{err}");
}

#[test]
fn analyze_of_constant_trajectories_reports_zero_displacement() {
    let dir = tempfile::tempdir().unwrap();
    let (run_dir, out_root) = run_all(dir.path(), "out");
    let mut s = String::from("sample,step,x,y\n");
    for sample in 0..5 {
        for step in 0..=6 {
            s += &format!("{sample},{step},{},{}\n", 0.25 * sample as f64, 1.0);
        }
    }
    fs::write(run_dir.join("trajectories.csv"), s).unwrap();

    let out = run(&[
        "analyze",
        "--config-file",
        dir.path().join("run.cfg").to_str().unwrap(),
        "--dataset",
        dir.path().join("pts.csv").to_str().unwrap(),
        "--out",
        out_root.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
    let disp = fs::read_to_string(run_dir.join("displacement.csv")).unwrap();
    for line in disp.lines().skip(1) {
        let value: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(value, 0.0, "constant trajectories must have zero displacement");
    }
}

#[test]
fn plot_names_a_missing_alignment_file() {
    let dir = tempfile::tempdir().unwrap();
    let (run_dir, out_root) = run_all(dir.path(), "out");
    fs::remove_file(run_dir.join("alignment.csv")).unwrap();
    let out = run(&[
        "plot",
        "--config-file",
        dir.path().join("run.cfg").to_str().unwrap(),
        "--dataset",
        dir.path().join("pts.csv").to_str().unwrap(),
        "--out",
        out_root.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr_of(&out).contains("alignment.csv"), "{}", stderr_of(&out));
}

#[test]
fn identical_seeds_reproduce_every_artifact_byte_for_byte() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let (_, out_a) = run_all(dir_a.path(), "out");
    let (_, out_b) = run_all(dir_b.path(), "out");
    let snap_a = snapshot(&out_a);
    let snap_b = snapshot(&out_b);
    let names_a: Vec<_> = snap_a.keys().collect();
    let names_b: Vec<_> = snap_b.keys().collect();
    assert_eq!(names_a, names_b, "runs should produce the same file set");
    for (name, bytes) in &snap_a {
        assert_eq!(bytes, &snap_b[name], "{} differs between identical runs", name.display());
    }
}

#[test]
fn resampling_with_the_same_seed_rewrites_the_same_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let (run_dir, out_root) = run_all(dir.path(), "out");
    let traj = run_dir.join("trajectories.csv");
    let first = fs::read(&traj).unwrap();
    let out = run(&[
        "sample",
        "--config-file",
        dir.path().join("run.cfg").to_str().unwrap(),
        "--dataset",
        dir.path().join("pts.csv").to_str().unwrap(),
        "--out",
        out_root.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
    assert_eq!(first, fs::read(&traj).unwrap());
}
