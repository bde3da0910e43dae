use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const FAST_FIELD: [&str; 6] = ["--iterations", "20", "--batch", "100", "--width", "8"];

fn nf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nf"))
        .current_dir(dir)
        .args(args)
        .env_remove("NF_SEED")
        .output()
        .expect("run nf")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = nf(dir, args);
    assert!(
        out.status.success(),
        "nf {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn rows(path: &Path) -> usize {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .count()
}

fn synth_sphere(dir: &Path, n: &str) {
    ok(
        dir,
        &["synth", "--kind", "sphere", "--n", n, "--seed", "7", "--outdir", "."],
    );
}

#[test]
fn synth_writes_points_and_normals() {
    let tmp = tempfile::tempdir().unwrap();
    synth_sphere(tmp.path(), "500");
    assert_eq!(rows(&tmp.path().join("sphere.xyz")), 500);
    assert_eq!(rows(&tmp.path().join("sphere.normals")), 500);
}

#[test]
fn noisy_synth_keeps_clean_labels() {
    let tmp = tempfile::tempdir().unwrap();
    ok(
        tmp.path(),
        &[
            "synth", "--kind", "cube", "--n", "400", "--noise", "0.006", "--outdir", ".",
        ],
    );
    let normals = fs::read_to_string(tmp.path().join("cube.normals")).unwrap();
    for line in normals.lines() {
        let v: Vec<f64> = line.split_whitespace().map(|t| t.parse().unwrap()).collect();
        let axis_aligned =
            v.iter().filter(|c| c.abs() == 1.0).count() == 1 && v.iter().filter(|c| **c == 0.0).count() == 2;
        assert!(axis_aligned, "cube label {line} is not a face normal");
    }
}

#[test]
fn unknown_kind_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = nf(tmp.path(), &["synth", "--kind", "teapot"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).to_lowercase().contains("usage"));
}

#[test]
fn missing_input_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = nf(tmp.path(), &["fit-ngl", "--input", "absent.xyz"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_override_key_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    synth_sphere(tmp.path(), "200");
    let out = nf(
        tmp.path(),
        &["fit-ngl", "--input", "sphere.xyz", "--set", "ngl.colour=red"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn extension_loss_run_matches_neighbor_mean_run() {
    let tmp = tempfile::tempdir().unwrap();
    synth_sphere(tmp.path(), "300");
    for (loss, outdir) in [("eq6", "a"), ("eq8", "b")] {
        let mut args = vec!["fit-ngl", "--input", "sphere.xyz", "--loss", loss, "--outdir", outdir];
        args.extend_from_slice(&FAST_FIELD);
        ok(tmp.path(), &args);
    }
    for file in [
        "normals/sphere.coarse.normals",
        "checkpoints/sphere.ngl.ckpt",
        "reports/sphere.coarse.txt",
    ] {
        let a = fs::read(tmp.path().join("a").join(file)).unwrap();
        let b = fs::read(tmp.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs");
    }
}

#[test]
fn fit_writes_decreasing_loss_log() {
    let tmp = tempfile::tempdir().unwrap();
    synth_sphere(tmp.path(), "300");
    ok(
        tmp.path(),
        &[
            "fit-ngl",
            "--input",
            "sphere.xyz",
            "--iterations",
            "60",
            "--batch",
            "200",
            "--width",
            "16",
        ],
    );
    let log = fs::read_to_string(tmp.path().join("out/logs/sphere.ngl_loss.csv")).unwrap();
    let losses: Vec<f64> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(losses.len(), 60);
    let head: f64 = losses[..10].iter().sum();
    let tail: f64 = losses[50..].iter().sum();
    assert!(tail < head, "loss did not decrease: {head} -> {tail}");
}

#[test]
fn coarse_stage_skips_refinement() {
    let tmp = tempfile::tempdir().unwrap();
    synth_sphere(tmp.path(), "300");
    let mut args = vec!["estimate", "--input", "sphere.xyz", "--stage", "coarse", "--ply"];
    args.extend_from_slice(&FAST_FIELD);
    ok(tmp.path(), &args);
    let normals = tmp.path().join("out/normals");
    assert_eq!(rows(&normals.join("sphere.coarse.normals")), 300);
    assert!(!normals.join("sphere.refined.normals").exists());
    assert!(normals.join("sphere.coarse.ply").exists());
}

#[test]
fn refined_stage_needs_a_patch_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    synth_sphere(tmp.path(), "200");
    let out = nf(tmp.path(), &["estimate", "--input", "sphere.xyz"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn refined_estimate_has_one_row_per_point() {
    let tmp = tempfile::tempdir().unwrap();
    synth_sphere(tmp.path(), "300");
    ok(
        tmp.path(),
        &[
            "train-gvo",
            "--corpus-size",
            "300",
            "--epochs",
            "1",
            "--train-vectors",
            "8",
            "--m",
            "16",
            "--set",
            "gvo.patches_per_shape=4",
            "--set",
            "gvo.widths=4,8",
            "--set",
            "gvo.head_width=8",
        ],
    );
    let mut args = vec![
        "estimate",
        "--input",
        "sphere.xyz",
        "--gvo-checkpoint",
        "out/checkpoints/gvo.ckpt",
        "--m",
        "16",
        "--test-vectors",
        "16",
    ];
    args.extend_from_slice(&FAST_FIELD);
    ok(tmp.path(), &args);
    assert_eq!(rows(&tmp.path().join("out/normals/sphere.refined.normals")), 300);
    assert!(tmp.path().join("out/reports/sphere.refined.txt").exists());
}

#[test]
fn ablation_without_scores_zeroes_the_score_loss() {
    let tmp = tempfile::tempdir().unwrap();
    ok(
        tmp.path(),
        &[
            "train-gvo",
            "--corpus-size",
            "300",
            "--epochs",
            "2",
            "--train-vectors",
            "8",
            "--m",
            "16",
            "--ablate",
            "no-score",
            "--set",
            "gvo.patches_per_shape=4",
            "--set",
            "gvo.widths=4,8",
            "--set",
            "gvo.head_width=8",
        ],
    );
    let log = fs::read_to_string(tmp.path().join("out/logs/gvo_loss.csv")).unwrap();
    let mut lines = log.lines();
    assert!(lines
        .next()
        .unwrap()
        .starts_with("epoch,score_loss,angle_loss,total_loss"));
    for line in lines {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cols[1], 0.0);
        assert!(cols[2] > 0.0);
    }
    let config = fs::read_to_string(tmp.path().join("out/logs/train-gvo.config")).unwrap();
    assert!(config.contains("gvo.disable_score = true"));
}

#[test]
fn evaluating_ground_truth_gives_zero_error_and_full_pgp() {
    let tmp = tempfile::tempdir().unwrap();
    synth_sphere(tmp.path(), "250");
    ok(
        tmp.path(),
        &[
            "evaluate",
            "--input",
            "sphere.xyz",
            "--normals",
            "sphere.normals",
            "--name",
            "self",
        ],
    );
    let report = fs::read_to_string(tmp.path().join("out/reports/self.report.txt")).unwrap();
    assert!(report.contains("rmse_oriented = 0\n"), "{report}");
    let pgp = fs::read_to_string(tmp.path().join("out/reports/self.pgp.csv")).unwrap();
    let mut lines = pgp.lines();
    assert_eq!(lines.next(), Some("threshold_deg,fraction"));
    let rest: Vec<&str> = lines.collect();
    assert_eq!(rest.len(), 180);
    assert!(rest.iter().all(|l| l.ends_with(",1")));
}

#[test]
fn baseline_evaluation_writes_normals_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    synth_sphere(tmp.path(), "800");
    ok(
        tmp.path(),
        &[
            "evaluate",
            "--input",
            "sphere.xyz",
            "--baseline",
            "pca+mst",
            "--error-map",
        ],
    );
    let out = tmp.path().join("out");
    assert_eq!(rows(&out.join("normals/sphere.baseline.normals")), 800);
    assert!(out.join("reports/sphere.pca+mst.report.txt").exists());
    assert!(out.join("reports/sphere.pca+mst.errors.ply").exists());
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    synth_sphere(tmp.path(), "300");
    for outdir in ["a", "b"] {
        let mut args = vec![
            "estimate",
            "--input",
            "sphere.xyz",
            "--stage",
            "coarse",
            "--seed",
            "3",
            "--outdir",
            outdir,
        ];
        args.extend_from_slice(&FAST_FIELD);
        ok(tmp.path(), &args);
    }
    for file in [
        "normals/sphere.coarse.normals",
        "reports/sphere.coarse.txt",
        "checkpoints/sphere.ngl.ckpt",
    ] {
        assert_eq!(
            fs::read(tmp.path().join("a").join(file)).unwrap(),
            fs::read(tmp.path().join("b").join(file)).unwrap(),
            "{file} differs"
        );
    }
}

#[test]
fn config_file_is_overridden_by_flags_and_seed_falls_back_to_env() {
    let tmp = tempfile::tempdir().unwrap();
    synth_sphere(tmp.path(), "200");
    fs::write(
        tmp.path().join("run.cfg"),
        "# small run\nngl.iterations = 5\nngl.width = 8\nngl.batch = 50\nngl.k = 4 # neighbors\n",
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_nf"))
        .current_dir(tmp.path())
        .args([
            "fit-ngl",
            "--input",
            "sphere.xyz",
            "--config",
            "run.cfg",
            "--iterations",
            "3",
        ])
        .env("NF_SEED", "21")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let echoed = fs::read_to_string(tmp.path().join("out/logs/fit-ngl.config")).unwrap();
    assert!(echoed.contains("seed = 21\n"));
    assert!(echoed.contains("ngl.iterations = 3\n"));
    assert!(echoed.contains("ngl.k = 4\n"));
    assert!(echoed.contains("ngl.width = 8\n"));

    // the echoed config reproduces the run when fed back
    fs::write(tmp.path().join("echo.cfg"), &echoed).unwrap();
    ok(tmp.path(), &["fit-ngl", "--config", "echo.cfg", "--outdir", "again"]);
    assert_eq!(
        fs::read(tmp.path().join("out/normals/sphere.coarse.normals")).unwrap(),
        fs::read(tmp.path().join("again/normals/sphere.coarse.normals")).unwrap()
    );
}
