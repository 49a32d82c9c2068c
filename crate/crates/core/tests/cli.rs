use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mpem::sensing::io::{read_pgm, read_vector, write_vector};

fn mpem(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpem"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("run mpem")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn summary_value(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("{key} missing in {text}"))
        .parse()
        .unwrap()
}

const EASY: &str = "rows = 16\ncols = 16\nlevels = 3\nn_over_p = 0.5\nsigma2_star = 1e-6\nseed = 3\n";

fn simulate(dir: &Path, cfg: &str, out: &str) {
    fs::write(dir.join("sim.cfg"), cfg).unwrap();
    let o = mpem(&["simulate", "--config", "sim.cfg", "--out", out], dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn simulate_then_reconstruct_easy_instance() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), EASY, "sim");
    for f in ["manifest.txt", "h.bin", "y.bin", "s_true.bin", "q_true.csv"] {
        assert!(dir.path().join("sim").join(f).is_file(), "{f}");
    }
    let o = mpem(&["reconstruct", "--config", "sim/manifest.txt", "--out", "rec"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(dir.path().join("rec/summary.txt")).unwrap();
    assert!(summary_value(&summary, "nmse") < 0.05, "{summary}");
    assert_eq!(String::from_utf8_lossy(&o.stdout), summary);
    let s_hat = read_vector(dir.path().join("rec/s_hat.bin")).unwrap();
    assert_eq!(s_hat.len(), 256);
    let grid = fs::read_to_string(dir.path().join("rec/grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 17);
    assert_eq!(grid.lines().filter(|l| l.ends_with(",1")).count(), 1);
    let trace = fs::read_to_string(dir.path().join("rec/em_iterations.csv")).unwrap();
    assert!(trace.starts_with("grid_index,sigma2,iteration,log_cond_posterior,conv_metric"));
    let q_hat = fs::read_to_string(dir.path().join("rec/q_hat.csv")).unwrap();
    assert_eq!(q_hat.lines().count(), 257);
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), EASY, "a");
    simulate(dir.path(), EASY, "b");
    for f in ["manifest.txt", "h.bin", "y.bin", "s_true.bin", "q_true.csv"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let o = mpem(&["simulate", "--config", "sim.cfg", "--out", "c", "--seed", "4"], dir.path());
    assert_eq!(code(&o), 0);
    assert_ne!(
        fs::read(dir.path().join("a/y.bin")).unwrap(),
        fs::read(dir.path().join("c/y.bin")).unwrap()
    );
}

#[test]
fn noiseless_simulation() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "rows = 8\ncols = 8\nlevels = 2\nsigma2_star = 0\nsignal_sigma2 = 1\n", "sim");
    let y = read_vector(dir.path().join("sim/y.bin")).unwrap();
    let h = mpem::sensing::io::read_matrix(dir.path().join("sim/h.bin")).unwrap();
    let s = read_vector(dir.path().join("sim/s_true.bin")).unwrap();
    let hs = &h * nalgebra::DVector::from_column_slice(&s);
    for (a, b) in hs.iter().zip(&y) {
        assert_eq!(a, b);
    }
}

#[test]
fn structurally_random_manifest_rebuilds_operator() {
    let dir = tempfile::tempdir().unwrap();
    simulate(
        dir.path(),
        "rows = 16\ncols = 16\nlevels = 3\nmatrix = structurally_random\nn_over_p = 0.5\n",
        "sim",
    );
    assert!(!dir.path().join("sim/h.bin").exists());
    let o = mpem(&["reconstruct", "--config", "sim/manifest.txt", "--out", "rec"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(dir.path().join("rec/summary.txt")).unwrap();
    assert!(summary_value(&summary, "nmse") < 0.05, "{summary}");
}

#[test]
fn sigma2_fixed_runs_a_single_em() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), EASY, "sim");
    let o = mpem(
        &["reconstruct", "--config", "sim/manifest.txt", "--out", "rec", "--sigma2-fixed", "2.5e-8"],
        dir.path(),
    );
    assert!(code(&o) <= 1);
    let grid = fs::read_to_string(dir.path().join("rec/grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 2);
    let summary = fs::read_to_string(dir.path().join("rec/summary.txt")).unwrap();
    let s2 = summary_value(&summary, "sigma2_selected");
    assert!((s2 - 2.5e-8).abs() < 1e-12 * 2.5e-8, "{s2}");
}

#[test]
fn grid_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), EASY, "sim");
    let o = mpem(
        &[
            "reconstruct", "--config", "sim/manifest.txt", "--out", "rec", "--grid-k", "5",
            "--grid-d", "3", "--delta", "1e-8",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    let grid = fs::read_to_string(dir.path().join("rec/grid.csv")).unwrap();
    let s2: Vec<f64> = grid
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(s2.len(), 5);
    for w in s2.windows(2) {
        assert!((w[0] / w[1] - 3.0).abs() < 1e-12);
    }
}

#[test]
fn iteration_cap_exits_with_warning() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), EASY, "sim");
    let mut manifest = fs::read_to_string(dir.path().join("sim/manifest.txt")).unwrap();
    manifest.push_str("max_iters = 2\n");
    fs::write(dir.path().join("sim/capped.txt"), manifest).unwrap();
    let o = mpem(&["reconstruct", "--config", "sim/capped.txt", "--out", "rec"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("max_iters"));
}

#[test]
fn missing_and_mismatched_inputs_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = mpem(&["reconstruct", "--config", "absent.cfg"], dir.path());
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent.cfg"));

    simulate(dir.path(), EASY, "sim");
    fs::remove_file(dir.path().join("sim/y.bin")).unwrap();
    let o = mpem(&["reconstruct", "--config", "sim/manifest.txt", "--out", "rec"], dir.path());
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("y.bin"));

    write_vector(dir.path().join("sim/y.bin"), &[1.0; 7]).unwrap();
    let o = mpem(&["reconstruct", "--config", "sim/manifest.txt", "--out", "rec"], dir.path());
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("y.bin"));

    fs::write(dir.path().join("bad.cfg"), "no_such_key = 1\n").unwrap();
    let o = mpem(&["sweep", "--config", "bad.cfg"], dir.path());
    assert_eq!(code(&o), 3);
    let o = mpem(&["simulate", "--grid-d", "0.5"], dir.path());
    assert_eq!(code(&o), 3);
}

#[test]
fn unwritable_output_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("blocker"), "").unwrap();
    fs::write(dir.path().join("sim.cfg"), EASY).unwrap();
    let o = mpem(&["simulate", "--config", "sim.cfg", "--out", "blocker/sub"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn sweep_writes_results_and_is_thread_independent() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("sweep.cfg"),
        "rows = 8\ncols = 8\nlevels = 3\nn_over_p = 0.4, 0.6\nmodel_gamma2 = 1e3, 1e4\ntiming = false\n",
    )
    .unwrap();
    let a = mpem(&["sweep", "--config", "sweep.cfg", "--trials", "3", "--threads", "1", "--out", "a"], dir.path());
    let b = mpem(&["sweep", "--config", "sweep.cfg", "--trials", "3", "--threads", "2", "--out", "b"], dir.path());
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(code(&b), 0);
    let progress = String::from_utf8_lossy(&a.stdout);
    assert_eq!(progress.lines().filter(|l| l.starts_with("trial ")).count(), 12);
    for f in ["results.csv", "aggregate.csv"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    let results = fs::read_to_string(dir.path().join("a/results.csv")).unwrap();
    assert_eq!(results.lines().count(), 13);
    let agg = fs::read_to_string(dir.path().join("a/aggregate.csv")).unwrap();
    assert_eq!(agg.lines().count(), 5);
}

#[test]
fn image_reconstruction_beats_zero_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let o = mpem(&["image", "--out", "img", "--seed", "2"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(dir.path().join("img/metrics.txt")).unwrap();
    let psnr = summary_value(&metrics, "psnr_db");
    assert!(psnr.is_finite() && psnr >= summary_value(&metrics, "zero_estimate_psnr_db"), "{metrics}");
    assert_eq!(summary_value(&metrics, "n_measurements"), (0.35f64 * 4096.0).round());
    let rec = read_pgm(dir.path().join("img/reconstruction.pgm")).unwrap();
    assert_eq!(rec.shape(), (64, 64));

    // reconstructing the written original through image_path is deterministic
    fs::write(dir.path().join("img.cfg"), "image_path = img/original.pgm\n").unwrap();
    let a = mpem(&["image", "--config", "img.cfg", "--out", "a"], dir.path());
    let b = mpem(&["image", "--config", "img.cfg", "--out", "b"], dir.path());
    assert_eq!(code(&a), 0);
    assert_eq!(code(&b), 0);
    assert_eq!(
        fs::read(dir.path().join("a/reconstruction.pgm")).unwrap(),
        fs::read(dir.path().join("b/reconstruction.pgm")).unwrap()
    );
}

#[test]
fn image_rejects_indivisible_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let o = mpem(&["image", "--out", "img"], dir.path());
    assert_eq!(code(&o), 0);
    fs::write(dir.path().join("odd.cfg"), "rows = 60\ncols = 64\n").unwrap();
    let o = mpem(&["image", "--config", "odd.cfg", "--out", "odd"], dir.path());
    assert_eq!(code(&o), 3);
}
