//! End-to-end tests of the command-line binary: artifact layout, exit
//! codes, determinism of reruns, and the resolved-config round trip.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use tempfile::TempDir;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_gridtk")
}

/// Run the binary in `dir`, returning (exit code, stderr).
fn run_in(dir: &Path, args: &[&str]) -> (i32, String) {
    let output = Command::new(bin())
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs");
    let code = output.status.code().expect("no signal");
    (code, String::from_utf8_lossy(&output.stderr).into_owned())
}

fn write(dir: &Path, name: &str, contents: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, contents).expect("test file writes");
    path
}

fn read_bytes(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap_or_else(|e| panic!("reading {name}: {e}"))
}

/// An 8x8 grayscale test image with smooth structure.
fn tiny_pgm() -> String {
    let mut text = String::from("P2\n8 8\n255\n");
    for r in 0..8 {
        let row: Vec<String> = (0..8)
            .map(|c| format!("{}", (r * 8 + c * 24) % 256))
            .collect();
        text.push_str(&row.join(" "));
        text.push('\n');
    }
    text
}

const SMALL_SDF_CONFIG: &str = r#"{
  "train": {"learning_rate": 0.02, "steps": 60, "snapshot_period": 30},
  "task": {"volume_samples": 128, "surface_samples": 128, "eval_resolution": 16}
}"#;

#[test]
fn fit_image_writes_all_artifacts() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "img.pgm", &tiny_pgm());
    write(
        dir.path(),
        "cfg.json",
        r#"{
          "geometry": {"resolution": [4, 4]},
          "train": {"learning_rate": 0.2, "steps": 80, "snapshot_period": 40},
          "task": {"image": "img.pgm"}
        }"#,
    );
    let (code, err) = run_in(
        dir.path(),
        &["fit-image", "--config", "cfg.json", "--out", "run"],
    );
    assert_eq!(code, 0, "stderr: {err}");
    for name in ["metrics.json", "history.csv", "field.pgm", "config.resolved.json"] {
        assert!(dir.path().join("run").join(name).exists(), "missing {name}");
    }

    let metrics: serde_json::Value =
        serde_json::from_slice(&read_bytes(&dir.path().join("run"), "metrics.json")).unwrap();
    assert_eq!(metrics["task"], "image");
    assert!(metrics["train_psnr"].as_f64().unwrap() > 20.0);

    let history = String::from_utf8(read_bytes(&dir.path().join("run"), "history.csv")).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines[0], "step,loss,weight_change,gtk_drift");
    // One row per step boundary: steps 0..=80.
    assert_eq!(lines.len(), 82);
}

#[test]
fn exported_image_round_trips_through_the_codec() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "img.pgm", &tiny_pgm());
    write(
        dir.path(),
        "cfg.json",
        r#"{
          "geometry": {"resolution": [4, 4]},
          "train": {"steps": 40},
          "task": {"image": "img.pgm"}
        }"#,
    );
    let (code, err) = run_in(
        dir.path(),
        &["fit-image", "--config", "cfg.json", "--out", "run"],
    );
    assert_eq!(code, 0, "stderr: {err}");
    let bytes = read_bytes(&dir.path().join("run"), "field.pgm");
    let decoded = gridtk::task::netpbm::decode(&bytes).unwrap();
    assert_eq!(gridtk::task::netpbm::encode_pgm(&decoded), bytes);
}

#[test]
fn missing_image_key_is_a_config_error_naming_the_key() {
    let dir = TempDir::new().unwrap();
    let (code, err) = run_in(dir.path(), &["fit-image", "--out", "run"]);
    assert_eq!(code, 1);
    assert!(err.contains("task.image"), "stderr: {err}");
}

#[test]
fn unreadable_image_is_an_io_error() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "cfg.json", r#"{"task": {"image": "no-such.pgm"}}"#);
    let (code, err) = run_in(
        dir.path(),
        &["fit-image", "--config", "cfg.json", "--out", "run"],
    );
    assert_eq!(code, 2);
    assert!(err.contains("no-such.pgm"), "stderr: {err}");
}

#[test]
fn unknown_config_keys_are_rejected_by_name() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "cfg.json", r#"{"train": {"learning_rte": 0.1}}"#);
    let (code, err) = run_in(
        dir.path(),
        &["theory-check", "--config", "cfg.json", "--out", "run"],
    );
    assert_eq!(code, 1);
    assert!(err.contains("learning_rte"), "stderr: {err}");
}

#[test]
fn divergence_exits_three() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "img.pgm", &tiny_pgm());
    write(
        dir.path(),
        "cfg.json",
        r#"{
          "geometry": {"resolution": [4, 4]},
          "train": {"learning_rate": 1e6, "steps": 100},
          "task": {"image": "img.pgm"}
        }"#,
    );
    let (code, err) = run_in(
        dir.path(),
        &["fit-image", "--config", "cfg.json", "--out", "run"],
    );
    assert_eq!(code, 3);
    assert!(err.contains("non-finite"), "stderr: {err}");
}

#[test]
fn fit_sdf_writes_field_with_affine_sidecar() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "cfg.json", SMALL_SDF_CONFIG);
    let (code, err) = run_in(
        dir.path(),
        &["fit-sdf", "--config", "cfg.json", "--out", "run"],
    );
    assert_eq!(code, 0, "stderr: {err}");
    for name in [
        "metrics.json",
        "history.csv",
        "field.pgm",
        "field.meta.json",
        "config.resolved.json",
    ] {
        assert!(dir.path().join("run").join(name).exists(), "missing {name}");
    }
    let sidecar: serde_json::Value =
        serde_json::from_slice(&read_bytes(&dir.path().join("run"), "field.meta.json")).unwrap();
    assert!(sidecar["lo"].as_f64().unwrap() < sidecar["hi"].as_f64().unwrap());

    let metrics: serde_json::Value =
        serde_json::from_slice(&read_bytes(&dir.path().join("run"), "metrics.json")).unwrap();
    assert_eq!(metrics["task"], "sdf");
    assert_eq!(metrics["nae_samples"].as_u64().unwrap(), 128);
}

#[test]
fn reruns_are_byte_identical() {
    // Identical invocations in two sibling directories, so even the
    // resolved config (which records the output directory) must agree.
    let dir = TempDir::new().unwrap();
    for side in ["a", "b"] {
        let sub = dir.path().join(side);
        fs::create_dir(&sub).unwrap();
        write(&sub, "cfg.json", SMALL_SDF_CONFIG);
        let (code, err) = run_in(
            &sub,
            &["fit-sdf", "--config", "cfg.json", "--out", "run", "--seed", "3"],
        );
        assert_eq!(code, 0, "stderr: {err}");
    }
    for name in [
        "metrics.json",
        "history.csv",
        "field.pgm",
        "field.meta.json",
        "config.resolved.json",
    ] {
        assert_eq!(
            read_bytes(&dir.path().join("a/run"), name),
            read_bytes(&dir.path().join("b/run"), name),
            "{name} differs between identical runs"
        );
    }
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "cfg.json", SMALL_SDF_CONFIG);
    let (code, _) = run_in(
        dir.path(),
        &["fit-sdf", "--config", "cfg.json", "--out", "a"],
    );
    assert_eq!(code, 0);
    // Feed the resolved config back in; only the output directory changes.
    let (code, err) = run_in(
        dir.path(),
        &["fit-sdf", "--config", "a/config.resolved.json", "--out", "b"],
    );
    assert_eq!(code, 0, "stderr: {err}");
    for name in ["metrics.json", "history.csv", "field.pgm"] {
        assert_eq!(
            read_bytes(&dir.path().join("a"), name),
            read_bytes(&dir.path().join("b"), name),
            "{name} differs under the resolved config"
        );
    }
}

#[test]
fn seed_flag_overrides_dataset_and_kernel_draws() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "cfg.json", SMALL_SDF_CONFIG);
    for (out, seed) in [("s1", "1"), ("s2", "2")] {
        let (code, _) = run_in(
            dir.path(),
            &["fit-sdf", "--config", "cfg.json", "--out", out, "--seed", seed],
        );
        assert_eq!(code, 0);
    }
    assert_ne!(
        read_bytes(&dir.path().join("s1"), "metrics.json"),
        read_bytes(&dir.path().join("s2"), "metrics.json"),
        "different seeds should draw different datasets"
    );

    // The same flag reseeds a random kernel draw. Node dependence needs at
    // least one filter layer, hence two stages.
    write(
        dir.path(),
        "mulfa.json",
        r#"{"kernel": {"variant": "mulfa", "fourier_size": 4, "stages": 2, "width": 4}}"#,
    );
    for (out, seed) in [("k1", "1"), ("k2", "2")] {
        let (code, _) = run_in(
            dir.path(),
            &["gtk", "--config", "mulfa.json", "--out", out, "--seed", seed],
        );
        assert_eq!(code, 0);
    }
    assert_ne!(
        read_bytes(&dir.path().join("k1"), "gtk.csv"),
        read_bytes(&dir.path().join("k2"), "gtk.csv"),
        "different seeds should draw different kernels"
    );
}

#[test]
fn gtk_matrix_matches_hand_computed_overlaps() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "cfg.json", r#"{"geometry": {"resolution": [2, 2]}}"#);
    let (code, err) = run_in(
        dir.path(),
        &[
            "gtk",
            "--config",
            "cfg.json",
            "--out",
            "run",
            "--point",
            "0,0",
            "--point",
            "0.5,0.5",
        ],
    );
    assert_eq!(code, 0, "stderr: {err}");
    // On a single-cell bilinear grid, the corner sample loads one node with
    // weight 1 and the center loads all four with weight 1/4, so the kernel
    // is [[1, 1/4], [1/4, 1/4]].
    let csv = String::from_utf8(read_bytes(&dir.path().join("run"), "gtk.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0], vec![1.0, 0.25]);
    assert_eq!(rows[1], vec![0.25, 0.25]);

    let report: serde_json::Value =
        serde_json::from_slice(&read_bytes(&dir.path().join("run"), "report.json")).unwrap();
    assert_eq!(report["n"].as_u64().unwrap(), 2);
    assert!(report["lambda_min"].as_f64().unwrap() > 0.0);
    assert_eq!(report["psd_residual"].as_f64().unwrap(), 0.0);
}

#[test]
fn gtk_default_line_yields_one_row_per_sample() {
    let dir = TempDir::new().unwrap();
    let (code, err) = run_in(dir.path(), &["gtk", "--out", "run", "--samples", "6"]);
    assert_eq!(code, 0, "stderr: {err}");
    let csv = String::from_utf8(read_bytes(&dir.path().join("run"), "gtk.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert_eq!(csv.lines().next().unwrap().split(',').count(), 6);
}

#[test]
fn spectrum_csv_has_bins_and_a_trailing_fraction_row() {
    let dir = TempDir::new().unwrap();
    let (code, err) = run_in(dir.path(), &["spectrum", "--out", "run", "--samples", "16"]);
    assert_eq!(code, 0, "stderr: {err}");
    let csv = String::from_utf8(read_bytes(&dir.path().join("run"), "spectrum.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "bin,magnitude,cumulative_energy_fraction");
    // Bins 0..=8 plus header plus summary row.
    assert_eq!(lines.len(), 11);
    assert!(lines[10].starts_with("hf_fraction,,"), "{}", lines[10]);
    let last_fraction: f64 = lines[9].rsplit(',').next().unwrap().parse().unwrap();
    assert!((last_fraction - 1.0).abs() < 1e-12);
}

#[test]
fn bound_map_against_itself_is_identically_zero() {
    let dir = TempDir::new().unwrap();
    let (code, err) = run_in(
        dir.path(),
        &["bound-map", "--out", "run", "--resolution", "5"],
    );
    assert_eq!(code, 0, "stderr: {err}");
    let csv = String::from_utf8(read_bytes(&dir.path().join("run"), "map.csv")).unwrap();
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("# y_range="), "{header}");
    assert!(header.contains("sample_1="), "{header}");
    let mut cells = 0;
    for line in lines {
        for cell in line.split(',') {
            assert_eq!(cell.parse::<f64>().unwrap(), 0.0);
            cells += 1;
        }
    }
    assert_eq!(cells, 25);
}

#[test]
fn bound_map_with_two_configs_writes_both_resolutions() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "a.json", "{}");
    write(
        dir.path(),
        "b.json",
        r#"{"kernel": {"variant": "gaussian", "sigma": 0.2}}"#,
    );
    let (code, err) = run_in(
        dir.path(),
        &[
            "bound-map",
            "--config",
            "a.json",
            "--config-b",
            "b.json",
            "--out",
            "run",
            "--resolution",
            "3",
        ],
    );
    assert_eq!(code, 0, "stderr: {err}");
    assert!(dir.path().join("run/config.resolved.json").exists());
    assert!(dir.path().join("run/config_b.resolved.json").exists());
    let csv = String::from_utf8(read_bytes(&dir.path().join("run"), "map.csv")).unwrap();
    let nonzero = csv
        .lines()
        .skip(1)
        .flat_map(|l| l.split(','))
        .any(|c| c.parse::<f64>().unwrap() != 0.0);
    assert!(nonzero, "different kernels should give a nonzero map");
}

#[test]
fn theory_check_passes_on_defaults_and_rejects_joint_mode() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "cfg.json", r#"{"train": {"steps": 120}}"#);
    let (code, err) = run_in(
        dir.path(),
        &["theory-check", "--config", "cfg.json", "--out", "run"],
    );
    assert_eq!(code, 0, "stderr: {err}");
    let report: serde_json::Value =
        serde_json::from_slice(&read_bytes(&dir.path().join("run"), "report.json")).unwrap();
    assert_eq!(report["all_pass"], true);
    assert!(report["checks"].as_array().unwrap().len() >= 6);

    write(dir.path(), "joint.json", r#"{"train": {"mode": "joint"}}"#);
    let (code, err) = run_in(
        dir.path(),
        &["theory-check", "--config", "joint.json", "--out", "run2"],
    );
    assert_eq!(code, 1);
    assert!(err.contains("theory_check requires FeaturesOnly"), "stderr: {err}");
}

#[test]
fn artifacts_have_no_leftover_temp_files() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "cfg.json", SMALL_SDF_CONFIG);
    let (code, _) = run_in(
        dir.path(),
        &["fit-sdf", "--config", "cfg.json", "--out", "run"],
    );
    assert_eq!(code, 0);
    for entry in fs::read_dir(dir.path().join("run")).unwrap() {
        let name = entry.unwrap().file_name();
        let name = name.to_string_lossy();
        assert!(!name.ends_with(".tmp"), "leftover temp file {name}");
    }
}
