//! Command-line front end. Each subcommand reads one JSON config, runs one
//! job, and writes its artifacts into the output directory. All file output
//! is deterministic for a fixed config and seed, and every write goes
//! through a temp-file rename so a crash never leaves a half-written
//! artifact.
//!
//! Exit codes: 0 success, 1 configuration error, 2 I/O error, 3 training
//! divergence, 4 theory-check failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{
    build_geometry, build_kernel, build_shape, build_train, ConfigError, RunConfig,
};
use crate::grid::{Dataset, FeatureGrid, GridGeometry, GridModel};
use crate::gtk::{
    bound_difference_map, closed_form_residual, dynamics_residual, gradient_matrix, gtk_compute,
    targets_matrix, weight_change_bound_check, BoundMap,
};
use crate::kernel::EvalContext;
use crate::spectrum::{gtk_spectrum, LineSpec};
use crate::task::image::ImageTask;
use crate::task::netpbm::{decode, encode_pgm, encode_ppm};
use crate::task::sdf::SdfTask;
use crate::task::{export_field, fit_image, fit_sdf, FieldExport, Metrics};
use crate::train::{gradcheck, train, TrainConfig, TrainError};

/// Ridge added to the tangent kernel before inverting for score maps.
const MAP_RIDGE: f64 = 1e-8;

/// Tolerances for the bundled invariant suite, matching the library's
/// guarantees: assembly identities at near machine precision, recorded
/// dynamics at accumulated-rounding precision, finite-difference gradient
/// comparisons at the step-size-limited precision.
const TOL_STATIONARITY: f64 = 1e-10;
const TOL_DYNAMICS: f64 = 1e-10;
const TOL_CLOSED_FORM: f64 = 1e-8;
const TOL_GTK_EQUIV: f64 = 1e-12;
const TOL_PARTITION: f64 = 1e-12;
const TOL_GRAD_W: f64 = 1e-9;
const TOL_GRAD_THETA: f64 = 1e-5;

#[derive(Parser, Debug)]
#[command(
    name = "gridtk",
    version,
    about = "Grid-based field model fitting and tangent-kernel analysis",
    long_about = "Fits grid models to images or analytic signed distance fields and \
                  probes their training dynamics through the grid tangent kernel. \
                  Configuration is a strict JSON document; every key has a documented \
                  default that applies only when the key is absent (see the subcommand \
                  help and the README for the schema)."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit a PGM/PPM image; writes metrics.json, history.csv, the rendered
    /// field image, and config.resolved.json.
    FitImage(CommonArgs),
    /// Fit an analytic signed distance field; writes metrics.json,
    /// history.csv, a field export, and config.resolved.json.
    FitSdf(CommonArgs),
    /// Compute the tangent kernel over a sample set; writes gtk.csv (one
    /// row per sample, 17 significant digits) and report.json.
    Gtk(GtkArgs),
    /// Probe the kernel's frequency content along a line; writes
    /// spectrum.csv (bin, magnitude, cumulative energy fraction).
    Spectrum(SpectrumArgs),
    /// Map the interpolation-score difference of two configs over a plane
    /// of two-sample labels; writes map.csv.
    BoundMap(BoundMapArgs),
    /// Run the dynamics and kernel invariant suite on a synthetic dataset;
    /// writes report.json and exits 4 if any check fails.
    TheoryCheck(CommonArgs),
}

#[derive(Args, Debug)]
pub struct CommonArgs {
    /// Path to the JSON run configuration. Omitted keys take their
    /// documented defaults; an omitted file means all defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides output.directory (default "out").
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed override; sets both train.seed and kernel.seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct GtkArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Sample coordinate as comma-separated values; repeat for more
    /// samples. Mutually exclusive with the line flags.
    #[arg(long = "point", value_name = "X,Y,..")]
    pub points: Vec<String>,
    /// Line start (comma-separated); default is the domain minimum corner.
    #[arg(long, value_name = "X,Y,..")]
    pub line_start: Option<String>,
    /// Line end; default is the domain maximum corner.
    #[arg(long, value_name = "X,Y,..")]
    pub line_end: Option<String>,
    /// Evenly spaced samples on the line when no explicit points are given.
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
}

#[derive(Args, Debug)]
pub struct SpectrumArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Line start (comma-separated); default is the domain minimum corner.
    #[arg(long, value_name = "X,Y,..")]
    pub line_start: Option<String>,
    /// Line end; default is the domain maximum corner.
    #[arg(long, value_name = "X,Y,..")]
    pub line_end: Option<String>,
    /// Samples along the line; must be even and at least 8.
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
}

#[derive(Args, Debug)]
pub struct BoundMapArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Second configuration to compare against; defaults to the first, in
    /// which case the map is identically zero.
    #[arg(long)]
    pub config_b: Option<PathBuf>,
    /// Label range swept on both axes, as "lo,hi".
    #[arg(long, default_value = "-1,1")]
    pub range: String,
    /// Grid resolution of the map per axis.
    #[arg(long, default_value_t = 201)]
    pub resolution: usize,
    /// The two fixed sample coordinates (repeat exactly twice); defaults
    /// to the points 1/4 and 3/4 along the domain diagonal.
    #[arg(long = "sample", value_name = "X,Y,..")]
    pub samples: Vec<String>,
}

/// Failure cases mapped to process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Exit 1: configuration or precondition problems.
    Config(String),
    /// Exit 2: reading inputs or writing artifacts failed.
    Io(String),
    /// Exit 3: training diverged.
    Diverged(String),
    /// Exit 4: an invariant check failed.
    Theory(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Theory(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::Diverged(m) | CliError::Theory(m) => {
                m
            }
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

/// Run a parsed command line and return the process exit code, printing
/// any failure to stderr.
pub fn run(cli: &Cli) -> i32 {
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::FitImage(args) => cmd_fit_image(args),
        Command::FitSdf(args) => cmd_fit_sdf(args),
        Command::Gtk(args) => cmd_gtk(args),
        Command::Spectrum(args) => cmd_spectrum(args),
        Command::BoundMap(args) => cmd_bound_map(args),
        Command::TheoryCheck(args) => cmd_theory_check(args),
    }
}

/// Load, override, and resolve the configuration for a command.
fn load_config(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.get_or_insert_with(Default::default).seed = Some(seed);
        cfg.kernel.get_or_insert_with(Default::default).seed = Some(seed);
    }
    if let Some(out) = &common.out {
        cfg.output.get_or_insert_with(Default::default).directory =
            Some(out.to_string_lossy().into_owned());
    }
    Ok(cfg.resolve()?)
}

fn output_dir(cfg: &RunConfig) -> PathBuf {
    PathBuf::from(
        cfg.output
            .as_ref()
            .and_then(|o| o.directory.as_deref())
            .unwrap_or("out"),
    )
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("creating {}: {e}", dir.display())))
}

/// Write through a temp file in the same directory, then rename into
/// place, so concurrent readers never observe a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "artifact".to_string());
    let tmp = path.with_file_name(format!("{file_name}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| CliError::Io(format!("writing {}: {e}", tmp.display())))?;
    fs::rename(&tmp, path)
        .map_err(|e| CliError::Io(format!("renaming into {}: {e}", path.display())))
}

/// Fixed float format for CSV artifacts: 17 significant digits, enough to
/// round-trip any double exactly.
fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// JSON value for a float; non-finite values serialize as strings since
/// JSON has no literal for them.
fn json_f64(v: f64) -> serde_json::Value {
    if v.is_finite() {
        json!(v)
    } else if v.is_nan() {
        json!("nan")
    } else if v > 0.0 {
        json!("inf")
    } else {
        json!("-inf")
    }
}

fn parse_coords(text: &str, what: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|part| {
            part.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Config(format!("{what}: cannot parse {part:?} as a number")))
        })
        .collect()
}

/// Axis-aligned extent of the node layout: bounds for lattices, the node
/// bounding box for point sets.
fn domain_extent(geometry: &GridGeometry) -> (Vec<f64>, Vec<f64>) {
    match geometry {
        GridGeometry::Regular { bounds, .. } => (bounds.min.clone(), bounds.max.clone()),
        GridGeometry::Irregular { nodes, .. } => {
            let dim = nodes[0].len();
            let mut lo = vec![f64::INFINITY; dim];
            let mut hi = vec![f64::NEG_INFINITY; dim];
            for node in nodes {
                for a in 0..dim {
                    lo[a] = lo[a].min(node[a]);
                    hi[a] = hi[a].max(node[a]);
                }
            }
            (lo, hi)
        }
    }
}

fn lerp_point(lo: &[f64], hi: &[f64], t: f64) -> Vec<f64> {
    lo.iter().zip(hi).map(|(a, b)| a + (b - a) * t).collect()
}

/// Build the model skeleton shared by all commands: geometry, kernel, and
/// zero features with the requested channel count.
fn build_model(cfg: &RunConfig, channels: usize) -> Result<GridModel, CliError> {
    let geometry = build_geometry(cfg.geometry.as_ref().expect("resolved config"))?;
    let kernel = build_kernel(cfg.kernel.as_ref().expect("resolved config"), &geometry)?;
    let features = FeatureGrid::zeros(geometry.node_count(), channels);
    GridModel::new(geometry, kernel, features)
        .map_err(|e| CliError::Config(format!("config error at `geometry`/`kernel`: {e}")))
}

/// history.csv: one row per step boundary with the loss and feature
/// movement recorded before that step, plus the tangent-kernel drift at
/// steps where a snapshot recorded it (blank elsewhere).
fn history_csv(history: &crate::train::TrainHistory) -> String {
    let mut drift_at = std::collections::BTreeMap::new();
    for snap in &history.snapshots {
        if let Some(d) = snap.gtk_drift {
            drift_at.insert(snap.step, d);
        }
    }
    let mut out = String::from("step,loss,weight_change,gtk_drift\n");
    for (t, (loss, change)) in history
        .loss
        .iter()
        .zip(&history.weight_change)
        .enumerate()
    {
        let drift = drift_at
            .get(&t)
            .map(|&d| fmt_f64(d))
            .unwrap_or_default();
        let _ = writeln!(out, "{t},{},{},{drift}", fmt_f64(*loss), fmt_f64(*change));
    }
    out
}

fn metrics_json_rows(metrics: &[Metrics]) -> Vec<serde_json::Value> {
    metrics
        .iter()
        .map(|m| {
            let mut row = serde_json::Map::new();
            row.insert("step".to_string(), json!(m.step));
            if let Some(p) = m.psnr {
                row.insert("psnr".to_string(), json_f64(p));
            }
            if let Some(i) = m.iou {
                row.insert("iou".to_string(), json_f64(i));
            }
            if let Some(n) = m.nae {
                row.insert("nae".to_string(), json_f64(n));
            }
            serde_json::Value::Object(row)
        })
        .collect()
}

fn pretty_json(value: &serde_json::Value) -> Vec<u8> {
    let mut text = serde_json::to_string_pretty(value).expect("json serializes");
    text.push('\n');
    text.into_bytes()
}

fn cmd_fit_image(args: &CommonArgs) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let task_cfg = cfg.task.as_ref().expect("resolved config");
    let image_path = task_cfg.image.as_deref().ok_or_else(|| {
        CliError::Config("config error at `task.image`: required by fit-image".to_string())
    })?;
    let bytes = fs::read(image_path)
        .map_err(|e| CliError::Io(format!("reading {image_path}: {e}")))?;
    let raw = decode(&bytes)
        .map_err(|e| CliError::Io(format!("decoding {image_path}: {e}")))?;
    let channels = raw.channels;
    let task = ImageTask::new(raw)
        .map_err(|e| CliError::Config(format!("config error at `task.image`: {e}")))?;
    let mut model = build_model(&cfg, channels)?;
    if model.geometry.dim() != 2 {
        return Err(CliError::Config(format!(
            "config error at `geometry.resolution`: image fitting needs a 2D grid, got {}D",
            model.geometry.dim()
        )));
    }
    let train_cfg = build_train(cfg.train.as_ref().expect("resolved config"))?;
    let report = fit_image(&mut model, &task, &train_cfg)?;

    let dir = output_dir(&cfg);
    ensure_dir(&dir)?;
    let rendered = task.render(&model);
    let (field_name, field_bytes) = if channels == 1 {
        ("field.pgm", encode_pgm(&rendered))
    } else {
        ("field.ppm", encode_ppm(&rendered))
    };
    let metrics = json!({
        "task": "image",
        "train_psnr": json_f64(report.train_psnr),
        "holdout_psnr": json_f64(report.holdout_psnr),
        "final_loss": json_f64(*report.history.loss.last().expect("loss recorded")),
        "metrics": metrics_json_rows(&report.metrics),
    });
    write_atomic(&dir.join("metrics.json"), &pretty_json(&metrics))?;
    write_atomic(&dir.join("history.csv"), history_csv(&report.history).as_bytes())?;
    write_atomic(&dir.join(field_name), &field_bytes)?;
    write_atomic(&dir.join("config.resolved.json"), cfg.to_json().as_bytes())?;
    Ok(())
}

fn cmd_fit_sdf(args: &CommonArgs) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let task_cfg = cfg.task.as_ref().expect("resolved config");
    let shape = build_shape(task_cfg.shape.as_ref().expect("resolved config"))?;
    let task = SdfTask::new(
        shape,
        task_cfg.volume_samples.expect("resolved config"),
        task_cfg.surface_samples.expect("resolved config"),
        task_cfg.eval_resolution.expect("resolved config"),
    )
    .map_err(|e| CliError::Config(format!("config error at `task`: {e}")))?;
    let mut model = build_model(&cfg, 1)?;
    if model.geometry.dim() != task.shape.dim() {
        return Err(CliError::Config(format!(
            "config error at `geometry.resolution`: {}D grid cannot fit a {}D shape",
            model.geometry.dim(),
            task.shape.dim()
        )));
    }
    let train_cfg = build_train(cfg.train.as_ref().expect("resolved config"))?;
    let seed = train_cfg.seed;
    let report = fit_sdf(&mut model, &task, &train_cfg, seed)?;

    let dir = output_dir(&cfg);
    ensure_dir(&dir)?;
    let metrics = json!({
        "task": "sdf",
        "iou": json_f64(report.iou.value),
        "iou_empty": report.iou.empty,
        "nae_degrees": json_f64(report.nae.degrees),
        "nae_excluded": report.nae.excluded,
        "nae_samples": report.nae.samples,
        "nae_averaging": "deterministic surface samples",
        "final_loss": json_f64(*report.history.loss.last().expect("loss recorded")),
        "metrics": metrics_json_rows(&report.metrics),
    });
    write_atomic(&dir.join("metrics.json"), &pretty_json(&metrics))?;
    write_atomic(&dir.join("history.csv"), history_csv(&report.history).as_bytes())?;
    match export_field(&model, task.eval_resolution)
        .map_err(|e| CliError::Config(format!("config error at `task.eval_resolution`: {e}")))?
    {
        FieldExport::Pgm { bytes, lo, hi } => {
            write_atomic(&dir.join("field.pgm"), &bytes)?;
            let sidecar = json!({"lo": json_f64(lo), "hi": json_f64(hi)});
            write_atomic(&dir.join("field.meta.json"), &pretty_json(&sidecar))?;
        }
        FieldExport::Ppm { bytes } => write_atomic(&dir.join("field.ppm"), &bytes)?,
        FieldExport::Csv { text } => write_atomic(&dir.join("field.csv"), text.as_bytes())?,
    }
    write_atomic(&dir.join("config.resolved.json"), cfg.to_json().as_bytes())?;
    Ok(())
}

/// Sample coordinates for the gtk command: explicit points win, otherwise
/// an evenly spaced line across the domain.
fn gtk_sample_points(args: &GtkArgs, geometry: &GridGeometry) -> Result<Vec<Vec<f64>>, CliError> {
    let dim = geometry.dim();
    if !args.points.is_empty() {
        if args.line_start.is_some() || args.line_end.is_some() {
            return Err(CliError::Config(
                "--point and --line-start/--line-end are mutually exclusive".to_string(),
            ));
        }
        let mut points = Vec::with_capacity(args.points.len());
        for text in &args.points {
            let p = parse_coords(text, "--point")?;
            if p.len() != dim {
                return Err(CliError::Config(format!(
                    "--point {text:?} has {} coordinates, the grid is {dim}D",
                    p.len()
                )));
            }
            points.push(p);
        }
        return Ok(points);
    }
    let (lo, hi) = domain_extent(geometry);
    let start = match &args.line_start {
        Some(t) => parse_coords(t, "--line-start")?,
        None => lo.clone(),
    };
    let end = match &args.line_end {
        Some(t) => parse_coords(t, "--line-end")?,
        None => hi.clone(),
    };
    if start.len() != dim || end.len() != dim {
        return Err(CliError::Config(format!(
            "line endpoints must have {dim} coordinates"
        )));
    }
    if args.samples < 1 {
        return Err(CliError::Config("--samples must be positive".to_string()));
    }
    if args.samples == 1 {
        return Ok(vec![start]);
    }
    Ok(crate::spectrum::line_points(&start, &end, args.samples))
}

fn cmd_gtk(args: &GtkArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.common)?;
    let model = build_model(&cfg, 1)?;
    let points = gtk_sample_points(args, &model.geometry)?;
    let gtk = gtk_compute(&model, &points);

    let n = gtk.n();
    let mut csv = String::new();
    for i in 0..n {
        let row: Vec<String> = (0..n).map(|j| fmt_f64(gtk.matrix()[(i, j)])).collect();
        let _ = writeln!(csv, "{}", row.join(","));
    }
    // PSD residual: how far the most negative eigenvalue dips below zero.
    let psd_residual = (-gtk.lambda_min()).max(0.0);
    let report = json!({
        "n": n,
        "lambda_min": json_f64(gtk.lambda_min()),
        "lambda_max": json_f64(gtk.lambda_max()),
        "condition_number": json_f64(gtk.condition_number()),
        "symmetry_residual": json_f64(gtk.symmetry_residual()),
        "psd_residual": json_f64(psd_residual),
    });

    let dir = output_dir(&cfg);
    ensure_dir(&dir)?;
    write_atomic(&dir.join("gtk.csv"), csv.as_bytes())?;
    write_atomic(&dir.join("report.json"), &pretty_json(&report))?;
    write_atomic(&dir.join("config.resolved.json"), cfg.to_json().as_bytes())?;
    Ok(())
}

fn cmd_spectrum(args: &SpectrumArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.common)?;
    let model = build_model(&cfg, 1)?;
    let (lo, hi) = domain_extent(&model.geometry);
    let start = match &args.line_start {
        Some(t) => parse_coords(t, "--line-start")?,
        None => lo,
    };
    let end = match &args.line_end {
        Some(t) => parse_coords(t, "--line-end")?,
        None => hi,
    };
    let line = LineSpec {
        start,
        end,
        samples: args.samples,
    };
    let report = gtk_spectrum(&model, &line)
        .map_err(|e| CliError::Config(format!("spectrum: {e}")))?;

    let total: f64 = report.magnitudes.iter().map(|m| m * m).sum();
    let mut csv = String::from("bin,magnitude,cumulative_energy_fraction\n");
    let mut cum = 0.0;
    for (bin, &m) in report.magnitudes.iter().enumerate() {
        cum += m * m;
        let fraction = if total > 0.0 { cum / total } else { 0.0 };
        let _ = writeln!(csv, "{bin},{},{}", fmt_f64(m), fmt_f64(fraction));
    }
    let _ = writeln!(csv, "hf_fraction,,{}", fmt_f64(report.high_freq_fraction));

    let dir = output_dir(&cfg);
    ensure_dir(&dir)?;
    write_atomic(&dir.join("spectrum.csv"), csv.as_bytes())?;
    write_atomic(&dir.join("config.resolved.json"), cfg.to_json().as_bytes())?;
    Ok(())
}

/// map.csv body: a comment line recording the label range and the two
/// fixed sample coordinates, then the row-major map values.
fn map_csv(map: &BoundMap, samples: &[Vec<f64>]) -> String {
    let coord = |p: &Vec<f64>| {
        p.iter()
            .map(|v| fmt_f64(*v))
            .collect::<Vec<_>>()
            .join(";")
    };
    let mut out = format!(
        "# y_range={},{} sample_1={} sample_2={}\n",
        fmt_f64(map.y_range.0),
        fmt_f64(map.y_range.1),
        coord(&samples[0]),
        coord(&samples[1]),
    );
    for row in map.values.chunks(map.resolution) {
        let cells: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

fn cmd_bound_map(args: &BoundMapArgs) -> Result<(), CliError> {
    let cfg_a = load_config(&args.common)?;
    let cfg_b = match &args.config_b {
        Some(path) => {
            let common_b = CommonArgs {
                config: Some(path.clone()),
                out: args.common.out.clone(),
                seed: args.common.seed,
            };
            load_config(&common_b)?
        }
        None => cfg_a.clone(),
    };
    let model_a = build_model(&cfg_a, 1)?;
    let model_b = build_model(&cfg_b, 1)?;
    if model_a.geometry.dim() != model_b.geometry.dim() {
        return Err(CliError::Config(format!(
            "config error at `geometry`: the two configs have {}D and {}D domains",
            model_a.geometry.dim(),
            model_b.geometry.dim()
        )));
    }

    let samples: Vec<Vec<f64>> = if args.samples.is_empty() {
        let (lo, hi) = domain_extent(&model_a.geometry);
        vec![lerp_point(&lo, &hi, 0.25), lerp_point(&lo, &hi, 0.75)]
    } else {
        if args.samples.len() != 2 {
            return Err(CliError::Config(format!(
                "--sample must be given exactly twice, got {}",
                args.samples.len()
            )));
        }
        let mut pts = Vec::with_capacity(2);
        for text in &args.samples {
            let p = parse_coords(text, "--sample")?;
            if p.len() != model_a.geometry.dim() {
                return Err(CliError::Config(format!(
                    "--sample {text:?} has {} coordinates, the domain is {}D",
                    p.len(),
                    model_a.geometry.dim()
                )));
            }
            pts.push(p);
        }
        pts
    };

    let range = parse_coords(&args.range, "--range")?;
    if range.len() != 2 {
        return Err(CliError::Config(
            "--range must be \"lo,hi\"".to_string(),
        ));
    }
    let gtk_a = gtk_compute(&model_a, &samples);
    let gtk_b = gtk_compute(&model_b, &samples);
    let map = bound_difference_map(&gtk_a, &gtk_b, (range[0], range[1]), args.resolution, MAP_RIDGE)
        .map_err(|e| CliError::Config(format!("bound map: {e}")))?;

    let dir = output_dir(&cfg_a);
    ensure_dir(&dir)?;
    write_atomic(&dir.join("map.csv"), map_csv(&map, &samples).as_bytes())?;
    write_atomic(&dir.join("config.resolved.json"), cfg_a.to_json().as_bytes())?;
    if args.config_b.is_some() {
        write_atomic(&dir.join("config_b.resolved.json"), cfg_b.to_json().as_bytes())?;
    }
    Ok(())
}

/// One entry of the invariant suite report.
#[derive(Debug, Clone)]
pub struct TheoryCheck {
    pub name: &'static str,
    pub residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl TheoryCheck {
    fn new(name: &'static str, residual: f64, tolerance: f64) -> Self {
        TheoryCheck {
            name,
            residual,
            tolerance,
            pass: residual.is_finite() && residual <= tolerance,
        }
    }
}

/// Synthetic regression problem for the invariant suite: uniform points
/// over the domain, uniform targets in [-1, 1], one channel.
pub fn synthetic_dataset(geometry: &GridGeometry, n: usize, seed: u64) -> Dataset {
    let dim = geometry.dim();
    let (lo, hi) = domain_extent(geometry);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..dim)
                .map(|a| rng.gen_range(lo[a]..hi[a]))
                .collect()
        })
        .collect();
    let targets: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect();
    Dataset::new(points, targets, dim, 1).expect("synthetic dataset is well-formed")
}

/// Run the full invariant suite on a model and dataset. Training runs at
/// the configured rate and step count but snapshots every step with drift
/// recording on, which the dynamics checks require.
pub fn run_theory_checks(
    model: &GridModel,
    data: &Dataset,
    train_cfg: &TrainConfig,
) -> Result<Vec<TheoryCheck>, CliError> {
    let mut checks = Vec::new();

    // Kernel identities at the starting parameters.
    let points: Vec<Vec<f64>> = (0..data.len()).map(|i| data.point(i).to_vec()).collect();
    let gtk = gtk_compute(model, &points);
    let z = gradient_matrix(model, &points);
    let equiv = (z.transpose() * &z - gtk.matrix()).abs().max();
    checks.push(TheoryCheck::new("gtk_equivalence", equiv, TOL_GTK_EQUIV));
    checks.push(TheoryCheck::new(
        "gtk_symmetry",
        gtk.symmetry_residual(),
        TOL_GTK_EQUIV,
    ));

    let partition = partition_residual(model, 10_000, train_cfg.seed ^ 0x9e3779b97f4a7c15);
    checks.push(TheoryCheck::new(
        "partition_of_unity",
        partition,
        TOL_PARTITION,
    ));

    // Gradients at a non-trivial feature point so the comparison exercises
    // real values rather than zeros.
    let mut probe = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed ^ 0x5851f42d4c957f2d);
    probe.features = FeatureGrid::random_uniform(
        probe.geometry.node_count(),
        probe.output_dim(),
        0.5,
        &mut rng,
    );
    let grad = gradcheck(&probe, data, 1e-3, 1e-6);
    checks.push(TheoryCheck::new("gradcheck_features", grad.w_rel_err, TOL_GRAD_W));
    if let Some(theta) = grad.theta_rel_err {
        checks.push(TheoryCheck::new("gradcheck_kernel", theta, TOL_GRAD_THETA));
    }

    // Recorded dynamics against the constant-kernel theory.
    let mut trained = model.clone();
    let mut cfg = train_cfg.clone();
    cfg.snapshot_period = 1;
    cfg.record_gtk_drift = true;
    let history = train(&mut trained, data, &cfg)?;
    let drift = history
        .snapshots
        .iter()
        .filter_map(|s| s.gtk_drift)
        .fold(0.0f64, f64::max);
    checks.push(TheoryCheck::new("gtk_stationarity", drift, TOL_STATIONARITY));

    let targets = targets_matrix(data);
    let dynamics = dynamics_residual(&history, &gtk, &targets, cfg.learning_rate)
        .map_err(|e| CliError::Config(format!("dynamics check: {e}")))?;
    checks.push(TheoryCheck::new("one_step_dynamics", dynamics, TOL_DYNAMICS));

    let closed = closed_form_residual(&history, &gtk, &targets, cfg.learning_rate)
        .map_err(|e| CliError::Config(format!("closed-form check: {e}")))?;
    checks.push(TheoryCheck::new("closed_form_trajectory", closed, TOL_CLOSED_FORM));

    let bound = weight_change_bound_check(&history, &gtk, data)
        .map_err(|e| CliError::Config(format!("weight bound check: {e}")))?;
    // Report the overshoot (positive when movement exceeded the bound).
    checks.push(TheoryCheck::new(
        "weight_movement_bound",
        (-bound.margin).max(0.0),
        crate::gtk::BOUND_TOLERANCE,
    ));

    Ok(checks)
}

/// Worst |sum of kernel weights - 1| over random queries, skipping
/// normalization-fallback cases (which are uniform by definition).
fn partition_residual(model: &GridModel, queries: usize, seed: u64) -> f64 {
    let (lo, hi) = domain_extent(&model.geometry);
    let dim = model.geometry.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ctx = EvalContext::new();
    let mut weights = Vec::new();
    let mut worst = 0.0f64;
    for _ in 0..queries {
        let x: Vec<f64> = (0..dim).map(|a| rng.gen_range(lo[a]..hi[a])).collect();
        let idx = model.geometry.index_set(&x);
        weights.resize(idx.len(), 0.0);
        let fallback = ctx.eval(&model.kernel, &model.geometry, &x, &idx, &mut weights);
        if fallback {
            continue;
        }
        let sum: f64 = weights.iter().sum();
        worst = worst.max((sum - 1.0).abs());
    }
    worst
}

fn cmd_theory_check(args: &CommonArgs) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let train_section = cfg.train.as_ref().expect("resolved config");
    if train_section.mode.as_deref() != Some("features_only") {
        return Err(CliError::Config(
            "theory_check requires FeaturesOnly mode (set train.mode to \"features_only\")"
                .to_string(),
        ));
    }
    let model = build_model(&cfg, 1)?;
    let train_cfg = build_train(train_section)?;
    let data = synthetic_dataset(&model.geometry, 32, train_cfg.seed);
    let checks = run_theory_checks(&model, &data, &train_cfg)?;
    let all_pass = checks.iter().all(|c| c.pass);

    let report = json!({
        "all_pass": all_pass,
        "dataset": {"samples": 32, "channels": 1, "seed": train_cfg.seed},
        "checks": checks.iter().map(|c| json!({
            "name": c.name,
            "pass": c.pass,
            "residual": json_f64(c.residual),
            "tolerance": json_f64(c.tolerance),
        })).collect::<Vec<_>>(),
    });
    let dir = output_dir(&cfg);
    ensure_dir(&dir)?;
    write_atomic(&dir.join("report.json"), &pretty_json(&report))?;
    write_atomic(&dir.join("config.resolved.json"), cfg.to_json().as_bytes())?;

    if all_pass {
        Ok(())
    } else {
        let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name).collect();
        Err(CliError::Theory(format!(
            "invariant checks failed: {}",
            failed.join(", ")
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::{TrainHistory, TrainMode, Snapshot};

    #[test]
    fn float_format_has_seventeen_significant_digits() {
        assert_eq!(fmt_f64(0.5), "5.0000000000000000e-1");
        assert_eq!(fmt_f64(1.0 / 3.0), "3.3333333333333331e-1");
        let v = 0.1 + 0.2;
        let back: f64 = fmt_f64(v).parse().unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn json_floats_spell_out_non_finite_values() {
        assert_eq!(json_f64(2.5), json!(2.5));
        assert_eq!(json_f64(f64::INFINITY), json!("inf"));
        assert_eq!(json_f64(f64::NEG_INFINITY), json!("-inf"));
        assert_eq!(json_f64(f64::NAN), json!("nan"));
    }

    #[test]
    fn coordinate_parsing_reports_the_flag() {
        assert_eq!(parse_coords("0.5, 0.25", "--point").unwrap(), vec![0.5, 0.25]);
        let err = parse_coords("0.5,x", "--point").unwrap_err();
        assert!(err.message().contains("--point"), "{}", err.message());
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn history_csv_leaves_unrecorded_drift_blank() {
        let history = TrainHistory {
            mode: TrainMode::FeaturesOnly,
            learning_rate: 0.1,
            loss: vec![1.0, 0.5, 0.25],
            weight_change: vec![0.0, 0.1, 0.2],
            snapshots: vec![
                Snapshot {
                    step: 0,
                    outputs: vec![],
                    gtk_drift: Some(0.0),
                },
                Snapshot {
                    step: 2,
                    outputs: vec![],
                    gtk_drift: Some(3e-16),
                },
            ],
        };
        let csv = history_csv(&history);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,loss,weight_change,gtk_drift");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].ends_with(",0.0000000000000000e0"));
        assert!(lines[2].ends_with(','), "{}", lines[2]);
        assert!(lines[3].ends_with(",2.9999999999999999e-16"));
    }

    #[test]
    fn exit_codes_match_error_classes() {
        assert_eq!(CliError::Config(String::new()).exit_code(), 1);
        assert_eq!(CliError::Io(String::new()).exit_code(), 2);
        assert_eq!(CliError::Diverged(String::new()).exit_code(), 3);
        assert_eq!(CliError::Theory(String::new()).exit_code(), 4);
    }

    #[test]
    fn divergence_maps_to_exit_three_and_other_train_errors_to_one() {
        let diverged: CliError = TrainError::Diverged {
            step: 3,
            loss: f64::INFINITY,
        }
        .into();
        assert_eq!(diverged.exit_code(), 3);
        let bad: CliError = TrainError::BadConfig("steps".to_string()).into();
        assert_eq!(bad.exit_code(), 1);
    }

    #[test]
    fn theory_suite_passes_on_a_default_style_fixture() {
        let cfg = RunConfig::from_json(
            r#"{
              "geometry": {"resolution": [8, 8]},
              "kernel": {"variant": "mulfa", "fourier_size": 8, "stages": 2, "width": 8},
              "train": {"learning_rate": 0.1, "steps": 40}
            }"#,
        )
        .unwrap()
        .resolve()
        .unwrap();
        let model = build_model(&cfg, 1).unwrap();
        let train_cfg = build_train(cfg.train.as_ref().unwrap()).unwrap();
        let data = synthetic_dataset(&model.geometry, 32, train_cfg.seed);
        let checks = run_theory_checks(&model, &data, &train_cfg).unwrap();
        let names: Vec<&str> = checks.iter().map(|c| c.name).collect();
        assert!(names.contains(&"gtk_equivalence"));
        assert!(names.contains(&"gradcheck_kernel"));
        for check in &checks {
            assert!(
                check.pass,
                "{} residual {} over tolerance {}",
                check.name, check.residual, check.tolerance
            );
        }
    }

    #[test]
    fn default_gtk_line_spans_the_domain() {
        let geometry = GridGeometry::regular(vec![4, 4]).unwrap();
        let args = GtkArgs {
            common: CommonArgs {
                config: None,
                out: None,
                seed: None,
            },
            points: vec![],
            line_start: None,
            line_end: None,
            samples: 5,
        };
        let pts = gtk_sample_points(&args, &geometry).unwrap();
        assert_eq!(pts.len(), 5);
        assert_eq!(pts[0], vec![0.0, 0.0]);
        assert_eq!(pts[4], vec![1.0, 1.0]);
    }

    #[test]
    fn explicit_points_must_match_the_grid_dimension() {
        let geometry = GridGeometry::regular(vec![4, 4]).unwrap();
        let args = GtkArgs {
            common: CommonArgs {
                config: None,
                out: None,
                seed: None,
            },
            points: vec!["0.5".to_string()],
            line_start: None,
            line_end: None,
            samples: 8,
        };
        let err = gtk_sample_points(&args, &geometry).unwrap_err();
        assert!(err.message().contains("2D"), "{}", err.message());
    }
}
