//! Experiment drivers: image fitting scored by PSNR and signed distance
//! field reconstruction scored by sign agreement and normal accuracy,
//! plus dense field export for inspection.

pub mod image;
pub mod netpbm;
pub mod sdf;

use serde::Serialize;
use thiserror::Error;

use crate::grid::{Dataset, GridModel};
use crate::train::{train, TrainConfig, TrainError, TrainHistory, Trainer};
use image::{psnr_from_mse, psnr_model, ImageTask};
use netpbm::{encode_pgm, encode_ppm, RawImage};
use sdf::{iou_metric, nae_metric, IouReport, NaeReport, SdfTask};

/// Quality scores at one recorded training step. Image runs fill `psnr`,
/// distance-field runs fill `iou` and `nae`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Metrics {
    pub step: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nae: Option<f64>,
}

/// Outcome of an image fit: the full training history, train-set PSNR at
/// every snapshot, and final PSNR on both pixel splits.
#[derive(Debug, Clone)]
pub struct ImageFitReport {
    pub history: TrainHistory,
    pub metrics: Vec<Metrics>,
    pub train_psnr: f64,
    pub holdout_psnr: f64,
}

/// Mean squared error of recorded outputs against dataset targets.
fn outputs_mse(outputs: &[f64], data: &Dataset) -> f64 {
    let targets = data.targets_flat();
    debug_assert_eq!(outputs.len(), targets.len());
    let sq: f64 = outputs
        .iter()
        .zip(targets)
        .map(|(o, y)| (o - y) * (o - y))
        .sum();
    sq / targets.len() as f64
}

/// Train `model` on the image's train pixels. Snapshot cadence comes from
/// the training config; each snapshot yields a train-set PSNR reading.
/// Divergence aborts the run and is returned as the error.
pub fn fit_image(
    model: &mut GridModel,
    task: &ImageTask,
    cfg: &TrainConfig,
) -> Result<ImageFitReport, TrainError> {
    let data = task.train_dataset();
    let history = train(model, &data, cfg)?;
    let metrics = history
        .snapshots
        .iter()
        .map(|s| Metrics {
            step: s.step,
            psnr: Some(psnr_from_mse(outputs_mse(&s.outputs, &data))),
            iou: None,
            nae: None,
        })
        .collect();
    let train_psnr = psnr_model(model, &data);
    let holdout_psnr = psnr_model(model, &task.holdout_dataset());
    Ok(ImageFitReport {
        history,
        metrics,
        train_psnr,
        holdout_psnr,
    })
}

/// Outcome of a distance-field fit with final grid and normal scores.
#[derive(Debug, Clone)]
pub struct SdfFitReport {
    pub history: TrainHistory,
    pub metrics: Vec<Metrics>,
    pub iou: IouReport,
    pub nae: NaeReport,
}

/// Train `model` on sampled exact distances, scoring sign agreement and
/// normal error at every snapshot step. Scoring needs the live model, so
/// this drives the step loop directly instead of calling [`train`].
pub fn fit_sdf(
    model: &mut GridModel,
    task: &SdfTask,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<SdfFitReport, TrainError> {
    let data = task.build_dataset(seed);
    let mut trainer = Trainer::new(model, &data, cfg.clone())?;
    let score = |m: &GridModel, step: usize| {
        let iou = iou_metric(m, &task.shape, task.eval_resolution);
        let nae = nae_metric(m, &task.shape, task.surface_samples);
        Metrics {
            step,
            psnr: None,
            iou: Some(iou.value),
            nae: Some(nae.degrees),
        }
    };
    let mut metrics = vec![score(trainer.model(), 0)];
    for _ in 0..cfg.steps {
        trainer.step()?;
        let t = trainer.step_index();
        if t % cfg.snapshot_period == 0 || t == cfg.steps {
            metrics.push(score(trainer.model(), t));
        }
    }
    let history = trainer.finish();
    let iou = iou_metric(model, &task.shape, task.eval_resolution);
    let nae = nae_metric(model, &task.shape, task.surface_samples);
    Ok(SdfFitReport {
        history,
        metrics,
        iou,
        nae,
    })
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("export resolution {0} must be at least 2")]
    BadResolution(usize),
    #[error("no export format for a {dim}-dimensional field with {channels} channels")]
    UnsupportedShape { dim: usize, channels: usize },
}

/// A dense field sampling in a writable format. The caller owns file I/O.
#[derive(Debug, Clone)]
pub enum FieldExport {
    /// Grayscale bytes with the affine map back to field units:
    /// value = lo + byte/255 * (hi - lo). A constant field exports as
    /// all-zero bytes with lo == hi.
    Pgm { bytes: Vec<u8>, lo: f64, hi: f64 },
    /// Color bytes; channels are clamped to [0,1] before quantization.
    Ppm { bytes: Vec<u8> },
    /// One `x,y,z,value` row per grid point, x varying fastest.
    Csv { text: String },
}

/// Evaluate the model on a dense cell-center grid, `resolution` per axis.
/// 2D scalar fields become PGM, 2D three-channel fields PPM, 3D scalar
/// fields CSV; other shapes have no defined format.
pub fn export_field(model: &GridModel, resolution: usize) -> Result<FieldExport, ExportError> {
    if resolution < 2 {
        return Err(ExportError::BadResolution(resolution));
    }
    let dim = model.geometry.dim();
    let channels = model.output_dim();
    match (dim, channels) {
        (2, 1) => {
            let values = sample_plane(model, resolution, 1);
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let span = hi - lo;
            let normalized: Vec<f64> = if span > 0.0 {
                values.iter().map(|v| (v - lo) / span).collect()
            } else {
                vec![0.0; values.len()]
            };
            let img = RawImage::new(resolution, resolution, 1, normalized);
            Ok(FieldExport::Pgm {
                bytes: encode_pgm(&img),
                lo,
                hi,
            })
        }
        (2, 3) => {
            let values = sample_plane(model, resolution, 3);
            let img = RawImage::new(
                resolution,
                resolution,
                3,
                values.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            );
            Ok(FieldExport::Ppm {
                bytes: encode_ppm(&img),
            })
        }
        (3, 1) => {
            let mut text = String::from("x,y,z,value\n");
            let mut out = [0.0];
            for k in 0..resolution {
                let z = (k as f64 + 0.5) / resolution as f64;
                for j in 0..resolution {
                    let y = (j as f64 + 0.5) / resolution as f64;
                    for i in 0..resolution {
                        let x = (i as f64 + 0.5) / resolution as f64;
                        model.forward_into(&[x, y, z], &mut out);
                        text.push_str(&format!(
                            "{x:.16e},{y:.16e},{z:.16e},{:.16e}\n",
                            out[0]
                        ));
                    }
                }
            }
            Ok(FieldExport::Csv { text })
        }
        _ => Err(ExportError::UnsupportedShape { dim, channels }),
    }
}

/// Row-major sampling of a 2D model at pixel centers, matching the image
/// coordinate convention (row maps to the first axis).
fn sample_plane(model: &GridModel, resolution: usize, channels: usize) -> Vec<f64> {
    let mut values = Vec::with_capacity(resolution * resolution * channels);
    let mut out = vec![0.0; channels];
    for r in 0..resolution {
        for c in 0..resolution {
            let x = [
                (r as f64 + 0.5) / resolution as f64,
                (c as f64 + 0.5) / resolution as f64,
            ];
            model.forward_into(&x, &mut out);
            values.extend_from_slice(&out);
        }
    }
    values
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{FeatureGrid, GridGeometry};
    use crate::kernel::KernelSpec;
    use crate::task::netpbm::decode;
    use crate::task::sdf::Shape;
    use crate::train::TrainMode;

    fn constant_image(h: usize, w: usize, value: f64) -> ImageTask {
        ImageTask::new(RawImage::new(h, w, 1, vec![value; h * w])).unwrap()
    }

    /// Smooth two-channel-free test image: a low-frequency ramp plus bump.
    fn smooth_image(n: usize) -> ImageTask {
        let mut data = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                let x = (r as f64 + 0.5) / n as f64;
                let y = (c as f64 + 0.5) / n as f64;
                let v = 0.3 + 0.3 * x + 0.2 * (std::f64::consts::TAU * y).sin().powi(2);
                data.push(v.clamp(0.0, 1.0));
            }
        }
        ImageTask::new(RawImage::new(n, n, 1, data)).unwrap()
    }

    fn fresh_model(dim: usize, res: usize, channels: usize) -> GridModel {
        let geometry = GridGeometry::regular(vec![res; dim]).unwrap();
        let features = FeatureGrid::zeros(geometry.node_count(), channels);
        GridModel::new(geometry, KernelSpec::Multilinear, features).unwrap()
    }

    fn sampled_model(res: usize, f: impl Fn(&[f64]) -> f64) -> GridModel {
        let geometry = GridGeometry::regular(vec![res, res]).unwrap();
        let m = geometry.node_count();
        let mut features = FeatureGrid::zeros(m, 1);
        for i in 0..m {
            features.node_mut(i)[0] = f(&geometry.node_position(i));
        }
        GridModel::new(geometry, KernelSpec::Multilinear, features).unwrap()
    }

    #[test]
    fn constant_image_is_fit_exactly_by_constant_features() {
        // The kernel weights sum to one, so equal features reproduce a
        // constant exactly and the score is infinite.
        let task = constant_image(4, 4, 0.5);
        let geometry = GridGeometry::regular(vec![3, 3]).unwrap();
        let mut features = FeatureGrid::zeros(9, 1);
        for i in 0..9 {
            features.node_mut(i)[0] = 0.5;
        }
        let model = GridModel::new(geometry, KernelSpec::Multilinear, features).unwrap();
        assert_eq!(psnr_model(&model, &task.train_dataset()), f64::INFINITY);
        assert_eq!(psnr_model(&model, &task.holdout_dataset()), f64::INFINITY);
    }

    #[test]
    fn constant_image_trains_to_near_machine_exactness() {
        // A 2x2 node grid on 12 train pixels has a unique exact fit (the
        // constant), so descent reaches it on both pixel splits. Denser
        // grids leave train-invisible feature directions that the held-out
        // pixels would see.
        let task = constant_image(4, 4, 0.5);
        let mut model = fresh_model(2, 2, 1);
        let report = fit_image(&mut model, &task, &TrainConfig::features_only(0.5, 800)).unwrap();
        assert!(
            report.train_psnr > 300.0,
            "train psnr {}",
            report.train_psnr
        );
        assert!(
            report.holdout_psnr > 300.0,
            "holdout psnr {}",
            report.holdout_psnr
        );
    }

    #[test]
    fn image_metrics_follow_snapshot_cadence() {
        let task = smooth_image(8);
        let mut model = fresh_model(2, 4, 1);
        let mut cfg = TrainConfig::features_only(0.2, 10);
        cfg.snapshot_period = 4;
        let report = fit_image(&mut model, &task, &cfg).unwrap();
        let steps: Vec<usize> = report.metrics.iter().map(|m| m.step).collect();
        assert_eq!(steps, vec![0, 4, 8, 10]);
        assert_eq!(report.metrics.len(), report.history.snapshots.len());
        // Training a smooth image from zero raises the score.
        assert!(report.metrics[3].psnr.unwrap() > report.metrics[0].psnr.unwrap());
    }

    #[test]
    fn holdout_tracks_train_on_smooth_images() {
        let task = smooth_image(16);
        let mut model = fresh_model(2, 8, 1);
        let report = fit_image(&mut model, &task, &TrainConfig::features_only(0.2, 1200)).unwrap();
        assert!(report.train_psnr > 30.0, "train psnr {}", report.train_psnr);
        assert!(
            report.holdout_psnr <= report.train_psnr + 0.5,
            "holdout {} vs train {}",
            report.holdout_psnr,
            report.train_psnr
        );
    }

    #[test]
    fn image_divergence_is_propagated() {
        let task = smooth_image(8);
        let mut model = fresh_model(2, 4, 1);
        let err = fit_image(&mut model, &task, &TrainConfig::features_only(1e6, 200));
        assert!(matches!(err, Err(TrainError::Diverged { .. })));
    }

    #[test]
    fn sdf_fit_recovers_a_circle() {
        let shape = Shape::Circle {
            center: [0.5, 0.5],
            radius: 0.25,
        };
        let task = SdfTask::new(shape, 200, 200, 32).unwrap();
        let mut model = fresh_model(2, 9, 1);
        let mut cfg = TrainConfig::features_only(0.05, 300);
        cfg.snapshot_period = 150;
        let report = fit_sdf(&mut model, &task, &cfg, 7).unwrap();
        assert!(report.iou.value > 0.9, "iou {}", report.iou.value);
        assert!(report.nae.degrees < 20.0, "nae {}", report.nae.degrees);
        let steps: Vec<usize> = report.metrics.iter().map(|m| m.step).collect();
        assert_eq!(steps, vec![0, 150, 300]);
        assert_eq!(report.metrics.len(), report.history.snapshots.len());
        // The zero-feature start predicts an empty shape; training fills it.
        assert!(report.metrics[2].iou.unwrap() > report.metrics[0].iou.unwrap());
    }

    #[test]
    fn sdf_mode_and_divergence_pass_through() {
        let shape = Shape::Circle {
            center: [0.5, 0.5],
            radius: 0.25,
        };
        let task = SdfTask::new(shape, 50, 50, 16).unwrap();
        let mut model = fresh_model(2, 5, 1);
        let err = fit_sdf(&mut model, &task, &TrainConfig::features_only(1e9, 50), 0);
        assert!(matches!(err, Err(TrainError::Diverged { .. })));
        // The diverged model is poisoned; restart from a fresh one.
        let mut model = fresh_model(2, 5, 1);
        let report = fit_sdf(
            &mut model,
            &task,
            &TrainConfig::features_only(0.05, 5),
            0,
        )
        .unwrap();
        assert_eq!(report.history.mode, TrainMode::FeaturesOnly);
    }

    #[test]
    fn pgm_export_round_trips_exactly() {
        let model = sampled_model(9, |x| (x[0] - x[1]).sin());
        let export = export_field(&model, 16).unwrap();
        let FieldExport::Pgm { bytes, lo, hi } = export else {
            panic!("expected grayscale export");
        };
        assert!(lo < hi);
        let decoded = decode(&bytes).unwrap();
        assert_eq!(decoded.height, 16);
        assert_eq!(decoded.width, 16);
        // Re-encoding the decoded image reproduces the bytes: the 8-bit
        // quantization is a fixed point after one application.
        assert_eq!(encode_pgm(&decoded), bytes);
    }

    #[test]
    fn constant_field_exports_flat_zero_with_degenerate_map() {
        let geometry = GridGeometry::regular(vec![3, 3]).unwrap();
        let mut features = FeatureGrid::zeros(9, 1);
        for i in 0..9 {
            features.node_mut(i)[0] = 0.75;
        }
        let model = GridModel::new(geometry, KernelSpec::Multilinear, features).unwrap();
        let FieldExport::Pgm { bytes, lo, hi } = export_field(&model, 8).unwrap() else {
            panic!("expected grayscale export");
        };
        assert_eq!(lo, hi);
        assert!((lo - 0.75).abs() < 1e-12);
        let decoded = decode(&bytes).unwrap();
        assert!(decoded.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rgb_export_clamps_and_quantizes() {
        let geometry = GridGeometry::regular(vec![2, 2]).unwrap();
        let mut features = FeatureGrid::zeros(4, 3);
        for i in 0..4 {
            features.node_mut(i).copy_from_slice(&[1.5, 0.5, -0.2]);
        }
        let model = GridModel::new(geometry, KernelSpec::Multilinear, features).unwrap();
        let FieldExport::Ppm { bytes } = export_field(&model, 4).unwrap() else {
            panic!("expected color export");
        };
        let decoded = decode(&bytes).unwrap();
        assert_eq!(decoded.channels, 3);
        for p in decoded.data.chunks(3) {
            assert_eq!(p[0], 1.0);
            assert!((p[1] - 128.0 / 255.0).abs() < 1e-12);
            assert_eq!(p[2], 0.0);
        }
    }

    #[test]
    fn volume_export_lists_cell_centers_with_x_fastest() {
        let geometry = GridGeometry::regular(vec![2, 2, 2]).unwrap();
        let features = FeatureGrid::zeros(8, 1);
        let model = GridModel::new(geometry, KernelSpec::Multilinear, features).unwrap();
        let FieldExport::Csv { text } = export_field(&model, 2).unwrap() else {
            panic!("expected volume export");
        };
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 8);
        assert_eq!(lines[0], "x,y,z,value");
        let first: Vec<f64> = lines[1].split(',').map(|v| v.parse().unwrap()).collect();
        let second: Vec<f64> = lines[2].split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(&first[..3], &[0.25, 0.25, 0.25]);
        // x advances first.
        assert_eq!(&second[..3], &[0.75, 0.25, 0.25]);
    }

    #[test]
    fn unsupported_export_shapes_are_rejected() {
        let model = fresh_model(2, 3, 2);
        assert!(matches!(
            export_field(&model, 8),
            Err(ExportError::UnsupportedShape {
                dim: 2,
                channels: 2
            })
        ));
        let small = fresh_model(2, 3, 1);
        assert!(matches!(
            export_field(&small, 1),
            Err(ExportError::BadResolution(1))
        ));
    }

    #[test]
    fn exported_circle_zero_level_matches_circumference() {
        // Export the exact distance field of a circle, reconstruct values
        // through the sidecar map, and count pixels within half a pixel of
        // the zero level. For a distance field that band is one pixel wide
        // along the curve, so the count estimates the circumference in
        // pixel units.
        let radius = 0.25;
        let shape = Shape::Circle {
            center: [0.5, 0.5],
            radius,
        };
        let model = sampled_model(65, |x| shape.sdf(x));
        let res = 64usize;
        let FieldExport::Pgm { bytes, lo, hi } = export_field(&model, res).unwrap() else {
            panic!("expected grayscale export");
        };
        let decoded = decode(&bytes).unwrap();
        // Quantization snaps values to a lattice of step (hi-lo)/255;
        // shrinking the threshold by half a step keeps the effective band
        // at the intended one-pixel width.
        let threshold = 0.5 / res as f64 - 0.5 * (hi - lo) / 255.0;
        let count = decoded
            .data
            .iter()
            .map(|v| lo + v * (hi - lo))
            .filter(|v| v.abs() <= threshold)
            .count();
        let expected = std::f64::consts::TAU * radius * res as f64;
        let err = (count as f64 - expected).abs() / expected;
        assert!(
            err <= 0.10,
            "zero-level count {count} vs expected {expected:.1}"
        );
    }
}
