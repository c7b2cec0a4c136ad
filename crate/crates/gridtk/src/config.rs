//! Run configuration: a strict JSON document with five sections, each
//! optional, each with documented defaults. Unknown keys are rejected so a
//! typo cannot silently fall back to a default and invalidate a fixture.
//!
//! [`RunConfig::resolve`] fills every applicable default and returns a
//! config that serializes to `config.resolved.json`; feeding that file back
//! in reproduces the run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Bounds, GridGeometry};
use crate::kernel::{KernelSpec, MulFaParams};
use crate::task::sdf::Shape;
use crate::train::{BatchSpec, TrainConfig, TrainMode};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config error at `{key}`: {message}")]
    Invalid { key: String, message: String },
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.into(),
    }
}

/// Top-level document. Every section and every key inside a section may be
/// omitted; [`RunConfig::resolve`] applies the defaults listed on each
/// field. Unknown keys anywhere are parse errors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<GeometrySection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputSection>,
}

/// Node layout. Defaults: `kind` "regular", `resolution` 16 per axis (two
/// axes, or three when the task shape is 3D), `bounds` the unit box.
/// Irregular grids require `points`; `k` defaults to 2^dim.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BoundsSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSection {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

/// Kernel choice. Defaults: `variant` "multilinear". For "gaussian",
/// `sigma` defaults to the grid's mean nearest-node distance. For "mulfa":
/// `fourier_size` 16, `stages` 2, `width` 16, `init` "tame", `seed` 0.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fourier_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stages: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    /// Parameter draw: "tame" biases raw sums away from zero for stable
    /// training; "centered" draws zero-mean sums for maximum node
    /// contrast (used in kernel-character studies).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Training loop. Defaults: `mode` "features_only", `learning_rate` 0.1,
/// `steps` 2000, `batch` "full", `snapshot_period` = steps,
/// `record_gtk_drift` false, `seed` 0. `kernel_learning_rate` defaults to
/// a tenth of the feature rate (kernel-training modes only); `period`
/// (decoupled alternation) defaults to 10.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<BatchKey>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_period: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_gtk_drift: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Batch size: the string "full" or a positive sample count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BatchKey {
    Count(usize),
    Mode(String),
}

/// What to fit. `image` (a PGM/PPM path) has no default and is required by
/// the image command. `shape` defaults to a circle at (0.5, 0.5) with
/// radius 0.25; `volume_samples` and `surface_samples` default to 2048,
/// `eval_resolution` to 64.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<ShapeSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volume_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surface_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_resolution: Option<usize>,
}

/// Shape spec: `kind` is "circle", "box", "sphere", or "torus"; the other
/// keys apply per kind (`radius` for circle/sphere, `half_extents` for
/// box, `major`/`minor` for torus).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub half_extents: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub major: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub minor: Option<f64>,
}

/// Artifact destination. `directory` defaults to "out".
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directory: Option<String>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Fill every applicable default and validate enumerated keys. The
    /// result resolves to itself, so serializing it yields a config that
    /// reproduces the run.
    pub fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let task = self.resolve_task()?;
        let shape_dim = task
            .shape
            .as_ref()
            .and_then(|s| s.center.as_ref())
            .map(|c| c.len());
        let geometry = self.resolve_geometry(shape_dim)?;
        let kernel = self.resolve_kernel(&geometry)?;
        let train = self.resolve_train()?;
        let output = OutputSection {
            directory: Some(
                self.output
                    .as_ref()
                    .and_then(|o| o.directory.clone())
                    .unwrap_or_else(|| "out".to_string()),
            ),
        };
        Ok(RunConfig {
            geometry: Some(geometry),
            kernel: Some(kernel),
            train: Some(train),
            task: Some(task),
            output: Some(output),
        })
    }

    fn resolve_geometry(
        &self,
        shape_dim: Option<usize>,
    ) -> Result<GeometrySection, ConfigError> {
        let geo = self.geometry.clone().unwrap_or_default();
        let kind = geo.kind.clone().unwrap_or_else(|| "regular".to_string());
        match kind.as_str() {
            "regular" => {
                let resolution = geo
                    .resolution
                    .clone()
                    .unwrap_or_else(|| vec![16; shape_dim.unwrap_or(2)]);
                if resolution.is_empty() {
                    return Err(invalid("geometry.resolution", "must list at least one axis"));
                }
                let bounds = geo.bounds.clone().unwrap_or_else(|| BoundsSection {
                    min: vec![0.0; resolution.len()],
                    max: vec![1.0; resolution.len()],
                });
                Ok(GeometrySection {
                    kind: Some(kind),
                    resolution: Some(resolution),
                    bounds: Some(bounds),
                    points: None,
                    k: None,
                })
            }
            "irregular" => {
                let points = geo.points.clone().ok_or_else(|| {
                    invalid("geometry.points", "required for irregular grids")
                })?;
                let dim = points.first().map(|p| p.len()).unwrap_or(0);
                let k = geo.k.unwrap_or_else(|| 1usize << dim);
                Ok(GeometrySection {
                    kind: Some(kind),
                    resolution: None,
                    bounds: None,
                    points: Some(points),
                    k: Some(k),
                })
            }
            other => Err(invalid(
                "geometry.kind",
                format!("unknown kind {other:?}, expected \"regular\" or \"irregular\""),
            )),
        }
    }

    fn resolve_kernel(&self, geometry: &GeometrySection) -> Result<KernelSection, ConfigError> {
        let k = self.kernel.clone().unwrap_or_default();
        let variant = k
            .variant
            .clone()
            .unwrap_or_else(|| "multilinear".to_string());
        match variant.as_str() {
            "multilinear" => Ok(KernelSection {
                variant: Some(variant),
                ..Default::default()
            }),
            "gaussian" => {
                let sigma = match k.sigma {
                    Some(s) => s,
                    None => build_geometry(geometry)?
                        .mean_nearest_node_distance()
                        .ok_or_else(|| {
                            invalid("kernel.sigma", "no default bandwidth for a single node")
                        })?,
                };
                Ok(KernelSection {
                    variant: Some(variant),
                    sigma: Some(sigma),
                    ..Default::default()
                })
            }
            "mulfa" => {
                let init = k.init.clone().unwrap_or_else(|| "tame".to_string());
                if init != "tame" && init != "centered" {
                    return Err(invalid(
                        "kernel.init",
                        format!("unknown draw {init:?}, expected \"tame\" or \"centered\""),
                    ));
                }
                Ok(KernelSection {
                    variant: Some(variant),
                    sigma: None,
                    fourier_size: Some(k.fourier_size.unwrap_or(16)),
                    stages: Some(k.stages.unwrap_or(2)),
                    width: Some(k.width.unwrap_or(16)),
                    init: Some(init),
                    seed: Some(k.seed.unwrap_or(0)),
                })
            }
            other => Err(invalid(
                "kernel.variant",
                format!(
                    "unknown variant {other:?}, expected \"multilinear\", \"gaussian\", or \"mulfa\""
                ),
            )),
        }
    }

    fn resolve_train(&self) -> Result<TrainSection, ConfigError> {
        let t = self.train.clone().unwrap_or_default();
        let mode = t
            .mode
            .clone()
            .unwrap_or_else(|| "features_only".to_string());
        let trains_kernel = match mode.as_str() {
            "features_only" => false,
            "joint" | "decoupled" => true,
            other => {
                return Err(invalid(
                    "train.mode",
                    format!(
                        "unknown mode {other:?}, expected \"features_only\", \"joint\", or \"decoupled\""
                    ),
                ))
            }
        };
        let learning_rate = t.learning_rate.unwrap_or(0.1);
        let steps = t.steps.unwrap_or(2000);
        if let Some(BatchKey::Mode(word)) = &t.batch {
            if word != "full" {
                return Err(invalid(
                    "train.batch",
                    format!("expected \"full\" or a positive count, got {word:?}"),
                ));
            }
        }
        Ok(TrainSection {
            mode: Some(mode.clone()),
            period: if mode == "decoupled" {
                Some(t.period.unwrap_or(10))
            } else {
                None
            },
            learning_rate: Some(learning_rate),
            kernel_learning_rate: if trains_kernel {
                Some(t.kernel_learning_rate.unwrap_or(0.1 * learning_rate))
            } else {
                None
            },
            steps: Some(steps),
            batch: Some(
                t.batch
                    .clone()
                    .unwrap_or(BatchKey::Mode("full".to_string())),
            ),
            snapshot_period: Some(t.snapshot_period.unwrap_or(steps.max(1))),
            record_gtk_drift: Some(t.record_gtk_drift.unwrap_or(false)),
            seed: Some(t.seed.unwrap_or(0)),
        })
    }

    fn resolve_task(&self) -> Result<TaskSection, ConfigError> {
        let t = self.task.clone().unwrap_or_default();
        let shape = t.shape.clone().unwrap_or_default();
        let kind = shape.kind.clone().unwrap_or_else(|| "circle".to_string());
        let default_center = match kind.as_str() {
            "circle" | "box" => vec![0.5, 0.5],
            "sphere" | "torus" => vec![0.5, 0.5, 0.5],
            other => {
                return Err(invalid(
                    "task.shape.kind",
                    format!(
                        "unknown kind {other:?}, expected \"circle\", \"box\", \"sphere\", or \"torus\""
                    ),
                ))
            }
        };
        let resolved_shape = ShapeSection {
            kind: Some(kind.clone()),
            center: Some(shape.center.clone().unwrap_or(default_center)),
            radius: match kind.as_str() {
                "circle" | "sphere" => Some(shape.radius.unwrap_or(0.25)),
                _ => None,
            },
            half_extents: if kind == "box" {
                Some(
                    shape
                        .half_extents
                        .clone()
                        .unwrap_or_else(|| vec![0.25, 0.25]),
                )
            } else {
                None
            },
            major: if kind == "torus" {
                Some(shape.major.unwrap_or(0.25))
            } else {
                None
            },
            minor: if kind == "torus" {
                Some(shape.minor.unwrap_or(0.08))
            } else {
                None
            },
        };
        Ok(TaskSection {
            image: t.image.clone(),
            shape: Some(resolved_shape),
            volume_samples: Some(t.volume_samples.unwrap_or(2048)),
            surface_samples: Some(t.surface_samples.unwrap_or(2048)),
            eval_resolution: Some(t.eval_resolution.unwrap_or(64)),
        })
    }
}

/// Construct the node layout from a resolved geometry section.
pub fn build_geometry(geo: &GeometrySection) -> Result<GridGeometry, ConfigError> {
    match geo.kind.as_deref() {
        Some("regular") => {
            let resolution = geo
                .resolution
                .clone()
                .ok_or_else(|| invalid("geometry.resolution", "missing"))?;
            let bounds = match &geo.bounds {
                Some(b) => Bounds {
                    min: b.min.clone(),
                    max: b.max.clone(),
                },
                None => Bounds::unit(resolution.len()),
            };
            GridGeometry::regular_with_bounds(resolution, bounds)
                .map_err(|e| invalid("geometry", e.to_string()))
        }
        Some("irregular") => {
            let points = geo
                .points
                .clone()
                .ok_or_else(|| invalid("geometry.points", "missing"))?;
            let k = geo.k.unwrap_or(1);
            GridGeometry::irregular(points, k).map_err(|e| invalid("geometry", e.to_string()))
        }
        other => Err(invalid(
            "geometry.kind",
            format!("unresolved kind {other:?}"),
        )),
    }
}

/// Construct the kernel from a resolved kernel section.
pub fn build_kernel(
    kernel: &KernelSection,
    geometry: &GridGeometry,
) -> Result<KernelSpec, ConfigError> {
    match kernel.variant.as_deref() {
        Some("multilinear") => Ok(KernelSpec::Multilinear),
        Some("gaussian") => {
            let sigma = kernel
                .sigma
                .ok_or_else(|| invalid("kernel.sigma", "missing"))?;
            if !(sigma.is_finite() && sigma > 0.0) {
                return Err(invalid("kernel.sigma", "must be positive and finite"));
            }
            Ok(KernelSpec::GaussianRbf { sigma })
        }
        Some("mulfa") => {
            let fourier_size = kernel
                .fourier_size
                .ok_or_else(|| invalid("kernel.fourier_size", "missing"))?;
            let stages = kernel.stages.unwrap_or(2);
            let width = kernel.width.unwrap_or(16);
            if stages == 0 {
                return Err(invalid("kernel.stages", "must be at least 1"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(kernel.seed.unwrap_or(0));
            let params = match kernel.init.as_deref() {
                Some("centered") => MulFaParams::init_centered(
                    geometry.dim(),
                    fourier_size,
                    stages,
                    width,
                    &mut rng,
                ),
                _ => MulFaParams::init(geometry.dim(), fourier_size, stages, width, &mut rng),
            };
            params
                .validate()
                .map_err(|e| invalid("kernel", e.to_string()))?;
            Ok(KernelSpec::MulFa(params))
        }
        other => Err(invalid(
            "kernel.variant",
            format!("unresolved variant {other:?}"),
        )),
    }
}

/// Construct the training config from a resolved train section.
pub fn build_train(train: &TrainSection) -> Result<TrainConfig, ConfigError> {
    let mode = match train.mode.as_deref() {
        Some("features_only") => TrainMode::FeaturesOnly,
        Some("joint") => TrainMode::Joint,
        Some("decoupled") => TrainMode::Decoupled {
            period: train.period.unwrap_or(10),
        },
        other => return Err(invalid("train.mode", format!("unresolved mode {other:?}"))),
    };
    let batch = match &train.batch {
        None | Some(BatchKey::Mode(_)) => BatchSpec::Full,
        Some(BatchKey::Count(n)) => {
            if *n == 0 {
                return Err(invalid("train.batch", "count must be positive"));
            }
            BatchSpec::Minibatch(*n)
        }
    };
    let steps = train.steps.unwrap_or(2000);
    Ok(TrainConfig {
        mode,
        learning_rate: train.learning_rate.unwrap_or(0.1),
        kernel_learning_rate: train.kernel_learning_rate,
        steps,
        batch,
        snapshot_period: train.snapshot_period.unwrap_or(steps.max(1)),
        record_gtk_drift: train.record_gtk_drift.unwrap_or(false),
        seed: train.seed.unwrap_or(0),
    })
}

/// Construct the analytic shape from a resolved shape section.
pub fn build_shape(shape: &ShapeSection) -> Result<Shape, ConfigError> {
    let center = shape
        .center
        .clone()
        .ok_or_else(|| invalid("task.shape.center", "missing"))?;
    let need_dim = |want: usize| {
        if center.len() == want {
            Ok(())
        } else {
            Err(invalid(
                "task.shape.center",
                format!("needs {want} coordinates, got {}", center.len()),
            ))
        }
    };
    let built = match shape.kind.as_deref() {
        Some("circle") => {
            need_dim(2)?;
            Shape::Circle {
                center: [center[0], center[1]],
                radius: shape
                    .radius
                    .ok_or_else(|| invalid("task.shape.radius", "missing"))?,
            }
        }
        Some("sphere") => {
            need_dim(3)?;
            Shape::Sphere {
                center: [center[0], center[1], center[2]],
                radius: shape
                    .radius
                    .ok_or_else(|| invalid("task.shape.radius", "missing"))?,
            }
        }
        Some("box") => Shape::Box {
            center,
            half_extents: shape
                .half_extents
                .clone()
                .ok_or_else(|| invalid("task.shape.half_extents", "missing"))?,
        },
        Some("torus") => {
            need_dim(3)?;
            Shape::Torus {
                center: [center[0], center[1], center[2]],
                major: shape
                    .major
                    .ok_or_else(|| invalid("task.shape.major", "missing"))?,
                minor: shape
                    .minor
                    .ok_or_else(|| invalid("task.shape.minor", "missing"))?,
            }
        }
        other => {
            return Err(invalid(
                "task.shape.kind",
                format!("unresolved kind {other:?}"),
            ))
        }
    };
    built
        .validate()
        .map_err(|e| invalid("task.shape", e.to_string()))?;
    Ok(built)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_resolves_to_full_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        let resolved = cfg.resolve().unwrap();
        let geo = resolved.geometry.as_ref().unwrap();
        assert_eq!(geo.kind.as_deref(), Some("regular"));
        assert_eq!(geo.resolution.as_deref(), Some(&[16, 16][..]));
        let train = resolved.train.as_ref().unwrap();
        assert_eq!(train.mode.as_deref(), Some("features_only"));
        assert_eq!(train.learning_rate, Some(0.1));
        assert_eq!(train.steps, Some(2000));
        assert_eq!(train.snapshot_period, Some(2000));
        let task = resolved.task.as_ref().unwrap();
        assert_eq!(
            task.shape.as_ref().unwrap().kind.as_deref(),
            Some("circle")
        );
        assert!(task.image.is_none());
        assert_eq!(
            resolved.output.as_ref().unwrap().directory.as_deref(),
            Some("out")
        );
    }

    #[test]
    fn unknown_keys_are_parse_errors_naming_the_key() {
        let err = RunConfig::from_json(r#"{"train": {"learning_rte": 0.1}}"#).unwrap_err();
        assert!(err.to_string().contains("learning_rte"), "{err}");
        let err = RunConfig::from_json(r#"{"trainn": {}}"#).unwrap_err();
        assert!(err.to_string().contains("trainn"), "{err}");
    }

    #[test]
    fn explicit_values_survive_resolution() {
        let cfg = RunConfig::from_json(
            r#"{
              "geometry": {"resolution": [8, 8, 8]},
              "train": {"learning_rate": 0.05, "steps": 100, "snapshot_period": 25}
            }"#,
        )
        .unwrap();
        let resolved = cfg.resolve().unwrap();
        assert_eq!(
            resolved.geometry.unwrap().resolution.as_deref(),
            Some(&[8, 8, 8][..])
        );
        let train = resolved.train.unwrap();
        assert_eq!(train.learning_rate, Some(0.05));
        assert_eq!(train.snapshot_period, Some(25));
    }

    #[test]
    fn resolution_is_idempotent_and_round_trips() {
        let cfg = RunConfig::from_json(
            r#"{"kernel": {"variant": "mulfa", "fourier_size": 8}, "train": {"mode": "joint"}}"#,
        )
        .unwrap();
        let resolved = cfg.resolve().unwrap();
        let reparsed = RunConfig::from_json(&resolved.to_json()).unwrap();
        assert_eq!(reparsed, resolved);
        assert_eq!(reparsed.resolve().unwrap(), resolved);
    }

    #[test]
    fn three_dimensional_shapes_grow_the_default_grid() {
        let cfg =
            RunConfig::from_json(r#"{"task": {"shape": {"kind": "sphere"}}}"#).unwrap();
        let resolved = cfg.resolve().unwrap();
        assert_eq!(
            resolved.geometry.unwrap().resolution.as_deref(),
            Some(&[16, 16, 16][..])
        );
    }

    #[test]
    fn bad_enumerations_name_their_key() {
        let bad_mode = RunConfig::from_json(r#"{"train": {"mode": "sgd"}}"#)
            .unwrap()
            .resolve()
            .unwrap_err();
        assert!(bad_mode.to_string().contains("train.mode"), "{bad_mode}");
        let bad_variant = RunConfig::from_json(r#"{"kernel": {"variant": "cubic"}}"#)
            .unwrap()
            .resolve()
            .unwrap_err();
        assert!(
            bad_variant.to_string().contains("kernel.variant"),
            "{bad_variant}"
        );
        let bad_kind = RunConfig::from_json(r#"{"task": {"shape": {"kind": "cone"}}}"#)
            .unwrap()
            .resolve()
            .unwrap_err();
        assert!(
            bad_kind.to_string().contains("task.shape.kind"),
            "{bad_kind}"
        );
        let bad_batch = RunConfig::from_json(r#"{"train": {"batch": "half"}}"#)
            .unwrap()
            .resolve()
            .unwrap_err();
        assert!(bad_batch.to_string().contains("train.batch"), "{bad_batch}");
    }

    #[test]
    fn builders_produce_working_objects() {
        let cfg = RunConfig::from_json(
            r#"{
              "geometry": {"resolution": [4, 4]},
              "kernel": {"variant": "mulfa", "fourier_size": 8, "stages": 2, "width": 8},
              "train": {"mode": "decoupled", "period": 5, "steps": 20}
            }"#,
        )
        .unwrap()
        .resolve()
        .unwrap();
        let geometry = build_geometry(cfg.geometry.as_ref().unwrap()).unwrap();
        assert_eq!(geometry.dim(), 2);
        assert_eq!(geometry.node_count(), 16);
        let kernel = build_kernel(cfg.kernel.as_ref().unwrap(), &geometry).unwrap();
        assert!(kernel.is_trainable());
        let train = build_train(cfg.train.as_ref().unwrap()).unwrap();
        assert_eq!(train.mode, TrainMode::Decoupled { period: 5 });
        assert_eq!(train.steps, 20);
        assert_eq!(train.snapshot_period, 20);
    }

    #[test]
    fn gaussian_bandwidth_defaults_to_node_spacing() {
        let cfg = RunConfig::from_json(
            r#"{"geometry": {"resolution": [5, 5]}, "kernel": {"variant": "gaussian"}}"#,
        )
        .unwrap()
        .resolve()
        .unwrap();
        let sigma = cfg.kernel.as_ref().unwrap().sigma.unwrap();
        // 5 nodes per axis over the unit box: nearest neighbors sit 0.25
        // apart everywhere.
        assert!((sigma - 0.25).abs() < 1e-12, "sigma {sigma}");
    }

    #[test]
    fn irregular_geometry_builds_from_points() {
        let cfg = RunConfig::from_json(
            r#"{"geometry": {"kind": "irregular", "points": [[0.1, 0.2], [0.8, 0.3], [0.4, 0.9]], "k": 2}}"#,
        )
        .unwrap()
        .resolve()
        .unwrap();
        let geometry = build_geometry(cfg.geometry.as_ref().unwrap()).unwrap();
        assert_eq!(geometry.node_count(), 3);
        let missing = RunConfig::from_json(r#"{"geometry": {"kind": "irregular"}}"#)
            .unwrap()
            .resolve()
            .unwrap_err();
        assert!(
            missing.to_string().contains("geometry.points"),
            "{missing}"
        );
    }

    #[test]
    fn shapes_build_and_validate() {
        let circle = build_shape(
            &RunConfig::from_json(r#"{"task": {"shape": {"kind": "circle", "radius": 0.3}}}"#)
                .unwrap()
                .resolve()
                .unwrap()
                .task
                .unwrap()
                .shape
                .unwrap(),
        )
        .unwrap();
        assert_eq!(
            circle,
            Shape::Circle {
                center: [0.5, 0.5],
                radius: 0.3
            }
        );
        let escape = RunConfig::from_json(
            r#"{"task": {"shape": {"kind": "circle", "center": [0.9, 0.5], "radius": 0.3}}}"#,
        )
        .unwrap()
        .resolve()
        .unwrap();
        let err = build_shape(escape.task.unwrap().shape.as_ref().unwrap()).unwrap_err();
        assert!(err.to_string().contains("task.shape"), "{err}");
    }

    #[test]
    fn centered_draw_changes_the_kernel() {
        let base = r#"{"kernel": {"variant": "mulfa", "fourier_size": 8, "init": "INIT"}}"#;
        let geometry = GridGeometry::regular(vec![4, 4]).unwrap();
        let tame = build_kernel(
            RunConfig::from_json(&base.replace("INIT", "tame"))
                .unwrap()
                .resolve()
                .unwrap()
                .kernel
                .as_ref()
                .unwrap(),
            &geometry,
        )
        .unwrap();
        let centered = build_kernel(
            RunConfig::from_json(&base.replace("INIT", "centered"))
                .unwrap()
                .resolve()
                .unwrap()
                .kernel
                .as_ref()
                .unwrap(),
            &geometry,
        )
        .unwrap();
        let (KernelSpec::MulFa(a), KernelSpec::MulFa(b)) = (&tame, &centered) else {
            panic!("expected filter kernels");
        };
        assert_eq!(a.out_bias, 1.0);
        assert_eq!(b.out_bias, 0.0);
        assert_eq!(a.out_weight, b.out_weight);
    }
}
