//! Signed distance field reconstruction on analytic shapes.
//!
//! The shapes have exact distance functions, so training targets and the
//! evaluation oracles (sign agreement, surface normals) need no mesh or
//! voxelization. Distances are negative inside.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use thiserror::Error;

use crate::grid::{Dataset, GridModel};

#[derive(Debug, Error)]
pub enum SdfTaskError {
    #[error("{0} must be positive")]
    NonPositiveSize(&'static str),
    #[error("shape extends outside the unit domain on axis {axis}")]
    OutsideDomain { axis: usize },
    #[error("torus minor radius {minor} must be smaller than major radius {major}")]
    TorusRadii { major: f64, minor: f64 },
    #[error("box center and half-extents disagree in dimension: {center} vs {extents}")]
    BoxDims { center: usize, extents: usize },
    #[error("box dimension {0} unsupported, must be 2 or 3")]
    BoxDim(usize),
    #[error("sample budget must be positive")]
    EmptyBudget,
    #[error("evaluation resolution {0} must be at least 2")]
    BadResolution(usize),
}

/// Analytic shapes inside the unit domain.
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Circle { center: [f64; 2], radius: f64 },
    Box { center: Vec<f64>, half_extents: Vec<f64> },
    Sphere { center: [f64; 3], radius: f64 },
    Torus { center: [f64; 3], major: f64, minor: f64 },
}

impl Shape {
    pub fn dim(&self) -> usize {
        match self {
            Shape::Circle { .. } => 2,
            Shape::Box { center, .. } => center.len(),
            Shape::Sphere { .. } | Shape::Torus { .. } => 3,
        }
    }

    pub fn validate(&self) -> Result<(), SdfTaskError> {
        let inside = |c: f64, r: f64, axis: usize| {
            if c - r < 0.0 || c + r > 1.0 {
                Err(SdfTaskError::OutsideDomain { axis })
            } else {
                Ok(())
            }
        };
        match self {
            Shape::Circle { center, radius } => {
                if *radius <= 0.0 {
                    return Err(SdfTaskError::NonPositiveSize("radius"));
                }
                for (axis, &c) in center.iter().enumerate() {
                    inside(c, *radius, axis)?;
                }
            }
            Shape::Sphere { center, radius } => {
                if *radius <= 0.0 {
                    return Err(SdfTaskError::NonPositiveSize("radius"));
                }
                for (axis, &c) in center.iter().enumerate() {
                    inside(c, *radius, axis)?;
                }
            }
            Shape::Box {
                center,
                half_extents,
            } => {
                if center.len() != half_extents.len() {
                    return Err(SdfTaskError::BoxDims {
                        center: center.len(),
                        extents: half_extents.len(),
                    });
                }
                if !(2..=3).contains(&center.len()) {
                    return Err(SdfTaskError::BoxDim(center.len()));
                }
                for (axis, (&c, &h)) in center.iter().zip(half_extents).enumerate() {
                    if h <= 0.0 {
                        return Err(SdfTaskError::NonPositiveSize("half extent"));
                    }
                    inside(c, h, axis)?;
                }
            }
            Shape::Torus {
                center,
                major,
                minor,
            } => {
                if *major <= 0.0 {
                    return Err(SdfTaskError::NonPositiveSize("major radius"));
                }
                if *minor <= 0.0 {
                    return Err(SdfTaskError::NonPositiveSize("minor radius"));
                }
                if minor >= major {
                    return Err(SdfTaskError::TorusRadii {
                        major: *major,
                        minor: *minor,
                    });
                }
                let reach = major + minor;
                inside(center[0], reach, 0)?;
                inside(center[1], reach, 1)?;
                inside(center[2], *minor, 2)?;
            }
        }
        Ok(())
    }

    /// Exact signed distance, negative inside the shape.
    pub fn sdf(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim(), "query dimension");
        match self {
            Shape::Circle { center, radius } => {
                norm(&[x[0] - center[0], x[1] - center[1]]) - radius
            }
            Shape::Sphere { center, radius } => {
                norm(&[x[0] - center[0], x[1] - center[1], x[2] - center[2]]) - radius
            }
            Shape::Box {
                center,
                half_extents,
            } => {
                // q = |p| - h per axis; outside distance is the norm of the
                // positive part, inside distance the largest (negative)
                // component.
                let q: Vec<f64> = x
                    .iter()
                    .zip(center)
                    .zip(half_extents)
                    .map(|((&xi, &ci), &hi)| (xi - ci).abs() - hi)
                    .collect();
                let outside: f64 = q.iter().map(|&v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
                let inside = q.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)).min(0.0);
                outside + inside
            }
            Shape::Torus {
                center,
                major,
                minor,
            } => {
                let px = x[0] - center[0];
                let py = x[1] - center[1];
                let pz = x[2] - center[2];
                let ring = norm(&[px, py]) - major;
                norm(&[ring, pz]) - minor
            }
        }
    }

    /// Unit outward normal from central differences of the exact field.
    /// The step is far below any feature scale, so this is exact to
    /// rounding away from medial-axis kinks.
    pub fn normal(&self, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        let dim = self.dim();
        let mut grad = vec![0.0; dim];
        let mut probe = x.to_vec();
        for a in 0..dim {
            probe[a] = x[a] + h;
            let plus = self.sdf(&probe);
            probe[a] = x[a] - h;
            let minus = self.sdf(&probe);
            probe[a] = x[a];
            grad[a] = (plus - minus) / (2.0 * h);
        }
        let n = norm(&grad);
        if n > 0.0 {
            for g in grad.iter_mut() {
                *g /= n;
            }
        }
        grad
    }

    /// Deterministic points on the surface, approximately uniform.
    pub fn surface_points(&self, n: usize) -> Vec<Vec<f64>> {
        match self {
            Shape::Circle { center, radius } => (0..n)
                .map(|i| {
                    let t = (i as f64 + 0.5) / n as f64 * std::f64::consts::TAU;
                    vec![center[0] + radius * t.cos(), center[1] + radius * t.sin()]
                })
                .collect(),
            Shape::Sphere { center, radius } => fibonacci_sphere(n)
                .into_iter()
                .map(|d| {
                    vec![
                        center[0] + radius * d[0],
                        center[1] + radius * d[1],
                        center[2] + radius * d[2],
                    ]
                })
                .collect(),
            Shape::Box {
                center,
                half_extents,
            } => box_surface_points(center, half_extents, n),
            Shape::Torus {
                center,
                major,
                minor,
            } => {
                // Near-square (theta, phi) lattice over the two angles.
                let rows = ((n as f64).sqrt().ceil() as usize).max(1);
                let cols = n.div_ceil(rows);
                let mut pts = Vec::with_capacity(n);
                'outer: for i in 0..rows {
                    for j in 0..cols {
                        if pts.len() == n {
                            break 'outer;
                        }
                        let theta = (i as f64 + 0.5) / rows as f64 * std::f64::consts::TAU;
                        let phi = (j as f64 + 0.5) / cols as f64 * std::f64::consts::TAU;
                        let ring = major + minor * phi.cos();
                        pts.push(vec![
                            center[0] + ring * theta.cos(),
                            center[1] + ring * theta.sin(),
                            center[2] + minor * phi.sin(),
                        ]);
                    }
                }
                pts
            }
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|&a| a * a).sum::<f64>().sqrt()
}

/// Evenly distributed directions on the unit sphere via the golden-angle
/// spiral.
fn fibonacci_sphere(n: usize) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let t = golden * i as f64;
            [r * t.cos(), r * t.sin(), z]
        })
        .collect()
}

/// Face-area-weighted lattice points over the box boundary, offset from
/// edges where the surface normal is undefined.
fn box_surface_points(center: &[f64], half: &[f64], n: usize) -> Vec<Vec<f64>> {
    let dim = center.len();
    // Area of each face normal to axis a = product of the other extents.
    let mut areas = Vec::with_capacity(dim);
    for a in 0..dim {
        let mut area = 1.0;
        for (b, &h) in half.iter().enumerate() {
            if b != a {
                area *= 2.0 * h;
            }
        }
        areas.push(area);
    }
    let total: f64 = areas.iter().sum::<f64>() * 2.0;
    // Cumulative quota keeps the face counts summing to exactly n.
    let mut pts = Vec::with_capacity(n);
    let mut cum = 0.0;
    let mut assigned = 0usize;
    for a in 0..dim {
        for side in [-1.0, 1.0] {
            cum += areas[a] / total;
            let face_n = ((n as f64 * cum).round() as usize).saturating_sub(assigned);
            assigned += face_n;
            if face_n == 0 {
                continue;
            }
            // Lattice over the face's free axes, shrunk 10% to stay off
            // the edges where the normal is undefined.
            let per_axis = ((face_n as f64).powf(1.0 / (dim - 1) as f64).ceil() as usize).max(1);
            let mut idx = vec![0usize; dim - 1];
            for _ in 0..face_n {
                let mut p = vec![0.0; dim];
                p[a] = center[a] + side * half[a];
                let mut k = 0;
                for b in 0..dim {
                    if b != a {
                        let t = (idx[k] as f64 + 0.5) / per_axis as f64;
                        p[b] = center[b] + (t * 2.0 - 1.0) * half[b] * 0.9;
                        k += 1;
                    }
                }
                pts.push(p);
                for slot in idx.iter_mut() {
                    *slot += 1;
                    if *slot < per_axis {
                        break;
                    }
                    *slot = 0;
                }
            }
        }
    }
    pts
}

/// A reconstruction problem: fit the signed distance of `shape` from a
/// sampled training set, evaluate on a dense grid.
#[derive(Debug, Clone)]
pub struct SdfTask {
    pub shape: Shape,
    /// Uniform samples over the unit domain.
    pub volume_samples: usize,
    /// Samples biased to a band around the surface.
    pub surface_samples: usize,
    /// Per-axis resolution of the sign-agreement evaluation grid.
    pub eval_resolution: usize,
}

/// Half-width of the band around the surface that biased samples cover.
const SURFACE_BAND: f64 = 0.05;

impl SdfTask {
    pub fn new(
        shape: Shape,
        volume_samples: usize,
        surface_samples: usize,
        eval_resolution: usize,
    ) -> Result<Self, SdfTaskError> {
        shape.validate()?;
        if volume_samples + surface_samples == 0 {
            return Err(SdfTaskError::EmptyBudget);
        }
        if eval_resolution < 2 {
            return Err(SdfTaskError::BadResolution(eval_resolution));
        }
        Ok(SdfTask {
            shape,
            volume_samples,
            surface_samples,
            eval_resolution,
        })
    }

    /// Sample the training set: uniform volume points plus surface points
    /// jittered along the normal, targets from the exact field.
    pub fn build_dataset(&self, seed: u64) -> Dataset {
        let dim = self.shape.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = Vec::with_capacity(self.volume_samples + self.surface_samples);
        for _ in 0..self.volume_samples {
            points.push((0..dim).map(|_| rng.gen_range(0.0..1.0)).collect());
        }
        for base in self.shape.surface_points(self.surface_samples) {
            let normal = self.shape.normal(&base);
            let t = rng.gen_range(-SURFACE_BAND..=SURFACE_BAND);
            let p: Vec<f64> = base
                .iter()
                .zip(&normal)
                .map(|(b, n)| (b + t * n).clamp(0.0, 1.0))
                .collect();
            points.push(p);
        }
        let targets: Vec<Vec<f64>> = points.iter().map(|p| vec![self.shape.sdf(p)]).collect();
        Dataset::new(points, targets, dim, 1).expect("sampled dataset is well-formed")
    }
}

/// Sign-agreement score over a dense grid.
#[derive(Debug, Clone, Copy)]
pub struct IouReport {
    pub value: f64,
    /// Neither field had any inside cells; the score defaults to 1.
    pub empty: bool,
}

/// Intersection over union of the inside regions (field ≤ 0) of the model
/// and the exact shape, on a cell-center grid of `resolution` per axis.
pub fn iou_metric(model: &GridModel, shape: &Shape, resolution: usize) -> IouReport {
    let dim = shape.dim();
    assert_eq!(model.geometry.dim(), dim, "model dimension");
    let mut both = 0usize;
    let mut either = 0usize;
    let mut idx = vec![0usize; dim];
    let mut x = vec![0.0; dim];
    let mut out = vec![0.0; 1];
    loop {
        for (a, &i) in idx.iter().enumerate() {
            x[a] = (i as f64 + 0.5) / resolution as f64;
        }
        model.forward_into(&x, &mut out);
        let pred_in = out[0] <= 0.0;
        let true_in = shape.sdf(&x) <= 0.0;
        both += (pred_in && true_in) as usize;
        either += (pred_in || true_in) as usize;
        let mut a = 0;
        loop {
            if a == dim {
                if either == 0 {
                    return IouReport {
                        value: 1.0,
                        empty: true,
                    };
                }
                return IouReport {
                    value: both as f64 / either as f64,
                    empty: false,
                };
            }
            idx[a] += 1;
            if idx[a] < resolution {
                break;
            }
            idx[a] = 0;
            a += 1;
        }
    }
}

/// Mean angular error between predicted and exact surface normals.
#[derive(Debug, Clone, Copy)]
pub struct NaeReport {
    pub degrees: f64,
    /// Samples dropped because the predicted gradient vanished.
    pub excluded: usize,
    pub samples: usize,
}

/// Predicted normals come from central differences of the model with step
/// equal to half a grid cell per axis, compared against exact normals at
/// deterministic surface samples.
pub fn nae_metric(model: &GridModel, shape: &Shape, surface_samples: usize) -> NaeReport {
    let steps: Vec<f64> = match model.geometry.cell_widths() {
        Some(widths) => widths.iter().map(|w| 0.5 * w).collect(),
        None => {
            let spacing = model
                .geometry
                .mean_nearest_node_distance()
                .expect("normal metric needs at least two nodes");
            vec![0.5 * spacing; model.geometry.dim()]
        }
    };
    let dim = shape.dim();
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut excluded = 0usize;
    let mut probe = vec![0.0; dim];
    let mut grad = vec![0.0; dim];
    let mut out = vec![0.0; 1];
    for p in shape.surface_points(surface_samples) {
        for a in 0..dim {
            probe.copy_from_slice(&p);
            probe[a] = p[a] + steps[a];
            model.forward_into(&probe, &mut out);
            let plus = out[0];
            probe[a] = p[a] - steps[a];
            model.forward_into(&probe, &mut out);
            grad[a] = (plus - out[0]) / (2.0 * steps[a]);
        }
        let g = norm(&grad);
        if g == 0.0 {
            excluded += 1;
            continue;
        }
        let n_true = shape.normal(&p);
        let cos = grad
            .iter()
            .zip(&n_true)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / g;
        sum += cos.clamp(-1.0, 1.0).acos().to_degrees();
        used += 1;
    }
    NaeReport {
        degrees: if used > 0 { sum / used as f64 } else { 0.0 },
        excluded,
        samples: surface_samples,
    }
}
