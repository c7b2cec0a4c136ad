//! Tangent-kernel analysis for grid models.
//!
//! For a fixed kernel, the model output at any point is linear in the node
//! features, with per-sample gradient equal to the (sparse) kernel weight
//! vector. The Gram matrix of those gradients over a dataset, `G = Z^T Z`
//! with `Z` holding one gradient per column, governs full-batch gradient
//! descent on the half squared loss: outputs evolve as
//! `O(t+1) - O(t) = -eta G (O(t) - Y)`, which from a zero start has the
//! closed form `O(t) = (I - (I - eta G)^t) Y`. The quadratic form
//! `Y^T G^{-1} Y` scores how far the features must travel to interpolate
//! the targets, and upper-bounds the Frobenius feature movement.

use nalgebra::{DMatrix, DVector};
use std::cell::OnceCell;
use thiserror::Error;

use crate::grid::{Dataset, GridModel};
use crate::train::{TrainHistory, TrainMode};

/// Eigenvalues below this are flagged as ill-conditioned for inversion.
pub const LAMBDA_MIN_FLAG: f64 = 1e-6;

/// Default Tikhonov ridge added before inverting the GTK.
pub const DEFAULT_RIDGE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum GtkError {
    #[error("GTK asymmetry {residual:e} exceeds 1e-12")]
    Asymmetric { residual: f64 },
    #[error("GTK eigenvalue {lambda:e} below -1e-8: not PSD within tolerance")]
    NotPsd { lambda: f64 },
    #[error("bound difference map needs 2x2 kernels, got {rows_a}x{rows_a} and {rows_b}x{rows_b}")]
    MapNeedsTwoSamples { rows_a: usize, rows_b: usize },
    #[error("map resolution {0} must be at least 2")]
    BadResolution(usize),
    #[error("map label range is degenerate: [{lo}, {hi}]")]
    BadRange { lo: f64, hi: f64 },
    #[error("weight bound check requires a features-only history, got {0:?}")]
    BoundNeedsFeaturesOnly(TrainMode),
    #[error("dataset has {targets} targets but the kernel is {n}x{n}")]
    TargetCountMismatch { targets: usize, n: usize },
    #[error("history has no consecutive-step snapshots (snapshot period 1 required)")]
    NoConsecutiveSnapshots,
}

struct Eigen {
    /// Ascending.
    values: Vec<f64>,
    /// Column k pairs with values[k].
    vectors: DMatrix<f64>,
}

/// The tangent kernel of a model on a dataset, with cached spectral data.
pub struct GtkMatrix {
    matrix: DMatrix<f64>,
    /// Fingerprint of the sample coordinates and kernel configuration this
    /// matrix was computed from.
    provenance: u64,
    eigen: OnceCell<Eigen>,
}

impl GtkMatrix {
    /// Wrap an externally assembled symmetric matrix.
    pub fn from_matrix(matrix: DMatrix<f64>, provenance: u64) -> Self {
        assert_eq!(matrix.nrows(), matrix.ncols(), "GTK must be square");
        GtkMatrix {
            matrix,
            provenance,
            eigen: OnceCell::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn provenance(&self) -> u64 {
        self.provenance
    }

    /// Max |G - G^T| entry.
    pub fn symmetry_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n() {
            for j in (i + 1)..self.n() {
                worst = worst.max((self.matrix[(i, j)] - self.matrix[(j, i)]).abs());
            }
        }
        worst
    }

    /// Check the symmetry and PSD tolerances.
    pub fn validate(&self) -> Result<(), GtkError> {
        let residual = self.symmetry_residual();
        if residual > 1e-12 {
            return Err(GtkError::Asymmetric { residual });
        }
        let lambda = self.lambda_min();
        if lambda < -1e-8 {
            return Err(GtkError::NotPsd { lambda });
        }
        Ok(())
    }

    fn eigen(&self) -> &Eigen {
        self.eigen.get_or_init(|| {
            let se = nalgebra::SymmetricEigen::new(self.matrix.clone());
            let mut order: Vec<usize> = (0..se.eigenvalues.len()).collect();
            order.sort_by(|&a, &b| se.eigenvalues[a].total_cmp(&se.eigenvalues[b]));
            let values: Vec<f64> = order.iter().map(|&i| se.eigenvalues[i]).collect();
            let n = self.matrix.nrows();
            let mut vectors = DMatrix::zeros(n, n);
            for (k, &i) in order.iter().enumerate() {
                vectors.set_column(k, &se.eigenvectors.column(i));
            }
            Eigen { values, vectors }
        })
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigen().values
    }

    pub fn lambda_min(&self) -> f64 {
        self.eigen().values[0]
    }

    pub fn lambda_max(&self) -> f64 {
        *self.eigen().values.last().unwrap()
    }

    /// lambda_max / lambda_min; infinite when lambda_min is not positive.
    pub fn condition_number(&self) -> f64 {
        let lo = self.lambda_min();
        if lo <= 0.0 {
            f64::INFINITY
        } else {
            self.lambda_max() / lo
        }
    }

    /// Max |self - other| entry. Matrices must agree in size.
    pub fn max_abs_diff(&self, other: &GtkMatrix) -> f64 {
        assert_eq!(self.n(), other.n());
        let mut worst = 0.0f64;
        for (a, b) in self.matrix.iter().zip(other.matrix.iter()) {
            worst = worst.max((a - b).abs());
        }
        worst
    }
}

/// Dense per-sample feature-gradient matrix `Z`: `m x n`, column `i` holding
/// the kernel weights of sample `i` scattered over all nodes. Intended for
/// analysis-scale models; the memory cost is `m * n`.
pub fn gradient_matrix(model: &GridModel, points: &[Vec<f64>]) -> DMatrix<f64> {
    let m = model.geometry.node_count();
    let n = points.len();
    let mut z = DMatrix::zeros(m, n);
    for (i, x) in points.iter().enumerate() {
        let sw = model.sample_weights(x);
        for (&node, &w) in sw.indices.as_slice().iter().zip(&sw.weights) {
            z[(node, i)] = w;
        }
    }
    z
}

/// Assemble the tangent kernel directly from sparse per-sample weights:
/// `G_ij = <phi(X_i), phi(X_j)>`. Exactly symmetric by construction.
pub fn gtk_compute(model: &GridModel, points: &[Vec<f64>]) -> GtkMatrix {
    let n = points.len();
    let m = model.geometry.node_count();
    let weights: Vec<_> = points.iter().map(|x| model.sample_weights(x)).collect();
    let mut g = DMatrix::zeros(n, n);
    let mut dense = vec![0.0f64; m];
    for i in 0..n {
        for (&node, &w) in weights[i].indices.as_slice().iter().zip(&weights[i].weights) {
            dense[node] = w;
        }
        for j in i..n {
            let mut acc = 0.0;
            for (&node, &w) in weights[j].indices.as_slice().iter().zip(&weights[j].weights)
            {
                acc += dense[node] * w;
            }
            g[(i, j)] = acc;
            g[(j, i)] = acc;
        }
        for &node in weights[i].indices.as_slice() {
            dense[node] = 0.0;
        }
    }
    GtkMatrix::from_matrix(g, fingerprint(model, points))
}

/// FNV-1a over the sample coordinates and kernel/geometry configuration,
/// so reports can say which setup a matrix belongs to.
pub fn fingerprint(model: &GridModel, points: &[Vec<f64>]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    match &model.geometry {
        crate::grid::GridGeometry::Regular { resolution, bounds } => {
            eat(b"regular");
            for &r in resolution {
                eat(&(r as u64).to_le_bytes());
            }
            for v in bounds.min.iter().chain(&bounds.max) {
                eat(&v.to_le_bytes());
            }
        }
        crate::grid::GridGeometry::Irregular { nodes, k } => {
            eat(b"irregular");
            eat(&(*k as u64).to_le_bytes());
            for node in nodes {
                for v in node {
                    eat(&v.to_le_bytes());
                }
            }
        }
    }
    match &model.kernel {
        crate::kernel::KernelSpec::Multilinear => eat(b"multilinear"),
        crate::kernel::KernelSpec::GaussianRbf { sigma } => {
            eat(b"rbf");
            eat(&sigma.to_le_bytes());
        }
        crate::kernel::KernelSpec::MulFa(p) => {
            eat(b"mulfa");
            for v in p.flatten() {
                eat(&v.to_le_bytes());
            }
        }
    }
    for x in points {
        for v in x {
            eat(&v.to_le_bytes());
        }
    }
    h
}

/// Outputs of zero-initialized feature-only gradient descent, directly from
/// the spectrum: `O(t) = (I - (I - eta G)^t) Y` per target channel.
pub struct ClosedFormOutputs {
    /// `n x d`.
    pub outputs: DMatrix<f64>,
    /// Max |1 - eta lambda|; above 1 the iteration diverges.
    pub spectral_radius: f64,
}

pub fn closed_form_outputs(
    gtk: &GtkMatrix,
    targets: &DMatrix<f64>,
    eta: f64,
    steps: usize,
) -> ClosedFormOutputs {
    assert_eq!(targets.nrows(), gtk.n(), "target count mismatch");
    let eig = gtk.eigen();
    let n = gtk.n();
    let d = targets.ncols();
    let mut spectral_radius = 0.0f64;
    let mut gains = DVector::zeros(n);
    for (k, &lambda) in eig.values.iter().enumerate() {
        let factor = 1.0 - eta * lambda;
        spectral_radius = spectral_radius.max(factor.abs());
        gains[k] = 1.0 - factor.powi(steps as i32);
    }
    // V diag(gains) V^T Y, evaluated channel by channel.
    let mut outputs = DMatrix::zeros(n, d);
    for c in 0..d {
        let y = targets.column(c);
        let coeffs = eig.vectors.transpose() * y;
        let scaled = coeffs.component_mul(&gains);
        outputs.set_column(c, &(&eig.vectors * scaled));
    }
    ClosedFormOutputs {
        outputs,
        spectral_radius,
    }
}

/// Worst deviation of recorded training steps from the linear recursion
/// `O(t+1) - O(t) = -eta G (O(t) - Y)`, measured entrywise over every
/// consecutive-step snapshot pair. Only meaningful for feature-only
/// training, where the kernel (and hence G) is constant.
pub fn dynamics_residual(
    history: &TrainHistory,
    gtk: &GtkMatrix,
    targets: &DMatrix<f64>,
    eta: f64,
) -> Result<f64, GtkError> {
    let n = gtk.n();
    let d = targets.ncols();
    if targets.nrows() != n {
        return Err(GtkError::TargetCountMismatch {
            targets: targets.nrows(),
            n,
        });
    }
    let mut worst: Option<f64> = None;
    for pair in history.snapshots.windows(2) {
        if pair[1].step != pair[0].step + 1 {
            continue;
        }
        let o0 = DMatrix::from_row_slice(n, d, &pair[0].outputs);
        let o1 = DMatrix::from_row_slice(n, d, &pair[1].outputs);
        let predicted_delta = -eta * (gtk.matrix() * (&o0 - targets));
        let err = (o1 - o0 - predicted_delta).abs().max();
        worst = Some(worst.map_or(err, |w: f64| w.max(err)));
    }
    worst.ok_or(GtkError::NoConsecutiveSnapshots)
}

/// Worst deviation of recorded outputs from the closed-form trajectory
/// `O(t) = (I - (I - eta G)^t) Y`, over every snapshot. Assumes the run
/// started from zero features (the closed form's premise).
pub fn closed_form_residual(
    history: &TrainHistory,
    gtk: &GtkMatrix,
    targets: &DMatrix<f64>,
    eta: f64,
) -> Result<f64, GtkError> {
    let n = gtk.n();
    let d = targets.ncols();
    if targets.nrows() != n {
        return Err(GtkError::TargetCountMismatch {
            targets: targets.nrows(),
            n,
        });
    }
    let mut worst = 0.0f64;
    for snap in &history.snapshots {
        let predicted = closed_form_outputs(gtk, targets, eta, snap.step).outputs;
        let observed = DMatrix::from_row_slice(n, d, &snap.outputs);
        worst = worst.max((observed - predicted).abs().max());
    }
    Ok(worst)
}

/// The interpolation score `sum_c Y_c^T (G + ridge I)^{-1} Y_c` with
/// conditioning diagnostics.
#[derive(Debug, Clone)]
pub struct BoundReport {
    pub delta: f64,
    pub lambda_min: f64,
    pub condition_number: f64,
    pub ridge: f64,
    /// Set when lambda_min falls below the inversion flag threshold.
    pub ill_conditioned: bool,
}

/// Evaluate the quadratic form through the spectral factorization rather
/// than an explicit inverse. Negative eigenvalues within the PSD tolerance
/// are clamped to zero before the ridge is added; a zero-eigenvalue
/// direction with a genuinely nonzero target component at zero ridge makes
/// the score infinite.
pub fn generalization_delta(gtk: &GtkMatrix, targets: &DMatrix<f64>, ridge: f64) -> BoundReport {
    assert_eq!(targets.nrows(), gtk.n(), "target count mismatch");
    let eig = gtk.eigen();
    let mut delta = 0.0f64;
    for c in 0..targets.ncols() {
        let coeffs = eig.vectors.transpose() * targets.column(c);
        for (k, &lambda) in eig.values.iter().enumerate() {
            let denom = lambda.max(0.0) + ridge;
            let num = coeffs[k] * coeffs[k];
            if denom > 0.0 {
                delta += num / denom;
            } else if num > 1e-24 {
                delta = f64::INFINITY;
            }
        }
    }
    let lambda_min = gtk.lambda_min();
    BoundReport {
        delta,
        lambda_min,
        condition_number: gtk.condition_number(),
        ridge,
        ill_conditioned: lambda_min < LAMBDA_MIN_FLAG,
    }
}

/// Difference of interpolation scores between two models over a plane of
/// two-sample label assignments.
#[derive(Debug, Clone)]
pub struct BoundMap {
    /// Row-major `resolution x resolution`; rows sweep the second label,
    /// columns the first.
    pub values: Vec<f64>,
    pub resolution: usize,
    pub y_range: (f64, f64),
    pub ridge: f64,
    pub ill_conditioned_a: bool,
    pub ill_conditioned_b: bool,
}

/// Uniformly spaced axis values, generated mirror-symmetrically about the
/// range midpoint. For a symmetric range this makes `axis[res-1-j]` the
/// exact negation of `axis[j]`, so quadratic-form symmetries of the map
/// hold bitwise, not just approximately.
fn grid_axis(lo: f64, hi: f64, resolution: usize) -> Vec<f64> {
    let mut axis = vec![0.0; resolution];
    let step = (hi - lo) / (resolution - 1) as f64;
    for j in 0..resolution / 2 {
        let v = lo + step * j as f64;
        axis[j] = v;
        axis[resolution - 1 - j] = (lo + hi) - v;
    }
    if resolution % 2 == 1 {
        axis[resolution / 2] = (lo + hi) / 2.0;
    }
    axis
}

pub fn bound_difference_map(
    gtk_a: &GtkMatrix,
    gtk_b: &GtkMatrix,
    y_range: (f64, f64),
    resolution: usize,
    ridge: f64,
) -> Result<BoundMap, GtkError> {
    if gtk_a.n() != 2 || gtk_b.n() != 2 {
        return Err(GtkError::MapNeedsTwoSamples {
            rows_a: gtk_a.n(),
            rows_b: gtk_b.n(),
        });
    }
    if resolution < 2 {
        return Err(GtkError::BadResolution(resolution));
    }
    let (lo, hi) = y_range;
    if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
        return Err(GtkError::BadRange { lo, hi });
    }
    let axis = grid_axis(lo, hi, resolution);
    let mut values = Vec::with_capacity(resolution * resolution);
    let mut ill_a = false;
    let mut ill_b = false;
    let mut y = DMatrix::zeros(2, 1);
    for r in 0..resolution {
        let y2 = axis[r];
        for c in 0..resolution {
            let y1 = axis[c];
            y[(0, 0)] = y1;
            y[(1, 0)] = y2;
            let a = generalization_delta(gtk_a, &y, ridge);
            let b = generalization_delta(gtk_b, &y, ridge);
            ill_a |= a.ill_conditioned;
            ill_b |= b.ill_conditioned;
            values.push(a.delta - b.delta);
        }
    }
    Ok(BoundMap {
        values,
        resolution,
        y_range,
        ridge,
        ill_conditioned_a: ill_a,
        ill_conditioned_b: ill_b,
    })
}

/// Outcome of checking recorded feature movement against `sqrt(Y^T G^-1 Y)`.
#[derive(Debug, Clone)]
pub struct BoundCheck {
    pub holds: bool,
    /// `bound - max_t |w(t) - w(0)|_F`; negative means the bound was
    /// exceeded (by more than tolerance when `holds` is false).
    pub margin: f64,
    pub bound: f64,
    pub max_change: f64,
}

/// Slack allowed on the weight-movement bound before declaring violation.
pub const BOUND_TOLERANCE: f64 = 1e-6;

/// Verify that feature movement stayed within the interpolation-score bound
/// at every recorded step. Only valid for histories where the kernel stayed
/// fixed; joint or decoupled histories are refused because their gradients
/// do not follow the constant-kernel dynamics.
pub fn weight_change_bound_check(
    history: &TrainHistory,
    gtk: &GtkMatrix,
    data: &Dataset,
) -> Result<BoundCheck, GtkError> {
    if history.mode != TrainMode::FeaturesOnly {
        return Err(GtkError::BoundNeedsFeaturesOnly(history.mode));
    }
    if data.len() != gtk.n() {
        return Err(GtkError::TargetCountMismatch {
            targets: data.len(),
            n: gtk.n(),
        });
    }
    let targets = targets_matrix(data);
    let report = generalization_delta(gtk, &targets, 0.0);
    let bound = report.delta.sqrt();
    let max_change = history
        .weight_change
        .iter()
        .fold(0.0f64, |a, &b| a.max(b));
    let margin = bound - max_change;
    Ok(BoundCheck {
        holds: margin >= -BOUND_TOLERANCE,
        margin,
        bound,
        max_change,
    })
}

/// Dataset targets as an `n x d` matrix.
pub fn targets_matrix(data: &Dataset) -> DMatrix<f64> {
    DMatrix::from_row_slice(data.len(), data.target_dim(), data.targets_flat())
}
