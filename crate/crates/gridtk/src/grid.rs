//! Grid geometries, node indexing, and the linear-in-features field model.
//!
//! A grid is either a regular lattice over an axis-aligned box or an
//! irregular set of node positions. Every query point selects a small
//! index set of nodes: the surrounding cell corners on a regular grid, the
//! k nearest nodes on an irregular one. Node features live in a dense
//! [`FeatureGrid`]; [`GridModel::forward`] combines kernel weights with the
//! selected features.
//!
//! Flattening convention for regular grids: axis 0 varies fastest, i.e. the
//! flat index of multi-index `(a0, a1, ..)` is `a0 + a1*N0 + a2*N0*N1 + ..`.
//! Corner sets are enumerated in lexicographic offset order with axis 0 as
//! the most significant offset bit: `(0,..,0), (0,..,1), .., (1,..,1)`.

use thiserror::Error;

use crate::kernel::{self, KernelSpec};

/// Geometry construction and query errors.
#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("grid needs at least one axis")]
    NoAxes,
    #[error("axis {axis} has resolution {resolution}, need at least 2 nodes")]
    ResolutionTooSmall { axis: usize, resolution: usize },
    #[error("bounds have {bounds} axes but resolution has {axes}")]
    BoundsDimensionMismatch { bounds: usize, axes: usize },
    #[error("axis {axis} bounds are degenerate or reversed: [{lo}, {hi}]")]
    BadBounds { axis: usize, lo: f64, hi: f64 },
    #[error("irregular grid needs at least one node")]
    NoNodes,
    #[error("node {node} has {got} coordinates, expected {expected}")]
    NodeDimensionMismatch {
        node: usize,
        got: usize,
        expected: usize,
    },
    #[error("node {node} has a non-finite coordinate")]
    NonFiniteNode { node: usize },
    #[error("neighbor count k={k} must be in 1..={nodes} (node count)")]
    BadNeighborCount { k: usize, nodes: usize },
}

/// Axis-aligned box bounding a regular grid's domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Bounds {
    /// The unit box `[0,1]^dim`.
    pub fn unit(dim: usize) -> Self {
        Bounds {
            min: vec![0.0; dim],
            max: vec![1.0; dim],
        }
    }

    fn validate(&self, axes: usize) -> Result<(), GeometryError> {
        if self.min.len() != axes || self.max.len() != axes {
            return Err(GeometryError::BoundsDimensionMismatch {
                bounds: self.min.len().min(self.max.len()),
                axes,
            });
        }
        for axis in 0..axes {
            let (lo, hi) = (self.min[axis], self.max[axis]);
            if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
                return Err(GeometryError::BadBounds { axis, lo, hi });
            }
        }
        Ok(())
    }
}

/// Node layout: a regular lattice or an explicit point set.
#[derive(Debug, Clone)]
pub enum GridGeometry {
    Regular {
        /// Nodes per axis, each at least 2.
        resolution: Vec<usize>,
        bounds: Bounds,
    },
    Irregular {
        /// Node positions, all of the same dimension, finite.
        nodes: Vec<Vec<f64>>,
        /// Neighbors per query, in `1..=nodes.len()`.
        k: usize,
    },
}

impl GridGeometry {
    /// Regular lattice over the unit box.
    pub fn regular(resolution: Vec<usize>) -> Result<Self, GeometryError> {
        let bounds = Bounds::unit(resolution.len());
        Self::regular_with_bounds(resolution, bounds)
    }

    pub fn regular_with_bounds(
        resolution: Vec<usize>,
        bounds: Bounds,
    ) -> Result<Self, GeometryError> {
        if resolution.is_empty() {
            return Err(GeometryError::NoAxes);
        }
        for (axis, &n) in resolution.iter().enumerate() {
            if n < 2 {
                return Err(GeometryError::ResolutionTooSmall {
                    axis,
                    resolution: n,
                });
            }
        }
        bounds.validate(resolution.len())?;
        Ok(GridGeometry::Regular { resolution, bounds })
    }

    pub fn irregular(nodes: Vec<Vec<f64>>, k: usize) -> Result<Self, GeometryError> {
        if nodes.is_empty() {
            return Err(GeometryError::NoNodes);
        }
        let dim = nodes[0].len();
        if dim == 0 {
            return Err(GeometryError::NoAxes);
        }
        for (i, node) in nodes.iter().enumerate() {
            if node.len() != dim {
                return Err(GeometryError::NodeDimensionMismatch {
                    node: i,
                    got: node.len(),
                    expected: dim,
                });
            }
            if node.iter().any(|c| !c.is_finite()) {
                return Err(GeometryError::NonFiniteNode { node: i });
            }
        }
        if k == 0 || k > nodes.len() {
            return Err(GeometryError::BadNeighborCount {
                k,
                nodes: nodes.len(),
            });
        }
        Ok(GridGeometry::Irregular { nodes, k })
    }

    pub fn dim(&self) -> usize {
        match self {
            GridGeometry::Regular { resolution, .. } => resolution.len(),
            GridGeometry::Irregular { nodes, .. } => nodes[0].len(),
        }
    }

    /// Total node count m.
    pub fn node_count(&self) -> usize {
        match self {
            GridGeometry::Regular { resolution, .. } => resolution.iter().product(),
            GridGeometry::Irregular { nodes, .. } => nodes.len(),
        }
    }

    /// Size of every index set this geometry produces (2^D or k).
    pub fn support_size(&self) -> usize {
        match self {
            GridGeometry::Regular { resolution, .. } => 1 << resolution.len(),
            GridGeometry::Irregular { k, .. } => *k,
        }
    }

    /// The domain box queries are clamped into. Irregular grids use the unit
    /// box: their node positions are expected inside it.
    pub fn domain(&self) -> Bounds {
        match self {
            GridGeometry::Regular { bounds, .. } => bounds.clone(),
            GridGeometry::Irregular { nodes, .. } => Bounds::unit(nodes[0].len()),
        }
    }

    /// Position of node `i` (multi-index decoded for regular grids).
    pub fn node_position(&self, i: usize) -> Vec<f64> {
        match self {
            GridGeometry::Regular { resolution, bounds } => {
                let mut rem = i;
                let mut pos = Vec::with_capacity(resolution.len());
                for (axis, &n) in resolution.iter().enumerate() {
                    let a = rem % n;
                    rem /= n;
                    let t = a as f64 / (n - 1) as f64;
                    pos.push(bounds.min[axis] + t * (bounds.max[axis] - bounds.min[axis]));
                }
                pos
            }
            GridGeometry::Irregular { nodes, .. } => nodes[i].clone(),
        }
    }

    /// Node position mapped into the unit box (identity for irregular grids,
    /// whose nodes already live there by convention).
    pub fn node_unit_coords(&self, i: usize) -> Vec<f64> {
        match self {
            GridGeometry::Regular { resolution, .. } => {
                let mut rem = i;
                let mut pos = Vec::with_capacity(resolution.len());
                for &n in resolution.iter() {
                    let a = rem % n;
                    rem /= n;
                    pos.push(a as f64 / (n - 1) as f64);
                }
                pos
            }
            GridGeometry::Irregular { nodes, .. } => nodes[i].clone(),
        }
    }

    /// Clamp a query into the domain box, writing into `out`.
    pub fn clamp_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        match self {
            GridGeometry::Regular { bounds, .. } => {
                for axis in 0..x.len() {
                    out.push(x[axis].clamp(bounds.min[axis], bounds.max[axis]));
                }
            }
            GridGeometry::Irregular { .. } => {
                for &c in x {
                    out.push(c.clamp(0.0, 1.0));
                }
            }
        }
    }

    /// Query coordinates mapped into the unit box (clamped first).
    pub fn unit_coords_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        match self {
            GridGeometry::Regular { bounds, .. } => {
                for axis in 0..x.len() {
                    let c = x[axis].clamp(bounds.min[axis], bounds.max[axis]);
                    out.push((c - bounds.min[axis]) / (bounds.max[axis] - bounds.min[axis]));
                }
            }
            GridGeometry::Irregular { .. } => {
                for &c in x {
                    out.push(c.clamp(0.0, 1.0));
                }
            }
        }
    }

    /// Cell edge lengths per axis (regular grids only).
    pub fn cell_widths(&self) -> Option<Vec<f64>> {
        match self {
            GridGeometry::Regular { resolution, bounds } => Some(
                resolution
                    .iter()
                    .enumerate()
                    .map(|(axis, &n)| (bounds.max[axis] - bounds.min[axis]) / (n - 1) as f64)
                    .collect(),
            ),
            GridGeometry::Irregular { .. } => None,
        }
    }

    /// Mean distance from each node to its nearest other node. Used as the
    /// default RBF bandwidth on irregular grids. None for a single node.
    pub fn mean_nearest_node_distance(&self) -> Option<f64> {
        let nodes: Vec<Vec<f64>> = (0..self.node_count())
            .map(|i| self.node_position(i))
            .collect();
        if nodes.len() < 2 {
            return None;
        }
        let mut total = 0.0;
        for (i, a) in nodes.iter().enumerate() {
            let mut best = f64::INFINITY;
            for (j, b) in nodes.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d2: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
                best = best.min(d2);
            }
            total += best.sqrt();
        }
        Some(total / nodes.len() as f64)
    }

    /// Index set for a query point. Panics if `x` has the wrong dimension;
    /// callers validate query dimensions at the dataset boundary.
    pub fn index_set(&self, x: &[f64]) -> IndexSet {
        assert_eq!(x.len(), self.dim(), "query dimension mismatch");
        match self {
            GridGeometry::Regular { .. } => self.index_regular(x),
            GridGeometry::Irregular { nodes, k } => index_irregular(nodes, *k, x),
        }
    }

    /// Cell corners around a query on a regular grid, plus the local
    /// coordinates of the query inside its cell. Queries outside the box are
    /// clamped; queries on an interior cell face belong to the lower-indexed
    /// cell (local coordinate 0), and the domain max clamps into the last
    /// cell (local coordinate 1).
    pub fn cell_of(&self, x: &[f64]) -> (Vec<usize>, Vec<f64>) {
        let (resolution, bounds) = match self {
            GridGeometry::Regular { resolution, bounds } => (resolution, bounds),
            GridGeometry::Irregular { .. } => panic!("cell_of needs a regular grid"),
        };
        let mut cell = Vec::with_capacity(resolution.len());
        let mut local = Vec::with_capacity(resolution.len());
        for (axis, &n) in resolution.iter().enumerate() {
            let c = x[axis].clamp(bounds.min[axis], bounds.max[axis]);
            let t = (c - bounds.min[axis]) / (bounds.max[axis] - bounds.min[axis])
                * (n - 1) as f64;
            // Interior faces floor to the lower cell; t = n-1 (domain max)
            // would index past the last cell, so clamp to it.
            let a = (t.floor() as usize).min(n - 2);
            cell.push(a);
            local.push(t - a as f64);
        }
        (cell, local)
    }

    fn index_regular(&self, x: &[f64]) -> IndexSet {
        let resolution = match self {
            GridGeometry::Regular { resolution, .. } => resolution,
            GridGeometry::Irregular { .. } => unreachable!(),
        };
        let dim = resolution.len();
        let (cell, _) = self.cell_of(x);
        let mut strides = vec![1usize; dim];
        for axis in 1..dim {
            strides[axis] = strides[axis - 1] * resolution[axis - 1];
        }
        let mut flat = Vec::with_capacity(1 << dim);
        for corner in 0..(1usize << dim) {
            let mut idx = 0;
            for axis in 0..dim {
                // Axis 0 is the most significant offset bit.
                let offset = (corner >> (dim - 1 - axis)) & 1;
                idx += (cell[axis] + offset) * strides[axis];
            }
            flat.push(idx);
        }
        IndexSet(flat)
    }
}

/// Exact k-nearest-node lookup by squared distance; ties go to the lower
/// node index. The returned set is sorted by node index.
fn index_irregular(nodes: &[Vec<f64>], k: usize, x: &[f64]) -> IndexSet {
    let mut ranked: Vec<(f64, usize)> = nodes
        .iter()
        .enumerate()
        .map(|(i, node)| {
            let d2: f64 = node.iter().zip(x).map(|(p, q)| (p - q) * (p - q)).sum();
            (d2, i)
        })
        .collect();
    ranked.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut chosen: Vec<usize> = ranked[..k].iter().map(|&(_, i)| i).collect();
    chosen.sort_unstable();
    IndexSet(chosen)
}

/// Distinct node indices selected for one query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSet(pub Vec<usize>);

impl IndexSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

/// Dense per-node feature vectors, m nodes by d features, node-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    data: Vec<f64>,
    node_count: usize,
    feature_dim: usize,
}

impl FeatureGrid {
    pub fn zeros(node_count: usize, feature_dim: usize) -> Self {
        FeatureGrid {
            data: vec![0.0; node_count * feature_dim],
            node_count,
            feature_dim,
        }
    }

    /// Uniform init in [-scale, scale], for runs that want to break the
    /// exact-zero start.
    pub fn random_uniform(
        node_count: usize,
        feature_dim: usize,
        scale: f64,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let data = (0..node_count * feature_dim)
            .map(|_| rng.gen_range(-scale..=scale))
            .collect();
        FeatureGrid {
            data,
            node_count,
            feature_dim,
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, feature_dim: usize) -> Self {
        let node_count = rows.len();
        let mut data = Vec::with_capacity(node_count * feature_dim);
        for row in rows {
            assert_eq!(row.len(), feature_dim);
            data.extend(row);
        }
        FeatureGrid {
            data,
            node_count,
            feature_dim,
        }
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.data[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn node_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Frobenius distance to another grid of the same shape.
    pub fn frobenius_distance(&self, other: &FeatureGrid) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Training data: n query points with d-dimensional targets.
#[derive(Debug, Clone)]
pub struct Dataset {
    xs: Vec<f64>,
    ys: Vec<f64>,
    point_dim: usize,
    target_dim: usize,
    len: usize,
}

/// Dataset construction errors.
#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("sample count mismatch: {xs} points vs {ys} targets")]
    LengthMismatch { xs: usize, ys: usize },
    #[error("point {index} has a non-finite coordinate")]
    NonFinitePoint { index: usize },
    #[error("target {index} has a non-finite value")]
    NonFiniteTarget { index: usize },
    #[error("dataset is empty")]
    Empty,
}

impl Dataset {
    pub fn new(
        points: Vec<Vec<f64>>,
        targets: Vec<Vec<f64>>,
        point_dim: usize,
        target_dim: usize,
    ) -> Result<Self, DatasetError> {
        if points.len() != targets.len() {
            return Err(DatasetError::LengthMismatch {
                xs: points.len(),
                ys: targets.len(),
            });
        }
        if points.is_empty() {
            return Err(DatasetError::Empty);
        }
        let len = points.len();
        let mut xs = Vec::with_capacity(len * point_dim);
        let mut ys = Vec::with_capacity(len * target_dim);
        for (i, p) in points.iter().enumerate() {
            assert_eq!(p.len(), point_dim, "point {i} dimension");
            if p.iter().any(|c| !c.is_finite()) {
                return Err(DatasetError::NonFinitePoint { index: i });
            }
            xs.extend_from_slice(p);
        }
        for (i, t) in targets.iter().enumerate() {
            assert_eq!(t.len(), target_dim, "target {i} dimension");
            if t.iter().any(|c| !c.is_finite()) {
                return Err(DatasetError::NonFiniteTarget { index: i });
            }
            ys.extend_from_slice(t);
        }
        Ok(Dataset {
            xs,
            ys,
            point_dim,
            target_dim,
            len,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn point_dim(&self) -> usize {
        self.point_dim
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.xs[i * self.point_dim..(i + 1) * self.point_dim]
    }

    pub fn target(&self, i: usize) -> &[f64] {
        &self.ys[i * self.target_dim..(i + 1) * self.target_dim]
    }

    pub fn targets_flat(&self) -> &[f64] {
        &self.ys
    }
}

/// Model construction errors.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("feature grid has {features} nodes but geometry has {geometry}")]
    NodeCountMismatch { features: usize, geometry: usize },
    #[error("multilinear kernel requires a regular grid")]
    MultilinearNeedsRegular,
    #[error("kernel is built for dimension {kernel} but geometry is {geometry}-dimensional")]
    KernelDimensionMismatch { kernel: usize, geometry: usize },
    #[error("RBF bandwidth must be positive and finite, got {sigma}")]
    BadBandwidth { sigma: f64 },
    #[error("invalid filter kernel: {0}")]
    BadFilterKernel(String),
}

/// A grid geometry, a kernel, and one feature vector per node.
///
/// Fields are public so training can split borrows between the kernel and
/// the features; construct through [`GridModel::new`], which checks the
/// cross-field invariants.
#[derive(Debug, Clone)]
pub struct GridModel {
    pub geometry: GridGeometry,
    pub kernel: KernelSpec,
    pub features: FeatureGrid,
}

/// Kernel weights over one query's index set: the gradient of the model
/// output with respect to the selected node features (per output channel).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWeights {
    pub indices: IndexSet,
    pub weights: Vec<f64>,
}

impl SampleWeights {
    /// Scatter into a dense m-vector.
    pub fn to_dense(&self, node_count: usize) -> Vec<f64> {
        let mut dense = vec![0.0; node_count];
        for (&i, &w) in self.indices.as_slice().iter().zip(&self.weights) {
            dense[i] = w;
        }
        dense
    }
}

impl GridModel {
    pub fn new(
        geometry: GridGeometry,
        kernel: KernelSpec,
        features: FeatureGrid,
    ) -> Result<Self, ModelError> {
        if features.node_count() != geometry.node_count() {
            return Err(ModelError::NodeCountMismatch {
                features: features.node_count(),
                geometry: geometry.node_count(),
            });
        }
        match &kernel {
            KernelSpec::Multilinear => {
                if !matches!(geometry, GridGeometry::Regular { .. }) {
                    return Err(ModelError::MultilinearNeedsRegular);
                }
            }
            KernelSpec::GaussianRbf { sigma } => {
                if !(sigma.is_finite() && *sigma > 0.0) {
                    return Err(ModelError::BadBandwidth { sigma: *sigma });
                }
            }
            KernelSpec::MulFa(params) => {
                if params.input_dim != geometry.dim() {
                    return Err(ModelError::KernelDimensionMismatch {
                        kernel: params.input_dim,
                        geometry: geometry.dim(),
                    });
                }
                params
                    .validate()
                    .map_err(|e| ModelError::BadFilterKernel(e.to_string()))?;
            }
        }
        Ok(GridModel {
            geometry,
            kernel,
            features,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.features.feature_dim()
    }

    /// Kernel weights for a query: which nodes respond and how strongly.
    /// Because the model is linear in its features, this is exactly the
    /// per-node gradient of the output with respect to the features.
    pub fn sample_weights(&self, x: &[f64]) -> SampleWeights {
        let indices = self.geometry.index_set(x);
        let weights = kernel::kernel_eval(&self.kernel, &self.geometry, x, &indices);
        SampleWeights { indices, weights }
    }

    /// Model output at a query point.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim()];
        self.forward_into(x, &mut out);
        out
    }

    pub fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        let sw = self.sample_weights(x);
        self.combine_into(&sw, out);
    }

    /// Weighted feature sum for precomputed kernel weights.
    pub fn combine_into(&self, sw: &SampleWeights, out: &mut [f64]) {
        out.fill(0.0);
        for (&i, &w) in sw.indices.as_slice().iter().zip(&sw.weights) {
            for (o, f) in out.iter_mut().zip(self.features.node(i)) {
                *o += w * f;
            }
        }
    }
}
