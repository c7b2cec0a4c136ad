//! Grid-based field models and tangent-kernel analysis.
//!
//! A model here is a set of grid nodes, each carrying a trainable feature
//! vector, plus a kernel that turns a query point into a small set of node
//! weights. The model output is the weighted sum of the selected node
//! features, so it is linear in the features for any fixed kernel. That
//! linearity is what makes the training dynamics of these models tractable:
//! the Gram matrix of per-sample feature gradients (the tangent kernel of the
//! grid, [`gtk`]) fully determines full-batch gradient descent on the squared
//! loss, and stays constant while only features train.
//!
//! The crate provides:
//!
//! * [`grid`]: grid geometries (regular lattices and irregular point sets),
//!   node index functions, feature storage, and the forward model.
//! * [`kernel`]: the three kernel families (multilinear interpolation,
//!   normalized Gaussian RBF, and a multiplicative-filter kernel with
//!   per-axis Fourier features), plus hand-written parameter gradients.
//! * [`gtk`]: tangent-kernel assembly, closed-form output trajectories,
//!   the quadratic-form generalization score and its difference maps, and a
//!   weight-movement bound check.
//! * [`spectrum`]: a frequency-content probe for kernels sampled along a line.
//! * [`train`]: full-batch / minibatch gradient descent with feature-only,
//!   joint, and decoupled modes, plus a finite-difference gradient check.
//! * [`task`]: image fitting (netpbm I/O, PSNR) and signed-distance-field
//!   fitting (analytic shapes, IoU, normal angular error).
//! * [`config`] and [`cli`]: strict JSON run configuration and the `gridtk`
//!   command-line entry points.

pub mod cli;
pub mod config;
pub mod grid;
pub mod gtk;
pub mod kernel;
pub mod spectrum;
pub mod task;
pub mod train;
