//! Kernel families mapping a query point to weights over a node index set.
//!
//! Three variants:
//!
//! * [`KernelSpec::Multilinear`]: separable linear interpolation over the
//!   corners of the query's grid cell. Parameter-free; weights sum to 1 by
//!   construction and are nonnegative.
//! * [`KernelSpec::GaussianRbf`]: `exp(-|x - node|^2 / (2 sigma^2))` per
//!   selected node, normalized to sum to 1.
//! * [`KernelSpec::MulFa`]: a learned kernel. The query is lifted to per-axis
//!   sinusoidal features; a chain of linear layers, each elementwise
//!   multiplied by a node-dependent sinusoid, produces one raw response per
//!   node; responses are normalized across the index set.
//!
//! All normalized kernels share the same fallback: when the raw responses
//! sum to (near) zero the quotient is abandoned and uniform weights are
//! returned instead, flagged to the caller.

use rand::Rng;
use thiserror::Error;

use crate::grid::{GridGeometry, IndexSet};

/// Raw responses whose absolute sum falls below this are not normalized;
/// uniform weights are substituted and the case is flagged.
pub const NORM_EPS: f64 = 1e-8;

/// Frequency init range half-width for filter sinusoids.
const FREQ_INIT_SCALE: f64 = 32.0 * std::f64::consts::PI;

/// Kernel family plus its parameters.
#[derive(Debug, Clone)]
pub enum KernelSpec {
    Multilinear,
    GaussianRbf { sigma: f64 },
    MulFa(MulFaParams),
}

impl KernelSpec {
    /// Whether this kernel has trainable parameters.
    pub fn is_trainable(&self) -> bool {
        matches!(self, KernelSpec::MulFa(_))
    }
}

/// Shape or value errors in a filter-kernel parameter set.
#[derive(Debug, Error)]
pub enum MulFaError {
    #[error("input dimension must be positive")]
    ZeroInputDim,
    #[error("fourier size d_f={0} must be a positive even integer")]
    BadFourierSize(usize),
    #[error("layer {layer}: weight matrix has {got} entries, expected {rows}x{cols}")]
    BadWeightShape {
        layer: usize,
        got: usize,
        rows: usize,
        cols: usize,
    },
    #[error("layer {layer}: frequency matrix has {got} entries, expected {rows}x{cols}")]
    BadFreqShape {
        layer: usize,
        got: usize,
        rows: usize,
        cols: usize,
    },
    #[error("layer {layer}: phase has {got} entries, expected {rows}")]
    BadPhaseShape { layer: usize, got: usize, rows: usize },
    #[error("layer {layer}: empty filter width")]
    EmptyLayer { layer: usize },
    #[error("output weights have {got} entries, expected {expected}")]
    BadOutputShape { got: usize, expected: usize },
    #[error("non-finite parameter value")]
    NonFinite,
}

/// One filter stage: a linear map followed by elementwise multiplication
/// with a node-dependent sinusoid `sin(freq . node + phase)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterLayer {
    /// Linear weights, `width x in_width`, row-major.
    pub weight: Vec<f64>,
    /// Linear bias, length `width`.
    pub bias: Vec<f64>,
    /// Sinusoid frequencies, `width x input_dim`, row-major. Applied to the
    /// node's unit-box coordinates.
    pub freq: Vec<f64>,
    /// Sinusoid phases, length `width`.
    pub phase: Vec<f64>,
}

impl FilterLayer {
    pub fn width(&self) -> usize {
        self.bias.len()
    }
}

/// Parameters of the multiplicative filter kernel.
///
/// With `n` filter layers the chain is
/// `z_0 = fourier(x)`, `z_{k+1} = (W_k z_k + b_k) * sin(F_k p + c_k)`,
/// `raw = w_out . z_n + b_out`, where `p` is the node's unit coordinates.
/// A stage count of one means no filter layers: raw responses are an affine
/// map of the Fourier features and do not depend on the node.
#[derive(Debug, Clone, PartialEq)]
pub struct MulFaParams {
    /// Spatial dimension D of queries and nodes.
    pub input_dim: usize,
    /// Per-axis Fourier feature count d_f (positive even).
    pub fourier_size: usize,
    pub layers: Vec<FilterLayer>,
    /// Final linear weights, length = width of the last stage.
    pub out_weight: Vec<f64>,
    pub out_bias: f64,
}

impl MulFaParams {
    /// Width of the feature vector entering stage `k` (0-based; stage 0 is
    /// the Fourier lift).
    pub fn stage_width(&self, k: usize) -> usize {
        if k == 0 {
            self.input_dim * self.fourier_size
        } else {
            self.layers[k - 1].width()
        }
    }

    /// Total parameter count across all layers and the output map.
    pub fn param_count(&self) -> usize {
        let mut n = self.out_weight.len() + 1;
        for layer in &self.layers {
            n += layer.weight.len() + layer.bias.len() + layer.freq.len() + layer.phase.len();
        }
        n
    }

    pub fn validate(&self) -> Result<(), MulFaError> {
        if self.input_dim == 0 {
            return Err(MulFaError::ZeroInputDim);
        }
        if self.fourier_size == 0 || self.fourier_size % 2 != 0 {
            return Err(MulFaError::BadFourierSize(self.fourier_size));
        }
        let mut width = self.input_dim * self.fourier_size;
        for (k, layer) in self.layers.iter().enumerate() {
            let rows = layer.width();
            if rows == 0 {
                return Err(MulFaError::EmptyLayer { layer: k });
            }
            if layer.weight.len() != rows * width {
                return Err(MulFaError::BadWeightShape {
                    layer: k,
                    got: layer.weight.len(),
                    rows,
                    cols: width,
                });
            }
            if layer.freq.len() != rows * self.input_dim {
                return Err(MulFaError::BadFreqShape {
                    layer: k,
                    got: layer.freq.len(),
                    rows,
                    cols: self.input_dim,
                });
            }
            if layer.phase.len() != rows {
                return Err(MulFaError::BadPhaseShape {
                    layer: k,
                    got: layer.phase.len(),
                    rows,
                });
            }
            width = rows;
        }
        if self.out_weight.len() != width {
            return Err(MulFaError::BadOutputShape {
                got: self.out_weight.len(),
                expected: width,
            });
        }
        let finite = self.out_bias.is_finite()
            && self.out_weight.iter().all(|v| v.is_finite())
            && self.layers.iter().all(|l| {
                l.weight.iter().all(|v| v.is_finite())
                    && l.bias.iter().all(|v| v.is_finite())
                    && l.freq.iter().all(|v| v.is_finite())
                    && l.phase.iter().all(|v| v.is_finite())
            });
        if !finite {
            return Err(MulFaError::NonFinite);
        }
        Ok(())
    }

    /// Random init: frequencies uniform over +-32pi, phases over [0, 2pi),
    /// linear weights uniform over +-1/sqrt(fan_in), hidden biases zero.
    /// The output bias starts at 1 so raw responses sum safely away from
    /// zero and the normalized kernel starts near uniform averaging.
    pub fn init(
        input_dim: usize,
        fourier_size: usize,
        stages: usize,
        width: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(stages >= 1, "need at least one stage");
        let mut layers = Vec::with_capacity(stages - 1);
        let mut in_width = input_dim * fourier_size;
        for _ in 1..stages {
            let bound = 1.0 / (in_width as f64).sqrt();
            let weight = (0..width * in_width)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect();
            let freq = (0..width * input_dim)
                .map(|_| rng.gen_range(-FREQ_INIT_SCALE..=FREQ_INIT_SCALE))
                .collect();
            let phase = (0..width)
                .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
                .collect();
            layers.push(FilterLayer {
                weight,
                bias: vec![0.0; width],
                freq,
                phase,
            });
            in_width = width;
        }
        let bound = 1.0 / (in_width as f64).sqrt();
        let out_weight = (0..in_width).map(|_| rng.gen_range(-bound..=bound)).collect();
        MulFaParams {
            input_dim,
            fourier_size,
            layers,
            out_weight,
            out_bias: 1.0,
        }
    }

    /// Like [`init`](Self::init) but with the output bias at zero, so raw
    /// responses are zero-mean and node contrast is as strong as the random
    /// draw allows. Raw sums can then pass near zero, where normalized
    /// weights spike, which is the honest character of the normalization
    /// quotient; use this draw for kernel-structure studies and `init` for
    /// runs that need a tame starting point.
    pub fn init_centered(
        input_dim: usize,
        fourier_size: usize,
        stages: usize,
        width: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut params = Self::init(input_dim, fourier_size, stages, width, rng);
        params.out_bias = 0.0;
        params
    }

    /// Same shape, all values zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        MulFaParams {
            input_dim: self.input_dim,
            fourier_size: self.fourier_size,
            layers: self
                .layers
                .iter()
                .map(|l| FilterLayer {
                    weight: vec![0.0; l.weight.len()],
                    bias: vec![0.0; l.bias.len()],
                    freq: vec![0.0; l.freq.len()],
                    phase: vec![0.0; l.phase.len()],
                })
                .collect(),
            out_weight: vec![0.0; self.out_weight.len()],
            out_bias: 0.0,
        }
    }

    /// `self += c * other`, matching shapes assumed.
    pub fn add_scaled(&mut self, other: &MulFaParams, c: f64) {
        for (l, g) in self.layers.iter_mut().zip(&other.layers) {
            axpy(&mut l.weight, &g.weight, c);
            axpy(&mut l.bias, &g.bias, c);
            axpy(&mut l.freq, &g.freq, c);
            axpy(&mut l.phase, &g.phase, c);
        }
        axpy(&mut self.out_weight, &other.out_weight, c);
        self.out_bias += c * other.out_bias;
    }

    pub fn set_zero(&mut self) {
        for l in self.layers.iter_mut() {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
            l.freq.fill(0.0);
            l.phase.fill(0.0);
        }
        self.out_weight.fill(0.0);
        self.out_bias = 0.0;
    }

    /// Flat view of all parameters, in a fixed order. Used by the
    /// finite-difference gradient check.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            v.extend_from_slice(&l.weight);
            v.extend_from_slice(&l.bias);
            v.extend_from_slice(&l.freq);
            v.extend_from_slice(&l.phase);
        }
        v.extend_from_slice(&self.out_weight);
        v.push(self.out_bias);
        v
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn assign_from_flat(&mut self, flat: &[f64]) {
        let mut pos = 0;
        let mut take = |n: usize| {
            let s = &flat[pos..pos + n];
            pos += n;
            s.to_vec()
        };
        for l in self.layers.iter_mut() {
            l.weight = take(l.weight.len());
            l.bias = take(l.bias.len());
            l.freq = take(l.freq.len());
            l.phase = take(l.phase.len());
        }
        self.out_weight = take(self.out_weight.len());
        self.out_bias = take(1)[0];
        assert_eq!(pos, flat.len());
    }

    /// Node-dependent sinusoids `sin/cos(freq . p + phase)` for every layer.
    pub fn modulation(&self, node_unit: &[f64]) -> NodeModulation {
        let mut m = NodeModulation {
            sin: Vec::with_capacity(self.layers.len()),
            cos: Vec::with_capacity(self.layers.len()),
        };
        for layer in &self.layers {
            let width = layer.width();
            let mut sins = Vec::with_capacity(width);
            let mut coss = Vec::with_capacity(width);
            for j in 0..width {
                let row = &layer.freq[j * self.input_dim..(j + 1) * self.input_dim];
                let angle: f64 = row
                    .iter()
                    .zip(node_unit)
                    .map(|(f, p)| f * p)
                    .sum::<f64>()
                    + layer.phase[j];
                let (s, c) = angle.sin_cos();
                sins.push(s);
                coss.push(c);
            }
            m.sin.push(sins);
            m.cos.push(coss);
        }
        m
    }

    /// Raw (unnormalized) response for one node. `ff` is the query's
    /// Fourier lift, `modu` the node's modulation. Intermediate stages are
    /// kept in `scratch` for a later [`raw_backward`](Self::raw_backward).
    pub fn raw_eval(&self, ff: &[f64], modu: &NodeModulation, scratch: &mut MfnScratch) -> f64 {
        self.eval_chain(ff, None, modu, scratch)
    }

    /// Filter-chain forward pass. The first stage's affine map reads only
    /// the query's lift, never the node, so callers evaluating one query
    /// against several nodes can pass it precomputed as `pre0`.
    fn eval_chain(
        &self,
        ff: &[f64],
        pre0: Option<&[f64]>,
        modu: &NodeModulation,
        scratch: &mut MfnScratch,
    ) -> f64 {
        scratch.ensure_shape(self);
        scratch.stages[0].copy_from_slice(ff);
        for (k, layer) in self.layers.iter().enumerate() {
            let (head, tail) = scratch.stages.split_at_mut(k + 1);
            let pre = &mut scratch.pre[k];
            match (k, pre0) {
                (0, Some(p)) => pre.copy_from_slice(p),
                _ => matvec_bias(&layer.weight, &head[k], &layer.bias, pre),
            }
            let out = &mut tail[0];
            for (o, (a, s)) in out.iter_mut().zip(pre.iter().zip(&modu.sin[k])) {
                *o = a * s;
            }
        }
        dot(&self.out_weight, scratch.stages.last().unwrap()) + self.out_bias
    }

    /// Accumulate parameter gradients for one node given the cotangent of
    /// its raw response. Must follow a [`raw_eval`](Self::raw_eval) with the
    /// same `scratch`, `modu`, and node.
    pub fn raw_backward(
        &self,
        upstream: f64,
        node_unit: &[f64],
        modu: &NodeModulation,
        scratch: &mut MfnScratch,
        grads: &mut MulFaParams,
    ) {
        let last = self.layers.len();
        grads.out_bias += upstream;
        {
            let zlast = &scratch.stages[last];
            for (g, z) in grads.out_weight.iter_mut().zip(zlast) {
                *g += upstream * z;
            }
        }
        scratch.zbar.clear();
        scratch
            .zbar
            .extend(self.out_weight.iter().map(|w| upstream * w));
        for k in (0..last).rev() {
            let layer = &self.layers[k];
            let glayer = &mut grads.layers[k];
            let width = layer.width();
            let pre = &scratch.pre[k];
            let input = &scratch.stages[k];
            let in_width = input.len();
            // Product rule: z_{k+1} = pre * sin, so the cotangents split
            // into a linear part (abar) and a sinusoid part (sbar).
            scratch.abar.clear();
            for j in 0..width {
                let zb = scratch.zbar[j];
                let abar = zb * modu.sin[k][j];
                let sbar = zb * pre[j];
                let dangle = sbar * modu.cos[k][j];
                glayer.phase[j] += dangle;
                let frow = &mut glayer.freq[j * self.input_dim..(j + 1) * self.input_dim];
                for (g, p) in frow.iter_mut().zip(node_unit) {
                    *g += dangle * p;
                }
                glayer.bias[j] += abar;
                let wrow = &mut glayer.weight[j * in_width..(j + 1) * in_width];
                for (g, z) in wrow.iter_mut().zip(input) {
                    *g += abar * z;
                }
                scratch.abar.push(abar);
            }
            // zbar for the previous stage: W^T abar. Stage 0 is the Fourier
            // lift with nothing trainable upstream, so its cotangent is
            // never consumed; skip the dead matvec.
            if k == 0 {
                break;
            }
            scratch.zbar.clear();
            scratch.zbar.resize(in_width, 0.0);
            for j in 0..width {
                let a = scratch.abar[j];
                let wrow = &layer.weight[j * in_width..(j + 1) * in_width];
                for (zb, w) in scratch.zbar.iter_mut().zip(wrow) {
                    *zb += a * w;
                }
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matvec_bias(weight: &[f64], input: &[f64], bias: &[f64], out: &mut [f64]) {
    let in_width = input.len();
    for (j, o) in out.iter_mut().enumerate() {
        *o = dot(&weight[j * in_width..(j + 1) * in_width], input) + bias[j];
    }
}

/// Per-node, per-layer filter sinusoid values.
#[derive(Debug, Clone, Default)]
pub struct NodeModulation {
    pub sin: Vec<Vec<f64>>,
    pub cos: Vec<Vec<f64>>,
}

/// Reusable intermediate buffers for one filter-chain evaluation.
#[derive(Debug, Clone, Default)]
pub struct MfnScratch {
    stages: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    zbar: Vec<f64>,
    abar: Vec<f64>,
}

impl MfnScratch {
    fn ensure_shape(&mut self, params: &MulFaParams) {
        let stages = params.layers.len() + 1;
        self.stages.resize(stages, Vec::new());
        self.pre.resize(params.layers.len(), Vec::new());
        for k in 0..stages {
            self.stages[k].resize(params.stage_width(k), 0.0);
        }
        for k in 0..params.layers.len() {
            self.pre[k].resize(params.layers[k].width(), 0.0);
        }
    }
}

/// Per-axis sinusoidal lift of a unit-box coordinate vector. For each axis
/// value `x`, feature `j` (1-based, up to `d_f`) is `cos(2^(j/2) pi x)` for
/// odd `j` and `sin(2^(j/2) pi x)` for even `j` (integer-division exponent),
/// so frequencies double every other feature. Axis blocks are concatenated
/// in axis order.
pub fn fourier_features(x_unit: &[f64], d_f: usize, out: &mut Vec<f64>) {
    out.clear();
    for &x in x_unit {
        for j in 1..=d_f {
            let freq = (1u64 << (j / 2)) as f64 * std::f64::consts::PI;
            let v = if j % 2 == 1 {
                (freq * x).cos()
            } else {
                (freq * x).sin()
            };
            out.push(v);
        }
    }
}

/// Normalize raw responses into weights summing to 1. When the responses
/// sum to (near) zero, uniform weights are substituted; the return value
/// says whether that fallback fired.
pub fn kernel_normalize(raw: &[f64], out: &mut Vec<f64>) -> bool {
    let sum: f64 = raw.iter().sum();
    out.clear();
    if sum.abs() < NORM_EPS {
        out.resize(raw.len(), 1.0 / raw.len() as f64);
        true
    } else {
        out.extend(raw.iter().map(|r| r / sum));
        false
    }
}

/// Kernel weights for a query over its index set, one weight per index-set
/// position. Convenience wrapper over [`EvalContext`] for one-off calls.
pub fn kernel_eval(
    spec: &KernelSpec,
    geometry: &GridGeometry,
    x: &[f64],
    idx: &IndexSet,
) -> Vec<f64> {
    let mut ctx = EvalContext::new();
    let mut out = Vec::new();
    ctx.eval(spec, geometry, x, idx, &mut out);
    out
}

/// Parameter gradients of the normalized filter kernel for one query,
/// given the cotangent of each weight. Returns the gradients and whether
/// the normalization fallback fired (in which case they are zero).
pub fn kernel_grad_params(
    params: &MulFaParams,
    geometry: &GridGeometry,
    x: &[f64],
    idx: &IndexSet,
    upstream: &[f64],
) -> (MulFaParams, bool) {
    let mut ctx = EvalContext::new();
    let mut grads = params.zeros_like();
    let fallback = ctx.grad_params(params, geometry, x, idx, upstream, &mut grads);
    (grads, fallback)
}

/// Reusable evaluation state: caches node coordinates and, for the filter
/// kernel, per-node modulations. Call [`invalidate`](Self::invalidate)
/// after any kernel parameter update.
pub struct EvalContext {
    unit: Vec<f64>,
    clamped: Vec<f64>,
    ff: Vec<f64>,
    pre0: Vec<f64>,
    raws: Vec<f64>,
    weights_buf: Vec<f64>,
    node_units: Option<Vec<f64>>,
    node_positions: Option<Vec<f64>>,
    modulations: Vec<Option<NodeModulation>>,
    scratches: Vec<MfnScratch>,
    epoch: u64,
    mod_epochs: Vec<u64>,
}

impl Default for EvalContext {
    fn default() -> Self {
        Self::new()
    }
}

impl EvalContext {
    pub fn new() -> Self {
        EvalContext {
            unit: Vec::new(),
            clamped: Vec::new(),
            ff: Vec::new(),
            pre0: Vec::new(),
            raws: Vec::new(),
            weights_buf: Vec::new(),
            node_units: None,
            node_positions: None,
            modulations: Vec::new(),
            scratches: Vec::new(),
            epoch: 1,
            mod_epochs: Vec::new(),
        }
    }

    /// Drop cached kernel-parameter state (keeps geometry caches).
    pub fn invalidate(&mut self) {
        self.epoch += 1;
    }

    fn node_units<'a>(
        cache: &'a mut Option<Vec<f64>>,
        geometry: &GridGeometry,
    ) -> &'a [f64] {
        cache.get_or_insert_with(|| {
            let m = geometry.node_count();
            let d = geometry.dim();
            let mut flat = Vec::with_capacity(m * d);
            for i in 0..m {
                flat.extend(geometry.node_unit_coords(i));
            }
            flat
        })
    }

    fn node_positions<'a>(
        cache: &'a mut Option<Vec<f64>>,
        geometry: &GridGeometry,
    ) -> &'a [f64] {
        cache.get_or_insert_with(|| {
            let m = geometry.node_count();
            let d = geometry.dim();
            let mut flat = Vec::with_capacity(m * d);
            for i in 0..m {
                flat.extend(geometry.node_position(i));
            }
            flat
        })
    }

    /// Associated-function form so callers holding borrows of other context
    /// fields can still refresh a node's cached modulation.
    fn modulation_for_cached(
        modulations: &mut Vec<Option<NodeModulation>>,
        mod_epochs: &mut Vec<u64>,
        node_units: &mut Option<Vec<f64>>,
        epoch: u64,
        params: &MulFaParams,
        geometry: &GridGeometry,
        node: usize,
    ) {
        let m = geometry.node_count();
        if modulations.len() != m {
            *modulations = vec![None; m];
            *mod_epochs = vec![0; m];
        }
        if mod_epochs[node] != epoch {
            let d = geometry.dim();
            let units = Self::node_units(node_units, geometry);
            let p = &units[node * d..(node + 1) * d];
            modulations[node] = Some(params.modulation(p));
            mod_epochs[node] = epoch;
        }
    }

    /// Kernel weights for one query, written to `out` in index-set order.
    /// Returns whether the normalization fallback fired.
    ///
    /// For the filter kernel, the per-node chain states stay in the context
    /// afterwards, so a [`grad_finish`](Self::grad_finish) for the same
    /// query can run without redoing the forward pass.
    pub fn eval(
        &mut self,
        spec: &KernelSpec,
        geometry: &GridGeometry,
        x: &[f64],
        idx: &IndexSet,
        out: &mut Vec<f64>,
    ) -> bool {
        match spec {
            KernelSpec::Multilinear => {
                multilinear_weights(geometry, x, out);
                false
            }
            KernelSpec::GaussianRbf { sigma } => {
                geometry.clamp_into(x, &mut self.clamped);
                let d = geometry.dim();
                let inv = 1.0 / (2.0 * sigma * sigma);
                self.raws.clear();
                {
                    let positions = Self::node_positions(&mut self.node_positions, geometry);
                    for &i in idx.as_slice() {
                        let node = &positions[i * d..(i + 1) * d];
                        let d2: f64 = node
                            .iter()
                            .zip(&self.clamped)
                            .map(|(p, q)| (p - q) * (p - q))
                            .sum();
                        self.raws.push((-d2 * inv).exp());
                    }
                }
                kernel_normalize(&self.raws, out)
            }
            KernelSpec::MulFa(params) => self.eval_mulfa(params, geometry, x, idx, out),
        }
    }

    /// Like [`eval`](Self::eval), but with a caller-held Fourier lift for
    /// the filter kernel: an empty `lift` is filled from `x`, a filled one
    /// is trusted, so repeated queries at a fixed point skip the
    /// trigonometry. Other kernels ignore the buffer.
    pub fn eval_with_lift(
        &mut self,
        spec: &KernelSpec,
        geometry: &GridGeometry,
        x: &[f64],
        idx: &IndexSet,
        lift: &mut Vec<f64>,
        out: &mut Vec<f64>,
    ) -> bool {
        if let KernelSpec::MulFa(params) = spec {
            if lift.is_empty() {
                geometry.unit_coords_into(x, &mut self.unit);
                fourier_features(&self.unit, params.fourier_size, lift);
            }
            self.eval_mulfa_with_lift(params, geometry, lift, idx, out)
        } else {
            self.eval(spec, geometry, x, idx, out)
        }
    }

    fn eval_mulfa(
        &mut self,
        params: &MulFaParams,
        geometry: &GridGeometry,
        x: &[f64],
        idx: &IndexSet,
        out: &mut Vec<f64>,
    ) -> bool {
        geometry.unit_coords_into(x, &mut self.unit);
        let mut ff = std::mem::take(&mut self.ff);
        fourier_features(&self.unit, params.fourier_size, &mut ff);
        let fallback = self.eval_mulfa_with_lift(params, geometry, &ff, idx, out);
        self.ff = ff;
        fallback
    }

    fn eval_mulfa_with_lift(
        &mut self,
        params: &MulFaParams,
        geometry: &GridGeometry,
        ff: &[f64],
        idx: &IndexSet,
        out: &mut Vec<f64>,
    ) -> bool {
        while self.scratches.len() < idx.len() {
            self.scratches.push(MfnScratch::default());
        }
        // The first stage's affine map depends on the query alone; compute
        // it once here instead of once per node.
        let pre0 = if let Some(layer) = params.layers.first() {
            self.pre0.resize(layer.width(), 0.0);
            matvec_bias(&layer.weight, ff, &layer.bias, &mut self.pre0);
            Some(self.pre0.as_slice())
        } else {
            None
        };
        self.raws.clear();
        for (slot, &i) in idx.as_slice().iter().enumerate() {
            Self::modulation_for_cached(
                &mut self.modulations,
                &mut self.mod_epochs,
                &mut self.node_units,
                self.epoch,
                params,
                geometry,
                i,
            );
            let modu = self.modulations[i].as_ref().unwrap();
            let raw = params.eval_chain(ff, pre0, modu, &mut self.scratches[slot]);
            self.raws.push(raw);
        }
        kernel_normalize(&self.raws, out)
    }

    /// Accumulate filter-kernel parameter gradients for the query most
    /// recently passed to [`eval`](Self::eval), given the cotangent of each
    /// normalized weight. Returns whether the normalization fallback fired
    /// (gradients are zero through the fallback).
    pub fn grad_finish(
        &mut self,
        params: &MulFaParams,
        geometry: &GridGeometry,
        idx: &IndexSet,
        upstream: &[f64],
        grads: &mut MulFaParams,
    ) -> bool {
        let k = idx.len();
        assert_eq!(upstream.len(), k);
        assert_eq!(self.raws.len(), k, "grad_finish without a matching eval");
        let sum: f64 = self.raws.iter().sum();
        if sum.abs() < NORM_EPS {
            return true;
        }
        // d(weight_j)/d(raw_i) = (delta_ij - weight_j) / sum, so the raw
        // cotangent is (upstream_i - <upstream, weight>) / sum.
        let inv = 1.0 / sum;
        let mut updot = 0.0;
        for (u, r) in upstream.iter().zip(&self.raws) {
            updot += u * r * inv;
        }
        let d = geometry.dim();
        let units = {
            Self::node_units(&mut self.node_units, geometry);
            self.node_units.as_ref().unwrap()
        };
        for (slot, &i) in idx.as_slice().iter().enumerate() {
            let raw_bar = (upstream[slot] - updot) * inv;
            let modu = self.modulations[i].as_ref().unwrap();
            let p = &units[i * d..(i + 1) * d];
            params.raw_backward(raw_bar, p, modu, &mut self.scratches[slot], grads);
        }
        false
    }

    /// One-shot forward plus backward for a query.
    pub fn grad_params(
        &mut self,
        params: &MulFaParams,
        geometry: &GridGeometry,
        x: &[f64],
        idx: &IndexSet,
        upstream: &[f64],
        grads: &mut MulFaParams,
    ) -> bool {
        let mut weights = std::mem::take(&mut self.weights_buf);
        self.eval_mulfa(params, geometry, x, idx, &mut weights);
        self.weights_buf = weights;
        self.grad_finish(params, geometry, idx, upstream, grads)
    }
}

/// Separable linear interpolation weights over the corners of the query's
/// cell, in the same lexicographic corner order as the index function.
fn multilinear_weights(geometry: &GridGeometry, x: &[f64], out: &mut Vec<f64>) {
    let (_, local) = geometry.cell_of(x);
    let dim = local.len();
    out.clear();
    for corner in 0..(1usize << dim) {
        let mut w = 1.0;
        for (axis, u) in local.iter().enumerate() {
            let offset = (corner >> (dim - 1 - axis)) & 1;
            w *= if offset == 1 { *u } else { 1.0 - u };
        }
        out.push(w);
    }
}
