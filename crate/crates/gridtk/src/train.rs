//! Gradient descent on the half squared loss `L = 1/2 sum_i |Y_i - g(X_i)|^2`.
//!
//! Three update modes:
//!
//! * [`TrainMode::FeaturesOnly`]: only node features move. The kernel, and
//!   with it the tangent kernel of the model, stays exactly constant, so
//!   the closed-form dynamics and movement bounds apply.
//! * [`TrainMode::Joint`]: features and kernel parameters update together
//!   each step, both gradients taken at the step's starting parameters.
//! * [`TrainMode::Decoupled`]: alternate blocks of kernel-only and
//!   feature-only steps, kernel first.
//!
//! Runs are deterministic given the seed. A non-finite loss aborts the run
//! with [`TrainError::Diverged`] instead of continuing silently.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid::{Dataset, FeatureGrid, GridModel, IndexSet};
use crate::gtk::{self, GtkMatrix};
use crate::kernel::{EvalContext, KernelSpec, MulFaParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    FeaturesOnly,
    Joint,
    /// Alternate parameter sets every `period` steps, kernel first.
    Decoupled { period: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSpec {
    Full,
    /// Sample this many distinct points per step.
    Minibatch(usize),
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Step size for the feature update.
    pub learning_rate: f64,
    /// Step size for the kernel update; defaults to a tenth of the feature
    /// rate when unset.
    pub kernel_learning_rate: Option<f64>,
    pub steps: usize,
    pub batch: BatchSpec,
    /// Snapshot cadence: model outputs (and optionally tangent-kernel
    /// drift) are recorded every this many steps, plus at start and end.
    pub snapshot_period: usize,
    /// Recompute the tangent kernel at snapshots and record its max drift
    /// from the start. Costs O(n^2) per snapshot; off by default.
    pub record_gtk_drift: bool,
    pub seed: u64,
}

impl TrainConfig {
    /// Feature-only full-batch training, the setting the dynamics theory
    /// describes exactly.
    pub fn features_only(learning_rate: f64, steps: usize) -> Self {
        TrainConfig {
            mode: TrainMode::FeaturesOnly,
            learning_rate,
            kernel_learning_rate: None,
            steps,
            batch: BatchSpec::Full,
            snapshot_period: steps.max(1),
            record_gtk_drift: false,
            seed: 0,
        }
    }

    pub fn effective_kernel_lr(&self) -> f64 {
        self.kernel_learning_rate
            .unwrap_or(0.1 * self.learning_rate)
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became non-finite ({loss}) at step {step}")]
    Diverged { step: usize, loss: f64 },
    #[error("{mode:?} training requires a kernel with trainable parameters")]
    UntrainableKernel { mode: TrainMode },
    #[error("invalid training configuration: {0}")]
    BadConfig(String),
    #[error("dataset points are {data}-dimensional but the grid is {geometry}-dimensional")]
    PointDimMismatch { data: usize, geometry: usize },
    #[error("dataset targets are {data}-dimensional but features are {model}-dimensional")]
    TargetDimMismatch { data: usize, model: usize },
}

/// Model outputs over the full dataset at one recorded step.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub step: usize,
    /// Row-major `n x d`.
    pub outputs: Vec<f64>,
    /// Max |G(step) - G(0)| when drift recording is on.
    pub gtk_drift: Option<f64>,
}

/// Everything recorded over a run. `loss[t]` and `weight_change[t]` describe
/// the parameters before step `t` (so both have `steps + 1` entries);
/// in minibatch mode the recorded loss is over that step's batch, and the
/// final entry is over the full dataset.
#[derive(Debug, Clone)]
pub struct TrainHistory {
    pub mode: TrainMode,
    pub learning_rate: f64,
    pub loss: Vec<f64>,
    /// Frobenius distance of the features from their initial values.
    pub weight_change: Vec<f64>,
    pub snapshots: Vec<Snapshot>,
}

/// Half squared error over the whole dataset.
pub fn mse_loss(model: &GridModel, data: &Dataset) -> f64 {
    let d = model.output_dim();
    let mut out = vec![0.0; d];
    let mut total = 0.0;
    for i in 0..data.len() {
        model.forward_into(data.point(i), &mut out);
        let y = data.target(i);
        for c in 0..d {
            let r = out[c] - y[c];
            total += r * r;
        }
    }
    0.5 * total
}

/// One gradient step on a fresh throwaway engine. Convenience for tests and
/// single-step fixtures; loops should use [`Trainer`] or [`train`], which
/// reuse kernel caches across steps.
pub fn gd_step(
    model: &mut GridModel,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    let mut trainer = Trainer::new(model, data, cfg.clone())?;
    trainer.step()
}

/// Run the configured number of steps and return the history.
pub fn train(
    model: &mut GridModel,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    let mut trainer = Trainer::new(model, data, cfg.clone())?;
    for _ in 0..cfg.steps {
        trainer.step()?;
    }
    Ok(trainer.finish())
}

struct SampleState {
    indices: IndexSet,
    weights: Vec<f64>,
    /// The point's Fourier lift, filled on first use (filter kernel only).
    /// The point never moves, so this outlives every kernel update.
    lift: Vec<f64>,
    /// Kernel epoch the weights were computed at.
    epoch: u64,
}

/// Stateful step engine: owns kernel caches, per-sample index sets, and the
/// history being recorded.
pub struct Trainer<'a> {
    model: &'a mut GridModel,
    data: &'a Dataset,
    cfg: TrainConfig,
    rng: ChaCha8Rng,
    ctx: EvalContext,
    samples: Vec<SampleState>,
    kernel_epoch: u64,
    batch: Vec<usize>,
    residuals: Vec<f64>,
    upstream: Vec<f64>,
    theta_grads: Option<MulFaParams>,
    initial_features: FeatureGrid,
    initial_gtk: Option<GtkMatrix>,
    points: Option<Vec<Vec<f64>>>,
    history: TrainHistory,
    t: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: &'a mut GridModel,
        data: &'a Dataset,
        cfg: TrainConfig,
    ) -> Result<Self, TrainError> {
        if data.point_dim() != model.geometry.dim() {
            return Err(TrainError::PointDimMismatch {
                data: data.point_dim(),
                geometry: model.geometry.dim(),
            });
        }
        if data.target_dim() != model.output_dim() {
            return Err(TrainError::TargetDimMismatch {
                data: data.target_dim(),
                model: model.output_dim(),
            });
        }
        if !(cfg.learning_rate.is_finite() && cfg.learning_rate > 0.0) {
            return Err(TrainError::BadConfig(format!(
                "learning rate must be positive and finite, got {}",
                cfg.learning_rate
            )));
        }
        if let Some(lr) = cfg.kernel_learning_rate {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(TrainError::BadConfig(format!(
                    "kernel learning rate must be nonnegative and finite, got {lr}"
                )));
            }
        }
        if cfg.snapshot_period == 0 {
            return Err(TrainError::BadConfig(
                "snapshot period must be at least 1".into(),
            ));
        }
        if let TrainMode::Decoupled { period } = cfg.mode {
            if period == 0 {
                return Err(TrainError::BadConfig(
                    "decoupled alternation period must be at least 1".into(),
                ));
            }
        }
        if let BatchSpec::Minibatch(b) = cfg.batch {
            if b == 0 || b > data.len() {
                return Err(TrainError::BadConfig(format!(
                    "minibatch size {b} must be in 1..={}",
                    data.len()
                )));
            }
        }
        if cfg.mode != TrainMode::FeaturesOnly && !model.kernel.is_trainable() {
            return Err(TrainError::UntrainableKernel { mode: cfg.mode });
        }

        let samples = (0..data.len())
            .map(|i| SampleState {
                indices: model.geometry.index_set(data.point(i)),
                weights: Vec::new(),
                lift: Vec::new(),
                epoch: 0,
            })
            .collect();
        let theta_grads = match &model.kernel {
            KernelSpec::MulFa(p) => Some(p.zeros_like()),
            _ => None,
        };
        let points = if cfg.record_gtk_drift {
            Some((0..data.len()).map(|i| data.point(i).to_vec()).collect())
        } else {
            None
        };
        let initial_features = model.features.clone();
        let history = TrainHistory {
            mode: cfg.mode,
            learning_rate: cfg.learning_rate,
            loss: Vec::with_capacity(cfg.steps + 1),
            weight_change: Vec::with_capacity(cfg.steps + 1),
            snapshots: Vec::new(),
        };
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut trainer = Trainer {
            model,
            data,
            cfg,
            rng,
            ctx: EvalContext::new(),
            samples,
            kernel_epoch: 1,
            batch: Vec::new(),
            residuals: Vec::new(),
            upstream: Vec::new(),
            theta_grads,
            initial_features,
            initial_gtk: None,
            points,
            history,
            t: 0,
        };
        if trainer.cfg.record_gtk_drift {
            trainer.initial_gtk = Some(trainer.current_gtk());
        }
        trainer.record_snapshot(0);
        Ok(trainer)
    }

    pub fn model(&self) -> &GridModel {
        self.model
    }

    pub fn step_index(&self) -> usize {
        self.t
    }

    fn current_gtk(&self) -> GtkMatrix {
        gtk::gtk_compute(self.model, self.points.as_ref().unwrap())
    }

    /// Refresh the cached kernel weights of sample `i` if they predate the
    /// latest kernel update. `force` re-evaluates even when cached, which a
    /// step that trains the kernel needs so the chain states left in the
    /// context belong to this sample.
    fn freshen_sample(
        ctx: &mut EvalContext,
        sample: &mut SampleState,
        kernel: &KernelSpec,
        geometry: &crate::grid::GridGeometry,
        x: &[f64],
        epoch: u64,
        force: bool,
    ) {
        if force || sample.epoch != epoch {
            ctx.eval_with_lift(
                kernel,
                geometry,
                x,
                &sample.indices,
                &mut sample.lift,
                &mut sample.weights,
            );
            sample.epoch = epoch;
        }
    }

    fn whose_turn(&self) -> (bool, bool) {
        match self.cfg.mode {
            TrainMode::FeaturesOnly => (true, false),
            TrainMode::Joint => (true, true),
            TrainMode::Decoupled { period } => {
                // Kernel-first alternation.
                if (self.t / period) % 2 == 0 {
                    (false, true)
                } else {
                    (true, false)
                }
            }
        }
    }

    /// One gradient step. Returns the loss at the step's starting
    /// parameters (over the batch in minibatch mode).
    pub fn step(&mut self) -> Result<f64, TrainError> {
        let n = self.data.len();
        let d = self.model.output_dim();
        let (update_features, update_kernel) = self.whose_turn();

        self.batch.clear();
        match self.cfg.batch {
            BatchSpec::Full => self.batch.extend(0..n),
            BatchSpec::Minibatch(b) => {
                let picked = rand::seq::index::sample(&mut self.rng, n, b);
                self.batch.extend(picked.iter());
            }
        }

        // Forward pass over the batch at the step's starting parameters:
        // residuals, loss, and (when the kernel trains this step) upstream
        // cotangents and parameter gradients.
        let GridModel {
            geometry,
            kernel,
            features,
        } = &mut *self.model;
        let kernel_trains = update_kernel && kernel.is_trainable();
        if kernel_trains {
            self.theta_grads.as_mut().unwrap().set_zero();
        }
        self.residuals.clear();
        let mut loss = 0.0;
        for &i in &self.batch {
            let sample = &mut self.samples[i];
            Self::freshen_sample(
                &mut self.ctx,
                sample,
                kernel,
                geometry,
                self.data.point(i),
                self.kernel_epoch,
                kernel_trains,
            );
            let y = self.data.target(i);
            let base = self.residuals.len();
            self.residuals.resize(base + d, 0.0);
            let res = &mut self.residuals[base..];
            for (&node, &w) in sample.indices.as_slice().iter().zip(&sample.weights) {
                let f = features.node(node);
                for c in 0..d {
                    res[c] += w * f[c];
                }
            }
            for c in 0..d {
                res[c] -= y[c];
                loss += res[c] * res[c];
            }
            if kernel_trains {
                // Cotangent of each kernel weight: <residual, feature>.
                self.upstream.clear();
                for &node in sample.indices.as_slice() {
                    let f = features.node(node);
                    let u: f64 = res.iter().zip(f).map(|(r, fv)| r * fv).sum();
                    self.upstream.push(u);
                }
                if let KernelSpec::MulFa(params) = &*kernel {
                    // The forced eval above left this sample's chain states
                    // in the context.
                    self.ctx.grad_finish(
                        params,
                        geometry,
                        &sample.indices,
                        &self.upstream,
                        self.theta_grads.as_mut().unwrap(),
                    );
                }
            }
        }
        loss *= 0.5;
        self.history.loss.push(loss);
        if !loss.is_finite() {
            return Err(TrainError::Diverged { step: self.t, loss });
        }

        // Apply the feature update. Residuals and kernel gradients are
        // already computed, so both updates see the step's starting state.
        if update_features {
            let eta = self.cfg.learning_rate;
            for (pos, &i) in self.batch.iter().enumerate() {
                let res = &self.residuals[pos * d..(pos + 1) * d];
                let sample = &self.samples[i];
                for (&node, &w) in sample.indices.as_slice().iter().zip(&sample.weights) {
                    let f = features.node_mut(node);
                    for c in 0..d {
                        f[c] -= eta * w * res[c];
                    }
                }
            }
        }
        if kernel_trains {
            let eta = self.cfg.effective_kernel_lr();
            if let KernelSpec::MulFa(params) = kernel {
                params.add_scaled(self.theta_grads.as_ref().unwrap(), -eta);
            }
            self.kernel_epoch += 1;
            self.ctx.invalidate();
        }

        self.t += 1;
        self.history
            .weight_change
            .push(self.model.features.frobenius_distance(&self.initial_features));
        if self.t % self.cfg.snapshot_period == 0 || self.t == self.cfg.steps {
            self.record_snapshot(self.t);
        }
        Ok(loss)
    }

    fn record_snapshot(&mut self, step: usize) {
        if step == 0 {
            self.history.weight_change.push(0.0);
        }
        let d = self.model.output_dim();
        let n = self.data.len();
        let mut outputs = vec![0.0; n * d];
        {
            let GridModel {
                geometry,
                kernel,
                features,
            } = &mut *self.model;
            for i in 0..n {
                let sample = &mut self.samples[i];
                Self::freshen_sample(
                    &mut self.ctx,
                    sample,
                    kernel,
                    geometry,
                    self.data.point(i),
                    self.kernel_epoch,
                    false,
                );
                let out = &mut outputs[i * d..(i + 1) * d];
                for (&node, &w) in sample.indices.as_slice().iter().zip(&sample.weights) {
                    let f = features.node(node);
                    for c in 0..d {
                        out[c] += w * f[c];
                    }
                }
            }
        }
        let gtk_drift = self
            .initial_gtk
            .as_ref()
            .map(|g0| self.current_gtk().max_abs_diff(g0));
        self.history.snapshots.push(Snapshot {
            step,
            outputs,
            gtk_drift,
        });
    }

    /// Close out the run: appends the final full-dataset loss and returns
    /// the history.
    pub fn finish(mut self) -> TrainHistory {
        self.history.loss.push(mse_loss(self.model, self.data));
        self.history
    }
}

/// Gradient check result: worst absolute deviation between analytic and
/// central-difference gradients, relative to the largest gradient magnitude
/// in the group (floored at 1e-8 so all-zero gradients compare absolutely).
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub w_rel_err: f64,
    /// None when the kernel has no trainable parameters.
    pub theta_rel_err: Option<f64>,
    pub w_step: f64,
    pub theta_step: f64,
}

fn rel_scale(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .chain(b)
        .fold(0.0f64, |m, &v| m.max(v.abs()))
        .max(1e-8)
}

/// Compare analytic loss gradients against central finite differences on a
/// perturbed copy of the model. Evaluates the full loss twice per
/// parameter, so keep this to analysis-scale models.
///
/// The two parameter groups need different steps. The loss is a quadratic
/// polynomial in each feature entry, so the feature quotient carries no
/// truncation error and a generous `w_step` only suppresses rounding noise.
/// Kernel parameters pass through the filter chain, where truncation is
/// real, so `theta_step` stays small.
pub fn gradcheck(
    model: &GridModel,
    data: &Dataset,
    w_step: f64,
    theta_step: f64,
) -> GradCheckReport {
    let d = model.output_dim();
    let m = model.geometry.node_count();
    let n = data.len();

    // Analytic gradients at the current parameters.
    let mut w_grad = vec![0.0; m * d];
    let mut theta_grad = match &model.kernel {
        KernelSpec::MulFa(p) => Some(p.zeros_like()),
        _ => None,
    };
    let mut ctx = EvalContext::new();
    let mut weights = Vec::new();
    let mut upstream = Vec::new();
    let mut res = vec![0.0; d];
    for i in 0..n {
        let x = data.point(i);
        let idx = model.geometry.index_set(x);
        ctx.eval(&model.kernel, &model.geometry, x, &idx, &mut weights);
        res.fill(0.0);
        for (&node, &w) in idx.as_slice().iter().zip(&weights) {
            let f = model.features.node(node);
            for c in 0..d {
                res[c] += w * f[c];
            }
        }
        for (c, y) in data.target(i).iter().enumerate() {
            res[c] -= y;
        }
        for (&node, &w) in idx.as_slice().iter().zip(&weights) {
            for c in 0..d {
                w_grad[node * d + c] += w * res[c];
            }
        }
        if let (Some(grads), KernelSpec::MulFa(params)) = (&mut theta_grad, &model.kernel) {
            upstream.clear();
            for &node in idx.as_slice() {
                let f = model.features.node(node);
                upstream.push(res.iter().zip(f).map(|(r, fv)| r * fv).sum());
            }
            ctx.grad_finish(params, &model.geometry, &idx, &upstream, grads);
        }
    }

    // Central differences through the full loss.
    let h = w_step;
    let mut probe = model.clone();
    let mut w_fd = vec![0.0; m * d];
    for j in 0..m * d {
        let (node, c) = (j / d, j % d);
        let orig = probe.features.node(node)[c];
        probe.features.node_mut(node)[c] = orig + h;
        let plus = mse_loss(&probe, data);
        probe.features.node_mut(node)[c] = orig - h;
        let minus = mse_loss(&probe, data);
        probe.features.node_mut(node)[c] = orig;
        w_fd[j] = (plus - minus) / (2.0 * h);
    }
    let w_scale = rel_scale(&w_grad, &w_fd);
    let w_rel_err = w_grad
        .iter()
        .zip(&w_fd)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        / w_scale;

    let theta_rel_err = theta_grad.map(|grads| {
        let analytic = grads.flatten();
        let flat = match &model.kernel {
            KernelSpec::MulFa(p) => p.flatten(),
            _ => unreachable!(),
        };
        let h = theta_step;
        let mut fd = vec![0.0; flat.len()];
        for j in 0..flat.len() {
            let mut eval_at = |delta: f64| {
                let mut bumped = flat.clone();
                bumped[j] += delta;
                if let KernelSpec::MulFa(p) = &mut probe.kernel {
                    p.assign_from_flat(&bumped);
                }
                mse_loss(&probe, data)
            };
            fd[j] = (eval_at(h) - eval_at(-h)) / (2.0 * h);
        }
        let scale = rel_scale(&analytic, &fd);
        analytic
            .iter()
            .zip(&fd)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
            / scale
    });

    GradCheckReport {
        w_rel_err,
        theta_rel_err,
        w_step,
        theta_step,
    }
}
