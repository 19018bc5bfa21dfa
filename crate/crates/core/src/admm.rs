//! Three-phase pruning pipeline: penalty-regularized pre-pruning
//! (alternating weight training, Euclidean projection of the auxiliary
//! variables, and scaled dual updates), masked mapping (hard projection),
//! and gradient-masked retraining.
//!
//! Per layer the state is the triple (W, Z, U): W lives in the network, Z is
//! the projected auxiliary variable (always feasible after its update), and
//! U is the scaled dual. Updates:
//!
//! ```text
//! Z = project(W + U)        onto the layer's sparsity set
//! U = U + (W - Z)           elementwise, exactly this association
//! ```
//!
//! and training minimizes task loss + sum (rho/2) * ||W - Z + U||_F^2.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::nets::{GradHook, Network, PipelineTask};
use crate::sparsity::{project, MaskSet, SparsityConstraint, SparsityMode};
use crate::tensor::GemmMatrix;

/// Per-layer auxiliary and dual variables plus the layer's constraint.
#[derive(Debug, Clone)]
pub struct AdmmLayerState {
    pub ordinal: usize,
    pub z: GemmMatrix,
    pub u: GemmMatrix,
    pub constraint: SparsityConstraint,
}

#[derive(Debug, Clone)]
pub struct AdmmState {
    pub layers: Vec<AdmmLayerState>,
    pub rho: f64,
    pub iteration: usize,
}

impl AdmmState {
    /// Z starts at the projection of the initial weights, U at zero.
    pub fn init(
        net: &Network,
        constraints: &[(usize, SparsityConstraint)],
        rho: f64,
    ) -> Result<Self> {
        if !(rho > 0.0) || !rho.is_finite() {
            return Err(Error::usage(format!("rho must be positive, got {rho}")));
        }
        let mut layers = Vec::with_capacity(constraints.len());
        for &(ordinal, constraint) in constraints {
            let w = net.gemm_weights(ordinal)?;
            constraint.validate_for(w.rows(), w.cols())?;
            let (z, _) = project(&w, &constraint)?;
            let u = GemmMatrix::zeros(w.rows(), w.cols());
            layers.push(AdmmLayerState {
                ordinal,
                z,
                u,
                constraint,
            });
        }
        Ok(Self {
            layers,
            rho,
            iteration: 0,
        })
    }

    /// The penalty term sum (rho/2) * ||W - Z + U||_F^2, accumulated in f64.
    pub fn penalty(&self, net: &Network) -> Result<f64> {
        let mut total = 0.0f64;
        for layer in &self.layers {
            let w = net.gemm_weights(layer.ordinal)?;
            total += penalty_term(&w, &layer.z, &layer.u, self.rho)?;
        }
        Ok(total)
    }

    /// ||W - Z||_F per layer, the primal residuals logged by the pipeline.
    pub fn primal_residuals(&self, net: &Network) -> Result<Vec<(usize, f64)>> {
        self.layers
            .iter()
            .map(|l| {
                let w = net.gemm_weights(l.ordinal)?;
                Ok((l.ordinal, w.sub(&l.z)?.frobenius_norm()))
            })
            .collect()
    }

    /// One Z/U update against the network's current weights.
    pub fn step(&mut self, net: &Network) -> Result<()> {
        for layer in &mut self.layers {
            let w = net.gemm_weights(layer.ordinal)?;
            admm_update(&w, layer)?;
        }
        self.iteration += 1;
        Ok(())
    }

    /// Every Z must satisfy its constraint exactly (by direct counting).
    pub fn verify_feasible(&self) -> Result<()> {
        for layer in &self.layers {
            if !is_feasible(&layer.z, &layer.constraint) {
                return Err(Error::Invariant {
                    context: format!("auxiliary variable infeasible at conv {}", layer.ordinal),
                });
            }
        }
        Ok(())
    }
}

/// `Z = project(W + U)`, `U = U + (W - Z)`. The dual update is exactly this
/// elementwise expression, which the feasibility tests re-verify bit by bit.
pub fn admm_update(w: &GemmMatrix, layer: &mut AdmmLayerState) -> Result<()> {
    let target = w.add(&layer.u)?;
    let (z, _) = project(&target, &layer.constraint)?;
    let mut u = layer.u.clone();
    for ((uv, &wv), &zv) in u.data_mut().iter_mut().zip(w.data()).zip(z.data()) {
        *uv += wv - zv;
    }
    layer.z = z;
    layer.u = u;
    Ok(())
}

/// `(rho/2) * ||W - Z + U||_F^2` in f64.
pub fn penalty_term(w: &GemmMatrix, z: &GemmMatrix, u: &GemmMatrix, rho: f64) -> Result<f64> {
    if !w.same_shape(z) || !w.same_shape(u) {
        return Err(Error::ShapeMismatch {
            context: "penalty_term",
            expected: format!("{}x{}", w.rows(), w.cols()),
            actual: "incongruent W/Z/U".into(),
        });
    }
    let mut sq = 0.0f64;
    for ((&wv, &zv), &uv) in w.data().iter().zip(z.data()).zip(u.data()) {
        let d = wv as f64 - zv as f64 + uv as f64;
        sq += d * d;
    }
    Ok(0.5 * rho * sq)
}

/// Analytic gradient of the penalty term w.r.t. W: `rho * (W - Z + U)`.
pub fn penalty_grad(w: &GemmMatrix, z: &GemmMatrix, u: &GemmMatrix, rho: f64) -> Result<GemmMatrix> {
    if !w.same_shape(z) || !w.same_shape(u) {
        return Err(Error::ShapeMismatch {
            context: "penalty_grad",
            expected: format!("{}x{}", w.rows(), w.cols()),
            actual: "incongruent W/Z/U".into(),
        });
    }
    let r = rho as f32;
    let data = w
        .data()
        .iter()
        .zip(z.data())
        .zip(u.data())
        .map(|((&wv, &zv), &uv)| r * (wv - zv + uv))
        .collect();
    GemmMatrix::new(w.rows(), w.cols(), data)
}

impl GradHook for AdmmState {
    fn adjust(&self, net: &mut Network) -> Result<()> {
        for layer in &self.layers {
            let w = net.gemm_weights(layer.ordinal)?;
            let g = penalty_grad(&w, &layer.z, &layer.u, self.rho)?;
            net.add_conv_grad(layer.ordinal, &g)?;
        }
        Ok(())
    }
}

/// Task loss plus the penalty term; errors on divergence.
pub fn augmented_loss(task_loss: f64, net: &Network, state: &AdmmState) -> Result<f64> {
    let total = task_loss + state.penalty(net)?;
    if !total.is_finite() {
        return Err(Error::NonFinite {
            context: format!("augmented loss diverged at iteration {}", state.iteration),
        });
    }
    Ok(total)
}

/// Direct-count feasibility of a weight matrix against a constraint.
pub fn is_feasible(m: &GemmMatrix, c: &SparsityConstraint) -> bool {
    let nonzero_rows = || {
        (0..m.rows())
            .filter(|&r| m.row(r).iter().any(|&v| v != 0.0))
            .count()
    };
    let nonzero_cols = || {
        (0..m.cols())
            .filter(|&col| (0..m.rows()).any(|r| m.at(r, col) != 0.0))
            .count()
    };
    match c.mode {
        SparsityMode::Irregular => m.count_nonzero() <= c.alpha_weights.unwrap_or(0),
        SparsityMode::Filter => nonzero_rows() <= c.alpha_filters.unwrap_or(0),
        SparsityMode::Column => nonzero_cols() <= c.alpha_columns.unwrap_or(0),
        SparsityMode::Combined => {
            nonzero_rows() <= c.alpha_filters.unwrap_or(0)
                && nonzero_cols() <= c.alpha_columns.unwrap_or(0)
        }
    }
}

/// Hard-project every constrained layer's weights and record the masks. The
/// network is exactly feasible afterwards.
pub fn masked_mapping(
    net: &mut Network,
    constraints: &[(usize, SparsityConstraint)],
) -> Result<MaskSet> {
    let mut masks = MaskSet::new();
    for &(ordinal, constraint) in constraints {
        let w = net.gemm_weights(ordinal)?;
        let (projected, mask) = project(&w, &constraint)?;
        if !is_feasible(&projected, &constraint) {
            return Err(Error::Invariant {
                context: format!("projection left conv {ordinal} infeasible"),
            });
        }
        net.set_gemm_weights(ordinal, &projected)?;
        masks.insert(ordinal, mask);
    }
    Ok(masks)
}

/// Gradient-masked fine-tuning; masked weights stay exactly zero, which is
/// re-verified after every epoch.
pub fn retrain(
    net: &mut Network,
    masks: &MaskSet,
    epochs: usize,
    task: &mut dyn PipelineTask,
) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let loss = task.train_epoch(net, None, Some(masks))?;
        net.verify_mask_support(masks)?;
        losses.push(loss);
    }
    Ok(losses)
}

/// How combined-mode pruning runs: two sequential passes (filters first,
/// then columns on the filter-masked model) or one joint run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinedStrategy {
    #[default]
    Sequential,
    Joint,
}

#[derive(Debug, Clone)]
pub struct PruneSchedule {
    pub admm_iterations: usize,
    pub epochs_per_iteration: usize,
    pub retrain_epochs: usize,
    pub rho: f64,
    pub constraints: Vec<(usize, SparsityConstraint)>,
    pub strategy: CombinedStrategy,
}

impl PruneSchedule {
    pub fn new(constraints: Vec<(usize, SparsityConstraint)>) -> Self {
        Self {
            admm_iterations: 9,
            epochs_per_iteration: 1,
            retrain_epochs: 1,
            rho: 1e-3,
            constraints,
            strategy: CombinedStrategy::default(),
        }
    }

    /// Constraints must cover every prunable layer exactly once and be valid
    /// for each layer's dimensions.
    pub fn validate(&self, net: &Network) -> Result<()> {
        if self.admm_iterations == 0 || self.epochs_per_iteration == 0 || self.retrain_epochs == 0
        {
            return Err(Error::usage("schedule counts must be >= 1"));
        }
        let mut covered: Vec<usize> = self.constraints.iter().map(|&(o, _)| o).collect();
        covered.sort_unstable();
        let expected = net.prunable_ordinals();
        if covered.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::usage("duplicate constraint for a layer"));
        }
        if covered != expected {
            return Err(Error::usage(format!(
                "constraints cover layers {covered:?} but prunable layers are {expected:?}"
            )));
        }
        for &(ordinal, c) in &self.constraints {
            let (rows, cols) = net.gemm_dims(ordinal)?;
            c.validate_for(rows, cols)?;
        }
        Ok(())
    }

    /// The per-pass constraint sets this schedule expands to.
    fn passes(&self) -> Vec<Vec<(usize, SparsityConstraint)>> {
        let all_combined = self
            .constraints
            .iter()
            .all(|(_, c)| c.mode == SparsityMode::Combined);
        if all_combined && self.strategy == CombinedStrategy::Sequential {
            let filters = self
                .constraints
                .iter()
                .map(|&(o, c)| (o, SparsityConstraint::filter(c.alpha_filters.unwrap())))
                .collect();
            let columns = self
                .constraints
                .iter()
                .map(|&(o, c)| (o, SparsityConstraint::column(c.alpha_columns.unwrap())))
                .collect();
            vec![filters, columns]
        } else {
            vec![self.constraints.clone()]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    PrePruning,
    MaskedMapping,
    Retraining,
}

/// One line of the pipeline's progress log.
#[derive(Debug, Clone, Serialize)]
pub struct ProgressRecord {
    pub pass: usize,
    pub phase: Phase,
    pub iteration: usize,
    pub epoch: usize,
    pub loss: f64,
    pub augmented_loss: f64,
    /// (conv ordinal, ||W - Z||_F) pairs; empty outside pre-pruning.
    pub residuals: Vec<(usize, f64)>,
}

pub trait PipelineObserver {
    fn on_progress(&mut self, _record: &ProgressRecord) -> Result<()> {
        Ok(())
    }
    fn on_phase_complete(
        &mut self,
        _pass: usize,
        _phase: Phase,
        _net: &Network,
        _masks: Option<&MaskSet>,
    ) -> Result<()> {
        Ok(())
    }
}

pub struct NoopObserver;

impl PipelineObserver for NoopObserver {}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub masks: MaskSet,
    pub loss_trajectory: Vec<f64>,
    /// Per constrained layer: does the final mask satisfy the layer's
    /// original constraint structure, with the weight support inside it?
    pub layer_feasibility: Vec<(usize, bool)>,
}

/// The full three-phase pipeline (per pass: pre-pruning, masked mapping,
/// retraining). Sequential combined mode runs two passes; masks compose by
/// intersection.
pub fn run_pipeline(
    net: &mut Network,
    schedule: &PruneSchedule,
    task: &mut dyn PipelineTask,
    observer: &mut dyn PipelineObserver,
) -> Result<PipelineOutcome> {
    schedule.validate(net)?;
    let mut masks_so_far: Option<MaskSet> = None;
    let mut trajectory: Vec<f64> = Vec::new();

    for (pass, constraints) in schedule.passes().iter().enumerate() {
        // Phase 1: penalty-regularized pre-pruning.
        let mut state = AdmmState::init(net, constraints, schedule.rho)?;
        for iteration in 0..schedule.admm_iterations {
            for epoch in 0..schedule.epochs_per_iteration {
                let loss = task.train_epoch(net, Some(&state), masks_so_far.as_ref())?;
                let aug = augmented_loss(loss, net, &state)?;
                trajectory.push(loss);
                observer.on_progress(&ProgressRecord {
                    pass,
                    phase: Phase::PrePruning,
                    iteration,
                    epoch,
                    loss,
                    augmented_loss: aug,
                    residuals: state.primal_residuals(net)?,
                })?;
            }
            state.step(net)?;
            state.verify_feasible()?;
        }
        observer.on_phase_complete(pass, Phase::PrePruning, net, masks_so_far.as_ref())?;

        // Phase 2: masked mapping.
        let new_masks = masked_mapping(net, constraints)?;
        let merged = match masks_so_far.take() {
            None => new_masks,
            Some(prev) => {
                let mut merged = MaskSet::new();
                for (ordinal, mask) in new_masks.iter() {
                    let combined = match prev.get(ordinal) {
                        Some(p) => p.and(mask)?,
                        None => mask.clone(),
                    };
                    merged.insert(ordinal, combined);
                }
                merged
            }
        };
        // Re-apply the merged mask so composed passes leave exactly the
        // intersected support.
        for (ordinal, mask) in merged.iter() {
            let w = net.gemm_weights(ordinal)?;
            net.set_gemm_weights(ordinal, &crate::sparsity::apply_mask(&w, mask)?)?;
        }
        masks_so_far = Some(merged);
        observer.on_phase_complete(pass, Phase::MaskedMapping, net, masks_so_far.as_ref())?;

        // Phase 3: gradient-masked retraining.
        let masks = masks_so_far.as_ref().expect("masks recorded");
        for epoch in 0..schedule.retrain_epochs {
            let loss = task.train_epoch(net, None, Some(masks))?;
            net.verify_mask_support(masks)?;
            trajectory.push(loss);
            observer.on_progress(&ProgressRecord {
                pass,
                phase: Phase::Retraining,
                iteration: schedule.admm_iterations,
                epoch,
                loss,
                augmented_loss: loss,
                residuals: Vec::new(),
            })?;
        }
        observer.on_phase_complete(pass, Phase::Retraining, net, masks_so_far.as_ref())?;
    }

    let masks = masks_so_far.unwrap_or_default();
    let mut layer_feasibility = Vec::new();
    for &(ordinal, constraint) in &schedule.constraints {
        let ok = match masks.get(ordinal) {
            Some(mask) => {
                let w = net.gemm_weights(ordinal)?;
                mask.matches_constraint(&constraint) && is_feasible(&w, &constraint)
            }
            None => false,
        };
        layer_feasibility.push((ordinal, ok));
    }
    Ok(PipelineOutcome {
        masks,
        loss_trajectory: trajectory,
        layer_feasibility,
    })
}
