//! Direct optimisation of a stationary velocity field on a coarse control grid.
//!
//! The dense velocity is the trilinear interpolant of the control-point
//! velocities, smoothed with the pipeline Gaussian and exponentiated; the
//! moving images are warped by the result and scored with
//! [`total_loss`](crate::loss::total_loss). Control grids are refined
//! coarse-to-fine and each level runs gradient descent with a backtracking
//! line search.

mod control;
mod gradient;
mod pipeline;

pub use control::{upsample_control, ControlGrid};
pub use gradient::{fd_gradient, fd_gradient_of};
pub use pipeline::{evaluate, RegistrationInputs};

use crate::diffeo::DEFAULT_STEPS;
use crate::error::{Error, Result};
use crate::loss::{LossReport, LossWeights};
use crate::tensor::{FoldPolicy, ReorientStats};
use crate::volume::{ScalarVolume, TensorVolume, VectorField};

use pipeline::Forward;

/// How the optimiser obtains loss gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientMethod {
    /// Reverse-mode derivative of the full pipeline.
    #[default]
    Adjoint,
    /// Central finite differences with `fd_epsilon` ([`fd_gradient`]).
    FiniteDifference,
}

/// Optimiser settings. `Default` gives α = 1, β = 1, λ = 0.001, 7 squaring
/// steps, σ = 1.2 mm, levels 6³ then 12³, 60 iterations per level.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationConfig {
    pub weights: LossWeights,
    pub steps: u32,
    pub sigma_mm: f64,
    /// Control points per axis at each level, coarse to fine.
    pub levels: Vec<usize>,
    pub iterations: usize,
    /// First trial step of each level, in voxels (largest parameter change).
    pub initial_step: f64,
    pub max_step: f64,
    /// Step multiplier after an accepted iteration.
    pub step_growth: f64,
    pub max_halvings: u32,
    pub fd_epsilon: f64,
    pub fold_policy: FoldPolicy,
    pub gradient: GradientMethod,
    /// Recorded with the results. The optimiser itself draws no random numbers.
    pub seed: u64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            weights: LossWeights::default(),
            steps: DEFAULT_STEPS,
            sigma_mm: 1.2,
            levels: vec![6, 12],
            iterations: 60,
            initial_step: 0.5,
            max_step: 2.0,
            step_growth: 1.5,
            max_halvings: 8,
            fd_epsilon: 0.1,
            fold_policy: FoldPolicy::Strict,
            gradient: GradientMethod::Adjoint,
            seed: 0,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.levels.is_empty() || self.levels.iter().any(|&m| m < 2) {
            return bad(format!("every level needs at least 2 control points per axis: {:?}", self.levels));
        }
        if !(self.sigma_mm > 0.0 && self.sigma_mm.is_finite()) {
            return bad(format!("sigma must be positive, got {}", self.sigma_mm));
        }
        if !(self.fd_epsilon > 0.0 && self.fd_epsilon.is_finite()) {
            return bad(format!("fd_epsilon must be positive, got {}", self.fd_epsilon));
        }
        if !(self.initial_step > 0.0 && self.max_step >= self.initial_step && self.step_growth >= 1.0) {
            return bad(format!(
                "step schedule needs 0 < initial_step <= max_step and growth >= 1, got {} / {} / {}",
                self.initial_step, self.max_step, self.step_growth
            ));
        }
        Ok(())
    }
}

/// One accepted state of the optimiser.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    /// Index into `RegistrationConfig::levels`.
    pub level: usize,
    /// 0 for the starting point, then one per accepted step.
    pub iteration: usize,
    pub step: f64,
    pub loss: LossReport,
}

/// Output of [`register`].
#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub control: ControlGrid,
    /// Smoothed dense velocity; `exp_svf(velocity, steps)` reproduces `phi`.
    pub velocity: VectorField,
    pub phi: VectorField,
    pub warped_t2w: ScalarVolume,
    /// Component-warped and reoriented moving tensors, when given.
    pub warped_dti: Option<TensorVolume>,
    pub reorient: ReorientStats,
    /// Starting loss followed by every accepted iteration; totals never increase.
    pub trace: Vec<TraceEntry>,
}

impl RegistrationResult {
    pub fn initial(&self) -> &LossReport {
        &self.trace[0].loss
    }

    pub fn final_loss(&self) -> &LossReport {
        &self.trace.last().expect("trace starts with the initial loss").loss
    }
}

fn gradient(cg: &ControlGrid, fwd: &Forward, inputs: &RegistrationInputs<'_>, cfg: &RegistrationConfig) -> Result<Vec<f64>> {
    match cfg.gradient {
        GradientMethod::Adjoint => Ok(gradient::adjoint_gradient(cg, fwd, inputs, cfg)),
        GradientMethod::FiniteDifference => fd_gradient(cg, inputs, cfg),
    }
}

/// Loss at a trial point, or `None` if the deformation folds there.
fn trial(cg: &ControlGrid, inputs: &RegistrationInputs<'_>, cfg: &RegistrationConfig) -> Result<Option<Forward>> {
    match Forward::run(cg, inputs, cfg) {
        Ok(f) => Ok(Some(f)),
        Err(e @ (Error::Folding { .. } | Error::SingularJacobian { .. })) => {
            log::debug!("trial step rejected: {e}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Registers the moving images onto the fixed ones.
///
/// At each level the step is a normalised gradient step (largest control
/// point change equals the current step size). A trial is accepted only if
/// the total loss drops below the last accepted value; otherwise the step is
/// halved, up to `max_halvings` times, after which the level ends. Trial
/// points whose deformation folds are rejected like any non-improving trial.
/// Moving to the next level interpolates the coarse dense field at the finer
/// control points; that point is accepted into the trace only if it does not
/// raise the loss.
pub fn register(inputs: &RegistrationInputs<'_>, cfg: &RegistrationConfig) -> Result<RegistrationResult> {
    cfg.validate()?;
    let grid = *inputs.grid();
    let mut cg = ControlGrid::cube(cfg.levels[0]);
    let mut current = Forward::run(&cg, inputs, cfg)?;
    let mut best_cg = cg.clone();
    let mut best = current.clone();
    let mut trace = vec![TraceEntry {
        level: 0,
        iteration: 0,
        step: 0.0,
        loss: current.report,
    }];

    for (level, &m) in cfg.levels.iter().enumerate() {
        if level > 0 {
            cg = best_cg.promote([m; 3]);
            current = match trial(&cg, inputs, cfg)? {
                Some(f) => f,
                None => continue,
            };
            log::info!(
                "level {level}: promoted to {m}³, loss {:.6} (previous {:.6})",
                current.report.total,
                best.report.total
            );
            if current.report.total <= best.report.total {
                best_cg = cg.clone();
                best = current.clone();
                trace.push(TraceEntry {
                    level,
                    iteration: 0,
                    step: 0.0,
                    loss: current.report,
                });
            }
        }
        let mut step = cfg.initial_step;
        for iteration in 1..=cfg.iterations {
            let g = gradient(&cg, &current, inputs, cfg)?;
            let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if gmax == 0.0 || !gmax.is_finite() {
                break;
            }
            let mut accepted = None;
            for _ in 0..=cfg.max_halvings {
                let next = cg.stepped(&g, -step / gmax);
                if let Some(f) = trial(&next, inputs, cfg)? {
                    if f.report.total < current.report.total {
                        accepted = Some((next, f));
                        break;
                    }
                }
                step *= 0.5;
            }
            let Some((next, f)) = accepted else {
                log::info!("level {level}: line search exhausted after {iteration} iterations");
                break;
            };
            cg = next;
            current = f;
            if current.report.total < best.report.total {
                best_cg = cg.clone();
                best = current.clone();
                trace.push(TraceEntry {
                    level,
                    iteration,
                    step,
                    loss: current.report,
                });
            }
            log::debug!("level {level} iteration {iteration}: loss {:.8} step {step:.4}", current.report.total);
            step = (step * cfg.step_growth).min(cfg.max_step);
        }
    }

    let phi = best.displacement(&grid)?;
    Ok(RegistrationResult {
        control: best_cg,
        velocity: best.velocity(&grid)?,
        phi,
        warped_t2w: best.warped_t2w(&grid)?,
        warped_dti: best.warped_dti(&grid)?,
        reorient: best.reorient,
        trace,
    })
}
