use rayon::prelude::*;

use super::control::{ControlGrid, Upsampler};
use super::pipeline::{evaluate, sample_position, Forward, RegistrationInputs};
use super::RegistrationConfig;
use crate::diffeo::{convolve_axis_adjoint, diff_stencil, gaussian_taps};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat3};
use crate::loss::bending_energy_grad;
use crate::tensor::polar_rotation_vjp;
use crate::volume::GridSpec;

/// Central finite-difference gradient of any function of the control grid:
/// `g_i = (E(p + ε e_i) − E(p − ε e_i)) / 2ε`, in flat parameter order.
pub fn fd_gradient_of<F>(cg: &ControlGrid, epsilon: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&ControlGrid) -> Result<f64>,
{
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidParameter(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut probe = cg.clone();
    let mut g = Vec::with_capacity(cg.param_count());
    for i in 0..cg.param_count() {
        let p = cg.param(i);
        probe.set_param(i, p + epsilon);
        let plus = f(&probe)?;
        probe.set_param(i, p - epsilon);
        let minus = f(&probe)?;
        probe.set_param(i, p);
        g.push((plus - minus) / (2.0 * epsilon));
    }
    Ok(g)
}

/// Finite-difference gradient of the total registration loss with step
/// `cfg.fd_epsilon`.
pub fn fd_gradient(cg: &ControlGrid, inputs: &RegistrationInputs<'_>, cfg: &RegistrationConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    fd_gradient_of(cg, cfg.fd_epsilon, |p| Ok(evaluate(p, inputs, cfg)?.total))
}

/// `∂(value sampled at p)/∂p` for an interleaved buffer, one row per channel.
#[inline]
fn sample_gradient<const C: usize>(grid: &GridSpec, data: &[[f64; C]], idx: usize, u: [f64; 3]) -> [[f64; 3]; C] {
    let st = sample_position(grid, idx, u);
    let mut out = [[0.0; 3]; C];
    for ((i, _), wg) in st.corners(grid).iter().zip(st.weight_gradients()) {
        for c in 0..C {
            for a in 0..3 {
                out[c][a] += wg[a] * data[*i][c];
            }
        }
    }
    out
}

/// Gradient of the data and regularisation terms with respect to the final
/// displacement `u`.
fn displacement_cotangent(fwd: &Forward, inputs: &RegistrationInputs<'_>, cfg: &RegistrationConfig) -> Vec<[f64; 3]> {
    let grid = *inputs.grid();
    let w = &cfg.weights;
    let u = fwd.displacement_data();
    let mut bar = bending_energy_grad(&grid, u);
    for b in bar.iter_mut() {
        for c in b.iter_mut() {
            *c *= w.lambda;
        }
    }

    let f = inputs.fixed_t2w.data();
    let moving: Vec<[f64; 1]> = inputs.moving_t2w.data().iter().map(|&m| [m]).collect();
    let ncc_bar: Vec<[f64; 3]> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let k = w.beta * fwd.ncc.grad_m(f[idx], fwd.warped[idx]);
            let [g] = sample_gradient(&grid, &moving, idx, u[idx]);
            [k * g[0], k * g[1], k * g[2]]
        })
        .collect();
    for (b, n) in bar.iter_mut().zip(&ncc_bar) {
        for a in 0..3 {
            b[a] += n[a];
        }
    }

    if let (Some(d), Some((fixed, moving)), true) = (&fwd.dti, inputs.dti, w.alpha > 0.0) {
        let fixed = fixed.data();
        let moving: Vec<[f64; 6]> = moving.data().iter().map(|t| t.0).collect();
        let per_voxel: Vec<([f64; 3], Mat3)> = (0..grid.len())
            .into_par_iter()
            .map(|idx| {
                let a = d.reoriented[idx].sub(&fixed[idx]).to_matrix();
                let dw = d.moved[idx].to_matrix();
                let (dbar, jbar) = match &d.rot[idx] {
                    Some(r) => {
                        let rt = linalg::transpose(r);
                        let dbar = linalg::mul(&linalg::mul(&rt, &a), r);
                        let ar = linalg::mul(&a, r);
                        let rbar = linalg::mul(&ar, &dw);
                        let rbar = rbar.map(|row| row.map(|x| 4.0 * w.alpha * x));
                        (dbar, polar_rotation_vjp(r, &d.jac[idx], &rbar))
                    }
                    None => (a, [[0.0; 3]; 3]),
                };
                let k = 2.0 * w.alpha;
                let dbar6 = [
                    k * dbar[0][0],
                    k * dbar[1][1],
                    k * dbar[2][2],
                    k * (dbar[0][1] + dbar[1][0]),
                    k * (dbar[0][2] + dbar[2][0]),
                    k * (dbar[1][2] + dbar[2][1]),
                ];
                let g = sample_gradient(&grid, &moving, idx, u[idx]);
                let mut local = [0.0; 3];
                for q in 0..6 {
                    for ax in 0..3 {
                        local[ax] += dbar6[q] * g[q][ax];
                    }
                }
                (local, jbar)
            })
            .collect();
        for (idx, (local, jbar)) in per_voxel.iter().enumerate() {
            for a in 0..3 {
                bar[idx][a] += local[a];
            }
            let c = grid.coords(idx);
            for axis in 0..3 {
                let (hi, lo, div) = diff_stencil(&grid, idx, c[axis], axis);
                for r in 0..3 {
                    let v = jbar[r][axis] / div;
                    bar[hi][r] += v;
                    bar[lo][r] -= v;
                }
            }
        }
    }
    bar
}

/// Pulls a cotangent on the final displacement back through scaling and
/// squaring to the (smoothed) velocity.
fn exp_adjoint(grid: &GridSpec, traj: &[Vec<[f64; 3]>], mut bar: Vec<[f64; 3]>) -> Vec<[f64; 3]> {
    for uk in traj[..traj.len() - 1].iter().rev() {
        // u_{k+1}(x) = u_k(x) + u_k(x + u_k(x))
        let local: Vec<[f64; 3]> = (0..grid.len())
            .into_par_iter()
            .map(|idx| {
                let b = bar[idx];
                let g = sample_gradient(grid, uk, idx, uk[idx]);
                std::array::from_fn(|a| b[a] + (0..3).map(|r| b[r] * g[r][a]).sum::<f64>())
            })
            .collect();
        let mut next = local;
        for (idx, b) in bar.iter().enumerate() {
            for (i, wt) in sample_position(grid, idx, uk[idx]).corners(grid) {
                for c in 0..3 {
                    next[i][c] += wt * b[c];
                }
            }
        }
        bar = next;
    }
    let scale = 0.5f64.powi(traj.len() as i32 - 1);
    for b in bar.iter_mut() {
        for c in b.iter_mut() {
            *c *= scale;
        }
    }
    bar
}

/// Exact gradient of the discrete pipeline by reverse-mode differentiation.
pub(crate) fn adjoint_gradient(
    cg: &ControlGrid,
    fwd: &Forward,
    inputs: &RegistrationInputs<'_>,
    cfg: &RegistrationConfig,
) -> Vec<f64> {
    let grid = *inputs.grid();
    let u_bar = displacement_cotangent(fwd, inputs, cfg);
    let v_bar = exp_adjoint(&grid, &fwd.traj, u_bar);
    let taps = gaussian_taps(cfg.sigma_mm / grid.spacing_mm);
    let z = convolve_axis_adjoint(&grid, &v_bar, 2, taps);
    let y = convolve_axis_adjoint(&grid, &z, 1, taps);
    let dense_bar = convolve_axis_adjoint(&grid, &y, 0, taps);
    Upsampler::new(cg.dims(), &grid)
        .adjoint(&dense_bar)
        .into_iter()
        .flatten()
        .collect()
}
