use rayon::prelude::*;

use super::control::{ControlGrid, Upsampler};
use super::RegistrationConfig;
use crate::diffeo::{exp_trajectory, gaussian_taps, jacobian_data, smooth_data};
use crate::error::{Error, Result};
use crate::interp::Stencil;
use crate::linalg::Mat3;
use crate::loss::{bending_energy_data, check_be_grid, ncc_parts, LossReport, NccParts};
use crate::reduce::stable_sum;
use crate::tensor::{polar_rotation, reorient_tensor, FoldPolicy, ReorientStats, Rotation, SymTensor};
use crate::volume::{
    assert_same_grid, FieldKind, GridSpec, HasGrid, ScalarVolume, TensorVolume, VectorField,
};

/// Images to register. The tensor pair is optional; without it the tensor
/// term is dropped from the loss.
#[derive(Debug, Clone, Copy)]
pub struct RegistrationInputs<'a> {
    pub fixed_t2w: &'a ScalarVolume,
    pub moving_t2w: &'a ScalarVolume,
    pub dti: Option<(&'a TensorVolume, &'a TensorVolume)>,
}

impl<'a> RegistrationInputs<'a> {
    /// Structural pair only.
    pub fn new(fixed_t2w: &'a ScalarVolume, moving_t2w: &'a ScalarVolume) -> Result<Self> {
        assert_same_grid(fixed_t2w, moving_t2w)?;
        Ok(RegistrationInputs {
            fixed_t2w,
            moving_t2w,
            dti: None,
        })
    }

    /// Adds the fixed and moving tensor volumes.
    pub fn with_dti(mut self, fixed: &'a TensorVolume, moving: &'a TensorVolume) -> Result<Self> {
        assert_same_grid(self.fixed_t2w, fixed)?;
        assert_same_grid(self.fixed_t2w, moving)?;
        self.dti = Some((fixed, moving));
        Ok(self)
    }

    pub fn grid(&self) -> &GridSpec {
        self.fixed_t2w.grid()
    }
}

/// Per-voxel tensor quantities kept for the gradient.
#[derive(Debug, Clone)]
pub(crate) struct DtiForward {
    /// Component-warped moving tensors.
    pub moved: Vec<SymTensor>,
    pub jac: Vec<Mat3>,
    /// Polar rotation, `None` where the lenient policy substituted identity.
    pub rot: Vec<Option<Mat3>>,
    pub reoriented: Vec<SymTensor>,
}

/// Every intermediate of one loss evaluation.
#[derive(Debug, Clone)]
pub(crate) struct Forward {
    /// Smoothed dense velocity.
    pub v: Vec<[f64; 3]>,
    /// Scaling-and-squaring iterates; the last is the displacement.
    pub traj: Vec<Vec<[f64; 3]>>,
    pub warped: Vec<f64>,
    pub ncc: NccParts,
    pub dti: Option<DtiForward>,
    pub reorient: ReorientStats,
    pub report: LossReport,
}

#[inline]
pub(crate) fn sample_position(grid: &GridSpec, idx: usize, u: [f64; 3]) -> Stencil {
    let c = grid.coords(idx);
    Stencil::new(grid, [c[0] as f64 + u[0], c[1] as f64 + u[1], c[2] as f64 + u[2]])
}

impl Forward {
    pub fn run(cg: &ControlGrid, inputs: &RegistrationInputs<'_>, cfg: &RegistrationConfig) -> Result<Self> {
        let grid = *inputs.grid();
        check_be_grid(&grid)?;
        let w = &cfg.weights;
        let dense = Upsampler::new(cg.dims(), &grid).forward(cg.points());
        let v = smooth_data(&grid, &dense, gaussian_taps(cfg.sigma_mm / grid.spacing_mm));
        let traj = exp_trajectory(&grid, &v, cfg.steps);
        let u = traj.last().expect("trajectory holds at least the scaled velocity");

        let moving = inputs.moving_t2w.data();
        let warped: Vec<f64> = (0..grid.len())
            .into_par_iter()
            .map(|idx| {
                sample_position(&grid, idx, u[idx])
                    .corners(&grid)
                    .iter()
                    .map(|&(i, wt)| wt * moving[i])
                    .sum()
            })
            .collect();
        let ncc = ncc_parts(inputs.fixed_t2w.data(), &warped, None)?;

        let mut reorient = ReorientStats::default();
        let (dti, eds) = match inputs.dti {
            Some((fixed, moving)) => {
                let d = Self::tensors(&grid, moving, u, cfg.fold_policy, &mut reorient)?;
                let f = fixed.data();
                let eds = stable_sum(grid.len(), |i| d.reoriented[i].sub(&f[i]).norm_sq());
                (Some(d), eds)
            }
            None => (None, 0.0),
        };
        let be = bending_energy_data(&grid, u);
        let report = LossReport::new(eds, ncc.value(), be, w);
        if !report.total.is_finite() {
            return Err(Error::NonFiniteLoss(format!(
                "eds {} ncc {} be {}",
                report.eds, report.ncc, report.be
            )));
        }
        Ok(Forward {
            v,
            traj,
            warped,
            ncc,
            dti,
            reorient,
            report,
        })
    }

    fn tensors(
        grid: &GridSpec,
        moving: &TensorVolume,
        u: &[[f64; 3]],
        policy: FoldPolicy,
        stats: &mut ReorientStats,
    ) -> Result<DtiForward> {
        let m = moving.data();
        let moved: Vec<SymTensor> = (0..grid.len())
            .into_par_iter()
            .map(|idx| {
                let mut out = [0.0; 6];
                for (i, wt) in sample_position(grid, idx, u[idx]).corners(grid) {
                    for q in 0..6 {
                        out[q] += wt * m[i].0[q];
                    }
                }
                SymTensor(out)
            })
            .collect();
        let jac = jacobian_data(grid, u);
        let polar: Vec<_> = jac.par_iter().map(polar_rotation).collect();
        let mut rot = Vec::with_capacity(grid.len());
        for (idx, p) in polar.into_iter().enumerate() {
            match p {
                Ok(r) => rot.push(Some(*r.matrix())),
                Err(fail) => match policy {
                    FoldPolicy::Strict => return Err(fail.at(grid.coords(idx))),
                    FoldPolicy::Lenient => {
                        match fail {
                            crate::tensor::PolarFailure::Folded(_) => stats.folded += 1,
                            crate::tensor::PolarFailure::Singular(_) => stats.singular += 1,
                        }
                        rot.push(None);
                    }
                },
            }
        }
        let reoriented = moved
            .par_iter()
            .zip(rot.par_iter())
            .map(|(d, r)| match r {
                Some(r) => reorient_tensor(d, &Rotation::new_unchecked(*r)),
                None => *d,
            })
            .collect();
        Ok(DtiForward {
            moved,
            jac,
            rot,
            reoriented,
        })
    }

    pub fn displacement_data(&self) -> &[[f64; 3]] {
        self.traj.last().expect("non-empty trajectory")
    }

    pub fn displacement(&self, grid: &GridSpec) -> Result<VectorField> {
        VectorField::new(*grid, FieldKind::Displacement, self.displacement_data().to_vec())
    }

    pub fn velocity(&self, grid: &GridSpec) -> Result<VectorField> {
        VectorField::new(*grid, FieldKind::Velocity, self.v.clone())
    }

    pub fn warped_t2w(&self, grid: &GridSpec) -> Result<ScalarVolume> {
        ScalarVolume::new(*grid, self.warped.clone())
    }

    pub fn warped_dti(&self, grid: &GridSpec) -> Result<Option<TensorVolume>> {
        self.dti
            .as_ref()
            .map(|d| TensorVolume::new(*grid, d.reoriented.clone()))
            .transpose()
    }
}

/// Total loss of the pipeline at control grid `cg`: upsample, smooth,
/// exponentiate, warp (and reorient), score.
pub fn evaluate(cg: &ControlGrid, inputs: &RegistrationInputs<'_>, cfg: &RegistrationConfig) -> Result<LossReport> {
    cfg.validate()?;
    Ok(Forward::run(cg, inputs, cfg)?.report)
}
