use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{FieldKind, GridSpec, VectorField};

/// Velocities (voxel units) at an `mx × my × mz` lattice of control points
/// spanning the grid, stored x-fastest like volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid {
    dims: [usize; 3],
    params: Vec<[f64; 3]>,
}

impl ControlGrid {
    pub fn new(dims: [usize; 3], params: Vec<[f64; 3]>) -> Result<Self> {
        if dims.iter().any(|&m| m < 2) {
            return Err(Error::InvalidGrid(format!(
                "control grids need at least 2 points per axis, got {dims:?}"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        if params.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} control points given for a {dims:?} control grid",
                params.len()
            )));
        }
        Ok(ControlGrid { dims, params })
    }

    pub fn zeros(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, vec![[0.0; 3]; dims[0] * dims[1] * dims[2]])
    }

    /// `m³` zero grid.
    ///
    /// # Panics
    /// If `m < 2`.
    pub fn cube(m: usize) -> Self {
        Self::zeros([m; 3]).expect("at least 2 control points per axis")
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.params
    }

    pub fn points_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.params
    }

    /// Number of scalar parameters, `3·mx·my·mz`.
    pub fn param_count(&self) -> usize {
        3 * self.params.len()
    }

    /// Flat parameter `i`: component `i % 3` of point `i / 3`.
    pub fn param(&self, i: usize) -> f64 {
        self.params[i / 3][i % 3]
    }

    pub fn set_param(&mut self, i: usize, value: f64) {
        self.params[i / 3][i % 3] = value;
    }

    /// `self + scale·direction` with `direction` in flat parameter order.
    pub fn stepped(&self, direction: &[f64], scale: f64) -> Self {
        let mut out = self.clone();
        for (p, d) in out.params.iter_mut().zip(direction.chunks_exact(3)) {
            for c in 0..3 {
                p[c] += scale * d[c];
            }
        }
        out
    }

    /// Value of the trilinear control interpolant at fractional control
    /// coordinates `t` (each in `[0, m − 1]`).
    fn interpolate(&self, t: [f64; 3]) -> [f64; 3] {
        let [mx, my, _] = self.dims;
        let axes: [(usize, f64); 3] = std::array::from_fn(|a| cell(t[a], self.dims[a]));
        let mut out = [0.0; 3];
        for corner in 0..8 {
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let (b, f) = axes[a];
                let hi = (corner >> a) & 1 == 1;
                idx[a] = b + hi as usize;
                w *= if hi { f } else { 1.0 - f };
            }
            let p = self.params[idx[0] + mx * (idx[1] + my * idx[2])];
            for c in 0..3 {
                out[c] += w * p[c];
            }
        }
        out
    }

    /// Grid with `dims` points per axis representing the same interpolant,
    /// sampled at the new control positions.
    pub fn promote(&self, dims: [usize; 3]) -> Self {
        let params = (0..dims[0] * dims[1] * dims[2])
            .map(|i| {
                let c = [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])];
                let t = std::array::from_fn(|a| c[a] as f64 * (self.dims[a] - 1) as f64 / (dims[a] - 1) as f64);
                self.interpolate(t)
            })
            .collect();
        ControlGrid { dims, params }
    }
}

/// Base cell and fraction of a fractional coordinate on an `m`-point axis.
#[inline]
fn cell(t: f64, m: usize) -> (usize, f64) {
    let t = t.clamp(0.0, (m - 1) as f64);
    let b = (t.floor() as usize).min(m - 2);
    (b, t - b as f64)
}

/// Separable trilinear map from control points to dense voxels.
pub(crate) struct Upsampler {
    dims: [usize; 3],
    grid: GridSpec,
    axes: [Vec<(usize, f64)>; 3],
}

impl Upsampler {
    pub fn new(dims: [usize; 3], grid: &GridSpec) -> Self {
        let n = grid.dims();
        let axes = std::array::from_fn(|a| {
            (0..n[a])
                .map(|x| cell(x as f64 * (dims[a] - 1) as f64 / (n[a] - 1) as f64, dims[a]))
                .collect()
        });
        Upsampler {
            dims,
            grid: *grid,
            axes,
        }
    }

    /// Control indices and weights contributing to dense voxel `idx`.
    #[inline]
    fn corners(&self, idx: usize) -> [(usize, f64); 8] {
        let c = self.grid.coords(idx);
        let [mx, my, _] = self.dims;
        std::array::from_fn(|corner| {
            let mut w = 1.0;
            let mut k = [0usize; 3];
            for a in 0..3 {
                let (b, f) = self.axes[a][c[a]];
                let hi = (corner >> a) & 1 == 1;
                k[a] = b + hi as usize;
                w *= if hi { f } else { 1.0 - f };
            }
            (k[0] + mx * (k[1] + my * k[2]), w)
        })
    }

    pub fn forward(&self, params: &[[f64; 3]]) -> Vec<[f64; 3]> {
        (0..self.grid.len())
            .into_par_iter()
            .map(|idx| {
                let mut out = [0.0; 3];
                for (k, w) in self.corners(idx) {
                    for c in 0..3 {
                        out[c] += w * params[k][c];
                    }
                }
                out
            })
            .collect()
    }

    pub fn adjoint(&self, dense_bar: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let mut out = vec![[0.0; 3]; self.dims[0] * self.dims[1] * self.dims[2]];
        for (idx, b) in dense_bar.iter().enumerate() {
            for (k, w) in self.corners(idx) {
                for c in 0..3 {
                    out[k][c] += w * b[c];
                }
            }
        }
        out
    }
}

/// Trilinear interpolation of the control velocities onto `grid`. Control
/// point `c` sits at voxel coordinate `c·(n − 1)/(m − 1)` on each axis.
pub fn upsample_control(cg: &ControlGrid, grid: &GridSpec) -> VectorField {
    let data = Upsampler::new(cg.dims, grid).forward(&cg.params);
    VectorField::new(*grid, FieldKind::Velocity, data).expect("one value per voxel")
}
