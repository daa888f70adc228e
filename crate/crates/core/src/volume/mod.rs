//! Volume data model shared by every stage of the pipeline.
//!
//! All volumes live on a [`GridSpec`]: voxel counts plus one isotropic
//! spacing. Voxel data is stored x-fastest, so the linear index of voxel
//! `(i, j, k)` is `i + nx * (j + ny * k)`. Spatial quantities (velocities,
//! displacements, derivatives) are in voxel units throughout; the spacing is
//! only consulted to convert physical parameters such as a smoothing sigma
//! given in millimetres.

mod nifti;

use std::fmt;

pub use nifti::{
    load_field, load_labels, load_scalar, load_tensor, load_volume, save_volume, AnyVolume,
    NiftiVolume, VolumeKind,
};

use crate::error::{Error, Result};
use crate::tensor::SymTensor;

/// Default voxel edge length in mm.
pub const DEFAULT_SPACING_MM: f64 = 1.5;

/// Voxel counts and isotropic spacing of a volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub spacing_mm: f64,
}

impl GridSpec {
    /// Builds a grid, rejecting axes shorter than 2 voxels or a non-positive spacing.
    pub fn new(nx: usize, ny: usize, nz: usize, spacing_mm: f64) -> Result<Self> {
        if nx < 2 || ny < 2 || nz < 2 {
            return Err(Error::InvalidGrid(format!(
                "every axis needs at least 2 voxels, got ({nx}, {ny}, {nz})"
            )));
        }
        if !(spacing_mm > 0.0 && spacing_mm.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "spacing must be positive and finite, got {spacing_mm}"
            )));
        }
        Ok(GridSpec {
            nx,
            ny,
            nz,
            spacing_mm,
        })
    }

    /// Cubic grid at the default 1.5 mm spacing.
    pub fn cube(n: usize) -> Result<Self> {
        Self::new(n, n, n, DEFAULT_SPACING_MM)
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.nx * (j + self.ny * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.nx;
        let rest = idx / self.nx;
        [i, rest % self.ny, rest / self.ny]
    }

    /// Same voxel counts and spacing.
    pub fn same_as(&self, other: &GridSpec) -> bool {
        self.dims() == other.dims() && self.spacing_mm == other.spacing_mm
    }

    /// True when the voxel is at least `margin` voxels away from every face.
    #[inline]
    pub fn is_interior(&self, c: [usize; 3], margin: usize) -> bool {
        let d = self.dims();
        (0..3).all(|a| c[a] >= margin && c[a] + margin < d[a])
    }

    /// Iterator over `(linear index, [i, j, k])` in storage order.
    pub fn voxels(&self) -> impl Iterator<Item = (usize, [usize; 3])> + '_ {
        (0..self.len()).map(move |idx| (idx, self.coords(idx)))
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {})@{}mm",
            self.nx, self.ny, self.nz, self.spacing_mm
        )
    }
}

/// Anything that lives on a grid.
pub trait HasGrid {
    fn grid(&self) -> &GridSpec;
}

/// Errors unless both volumes share voxel counts and spacing.
pub fn assert_same_grid(a: &(impl HasGrid + ?Sized), b: &(impl HasGrid + ?Sized)) -> Result<()> {
    if a.grid().same_as(b.grid()) {
        Ok(())
    } else {
        Err(Error::GridMismatch {
            a: *a.grid(),
            b: *b.grid(),
        })
    }
}

fn check_len(grid: &GridSpec, len: usize, what: &str) -> Result<()> {
    if len != grid.len() {
        return Err(Error::DimensionMismatch(format!(
            "{what} has {len} voxels, grid {grid} needs {}",
            grid.len()
        )));
    }
    Ok(())
}

macro_rules! impl_has_grid {
    ($($t:ty),*) => {
        $(impl HasGrid for $t {
            fn grid(&self) -> &GridSpec {
                &self.grid
            }
        })*
    };
}

/// Single-channel real volume.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    grid: GridSpec,
    data: Vec<f64>,
}

impl ScalarVolume {
    pub fn new(grid: GridSpec, data: Vec<f64>) -> Result<Self> {
        check_len(&grid, data.len(), "scalar data")?;
        Ok(ScalarVolume { grid, data })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Self::filled(grid, 0.0)
    }

    pub fn filled(grid: GridSpec, value: f64) -> Self {
        ScalarVolume {
            grid,
            data: vec![value; grid.len()],
        }
    }

    pub fn from_fn(grid: GridSpec, mut f: impl FnMut([usize; 3]) -> f64) -> Self {
        let data = grid.voxels().map(|(_, c)| f(c)).collect();
        ScalarVolume { grid, data }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.index(i, j, k)]
    }
}

/// Semantic tag of a 3-component field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Velocity,
    Displacement,
}

impl FieldKind {
    pub fn name(self) -> &'static str {
        match self {
            FieldKind::Velocity => "velocity",
            FieldKind::Displacement => "displacement",
        }
    }
}

/// Three components per voxel, in voxel units.
///
/// A displacement field `u` represents the deformation `phi(x) = x + u(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    grid: GridSpec,
    kind: FieldKind,
    data: Vec<[f64; 3]>,
}

impl VectorField {
    pub fn new(grid: GridSpec, kind: FieldKind, data: Vec<[f64; 3]>) -> Result<Self> {
        check_len(&grid, data.len(), "vector data")?;
        Ok(VectorField { grid, kind, data })
    }

    pub fn zeros(grid: GridSpec, kind: FieldKind) -> Self {
        Self::constant(grid, kind, [0.0; 3])
    }

    pub fn constant(grid: GridSpec, kind: FieldKind, value: [f64; 3]) -> Self {
        VectorField {
            grid,
            kind,
            data: vec![value; grid.len()],
        }
    }

    pub fn from_fn(grid: GridSpec, kind: FieldKind, mut f: impl FnMut([usize; 3]) -> [f64; 3]) -> Self {
        let data = grid.voxels().map(|(_, c)| f(c)).collect();
        VectorField { grid, kind, data }
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    /// Errors unless the field carries the expected tag.
    pub fn expect_kind(&self, kind: FieldKind) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::KindMismatch {
                expected: kind.name(),
                actual: self.kind.name(),
            })
        }
    }

    pub fn data(&self) -> &[[f64; 3]] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<[f64; 3]> {
        self.data
    }

    /// Same data, different tag. Used where a velocity is reinterpreted, e.g.
    /// the first squaring step of the exponential.
    pub fn retagged(self, kind: FieldKind) -> Self {
        VectorField { kind, ..self }
    }

    pub fn scaled(&self, s: f64) -> Self {
        VectorField {
            grid: self.grid,
            kind: self.kind,
            data: self
                .data
                .iter()
                .map(|v| [v[0] * s, v[1] * s, v[2] * s])
                .collect(),
        }
    }

    /// Largest Euclidean norm over the given voxels (all voxels for margin 0).
    pub fn max_norm(&self, margin: usize) -> f64 {
        self.grid
            .voxels()
            .filter(|(_, c)| self.grid.is_interior(*c, margin))
            .map(|(idx, _)| norm3(self.data[idx]))
            .fold(0.0, f64::max)
    }
}

#[inline]
pub(crate) fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Symmetric tensor per voxel; see [`SymTensor`] for the component order.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorVolume {
    grid: GridSpec,
    data: Vec<SymTensor>,
}

impl TensorVolume {
    pub fn new(grid: GridSpec, data: Vec<SymTensor>) -> Result<Self> {
        check_len(&grid, data.len(), "tensor data")?;
        Ok(TensorVolume { grid, data })
    }

    pub fn filled(grid: GridSpec, value: SymTensor) -> Self {
        TensorVolume {
            grid,
            data: vec![value; grid.len()],
        }
    }

    pub fn from_fn(grid: GridSpec, mut f: impl FnMut([usize; 3]) -> SymTensor) -> Self {
        let data = grid.voxels().map(|(_, c)| f(c)).collect();
        TensorVolume { grid, data }
    }

    pub fn data(&self) -> &[SymTensor] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [SymTensor] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<SymTensor> {
        self.data
    }
}

/// Integer segmentation; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    grid: GridSpec,
    data: Vec<u16>,
}

impl LabelVolume {
    pub fn new(grid: GridSpec, data: Vec<u16>) -> Result<Self> {
        check_len(&grid, data.len(), "label data")?;
        Ok(LabelVolume { grid, data })
    }

    pub fn from_fn(grid: GridSpec, mut f: impl FnMut([usize; 3]) -> u16) -> Self {
        let data = grid.voxels().map(|(_, c)| f(c)).collect();
        LabelVolume { grid, data }
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u16] {
        &mut self.data
    }

    /// Sorted distinct non-background labels.
    pub fn labels(&self) -> Vec<u16> {
        let mut seen: Vec<u16> = self.data.iter().copied().filter(|&l| l != 0).collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    }
}

impl_has_grid!(ScalarVolume, VectorField, TensorVolume, LabelVolume);

impl HasGrid for GridSpec {
    fn grid(&self) -> &GridSpec {
        self
    }
}
