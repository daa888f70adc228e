//! Symmetric 3×3 tensor algebra and finite-strain reorientation.
//!
//! Reorientation follows the finite-strain strategy: the local Jacobian `J`
//! of the deformation is factored as `J = R P` (orthogonal `R`, symmetric
//! positive semi-definite `P`) and each interpolated tensor `D` is replaced
//! by `R D Rᵀ`. Eigenvalues, and therefore FA, are unchanged by this.

use rayon::prelude::*;

use crate::diffeo::jacobian;
use crate::error::{Error, Result};
use crate::linalg::{self, Mat3, IDENTITY};
use crate::volume::{assert_same_grid, FieldKind, HasGrid, ScalarVolume, TensorVolume, VectorField};

/// Symmetric tensor stored as `(Dxx, Dyy, Dzz, Dxy, Dxz, Dyz)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SymTensor(pub [f64; 6]);

impl SymTensor {
    pub const ZERO: SymTensor = SymTensor([0.0; 6]);

    pub fn new(xx: f64, yy: f64, zz: f64, xy: f64, xz: f64, yz: f64) -> Self {
        SymTensor([xx, yy, zz, xy, xz, yz])
    }

    pub fn diag(xx: f64, yy: f64, zz: f64) -> Self {
        SymTensor([xx, yy, zz, 0.0, 0.0, 0.0])
    }

    pub fn isotropic(c: f64) -> Self {
        Self::diag(c, c, c)
    }

    /// Tensor with eigenvalues `(l1, l2, l2)` and principal axis `dir`.
    ///
    /// `dir` need not be normalised; a zero vector yields the isotropic
    /// tensor `l2·I`.
    pub fn cylindrical(l1: f64, l2: f64, dir: [f64; 3]) -> Self {
        let n = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
        if n == 0.0 {
            return Self::isotropic(l2);
        }
        let e = [dir[0] / n, dir[1] / n, dir[2] / n];
        let d = l1 - l2;
        SymTensor([
            l2 + d * e[0] * e[0],
            l2 + d * e[1] * e[1],
            l2 + d * e[2] * e[2],
            d * e[0] * e[1],
            d * e[0] * e[2],
            d * e[1] * e[2],
        ])
    }

    /// `Σ λᵢ eᵢ eᵢᵀ` for orthonormal axes `axes[i]`.
    pub fn from_eigen(values: [f64; 3], axes: [[f64; 3]; 3]) -> Self {
        let mut m = [[0.0; 3]; 3];
        for (l, e) in values.iter().zip(axes.iter()) {
            for r in 0..3 {
                for c in 0..3 {
                    m[r][c] += l * e[r] * e[c];
                }
            }
        }
        Self::from_matrix(&m)
    }

    pub fn to_matrix(&self) -> Mat3 {
        let [xx, yy, zz, xy, xz, yz] = self.0;
        [[xx, xy, xz], [xy, yy, yz], [xz, yz, zz]]
    }

    /// Symmetric part of `m`.
    pub fn from_matrix(m: &Mat3) -> Self {
        SymTensor([
            m[0][0],
            m[1][1],
            m[2][2],
            0.5 * (m[0][1] + m[1][0]),
            0.5 * (m[0][2] + m[2][0]),
            0.5 * (m[1][2] + m[2][1]),
        ])
    }

    pub fn trace(&self) -> f64 {
        self.0[0] + self.0[1] + self.0[2]
    }

    /// `Tr(D²)`, the squared Frobenius norm of the full matrix.
    pub fn norm_sq(&self) -> f64 {
        let [xx, yy, zz, xy, xz, yz] = self.0;
        xx * xx + yy * yy + zz * zz + 2.0 * (xy * xy + xz * xz + yz * yz)
    }

    pub fn sub(&self, other: &SymTensor) -> SymTensor {
        SymTensor(std::array::from_fn(|c| self.0[c] - other.0[c]))
    }
}

/// Eigenvalues of a symmetric 3×3 tensor, sorted descending.
///
/// Closed-form trigonometric solution; when two roots nearly coincide the
/// `acos` becomes ill-conditioned and a tridiagonal QL iteration is used
/// instead.
pub fn eigenvalues_sym3(d: &SymTensor) -> [f64; 3] {
    let [a00, a11, a22, a01, a02, a12] = d.0;
    let off = a01 * a01 + a02 * a02 + a12 * a12;
    let mut ev = if off == 0.0 {
        [a00, a11, a22]
    } else {
        let q = (a00 + a11 + a22) / 3.0;
        let (b00, b11, b22) = (a00 - q, a11 - q, a22 - q);
        let p2 = b00 * b00 + b11 * b11 + b22 * b22 + 2.0 * off;
        let p = (p2 / 6.0).sqrt();
        let scale = a00.abs().max(a11.abs()).max(a22.abs()).max(off.sqrt());
        if p <= 1e-12 * scale {
            [q, q, q]
        } else {
            let b = [[b00, a01, a02], [a01, b11, a12], [a02, a12, b22]];
            let r = (linalg::det(&b) / (p * p * p) / 2.0).clamp(-1.0, 1.0);
            if 1.0 - r.abs() < 1e-6 {
                tridiagonal_eigenvalues(d)
            } else {
                let phi = r.acos() / 3.0;
                let e1 = q + 2.0 * p * phi.cos();
                let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::FRAC_PI_3).cos();
                [e1, 3.0 * q - e1 - e3, e3]
            }
        }
    };
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

/// Householder reduction to tridiagonal form followed by implicit QL.
fn tridiagonal_eigenvalues(t: &SymTensor) -> [f64; 3] {
    let [a00, a11, a22, a01, a02, a12] = t.0;
    let mut d = [a00, a11, a22];
    let mut e = [a01, a12, 0.0];

    let h = a01 * a01 + a02 * a02;
    let mut g = h.sqrt();
    if a01 > 0.0 {
        g = -g;
    }
    let f = g * a01;
    let u = [a01 - g, a02];
    let omega = h - f;
    if omega > 0.0 {
        let omega = 1.0 / omega;
        let f1 = a11 * u[0] + a12 * u[1];
        let mut q1 = omega * f1;
        let f2 = a12 * u[0] + a22 * u[1];
        let mut q2 = omega * f2;
        let k = 0.5 * omega * omega * (u[0] * f1 + u[1] * f2);
        q1 -= k * u[0];
        q2 -= k * u[1];
        d = [a00, a11 - 2.0 * q1 * u[0], a22 - 2.0 * q2 * u[1]];
        e = [g, a12 - q1 * u[1] - u[0] * q2, 0.0];
    }

    let n = 3;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m < n - 1 {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l || iter == 60 {
                break;
            }
            iter += 1;
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut i = m;
            let mut deflated = false;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
            }
            if deflated {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    d
}

/// Fractional anisotropy, `sqrt(3/2)·‖D − (tr D/3) I‖ / ‖D‖`; 0 for the zero tensor.
pub fn fa(d: &SymTensor) -> f64 {
    let norm_sq = d.norm_sq();
    if norm_sq == 0.0 {
        return 0.0;
    }
    let mean = d.trace() / 3.0;
    let [xx, yy, zz, xy, xz, yz] = d.0;
    let dev_sq = (xx - mean).powi(2)
        + (yy - mean).powi(2)
        + (zz - mean).powi(2)
        + 2.0 * (xy * xy + xz * xz + yz * yz);
    (1.5 * dev_sq / norm_sq).sqrt().min(1.0)
}

/// Per-voxel FA.
pub fn fa_map(vol: &TensorVolume) -> ScalarVolume {
    let data = vol.data().par_iter().map(fa).collect();
    ScalarVolume::new(*vol.grid(), data).expect("same grid")
}

/// An orthogonal matrix with determinant +1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Mat3);

impl Rotation {
    pub const IDENTITY: Rotation = Rotation(IDENTITY);

    /// Checks orthogonality and unit determinant to 1e-6.
    pub fn new(m: Mat3) -> Result<Self> {
        let rtr = linalg::mul(&linalg::transpose(&m), &m);
        if linalg::max_abs_diff(&rtr, &IDENTITY) > 1e-6 || (linalg::det(&m) - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidParameter(format!("{m:?} is not a rotation")));
        }
        Ok(Rotation(m))
    }

    pub(crate) fn new_unchecked(m: Mat3) -> Self {
        Rotation(m)
    }

    pub fn about_z(angle: f64) -> Self {
        Rotation(linalg::rotation_z(angle))
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }
}

/// Why a polar factor could not be produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolarFailure {
    /// `|det J| < 1e-8`.
    Singular(f64),
    /// `det J < 0`: the deformation folds locally.
    Folded(f64),
}

impl PolarFailure {
    pub(crate) fn at(self, voxel: [usize; 3]) -> Error {
        match self {
            PolarFailure::Singular(det) => Error::SingularJacobian { voxel, det },
            PolarFailure::Folded(det) => Error::Folding { voxel, det },
        }
    }
}

const SINGULAR_DET: f64 = 1e-8;
const POLAR_TOL: f64 = 1e-12;
const POLAR_MAX_ITER: usize = 50;

/// Orthogonal polar factor `R` of `J = R P`.
///
/// Newton iteration `R ← (R + R⁻ᵀ)/2` from `R = J`, stopped when successive
/// iterates differ by less than 1e-12 (max-abs) or after 50 steps.
pub fn polar_rotation(j: &Mat3) -> std::result::Result<Rotation, PolarFailure> {
    let d = linalg::det(j);
    if d.abs() < SINGULAR_DET {
        return Err(PolarFailure::Singular(d));
    }
    if d < 0.0 {
        return Err(PolarFailure::Folded(d));
    }
    let mut r = *j;
    for _ in 0..POLAR_MAX_ITER {
        let inv = linalg::inverse(&r).ok_or(PolarFailure::Singular(0.0))?;
        let mut next = [[0.0; 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                next[a][b] = 0.5 * (r[a][b] + inv[b][a]);
            }
        }
        let delta = linalg::max_abs_diff(&next, &r);
        r = next;
        if delta < POLAR_TOL {
            break;
        }
    }
    Ok(Rotation(r))
}

/// Both polar factors: `(R, P)` with `P = Rᵀ J` symmetrised.
pub fn polar_decompose(j: &Mat3) -> std::result::Result<(Rotation, Mat3), PolarFailure> {
    let r = polar_rotation(j)?;
    let p = linalg::mul(&linalg::transpose(&r.0), j);
    let sym = std::array::from_fn(|a| std::array::from_fn(|b| 0.5 * (p[a][b] + p[b][a])));
    Ok((r, sym))
}

/// Pulls a cotangent on `R = polar(J)` back to a cotangent on `J`.
///
/// With `P = RᵀJ`, a perturbation `dJ` gives `dR = R[ω]×` where
/// `(tr P·I − P) ω = ½ vee(RᵀdJ − dJᵀR)`. Transposing that map yields
/// `J̄ = R [h]×` with `h = (tr P·I − P)⁻¹ vee(Rᵀ R̄)`.
pub(crate) fn polar_rotation_vjp(r: &Mat3, j: &Mat3, r_bar: &Mat3) -> Mat3 {
    let rt = linalg::transpose(r);
    let p = linalg::mul(&rt, j);
    let tr = p[0][0] + p[1][1] + p[2][2];
    let mut k = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            let sym = 0.5 * (p[a][b] + p[b][a]);
            k[a][b] = if a == b { tr - sym } else { -sym };
        }
    }
    let g = linalg::vee(&linalg::mul(&rt, r_bar));
    match linalg::inverse(&k) {
        Some(kinv) => linalg::mul(r, &linalg::skew(linalg::mul_vec(&kinv, g))),
        None => [[0.0; 3]; 3],
    }
}

/// `R D Rᵀ`.
pub fn reorient_tensor(d: &SymTensor, r: &Rotation) -> SymTensor {
    let m = d.to_matrix();
    let rm = linalg::mul(&r.0, &m);
    SymTensor::from_matrix(&linalg::mul(&rm, &linalg::transpose(&r.0)))
}

/// What to do at voxels whose Jacobian has no proper polar rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FoldPolicy {
    /// Abort with the voxel location.
    #[default]
    Strict,
    /// Use the identity rotation there and count the voxel.
    Lenient,
}

/// Outcome counters of [`reorient_field`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ReorientStats {
    pub folded: usize,
    pub singular: usize,
}

impl ReorientStats {
    pub fn total(&self) -> usize {
        self.folded + self.singular
    }
}

/// Rotates every tensor of an already component-warped volume by the polar
/// factor of the deformation's local Jacobian.
pub fn reorient_field(
    moved: &TensorVolume,
    phi: &VectorField,
    policy: FoldPolicy,
) -> Result<(TensorVolume, ReorientStats)> {
    assert_same_grid(moved, phi)?;
    phi.expect_kind(FieldKind::Displacement)?;
    let grid = *moved.grid();
    let jac = jacobian(phi);
    let rotations: Vec<std::result::Result<Rotation, PolarFailure>> =
        jac.matrices().par_iter().map(polar_rotation).collect();

    let mut stats = ReorientStats::default();
    let mut out = Vec::with_capacity(grid.len());
    for (idx, (d, rot)) in moved.data().iter().zip(rotations).enumerate() {
        let r = match rot {
            Ok(r) => r,
            Err(fail) => match policy {
                FoldPolicy::Strict => return Err(fail.at(grid.coords(idx))),
                FoldPolicy::Lenient => {
                    match fail {
                        PolarFailure::Folded(_) => stats.folded += 1,
                        PolarFailure::Singular(_) => stats.singular += 1,
                    }
                    Rotation::IDENTITY
                }
            },
        };
        out.push(reorient_tensor(d, &r));
    }
    if stats.total() > 0 {
        log::warn!(
            "identity rotation substituted at {} folded and {} singular voxels",
            stats.folded,
            stats.singular
        );
    }
    Ok((TensorVolume::new(grid, out)?, stats))
}
