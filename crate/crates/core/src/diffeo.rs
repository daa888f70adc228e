//! Stationary velocity fields: smoothing, exponentiation by scaling and
//! squaring, composition and Jacobians.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::interp::sample_channels;
use crate::linalg::{self, Mat3};
use crate::volume::{assert_same_grid, FieldKind, GridSpec, HasGrid, ScalarVolume, VectorField};

/// Number of squaring steps used when none is given.
pub const DEFAULT_STEPS: u32 = 7;

/// Normalised 3-tap Gaussian `(w, c, w)` for a sigma in voxels.
pub fn gaussian_taps(sigma_vox: f64) -> [f64; 3] {
    let w = (-1.0 / (2.0 * sigma_vox * sigma_vox)).exp();
    let s = 1.0 + 2.0 * w;
    [w / s, 1.0 / s, w / s]
}

/// One separable pass along `axis`, clamp-to-edge.
pub(crate) fn convolve_axis<const C: usize>(
    grid: &GridSpec,
    src: &[[f64; C]],
    axis: usize,
    taps: [f64; 3],
) -> Vec<[f64; C]> {
    let dims = grid.dims();
    let stride = [1, grid.nx, grid.nx * grid.ny][axis];
    let n = dims[axis];
    (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let pos = grid.coords(idx)[axis];
            let lo = if pos == 0 { idx } else { idx - stride };
            let hi = if pos + 1 == n { idx } else { idx + stride };
            let (a, b, c) = (&src[lo], &src[idx], &src[hi]);
            std::array::from_fn(|ch| taps[0] * a[ch] + taps[1] * b[ch] + taps[2] * c[ch])
        })
        .collect()
}

/// Transpose of [`convolve_axis`].
pub(crate) fn convolve_axis_adjoint<const C: usize>(
    grid: &GridSpec,
    bar: &[[f64; C]],
    axis: usize,
    taps: [f64; 3],
) -> Vec<[f64; C]> {
    let stride = [1, grid.nx, grid.nx * grid.ny][axis];
    let n = grid.dims()[axis];
    let mut out = vec![[0.0; C]; grid.len()];
    for (idx, b) in bar.iter().enumerate() {
        let pos = grid.coords(idx)[axis];
        let lo = if pos == 0 { idx } else { idx - stride };
        let hi = if pos + 1 == n { idx } else { idx + stride };
        for ch in 0..C {
            out[lo][ch] += taps[0] * b[ch];
            out[idx][ch] += taps[1] * b[ch];
            out[hi][ch] += taps[2] * b[ch];
        }
    }
    out
}

pub(crate) fn smooth_data(grid: &GridSpec, data: &[[f64; 3]], taps: [f64; 3]) -> Vec<[f64; 3]> {
    let x = convolve_axis(grid, data, 0, taps);
    let y = convolve_axis(grid, &x, 1, taps);
    convolve_axis(grid, &y, 2, taps)
}

/// Separable 3×3×3 Gaussian smoothing of a velocity field.
///
/// `sigma_mm` is converted to voxels with the grid spacing.
pub fn gaussian_smooth(v: &VectorField, sigma_mm: f64) -> Result<VectorField> {
    v.expect_kind(FieldKind::Velocity)?;
    if !(sigma_mm > 0.0 && sigma_mm.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "smoothing sigma must be positive, got {sigma_mm}"
        )));
    }
    let g = v.grid();
    let taps = gaussian_taps(sigma_mm / g.spacing_mm);
    VectorField::new(*g, FieldKind::Velocity, smooth_data(g, v.data(), taps))
}

/// `inner(x) + outer(x + inner(x))` on raw buffers.
pub(crate) fn compose_data(grid: &GridSpec, outer: &[[f64; 3]], inner: &[[f64; 3]]) -> Vec<[f64; 3]> {
    (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let c = grid.coords(idx);
            let d = inner[idx];
            let p = [c[0] as f64 + d[0], c[1] as f64 + d[1], c[2] as f64 + d[2]];
            let s = sample_channels(grid, outer, p);
            [d[0] + s[0], d[1] + s[1], d[2] + s[2]]
        })
        .collect()
}

/// Displacement of `phi_outer ∘ phi_inner`.
pub fn compose(u_outer: &VectorField, u_inner: &VectorField) -> Result<VectorField> {
    assert_same_grid(u_outer, u_inner)?;
    u_outer.expect_kind(FieldKind::Displacement)?;
    u_inner.expect_kind(FieldKind::Displacement)?;
    let g = u_outer.grid();
    VectorField::new(
        *g,
        FieldKind::Displacement,
        compose_data(g, u_outer.data(), u_inner.data()),
    )
}

/// Every intermediate of scaling and squaring: `u₀ = v/2ⁿ`, then `uₖ₊₁ = uₖ ∘ uₖ`.
/// The last entry is the displacement of `exp(v)`.
pub(crate) fn exp_trajectory(grid: &GridSpec, v: &[[f64; 3]], steps: u32) -> Vec<Vec<[f64; 3]>> {
    let scale = 0.5f64.powi(steps as i32);
    let mut traj = Vec::with_capacity(steps as usize + 1);
    traj.push(v.iter().map(|x| [x[0] * scale, x[1] * scale, x[2] * scale]).collect::<Vec<_>>());
    for _ in 0..steps {
        let last = traj.last().expect("non-empty");
        let next = compose_data(grid, last, last);
        traj.push(next);
    }
    traj
}

pub(crate) fn exp_data(grid: &GridSpec, v: &[[f64; 3]], steps: u32) -> Vec<[f64; 3]> {
    let scale = 0.5f64.powi(steps as i32);
    let mut u: Vec<[f64; 3]> = v.iter().map(|x| [x[0] * scale, x[1] * scale, x[2] * scale]).collect();
    for _ in 0..steps {
        u = compose_data(grid, &u, &u);
    }
    u
}

/// Exponential of a stationary velocity field by scaling and squaring.
pub fn exp_svf(v: &VectorField, steps: u32) -> Result<VectorField> {
    v.expect_kind(FieldKind::Velocity)?;
    let g = v.grid();
    VectorField::new(*g, FieldKind::Displacement, exp_data(g, v.data(), steps))
}

/// Per-voxel Jacobian `∂phi/∂x` (row-major 3×3), dimensionless.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianField {
    grid: GridSpec,
    data: Vec<Mat3>,
}

impl JacobianField {
    pub fn matrices(&self) -> &[Mat3] {
        &self.data
    }
}

impl HasGrid for JacobianField {
    fn grid(&self) -> &GridSpec {
        &self.grid
    }
}

/// Neighbour indices and divisor of the difference stencil along `axis`:
/// central in the interior, one-sided on the faces.
#[inline]
pub(crate) fn diff_stencil(grid: &GridSpec, idx: usize, pos: usize, axis: usize) -> (usize, usize, f64) {
    let stride = [1, grid.nx, grid.nx * grid.ny][axis];
    let n = grid.dims()[axis];
    if pos == 0 {
        (idx + stride, idx, 1.0)
    } else if pos + 1 == n {
        (idx, idx - stride, 1.0)
    } else {
        (idx + stride, idx - stride, 2.0)
    }
}

pub(crate) fn jacobian_data(grid: &GridSpec, u: &[[f64; 3]]) -> Vec<Mat3> {
    (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let c = grid.coords(idx);
            let mut j = linalg::IDENTITY;
            for axis in 0..3 {
                let (hi, lo, div) = diff_stencil(grid, idx, c[axis], axis);
                for r in 0..3 {
                    j[r][axis] += (u[hi][r] - u[lo][r]) / div;
                }
            }
            j
        })
        .collect()
}

/// `J = I + ∇u` by finite differences.
pub fn jacobian(u: &VectorField) -> JacobianField {
    let g = *u.grid();
    JacobianField {
        grid: g,
        data: jacobian_data(&g, u.data()),
    }
}

pub fn jacobian_determinant(j: &JacobianField) -> ScalarVolume {
    ScalarVolume::new(j.grid, j.data.par_iter().map(linalg::det).collect()).expect("same grid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp::sample_trilinear;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn interior_max_diff(a: &VectorField, b: &VectorField, margin: usize) -> f64 {
        let g = a.grid();
        g.voxels()
            .filter(|(_, c)| g.is_interior(*c, margin))
            .map(|(i, _)| {
                let (x, y) = (a.data()[i], b.data()[i]);
                (0..3).map(|k| (x[k] - y[k]).abs()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn taps_for_default_sigma() {
        let t = gaussian_taps(1.2 / 1.5);
        let w = (-1.0f64 / (2.0 * 0.64)).exp();
        assert!((w - 0.45783).abs() < 1e-5);
        assert!((t[0] - 0.2390).abs() < 5e-5 && (t[1] - 0.5220).abs() < 5e-5 && t[2] == t[0]);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn smoothing_preserves_constants_and_spreads_impulses() {
        let g = GridSpec::cube(7).unwrap();
        let c = VectorField::constant(g, FieldKind::Velocity, [1.0, -2.0, 0.5]);
        let s = gaussian_smooth(&c, 1.2).unwrap();
        assert!(interior_max_diff(&s, &c, 0) < 1e-14);

        let mut imp = VectorField::zeros(g, FieldKind::Velocity);
        imp.data_mut()[g.index(3, 3, 3)] = [1.0, 0.0, 0.0];
        let s = gaussian_smooth(&imp, 1.2).unwrap();
        let center = gaussian_taps(0.8)[1];
        assert!((s.data()[g.index(3, 3, 3)][0] - center.powi(3)).abs() < 1e-15);
        assert!((center.powi(3) - 0.14225).abs() < 5e-5);
        assert!(gaussian_smooth(&imp, 0.0).is_err());
        assert!(gaussian_smooth(&imp.clone().retagged(FieldKind::Displacement), 1.2).is_err());
    }

    #[test]
    fn smoothing_adjoint_is_transpose() {
        let g = GridSpec::new(5, 4, 6, 1.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<[f64; 3]> = (0..g.len()).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        let b: Vec<[f64; 3]> = (0..g.len()).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        let taps = gaussian_taps(0.8);
        for axis in 0..3 {
            let fa = convolve_axis(&g, &a, axis, taps);
            let tb = convolve_axis_adjoint(&g, &b, axis, taps);
            let lhs: f64 = fa.iter().zip(&b).map(|(x, y)| x[0] * y[0] + x[1] * y[1] + x[2] * y[2]).sum();
            let rhs: f64 = a.iter().zip(&tb).map(|(x, y)| x[0] * y[0] + x[1] * y[1] + x[2] * y[2]).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let g = GridSpec::cube(6).unwrap();
        let u = exp_svf(&VectorField::zeros(g, FieldKind::Velocity), 7).unwrap();
        assert!(u.data().iter().all(|d| *d == [0.0; 3]));
        assert_eq!(u.kind(), FieldKind::Displacement);
    }

    #[test]
    fn exp_of_constant_is_translation() {
        let g = GridSpec::cube(16).unwrap();
        let c = [0.7, -0.4, 0.25];
        let v = VectorField::constant(g, FieldKind::Velocity, c);
        let u = exp_svf(&v, 7).unwrap();
        let want = VectorField::constant(g, FieldKind::Displacement, c);
        assert!(interior_max_diff(&u, &want, 2) < 1e-9);
    }

    #[test]
    fn compose_examples() {
        let g = GridSpec::cube(8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rand_field = |rng: &mut ChaCha8Rng| {
            let raw = VectorField::new(
                g,
                FieldKind::Velocity,
                (0..g.len()).map(|_| std::array::from_fn(|_| rng.random_range(-2.0..2.0))).collect(),
            )
            .unwrap();
            gaussian_smooth(&raw, 1.5).unwrap().retagged(FieldKind::Displacement)
        };
        let a = rand_field(&mut rng);
        let b = rand_field(&mut rng);
        let zero = VectorField::zeros(g, FieldKind::Displacement);
        assert_eq!(compose(&a, &zero).unwrap(), a);
        assert_eq!(compose(&zero, &a).unwrap(), a);

        let ab = compose(&a, &b).unwrap();
        for (idx, [i, j, k]) in g.voxels() {
            let d = b.data()[idx];
            let p = [i as f64 + d[0], j as f64 + d[1], k as f64 + d[2]];
            for ch in 0..3 {
                let comp = ScalarVolume::new(g, a.data().iter().map(|v| v[ch]).collect()).unwrap();
                let want = d[ch] + sample_trilinear(&comp, p);
                assert!((ab.data()[idx][ch] - want).abs() < 1e-6);
            }
        }

        let ta = VectorField::constant(g, FieldKind::Displacement, [0.5, 1.0, -0.25]);
        let tb = VectorField::constant(g, FieldKind::Displacement, [-1.5, 0.5, 0.5]);
        let sum = VectorField::constant(g, FieldKind::Displacement, [-1.0, 1.5, 0.25]);
        assert!(interior_max_diff(&compose(&ta, &tb).unwrap(), &sum, 2) < 1e-12);
    }

    #[test]
    fn jacobian_examples() {
        let g = GridSpec::cube(6).unwrap();
        let j = jacobian(&VectorField::zeros(g, FieldKind::Displacement));
        assert!(j.matrices().iter().all(|m| *m == linalg::IDENTITY));

        let a = [[0.05, -0.02, 0.01], [0.03, 0.04, -0.01], [0.0, 0.02, -0.03]];
        let lin = VectorField::from_fn(g, FieldKind::Displacement, |c| {
            let x = [c[0] as f64, c[1] as f64, c[2] as f64];
            linalg::mul_vec(&a, x)
        });
        // Exact on affine fields, including the one-sided faces.
        for m in jacobian(&lin).matrices() {
            for r in 0..3 {
                for c in 0..3 {
                    assert!((m[r][c] - linalg::IDENTITY[r][c] - a[r][c]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn jacobian_of_sine_within_truncation_bound() {
        let n = 32;
        let g = GridSpec::cube(n).unwrap();
        let k = 2.0 * std::f64::consts::PI / n as f64;
        let u = VectorField::from_fn(g, FieldKind::Displacement, |[i, _, _]| [0.1 * (k * i as f64).sin(), 0.0, 0.0]);
        let jf = jacobian(&u);
        // Central difference error: |f'''|h²/6 = 0.1·k³/6.
        let bound = 0.1 * k.powi(3) / 6.0 + 1e-12;
        for (idx, [i, _, _]) in g.voxels().filter(|(_, c)| c[0] > 0 && c[0] < n - 1) {
            let exact = 0.1 * k * (k * i as f64).cos();
            let got = jf.matrices()[idx][0][0] - 1.0;
            assert!((got - exact).abs() <= bound, "i={i}: {got} vs {exact}");
        }
    }

    #[test]
    fn determinant_examples() {
        let g = GridSpec::cube(3).unwrap();
        let id = jacobian(&VectorField::zeros(g, FieldKind::Displacement));
        assert!(jacobian_determinant(&id).data().iter().all(|&d| d == 1.0));
        let stretch = VectorField::from_fn(g, FieldKind::Displacement, |[i, _, _]| [i as f64, 0.0, 0.0]);
        assert!(jacobian_determinant(&jacobian(&stretch)).data().iter().all(|&d| d == 2.0));

        // Cofactor expansion along the second column as an independent oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let field = VectorField::new(
            g,
            FieldKind::Displacement,
            (0..g.len()).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect(),
        )
        .unwrap();
        let jf = jacobian(&field);
        let det = jacobian_determinant(&jf);
        for (m, d) in jf.matrices().iter().zip(det.data()) {
            let minor = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
            let oracle = -m[0][1] * minor(1, 2, 0, 2) + m[1][1] * minor(0, 2, 0, 2) - m[2][1] * minor(0, 1, 0, 2);
            assert!((oracle - d).abs() < 1e-12);
        }
    }
}
