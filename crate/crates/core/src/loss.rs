//! Registration loss: tensor similarity (EDS), structural similarity (NCC)
//! and a bending-energy regulariser, combined as
//! `alpha·EDS + beta·NCC + lambda·BE`.

use crate::error::{Error, Result};
use crate::reduce::{stable_sum, stable_sum_n};
use crate::volume::{
    assert_same_grid, FieldKind, GridSpec, HasGrid, LabelVolume, ScalarVolume, TensorVolume,
    VectorField,
};

/// Term weights. Defaults: alpha = 1, beta = 1, lambda = 0.001.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            lambda: 0.001,
        }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, lambda: f64) -> Result<Self> {
        let w = LossWeights {
            alpha,
            beta,
            lambda,
        };
        w.validate()?;
        Ok(w)
    }

    /// Structural-only weights (`alpha = 0`).
    pub fn t2w_only() -> Self {
        LossWeights {
            alpha: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.lambda];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        if self.alpha + self.beta <= 0.0 {
            return Err(Error::InvalidParameter(
                "at least one of alpha and beta must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Individual terms and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub eds: f64,
    pub ncc: f64,
    pub be: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(eds: f64, ncc: f64, be: f64, w: &LossWeights) -> Self {
        LossReport {
            eds,
            ncc,
            be,
            total: w.alpha * eds + w.beta * ncc + w.lambda * be,
        }
    }
}

fn mask_check(vol: &impl HasGrid, mask: Option<&LabelVolume>) -> Result<()> {
    match mask {
        Some(m) => assert_same_grid(vol, m),
        None => Ok(()),
    }
}

#[inline]
fn included(mask: Option<&LabelVolume>, idx: usize) -> bool {
    mask.is_none_or(|m| m.data()[idx] != 0)
}

/// Negated global normalised cross-correlation; −1 for a perfect match.
pub fn ncc(f: &ScalarVolume, m: &ScalarVolume) -> Result<f64> {
    ncc_masked(f, m, None)
}

/// [`ncc`] restricted to voxels where `mask` is non-zero.
pub fn ncc_masked(f: &ScalarVolume, m: &ScalarVolume, mask: Option<&LabelVolume>) -> Result<f64> {
    assert_same_grid(f, m)?;
    mask_check(f, mask)?;
    Ok(ncc_parts(f.data(), m.data(), mask)?.value())
}

/// Sums behind one NCC evaluation, kept for the gradient.
#[derive(Debug, Clone, Copy)]
pub(crate) struct NccParts {
    pub mean_f: f64,
    pub mean_m: f64,
    pub s_fm: f64,
    pub s_ff: f64,
    pub s_mm: f64,
}

impl NccParts {
    pub fn value(&self) -> f64 {
        -self.s_fm / (self.s_ff * self.s_mm).sqrt()
    }

    /// `∂NCC/∂m` at one voxel.
    #[inline]
    pub fn grad_m(&self, f: f64, m: f64) -> f64 {
        let denom = (self.s_ff * self.s_mm).sqrt();
        -((f - self.mean_f) / denom - self.s_fm * (m - self.mean_m) / (denom * self.s_mm))
    }
}

pub(crate) fn ncc_parts(f: &[f64], m: &[f64], mask: Option<&LabelVolume>) -> Result<NccParts> {
    let n = f.len();
    let [sf, sm, count] = stable_sum_n(n, |i| {
        if included(mask, i) {
            [f[i], m[i], 1.0]
        } else {
            [0.0; 3]
        }
    });
    if count == 0.0 {
        return Err(Error::DegenerateInput("NCC mask selects no voxels".into()));
    }
    let (mean_f, mean_m) = (sf / count, sm / count);
    let [s_fm, s_ff, s_mm] = stable_sum_n(n, |i| {
        if included(mask, i) {
            let (a, b) = (f[i] - mean_f, m[i] - mean_m);
            [a * b, a * a, b * b]
        } else {
            [0.0; 3]
        }
    });
    if s_ff <= 0.0 || s_mm <= 0.0 {
        return Err(Error::DegenerateInput(
            "NCC is undefined for an image with zero variance".into(),
        ));
    }
    Ok(NccParts {
        mean_f,
        mean_m,
        s_fm,
        s_ff,
        s_mm,
    })
}

/// `Σ Tr((F − M)²)` over voxels.
pub fn eds(f: &TensorVolume, m: &TensorVolume) -> Result<f64> {
    eds_masked(f, m, None)
}

pub fn eds_masked(f: &TensorVolume, m: &TensorVolume, mask: Option<&LabelVolume>) -> Result<f64> {
    assert_same_grid(f, m)?;
    mask_check(f, mask)?;
    let (a, b) = (f.data(), m.data());
    Ok(stable_sum(a.len(), |i| {
        if included(mask, i) {
            a[i].sub(&b[i]).norm_sq()
        } else {
            0.0
        }
    }))
}

pub(crate) fn check_be_grid(grid: &GridSpec) -> Result<()> {
    if grid.dims().iter().any(|&d| d < 3) {
        return Err(Error::GridTooSmall(format!(
            "bending energy needs at least 3 voxels per axis, grid is {grid}"
        )));
    }
    Ok(())
}

/// Central second differences of one component at an interior voxel:
/// `[xx, yy, zz, xy, xz, yz]`.
#[inline]
fn second_differences(grid: &GridSpec, u: &[[f64; 3]], idx: usize, ch: usize) -> [f64; 6] {
    let s = [1, grid.nx, grid.nx * grid.ny];
    let at = |off: isize| u[(idx as isize + off) as usize][ch];
    let c = at(0);
    let mut d = [0.0; 6];
    for a in 0..3 {
        let st = s[a] as isize;
        d[a] = at(st) - 2.0 * c + at(-st);
    }
    for (slot, (a, b)) in [(0, 1), (0, 2), (1, 2)].into_iter().enumerate() {
        let (sa, sb) = (s[a] as isize, s[b] as isize);
        d[3 + slot] = 0.25 * (at(sa + sb) - at(sa - sb) - at(-sa + sb) + at(-sa - sb));
    }
    d
}

const BE_COEF: [f64; 6] = [1.0, 1.0, 1.0, 2.0, 2.0, 2.0];

fn interior_voxel(grid: &GridSpec, idx: usize) -> bool {
    grid.is_interior(grid.coords(idx), 1)
}

pub(crate) fn bending_energy_data(grid: &GridSpec, u: &[[f64; 3]]) -> f64 {
    stable_sum(grid.len(), |idx| {
        if !interior_voxel(grid, idx) {
            return 0.0;
        }
        let mut e = 0.0;
        for ch in 0..3 {
            let d = second_differences(grid, u, idx, ch);
            for t in 0..6 {
                e += BE_COEF[t] * d[t] * d[t];
            }
        }
        e
    })
}

/// Gradient of [`bending_energy_data`] with respect to every displacement component.
pub(crate) fn bending_energy_grad(grid: &GridSpec, u: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let s = [1isize, grid.nx as isize, (grid.nx * grid.ny) as isize];
    let mut g = vec![[0.0; 3]; grid.len()];
    for idx in 0..grid.len() {
        if !interior_voxel(grid, idx) {
            continue;
        }
        for ch in 0..3 {
            let d = second_differences(grid, u, idx, ch);
            let mut add = |off: isize, w: f64| g[(idx as isize + off) as usize][ch] += w;
            for a in 0..3 {
                let k = 2.0 * BE_COEF[a] * d[a];
                add(s[a], k);
                add(0, -2.0 * k);
                add(-s[a], k);
            }
            for (slot, (a, b)) in [(0, 1), (0, 2), (1, 2)].into_iter().enumerate() {
                let k = 2.0 * BE_COEF[3 + slot] * d[3 + slot] * 0.25;
                add(s[a] + s[b], k);
                add(s[a] - s[b], -k);
                add(-s[a] + s[b], -k);
                add(-s[a] - s[b], k);
            }
        }
    }
    g
}

/// Bending energy of a displacement field over interior voxels, voxel units.
pub fn bending_energy(u: &VectorField) -> Result<f64> {
    u.expect_kind(FieldKind::Displacement)?;
    check_be_grid(u.grid())?;
    Ok(bending_energy_data(u.grid(), u.data()))
}

/// Fixed and warped-and-reoriented moving tensor volumes.
pub type TensorPair<'a> = (&'a TensorVolume, &'a TensorVolume);

/// Weighted loss. Without tensor volumes the tensor term is skipped and
/// reported as 0 (structural-only loss).
pub fn total_loss(
    f_t2w: &ScalarVolume,
    mw_t2w: &ScalarVolume,
    dti: Option<TensorPair<'_>>,
    u: &VectorField,
    w: &LossWeights,
) -> Result<LossReport> {
    total_loss_masked(f_t2w, mw_t2w, dti, u, w, None)
}

/// [`total_loss`] with the data terms restricted to a mask.
pub fn total_loss_masked(
    f_t2w: &ScalarVolume,
    mw_t2w: &ScalarVolume,
    dti: Option<TensorPair<'_>>,
    u: &VectorField,
    w: &LossWeights,
    mask: Option<&LabelVolume>,
) -> Result<LossReport> {
    w.validate()?;
    assert_same_grid(f_t2w, u)?;
    let ncc_v = ncc_masked(f_t2w, mw_t2w, mask)?;
    let eds_v = match dti {
        Some((f, m)) => {
            assert_same_grid(f_t2w, f)?;
            eds_masked(f, m, mask)?
        }
        None => 0.0,
    };
    let be_v = bending_energy(u)?;
    Ok(LossReport::new(eds_v, ncc_v, be_v, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SymTensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_scalar(g: GridSpec, rng: &mut ChaCha8Rng) -> ScalarVolume {
        ScalarVolume::new(g, (0..g.len()).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn ncc_sign_convention() {
        let g = GridSpec::cube(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_scalar(g, &mut rng);
        assert!((ncc(&f, &f).unwrap() + 1.0).abs() < 1e-12);
        let neg = ScalarVolume::new(g, f.data().iter().map(|v| 3.0 - v).collect()).unwrap();
        assert!((ncc(&f, &neg).unwrap() - 1.0).abs() < 1e-12);
        let flat = ScalarVolume::filled(g, 2.0);
        assert!(matches!(ncc(&f, &flat), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn ncc_mask_restricts_sums() {
        let g = GridSpec::cube(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_scalar(g, &mut rng);
        let mut m = f.clone();
        // Corrupt only voxels outside the mask.
        let mask = LabelVolume::from_fn(g, |[i, _, _]| (i < 2) as u16);
        for (idx, [i, _, _]) in g.voxels() {
            if i >= 2 {
                m.data_mut()[idx] = rng.random_range(0.0..1.0);
            }
        }
        assert!((ncc_masked(&f, &m, Some(&mask)).unwrap() + 1.0).abs() < 1e-12);
        assert!(ncc(&f, &m).unwrap() > -0.99);
    }

    #[test]
    fn eds_examples() {
        let g = GridSpec::cube(3).unwrap();
        let f = TensorVolume::filled(g, SymTensor::new(1.0, 2.0, 3.0, 0.1, 0.2, 0.3));
        assert_eq!(eds(&f, &f).unwrap(), 0.0);
        let mut m = f.clone();
        m.data_mut()[5].0[3] += 1.0;
        assert!((eds(&f, &m).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn bending_energy_examples() {
        let g = GridSpec::cube(9).unwrap();
        let quad = VectorField::from_fn(g, FieldKind::Displacement, |[i, _, _]| [0.01 * (i * i) as f64, 0.0, 0.0]);
        assert!((bending_energy(&quad).unwrap() - 0.1372).abs() < 1e-10);
        let small = VectorField::zeros(GridSpec::new(2, 5, 5, 1.5).unwrap(), FieldKind::Displacement);
        assert!(matches!(bending_energy(&small), Err(Error::GridTooSmall(_))));
    }

    #[test]
    fn bending_energy_gradient_matches_finite_differences() {
        let g = GridSpec::new(5, 6, 4, 1.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u: Vec<[f64; 3]> = (0..g.len()).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        let grad = bending_energy_grad(&g, &u);
        let h = 1e-5;
        for idx in (0..g.len()).step_by(7) {
            for ch in 0..3 {
                let mut p = u.clone();
                p[idx][ch] += h;
                let mut m = u.clone();
                m[idx][ch] -= h;
                let fd = (bending_energy_data(&g, &p) - bending_energy_data(&g, &m)) / (2.0 * h);
                assert!((fd - grad[idx][ch]).abs() < 1e-6, "{fd} vs {}", grad[idx][ch]);
            }
        }
    }

    #[test]
    fn ncc_gradient_matches_finite_differences() {
        let g = GridSpec::cube(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_scalar(g, &mut rng);
        let m = random_scalar(g, &mut rng);
        let parts = ncc_parts(f.data(), m.data(), None).unwrap();
        let h = 1e-6;
        for idx in 0..g.len() {
            let mut mp = m.data().to_vec();
            mp[idx] += h;
            let mut mm = m.data().to_vec();
            mm[idx] -= h;
            let fd = (ncc_parts(f.data(), &mp, None).unwrap().value()
                - ncc_parts(f.data(), &mm, None).unwrap().value())
                / (2.0 * h);
            let an = parts.grad_m(f.data()[idx], m.data()[idx]);
            assert!((fd - an).abs() < 1e-7);
        }
    }

    #[test]
    fn total_loss_examples() {
        let g = GridSpec::cube(5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_scalar(g, &mut rng);
        let m = random_scalar(g, &mut rng);
        let tf = TensorVolume::filled(g, SymTensor::diag(1.0, 0.5, 0.5));
        let tm = TensorVolume::filled(g, SymTensor::diag(0.5, 1.0, 0.5));
        let u = VectorField::from_fn(g, FieldKind::Displacement, |[i, j, k]| {
            [0.01 * (i * j) as f64, 0.02 * (k * k) as f64, 0.0]
        });
        let w = LossWeights::default();
        let r = total_loss(&f, &m, Some((&tf, &tm)), &u, &w).unwrap();
        assert_eq!(r.total, 1.0 * r.eds + 1.0 * r.ncc + 0.001 * r.be);
        assert!(r.eds > 0.0 && r.be > 0.0);

        let r2 = total_loss(&f, &m, None, &u, &LossWeights::t2w_only()).unwrap();
        assert_eq!(r2.eds, 0.0);
        assert_eq!(r2.total, r2.ncc + 0.001 * r2.be);

        let affine = VectorField::from_fn(g, FieldKind::Displacement, |[i, j, k]| {
            [0.1 * i as f64 + 0.2, -0.05 * j as f64, 0.03 * k as f64 + 0.01 * i as f64]
        });
        let r3 = total_loss(&f, &f, Some((&tf, &tf)), &affine, &w).unwrap();
        assert!((r3.total + 1.0).abs() < 1e-12);
        assert!(LossWeights::new(0.0, 0.0, 1.0).is_err());
        assert!(LossWeights::new(-1.0, 1.0, 1.0).is_err());
    }
}
