//! Trilinear sampling and backward warping.
//!
//! Every warp computes `out(x) = in(x + u(x))` for a displacement field `u`.
//! Sampling positions outside the grid are clamped to the nearest edge on
//! each axis independently.

use rayon::prelude::*;

use crate::error::Result;
use crate::tensor::SymTensor;
use crate::volume::{
    assert_same_grid, FieldKind, GridSpec, HasGrid, LabelVolume, ScalarVolume, TensorVolume,
    VectorField,
};

/// The eight corners and weights of one trilinear sample.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Stencil {
    /// Base corner per axis (clamped so that `base + 1` is in range).
    pub base: [usize; 3],
    /// Fractional offset per axis in `[0, 1]`.
    pub frac: [f64; 3],
    /// Whether the coordinate was clamped on that axis (zero derivative).
    pub clamped: [bool; 3],
}

impl Stencil {
    #[inline]
    pub fn new(grid: &GridSpec, p: [f64; 3]) -> Self {
        let dims = grid.dims();
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        let mut clamped = [false; 3];
        for a in 0..3 {
            let hi = (dims[a] - 1) as f64;
            let mut c = p[a];
            if !(c > 0.0) {
                // also catches NaN
                clamped[a] = c < 0.0 || c.is_nan();
                c = 0.0;
            } else if c > hi {
                clamped[a] = true;
                c = hi;
            }
            let b = (c.floor() as usize).min(dims[a] - 2);
            base[a] = b;
            frac[a] = c - b as f64;
        }
        Stencil {
            base,
            frac,
            clamped,
        }
    }

    /// Linear indices and weights of the eight corners.
    #[inline]
    pub fn corners(&self, grid: &GridSpec) -> [(usize, f64); 8] {
        let [fx, fy, fz] = self.frac;
        let i0 = grid.index(self.base[0], self.base[1], self.base[2]);
        let sx = 1;
        let sy = grid.nx;
        let sz = grid.nx * grid.ny;
        let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
        [
            (i0, gx * gy * gz),
            (i0 + sx, fx * gy * gz),
            (i0 + sy, gx * fy * gz),
            (i0 + sx + sy, fx * fy * gz),
            (i0 + sz, gx * gy * fz),
            (i0 + sx + sz, fx * gy * fz),
            (i0 + sy + sz, gx * fy * fz),
            (i0 + sx + sy + sz, fx * fy * fz),
        ]
    }

    /// Derivatives of the eight weights with respect to the sample position,
    /// zero along clamped axes.
    #[inline]
    pub fn weight_gradients(&self) -> [[f64; 3]; 8] {
        let [fx, fy, fz] = self.frac;
        let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
        let m = [
            if self.clamped[0] { 0.0 } else { 1.0 },
            if self.clamped[1] { 0.0 } else { 1.0 },
            if self.clamped[2] { 0.0 } else { 1.0 },
        ];
        let w = |dx: f64, dy: f64, dz: f64, wx: f64, wy: f64, wz: f64| {
            [m[0] * dx * wy * wz, m[1] * wx * dy * wz, m[2] * wx * wy * dz]
        };
        [
            w(-1.0, -1.0, -1.0, gx, gy, gz),
            w(1.0, -1.0, -1.0, fx, gy, gz),
            w(-1.0, 1.0, -1.0, gx, fy, gz),
            w(1.0, 1.0, -1.0, fx, fy, gz),
            w(-1.0, -1.0, 1.0, gx, gy, fz),
            w(1.0, -1.0, 1.0, fx, gy, fz),
            w(-1.0, 1.0, 1.0, gx, fy, fz),
            w(1.0, 1.0, 1.0, fx, fy, fz),
        ]
    }
}

#[inline]
fn position(c: [usize; 3], u: [f64; 3]) -> [f64; 3] {
    [c[0] as f64 + u[0], c[1] as f64 + u[1], c[2] as f64 + u[2]]
}

/// Trilinear interpolation at a continuous voxel coordinate (clamp-to-edge).
pub fn sample_trilinear(vol: &ScalarVolume, p: [f64; 3]) -> f64 {
    let g = vol.grid();
    let data = vol.data();
    Stencil::new(g, p)
        .corners(g)
        .iter()
        .map(|&(i, w)| w * data[i])
        .sum()
}

/// Samples an interleaved multi-channel buffer at `p`.
#[inline]
pub(crate) fn sample_channels<const C: usize>(grid: &GridSpec, data: &[[f64; C]], p: [f64; 3]) -> [f64; C] {
    let mut out = [0.0; C];
    for (i, w) in Stencil::new(grid, p).corners(grid) {
        let v = &data[i];
        for c in 0..C {
            out[c] += w * v[c];
        }
    }
    out
}

fn warp_channels<const C: usize>(grid: &GridSpec, data: &[[f64; C]], u: &[[f64; 3]]) -> Vec<[f64; C]> {
    (0..grid.len())
        .into_par_iter()
        .map(|idx| sample_channels(grid, data, position(grid.coords(idx), u[idx])))
        .collect()
}

fn check(vol: &impl HasGrid, phi: &VectorField) -> Result<()> {
    assert_same_grid(vol, phi)?;
    phi.expect_kind(FieldKind::Displacement)
}

/// `out(x) = vol(x + u(x))`.
pub fn warp_scalar(vol: &ScalarVolume, phi: &VectorField) -> Result<ScalarVolume> {
    check(vol, phi)?;
    let g = *vol.grid();
    let data = vol.data();
    let u = phi.data();
    let out = (0..g.len())
        .into_par_iter()
        .map(|idx| sample_trilinear(vol, position(g.coords(idx), u[idx])))
        .collect::<Vec<_>>();
    debug_assert_eq!(out.len(), data.len());
    ScalarVolume::new(g, out)
}

/// Warps each of the six tensor channels independently; no reorientation.
pub fn warp_tensor_components(vol: &TensorVolume, phi: &VectorField) -> Result<TensorVolume> {
    check(vol, phi)?;
    let raw: Vec<[f64; 6]> = vol.data().iter().map(|t| t.0).collect();
    let out = warp_channels(vol.grid(), &raw, phi.data());
    TensorVolume::new(*vol.grid(), out.into_iter().map(SymTensor).collect())
}

/// Nearest-neighbour label warp with clamped rounding.
pub fn warp_labels_nearest(vol: &LabelVolume, phi: &VectorField) -> Result<LabelVolume> {
    check(vol, phi)?;
    let g = *vol.grid();
    let dims = g.dims();
    let data = vol.data();
    let out = g
        .voxels()
        .map(|(idx, c)| {
            let p = position(c, phi.data()[idx]);
            let r: [usize; 3] = std::array::from_fn(|a| {
                let v = p[a].round();
                if v.is_nan() || v <= 0.0 {
                    0
                } else {
                    (v as usize).min(dims[a] - 1)
                }
            });
            data[g.index(r[0], r[1], r[2])]
        })
        .collect();
    LabelVolume::new(g, out)
}

/// Samples every component of `field` at `x + u(x)`; the tag of `field` is kept.
pub fn warp_vector(field: &VectorField, phi: &VectorField) -> Result<VectorField> {
    check(field, phi)?;
    let out = warp_channels(field.grid(), field.data(), phi.data());
    VectorField::new(*field.grid(), field.kind(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent trilinear oracle: explicit clamp + floor + 8-term sum.
    fn oracle_sample(g: &GridSpec, f: &dyn Fn(usize, usize, usize) -> f64, p: [f64; 3]) -> f64 {
        let d = g.dims();
        let mut lo = [0usize; 3];
        let mut t = [0.0; 3];
        for a in 0..3 {
            let c = p[a].clamp(0.0, (d[a] - 1) as f64);
            let mut l = c.floor() as usize;
            if l == d[a] - 1 {
                l -= 1;
            }
            lo[a] = l;
            t[a] = c - l as f64;
        }
        let mut s = 0.0;
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let w = (if dx == 1 { t[0] } else { 1.0 - t[0] })
                        * (if dy == 1 { t[1] } else { 1.0 - t[1] })
                        * (if dz == 1 { t[2] } else { 1.0 - t[2] });
                    s += w * f(lo[0] + dx, lo[1] + dy, lo[2] + dz);
                }
            }
        }
        s
    }

    fn random_scalar(g: GridSpec, rng: &mut ChaCha8Rng) -> ScalarVolume {
        ScalarVolume::new(g, (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_disp(g: GridSpec, rng: &mut ChaCha8Rng, amp: f64) -> VectorField {
        VectorField::new(
            g,
            FieldKind::Displacement,
            (0..g.len())
                .map(|_| std::array::from_fn(|_| rng.random_range(-amp..amp)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn sample_examples() {
        let g = GridSpec::new(6, 7, 8, 1.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vol = random_scalar(g, &mut rng);
        assert_eq!(sample_trilinear(&vol, [3.0, 4.0, 5.0]), vol.at(3, 4, 5));
        assert_eq!(sample_trilinear(&vol, [-2.7, 0.0, 0.0]), vol.at(0, 0, 0));

        let ramp = ScalarVolume::from_fn(g, |[i, _, _]| if i >= 3 { 1.0 } else { 0.0 });
        assert!((sample_trilinear(&ramp, [2.5, 3.0, 1.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn warp_scalar_examples() {
        let g = GridSpec::cube(6).unwrap();
        let vol = ScalarVolume::from_fn(g, |[i, j, k]| 2.0 * i as f64 + 0.1 * (j * k) as f64);
        let zero = VectorField::zeros(g, FieldKind::Displacement);
        assert_eq!(warp_scalar(&vol, &zero).unwrap(), vol);
        let shift = VectorField::constant(g, FieldKind::Displacement, [1.0, 0.0, 0.0]);
        let out = warp_scalar(&vol, &shift).unwrap();
        for (_, [i, j, k]) in g.voxels().filter(|(_, c)| c[0] + 1 < 6) {
            assert_eq!(out.at(i, j, k), vol.at(i + 1, j, k));
        }
        let vel = VectorField::zeros(g, FieldKind::Velocity);
        assert!(warp_scalar(&vol, &vel).is_err());
        let other = VectorField::zeros(GridSpec::cube(5).unwrap(), FieldKind::Displacement);
        assert!(warp_scalar(&vol, &other).is_err());
    }

    #[test]
    fn warp_scalar_matches_oracle() {
        let g = GridSpec::cube(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let vol = random_scalar(g, &mut rng);
        let u = random_disp(g, &mut rng, 1.5);
        let out = warp_scalar(&vol, &u).unwrap();
        let f = |i, j, k| vol.at(i, j, k);
        for (idx, c) in g.voxels() {
            let p = position(c, u.data()[idx]);
            assert!((out.data()[idx] - oracle_sample(&g, &f, p)).abs() < 1e-6);
        }
    }

    #[test]
    fn tensor_and_vector_warps_match_per_channel_oracle() {
        let g = GridSpec::cube(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tv = TensorVolume::new(
            g,
            (0..g.len())
                .map(|_| SymTensor(std::array::from_fn(|_| rng.random_range(-1.0..1.0))))
                .collect(),
        )
        .unwrap();
        let vf = random_disp(g, &mut rng, 2.0).retagged(FieldKind::Velocity);
        let u = random_disp(g, &mut rng, 1.5);
        let wt = warp_tensor_components(&tv, &u).unwrap();
        let wv = warp_vector(&vf, &u).unwrap();
        assert_eq!(wv.kind(), FieldKind::Velocity);
        for (idx, c) in g.voxels() {
            let p = position(c, u.data()[idx]);
            for ch in 0..6 {
                let f = |i, j, k| tv.data()[g.index(i, j, k)].0[ch];
                assert!((wt.data()[idx].0[ch] - oracle_sample(&g, &f, p)).abs() < 1e-6);
            }
            for ch in 0..3 {
                let f = |i, j, k| vf.data()[g.index(i, j, k)][ch];
                assert!((wv.data()[idx][ch] - oracle_sample(&g, &f, p)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn constant_fields_survive_any_warp() {
        let g = GridSpec::cube(5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = random_disp(g, &mut rng, 3.0);
        let t = SymTensor::new(1.0, 2.0, 3.0, 0.1, 0.2, 0.3);
        let wt = warp_tensor_components(&TensorVolume::filled(g, t), &u).unwrap();
        for d in wt.data() {
            for c in 0..6 {
                assert!((d.0[c] - t.0[c]).abs() < 1e-12);
            }
        }
        let c = VectorField::constant(g, FieldKind::Velocity, [0.5, -1.0, 2.0]);
        let wc = warp_vector(&c, &u).unwrap();
        for v in wc.data() {
            for a in 0..3 {
                assert!((v[a] - c.data()[0][a]).abs() < 1e-12);
            }
        }
        let zero = VectorField::zeros(g, FieldKind::Displacement);
        assert_eq!(warp_vector(&c, &zero).unwrap(), c);
    }

    #[test]
    fn label_warp_examples() {
        let g = GridSpec::cube(6).unwrap();
        let labels = LabelVolume::from_fn(g, |[i, j, _]| (i + 10 * j) as u16);
        let zero = VectorField::zeros(g, FieldKind::Displacement);
        assert_eq!(warp_labels_nearest(&labels, &zero).unwrap(), labels);
        let small = VectorField::constant(g, FieldKind::Displacement, [0.4, 0.0, 0.0]);
        assert_eq!(warp_labels_nearest(&labels, &small).unwrap(), labels);
        let big = VectorField::constant(g, FieldKind::Displacement, [0.6, 0.0, 0.0]);
        let out = warp_labels_nearest(&labels, &big).unwrap();
        for (idx, [i, j, k]) in g.voxels() {
            let want = if i + 1 < 6 { labels.data()[g.index(i + 1, j, k)] } else { labels.data()[idx] };
            assert_eq!(out.data()[idx], want);
        }
    }

    proptest! {
        #[test]
        fn interpolation_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0,
                                    p in proptest::array::uniform3(-1.0f64..6.0)) {
            let g = GridSpec::cube(5).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_scalar(g, &mut rng);
            let y = random_scalar(g, &mut rng);
            let combo = ScalarVolume::new(g, x.data().iter().zip(y.data()).map(|(u, v)| a * u + b * v).collect()).unwrap();
            let lhs = sample_trilinear(&combo, p);
            let rhs = a * sample_trilinear(&x, p) + b * sample_trilinear(&y, p);
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn warped_labels_subset_of_input(seed in 0u64..1000) {
            let g = GridSpec::cube(5).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels = LabelVolume::new(g, (0..g.len()).map(|_| rng.random_range(0..4u16) * 3).collect()).unwrap();
            let u = random_disp(g, &mut rng, 4.0);
            let out = warp_labels_nearest(&labels, &u).unwrap();
            let input: std::collections::BTreeSet<u16> = labels.data().iter().copied().collect();
            prop_assert!(out.data().iter().all(|l| input.contains(l)));
        }
    }
}
