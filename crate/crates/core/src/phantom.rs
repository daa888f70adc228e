//! Synthetic phantoms, ground-truth velocity fields and warped pairs.
//!
//! Tensor eigenvalues are in units of 10⁻³ mm²/s, so a typical white-matter
//! tensor is `(1.8, 0.3, 0.3)`. Geometry is laid out in coordinates
//! normalised by the longest axis and centred on the grid, so the same spec
//! looks alike at 32³ and 48³.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diffeo::{exp_svf, smooth_data};
use crate::error::{Error, Result};
use crate::eval::deformation_stats;
use crate::interp::{warp_labels_nearest, warp_scalar, warp_tensor_components};
use crate::tensor::{reorient_field, FoldPolicy, ReorientStats, SymTensor};
use crate::volume::{
    assert_same_grid, FieldKind, GridSpec, HasGrid, LabelVolume, ScalarVolume, TensorVolume,
    VectorField,
};

/// Which structure a phantom contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhantomKind {
    /// Overlapping Gaussian blobs with isotropic tensors.
    Blobs,
    /// Blobs plus curved high-FA tubes whose principal axis follows the tube.
    Tracts,
    /// A uniform-intensity ellipsoid split into two regions that differ
    /// only in tensor orientation and shape.
    OrientationContrast,
}

impl PhantomKind {
    pub fn name(self) -> &'static str {
        match self {
            PhantomKind::Blobs => "blobs",
            PhantomKind::Tracts => "tracts",
            PhantomKind::OrientationContrast => "orientation-contrast",
        }
    }
}

impl std::str::FromStr for PhantomKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "blobs" => Ok(PhantomKind::Blobs),
            "tracts" => Ok(PhantomKind::Tracts),
            "orientation-contrast" => Ok(PhantomKind::OrientationContrast),
            other => Err(format!(
                "unknown phantom kind `{other}` (expected blobs, tracts or orientation-contrast)"
            )),
        }
    }
}

/// Everything that determines a phantom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomSpec {
    pub grid: GridSpec,
    pub kind: PhantomKind,
    /// Standard deviation of additive Gaussian noise on the scalar channel.
    pub noise: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn new(grid: GridSpec, kind: PhantomKind, seed: u64) -> Self {
        PhantomSpec {
            grid,
            kind,
            noise: 0.0,
            seed,
        }
    }
}

/// One co-registered set of volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub t2w: ScalarVolume,
    pub dti: TensorVolume,
    pub labels: LabelVolume,
}

/// Region eigenvalues of the orientation-contrast phantom.
pub const REGION_A_EIGENVALUES: [f64; 3] = [1.8, 0.3, 0.3];
pub const REGION_B_EIGENVALUES: [f64; 3] = [1.8, 0.7, 0.3];
/// Eigenvalues inside tracts.
pub const TRACT_EIGENVALUES: [f64; 3] = [1.8, 0.3, 0.3];

const N_BLOBS: usize = 24;

struct Blob {
    center: [f64; 3],
    sigma: f64,
    amplitude: f64,
}

impl Blob {
    fn profile(&self, q: [f64; 3]) -> f64 {
        let d2 = dist2(q, self.center);
        (-d2 / (2.0 * self.sigma * self.sigma)).exp()
    }
}

struct Arc {
    center: [f64; 3],
    e1: [f64; 3],
    e2: [f64; 3],
    radius: f64,
    theta: (f64, f64),
    width: f64,
}

impl Arc {
    /// Distance to the centre curve and the unit tangent at the nearest point.
    fn nearest(&self, q: [f64; 3]) -> (f64, [f64; 3]) {
        let p = sub(q, self.center);
        let (a, b) = (dot(p, self.e1), dot(p, self.e2));
        let theta = b.atan2(a).clamp(self.theta.0, self.theta.1);
        let (s, c) = theta.sin_cos();
        let on = std::array::from_fn(|i| self.center[i] + self.radius * (c * self.e1[i] + s * self.e2[i]));
        let tangent = std::array::from_fn(|i| -s * self.e1[i] + c * self.e2[i]);
        (dist2(q, on).sqrt(), tangent)
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

/// 1 below `lo`, 0 above `hi`, C¹ in between.
fn falloff(x: f64, lo: f64, hi: f64) -> f64 {
    let t = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
    1.0 - t * t * (3.0 - 2.0 * t)
}

/// Centred coordinates normalised by the longest axis.
fn normalised(grid: &GridSpec, c: [usize; 3]) -> [f64; 3] {
    let d = grid.dims();
    let scale = (*d.iter().max().expect("three axes") - 1) as f64;
    std::array::from_fn(|a| (c[a] as f64 - 0.5 * (d[a] - 1) as f64) / scale)
}

fn random_blobs(rng: &mut ChaCha8Rng, extent: f64, keep: impl Fn([f64; 3]) -> bool) -> Vec<Blob> {
    let mut blobs = Vec::with_capacity(N_BLOBS);
    while blobs.len() < N_BLOBS {
        let center: [f64; 3] = std::array::from_fn(|_| rng.random_range(-extent..extent));
        let sigma = rng.random_range(0.045..0.085);
        let amplitude = rng.random_range(0.4..1.0);
        if keep(center) {
            blobs.push(Blob {
                center,
                sigma,
                amplitude,
            });
        }
    }
    blobs
}

/// Sum of blob profiles and the blob that dominates `q`, if any.
fn texture(blobs: &[Blob], q: [f64; 3]) -> (f64, Option<usize>) {
    let mut sum = 0.0;
    let mut best = (0.3, None);
    for (k, b) in blobs.iter().enumerate() {
        let p = b.profile(q);
        sum += b.amplitude * p;
        if p > best.0 {
            best = (p, Some(k));
        }
    }
    (sum, best.1)
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = dot(v, v).sqrt();
        if n > 0.2 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn random_arc(rng: &mut ChaCha8Rng) -> Arc {
    let normal = random_unit(rng);
    let helper = if normal[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let e1 = {
        let c = cross(normal, helper);
        let n = dot(c, c).sqrt();
        [c[0] / n, c[1] / n, c[2] / n]
    };
    let e2 = cross(normal, e1);
    let start = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI - 2.2);
    Arc {
        center: std::array::from_fn(|_| rng.random_range(-0.08..0.08)),
        e1,
        e2,
        radius: rng.random_range(0.2..0.3),
        theta: (start, start + rng.random_range(1.6..2.2)),
        width: 0.055,
    }
}

fn add_noise(t2w: &mut ScalarVolume, sigma: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    if sigma == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| Error::InvalidParameter(format!("noise level {sigma}: {e}")))?;
    for v in t2w.data_mut() {
        *v += normal.sample(rng);
    }
    Ok(())
}

/// Isotropic diffusivity tied to the local texture, scaled per region.
fn isotropic_md(label: u16, tex: f64) -> SymTensor {
    SymTensor::isotropic((0.6 + 0.1 * (label % 4) as f64) * (0.8 + 0.5 * tex))
}

fn blobs_phantom(grid: &GridSpec, rng: &mut ChaCha8Rng, tracts: bool) -> Phantom {
    let blobs = random_blobs(rng, 0.4, |_| true);
    let arcs: Vec<Arc> = if tracts { (0..3).map(|_| random_arc(rng)).collect() } else { Vec::new() };
    let brain_radii = [0.42, 0.37, 0.35];
    let n = grid.len();
    let (mut t2w, mut dti, mut labels) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for (_, c) in grid.voxels() {
        let q = normalised(grid, c);
        let r = (0..3).map(|a| (q[a] / brain_radii[a]).powi(2)).sum::<f64>().sqrt();
        let brain = falloff(r, 0.9, 1.1);
        let (tex, dominant) = texture(&blobs, q);
        let mut label = match dominant {
            _ if brain < 0.5 => 0,
            Some(k) => 2 + (k % 5) as u16,
            None => 1,
        };
        let mut intensity = 0.2 + 0.4 * brain + tex;
        let mut tensor = isotropic_md(label, tex);
        for (t, arc) in arcs.iter().enumerate() {
            let (d, tangent) = arc.nearest(q);
            intensity += 0.6 * (-(d * d) / (2.0 * (0.5 * arc.width).powi(2))).exp();
            if d < arc.width {
                label = 7 + t as u16;
                tensor = SymTensor::cylindrical(TRACT_EIGENVALUES[0], TRACT_EIGENVALUES[1], tangent);
            }
        }
        t2w.push(intensity);
        dti.push(tensor);
        labels.push(label);
    }
    assemble(grid, t2w, dti, labels)
}

fn assemble(grid: &GridSpec, t2w: Vec<f64>, dti: Vec<SymTensor>, labels: Vec<u16>) -> Phantom {
    Phantom {
        t2w: ScalarVolume::new(*grid, t2w).expect("one value per voxel"),
        dti: TensorVolume::new(*grid, dti).expect("one tensor per voxel"),
        labels: LabelVolume::new(*grid, labels).expect("one label per voxel"),
    }
}

/// Label of region A (principal axis x) in the orientation-contrast phantom.
pub const REGION_A_LABEL: u16 = 1;
/// Label of region B (principal axis y).
pub const REGION_B_LABEL: u16 = 2;

const ELLIPSOID_RADII: [f64; 3] = [0.3, 0.25, 0.24];
const INSIDE_INTENSITY: f64 = 1.0;

fn ellipsoid_radius(q: [f64; 3]) -> f64 {
    (0..3).map(|a| (q[a] / ELLIPSOID_RADII[a]).powi(2)).sum::<f64>().sqrt()
}

fn orientation_contrast(grid: &GridSpec, rng: &mut ChaCha8Rng, swapped: bool) -> Phantom {
    let blobs = random_blobs(rng, 0.45, |c| ellipsoid_radius(c) > 1.25);
    let bend = rng.random_range(0.6..1.0);
    let shift = rng.random_range(-0.25..-0.1);
    let tensor_a = SymTensor::from_eigen(REGION_A_EIGENVALUES, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    let tensor_b = SymTensor::from_eigen(REGION_B_EIGENVALUES, [[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
    let (tensor_a, tensor_b) = if swapped { (tensor_b, tensor_a) } else { (tensor_a, tensor_b) };
    let n = grid.len();
    let (mut t2w, mut dti, mut labels) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for (_, c) in grid.voxels() {
        let q = normalised(grid, c);
        let r = ellipsoid_radius(q);
        let (tex, dominant) = texture(&blobs, q);
        if r <= 1.0 {
            let y = q[1] / ELLIPSOID_RADII[1];
            let interface = ELLIPSOID_RADII[0] * (bend * y * y + shift);
            let in_a = q[0] < interface;
            t2w.push(INSIDE_INTENSITY);
            dti.push(if in_a { tensor_a } else { tensor_b });
            labels.push(if in_a { REGION_A_LABEL } else { REGION_B_LABEL });
        } else {
            let s = falloff(r, 1.0, 1.3);
            t2w.push(s * INSIDE_INTENSITY + (1.0 - s) * (0.2 + tex));
            let label = dominant.map_or(0, |k| 3 + (k % 4) as u16);
            dti.push(isotropic_md(label, tex));
            labels.push(label);
        }
    }
    assemble(grid, t2w, dti, labels)
}

/// Builds the phantom described by `spec`. Deterministic in the spec.
pub fn make_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "noise level must be finite and non-negative, got {}",
            spec.noise
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut p = match spec.kind {
        PhantomKind::Blobs => blobs_phantom(&spec.grid, &mut rng, false),
        PhantomKind::Tracts => blobs_phantom(&spec.grid, &mut rng, true),
        PhantomKind::OrientationContrast => orientation_contrast(&spec.grid, &mut rng, false),
    };
    add_noise(&mut p.t2w, spec.noise, &mut rng)?;
    Ok(p)
}

/// Orientation-contrast phantom with the tensors of regions A and B exchanged.
pub fn make_swapped_orientation_contrast(spec: &PhantomSpec) -> Result<Phantom> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut p = orientation_contrast(&spec.grid, &mut rng, true);
    add_noise(&mut p.t2w, spec.noise, &mut rng)?;
    Ok(p)
}

/// Random smooth velocity field whose exponential moves no voxel (away
/// from the faces) by more than `max_displacement` voxels, within 5%.
///
/// Seeded white noise is smoothed by repeated 3-tap passes to a correlation
/// length of about a sixth of the grid, then rescaled until the measured
/// maximum displacement of `exp(v)` matches the bound.
pub fn make_ground_truth_svf(grid: GridSpec, max_displacement: f64, seed: u64) -> Result<VectorField> {
    if !(max_displacement >= 0.0 && max_displacement.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "maximum displacement must be finite and non-negative, got {max_displacement}"
        )));
    }
    if max_displacement == 0.0 {
        return Ok(VectorField::zeros(grid, FieldKind::Velocity));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data: Vec<[f64; 3]> = (0..grid.len())
        .map(|_| std::array::from_fn(|_| normal.sample(&mut rng)))
        .collect();
    let length = *grid.dims().iter().max().expect("three axes") as f64 / 6.0;
    let taps = [1.0 / 3.0; 3];
    let passes = (1.5 * length * length).ceil() as usize;
    for _ in 0..passes {
        data = smooth_data(&grid, &data, taps);
    }
    let raw = VectorField::new(grid, FieldKind::Velocity, data)?;

    let mut scale = max_displacement / raw.max_norm(1).max(f64::MIN_POSITIVE);
    for _ in 0..30 {
        let v = raw.scaled(scale);
        let measured = deformation_stats(&exp_svf(&v, crate::diffeo::DEFAULT_STEPS)?).max_displacement;
        if (measured - max_displacement).abs() <= 0.01 * max_displacement {
            return Ok(v);
        }
        scale *= max_displacement / measured;
    }
    Ok(raw.scaled(scale))
}

/// A fixed phantom, its warped copy and the deformations relating them.
#[derive(Debug, Clone)]
pub struct RegistrationPair {
    pub fixed: Phantom,
    pub moving: Phantom,
    /// `exp(v_true)`: `moving(x) = fixed(x + phi_true(x))`.
    pub phi_true: VectorField,
    /// `exp(−v_true)`, the deformation a registration of `moving` onto
    /// `fixed` should recover.
    pub phi_recovery: VectorField,
    pub reorient: ReorientStats,
}

/// Warps `phantom` by `exp(v_true)` (scalar and tensors trilinearly, tensors
/// then reoriented, labels by nearest neighbour) to produce the moving set.
///
/// Uses the crate's own warp and reorientation operators. With
/// `noise > 0`, independent Gaussian noise seeded by `seed` is added to the
/// moving scalar channel.
pub fn make_registration_pair(
    phantom: &Phantom,
    v_true: &VectorField,
    noise: f64,
    seed: u64,
) -> Result<RegistrationPair> {
    assert_same_grid(&phantom.t2w, v_true)?;
    assert_same_grid(&phantom.t2w, &phantom.dti)?;
    assert_same_grid(&phantom.t2w, &phantom.labels)?;
    v_true.expect_kind(FieldKind::Velocity)?;
    let steps = crate::diffeo::DEFAULT_STEPS;
    let phi_true = exp_svf(v_true, steps)?;
    let phi_recovery = exp_svf(&v_true.scaled(-1.0), steps)?;
    let mut t2w = warp_scalar(&phantom.t2w, &phi_true)?;
    let moved = warp_tensor_components(&phantom.dti, &phi_true)?;
    let (dti, reorient) = reorient_field(&moved, &phi_true, FoldPolicy::Strict)?;
    let labels = warp_labels_nearest(&phantom.labels, &phi_true)?;
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidParameter(format!("noise level {noise}")));
    }
    add_noise(&mut t2w, noise, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok(RegistrationPair {
        fixed: phantom.clone(),
        moving: Phantom { t2w, dti, labels },
        phi_true,
        phi_recovery,
        reorient,
    })
}

/// Non-zero labels present in `labels`, ascending.
pub fn present_labels(labels: &LabelVolume) -> Vec<u16> {
    labels.labels().into_iter().filter(|&l| l != 0).collect()
}

impl HasGrid for Phantom {
    fn grid(&self) -> &GridSpec {
        self.t2w.grid()
    }
}
