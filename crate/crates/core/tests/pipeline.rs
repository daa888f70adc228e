use dtreg::eval::median_endpoint_error;
use dtreg::phantom::present_labels;
use dtreg::prelude::*;
use dtreg::volume::{load_labels, load_scalar, load_tensor};
use proptest::prelude::*;

fn f32_exact(x: f64) -> f64 {
    x as f32 as f64
}

#[test]
fn phantom_survives_a_nifti_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let grid = GridSpec::new(10, 12, 9, 2.0).unwrap();
    let ph = make_phantom(&PhantomSpec::new(grid, PhantomKind::Tracts, 4)).unwrap();
    let (t, d, l) = (dir.path().join("t.nii.gz"), dir.path().join("d.nii"), dir.path().join("l.nii.gz"));
    save_volume(&ph.t2w, &t).unwrap();
    save_volume(&ph.dti, &d).unwrap();
    save_volume(&ph.labels, &l).unwrap();

    let t2 = load_scalar(&t).unwrap();
    assert_eq!(*t2.grid(), grid);
    assert!(t2.data().iter().zip(ph.t2w.data()).all(|(a, b)| *a == f32_exact(*b)));
    let d2 = load_tensor(&d).unwrap();
    assert!(d2
        .data()
        .iter()
        .zip(ph.dti.data())
        .all(|(a, b)| a.0.iter().zip(&b.0).all(|(x, y)| *x == f32_exact(*y))));
    assert_eq!(load_labels(&l).unwrap().data(), ph.labels.data());
}

#[test]
fn loading_with_the_wrong_kind_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.nii");
    save_volume(&TensorVolume::filled(GridSpec::cube(4).unwrap(), SymTensor::isotropic(1.0)), &path).unwrap();
    assert!(matches!(load_scalar(&path), Err(Error::DimensionMismatch(_))));
}

#[test]
fn recovery_field_undoes_the_pair_warp() {
    let grid = GridSpec::cube(24).unwrap();
    let ph = make_phantom(&PhantomSpec::new(grid, PhantomKind::Blobs, 1)).unwrap();
    let v = make_ground_truth_svf(grid, 2.0, 2).unwrap();
    let pair = make_registration_pair(&ph, &v, 0.0, 3).unwrap();

    let round_trip = compose(&pair.phi_true, &pair.phi_recovery).unwrap();
    assert!(round_trip.max_norm(4) < 0.1);

    let back = warp_labels_nearest(&pair.moving.labels, &pair.phi_recovery).unwrap();
    let labels = present_labels(&ph.labels);
    let before = dice(&ph.labels, &pair.moving.labels, &labels).unwrap().mean;
    let after = dice(&ph.labels, &back, &labels).unwrap().mean;
    assert!(after > before, "{before} -> {after}");
}

#[test]
fn registration_moves_towards_the_ground_truth() {
    let grid = GridSpec::cube(20).unwrap();
    let ph = make_phantom(&PhantomSpec::new(grid, PhantomKind::Blobs, 8)).unwrap();
    let pair = make_registration_pair(&ph, &make_ground_truth_svf(grid, 2.0, 9).unwrap(), 0.0, 10).unwrap();
    let inputs = RegistrationInputs::new(&pair.fixed.t2w, &pair.moving.t2w)
        .unwrap()
        .with_dti(&pair.fixed.dti, &pair.moving.dti)
        .unwrap();
    let cfg = RegistrationConfig {
        levels: vec![4, 6],
        iterations: 15,
        ..Default::default()
    };
    let res = register(&inputs, &cfg).unwrap();

    let zero = VectorField::zeros(grid, FieldKind::Displacement);
    let before = median_endpoint_error(&zero, &pair.phi_recovery, 3).unwrap();
    let after = median_endpoint_error(&res.phi, &pair.phi_recovery, 3).unwrap();
    assert!(after < before, "EPE {before} -> {after}");

    // The returned velocity reproduces the returned deformation.
    let again = exp_svf(&res.velocity, cfg.steps).unwrap();
    assert_eq!(again.data(), res.phi.data());

    // The reported final loss is the loss of the returned fields.
    let recomputed = total_loss(
        &pair.fixed.t2w,
        &res.warped_t2w,
        Some((&pair.fixed.dti, res.warped_dti.as_ref().unwrap())),
        &res.phi,
        &cfg.weights,
    )
    .unwrap();
    assert!((recomputed.total - res.final_loss().total).abs() <= 1e-9 * recomputed.total.abs());
}

#[test]
fn t2w_only_registration_ignores_tensors() {
    let grid = GridSpec::cube(16).unwrap();
    let ph = make_phantom(&PhantomSpec::new(grid, PhantomKind::OrientationContrast, 0)).unwrap();
    let pair = make_registration_pair(&ph, &make_ground_truth_svf(grid, 1.5, 1).unwrap(), 0.0, 2).unwrap();
    let inputs = RegistrationInputs::new(&pair.fixed.t2w, &pair.moving.t2w).unwrap();
    let cfg = RegistrationConfig {
        levels: vec![4],
        iterations: 5,
        ..Default::default()
    };
    let res = register(&inputs, &cfg).unwrap();
    assert!(res.warped_dti.is_none());
    assert!(res.trace.iter().all(|e| e.loss.eds == 0.0));
}

#[test]
fn mismatched_grids_are_rejected() {
    let a = ScalarVolume::filled(GridSpec::cube(6).unwrap(), 1.0);
    let b = ScalarVolume::filled(GridSpec::cube(7).unwrap(), 1.0);
    assert!(matches!(RegistrationInputs::new(&a, &b), Err(Error::GridMismatch { .. })));
}

fn arb_tensor() -> impl Strategy<Value = SymTensor> {
    (proptest::array::uniform2(0.05f64..3.0), proptest::array::uniform3(-1.0f64..1.0))
        .prop_filter("non-zero axis", |(_, d)| d.iter().map(|x| x * x).sum::<f64>() > 1e-3)
        .prop_map(|(l, d)| SymTensor::cylindrical(l[0].max(l[1]), l[0].min(l[1]), d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ncc_ignores_positive_affine_intensity_changes(
        vals in proptest::collection::vec(0.0f64..10.0, 64),
        scale in 0.1f64..10.0,
        shift in -5.0f64..5.0,
    ) {
        let grid = GridSpec::cube(4).unwrap();
        let f = ScalarVolume::new(grid, vals.clone()).unwrap();
        prop_assume!(vals.iter().any(|&v| (v - vals[0]).abs() > 1e-3));
        let g = ScalarVolume::new(grid, vals.iter().map(|v| scale * v + shift).collect()).unwrap();
        prop_assert!((ncc(&f, &g).unwrap() + 1.0).abs() < 1e-9);
    }

    #[test]
    fn eds_is_symmetric_and_zero_on_the_diagonal(a in arb_tensor(), b in arb_tensor()) {
        let grid = GridSpec::cube(3).unwrap();
        let (va, vb) = (TensorVolume::filled(grid, a), TensorVolume::filled(grid, b));
        prop_assert_eq!(eds(&va, &va).unwrap(), 0.0);
        prop_assert!((eds(&va, &vb).unwrap() - eds(&vb, &va).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn translation_exponentials_compose(c in proptest::array::uniform3(-1.5f64..1.5)) {
        let grid = GridSpec::cube(12).unwrap();
        let v = VectorField::constant(grid, FieldKind::Velocity, c);
        let u = exp_svf(&v, 7).unwrap();
        let back = exp_svf(&v.scaled(-1.0), 7).unwrap();
        let id = compose(&u, &back).unwrap();
        prop_assert!(id.max_norm(3) < 1e-9);
    }

    #[test]
    fn dice_is_symmetric(a in proptest::collection::vec(0u16..4, 27), b in proptest::collection::vec(0u16..4, 27)) {
        let grid = GridSpec::cube(3).unwrap();
        let (la, lb) = (LabelVolume::new(grid, a).unwrap(), LabelVolume::new(grid, b).unwrap());
        let labels = [1, 2, 3];
        prop_assert_eq!(dice(&la, &lb, &labels).unwrap().scores, dice(&lb, &la, &labels).unwrap().scores);
    }
}
