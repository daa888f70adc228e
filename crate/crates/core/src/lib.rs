//! Diffusion-tensor-driven diffeomorphic image registration.
//!
//! A stationary velocity field is smoothed, exponentiated by scaling and
//! squaring into a diffeomorphic deformation, and used to warp a structural
//! (T2-weighted) image and a diffusion tensor image. Warped tensors are
//! reoriented with the finite-strain rule and the pair is scored by
//! `alpha·EDS + beta·NCC + lambda·BE`. The velocity is found by direct
//! coarse-to-fine optimisation of a control grid ([`register`]).
//!
//! ```
//! use dtreg::prelude::*;
//!
//! let grid = GridSpec::cube(16)?;
//! let v = VectorField::constant(grid, FieldKind::Velocity, [0.5, 0.0, 0.0]);
//! let u = exp_svf(&gaussian_smooth(&v, 1.2)?, 7)?;
//! assert!((u.data()[grid.index(8, 8, 8)][0] - 0.5).abs() < 1e-9);
//! # Ok::<(), dtreg::Error>(())
//! ```

pub mod diffeo;
pub mod error;
pub mod eval;
pub mod interp;
pub(crate) mod linalg;
pub mod loss;
pub mod phantom;
pub(crate) mod reduce;
pub mod register;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};

/// 3×3 matrix type used for Jacobians and rotations (row-major).
pub type Mat3 = linalg::Mat3;

/// Common imports.
pub mod prelude {
    pub use crate::diffeo::{
        compose, exp_svf, gaussian_smooth, jacobian, jacobian_determinant, JacobianField,
    };
    pub use crate::error::{Error, Result};
    pub use crate::eval::{deformation_stats, dice, fa_ssd, DeformationStats, DiceReport};
    pub use crate::interp::{
        sample_trilinear, warp_labels_nearest, warp_scalar, warp_tensor_components, warp_vector,
    };
    pub use crate::loss::{bending_energy, eds, ncc, total_loss, LossReport, LossWeights};
    pub use crate::phantom::{
        make_ground_truth_svf, make_phantom, make_registration_pair, Phantom, PhantomKind,
        PhantomSpec,
    };
    pub use crate::register::{
        register, ControlGrid, RegistrationConfig, RegistrationInputs, RegistrationResult,
    };
    pub use crate::tensor::{
        eigenvalues_sym3, fa, fa_map, polar_rotation, reorient_field, reorient_tensor, FoldPolicy,
        Rotation, SymTensor,
    };
    pub use crate::volume::{
        assert_same_grid, load_volume, save_volume, FieldKind, GridSpec, HasGrid, LabelVolume,
        ScalarVolume, TensorVolume, VectorField, VolumeKind,
    };
}

/// Guide chapters compiled as doc-tests so the book's snippets stay in sync.
#[cfg(doctest)]
pub mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/volumes.md")]
    pub mod volumes {}
    #[doc = include_str!("../../../book/src/velocity_fields.md")]
    pub mod velocity_fields {}
    #[doc = include_str!("../../../book/src/reorientation.md")]
    pub mod reorientation {}
    #[doc = include_str!("../../../book/src/loss.md")]
    pub mod loss {}
    #[doc = include_str!("../../../book/src/registration.md")]
    pub mod registration {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
    #[doc = include_str!("../../../book/src/phantoms.md")]
    pub mod phantoms {}
}
