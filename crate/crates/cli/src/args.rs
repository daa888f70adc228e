use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Diffusion-tensor-driven diffeomorphic registration.
///
/// All volumes are NIfTI-1 (`.nii` or `.nii.gz`) on one isotropic grid.
/// Exit codes: 0 success, 2 invalid flags, 3 data error (unreadable file,
/// grid mismatch, bad header), 4 numerical failure (non-finite loss,
/// folding in strict mode).
#[derive(Debug, Parser)]
#[command(name = "dtreg", version)]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    /// Bit-reproducible mode. Reductions always run in a fixed order, so
    /// outputs are identical for any thread count; the flag is recorded in
    /// run manifests.
    #[arg(long, global = true)]
    pub deterministic: bool,

    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Register a moving T2w (and optionally DTI) pair onto a fixed one.
    Register(RegisterArgs),
    /// Apply a displacement field to a volume.
    Warp(WarpArgs),
    /// Exponentiate a velocity field by scaling and squaring.
    Exp(ExpArgs),
    /// Jacobian-determinant map of a displacement field.
    Jacobian(JacobianArgs),
    /// Fractional-anisotropy map of a tensor volume.
    Fa(FaArgs),
    /// Generate a synthetic phantom, optionally with a warped moving copy.
    Phantom(PhantomArgs),
    /// Evaluation metrics as `key=value` reports.
    #[command(subcommand)]
    Metrics(MetricsCommand),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GradientArg {
    /// Reverse-mode derivative of the whole pipeline.
    Adjoint,
    /// Central finite differences with --fd-epsilon.
    Fd,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long, value_name = "PATH")]
    pub fixed_t2w: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub moving_t2w: PathBuf,
    /// Fixed tensor volume; requires --moving-dti. Without tensors the loss
    /// is beta·NCC + lambda·BE.
    #[arg(long, value_name = "PATH", requires = "moving_dti")]
    pub fixed_dti: Option<PathBuf>,
    #[arg(long, value_name = "PATH", requires = "fixed_dti")]
    pub moving_dti: Option<PathBuf>,

    /// Output directory for phi.nii.gz, velocity.nii.gz, warped_t2w.nii.gz,
    /// warped_dti.nii.gz, loss_trace.txt and manifest.txt.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,

    /// Weight of the tensor term EDS (published default).
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Weight of the NCC term (published default).
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    /// Weight of the bending energy (published default).
    #[arg(long, default_value_t = 0.001)]
    pub lambda: f64,
    /// Velocity smoothing sigma in mm (published default).
    #[arg(long, default_value_t = 1.2)]
    pub sigma_mm: f64,
    /// Scaling-and-squaring steps (published default).
    #[arg(long, default_value_t = 7)]
    pub steps: u32,
    /// Control points per axis for each level, coarse to fine.
    #[arg(long, value_delimiter = ',', default_value = "6,12")]
    pub levels: Vec<usize>,
    /// Gradient-descent iterations per level.
    #[arg(long, default_value_t = 60)]
    pub iterations: usize,
    /// First trial step per level, in voxels.
    #[arg(long, default_value_t = 0.5)]
    pub initial_step: f64,
    /// Largest step, in voxels.
    #[arg(long, default_value_t = 2.0)]
    pub max_step: f64,
    /// Finite-difference step in voxels (used with --gradient fd).
    #[arg(long, default_value_t = 0.1)]
    pub fd_epsilon: f64,
    #[arg(long, value_enum, default_value_t = GradientArg::Adjoint)]
    pub gradient: GradientArg,
    /// Substitute the identity rotation where the Jacobian folds instead of failing.
    #[arg(long)]
    pub lenient_folds: bool,
    /// Recorded in the manifest; the optimiser is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VolumeType {
    Scalar,
    Tensor,
    Label,
}

#[derive(Debug, Args)]
pub struct WarpArgs {
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    /// Displacement field; output(x) = input(x + u(x)).
    #[arg(long, value_name = "PATH")]
    pub field: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// scalar: trilinear; tensor: trilinear per component then finite-strain
    /// reorientation; label: nearest neighbour.
    #[arg(long = "type", value_enum)]
    pub kind: VolumeType,
    #[arg(long)]
    pub lenient_folds: bool,
}

#[derive(Debug, Args)]
pub struct ExpArgs {
    #[arg(long, value_name = "PATH")]
    pub velocity: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub steps: u32,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct JacobianArgs {
    #[arg(long, value_name = "PATH")]
    pub field: PathBuf,
    /// Determinant map.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FaArgs {
    #[arg(long, value_name = "PATH")]
    pub tensor: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Blobs,
    Tracts,
    OrientationContrast,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long, value_enum)]
    pub kind: KindArg,
    /// Voxels per axis.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 1.5)]
    pub spacing_mm: f64,
    /// Gaussian noise on the scalar channel.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Writes PREFIX_t2w.nii.gz, PREFIX_dti.nii.gz and PREFIX_labels.nii.gz.
    #[arg(long, value_name = "PREFIX")]
    pub out_prefix: String,
    /// Also write a moving copy warped by a random ground-truth deformation
    /// of this maximum displacement (voxels): PREFIX_moving_{t2w,dti,labels},
    /// PREFIX_velocity_true, PREFIX_phi_true and PREFIX_phi_recovery.
    #[arg(long, value_name = "VOXELS")]
    pub pair_displacement: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum MetricsCommand {
    /// Per-label Dice between two label volumes.
    Dice {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Labels to score (default: every non-zero label in either volume).
        #[arg(long, value_delimiter = ',')]
        labels: Option<Vec<u16>>,
        #[command(flatten)]
        out: ReportOut,
    },
    /// Sum of squared FA differences between two tensor volumes.
    FaSsd {
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        #[command(flatten)]
        out: ReportOut,
    },
    /// Negated global NCC between two scalar volumes.
    Ncc {
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        #[command(flatten)]
        out: ReportOut,
    },
    /// Euclidean distance squared between two tensor volumes.
    Eds {
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        #[command(flatten)]
        out: ReportOut,
    },
    /// Jacobian and displacement statistics of a displacement field.
    Defstats {
        #[arg(long)]
        field: PathBuf,
        #[command(flatten)]
        out: ReportOut,
    },
    /// Median endpoint error between two displacement fields.
    Epe {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Voxels excluded next to each face.
        #[arg(long, default_value_t = 4)]
        margin: usize,
        #[command(flatten)]
        out: ReportOut,
    },
}

#[derive(Debug, Args)]
pub struct ReportOut {
    /// Write the report here instead of stdout.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}
