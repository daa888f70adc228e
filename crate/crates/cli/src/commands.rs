use std::fs;
use std::path::Path;

use dtreg::eval::{median_endpoint_error, KeyValueReport};
use dtreg::phantom::present_labels;
use dtreg::prelude::*;
use dtreg::register::{GradientMethod, TraceEntry};
use dtreg::volume::{load_field, load_labels, load_scalar, load_tensor};

use crate::args::{
    Cli, Command, ExpArgs, FaArgs, GradientArg, JacobianArgs, KindArg, MetricsCommand, PhantomArgs,
    RegisterArgs, ReportOut, VolumeType, WarpArgs,
};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Register(a) => register_cmd(cli, a),
        Command::Warp(a) => warp_cmd(a),
        Command::Exp(a) => exp_cmd(a),
        Command::Jacobian(a) => jacobian_cmd(a),
        Command::Fa(a) => fa_cmd(a),
        Command::Phantom(a) => phantom_cmd(a),
        Command::Metrics(m) => metrics_cmd(m),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn emit(report: &KeyValueReport, out: &ReportOut) -> Result<()> {
    match &out.out {
        Some(p) => write_text(p, &report.to_string()),
        None => {
            print!("{report}");
            Ok(())
        }
    }
}

fn policy(lenient: bool) -> FoldPolicy {
    if lenient {
        FoldPolicy::Lenient
    } else {
        FoldPolicy::Strict
    }
}

fn config_from(a: &RegisterArgs) -> Result<RegistrationConfig> {
    let cfg = RegistrationConfig {
        weights: LossWeights::new(a.alpha, a.beta, a.lambda)?,
        steps: a.steps,
        sigma_mm: a.sigma_mm,
        levels: a.levels.clone(),
        iterations: a.iterations,
        initial_step: a.initial_step,
        max_step: a.max_step,
        fd_epsilon: a.fd_epsilon,
        fold_policy: policy(a.lenient_folds),
        gradient: match a.gradient {
            GradientArg::Adjoint => GradientMethod::Adjoint,
            GradientArg::Fd => GradientMethod::FiniteDifference,
        },
        seed: a.seed,
        ..RegistrationConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn trace_line(e: &TraceEntry) -> String {
    format!(
        "level={} iteration={} step={} total={} eds={} ncc={} be={}",
        e.level, e.iteration, e.step, e.loss.total, e.loss.eds, e.loss.ncc, e.loss.be
    )
}

/// Run manifest: every effective setting with where its default comes from.
fn manifest(cli: &Cli, cfg: &RegistrationConfig, dti: bool) -> KeyValueReport {
    let d = RegistrationConfig::default();
    let mut m = KeyValueReport::default();
    m.push("version", env!("CARGO_PKG_VERSION"));
    m.push("command", "register");
    m.push("args", std::env::args().skip(1).collect::<Vec<_>>().join(" "));
    let mut setting = |key: &str, value: String, default: String, origin: &str| {
        let source = if value == default { origin } else { "user" };
        m.push(key, &value);
        m.push(format!("{key}.source"), source);
    };
    let w = &cfg.weights;
    setting("alpha", w.alpha.to_string(), d.weights.alpha.to_string(), "published");
    setting("beta", w.beta.to_string(), d.weights.beta.to_string(), "published");
    setting("lambda", w.lambda.to_string(), d.weights.lambda.to_string(), "published");
    setting("sigma_mm", cfg.sigma_mm.to_string(), d.sigma_mm.to_string(), "published");
    setting("steps", cfg.steps.to_string(), d.steps.to_string(), "published");
    let levels = |l: &[usize]| l.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    setting("levels", levels(&cfg.levels), levels(&d.levels), "artifact-default");
    setting("iterations", cfg.iterations.to_string(), d.iterations.to_string(), "artifact-default");
    setting("initial_step", cfg.initial_step.to_string(), d.initial_step.to_string(), "artifact-default");
    setting("max_step", cfg.max_step.to_string(), d.max_step.to_string(), "artifact-default");
    setting("step_growth", cfg.step_growth.to_string(), d.step_growth.to_string(), "artifact-default");
    setting("max_halvings", cfg.max_halvings.to_string(), d.max_halvings.to_string(), "artifact-default");
    setting("fd_epsilon", cfg.fd_epsilon.to_string(), d.fd_epsilon.to_string(), "artifact-default");
    let gradient = |g: GradientMethod| match g {
        GradientMethod::Adjoint => "adjoint".to_string(),
        GradientMethod::FiniteDifference => "fd".to_string(),
    };
    setting("gradient", gradient(cfg.gradient), gradient(d.gradient), "artifact-default");
    let fold = |p: FoldPolicy| format!("{p:?}").to_lowercase();
    setting("fold_policy", fold(cfg.fold_policy), fold(d.fold_policy), "artifact-default");
    m.push("mode", if dti { "dti" } else { "t2w-only" });
    m.push("seed", cfg.seed);
    m.push(
        "threads",
        cli.threads.map_or_else(|| format!("auto({})", rayon::current_num_threads()), |n| n.to_string()),
    );
    m.push("deterministic", cli.deterministic);
    m
}

fn register_cmd(cli: &Cli, a: &RegisterArgs) -> Result<()> {
    let cfg = config_from(a)?;
    let fixed = load_scalar(&a.fixed_t2w)?;
    let moving = load_scalar(&a.moving_t2w)?;
    let tensors = match (&a.fixed_dti, &a.moving_dti) {
        (Some(f), Some(m)) => Some((load_tensor(f)?, load_tensor(m)?)),
        _ => None,
    };
    let mut inputs = RegistrationInputs::new(&fixed, &moving)?;
    if let Some((f, m)) = &tensors {
        inputs = inputs.with_dti(f, m)?;
    }
    fs::create_dir_all(&a.out_dir).map_err(|source| Error::Io {
        path: a.out_dir.clone(),
        source,
    })?;
    let out = |name: &str| a.out_dir.join(name);
    write_text(&out("manifest.txt"), &manifest(cli, &cfg, tensors.is_some()).to_string())?;

    let res = register(&inputs, &cfg)?;
    save_volume(&res.phi, out("phi.nii.gz"))?;
    save_volume(&res.velocity, out("velocity.nii.gz"))?;
    save_volume(&res.warped_t2w, out("warped_t2w.nii.gz"))?;
    if let Some(d) = &res.warped_dti {
        save_volume(d, out("warped_dti.nii.gz"))?;
    }
    let trace: String = res.trace.iter().map(|e| trace_line(e) + "\n").collect();
    write_text(&out("loss_trace.txt"), &trace)?;

    let stats = deformation_stats(&res.phi);
    let mut r = KeyValueReport::default();
    r.push("initial_loss", res.initial().total);
    r.push("final_loss", res.final_loss().total);
    r.push("accepted_steps", res.trace.len() - 1);
    r.push("min_det_j", stats.min_det);
    r.push("folds", stats.folds);
    r.push("max_displacement", stats.max_displacement);
    r.push("reorient_identity_substituted", res.reorient.total());
    print!("{r}");
    Ok(())
}

fn warp_cmd(a: &WarpArgs) -> Result<()> {
    let phi = load_field(&a.field, FieldKind::Displacement)?;
    match a.kind {
        VolumeType::Scalar => save_volume(&warp_scalar(&load_scalar(&a.input)?, &phi)?, &a.out),
        VolumeType::Label => save_volume(&warp_labels_nearest(&load_labels(&a.input)?, &phi)?, &a.out),
        VolumeType::Tensor => {
            let moved = warp_tensor_components(&load_tensor(&a.input)?, &phi)?;
            let (out, stats) = reorient_field(&moved, &phi, policy(a.lenient_folds))?;
            if stats.total() > 0 {
                println!("folded={}\nsingular={}", stats.folded, stats.singular);
            }
            save_volume(&out, &a.out)
        }
    }
}

fn exp_cmd(a: &ExpArgs) -> Result<()> {
    let v = load_volume(&a.velocity, VolumeKind::Vector)?.into_vector()?;
    if v.kind() != FieldKind::Velocity {
        log::warn!("{} is not tagged as a velocity; treating it as one", a.velocity.display());
    }
    let phi = exp_svf(&v.retagged(FieldKind::Velocity), a.steps)?;
    save_volume(&phi, &a.out)
}

fn jacobian_cmd(a: &JacobianArgs) -> Result<()> {
    let phi = load_field(&a.field, FieldKind::Displacement)?;
    save_volume(&jacobian_determinant(&jacobian(&phi)), &a.out)
}

fn fa_cmd(a: &FaArgs) -> Result<()> {
    save_volume(&fa_map(&load_tensor(&a.tensor)?), &a.out)
}

fn phantom_cmd(a: &PhantomArgs) -> Result<()> {
    let grid = GridSpec::new(a.size, a.size, a.size, a.spacing_mm)?;
    let kind = match a.kind {
        KindArg::Blobs => PhantomKind::Blobs,
        KindArg::Tracts => PhantomKind::Tracts,
        KindArg::OrientationContrast => PhantomKind::OrientationContrast,
    };
    let mut spec = PhantomSpec::new(grid, kind, a.seed);
    spec.noise = a.noise;
    let ph = make_phantom(&spec)?;
    let path = |name: &str| format!("{}_{name}.nii.gz", a.out_prefix);
    if let Some(parent) = Path::new(&path("t2w")).parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| Error::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    save_volume(&ph.t2w, path("t2w"))?;
    save_volume(&ph.dti, path("dti"))?;
    save_volume(&ph.labels, path("labels"))?;

    let Some(max_disp) = a.pair_displacement else {
        return Ok(());
    };
    let v = make_ground_truth_svf(grid, max_disp, a.seed.wrapping_add(1))?;
    let pair = make_registration_pair(&ph, &v, a.noise, a.seed.wrapping_add(2))?;
    save_volume(&pair.moving.t2w, path("moving_t2w"))?;
    save_volume(&pair.moving.dti, path("moving_dti"))?;
    save_volume(&pair.moving.labels, path("moving_labels"))?;
    save_volume(&v, path("velocity_true"))?;
    save_volume(&pair.phi_true, path("phi_true"))?;
    save_volume(&pair.phi_recovery, path("phi_recovery"))?;
    let stats = deformation_stats(&pair.phi_true);
    let mut r = KeyValueReport::default();
    r.push("max_displacement", stats.max_displacement);
    r.push("min_det_j", stats.min_det);
    r.push("folds", stats.folds);
    print!("{r}");
    Ok(())
}

fn metrics_cmd(m: &MetricsCommand) -> Result<()> {
    match m {
        MetricsCommand::Dice { a, b, labels, out } => {
            let (a, b) = (load_labels(a)?, load_labels(b)?);
            let labels = match labels {
                Some(l) => l.clone(),
                None => {
                    let mut l = present_labels(&a);
                    l.extend(present_labels(&b));
                    l.sort_unstable();
                    l.dedup();
                    l
                }
            };
            emit(&dice(&a, &b, &labels)?.to_report(), out)
        }
        MetricsCommand::FaSsd { fixed, moving, out } => {
            let v = fa_ssd(&load_tensor(fixed)?, &load_tensor(moving)?)?;
            emit(&single("fa-ssd", "fa_ssd", v), out)
        }
        MetricsCommand::Ncc { fixed, moving, out } => {
            let v = ncc(&load_scalar(fixed)?, &load_scalar(moving)?)?;
            emit(&single("ncc", "ncc", v), out)
        }
        MetricsCommand::Eds { fixed, moving, out } => {
            let v = eds(&load_tensor(fixed)?, &load_tensor(moving)?)?;
            emit(&single("eds", "eds", v), out)
        }
        MetricsCommand::Defstats { field, out } => {
            let phi = load_field(field, FieldKind::Displacement)?;
            emit(&deformation_stats(&phi).to_report(), out)
        }
        MetricsCommand::Epe { a, b, margin, out } => {
            let (a, b) = (load_field(a, FieldKind::Displacement)?, load_field(b, FieldKind::Displacement)?);
            emit(&single("epe", "median_epe", median_endpoint_error(&a, &b, *margin)?), out)
        }
    }
}

fn single(metric: &str, key: &str, value: f64) -> KeyValueReport {
    let mut r = KeyValueReport::default();
    r.push("metric", metric);
    r.push(key, value);
    r
}
