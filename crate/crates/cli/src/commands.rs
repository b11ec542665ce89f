//! Command bodies. Each resolves its options (flag, then config file, then
//! default), does the work, and writes its outputs plus a JSON report that
//! embeds the resolved options and seed.

use std::path::{Path, PathBuf};

use morphreg_core::erf::{center_tap, erf_probe, support_fraction, ConvRef, Network};
use morphreg_core::fields::{bspline_to_dense, compose, scaling_and_squaring, DEFAULT_SQUARING_STEPS};
use morphreg_core::io::{field_write, labels_read, labels_write, volume_read, volume_write};
use morphreg_core::losses::{sample_posterior, GaussianPosterior, LossWeights, Regularizer, Similarity};
use morphreg_core::phantom::{gaussian_smooth, make_phantom, PhantomKind};
use morphreg_core::register::{
    affine_register, affine_to_field, deform_register, AffineConfig, AffineOutcome, DeformKind, DeformParam,
    OptimConfig, RegistrationOutcome, RegistrationReport,
};
use morphreg_core::selftest::{self, Mutation};
use morphreg_core::swin::{SwinNet, SwinNetConfig};
use morphreg_core::uncertainty::{
    calibrated_error, mc_collect, predictive_variance, uce, DEFAULT_BINS, DEFAULT_SAMPLES,
};
use morphreg_core::warp::{warp_labels_with, warp_volume, InterpKernel};
use morphreg_core::{Dims, DisplacementField, LabelStack, Rng, VelocityField, Volume};
use serde::Serialize;

use crate::config::*;
use crate::CliError;

/// Relative threshold of the receptive-field support fraction.
const SUPPORT_THRESHOLD: f64 = 1e-8;

fn required<T>(v: Option<T>, name: &str) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::Usage(format!("--{name} is required (flag or config key)")))
}

fn out_dir(out: Option<PathBuf>) -> Result<PathBuf, CliError> {
    let dir = required(out, "out")?;
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn dims_of(e: [usize; 3]) -> Result<Dims, CliError> {
    if e.contains(&0) {
        return Err(CliError::Usage(format!("extents must be positive, got {e:?}")));
    }
    Ok(Dims::new(e[0], e[1], e[2]))
}

/// Voxels with label value at least one half, per channel.
fn label_counts(s: &LabelStack) -> Vec<usize> {
    s.channels().iter().map(|c| c.data().iter().filter(|&&v| v >= 0.5).count()).collect()
}

#[derive(Serialize)]
struct PhantomConfig {
    phantom: PhantomKind,
    dims: [usize; 3],
    seed: u64,
}

#[derive(Serialize)]
struct PhantomManifest {
    command: &'static str,
    config: PhantomConfig,
    image: PathBuf,
    labels: Vec<PathBuf>,
    label_voxels: Vec<usize>,
}

pub fn phantom(flags: PhantomOpts, config: Option<&Path>) -> Result<(), CliError> {
    let o = flags.merge(load(config)?);
    let dims = o.dims.map_or([24; 3], Extent::get);
    let radius = o.radius.unwrap_or(6.0);
    let kind = match required(o.kind, "kind")? {
        Shape::Sphere => PhantomKind::Sphere { radius },
        Shape::Ellipsoid => PhantomKind::Ellipsoid { semi_axes: o.semi_axes.map_or([8.0, 6.0, 4.5], Extent::get) },
        Shape::TwoBlob => PhantomKind::TwoBlob { radius, separation: o.separation.unwrap_or(10.0) },
    };
    let seed = o.seed.unwrap_or(0);
    let dir = out_dir(o.out)?;
    let (image, labels) = make_phantom(&kind, dims_of(dims)?, &mut Rng::new(seed))?;
    volume_write(&image, dir.join("image"))?;
    let label_paths = labels_write(&labels, dir.join("image"))?;
    let counts = label_counts(&labels);
    let manifest = PhantomManifest {
        command: "phantom",
        config: PhantomConfig { phantom: kind, dims, seed },
        image: PathBuf::from("image.json"),
        labels: label_paths.iter().map(|p| PathBuf::from(p.file_name().unwrap_or_default())).collect(),
        label_voxels: counts.clone(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    println!("phantom {} voxels, label voxels {counts:?}", image.dims().len());
    Ok(())
}

/// Deformation model and optimizer settings resolved from [`DeformOpts`].
fn resolve_deform(o: &DeformOpts, seed: u64, default_iterations: usize) -> (DeformKind, OptimConfig) {
    let steps = o.steps.unwrap_or(DEFAULT_SQUARING_STEPS);
    let kind = match o.param.unwrap_or(ParamKind::Svf) {
        ParamKind::Dense => DeformKind::Dense,
        ParamKind::Svf => DeformKind::Svf { steps },
        ParamKind::BsplineSvf => DeformKind::BsplineSvf { spacing: o.spacing.unwrap_or(2), steps },
    };
    let (mut weights, similarity, regularizer) = match o.preset.unwrap_or(Preset::MseDiffusion) {
        Preset::MseDiffusion => (LossWeights::mse_diffusion(), Similarity::Mse, Regularizer::Diffusion),
        Preset::LnccBendingDice => (LossWeights::lncc_bending_dice(), Similarity::Lncc, Regularizer::Bending),
    };
    weights.lambda = o.lambda.unwrap_or(weights.lambda);
    weights.gamma = o.gamma.unwrap_or(weights.gamma);
    weights.lncc_window = o.window.unwrap_or(weights.lncc_window);
    let defaults = OptimConfig::default();
    let cfg = OptimConfig {
        iterations: o.iterations.unwrap_or(default_iterations),
        step: o.step.unwrap_or(defaults.step),
        similarity: match o.similarity {
            Some(SimilarityArg::Mse) => Similarity::Mse,
            Some(SimilarityArg::Lncc) => Similarity::Lncc,
            None => similarity,
        },
        regularizer: match o.regularizer {
            Some(RegularizerArg::Diffusion) => Regularizer::Diffusion,
            Some(RegularizerArg::Bending) => Regularizer::Bending,
            None => regularizer,
        },
        weights,
        seed,
        tolerance: o.tolerance.unwrap_or(defaults.tolerance),
        levels: o.levels.unwrap_or(defaults.levels),
    };
    (kind, cfg)
}

#[derive(Serialize)]
struct RegisterConfig {
    moving: PathBuf,
    fixed: PathBuf,
    moving_labels: Vec<PathBuf>,
    fixed_labels: Vec<PathBuf>,
    affine: Option<AffineConfig>,
    param: DeformKind,
    optim: OptimConfig,
    seed: u64,
    timed: bool,
}

#[derive(Serialize)]
struct RegisterReportFile {
    command: &'static str,
    config: RegisterConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    affine: Option<AffineOutcome>,
    registration: RegistrationReport,
}

struct Registered {
    outcome: RegistrationOutcome,
    affine: Option<AffineOutcome>,
    /// Full displacement from fixed to moving space, including the affine stage.
    total: DisplacementField,
}

/// Optional affine stage followed by the deformable stage.
fn register_pair(
    moving: &Volume,
    fixed: &Volume,
    labels: Option<(&LabelStack, &LabelStack)>,
    affine: Option<&AffineConfig>,
    kind: DeformKind,
    cfg: &OptimConfig,
    timed: bool,
) -> Result<Registered, CliError> {
    let dims = fixed.dims();
    let Some(acfg) = affine else {
        let outcome = deform_register(moving, fixed, labels, DeformParam::zeros(kind, dims)?, cfg, timed)?;
        let total = outcome.displacement.clone();
        return Ok(Registered { outcome, affine: None, total });
    };
    let aff = affine_register(moving, fixed, acfg)?;
    let ua = affine_to_field(&aff.params, dims)?;
    let pre = warp_volume(moving, &ua, InterpKernel::Trilinear)?.0;
    let pre_labels = match labels {
        Some((_, ml)) => Some(warp_labels_with(ml, &ua, InterpKernel::Nearest)?),
        None => None,
    };
    let labels = labels.map(|(fl, _)| (fl, pre_labels.as_ref().expect("labels present")));
    let mut outcome = deform_register(&pre, fixed, labels, DeformParam::zeros(kind, dims)?, cfg, timed)?;
    let total = compose(&ua, &outcome.displacement)?;
    outcome.warped = warp_volume(moving, &total, InterpKernel::Trilinear)?.0;
    Ok(Registered { outcome, affine: Some(aff), total })
}

fn read_labels(paths: &Option<Vec<PathBuf>>) -> Result<Option<LabelStack>, CliError> {
    match paths {
        Some(p) if !p.is_empty() => Ok(Some(labels_read(p)?)),
        _ => Ok(None),
    }
}

pub fn register(flags: RegisterOpts, config: Option<&Path>) -> Result<(), CliError> {
    let o = flags.merge(load(config)?);
    let moving_path = required(o.moving.clone(), "moving")?;
    let fixed_path = required(o.fixed.clone(), "fixed")?;
    let seed = o.seed.unwrap_or(0);
    let timed = o.timed.unwrap_or(false);
    let (kind, optim) = resolve_deform(&o.deform, seed, OptimConfig::default().iterations);
    let affine = o.affine.unwrap_or(false).then(|| AffineConfig {
        iterations: o.affine_iterations.unwrap_or(AffineConfig::default().iterations),
        ..AffineConfig::default()
    });
    let moving = volume_read(&moving_path)?;
    let fixed = volume_read(&fixed_path)?;
    let ml = read_labels(&o.moving_labels)?;
    let fl = read_labels(&o.fixed_labels)?;
    let labels = match (&fl, &ml) {
        (Some(f), Some(m)) => Some((f, m)),
        (None, None) => None,
        _ => return Err(CliError::Usage("--moving-labels and --fixed-labels go together".into())),
    };
    let dir = out_dir(o.out.clone())?;
    let reg = register_pair(&moving, &fixed, labels, affine.as_ref(), kind, &optim, timed)?;
    volume_write(&reg.outcome.warped, dir.join("warped"))?;
    field_write(&reg.total, dir.join("displacement"))?;
    if let Some(m) = &ml {
        let warped = warp_labels_with(m, &reg.total, InterpKernel::Nearest)?;
        labels_write(&warped, dir.join("warped"))?;
    }
    let r = &reg.outcome.report;
    println!(
        "final loss {:.6e}, dice {:?}, folded fraction {:.3e}, ssim {:.4}",
        r.final_loss, r.dice, r.folded_fraction, r.ssim
    );
    let report = RegisterReportFile {
        command: "register",
        config: RegisterConfig {
            moving: moving_path,
            fixed: fixed_path,
            moving_labels: o.moving_labels.unwrap_or_default(),
            fixed_labels: o.fixed_labels.unwrap_or_default(),
            affine,
            param: kind,
            optim,
            seed,
            timed,
        },
        affine: reg.affine,
        registration: reg.outcome.report,
    };
    write_json(&dir.join("report.json"), &report)
}

#[derive(Serialize)]
struct UncertaintyConfig {
    moving: PathBuf,
    fixed: PathBuf,
    samples: usize,
    bins: usize,
    sampler: Sampler,
    sigma: f64,
    dropout: f64,
    init_scale: f64,
    param: DeformKind,
    optim: OptimConfig,
    seed: u64,
}

#[derive(Serialize)]
struct UncertaintyReport {
    command: &'static str,
    config: UncertaintyConfig,
    registration: RegistrationReport,
    uce_variance: f64,
    uce_calibrated: f64,
    mean_variance: f64,
    mean_calibrated_error: f64,
}

/// Velocity (or, for the dense model, displacement) that a perturbation
/// sample is drawn around.
fn perturbation_base(param: &DeformParam, dims: Dims) -> Result<(DisplacementField, Option<u32>), CliError> {
    Ok(match param {
        DeformParam::Dense(u) => (u.clone(), None),
        DeformParam::Svf { velocity, steps } => (velocity.field().clone(), Some(*steps)),
        DeformParam::BsplineSvf { lattice, steps } => (bspline_to_dense(lattice, dims)?, Some(*steps)),
    })
}

pub fn uncertainty(flags: UncertaintyOpts, config: Option<&Path>) -> Result<(), CliError> {
    let o = flags.merge(load(config)?);
    let moving_path = required(o.moving.clone(), "moving")?;
    let fixed_path = required(o.fixed.clone(), "fixed")?;
    let seed = o.seed.unwrap_or(0);
    let (kind, optim) = resolve_deform(&o.deform, seed, 200);
    let cfg = UncertaintyConfig {
        moving: moving_path,
        fixed: fixed_path,
        samples: o.samples.unwrap_or(DEFAULT_SAMPLES),
        bins: o.bins.unwrap_or(DEFAULT_BINS),
        sampler: o.sampler.unwrap_or(Sampler::Perturbation),
        sigma: o.sigma.unwrap_or(0.5),
        dropout: o.dropout.unwrap_or(0.3),
        init_scale: o.init_scale.unwrap_or(0.5),
        param: kind,
        optim,
        seed,
    };
    if cfg.samples < 2 {
        return Err(CliError::Usage("--samples must be at least 2".into()));
    }
    if !(cfg.sigma > 0.0 && cfg.sigma.is_finite()) {
        return Err(CliError::Usage("--sigma must be positive".into()));
    }
    let moving = volume_read(&cfg.moving)?;
    let fixed = volume_read(&cfg.fixed)?;
    let dims = fixed.dims();
    let dir = out_dir(o.out)?;
    let reg = register_pair(&moving, &fixed, None, None, kind, &optim, false)?.outcome;
    let mut rng = Rng::new(seed);
    let ensemble = match cfg.sampler {
        Sampler::Perturbation => {
            let (base, steps) = perturbation_base(&reg.param, dims)?;
            let logvar = DisplacementField::from_fn(dims, |_| [(cfg.sigma * cfg.sigma).ln(); 3]);
            let post = GaussianPosterior::new(base, logvar)?;
            mc_collect(
                |_, r| {
                    let (sample, _) = sample_posterior(&post, r);
                    let u = match steps {
                        Some(t) => scaling_and_squaring(&VelocityField::from(sample), t)?,
                        None => sample,
                    };
                    Ok(warp_volume(&moving, &u, InterpKernel::Trilinear)?.0)
                },
                cfg.samples,
                &mut rng,
            )?
        }
        Sampler::Dropout => {
            let net = SwinNet::new(SwinNetConfig { init_scale: cfg.init_scale, seed, ..SwinNetConfig::default() })?;
            mc_collect(
                |_, r| {
                    let drop = net.sample_dropout(dims, cfg.dropout, r)?;
                    let (du, _) = net.forward(&reg.warped, &fixed, Some(&drop))?;
                    let u = compose(&reg.displacement, &du)?;
                    Ok(warp_volume(&moving, &u, InterpKernel::Trilinear)?.0)
                },
                cfg.samples,
                &mut rng,
            )?
        }
    };
    let variance = predictive_variance(&ensemble);
    let error = calibrated_error(&ensemble, &fixed)?;
    let var_table = uce(&variance, &error, cfg.bins)?;
    let err_table = uce(&error, &error, cfg.bins)?;
    volume_write(ensemble.mean(), dir.join("mean"))?;
    volume_write(&variance, dir.join("variance"))?;
    volume_write(&error, dir.join("calibrated_error"))?;
    write_text(&dir.join("calibration_variance.csv"), &var_table.to_csv())?;
    write_text(&dir.join("calibration_error.csv"), &err_table.to_csv())?;
    let n = dims.len() as f64;
    println!("uce variance {:.6e}, uce calibrated {:.6e}", var_table.uce, err_table.uce);
    let report = UncertaintyReport {
        command: "uncertainty",
        config: cfg,
        registration: reg.report,
        uce_variance: var_table.uce,
        uce_calibrated: err_table.uce,
        mean_variance: variance.sum() / n,
        mean_calibrated_error: error.sum() / n,
    };
    write_json(&dir.join("report.json"), &report)
}

#[derive(Serialize)]
struct ErfConfig {
    net: NetKind,
    dims: [usize; 3],
    moving: Option<PathBuf>,
    fixed: Option<PathBuf>,
    tap: [usize; 3],
    swin: SwinNetConfig,
    hidden: usize,
    weights: Option<PathBuf>,
    zero_weights: bool,
    seed: u64,
}

#[derive(Serialize)]
struct ErfSummary {
    command: &'static str,
    config: ErfConfig,
    support_threshold: f64,
    support_fraction: f64,
    max_influence: f64,
    total_influence: f64,
}

/// Smooth random image in `[0, 1]`-ish range for probing.
fn smooth_input(dims: Dims, rng: &mut Rng) -> Volume {
    let raw = rng.uniform_vec(dims.len(), 0.0, 1.0);
    Volume::new(dims, gaussian_smooth(&raw, dims, 1.0)).expect("smoothed noise is finite")
}

pub fn erf(flags: ErfOpts, config: Option<&Path>) -> Result<(), CliError> {
    let o = flags.merge(load(config)?);
    let seed = o.seed.unwrap_or(0);
    let mut rng = Rng::new(seed).fork(1);
    let (moving, fixed) = match (&o.moving, &o.fixed) {
        (Some(m), Some(f)) => (volume_read(m)?, volume_read(f)?),
        (None, None) => {
            let dims = dims_of(o.dims.map_or([8; 3], Extent::get))?;
            let m = smooth_input(dims, &mut rng);
            (m, smooth_input(dims, &mut rng))
        }
        _ => return Err(CliError::Usage("--moving and --fixed go together".into())),
    };
    let dims = fixed.dims();
    let tap = o.tap.map_or_else(|| center_tap(dims), Extent::get);
    if (0..3).any(|d| tap[d] >= dims[d]) {
        return Err(CliError::Usage(format!("tap {tap:?} lies outside {:?}", [dims[0], dims[1], dims[2]])));
    }
    let swin = SwinNetConfig {
        patch: o.patch.unwrap_or(2),
        channels: o.channels.unwrap_or(8),
        heads: o.heads.unwrap_or(2),
        window: o.window.map_or([2; 3], Extent::get),
        pairs: o.pairs.unwrap_or(1),
        seed,
        init_scale: o.init_scale.unwrap_or(0.5),
    };
    let zero = o.zero_weights.unwrap_or(false);
    let kind = o.net.unwrap_or(NetKind::Swin);
    let hidden = o.hidden.unwrap_or(4);
    let net: Box<dyn Network> = match kind {
        NetKind::Swin => {
            let net = match &o.weights {
                Some(stem) => SwinNet::load(stem)?,
                None => SwinNet::new(swin)?,
            };
            Box::new(if zero { net.zeros_like() } else { net })
        }
        NetKind::Conv => {
            if o.weights.is_some() {
                return Err(CliError::Usage("--weights applies to the swin network only".into()));
            }
            let mut net = ConvRef::new(hidden, seed)?;
            if zero {
                for w in [&mut net.w1, &mut net.b1, &mut net.w2, &mut net.b2] {
                    w.iter_mut().for_each(|x| *x = 0.0);
                }
            }
            Box::new(net)
        }
    };
    let map = erf_probe(net.as_ref(), &moving, &fixed, tap)?;
    let dir = out_dir(o.out)?;
    volume_write(&map, dir.join("erf"))?;
    let support = support_fraction(&map, SUPPORT_THRESHOLD);
    println!("support fraction {support:.6}");
    let summary = ErfSummary {
        command: "erf",
        config: ErfConfig {
            net: kind,
            dims: [dims[0], dims[1], dims[2]],
            moving: o.moving,
            fixed: o.fixed,
            tap,
            swin,
            hidden,
            weights: o.weights,
            zero_weights: zero,
            seed,
        },
        support_threshold: SUPPORT_THRESHOLD,
        support_fraction: support,
        max_influence: map.min_max().1,
        total_influence: map.sum(),
    };
    write_json(&dir.join("summary.json"), &summary)
}

pub fn selftest(flags: SelftestOpts, config: Option<&Path>) -> Result<(), CliError> {
    let o = flags.merge(load(config)?);
    let seed = o.seed.unwrap_or(0);
    let mutation = match o.mutate.unwrap_or(MutationArg::None) {
        MutationArg::None => Mutation::None,
        MutationArg::FlipDiffusionGradient => Mutation::FlipDiffusionGradient,
    };
    let report = selftest::run(seed, mutation)?;
    print!("{}", report.to_table());
    if let Some(path) = &o.out {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::Data(format!("cannot create {}: {e}", parent.display())))?;
        }
        write_json(path, &report)?;
    }
    let failed = report.failures().count();
    if failed > 0 {
        return Err(CliError::Numerical(format!("{failed} self-test checks failed")));
    }
    Ok(())
}
