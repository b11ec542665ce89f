//! Iterative registration: affine pre-alignment and deformable refinement
//! under dense, stationary-velocity or B-spline velocity parameterizations.

use std::time::Instant;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{
    bspline_to_dense, bspline_vjp, jacobian_report, scaling_and_squaring_taped, svf_vjp, BsplineLattice, SvfTape,
    DEFAULT_SQUARING_STEPS,
};
use crate::losses::{composite_loss, dice_score, mse, ssim, LossWeights, Regularizer, Similarity, SSIM_WINDOW};
use crate::volume::{Dims, DisplacementField, LabelStack, VelocityField, Volume};
use crate::warp::{warp_labels_with, warp_volume, warp_vjp, InterpKernel, Stencil};

/// Twelve affine parameters: rotations in radians, translations in voxels,
/// scales and shears.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineParams {
    pub rx: f64,
    pub ry: f64,
    pub rz: f64,
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub sx: f64,
    pub sy: f64,
    pub sz: f64,
    pub hxy: f64,
    pub hxz: f64,
    pub hyz: f64,
}

impl Default for AffineParams {
    fn default() -> Self {
        Self::identity()
    }
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn d_rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn d_rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn d_rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

fn unit_matrix(r: usize, c: usize) -> Matrix3<f64> {
    let mut m = Matrix3::zeros();
    m[(r, c)] = 1.0;
    m
}

impl AffineParams {
    pub const NAMES: [&'static str; 12] = [
        "rx", "ry", "rz", "tx", "ty", "tz", "sx", "sy", "sz", "hxy", "hxz", "hyz",
    ];

    pub fn identity() -> Self {
        Self::from_array([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0])
    }

    pub fn translation(t: [f64; 3]) -> Self {
        AffineParams {
            tx: t[0],
            ty: t[1],
            tz: t[2],
            ..Self::identity()
        }
    }

    pub fn to_array(&self) -> [f64; 12] {
        [
            self.rx, self.ry, self.rz, self.tx, self.ty, self.tz, self.sx, self.sy, self.sz, self.hxy, self.hxz,
            self.hyz,
        ]
    }

    pub fn from_array(a: [f64; 12]) -> Self {
        AffineParams {
            rx: a[0],
            ry: a[1],
            rz: a[2],
            tx: a[3],
            ty: a[4],
            tz: a[5],
            sx: a[6],
            sy: a[7],
            sz: a[8],
            hxy: a[9],
            hxz: a[10],
            hyz: a[11],
        }
    }

    fn shear(&self) -> Matrix3<f64> {
        Matrix3::new(1.0, self.hxy, self.hxz, 0.0, 1.0, self.hyz, 0.0, 0.0, 1.0)
    }

    fn scale(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::new(self.sx, self.sy, self.sz))
    }

    /// Linear part `R_z R_y R_x · Shear · Scale`.
    pub fn matrix(&self) -> Matrix3<f64> {
        rot_z(self.rz) * rot_y(self.ry) * rot_x(self.rx) * self.shear() * self.scale()
    }

    /// Derivatives of [`Self::matrix`] with respect to every parameter
    /// (zero for translations).
    fn matrix_partials(&self) -> [Matrix3<f64>; 12] {
        let (rx, ry, rz) = (rot_x(self.rx), rot_y(self.ry), rot_z(self.rz));
        let (h, s) = (self.shear(), self.scale());
        let r = rz * ry * rx;
        let zero = Matrix3::zeros();
        [
            rz * ry * d_rot_x(self.rx) * h * s,
            rz * d_rot_y(self.ry) * rx * h * s,
            d_rot_z(self.rz) * ry * rx * h * s,
            zero,
            zero,
            zero,
            r * h * unit_matrix(0, 0),
            r * h * unit_matrix(1, 1),
            r * h * unit_matrix(2, 2),
            r * unit_matrix(0, 1) * s,
            r * unit_matrix(0, 2) * s,
            r * unit_matrix(1, 2) * s,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.to_array();
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("affine parameters".into()));
        }
        if [self.sx, self.sy, self.sz].iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "affine scales must be positive, got ({}, {}, {})",
                self.sx, self.sy, self.sz
            )));
        }
        Ok(())
    }
}

fn center(dims: Dims) -> Vector3<f64> {
    Vector3::new(
        (dims[0] as f64 - 1.0) / 2.0,
        (dims[1] as f64 - 1.0) / 2.0,
        (dims[2] as f64 - 1.0) / 2.0,
    )
}

fn point(p: [usize; 3]) -> Vector3<f64> {
    Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64)
}

/// Displacement `u(p) = (I - A)(p - c) + t`, so the sampling map
/// `p - u(p) = A (p - c) + c - t` resamples the moving image through `A`
/// about the volume center `c` and shifts its content by `t`.
pub fn affine_to_field(a: &AffineParams, dims: Dims) -> Result<DisplacementField> {
    a.validate()?;
    let m = a.matrix();
    let c = center(dims);
    let t = Vector3::new(a.tx, a.ty, a.tz);
    Ok(DisplacementField::from_fn(dims, |p| {
        let q = point(p) - c;
        let u = q - m * q + t;
        [u[0], u[1], u[2]]
    }))
}

/// Chain rule from a displacement gradient to the twelve parameters.
pub fn affine_vjp(a: &AffineParams, grad_u: &DisplacementField) -> [f64; 12] {
    let dims = grad_u.dims();
    let c = center(dims);
    let partials = a.matrix_partials();
    // sum_p g(p) (p - c)^T, then contract with each partial.
    let mut outer = Matrix3::zeros();
    let mut gsum = Vector3::zeros();
    for (idx, p) in dims.iter().enumerate() {
        let g = Vector3::from(grad_u.vector(idx));
        outer += g * (point(p) - c).transpose();
        gsum += g;
    }
    let mut out = [0.0; 12];
    for (k, d) in partials.iter().enumerate() {
        out[k] = -d.component_mul(&outer).sum();
    }
    out[3] = gsum[0];
    out[4] = gsum[1];
    out[5] = gsum[2];
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineConfig {
    pub iterations: usize,
    /// Initial step; adapted up on success and halved on failure.
    pub step: f64,
    /// Stop once the adapted step falls below this value.
    pub min_step: f64,
}

impl Default for AffineConfig {
    fn default() -> Self {
        AffineConfig {
            iterations: 200,
            step: 1.0,
            min_step: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineOutcome {
    pub params: AffineParams,
    /// Best-seen MSE after each iteration.
    pub loss_trace: Vec<f64>,
}

fn affine_loss(moving: &Volume, fixed: &Volume, a: &AffineParams) -> Result<(f64, [f64; 12])> {
    let u = affine_to_field(a, fixed.dims())?;
    let (warped, tape) = warp_volume(moving, &u, InterpKernel::Trilinear)?;
    let (loss, g) = mse(&warped, fixed)?;
    if !loss.is_finite() {
        return Err(Error::Numerical("affine loss is not finite".into()));
    }
    let (_, gu) = warp_vjp(&tape, moving, &g)?;
    Ok((loss, affine_vjp(a, &gu)))
}

/// Gradient descent on the MSE over the twelve affine parameters.
///
/// Gradients are multiplied by the voxel count, and those of the linear
/// parameters are further divided by the mean squared distance to the
/// center so all parameters move on a voxel scale. The step grows by 10%
/// after every improving iteration and halves (restarting from the best
/// parameters) otherwise. Returns the best parameters seen.
pub fn affine_register(moving: &Volume, fixed: &Volume, cfg: &AffineConfig) -> Result<AffineOutcome> {
    moving.dims().ensure_eq(&fixed.dims(), "affine register")?;
    if cfg.iterations == 0 || !(cfg.step > 0.0) {
        return Err(Error::InvalidArgument("affine register needs iterations >= 1 and step > 0".into()));
    }
    let dims = fixed.dims();
    let c = center(dims);
    let r2 = dims.iter().map(|p| (point(p) - c).norm_squared()).sum::<f64>() / dims.len() as f64;
    let precond: [f64; 12] = std::array::from_fn(|k| {
        let n = dims.len() as f64;
        if (3..6).contains(&k) {
            n
        } else {
            n / r2.max(1.0)
        }
    });

    let mut best = AffineParams::identity();
    let (mut best_loss, mut best_grad) = affine_loss(moving, fixed, &best)?;
    let mut step = cfg.step;
    let mut trace = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        if step < cfg.min_step {
            break;
        }
        let mut x = best.to_array();
        for k in 0..12 {
            x[k] -= step * precond[k] * best_grad[k];
        }
        for s in &mut x[6..9] {
            *s = s.max(0.05);
        }
        let cand = AffineParams::from_array(x);
        let (loss, grad) = affine_loss(moving, fixed, &cand)?;
        if loss < best_loss {
            best = cand;
            best_loss = loss;
            best_grad = grad;
            step *= 1.1;
        } else {
            step *= 0.5;
        }
        trace.push(best_loss);
    }
    Ok(AffineOutcome {
        params: best,
        loss_trace: trace,
    })
}

/// Deformation model being optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DeformKind {
    Dense,
    Svf { steps: u32 },
    BsplineSvf { spacing: usize, steps: u32 },
}

impl Default for DeformKind {
    fn default() -> Self {
        DeformKind::Svf {
            steps: DEFAULT_SQUARING_STEPS,
        }
    }
}

/// Parameters of a deformation model.
#[derive(Debug, Clone, PartialEq)]
pub enum DeformParam {
    Dense(DisplacementField),
    Svf { velocity: VelocityField, steps: u32 },
    BsplineSvf { lattice: BsplineLattice, steps: u32 },
}

enum ParamTape {
    Dense,
    Svf(SvfTape),
    Bspline { velocity: DisplacementField, svf: SvfTape },
}

impl DeformParam {
    /// Zero parameters of `kind` for an image of `dims`.
    pub fn zeros(kind: DeformKind, dims: Dims) -> Result<Self> {
        Ok(match kind {
            DeformKind::Dense => DeformParam::Dense(DisplacementField::zeros(dims)),
            DeformKind::Svf { steps } => DeformParam::Svf {
                velocity: VelocityField(DisplacementField::zeros(dims)),
                steps,
            },
            DeformKind::BsplineSvf { spacing, steps } => DeformParam::BsplineSvf {
                lattice: BsplineLattice::for_image(dims, [spacing; 3])?,
                steps,
            },
        })
    }

    pub fn kind(&self) -> DeformKind {
        match self {
            DeformParam::Dense(_) => DeformKind::Dense,
            DeformParam::Svf { steps, .. } => DeformKind::Svf { steps: *steps },
            DeformParam::BsplineSvf { lattice, steps } => DeformKind::BsplineSvf {
                spacing: lattice.spacing()[0],
                steps: *steps,
            },
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        match self {
            DeformParam::Dense(u) => u.to_flat(),
            DeformParam::Svf { velocity, .. } => velocity.0.to_flat(),
            DeformParam::BsplineSvf { lattice, .. } => lattice.to_flat(),
        }
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        match self {
            DeformParam::Dense(u) => *u = DisplacementField::from_flat(u.dims(), flat)?,
            DeformParam::Svf { velocity, .. } => velocity.0 = DisplacementField::from_flat(velocity.dims(), flat)?,
            DeformParam::BsplineSvf { lattice, .. } => lattice.set_flat(flat)?,
        }
        Ok(())
    }

    /// Displacement represented by the parameters on an image of `dims`.
    pub fn displacement(&self, dims: Dims) -> Result<DisplacementField> {
        Ok(self.forward(dims)?.0)
    }

    fn forward(&self, dims: Dims) -> Result<(DisplacementField, ParamTape)> {
        match self {
            DeformParam::Dense(u) => {
                dims.ensure_eq(&u.dims(), "dense parameter")?;
                Ok((u.clone(), ParamTape::Dense))
            }
            DeformParam::Svf { velocity, steps } => {
                dims.ensure_eq(&velocity.dims(), "velocity parameter")?;
                let (u, tape) = scaling_and_squaring_taped(velocity, *steps)?;
                Ok((u, ParamTape::Svf(tape)))
            }
            DeformParam::BsplineSvf { lattice, steps } => {
                let v = bspline_to_dense(lattice, dims)?;
                let (u, svf) = scaling_and_squaring_taped(&VelocityField(v.clone()), *steps)?;
                Ok((u, ParamTape::Bspline { velocity: v, svf }))
            }
        }
    }

    /// Flat parameter gradient for a displacement gradient.
    fn backward(&self, tape: &ParamTape, grad_u: &DisplacementField) -> Result<Vec<f64>> {
        match (self, tape) {
            (DeformParam::Dense(_), ParamTape::Dense) => Ok(grad_u.to_flat()),
            (DeformParam::Svf { steps, .. }, ParamTape::Svf(t)) => Ok(svf_vjp(t, *steps, grad_u)?.0.to_flat()),
            (DeformParam::BsplineSvf { lattice, steps }, ParamTape::Bspline { velocity, svf }) => {
                let gv = svf_vjp(svf, *steps, grad_u)?;
                debug_assert_eq!(velocity.dims(), gv.dims());
                Ok(bspline_vjp(lattice, &gv.0)?.to_flat())
            }
            _ => Err(Error::TapeMismatch("parameter kind changed between passes".into())),
        }
    }

    /// Parameters per vector component; gradients are scaled by this so the
    /// step size is expressed per voxel.
    fn component_len(&self) -> usize {
        self.to_flat().len() / 3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub iterations: usize,
    /// Gradient-descent step applied to the loss gradient scaled by the
    /// number of parameters per component.
    pub step: f64,
    pub similarity: Similarity,
    pub regularizer: Regularizer,
    pub weights: LossWeights,
    pub seed: u64,
    /// Stop when the best loss improved by less than this (relative) over
    /// the last 20 iterations; 0 disables early stopping.
    pub tolerance: f64,
    /// 1 for single resolution, 2 for coarse-to-fine.
    pub levels: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            iterations: 500,
            step: 0.02,
            similarity: Similarity::Mse,
            regularizer: Regularizer::Diffusion,
            weights: LossWeights::default(),
            seed: 0,
            tolerance: 0.0,
            levels: 1,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be >= 1".into()));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidArgument(format!("step must be positive, got {}", self.step)));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::InvalidArgument("tolerance must be >= 0".into()));
        }
        if !(1..=2).contains(&self.levels) {
            return Err(Error::InvalidArgument(format!("levels must be 1 or 2, got {}", self.levels)));
        }
        self.weights.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationReport {
    pub seed: u64,
    pub param: DeformKind,
    pub config: OptimConfig,
    /// Best-seen total loss after each full-resolution iteration.
    pub loss_trace: Vec<f64>,
    /// Loss of the iterate evaluated at each full-resolution iteration.
    pub raw_loss_trace: Vec<f64>,
    /// Best-seen loss trace of the coarse level; empty for a single level.
    pub coarse_loss_trace: Vec<f64>,
    pub final_loss: f64,
    /// Components of the loss at the returned parameters.
    pub final_similarity: f64,
    pub final_regularization: f64,
    pub final_segmentation: f64,
    /// Hard Dice per label channel after nearest-neighbour label warping.
    pub dice: Vec<f64>,
    pub folded_fraction: f64,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time_s: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RegistrationOutcome {
    pub param: DeformParam,
    pub displacement: DisplacementField,
    pub warped: Volume,
    pub report: RegistrationReport,
}

struct LevelResult {
    param: DeformParam,
    best: Vec<f64>,
    raw: Vec<f64>,
    best_loss: f64,
}

fn optimize_level(
    moving: &Volume,
    fixed: &Volume,
    labels: Option<(&LabelStack, &LabelStack)>,
    mut param: DeformParam,
    cfg: &OptimConfig,
    iterations: usize,
) -> Result<LevelResult> {
    let dims = fixed.dims();
    let scale = param.component_len() as f64;
    let mut best_param = param.clone();
    let mut best_loss = f64::INFINITY;
    let mut best = Vec::with_capacity(iterations);
    let mut raw = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let (u, tape) = param.forward(dims)?;
        let loss = composite_loss(fixed, moving, &u, labels, &cfg.weights, cfg.similarity, cfg.regularizer)?;
        if !loss.total.is_finite() || !loss.grad_u.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss at iteration {it}")));
        }
        raw.push(loss.total);
        if loss.total < best_loss {
            best_loss = loss.total;
            best_param = param.clone();
        }
        best.push(best_loss);
        if cfg.tolerance > 0.0 && it >= 20 {
            let past = best[it - 20];
            if past - best_loss <= cfg.tolerance * past.abs().max(1e-12) {
                break;
            }
        }
        if it + 1 == iterations {
            break;
        }
        let g = param.backward(&tape, &loss.grad_u)?;
        let mut x = param.to_flat();
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi -= cfg.step * scale * gi;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("parameters diverged at iteration {it}")));
        }
        param.set_flat(&x)?;
    }
    Ok(LevelResult {
        param: best_param,
        best,
        raw,
        best_loss,
    })
}

/// Halves each axis by averaging the (up to) eight fine voxels of every
/// coarse voxel.
pub fn downsample(v: &Volume) -> Volume {
    let dims = v.dims();
    let coarse = Dims([0, 1, 2].map(|d| dims[d].div_ceil(2)));
    Volume::from_fn(coarse, |q| {
        let (mut s, mut n) = (0.0, 0.0);
        for o in Dims::cube(2).iter() {
            let p = [0, 1, 2].map(|d| 2 * q[d] + o[d]);
            if (0..3).all(|d| p[d] < dims[d]) {
                s += v.at(p[0], p[1], p[2]);
                n += 1.0;
            }
        }
        s / n
    })
}

/// Trilinear upsampling of a coarse field to `fine` dims, with vectors
/// doubled to fine voxel units.
pub fn upsample_field(u: &DisplacementField, fine: Dims) -> DisplacementField {
    let coarse = u.dims();
    DisplacementField::from_fn(fine, |p| {
        let st = Stencil::new(coarse, [0, 1, 2].map(|d| (p[d] as f64 - 0.5) / 2.0));
        [0, 1, 2].map(|c| 2.0 * st.sample(coarse, u.comp(c)))
    })
}

fn upsample_param(coarse: &DeformParam, fine: Dims) -> Result<DeformParam> {
    match coarse {
        DeformParam::Dense(u) => Ok(DeformParam::Dense(upsample_field(u, fine))),
        DeformParam::Svf { velocity, steps } => Ok(DeformParam::Svf {
            velocity: VelocityField(upsample_field(&velocity.0, fine)),
            steps: *steps,
        }),
        DeformParam::BsplineSvf { .. } => Err(Error::InvalidArgument(
            "coarse-to-fine is not supported for the B-spline parameterization".into(),
        )),
    }
}

fn ssim_window(dims: Dims) -> usize {
    let m = dims.min_extent().min(SSIM_WINDOW);
    if m % 2 == 0 {
        m - 1
    } else {
        m
    }
}

/// Iterative first-order registration of `moving` onto `fixed`.
///
/// `labels` are `(fixed, moving)` label stacks; they feed the Dice term of
/// the loss when `gamma > 0` and the per-channel Dice of the report. The
/// returned parameters are the best seen. With `timed`, the report carries
/// the wall-clock time, which makes it run-dependent.
pub fn deform_register(
    moving: &Volume,
    fixed: &Volume,
    labels: Option<(&LabelStack, &LabelStack)>,
    init: DeformParam,
    cfg: &OptimConfig,
    timed: bool,
) -> Result<RegistrationOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let dims = fixed.dims();
    dims.ensure_eq(&moving.dims(), "register fixed vs moving")?;
    if let Some((sf, sm)) = labels {
        dims.ensure_eq(&sf.dims(), "fixed labels")?;
        dims.ensure_eq(&sm.dims(), "moving labels")?;
        if sf.k() != sm.k() {
            return Err(Error::DimMismatch(format!(
                "label channels: fixed {} vs moving {}",
                sf.k(),
                sm.k()
            )));
        }
    }
    if cfg.weights.gamma > 0.0 && labels.is_none() {
        return Err(Error::InvalidArgument("gamma > 0 requires fixed and moving labels".into()));
    }

    let kind = init.kind();
    let mut coarse_trace = Vec::new();
    let mut param = init;
    let mut fine_iters = cfg.iterations;
    if cfg.levels == 2 {
        if matches!(kind, DeformKind::BsplineSvf { .. }) {
            return Err(Error::InvalidArgument(
                "coarse-to-fine is not supported for the B-spline parameterization".into(),
            ));
        }
        let cm = downsample(moving);
        let cf = downsample(fixed);
        let cl = labels
            .map(|(sf, sm)| -> Result<(LabelStack, LabelStack)> {
                let d = |s: &LabelStack| LabelStack::from_soft(s.channels().iter().map(downsample).collect());
                Ok((d(sf)?, d(sm)?))
            })
            .transpose()?;
        let coarse_iters = cfg.iterations / 2;
        fine_iters = cfg.iterations - coarse_iters;
        if coarse_iters > 0 {
            let zero = DeformParam::zeros(kind, cm.dims())?;
            let lvl = optimize_level(
                &cm,
                &cf,
                cl.as_ref().map(|(a, b)| (a, b)),
                zero,
                cfg,
                coarse_iters,
            )?;
            coarse_trace = lvl.best;
            param = upsample_param(&lvl.param, dims)?;
        }
    }
    let lvl = optimize_level(moving, fixed, labels, param, cfg, fine_iters)?;
    let param = lvl.param;
    let displacement = param.displacement(dims)?;
    let (warped, _) = warp_volume(moving, &displacement, InterpKernel::Trilinear)?;
    let dice = match labels {
        Some((sf, sm)) => {
            let moved = warp_labels_with(sm, &displacement, InterpKernel::Nearest)?;
            sf.channels()
                .iter()
                .zip(moved.channels())
                .map(|(a, b)| dice_score(a, b))
                .collect::<Result<Vec<_>>>()?
        }
        None => Vec::new(),
    };
    let terms = composite_loss(fixed, moving, &displacement, labels, &cfg.weights, cfg.similarity, cfg.regularizer)?;
    let folded_fraction = jacobian_report(&displacement)?.folded_fraction;
    let ssim = ssim(&warped, fixed, ssim_window(dims))?;
    let report = RegistrationReport {
        seed: cfg.seed,
        param: kind,
        config: *cfg,
        loss_trace: lvl.best,
        raw_loss_trace: lvl.raw,
        coarse_loss_trace: coarse_trace,
        final_loss: lvl.best_loss,
        final_similarity: terms.similarity,
        final_regularization: terms.regularization,
        final_segmentation: terms.segmentation,
        dice,
        folded_fraction,
        ssim,
        wall_time_s: timed.then(|| start.elapsed().as_secs_f64()),
    };
    Ok(RegistrationOutcome {
        param,
        displacement,
        warped,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_translation_fields() {
        let dims = Dims::new(4, 5, 6);
        let u = affine_to_field(&AffineParams::identity(), dims).unwrap();
        assert!(u.max_abs() < 1e-15);
        let u = affine_to_field(&AffineParams::translation([1.5, -2.0, 0.25]), dims).unwrap();
        for idx in 0..dims.len() {
            let v = u.vector(idx);
            assert!((v[0] - 1.5).abs() < 1e-12 && (v[1] + 2.0).abs() < 1e-12 && (v[2] - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn non_positive_scale_is_rejected() {
        let a = AffineParams { sy: 0.0, ..AffineParams::identity() };
        assert!(affine_to_field(&a, Dims::cube(3)).is_err());
    }

    #[test]
    fn param_kinds_round_trip() {
        let dims = Dims::cube(9);
        for kind in [
            DeformKind::Dense,
            DeformKind::Svf { steps: 5 },
            DeformKind::BsplineSvf { spacing: 4, steps: 3 },
        ] {
            let p = DeformParam::zeros(kind, dims).unwrap();
            assert_eq!(p.kind(), kind);
            assert!(p.displacement(dims).unwrap().max_abs() == 0.0);
        }
    }

    #[test]
    fn config_validation() {
        assert!(OptimConfig::default().validate().is_ok());
        assert!(OptimConfig { iterations: 0, ..OptimConfig::default() }.validate().is_err());
        assert!(OptimConfig { step: 0.0, ..OptimConfig::default() }.validate().is_err());
        assert!(OptimConfig { levels: 3, ..OptimConfig::default() }.validate().is_err());
    }

    #[test]
    fn downsample_and_upsample_shapes() {
        let v = Volume::filled(Dims::new(5, 4, 3), 2.0);
        let d = downsample(&v);
        assert_eq!(d.dims(), Dims::new(3, 2, 2));
        assert!(d.data().iter().all(|&x| x == 2.0));
        let u = DisplacementField::uniform(Dims::new(3, 2, 2), [1.0, 0.5, -1.0]);
        let up = upsample_field(&u, Dims::new(5, 4, 3));
        assert!(up.comp(0).iter().all(|&x| (x - 2.0).abs() < 1e-12));
        assert!(up.comp(2).iter().all(|&x| (x + 2.0).abs() < 1e-12));
    }
}
