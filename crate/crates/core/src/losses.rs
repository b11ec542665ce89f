//! Similarity measures, regularizers and the composite / probabilistic
//! registration objectives, each with its analytic gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{scaling_and_squaring_taped, svf_vjp};
use crate::rng::Rng;
use crate::volume::{Dims, DisplacementField, LabelStack, VelocityField, Volume};
use crate::warp::{warp_volume, warp_vjp, InterpKernel};

/// Variance guard added to both LNCC denominator factors.
pub const LNCC_EPS: f64 = 1e-5;
/// Dice smoothing; makes an empty-vs-empty channel score a perfect match.
pub const DICE_EPS: f64 = 1e-5;
pub const SSIM_WINDOW: usize = 7;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Regularizer weight.
    pub lambda: f64,
    /// Segmentation (Dice) weight.
    pub gamma: f64,
    /// Image-noise variance of the probabilistic likelihood.
    pub sigma2: f64,
    /// Label-noise variance of the auxiliary likelihood.
    pub sigma_s2: f64,
    /// Odd LNCC window edge length.
    pub lncc_window: usize,
}

impl LossWeights {
    /// MSE + diffusion setting (`lambda = 0.02`).
    pub fn mse_diffusion() -> Self {
        LossWeights {
            lambda: 0.02,
            gamma: 0.0,
            sigma2: 1e-4,
            sigma_s2: 1e-4,
            lncc_window: 9,
        }
    }

    /// LNCC + bending + Dice setting (`lambda = gamma = 1`).
    pub fn lncc_bending_dice() -> Self {
        LossWeights {
            lambda: 1.0,
            gamma: 1.0,
            ..Self::mse_diffusion()
        }
    }

    /// Probabilistic setting: `sigma = sigma_s = 0.01`, `lambda = 20`.
    pub fn probabilistic() -> Self {
        LossWeights {
            lambda: 20.0,
            gamma: 0.0,
            sigma2: 1e-4,
            sigma_s2: 1e-4,
            lncc_window: 9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name: &str, v: f64| Error::InvalidArgument(format!("{name} = {v} out of range"));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(bad("lambda", self.lambda));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(bad("gamma", self.gamma));
        }
        if !(self.sigma2 > 0.0) {
            return Err(bad("sigma2", self.sigma2));
        }
        if !(self.sigma_s2 > 0.0) {
            return Err(bad("sigma_s2", self.sigma_s2));
        }
        if self.lncc_window % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "lncc window must be odd, got {}",
                self.lncc_window
            )));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::mse_diffusion()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Mse,
    Lncc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularizer {
    #[default]
    Diffusion,
    Bending,
}

/// Mean squared difference and its gradient with respect to `a`.
pub fn mse(a: &Volume, b: &Volume) -> Result<(f64, Volume)> {
    a.dims().ensure_eq(&b.dims(), "mse")?;
    let n = a.data().len() as f64;
    let mut value = 0.0;
    let grad = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x - y;
            value += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((value / n, Volume::new(a.dims(), grad)?))
}

/// Sum over each voxel's `(2r + 1)^3` window, clipped to the volume.
pub fn box_sum(data: &[f64], dims: Dims, r: usize) -> Vec<f64> {
    let mut cur = data.to_vec();
    let mut prefix = Vec::new();
    for axis in 0..3 {
        let n = dims[axis];
        let stride = dims.stride(axis);
        let mut next = vec![0.0; cur.len()];
        for (start, p) in dims.iter().enumerate() {
            if p[axis] != 0 {
                continue;
            }
            prefix.clear();
            prefix.push(0.0);
            let mut acc = 0.0;
            for k in 0..n {
                acc += cur[start + k * stride];
                prefix.push(acc);
            }
            for k in 0..n {
                let lo = k.saturating_sub(r);
                let hi = (k + r).min(n - 1);
                next[start + k * stride] = prefix[hi + 1] - prefix[lo];
            }
        }
        cur = next;
    }
    cur
}

/// Result of [`lncc`]. The gradient is that of `sum`.
#[derive(Debug, Clone)]
pub struct LnccValue {
    pub sum: f64,
    pub mean: f64,
    pub grad_a: Volume,
}

/// Local normalized cross-correlation: the sum over voxels of the squared
/// windowed correlation coefficient. Higher is better.
pub fn lncc(a: &Volume, b: &Volume, window: usize) -> Result<LnccValue> {
    let dims = a.dims();
    dims.ensure_eq(&b.dims(), "lncc")?;
    if window % 2 == 0 || window == 0 {
        return Err(Error::InvalidArgument(format!(
            "lncc window must be odd, got {window}"
        )));
    }
    let r = window / 2;
    let (av, bv) = (a.data(), b.data());
    let sq = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let count = box_sum(&vec![1.0; dims.len()], dims, r);
    let sa = box_sum(av, dims, r);
    let sb = box_sum(bv, dims, r);
    let saa = box_sum(&sq(av, av), dims, r);
    let sbb = box_sum(&sq(bv, bv), dims, r);
    let sab = box_sum(&sq(av, bv), dims, r);

    let n = dims.len();
    let mut alpha = vec![0.0; n];
    let mut alpha_bm = vec![0.0; n];
    let mut beta = vec![0.0; n];
    let mut beta_am = vec![0.0; n];
    let mut sum = 0.0;
    for i in 0..n {
        let am = sa[i] / count[i];
        let bm = sb[i] / count[i];
        let cross = sab[i] - sa[i] * bm;
        let va = saa[i] - sa[i] * am + LNCC_EPS;
        let vb = sbb[i] - sb[i] * bm + LNCC_EPS;
        sum += cross * cross / (va * vb);
        let al = 2.0 * cross / (va * vb);
        let be = al * cross / va;
        alpha[i] = al;
        alpha_bm[i] = al * bm;
        beta[i] = be;
        beta_am[i] = be * am;
    }
    let s_alpha = box_sum(&alpha, dims, r);
    let s_alpha_bm = box_sum(&alpha_bm, dims, r);
    let s_beta = box_sum(&beta, dims, r);
    let s_beta_am = box_sum(&beta_am, dims, r);
    let grad: Vec<f64> = (0..n)
        .map(|i| bv[i] * s_alpha[i] - s_alpha_bm[i] - av[i] * s_beta[i] + s_beta_am[i])
        .collect();
    Ok(LnccValue {
        sum,
        mean: sum / n as f64,
        grad_a: Volume::new(dims, grad)?,
    })
}

/// One squared finite-difference term: `weight * (sum_k coeff_k f(p + off_k))^2`,
/// summed over every `p` whose offsets stay inside the grid.
struct StencilTerm {
    offsets: Vec<([usize; 3], f64)>,
    weight: f64,
}

fn unit(d: usize) -> [usize; 3] {
    let mut e = [0; 3];
    e[d] = 1;
    e
}

fn add(a: [usize; 3], b: [usize; 3]) -> [usize; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn stencil_energy(u: &DisplacementField, terms: &[StencilTerm]) -> (f64, DisplacementField) {
    let dims = u.dims();
    let mut value = 0.0;
    let mut grad = DisplacementField::zeros(dims);
    for term in terms {
        let reach = [0, 1, 2].map(|d| term.offsets.iter().map(|(o, _)| o[d]).max().unwrap_or(0));
        let offs: Vec<(usize, f64)> = term
            .offsets
            .iter()
            .map(|(o, c)| (dims.index(o[0], o[1], o[2]), *c))
            .collect();
        for c in 0..3 {
            let f = u.comp(c);
            for x in 0..dims[0].saturating_sub(reach[0]) {
                for y in 0..dims[1].saturating_sub(reach[1]) {
                    for z in 0..dims[2].saturating_sub(reach[2]) {
                        let base = dims.index(x, y, z);
                        let s: f64 = offs.iter().map(|&(o, k)| k * f[base + o]).sum();
                        value += term.weight * s * s;
                        let g = grad.comp_mut(c);
                        for &(o, k) in &offs {
                            g[base + o] += 2.0 * term.weight * s * k;
                        }
                    }
                }
            }
        }
    }
    (value, grad)
}

fn require_extent(u: &DisplacementField, min: usize, what: &str) -> Result<()> {
    if u.dims().min_extent() < min {
        return Err(Error::InvalidArgument(format!(
            "{what} needs >= {min} voxels per axis, got {:?}",
            u.dims().0
        )));
    }
    Ok(())
}

/// `sum_p ||grad u(p)||^2` with forward differences; terms that would reach
/// past the far face are dropped.
pub fn diffusion_reg(u: &DisplacementField) -> Result<(f64, DisplacementField)> {
    require_extent(u, 2, "diffusion regularizer")?;
    let terms: Vec<StencilTerm> = (0..3)
        .map(|d| StencilTerm {
            offsets: vec![(unit(d), 1.0), ([0; 3], -1.0)],
            weight: 1.0,
        })
        .collect();
    Ok(stencil_energy(u, &terms))
}

/// `sum_p ||hess u(p)||^2`: three pure second differences plus twice each
/// mixed term, all from repeated forward differences.
pub fn bending_energy(u: &DisplacementField) -> Result<(f64, DisplacementField)> {
    require_extent(u, 3, "bending energy")?;
    let mut terms = Vec::with_capacity(6);
    for d in 0..3 {
        terms.push(StencilTerm {
            offsets: vec![(add(unit(d), unit(d)), 1.0), (unit(d), -2.0), ([0; 3], 1.0)],
            weight: 1.0,
        });
    }
    for (d, e) in [(0, 1), (0, 2), (1, 2)] {
        terms.push(StencilTerm {
            offsets: vec![
                (add(unit(d), unit(e)), 1.0),
                (unit(d), -1.0),
                (unit(e), -1.0),
                ([0; 3], 1.0),
            ],
            weight: 2.0,
        });
    }
    Ok(stencil_energy(u, &terms))
}

/// Soft multi-class Dice loss and its gradient with respect to `moved`.
pub fn dice_loss(fixed: &LabelStack, moved: &LabelStack) -> Result<(f64, Vec<Volume>)> {
    if fixed.k() != moved.k() {
        return Err(Error::DimMismatch(format!(
            "dice: {} fixed channels vs {} moved",
            fixed.k(),
            moved.k()
        )));
    }
    fixed.dims().ensure_eq(&moved.dims(), "dice")?;
    let k = fixed.k() as f64;
    let mut score = 0.0;
    let mut grads = Vec::with_capacity(fixed.k());
    for (f, m) in fixed.channels().iter().zip(moved.channels()) {
        let (fv, mv) = (f.data(), m.data());
        let inter: f64 = fv.iter().zip(mv).map(|(a, b)| a * b).sum();
        let ff: f64 = fv.iter().map(|a| a * a).sum();
        let mm: f64 = mv.iter().map(|b| b * b).sum();
        let num = 2.0 * inter + DICE_EPS;
        let den = ff + mm + DICE_EPS;
        score += num / den;
        let g: Vec<f64> = fv
            .iter()
            .zip(mv)
            .map(|(a, b)| -(2.0 * a * den - num * 2.0 * b) / (den * den) / k)
            .collect();
        grads.push(Volume::new(f.dims(), g)?);
    }
    Ok((1.0 - score / k, grads))
}

/// Hard Dice overlap `2|A ∩ B| / (|A| + |B|)` of masks thresholded at 0.5.
/// Two empty masks score 1.
pub fn dice_score(a: &Volume, b: &Volume) -> Result<f64> {
    a.dims().ensure_eq(&b.dims(), "dice score")?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x >= 0.5, y >= 0.5);
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Mean local SSIM over clipped `window^3` neighbourhoods, data range 1.
pub fn ssim(a: &Volume, b: &Volume, window: usize) -> Result<f64> {
    let dims = a.dims();
    dims.ensure_eq(&b.dims(), "ssim")?;
    if window == 0 || window % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "ssim window must be odd, got {window}"
        )));
    }
    if dims.min_extent() < window {
        return Err(Error::InvalidArgument(format!(
            "volume {:?} smaller than ssim window {window}",
            dims.0
        )));
    }
    let r = window / 2;
    let (av, bv) = (a.data(), b.data());
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let count = box_sum(&vec![1.0; dims.len()], dims, r);
    let sa = box_sum(av, dims, r);
    let sb = box_sum(bv, dims, r);
    let saa = box_sum(&prod(av, av), dims, r);
    let sbb = box_sum(&prod(bv, bv), dims, r);
    let sab = box_sum(&prod(av, bv), dims, r);
    let total: f64 = (0..dims.len())
        .map(|i| {
            let n = count[i];
            let (ma, mb) = (sa[i] / n, sb[i] / n);
            let va = saa[i] / n - ma * ma;
            let vb = sbb[i] / n - mb * mb;
            let cov = sab[i] / n - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .sum();
    Ok(total / dims.len() as f64)
}

/// Breakdown of the composite objective; `grad_u` is the gradient of `total`.
#[derive(Debug, Clone)]
pub struct CompositeLoss {
    pub total: f64,
    pub similarity: f64,
    pub regularization: f64,
    pub segmentation: f64,
    pub grad_u: DisplacementField,
}

/// `L_sim + lambda R + gamma L_seg` for the displacement `u`.
///
/// Every term is voxel-averaged: `L_sim` is the MSE or the negated mean LNCC,
/// `R` is the regularizer sum divided by the voxel count. Labels are needed
/// whenever `gamma > 0`.
pub fn composite_loss(
    fixed: &Volume,
    moving: &Volume,
    u: &DisplacementField,
    labels: Option<(&LabelStack, &LabelStack)>,
    weights: &LossWeights,
    sim: Similarity,
    reg: Regularizer,
) -> Result<CompositeLoss> {
    weights.validate()?;
    let dims = fixed.dims();
    dims.ensure_eq(&moving.dims(), "composite fixed vs moving")?;
    dims.ensure_eq(&u.dims(), "composite image vs field")?;
    let n = dims.len() as f64;

    let (warped, tape) = warp_volume(moving, u, InterpKernel::Trilinear)?;
    let (similarity, grad_warped) = match sim {
        Similarity::Mse => mse(&warped, fixed)?,
        Similarity::Lncc => {
            let v = lncc(&warped, fixed, weights.lncc_window)?;
            (-v.mean, v.grad_a.map(|g| -g / n))
        }
    };
    let (_, mut grad_u) = warp_vjp(&tape, moving, &grad_warped)?;

    let (reg_sum, reg_grad) = match reg {
        Regularizer::Diffusion => diffusion_reg(u)?,
        Regularizer::Bending => bending_energy(u)?,
    };
    let regularization = reg_sum / n;
    grad_u.axpy(weights.lambda / n, &reg_grad)?;

    let mut segmentation = 0.0;
    if weights.gamma > 0.0 {
        let (sf, sm) = labels.ok_or_else(|| {
            Error::InvalidArgument("gamma > 0 requires fixed and moving labels".into())
        })?;
        if sf.k() != sm.k() {
            return Err(Error::DimMismatch(format!(
                "label channels: fixed {} vs moving {}",
                sf.k(),
                sm.k()
            )));
        }
        dims.ensure_eq(&sf.dims(), "fixed labels")?;
        dims.ensure_eq(&sm.dims(), "moving labels")?;
        let mut moved = Vec::with_capacity(sm.k());
        let mut tapes = Vec::with_capacity(sm.k());
        for ch in sm.channels() {
            let (w, t) = warp_volume(ch, u, InterpKernel::Trilinear)?;
            moved.push(w);
            tapes.push(t);
        }
        let moved = LabelStack::from_soft(moved)?;
        let (loss, grads) = dice_loss(sf, &moved)?;
        segmentation = loss;
        for ((t, ch), g) in tapes.iter().zip(sm.channels()).zip(&grads) {
            let (_, gu) = warp_vjp(t, ch, g)?;
            grad_u.axpy(weights.gamma, &gu)?;
        }
    }

    Ok(CompositeLoss {
        total: similarity + weights.lambda * regularization + weights.gamma * segmentation,
        similarity,
        regularization,
        segmentation,
        grad_u,
    })
}

/// Diagonal Gaussian over displacement fields: mean and per-voxel log variance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mean: DisplacementField,
    pub logvar: DisplacementField,
}

impl GaussianPosterior {
    pub fn new(mean: DisplacementField, logvar: DisplacementField) -> Result<Self> {
        mean.dims().ensure_eq(&logvar.dims(), "posterior mean vs logvar")?;
        Ok(GaussianPosterior { mean, logvar })
    }
}

/// Number of in-grid 6-neighbours of `p`.
fn degree(dims: Dims, p: [usize; 3]) -> f64 {
    (0..3)
        .map(|d| (p[d] > 0) as usize + (p[d] + 1 < dims[d]) as usize)
        .sum::<usize>() as f64
}

/// `mu^T Lambda mu = (lambda / 2) sum_p sum_{i in N(p)} (mu(p) - mu(i))^2` on
/// the 6-neighbour graph, summed over channels, with gradient.
pub fn laplacian_quadratic(mu: &DisplacementField, lambda: f64) -> (f64, DisplacementField) {
    let dims = mu.dims();
    let mut value = 0.0;
    let mut grad = DisplacementField::zeros(dims);
    for c in 0..3 {
        let f = mu.comp(c);
        let g = grad.comp_mut(c);
        for (idx, p) in dims.iter().enumerate() {
            for d in 0..3 {
                let s = dims.stride(d);
                let mut visit = |j: usize| {
                    let diff = f[idx] - f[j];
                    value += 0.5 * lambda * diff * diff;
                    // Each edge appears from both ends; this end's share.
                    g[idx] += lambda * diff;
                    g[j] -= lambda * diff;
                };
                if p[d] > 0 {
                    visit(idx - s);
                }
                if p[d] + 1 < dims[d] {
                    visit(idx + s);
                }
            }
        }
    }
    (value, grad)
}

/// Value and gradients of the negative ELBO.
#[derive(Debug, Clone)]
pub struct ElboLoss {
    pub total: f64,
    /// `||I_f - I_m ∘ phi||^2 / (2 sigma^2)`.
    pub data: f64,
    /// `||s_f - s_m ∘ phi||^2 / (2 sigma_s^2)`; zero without labels.
    pub label: f64,
    /// `(1/2)[tr(lambda D Sigma - log Sigma) + mu^T Lambda mu]`.
    pub kl: f64,
    pub grad_mean: DisplacementField,
    pub grad_logvar: DisplacementField,
}

/// Reparameterized sample `mu + exp(logvar / 2) * eps`; `eps` drawn channel by
/// channel in storage order.
pub fn sample_posterior(post: &GaussianPosterior, rng: &mut Rng) -> (DisplacementField, DisplacementField) {
    let dims = post.mean.dims();
    let n = dims.len();
    let eps = DisplacementField::new(dims, [rng.normal_vec(n), rng.normal_vec(n), rng.normal_vec(n)])
        .expect("normal samples are finite");
    let mut u = post.mean.clone();
    for c in 0..3 {
        for ((v, e), lv) in u.comp_mut(c).iter_mut().zip(eps.comp(c)).zip(post.logvar.comp(c)) {
            *v += (0.5 * lv).exp() * e;
        }
    }
    (u, eps)
}

fn elbo_impl(
    fixed: &Volume,
    moving: &Volume,
    labels: Option<(&LabelStack, &LabelStack)>,
    post: &GaussianPosterior,
    weights: &LossWeights,
    steps: u32,
    rng: &mut Rng,
) -> Result<ElboLoss> {
    weights.validate()?;
    let dims = fixed.dims();
    dims.ensure_eq(&moving.dims(), "elbo fixed vs moving")?;
    dims.ensure_eq(&post.mean.dims(), "elbo image vs posterior")?;
    dims.ensure_eq(&post.logvar.dims(), "elbo image vs logvar")?;
    post.logvar.ensure_finite()?;

    let (sample, eps) = sample_posterior(post, rng);
    let (phi, tape) = scaling_and_squaring_taped(&VelocityField(sample), steps)?;

    let (warped, wtape) = warp_volume(moving, &phi, InterpKernel::Trilinear)?;
    let inv = 1.0 / weights.sigma2;
    let mut data = 0.0;
    let grad_warped: Vec<f64> = fixed
        .data()
        .iter()
        .zip(warped.data())
        .map(|(f, w)| {
            let r = f - w;
            data += 0.5 * inv * r * r;
            -inv * r
        })
        .collect();
    let (_, mut grad_phi) = warp_vjp(&wtape, moving, &Volume::new(dims, grad_warped)?)?;

    let mut label = 0.0;
    if let Some((sf, sm)) = labels {
        if sf.k() != sm.k() {
            return Err(Error::DimMismatch(format!(
                "label channels: fixed {} vs moving {}",
                sf.k(),
                sm.k()
            )));
        }
        dims.ensure_eq(&sf.dims(), "fixed labels")?;
        dims.ensure_eq(&sm.dims(), "moving labels")?;
        let inv_s = if weights.sigma_s2.is_infinite() { 0.0 } else { 1.0 / weights.sigma_s2 };
        if inv_s > 0.0 {
            for (f, m) in sf.channels().iter().zip(sm.channels()) {
                let (w, t) = warp_volume(m, &phi, InterpKernel::Trilinear)?;
                let g: Vec<f64> = f
                    .data()
                    .iter()
                    .zip(w.data())
                    .map(|(a, b)| {
                        let r = a - b;
                        label += 0.5 * inv_s * r * r;
                        -inv_s * r
                    })
                    .collect();
                let (_, gu) = warp_vjp(&t, m, &Volume::new(dims, g)?)?;
                grad_phi.axpy(1.0, &gu)?;
            }
        }
    }

    let grad_sample = svf_vjp(&tape, steps, &grad_phi)?.0;

    let lambda = weights.lambda;
    let (quad, quad_grad) = laplacian_quadratic(&post.mean, lambda);
    let mut trace = 0.0;
    let mut grad_logvar = DisplacementField::zeros(dims);
    for c in 0..3 {
        let lv = post.logvar.comp(c);
        let gs = grad_sample.comp(c);
        let e = eps.comp(c);
        let out = grad_logvar.comp_mut(c);
        for (idx, p) in dims.iter().enumerate() {
            let var = lv[idx].exp();
            let ld = lambda * degree(dims, p);
            trace += ld * var - lv[idx];
            out[idx] = gs[idx] * e[idx] * 0.5 * (0.5 * lv[idx]).exp() + 0.5 * (ld * var - 1.0);
        }
    }
    let kl = 0.5 * (trace + quad);
    let mut grad_mean = grad_sample;
    grad_mean.axpy(0.5, &quad_grad)?;

    Ok(ElboLoss {
        total: data + label + kl,
        data,
        label,
        kl,
        grad_mean,
        grad_logvar,
    })
}

/// Negative ELBO of the probabilistic diffeomorphic model for one
/// reparameterized sample drawn from `rng`.
pub fn elbo_loss(
    fixed: &Volume,
    moving: &Volume,
    post: &GaussianPosterior,
    weights: &LossWeights,
    steps: u32,
    rng: &mut Rng,
) -> Result<ElboLoss> {
    elbo_impl(fixed, moving, None, post, weights, steps, rng)
}

/// [`elbo_loss`] plus the Gaussian label likelihood over all `K` channels.
#[allow(clippy::too_many_arguments)]
pub fn elbo_loss_aux(
    fixed: &Volume,
    fixed_labels: &LabelStack,
    moving: &Volume,
    moving_labels: &LabelStack,
    post: &GaussianPosterior,
    weights: &LossWeights,
    steps: u32,
    rng: &mut Rng,
) -> Result<ElboLoss> {
    elbo_impl(
        fixed,
        moving,
        Some((fixed_labels, moving_labels)),
        post,
        weights,
        steps,
        rng,
    )
}
