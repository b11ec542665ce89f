//! Built-in invariant suite: finite-difference gradient checks, field and
//! window oracles, loss identities and the calibration decomposition.
//!
//! Every row compares a measured error against a tolerance, so a report is a
//! plain table of pass/fail lines that is identical across runs with the
//! same seed.

use std::fmt::Write as _;

use serde::Serialize;

use crate::erf::{center_tap, erf_probe, support_fraction, ConvRef};
use crate::error::Result;
use crate::fields::{
    bspline_to_dense, bspline_vjp, compose, jacobian_report, scaling_and_squaring, scaling_and_squaring_taped,
    svf_vjp, BsplineLattice,
};
use crate::gradcheck::check;
use crate::losses::{bending_energy, diffusion_reg, dice_loss, laplacian_quadratic, lncc, mse};
use crate::phantom::{face_taper, smooth_random_field};
use crate::rng::Rng;
use crate::swin::{
    swin_block_pair, swin_block_pair_vjp, window_attention, window_partition, window_reverse, SwinNet,
    SwinNetConfig, SwinParams, TokenGrid, WindowSpec,
};
use crate::uncertainty::{calibrated_error, mc_collect, predictive_variance, uce, DEFAULT_BINS};
use crate::volume::{Dims, DisplacementField, LabelStack, VelocityField, Volume};
use crate::warp::{warp_volume, warp_vjp, InterpKernel};

/// Relative tolerance for gradients of linear maps and quadratic energies.
pub const LINEAR_TOL: f64 = 1e-4;
/// Relative tolerance for gradients of nonlinear maps.
pub const NONLINEAR_TOL: f64 = 1e-3;
/// Instances per operation in the gradient suite.
pub const GRADIENT_INSTANCES: usize = 6;

/// Deliberate defects used to confirm that the suite catches them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mutation {
    #[default]
    None,
    /// Negates the analytic diffusion-regularizer gradient before checking.
    FlipDiffusionGradient,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub group: String,
    pub name: String,
    /// Measured error (or violation count); passes when `<= tolerance`.
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckRow {
    fn new(group: &str, name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        CheckRow {
            group: group.into(),
            name: name.into(),
            value,
            tolerance,
            pass: value <= tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelftestReport {
    pub seed: u64,
    pub rows: Vec<CheckRow>,
    pub passed: bool,
}

impl SelftestReport {
    pub fn failures(&self) -> impl Iterator<Item = &CheckRow> {
        self.rows.iter().filter(|r| !r.pass)
    }

    /// Fixed-width table with one line per check and a summary line.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<6} {:<14} {:<40} {:>11} {:>11}", "result", "group", "check", "value", "tolerance");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<6} {:<14} {:<40} {:>11.3e} {:>11.3e}",
                if r.pass { "PASS" } else { "FAIL" },
                r.group,
                r.name,
                r.value,
                r.tolerance
            );
        }
        let failed = self.failures().count();
        let _ = writeln!(s, "{} checks, {} failed (seed {})", self.rows.len(), failed, self.seed);
        s
    }
}

fn smooth_volume(dims: Dims, rng: &mut Rng) -> Volume {
    let waves: Vec<([f64; 3], f64, f64)> = (0..3)
        .map(|_| {
            let k = [0, 1, 2].map(|_| rng.uniform_range(0.3, 1.1));
            (k, rng.uniform_range(0.0, 6.28), rng.uniform_range(0.1, 0.3))
        })
        .collect();
    Volume::from_fn(dims, |p| {
        0.5 + waves
            .iter()
            .map(|(k, ph, a)| a * (k[0] * p[0] as f64 + k[1] * p[1] as f64 + k[2] * p[2] as f64 + ph).sin())
            .sum::<f64>()
    })
}

fn uniform_volume(dims: Dims, rng: &mut Rng) -> Volume {
    Volume::new(dims, rng.uniform_vec(dims.len(), 0.0, 1.0)).expect("sized")
}

fn uniform_field(dims: Dims, amp: f64, rng: &mut Rng) -> DisplacementField {
    let n = dims.len();
    DisplacementField::new(dims, [0, 1, 2].map(|_| rng.uniform_vec(n, -amp, amp))).expect("sized")
}

/// Displacements whose sampling positions stay away from grid lines, where
/// trilinear interpolation has kinks.
fn offgrid_field(dims: Dims, rng: &mut Rng) -> DisplacementField {
    let n = dims.len();
    let comps = [0, 1, 2].map(|_| {
        (0..n)
            .map(|_| rng.index(3) as f64 - 1.0 + rng.uniform_range(0.3, 0.7))
            .collect()
    });
    DisplacementField::new(dims, comps).expect("sized")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn field(dims: Dims, x: &[f64]) -> DisplacementField {
    DisplacementField::from_flat(dims, x).expect("sized")
}

fn vol(dims: Dims, x: &[f64]) -> Volume {
    Volume::new(dims, x.to_vec()).expect("sized")
}

/// Instance shapes cycle through 5³ and 6³ boxes.
fn instance_dims(i: usize) -> Dims {
    [Dims::cube(5), Dims::cube(6), Dims::new(5, 6, 5), Dims::new(6, 5, 6)][i % 4]
}

/// Finite-difference gradient checks: `instances` random problems for each of
/// warp (image and field), diffusion, bending, LNCC, Dice, B-spline, SVF,
/// the attention block pair and the full network.
pub fn gradient_suite(seed: u64, instances: usize, mutation: Mutation) -> Result<Vec<CheckRow>> {
    const G: &str = "gradient";
    let mut rows = Vec::new();
    for i in 0..instances {
        let dims = instance_dims(i);
        let mut rng = Rng::new(seed).fork(i as u64);
        let tag = |op: &str| format!("{op} #{i} {:?}", dims.0);

        let img = smooth_volume(dims, &mut rng);
        let u = offgrid_field(dims, &mut rng);
        let gout = uniform_volume(dims, &mut rng);
        let (_, tape) = warp_volume(&img, &u, InterpKernel::Trilinear)?;
        let (gi, gu) = warp_vjp(&tape, &img, &gout)?;
        let warp_dot = |m: &Volume, f: &DisplacementField| {
            dot(warp_volume(m, f, InterpKernel::Trilinear).expect("valid").0.data(), gout.data())
        };
        let c = check(|x| warp_dot(&vol(dims, x), &u), gi.data(), img.data(), 1e-5);
        rows.push(CheckRow::new(G, tag("warp image"), c.rel_err, LINEAR_TOL));
        let c = check(|x| warp_dot(&img, &field(dims, x)), &gu.to_flat(), &u.to_flat(), 1e-6);
        rows.push(CheckRow::new(G, tag("warp field"), c.rel_err, NONLINEAR_TOL));

        let r = uniform_field(dims, 1.0, &mut rng);
        let (_, mut g) = diffusion_reg(&r)?;
        if mutation == Mutation::FlipDiffusionGradient {
            g.scale_in_place(-1.0);
        }
        let c = check(|x| diffusion_reg(&field(dims, x)).expect("valid").0, &g.to_flat(), &r.to_flat(), 1e-4);
        rows.push(CheckRow::new(G, tag("diffusion"), c.rel_err, LINEAR_TOL));
        let (_, g) = bending_energy(&r)?;
        let c = check(|x| bending_energy(&field(dims, x)).expect("valid").0, &g.to_flat(), &r.to_flat(), 1e-4);
        rows.push(CheckRow::new(G, tag("bending"), c.rel_err, LINEAR_TOL));

        let (a, b) = (uniform_volume(dims, &mut rng), uniform_volume(dims, &mut rng));
        let v = lncc(&a, &b, 3)?;
        let c = check(|x| lncc(&vol(dims, x), &b, 3).expect("valid").sum, v.grad_a.data(), a.data(), 1e-5);
        rows.push(CheckRow::new(G, tag("lncc"), c.rel_err, NONLINEAR_TOL));

        let fixed = LabelStack::new(vec![
            Volume::from_fn(dims, |p| (p[0] < dims[0] / 2) as u8 as f64),
            Volume::from_fn(dims, |p| (p[1] + p[2] >= dims[1]) as u8 as f64),
        ])?;
        let soft = [uniform_volume(dims, &mut rng), uniform_volume(dims, &mut rng)];
        let moved = LabelStack::from_soft(soft.to_vec())?;
        let (_, grads) = dice_loss(&fixed, &moved)?;
        let n = dims.len();
        let x0: Vec<f64> = soft.iter().flat_map(|v| v.data().to_vec()).collect();
        let g0: Vec<f64> = grads.iter().flat_map(|v| v.data().to_vec()).collect();
        let c = check(
            |x| {
                let m = LabelStack::from_soft(vec![vol(dims, &x[..n]), vol(dims, &x[n..])]).expect("valid");
                dice_loss(&fixed, &m).expect("valid").0
            },
            &g0,
            &x0,
            1e-5,
        );
        rows.push(CheckRow::new(G, tag("dice"), c.rel_err, NONLINEAR_TOL));

        let mut lat = BsplineLattice::for_image(dims, [2; 3])?;
        let len = lat.to_flat().len();
        lat.set_flat(&rng.uniform_vec(len, -1.0, 1.0))?;
        let w = uniform_field(dims, 1.0, &mut rng);
        let back = bspline_vjp(&lat, &w)?;
        let c = check(
            |x| {
                let mut l = lat.clone();
                l.set_flat(x).expect("sized");
                bspline_to_dense(&l, dims).expect("covers").dot(&w)
            },
            &back.to_flat(),
            &lat.to_flat(),
            1e-4,
        );
        rows.push(CheckRow::new(G, tag("bspline"), c.rel_err, LINEAR_TOL));

        let vel = uniform_field(dims, 0.8, &mut rng);
        let steps = 3;
        let (_, stape) = scaling_and_squaring_taped(&VelocityField(vel.clone()), steps)?;
        let gv = svf_vjp(&stape, steps, &w)?;
        let c = check(
            |x| scaling_and_squaring(&VelocityField(field(dims, x)), steps).expect("valid").dot(&w),
            &gv.0.to_flat(),
            &vel.to_flat(),
            1e-6,
        );
        rows.push(CheckRow::new(G, tag("svf"), c.rel_err, NONLINEAR_TOL));

        rows.push(attention_row(&mut rng, dims, &tag("attention pair"))?);
        rows.push(network_row(&mut rng, dims, seed + i as u64, &tag("network"))?);
    }
    Ok(rows)
}

/// Block-pair VJP on a token grid of `dims`, inputs and parameters together.
fn attention_row(rng: &mut Rng, dims: Dims, name: &str) -> Result<CheckRow> {
    let c = 4;
    let spec = WindowSpec::new([2, 2, 3])?;
    let make = |rng: &mut Rng| -> Result<SwinParams> {
        let mut p = SwinParams::init(c, 2, spec, rng)?;
        let flat: Vec<f64> = p.to_flat().iter().map(|v| v * 20.0).collect();
        p.set_flat(&flat)?;
        Ok(p)
    };
    let (pa, pb) = (make(rng)?, make(rng)?);
    let t = TokenGrid::new(dims, c, rng.uniform_vec(dims.len() * c, -1.0, 1.0))?;
    let (y, tape) = swin_block_pair(&t, [&pa, &pb], None)?;
    let w = rng.uniform_vec(y.data().len(), -1.0, 1.0);
    let (gx, [ga, gb]) = swin_block_pair_vjp([&pa, &pb], &tape, &TokenGrid::new(dims, c, w.clone())?)?;
    let na = pa.to_flat().len();
    let mut x0 = t.data().to_vec();
    x0.extend(pa.to_flat());
    x0.extend(pb.to_flat());
    let mut g0 = gx.data().to_vec();
    g0.extend(ga.to_flat());
    g0.extend(gb.to_flat());
    let nt = t.data().len();
    let r = check(
        |x| {
            let (mut qa, mut qb) = (pa.clone(), pb.clone());
            qa.set_flat(&x[nt..nt + na]).expect("sized");
            qb.set_flat(&x[nt + na..]).expect("sized");
            let tt = TokenGrid::new(dims, c, x[..nt].to_vec()).expect("sized");
            dot(swin_block_pair(&tt, [&qa, &qb], None).expect("valid").0.data(), &w)
        },
        &g0,
        &x0,
        1e-6,
    );
    Ok(CheckRow::new("gradient", name, r.rel_err, NONLINEAR_TOL))
}

/// Full network VJP with respect to the moving image.
fn network_row(rng: &mut Rng, dims: Dims, seed: u64, name: &str) -> Result<CheckRow> {
    let net = SwinNet::new(SwinNetConfig {
        channels: 4,
        seed,
        init_scale: 0.4,
        ..SwinNetConfig::default()
    })?;
    let moving = uniform_volume(dims, rng);
    let fixed = uniform_volume(dims, rng);
    let (_, tape) = net.forward(&moving, &fixed, None)?;
    let w = uniform_field(dims, 1.0, rng);
    let (gm, _, _) = net.vjp(&tape, &w)?;
    let r = check(
        |x| net.forward(&vol(dims, x), &fixed, None).expect("valid").0.dot(&w),
        gm.data(),
        moving.data(),
        1e-6,
    );
    Ok(CheckRow::new("gradient", name, r.rel_err, NONLINEAR_TOL))
}

/// Residual of `exp(v) ∘ exp(-v)` over voxels at least `margin` from every face.
pub fn inverse_residual(v: &DisplacementField, steps: u32, margin: usize) -> Result<f64> {
    let dims = v.dims();
    let fwd = scaling_and_squaring(&VelocityField(v.clone()), steps)?;
    let inv = scaling_and_squaring(&VelocityField(v.scaled(-1.0)), steps)?;
    let r = compose(&fwd, &inv)?;
    Ok(dims
        .iter()
        .enumerate()
        .filter(|(_, p)| (0..3).all(|d| p[d] >= margin && p[d] + margin < dims[d]))
        .map(|(i, _)| r.vector(i).iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(0.0, f64::max))
}

fn diffeo_rows(seed: u64, seeds: u64) -> Result<Vec<CheckRow>> {
    const G: &str = "diffeomorphism";
    let dims = Dims::cube(16);
    let (mut folded, mut interior, mut tapered, mut tapered_folded) = (0.0, 0.0f64, 0.0f64, 0.0);
    for s in 0..seeds {
        let mut rng = Rng::new(seed).fork(1000 + s);
        let v = smooth_random_field(dims, 6.0, 3.0, &mut rng);
        let u = scaling_and_squaring(&VelocityField(v.clone()), 7)?;
        folded += (jacobian_report(&u)?.folded_fraction > 0.0) as u8 as f64;
        interior = interior.max(inverse_residual(&v, 7, 3)?);
        let t = face_taper(&v, 1.5);
        let ut = scaling_and_squaring(&VelocityField(t.clone()), 7)?;
        tapered_folded += (jacobian_report(&ut)?.folded_fraction > 0.0) as u8 as f64;
        tapered = tapered.max(inverse_residual(&t, 7, 0)?);
    }
    Ok(vec![
        CheckRow::new(G, format!("folded seeds, |v| = 3 ({seeds} seeds)"), folded, 0.0),
        CheckRow::new(G, "inverse residual interior, |v| = 3", interior, 0.1),
        CheckRow::new(G, "folded seeds, face-tapered |v| = 1.5", tapered_folded, 0.0),
        CheckRow::new(G, "inverse residual full, face-tapered", tapered, 0.1),
    ])
}

fn window_rows(seed: u64) -> Result<Vec<CheckRow>> {
    const G: &str = "windows";
    let c = 2;
    let dims = Dims::new(4, 8, 12);
    let mut rng = Rng::new(seed).fork(2000);
    let t = TokenGrid::new(dims, c, rng.uniform_vec(dims.len() * c, -1.0, 1.0))?;
    let spec = WindowSpec::new([2, 4, 6])?;
    let regular = window_partition(&t, spec, false);
    let shifted = window_partition(&t, spec, true);
    let mut p = SwinParams::init(c, 1, spec, &mut rng)?;
    let flat: Vec<f64> = p.to_flat().iter().map(|v| v * 20.0).collect();
    p.set_flat(&flat)?;
    let (_, tape) = window_attention(&shifted, &p)?;
    let n = shifted.window_len();
    let mut worst = 0.0f64;
    for w in 0..shifted.count {
        for i in 0..n {
            for j in 0..n {
                if shifted.masked(w, i, j) {
                    worst = worst.max(tape.weights()[(w * n + i) * n + j]);
                }
            }
        }
    }
    let back = |b: &crate::swin::WindowBatch| -> Result<f64> {
        Ok((window_reverse(b, &b.data)? != t) as u8 as f64)
    };
    Ok(vec![
        CheckRow::new(G, "regular window count - 8", (regular.count as f64 - 8.0).abs(), 0.0),
        CheckRow::new(G, "shifted window count - 8", (shifted.count as f64 - 8.0).abs(), 0.0),
        CheckRow::new(G, "shifted region count - 27", (shifted.region_count() as f64 - 27.0).abs(), 0.0),
        CheckRow::new(G, "max masked attention weight", worst, 1e-8),
        CheckRow::new(G, "partition/reverse mismatch", back(&regular)? + back(&shifted)?, 0.0),
    ])
}

fn calibration_rows(seed: u64) -> Result<Vec<CheckRow>> {
    const G: &str = "calibration";
    let dims = Dims::cube(6);
    let mut rng = Rng::new(seed).fork(3000);
    let fixed = uniform_volume(dims, &mut rng);
    let base = uniform_volume(dims, &mut rng);
    let e = mc_collect(
        |_, r| {
            let noise = r.normal_vec(dims.len());
            base.zip_map(&Volume::new(dims, noise)?, |b, n| b + 0.1 + 0.05 * n)
        },
        25,
        &mut rng,
    )?;
    let pv = predictive_variance(&e);
    let ce = calibrated_error(&e, &fixed)?;
    let gap = (0..dims.len())
        .map(|i| {
            let b = e.mean().data()[i] - fixed.data()[i];
            (ce.data()[i] - pv.data()[i] - b * b).abs()
        })
        .fold(0.0, f64::max);
    let uce_cal = uce(&ce, &ce, DEFAULT_BINS)?.uce;
    let uce_var = uce(&pv, &ce, DEFAULT_BINS)?.uce;
    Ok(vec![
        CheckRow::new(G, "decomposition residual", gap, 1e-6),
        CheckRow::new(G, "uce of calibrated error", uce_cal, 0.0),
        CheckRow::new(G, "uce of variance is positive", (uce_var <= 0.0) as u8 as f64, 0.0),
    ])
}

fn identity_rows(seed: u64) -> Result<Vec<CheckRow>> {
    const G: &str = "identities";
    let dims = Dims::new(5, 6, 7);
    let mut rng = Rng::new(seed).fork(4000);
    let a = uniform_volume(dims, &mut rng);
    let (m0, _) = mse(&a, &a)?;
    let (m1, _) = mse(&a.map(|x| x + 0.25), &a)?;
    let mask = Volume::from_fn(dims, |p| (p[0] < 3) as u8 as f64);
    let s = LabelStack::new(vec![mask])?;
    let (d0, _) = dice_loss(&s, &s)?;
    let lin = [[0.1, -0.2, 0.3], [0.05, 0.4, -0.1], [0.2, 0.0, -0.3]];
    let u = DisplacementField::from_fn(dims, |p| {
        [0, 1, 2].map(|c| (0..3).map(|d| lin[c][d] * p[d] as f64).sum::<f64>() + 0.5)
    });
    let n = dims.len() as f64;
    let diff_expect: f64 = (0..3)
        .map(|d| n * (dims[d] - 1) as f64 / dims[d] as f64 * (0..3).map(|c| lin[c][d] * lin[c][d]).sum::<f64>())
        .sum();
    let (diff, _) = diffusion_reg(&u)?;
    let (bend, _) = bending_energy(&u)?;
    let b = smooth_volume(dims, &mut rng);
    let base = lncc(&a, &b, 5)?.mean;
    let affine = lncc(&a.map(|x| 2.5 * x - 0.7), &b, 5)?.mean;
    let mu = uniform_field(dims, 1.0, &mut rng);
    let (quad, _) = laplacian_quadratic(&mu, 3.0);
    let (mu_diff, _) = diffusion_reg(&mu)?;
    Ok(vec![
        CheckRow::new(G, "mse identity", m0.abs(), 1e-6),
        CheckRow::new(G, "mse constant offset", (m1 - 0.0625).abs(), 1e-6),
        CheckRow::new(G, "dice identity", d0.abs(), 1e-6),
        CheckRow::new(G, "diffusion of affine field", (diff - diff_expect).abs(), 1e-6),
        CheckRow::new(G, "bending of affine field", bend.abs(), 1e-6),
        CheckRow::new(G, "lncc affine invariance", (affine - base).abs(), 1e-5),
        CheckRow::new(G, "laplacian quadratic vs diffusion", (quad - 3.0 * mu_diff).abs() / quad.max(1.0), 1e-6),
    ])
}

fn erf_rows(seed: u64) -> Result<Vec<CheckRow>> {
    const G: &str = "erf";
    let dims = Dims::cube(8);
    let mut rng = Rng::new(seed).fork(5000);
    let moving = smooth_volume(dims, &mut rng);
    let fixed = smooth_volume(dims, &mut rng);
    let tap = center_tap(dims);
    let net = SwinNet::new(SwinNetConfig {
        init_scale: 0.5,
        seed,
        ..SwinNetConfig::default()
    })?;
    let attn = support_fraction(&erf_probe(&net, &moving, &fixed, tap)?, 1e-8);
    let conv = support_fraction(&erf_probe(&ConvRef::new(4, seed)?, &moving, &fixed, tap)?, 1e-8);
    Ok(vec![
        CheckRow::new(G, "attention support shortfall", 1.0 - attn, 0.0),
        CheckRow::new(G, "conv reference has full support", (conv >= 1.0) as u8 as f64, 0.0),
    ])
}

/// Runs every check group.
pub fn run(seed: u64, mutation: Mutation) -> Result<SelftestReport> {
    let mut rows = gradient_suite(seed, GRADIENT_INSTANCES, mutation)?;
    rows.extend(diffeo_rows(seed, 10)?);
    rows.extend(window_rows(seed)?);
    rows.extend(calibration_rows(seed)?);
    rows.extend(identity_rows(seed)?);
    rows.extend(erf_rows(seed)?);
    let passed = rows.iter().all(|r| r.pass);
    Ok(SelftestReport { seed, rows, passed })
}
