//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Quantities are recomputed here with direct oracles where the
//! library offers a shortcut.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use morphreg_core::erf::{center_tap, erf_probe, support_fraction, ConvRef, Network};
use morphreg_core::fields::{compose, scaling_and_squaring};
use morphreg_core::gradcheck::rel_error;
use morphreg_core::losses::{
    bending_energy, dice_loss, diffusion_reg, laplacian_quadratic, lncc, mse, LossWeights, Regularizer, Similarity,
};
use morphreg_core::phantom::{face_taper, gaussian_smooth, make_phantom, smooth_random_field, PhantomKind};
use morphreg_core::register::{deform_register, DeformKind, DeformParam, OptimConfig};
use morphreg_core::selftest::{gradient_suite, Mutation};
use morphreg_core::swin::{window_attention, window_partition, window_reverse, SwinNet, SwinNetConfig, SwinParams, TokenGrid, WindowSpec};
use morphreg_core::uncertainty::{calibrated_error, mc_collect, predictive_variance, uce, DEFAULT_BINS, DEFAULT_SAMPLES};
use morphreg_core::{Dims, DisplacementField, LabelStack, Rng, VelocityField, Volume};

type Outcome = Result<(bool, String), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn smooth_input(dims: Dims, rng: &mut Rng) -> Volume {
    let raw = rng.uniform_vec(dims.len(), 0.0, 1.0);
    Volume::new(dims, gaussian_smooth(&raw, dims, 1.0)).unwrap()
}

/// Gradient integrity: every VJP against central differences.
fn gradients() -> Outcome {
    let start = Instant::now();
    let rows = gradient_suite(0, 6, Mutation::None).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    let ops = ["warp", "diffusion", "bending", "lncc", "dice", "bspline", "svf", "attention"];
    let missing: Vec<&str> = ops.iter().copied().filter(|op| !rows.iter().any(|r| r.name.contains(op))).collect();
    let failed: Vec<String> = rows.iter().filter(|r| !r.pass).map(|r| format!("{} {:.2e}", r.name, r.value)).collect();
    let worst = rows.iter().map(|r| r.value / r.tolerance).fold(0.0, f64::max);
    let ok = rows.len() >= 50 && missing.is_empty() && failed.is_empty() && secs <= 300.0;
    Ok((
        ok,
        format!(
            "{} checks, worst error/tolerance {worst:.3}, {:.1}s (<= 300s), missing {missing:?}, failed {failed:?}",
            rows.len(),
            secs
        ),
    ))
}

/// Direct forward-difference `det(I + grad u)`; one-sided backward on far faces.
fn folded_voxels(u: &DisplacementField) -> usize {
    let dims = u.dims();
    let diff = |c: usize, p: [usize; 3], d: usize| -> f64 {
        let f = u.comp(c);
        let mut q = p;
        if p[d] + 1 < dims[d] {
            q[d] += 1;
            f[dims.index(q[0], q[1], q[2])] - f[dims.index(p[0], p[1], p[2])]
        } else {
            q[d] -= 1;
            f[dims.index(p[0], p[1], p[2])] - f[dims.index(q[0], q[1], q[2])]
        }
    };
    dims.iter()
        .filter(|&p| {
            let j: [[f64; 3]; 3] =
                std::array::from_fn(|c| std::array::from_fn(|d| (c == d) as u8 as f64 + diff(c, p, d)));
            let det = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
            det <= 0.0
        })
        .count()
}

/// Max `|exp(v) ∘ exp(-v)|` over voxels at least `margin` from every face.
fn residual(v: &DisplacementField, margin: usize) -> Result<f64, String> {
    let dims = v.dims();
    let fwd = scaling_and_squaring(&VelocityField(v.clone()), 7).map_err(err)?;
    let inv = scaling_and_squaring(&VelocityField(v.scaled(-1.0)), 7).map_err(err)?;
    let r = compose(&fwd, &inv).map_err(err)?;
    Ok(dims
        .iter()
        .enumerate()
        .filter(|(_, p)| (0..3).all(|d| p[d] >= margin && p[d] + margin < dims[d]))
        .map(|(i, _)| r.vector(i).iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(0.0, f64::max))
}

/// Diffeomorphism suite over 100 seeds. Untapered fields are checked away
/// from the faces (clamped sampling breaks invertibility where the flow
/// leaves the grid); face-tapered fields are checked on the full grid.
fn diffeomorphism() -> Outcome {
    let dims = Dims::cube(16);
    let (mut folded, mut interior, mut tfolded, mut full, mut vmax) = (0, 0.0f64, 0, 0.0f64, 0.0f64);
    for s in 0..100 {
        let mut rng = Rng::new(s);
        let v = smooth_random_field(dims, 6.0, 3.0, &mut rng);
        let t = face_taper(&v, 1.5);
        vmax = vmax.max(v.max_norm()).max(t.max_norm());
        folded += (folded_voxels(&scaling_and_squaring(&VelocityField(v.clone()), 7).map_err(err)?) > 0) as usize;
        tfolded += (folded_voxels(&scaling_and_squaring(&VelocityField(t.clone()), 7).map_err(err)?) > 0) as usize;
        interior = interior.max(residual(&v, 3)?);
        full = full.max(residual(&t, 0)?);
    }
    let ok = folded == 0 && tfolded == 0 && interior <= 0.1 && full <= 0.1 && vmax <= 3.0 + 1e-9;
    Ok((
        ok,
        format!(
            "max|v| {vmax:.3}; |v|=3: folded seeds {folded}/100, interior residual {interior:.4}; \
             tapered |v|=1.5: folded seeds {tfolded}/100, full residual {full:.4} (<= 0.1)"
        ),
    ))
}

/// Window partition on 4x8x12 tokens with 2x4x6 windows.
fn windows() -> Outcome {
    let dims = Dims::new(4, 8, 12);
    let c = 2;
    let mut rng = Rng::new(5);
    let t = TokenGrid::new(dims, c, rng.uniform_vec(dims.len() * c, -1.0, 1.0)).map_err(err)?;
    let spec = WindowSpec::new([2, 4, 6]).map_err(err)?;
    let regular = window_partition(&t, spec, false);
    let shifted = window_partition(&t, spec, true);
    // Every token lands in exactly one window slot.
    let covered = |b: &morphreg_core::swin::WindowBatch| {
        let mut seen = vec![0usize; dims.len()];
        b.source.iter().flatten().for_each(|&s| seen[s] += 1);
        seen.iter().all(|&n| n == 1)
    };
    // Regions of the cyclic shift: three slabs per axis.
    let mut regions = std::collections::BTreeSet::new();
    let shift = [1usize, 2, 3];
    for p in dims.iter() {
        let slab = |d: usize| {
            let w = [2, 4, 6][d];
            let rolled = (p[d] + shift[d]) % dims[d];
            if rolled < dims[d] - w {
                0
            } else if rolled < dims[d] - shift[d] {
                1
            } else {
                2
            }
        };
        regions.insert([slab(0), slab(1), slab(2)]);
    }
    let mut p = SwinParams::init(c, 1, spec, &mut rng).map_err(err)?;
    let flat: Vec<f64> = p.to_flat().iter().map(|v| v * 20.0).collect();
    p.set_flat(&flat).map_err(err)?;
    let (_, tape) = window_attention(&shifted, &p).map_err(err)?;
    let n = shifted.window_len();
    let mut worst = 0.0f64;
    let mut masked = 0usize;
    for w in 0..shifted.count {
        for i in 0..n {
            for j in 0..n {
                if shifted.masked(w, i, j) {
                    masked += 1;
                    worst = worst.max(tape.weights()[(w * n + i) * n + j]);
                }
            }
        }
    }
    let same = |b| window_reverse(b, &b.data).map(|r| r == t).unwrap_or(false);
    let ok = regular.count == 8
        && shifted.count == 8
        && shifted.region_count() == 27
        && regions.len() == 27
        && covered(&regular)
        && covered(&shifted)
        && masked > 0
        && worst <= 1e-8
        && same(&regular)
        && same(&shifted);
    Ok((
        ok,
        format!(
            "windows {}/{} (8/8), regions {} (oracle {}, 27), max masked weight {worst:.1e} (<= 1e-8) over {masked} pairs, round trip {}",
            regular.count,
            shifted.count,
            shifted.region_count(),
            regions.len(),
            same(&regular) && same(&shifted)
        ),
    ))
}

/// Calibration identity over random 25-sample ensembles.
fn calibration() -> Outcome {
    let start = Instant::now();
    let dims = Dims::new(6, 5, 7);
    let (mut gap, mut uce_cal, mut uce_var_min) = (0.0f64, 0.0f64, f64::INFINITY);
    for s in 0..20 {
        let mut rng = Rng::new(s);
        let fixed = Volume::new(dims, rng.uniform_vec(dims.len(), 0.0, 1.0)).map_err(err)?;
        let base = Volume::new(dims, rng.uniform_vec(dims.len(), 0.0, 1.0)).map_err(err)?;
        let bias = rng.uniform_range(0.05, 0.3);
        let spread = rng.uniform_range(0.01, 0.2);
        let e = mc_collect(
            |_, r| {
                let noise = r.normal_vec(dims.len());
                base.zip_map(&Volume::new(dims, noise)?, |b, n| b + bias + spread * n)
            },
            DEFAULT_SAMPLES,
            &mut rng,
        )
        .map_err(err)?;
        let pv = predictive_variance(&e);
        let ce = calibrated_error(&e, &fixed).map_err(err)?;
        for i in 0..dims.len() {
            // Two-pass oracle over the raw samples.
            let xs: Vec<f64> = e.samples().iter().map(|v| v.data()[i]).collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
            let sq = xs.iter().map(|x| (x - fixed.data()[i]).powi(2)).sum::<f64>() / xs.len() as f64;
            let b = m - fixed.data()[i];
            gap = gap.max((sq - var - b * b).abs()).max((ce.data()[i] - pv.data()[i] - b * b).abs());
            gap = gap.max((ce.data()[i] - sq).abs()).max((pv.data()[i] - var).abs());
        }
        uce_cal = uce_cal.max(uce(&ce, &ce, DEFAULT_BINS).map_err(err)?.uce);
        uce_var_min = uce_var_min.min(uce(&pv, &ce, DEFAULT_BINS).map_err(err)?.uce);
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = gap <= 1e-6 && uce_cal == 0.0 && uce_var_min > 0.0;
    Ok((
        ok,
        format!(
            "20 ensembles: identity residual {gap:.1e} (<= 1e-6), uce calibrated {uce_cal} (= 0), \
             min uce variance {uce_var_min:.3e} (> 0), {secs:.2}s"
        ),
    ))
}

/// Sphere onto ellipsoid at 24^3; then the unregularized dense variant.
fn registration() -> Outcome {
    let dims = Dims::cube(24);
    let mut rng = Rng::new(0);
    let (m, ml) = make_phantom(&PhantomKind::Sphere { radius: 6.0 }, dims, &mut rng).map_err(err)?;
    let (f, fl) = make_phantom(&PhantomKind::Ellipsoid { semi_axes: [8.0, 6.0, 4.5] }, dims, &mut rng).map_err(err)?;
    let cfg = OptimConfig {
        iterations: 500,
        step: 0.02,
        similarity: Similarity::Lncc,
        regularizer: Regularizer::Bending,
        weights: LossWeights::lncc_bending_dice(),
        ..OptimConfig::default()
    };
    let start = Instant::now();
    let svf = deform_register(&m, &f, Some((&fl, &ml)), DeformParam::zeros(DeformKind::default(), dims).map_err(err)?, &cfg, false)
        .map_err(err)?;
    let svf_secs = start.elapsed().as_secs_f64();
    let dense_cfg = OptimConfig { weights: LossWeights { lambda: 0.0, ..cfg.weights }, ..cfg };
    let start = Instant::now();
    let dense = deform_register(&m, &f, Some((&fl, &ml)), DeformParam::zeros(DeformKind::Dense, dims).map_err(err)?, &dense_cfg, false)
        .map_err(err)?;
    let dense_secs = start.elapsed().as_secs_f64();
    let r = &svf.report;
    let monotone = r.loss_trace.windows(2).all(|w| w[1] <= w[0]);
    // The dense variant has no regularizer, so its loss is the data term alone.
    let svf_data = r.final_similarity + cfg.weights.gamma * r.final_segmentation;
    let dense_data = dense.report.final_loss;
    let ok = r.dice[0] > 0.9
        && r.folded_fraction == 0.0
        && monotone
        && r.loss_trace.len() <= 500
        && svf_secs <= 120.0
        && dense_secs <= 120.0
        && dense_data < svf_data;
    Ok((
        ok,
        format!(
            "svf: dice {:.4} (> 0.9), folded {} (= 0), monotone {monotone}, {svf_secs:.1}s (<= 120s); \
             dense lambda=0: loss {dense_data:.4} < svf data loss {svf_data:.4}, folded {:.4}, {dense_secs:.1}s",
            r.dice[0], r.folded_fraction, dense.report.folded_fraction
        ),
    ))
}

/// One moving voxel perturbed per pair of forward passes.
fn fd_influence(net: &dyn Network, moving: &Volume, fixed: &Volume, tap: [usize; 3]) -> Result<Vec<f64>, String> {
    let dims = moving.dims();
    let t = dims.index(tap[0], tap[1], tap[2]);
    let h = 1e-5;
    let probe = |m: &Volume| -> Result<f64, String> {
        let u = net.displacement(m, fixed).map_err(err)?;
        Ok((0..3).map(|c| u.comp(c)[t]).sum())
    };
    let mut m = moving.clone();
    (0..dims.len())
        .map(|i| {
            let orig = m.data()[i];
            m.data_mut()[i] = orig + h;
            let up = probe(&m)?;
            m.data_mut()[i] = orig - h;
            let down = probe(&m)?;
            m.data_mut()[i] = orig;
            Ok(((up - down) / (2.0 * h)).abs())
        })
        .collect()
}

/// Receptive-field contrast on 8^3 inputs.
fn erf_contrast() -> Outcome {
    let dims = Dims::cube(8);
    let mut rng = Rng::new(11);
    let moving = smooth_input(dims, &mut rng);
    let fixed = smooth_input(dims, &mut rng);
    let tap = center_tap(dims);
    let swin = SwinNet::new(SwinNetConfig { init_scale: 0.5, seed: 1, ..SwinNetConfig::default() }).map_err(err)?;
    let conv = ConvRef::new(4, 1).map_err(err)?;
    let a = erf_probe(&swin, &moving, &fixed, tap).map_err(err)?;
    let c = erf_probe(&conv, &moving, &fixed, tap).map_err(err)?;
    let ea = rel_error(a.data(), &fd_influence(&swin, &moving, &fixed, tap)?);
    let ec = rel_error(c.data(), &fd_influence(&conv, &moving, &fixed, tap)?);
    let (sa, sc) = (support_fraction(&a, 1e-8), support_fraction(&c, 1e-8));
    let ok = sa == 1.0 && sc < 1.0 && ea <= 1e-3 && ec <= 1e-3;
    Ok((
        ok,
        format!("support attention {sa} (= 1), conv {sc:.4} (< 1); fd rel err {ea:.1e}, {ec:.1e} (<= 1e-3)"),
    ))
}

/// Analytic loss values and the quadratic-form cross-check.
fn identities() -> Outcome {
    let dims = Dims::new(5, 6, 7);
    let mut rng = Rng::new(21);
    let a = Volume::new(dims, rng.uniform_vec(dims.len(), 0.0, 1.0)).map_err(err)?;
    // Textured inputs keep every window variance far above the LNCC epsilon,
    // which is what bounds the invariance.
    let b = Volume::new(dims, rng.uniform_vec(dims.len(), 0.0, 1.0)).map_err(err)?;
    let mut e: Vec<(&str, f64, f64)> = Vec::new();
    e.push(("mse(a, a)", mse(&a, &a).map_err(err)?.0.abs(), 1e-6));
    e.push(("mse offset", (mse(&a.map(|x| x + 0.25), &a).map_err(err)?.0 - 0.0625).abs(), 1e-6));
    let mask = Volume::from_fn(dims, |p| (p[0] + p[2] < 6) as u8 as f64);
    let s = LabelStack::new(vec![mask.clone()]).map_err(err)?;
    e.push(("dice(s, s)", dice_loss(&s, &s).map_err(err)?.0.abs(), 1e-6));
    let lin = [[0.1, -0.2, 0.3], [0.05, 0.4, -0.1], [0.2, 0.0, -0.3]];
    let off = [0.5, -1.0, 2.0];
    let u = DisplacementField::from_fn(dims, |p| {
        [0, 1, 2].map(|c| (0..3).map(|d| lin[c][d] * p[d] as f64).sum::<f64>() + off[c])
    });
    // Each forward pair along axis d contributes sum_c lin[c][d]^2.
    let pairs = |d: usize| (dims.len() / dims[d] * (dims[d] - 1)) as f64;
    let diff_expect: f64 = (0..3).map(|d| pairs(d) * (0..3).map(|c| lin[c][d] * lin[c][d]).sum::<f64>()).sum();
    e.push(("diffusion(affine)", (diffusion_reg(&u).map_err(err)?.0 - diff_expect).abs(), 1e-6));
    e.push(("bending(affine)", bending_energy(&u).map_err(err)?.0.abs(), 1e-6));
    for w in [3, 5] {
        let base = lncc(&a, &b, w).map_err(err)?.mean;
        let mut dev = 0.0f64;
        for (s, o) in [(2.5, -0.7), (-0.5, 3.0), (4.0, 1.0)] {
            dev = dev.max((lncc(&a.map(|x| s * x + o), &b, w).map_err(err)?.mean - base).abs());
            dev = dev.max((lncc(&a, &b.map(|x| s * x + o), w).map_err(err)?.mean - base).abs());
        }
        e.push(("lncc affine invariance", dev, 1e-5));
    }
    // Explicit edge sum over the 6-neighbour grid graph.
    let mu = DisplacementField::new(dims, [0, 1, 2].map(|_| rng.uniform_vec(dims.len(), -1.0, 1.0))).map_err(err)?;
    let lambda = 3.0;
    let mut edges = 0.0;
    for p in dims.iter() {
        for d in 0..3 {
            if p[d] + 1 < dims[d] {
                let mut q = p;
                q[d] += 1;
                let (i, j) = (dims.index(p[0], p[1], p[2]), dims.index(q[0], q[1], q[2]));
                edges += (0..3).map(|c| (mu.comp(c)[i] - mu.comp(c)[j]).powi(2)).sum::<f64>();
            }
        }
    }
    let quad = laplacian_quadratic(&mu, lambda).0;
    e.push(("mu^T Lambda mu vs edge sum", (quad - lambda * edges).abs() / (lambda * edges), 1e-6));
    e.push(("mu^T Lambda mu vs diffusion", (quad - lambda * diffusion_reg(&mu).map_err(err)?.0).abs() / quad, 1e-6));
    let bad: Vec<String> = e.iter().filter(|(_, v, t)| !(v <= t)).map(|(n, v, t)| format!("{n} {v:.1e} > {t:.0e}")).collect();
    let worst = e.iter().map(|(_, v, _)| *v).fold(0.0, f64::max);
    Ok((bad.is_empty(), format!("{} identities, largest deviation {worst:.1e}, failures {bad:?}", e.len())))
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_morphreg")
}

fn run_cli(args: &[&str], cwd: &Path) -> Result<Vec<u8>, String> {
    let out = Command::new(bin()).args(args).current_dir(cwd).output().map_err(err)?;
    if !out.status.success() {
        return Err(format!("{args:?} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Runs every command twice in separate directories and compares all outputs.
fn reproducibility() -> Outcome {
    let commands: Vec<Vec<&str>> = vec![
        vec!["selftest", "--seed", "3", "--out", "selftest.json"],
        vec!["phantom", "--kind", "sphere", "--dims", "16", "--radius", "4", "--seed", "7", "--out", "m"],
        vec!["phantom", "--kind", "ellipsoid", "--dims", "16", "--semi-axes", "5,4,3", "--seed", "8", "--out", "f"],
        vec!["phantom", "--kind", "two-blob", "--dims", "16", "--radius", "3", "--out", "b"],
        vec![
            "register", "--moving", "m/image", "--fixed", "f/image", "--moving-labels", "m/image_label0",
            "--fixed-labels", "f/image_label0", "--preset", "lncc-bending-dice", "--window", "5", "--iterations", "40",
            "--out", "r",
        ],
        vec!["register", "--moving", "m/image", "--fixed", "f/image", "--affine", "--param", "dense", "--iterations", "20", "--levels", "2", "--out", "ra"],
        vec!["register", "--moving", "m/image", "--fixed", "f/image", "--param", "bspline-svf", "--iterations", "20", "--out", "rb"],
        vec!["uncertainty", "--moving", "m/image", "--fixed", "f/image", "--iterations", "20", "--seed", "4", "--out", "u"],
        vec![
            "uncertainty", "--moving", "m/image", "--fixed", "f/image", "--iterations", "20", "--sampler", "dropout",
            "--samples", "6", "--seed", "4", "--out", "ud",
        ],
        vec!["erf", "--seed", "2", "--out", "e"],
        vec!["erf", "--net", "conv", "--seed", "2", "--out", "ec"],
    ];
    let dirs = [tempfile::tempdir().map_err(err)?, tempfile::tempdir().map_err(err)?];
    let mut stdout = [Vec::new(), Vec::new()];
    for (k, dir) in dirs.iter().enumerate() {
        for args in &commands {
            stdout[k].push(run_cli(args, dir.path())?);
        }
    }
    let (a, b) = (files(dirs[0].path()), files(dirs[1].path()));
    let differing: Vec<String> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.display().to_string())
        .collect();
    let ok = a.len() == b.len() && differing.is_empty() && stdout[0] == stdout[1];
    Ok((
        ok,
        format!(
            "{} commands, {} output files compared byte for byte, differing {differing:?}, stdout identical {}",
            commands.len(),
            a.len(),
            stdout[0] == stdout[1]
        ),
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient integrity", gradients),
        ("diffeomorphism suite", diffeomorphism),
        ("window machinery", windows),
        ("calibration identity", calibration),
        ("desk registration", registration),
        ("erf contrast", erf_contrast),
        ("loss identities", identities),
        ("reproducibility", reproducibility),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (pass, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
        failed += !pass as usize;
        println!(
            "{} criterion {} {name}: {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
