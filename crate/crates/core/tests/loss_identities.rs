mod common;

use common::*;
use morphreg_core::losses::*;
use morphreg_core::{Dims, DisplacementField, LabelStack, Rng, Volume};
use proptest::prelude::*;

fn affine_field(dims: Dims, a: [[f64; 3]; 3], b: [f64; 3]) -> DisplacementField {
    DisplacementField::from_fn(dims, |p| {
        let x = p.map(|c| c as f64);
        [0, 1, 2].map(|c| (0..3).map(|d| a[c][d] * x[d]).sum::<f64>() + b[c])
    })
}

fn mask(dims: Dims, f: impl Fn([usize; 3]) -> bool) -> Volume {
    Volume::from_fn(dims, |p| f(p) as u8 as f64)
}

#[test]
fn mse_identity_and_constant_offset() {
    let dims = Dims::new(4, 5, 6);
    let a = random_volume(dims, &mut Rng::new(1));
    let (v, g) = mse(&a, &a).unwrap();
    assert_eq!(v, 0.0);
    assert!(g.data().iter().all(|&x| x == 0.0));
    let (v, _) = mse(&a.map(|x| x + 0.25), &a).unwrap();
    assert!((v - 0.0625).abs() < 1e-6);
}

#[test]
fn dice_identity_and_disjoint() {
    let dims = Dims::cube(6);
    let a = mask(dims, |p| p[0] < 3);
    let b = mask(dims, |p| p[0] >= 3);
    let s = LabelStack::new(vec![a.clone()]).unwrap();
    assert!(dice_loss(&s, &s).unwrap().0.abs() < 1e-6);
    assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
    assert_eq!(dice_score(&a, &b).unwrap(), 0.0);
    let t = LabelStack::new(vec![b.clone()]).unwrap();
    assert!((dice_loss(&s, &t).unwrap().0 - 1.0).abs() < 1e-6);
    let empty = Volume::zeros(dims);
    assert_eq!(dice_score(&empty, &empty).unwrap(), 1.0);
    // Slabs of three planes sharing two: 2 * 72 / (108 + 108).
    let c = mask(dims, |p| (1..4).contains(&p[0]));
    let d = mask(dims, |p| (2..5).contains(&p[0]));
    assert!((dice_score(&c, &d).unwrap() - 2.0 * 72.0 / 216.0).abs() < 1e-12);
}

#[test]
fn diffusion_of_affine_fields() {
    let dims = Dims::new(5, 6, 7);
    let n = dims.len() as f64;
    assert_eq!(diffusion_reg(&DisplacementField::uniform(dims, [1.0, -2.0, 3.0])).unwrap().0, 0.0);
    let a = [[0.1, -0.2, 0.3], [0.05, 0.4, -0.1], [0.2, 0.0, -0.3]];
    let u = affine_field(dims, a, [1.0, 2.0, -0.5]);
    // Each axis contributes sum_c a[c][d]^2 per forward pair, n (n_d - 1) / n_d pairs.
    let expect: f64 = (0..3)
        .map(|d| {
            let pairs = n * (dims[d] - 1) as f64 / dims[d] as f64;
            pairs * (0..3).map(|c| a[c][d] * a[c][d]).sum::<f64>()
        })
        .sum();
    assert!((diffusion_reg(&u).unwrap().0 - expect).abs() < 1e-6);
}

#[test]
fn bending_of_affine_and_quadratic_fields() {
    let dims = Dims::new(5, 6, 7);
    let a = [[0.1, -0.2, 0.3], [0.05, 0.4, -0.1], [0.2, 0.0, -0.3]];
    let (v, g) = bending_energy(&affine_field(dims, a, [0.3, 0.0, 1.0])).unwrap();
    assert!(v.abs() < 1e-6);
    assert!(g.max_abs() < 1e-6);
    // u_y = x^2 has second difference 2 along x and no mixed terms.
    let u = DisplacementField::from_fn(dims, |p| [0.0, (p[0] * p[0]) as f64, 0.0]);
    let triples = (dims.len() / dims[0] * (dims[0] - 2)) as f64;
    assert!((bending_energy(&u).unwrap().0 - 4.0 * triples).abs() < 1e-6);
    // u_z = x y has mixed difference 1 in the (x, y) term, weighted twice.
    let u = DisplacementField::from_fn(dims, |p| [0.0, 0.0, (p[0] * p[1]) as f64]);
    let cells = ((dims[0] - 1) * (dims[1] - 1) * dims[2]) as f64;
    assert!((bending_energy(&u).unwrap().0 - 2.0 * cells).abs() < 1e-6);
}

#[test]
fn lncc_is_affine_invariant() {
    let dims = Dims::cube(8);
    for seed in 0..3 {
        let mut rng = Rng::new(seed);
        let a = random_volume(dims, &mut rng);
        let b = smooth_image(dims, &mut rng);
        let base = lncc(&a, &b, 5).unwrap().mean;
        for (s, t) in [(2.0, 0.5), (0.5, -3.0), (-1.5, 1.0)] {
            let v = lncc(&a.map(|x| s * x + t), &b, 5).unwrap().mean;
            assert!((v - base).abs() < 1e-5, "seed {seed}: {v} vs {base}");
        }
        let selfcorr = lncc(&a, &a.map(|x| 3.0 * x - 1.0), 5).unwrap().mean;
        assert!((selfcorr - 1.0).abs() < 1e-5);
    }
}

#[test]
fn lncc_matches_direct_window_sums() {
    let dims = Dims::new(5, 4, 6);
    let mut rng = Rng::new(3);
    let (a, b) = (random_volume(dims, &mut rng), random_volume(dims, &mut rng));
    let r = 1isize;
    let mut total = 0.0;
    for p in dims.iter() {
        let (mut n, mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for q in dims.iter() {
            if (0..3).all(|d| (q[d] as isize - p[d] as isize).abs() <= r) {
                let (x, y) = (a.at(q[0], q[1], q[2]), b.at(q[0], q[1], q[2]));
                n += 1.0;
                sa += x;
                sb += y;
                saa += x * x;
                sbb += y * y;
                sab += x * y;
            }
        }
        let cross = sab - sa * sb / n;
        let va = saa - sa * sa / n;
        let vb = sbb - sb * sb / n;
        total += cross * cross / ((va + LNCC_EPS) * (vb + LNCC_EPS));
    }
    let v = lncc(&a, &b, 3).unwrap();
    assert!((v.sum - total).abs() < 1e-9 * total.abs().max(1.0), "{} vs {total}", v.sum);
    assert!((v.mean - total / dims.len() as f64).abs() < 1e-12);
}

#[test]
fn laplacian_quadratic_matches_explicit_graph_matrix() {
    let dims = Dims::new(4, 3, 5);
    let n = dims.len();
    let mu = random_field(dims, 1.0, &mut Rng::new(5));
    let lambda = 2.5;
    // Dense graph Laplacian D - A of the 6-neighbour grid.
    let mut lap = vec![0.0; n * n];
    for (i, p) in dims.iter().enumerate() {
        for (j, q) in dims.iter().enumerate() {
            let dist: usize = (0..3).map(|d| p[d].abs_diff(q[d])).sum();
            if dist == 1 {
                lap[i * n + j] = -1.0;
                lap[i * n + i] += 1.0;
            }
        }
    }
    let quad: f64 = (0..3)
        .map(|c| {
            let m = mu.comp(c);
            (0..n).map(|i| (0..n).map(|j| m[i] * lap[i * n + j] * m[j]).sum::<f64>()).sum::<f64>()
        })
        .sum::<f64>()
        * lambda;
    let (v, g) = laplacian_quadratic(&mu, lambda);
    assert!((v - quad).abs() < 1e-6 * quad.max(1.0), "{v} vs {quad}");
    let (diff, _) = diffusion_reg(&mu).unwrap();
    assert!((v - lambda * diff).abs() < 1e-6 * v.max(1.0));
    // Gradient is 2 lambda (D - A) mu.
    for c in 0..3 {
        let m = mu.comp(c);
        for i in 0..n {
            let expect: f64 = 2.0 * lambda * (0..n).map(|j| lap[i * n + j] * m[j]).sum::<f64>();
            assert!((g.comp(c)[i] - expect).abs() < 1e-9);
        }
    }
}

#[test]
fn ssim_identity_is_one() {
    let dims = Dims::cube(8);
    let a = smooth_image(dims, &mut Rng::new(2));
    assert!((ssim(&a, &a, 7).unwrap() - 1.0).abs() < 1e-12);
    assert!(ssim(&a, &a.map(|x| 1.0 - x), 7).unwrap() < 0.5);
    assert!(ssim(&a, &a, 9).is_err());
}

#[test]
fn composite_identity_has_zero_terms() {
    let dims = Dims::cube(6);
    let a = smooth_image(dims, &mut Rng::new(1));
    let lab = LabelStack::new(vec![mask(dims, |p| p[0] < 3)]).unwrap();
    let u = DisplacementField::zeros(dims);
    let l = composite_loss(&a, &a, &u, Some((&lab, &lab)), &LossWeights::lncc_bending_dice(), Similarity::Mse, Regularizer::Bending).unwrap();
    assert_eq!(l.similarity, 0.0);
    assert_eq!(l.regularization, 0.0);
    assert!(l.segmentation.abs() < 1e-6);
    let missing = composite_loss(&a, &a, &u, None, &LossWeights::lncc_bending_dice(), Similarity::Mse, Regularizer::Bending);
    assert!(missing.is_err());
}

#[test]
fn presets_hold_the_documented_weights() {
    let m = LossWeights::mse_diffusion();
    assert_eq!((m.lambda, m.gamma), (0.02, 0.0));
    let l = LossWeights::lncc_bending_dice();
    assert_eq!((l.lambda, l.gamma, l.lncc_window), (1.0, 1.0, 9));
    let p = LossWeights::probabilistic();
    assert_eq!((p.lambda, p.sigma2, p.sigma_s2), (20.0, 1e-4, 1e-4));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mse_is_symmetric_and_nonnegative(seed in any::<u64>()) {
        let dims = Dims::new(3, 4, 2);
        let mut rng = Rng::new(seed);
        let (a, b) = (random_volume(dims, &mut rng), random_volume(dims, &mut rng));
        let (x, _) = mse(&a, &b).unwrap();
        let (y, _) = mse(&b, &a).unwrap();
        prop_assert!(x >= 0.0);
        prop_assert_eq!(x, y);
    }

    #[test]
    fn regularizers_are_nonnegative_and_shift_invariant(seed in any::<u64>(), t in prop::array::uniform3(-3.0f64..3.0)) {
        let dims = Dims::cube(4);
        let u = random_field(dims, 1.0, &mut Rng::new(seed));
        let mut shifted = u.clone();
        shifted.axpy(1.0, &DisplacementField::uniform(dims, t)).unwrap();
        for f in [diffusion_reg, bending_energy] {
            let (a, _) = f(&u).unwrap();
            let (b, _) = f(&shifted).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
        }
    }

    #[test]
    fn lncc_mean_is_a_correlation(seed in any::<u64>()) {
        let dims = Dims::cube(5);
        let mut rng = Rng::new(seed);
        let (a, b) = (random_volume(dims, &mut rng), random_volume(dims, &mut rng));
        let v = lncc(&a, &b, 3).unwrap();
        prop_assert!(v.mean >= 0.0 && v.mean <= 1.0 + 1e-9);
        let w = lncc(&b, &a, 3).unwrap();
        prop_assert!((v.sum - w.sum).abs() < 1e-9 * v.sum.max(1.0));
    }

    #[test]
    fn dice_score_is_bounded_and_symmetric(seed in any::<u64>()) {
        let dims = Dims::cube(4);
        let mut rng = Rng::new(seed);
        let (a, b) = (random_volume(dims, &mut rng), random_volume(dims, &mut rng));
        let s = dice_score(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert_eq!(s, dice_score(&b, &a).unwrap());
    }

    #[test]
    fn box_sum_matches_brute_force(seed in any::<u64>(), r in 0usize..3) {
        let dims = Dims::new(4, 3, 5);
        let v = random_volume(dims, &mut Rng::new(seed));
        let fast = box_sum(v.data(), dims, r);
        for (i, p) in dims.iter().enumerate() {
            let slow: f64 = dims
                .iter()
                .filter(|q| (0..3).all(|d| p[d].abs_diff(q[d]) <= r))
                .map(|q| v.at(q[0], q[1], q[2]))
                .sum();
            prop_assert!((fast[i] - slow).abs() < 1e-10);
        }
    }
}
