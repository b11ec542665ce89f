mod common;

use common::*;
use morphreg_core::gradcheck::check;
use morphreg_core::losses::*;
use morphreg_core::{Dims, DisplacementField, LabelStack, Rng, Volume};

fn vol(dims: Dims, x: &[f64]) -> Volume {
    Volume::new(dims, x.to_vec()).unwrap()
}

fn field(dims: Dims, x: &[f64]) -> DisplacementField {
    DisplacementField::from_flat(dims, x).unwrap()
}

#[test]
fn mse_gradient() {
    let dims = Dims::new(4, 5, 3);
    let mut rng = Rng::new(1);
    let (a, b) = (random_volume(dims, &mut rng), random_volume(dims, &mut rng));
    let (_, g) = mse(&a, &b).unwrap();
    let c = check(|x| mse(&vol(dims, x), &b).unwrap().0, g.data(), a.data(), 1e-5);
    assert!(c.passes(1e-6), "{c:?}");
}

#[test]
fn lncc_gradient() {
    for seed in 0..4 {
        let dims = Dims::new(5, 6, 5);
        let mut rng = Rng::new(seed);
        let (a, b) = (random_volume(dims, &mut rng), random_volume(dims, &mut rng));
        let v = lncc(&a, &b, 3).unwrap();
        let c = check(|x| lncc(&vol(dims, x), &b, 3).unwrap().sum, v.grad_a.data(), a.data(), 1e-5);
        assert!(c.passes(1e-6), "seed {seed}: {c:?}");
    }
}

#[test]
fn regularizer_gradients() {
    let dims = Dims::new(5, 4, 6);
    let u = random_field(dims, 1.0, &mut Rng::new(3));
    let (_, g) = diffusion_reg(&u).unwrap();
    let c = check(|x| diffusion_reg(&field(dims, x)).unwrap().0, &g.to_flat(), &u.to_flat(), 1e-4);
    assert!(c.passes(1e-8), "{c:?}");
    let (_, g) = bending_energy(&u).unwrap();
    let c = check(|x| bending_energy(&field(dims, x)).unwrap().0, &g.to_flat(), &u.to_flat(), 1e-4);
    assert!(c.passes(1e-8), "{c:?}");
}

#[test]
fn dice_gradient() {
    let dims = Dims::cube(4);
    let mut rng = Rng::new(7);
    let fixed = LabelStack::new(vec![
        Volume::from_fn(dims, |p| (p[0] < 2) as u8 as f64),
        Volume::from_fn(dims, |p| (p[1] >= 2) as u8 as f64),
    ])
    .unwrap();
    let soft: Vec<Volume> = (0..2).map(|_| random_volume(dims, &mut rng)).collect();
    let moved = LabelStack::from_soft(soft.clone()).unwrap();
    let (_, grads) = dice_loss(&fixed, &moved).unwrap();
    let x: Vec<f64> = soft.iter().flat_map(|v| v.data().to_vec()).collect();
    let g: Vec<f64> = grads.iter().flat_map(|v| v.data().to_vec()).collect();
    let n = dims.len();
    let c = check(
        |x| {
            let m = LabelStack::from_soft(vec![vol(dims, &x[..n]), vol(dims, &x[n..])]).unwrap();
            dice_loss(&fixed, &m).unwrap().0
        },
        &g,
        &x,
        1e-5,
    );
    assert!(c.passes(1e-6), "{c:?}");
}

#[test]
fn composite_gradients_all_variants() {
    let dims = Dims::cube(6);
    for seed in 0..3u64 {
        let mut rng = Rng::new(seed);
        let fixed = smooth_image(dims, &mut rng);
        let moving = smooth_image(dims, &mut rng);
        let u = offgrid_field(dims, &mut rng);
        let lf = LabelStack::new(vec![Volume::from_fn(dims, |p| (p[0] + p[2] < 5) as u8 as f64)]).unwrap();
        let lm = LabelStack::new(vec![Volume::from_fn(dims, |p| (p[0] + p[1] < 6) as u8 as f64)]).unwrap();
        for (sim, reg, weights) in [
            (Similarity::Mse, Regularizer::Diffusion, LossWeights::mse_diffusion()),
            (Similarity::Lncc, Regularizer::Bending, LossWeights { lncc_window: 3, ..LossWeights::lncc_bending_dice() }),
        ] {
            let labels = (weights.gamma > 0.0).then_some((&lf, &lm));
            let l = composite_loss(&fixed, &moving, &u, labels, &weights, sim, reg).unwrap();
            let c = check(
                |x| composite_loss(&fixed, &moving, &field(dims, x), labels, &weights, sim, reg).unwrap().total,
                &l.grad_u.to_flat(),
                &u.to_flat(),
                1e-6,
            );
            assert!(c.passes(1e-4), "seed {seed} {sim:?}: {c:?}");
        }
    }
}

#[test]
fn elbo_gradients() {
    let dims = Dims::cube(5);
    let mut rng = Rng::new(11);
    let fixed = smooth_image(dims, &mut rng);
    let moving = smooth_image(dims, &mut rng);
    let mean = random_field(dims, 0.3, &mut rng);
    let logvar = DisplacementField::new(dims, [0, 1, 2].map(|_| rng.uniform_vec(dims.len(), -6.0, -4.0))).unwrap();
    let w = LossWeights { sigma2: 0.05, ..LossWeights::probabilistic() };
    let lf = LabelStack::new(vec![Volume::from_fn(dims, |p| (p[0] < 3) as u8 as f64)]).unwrap();
    let lm = LabelStack::new(vec![Volume::from_fn(dims, |p| (p[1] < 2) as u8 as f64)]).unwrap();
    let eval = |m: &DisplacementField, lv: &DisplacementField| {
        let p = GaussianPosterior::new(m.clone(), lv.clone()).unwrap();
        elbo_loss_aux(&fixed, &lf, &moving, &lm, &p, &LossWeights { sigma_s2: 0.5, ..w }, 4, &mut Rng::new(99)).unwrap()
    };
    let l = eval(&mean, &logvar);
    let c = check(|x| eval(&field(dims, x), &logvar).total, &l.grad_mean.to_flat(), &mean.to_flat(), 1e-6);
    assert!(c.passes(1e-4), "mean {c:?}");
    let c = check(|x| eval(&mean, &field(dims, x)).total, &l.grad_logvar.to_flat(), &logvar.to_flat(), 1e-6);
    assert!(c.passes(1e-4), "logvar {c:?}");
}
