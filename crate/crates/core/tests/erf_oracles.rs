mod common;

use common::*;
use morphreg_core::erf::*;
use morphreg_core::gradcheck::rel_error;
use morphreg_core::swin::{SwinNet, SwinNetConfig};
use morphreg_core::{Dims, Rng, Volume};

/// Influence map by perturbing each moving voxel in turn: `N` pairs of forward passes.
fn fd_influence(net: &dyn Network, moving: &Volume, fixed: &Volume, tap: [usize; 3], h: f64) -> Vec<f64> {
    let dims = moving.dims();
    let t = dims.index(tap[0], tap[1], tap[2]);
    let probe = |m: &Volume| -> f64 {
        let u = net.displacement(m, fixed).unwrap();
        (0..3).map(|c| u.comp(c)[t]).sum()
    };
    let mut m = moving.clone();
    (0..dims.len())
        .map(|i| {
            let orig = m.data()[i];
            m.data_mut()[i] = orig + h;
            let up = probe(&m);
            m.data_mut()[i] = orig - h;
            let down = probe(&m);
            m.data_mut()[i] = orig;
            ((up - down) / (2.0 * h)).abs()
        })
        .collect()
}

fn inputs(dims: Dims, seed: u64) -> (Volume, Volume) {
    let mut rng = Rng::new(seed);
    (smooth_image(dims, &mut rng), smooth_image(dims, &mut rng))
}

#[test]
fn attention_erf_matches_finite_differences_and_covers_the_image() {
    let dims = Dims::cube(8);
    let (m, f) = inputs(dims, 1);
    let net = SwinNet::new(SwinNetConfig { init_scale: 0.5, seed: 3, ..SwinNetConfig::default() }).unwrap();
    let tap = center_tap(dims);
    let erf = erf_probe(&net, &m, &f, tap).unwrap();
    let fd = fd_influence(&net, &m, &f, tap, 1e-5);
    let err = rel_error(erf.data(), &fd);
    assert!(err <= 1e-3, "rel err {err}");
    assert_eq!(support_fraction(&erf, 1e-8), 1.0);
    assert!(erf.at(0, 0, 0) > 0.0);
}

#[test]
fn conv_reference_erf_matches_finite_differences_and_stays_local() {
    let dims = Dims::cube(8);
    let (m, f) = inputs(dims, 2);
    let net = ConvRef::new(4, 5).unwrap();
    let tap = center_tap(dims);
    let erf = erf_probe(&net, &m, &f, tap).unwrap();
    let fd = fd_influence(&net, &m, &f, tap, 1e-5);
    assert!(rel_error(erf.data(), &fd) <= 1e-3);
    assert!(support_fraction(&erf, 1e-8) < 1.0);
    assert_eq!(erf.at(0, 0, 0), 0.0);
}

#[test]
fn default_scale_network_still_reaches_every_voxel() {
    let dims = Dims::cube(8);
    let (m, f) = inputs(dims, 4);
    let net = SwinNet::new(SwinNetConfig::default()).unwrap();
    let erf = erf_probe(&net, &m, &f, center_tap(dims)).unwrap();
    assert!(erf.data().iter().all(|&v| v > 0.0));
}

#[test]
fn support_fraction_counts_relative_threshold() {
    let v = Volume::new(Dims::new(4, 1, 1), vec![1.0, 1e-9, 1e-7, 0.0]).unwrap();
    assert_eq!(support_fraction(&v, 1e-8), 0.5);
    assert_eq!(center_tap(Dims::new(8, 5, 1)), [4, 2, 0]);
}
