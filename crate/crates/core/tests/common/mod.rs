#![allow(dead_code)]

use morphreg_core::{Dims, DisplacementField, Rng, Volume};

/// Smooth random image: a few random low-frequency sinusoids in roughly [0, 1].
pub fn smooth_image(dims: Dims, rng: &mut Rng) -> Volume {
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

/// Displacement whose sampling positions sit well away from grid lines, so
/// trilinear interpolation is smooth in a neighbourhood of every sample.
pub fn offgrid_field(dims: Dims, rng: &mut Rng) -> DisplacementField {
    let n = dims.len();
    let comps = [0, 1, 2].map(|_| {
        (0..n)
            .map(|_| {
                let whole = rng.index(3) as f64 - 1.0;
                let frac = rng.uniform_range(0.3, 0.7);
                whole + frac
            })
            .collect()
    });
    DisplacementField::new(dims, comps).unwrap()
}

pub fn random_field(dims: Dims, scale: f64, rng: &mut Rng) -> DisplacementField {
    let n = dims.len();
    DisplacementField::new(dims, [0, 1, 2].map(|_| rng.uniform_vec(n, -scale, scale))).unwrap()
}

pub fn random_volume(dims: Dims, rng: &mut Rng) -> Volume {
    Volume::new(dims, rng.uniform_vec(dims.len(), 0.0, 1.0)).unwrap()
}
