//! Synthetic test data: analytic phantoms and smooth random fields.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::volume::{Dims, DisplacementField, LabelStack, Volume};

/// Shape family of a phantom. Shapes are centred at `(dims - 1) / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PhantomKind {
    Sphere { radius: f64 },
    Ellipsoid { semi_axes: [f64; 3] },
    /// Two spheres offset by `±separation / 2` along x; one label channel each.
    TwoBlob { radius: f64, separation: f64 },
}

/// Background and foreground intensity; the edge is a logistic ramp of
/// roughly one voxel.
const BACKGROUND: f64 = 0.1;
const FOREGROUND: f64 = 0.9;
const EDGE_WIDTH: f64 = 0.75;
const NOISE: f64 = 0.02;

struct Blob {
    center: [f64; 3],
    semi_axes: [f64; 3],
}

impl Blob {
    /// Normalised radius: `<= 1` inside.
    fn level(&self, p: [usize; 3]) -> f64 {
        (0..3)
            .map(|d| {
                let t = (p[d] as f64 - self.center[d]) / self.semi_axes[d];
                t * t
            })
            .sum::<f64>()
            .sqrt()
    }

    fn soft(&self, p: [usize; 3]) -> f64 {
        let mean_axis = self.semi_axes.iter().sum::<f64>() / 3.0;
        let signed = (1.0 - self.level(p)) * mean_axis;
        1.0 / (1.0 + (-signed / EDGE_WIDTH).exp())
    }
}

pub fn phantom_center(dims: Dims) -> [f64; 3] {
    [
        (dims[0] as f64 - 1.0) / 2.0,
        (dims[1] as f64 - 1.0) / 2.0,
        (dims[2] as f64 - 1.0) / 2.0,
    ]
}

fn blobs(kind: &PhantomKind, dims: Dims) -> Result<Vec<Blob>> {
    let center = phantom_center(dims);
    let positive = |v: f64| v.is_finite() && v > 0.0;
    match *kind {
        PhantomKind::Sphere { radius } => {
            if !positive(radius) {
                return Err(Error::InvalidArgument(format!(
                    "sphere radius must be positive, got {radius}"
                )));
            }
            Ok(vec![Blob {
                center,
                semi_axes: [radius; 3],
            }])
        }
        PhantomKind::Ellipsoid { semi_axes } => {
            if !semi_axes.iter().all(|&a| positive(a)) {
                return Err(Error::InvalidArgument(format!(
                    "ellipsoid semi-axes must be positive, got {semi_axes:?}"
                )));
            }
            Ok(vec![Blob { center, semi_axes }])
        }
        PhantomKind::TwoBlob { radius, separation } => {
            if !positive(radius) || !separation.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "two-blob needs positive radius and finite separation, got {radius}, {separation}"
                )));
            }
            let h = separation / 2.0;
            Ok(vec![
                Blob {
                    center: [center[0] - h, center[1], center[2]],
                    semi_axes: [radius; 3],
                },
                Blob {
                    center: [center[0] + h, center[1], center[2]],
                    semi_axes: [radius; 3],
                },
            ])
        }
    }
}

/// Builds an intensity volume in `[0, 1]` and the indicator masks of its
/// generating shapes. The seed only drives a low-amplitude intensity texture;
/// masks are purely analytic.
pub fn make_phantom(kind: &PhantomKind, dims: Dims, rng: &mut Rng) -> Result<(Volume, LabelStack)> {
    if dims.min_extent() < 8 {
        return Err(Error::InvalidArgument(format!(
            "phantom dims must be >= 8 per axis, got {:?}",
            dims.0
        )));
    }
    let blobs = blobs(kind, dims)?;
    let masks = blobs
        .iter()
        .map(|b| Volume::from_fn(dims, |p| if b.level(p) <= 1.0 { 1.0 } else { 0.0 }))
        .collect();
    let image = Volume::from_fn(dims, |p| {
        let s = blobs.iter().map(|b| b.soft(p)).fold(0.0, f64::max);
        let v = BACKGROUND + (FOREGROUND - BACKGROUND) * s + NOISE * (2.0 * rng.uniform() - 1.0);
        v.clamp(0.0, 1.0)
    });
    Ok((image, LabelStack::new(masks)?))
}

/// Separable Gaussian blur with clamped borders, truncated at `3 sigma`.
pub fn gaussian_smooth(data: &[f64], dims: Dims, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();

    let mut cur = data.to_vec();
    let mut next = vec![0.0; cur.len()];
    for axis in 0..3 {
        let n = dims[axis] as isize;
        let stride = dims.stride(axis);
        for (i, out) in next.iter_mut().enumerate() {
            let pos = dims.coords(i)[axis] as isize;
            let base = i - pos as usize * stride;
            *out = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| {
                    let q = (pos + k as isize - radius).clamp(0, n - 1) as usize;
                    w * cur[base + q * stride]
                })
                .sum();
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// Smooth random vector field: white noise blurred with `sigma`, rescaled so
/// the largest per-voxel norm equals `max_norm`.
pub fn smooth_random_field(dims: Dims, sigma: f64, max_norm: f64, rng: &mut Rng) -> DisplacementField {
    let n = dims.len();
    let comps = [0, 1, 2].map(|_| gaussian_smooth(&rng.normal_vec(n), dims, sigma));
    let mut f = DisplacementField::new(dims, comps).expect("finite by construction");
    let m = f.max_norm();
    if m > 0.0 {
        f.scale_in_place(max_norm / m);
    }
    f
}

/// Multiplies every component by `prod_d sin^2(pi x_d / (n_d - 1))`, so the
/// field vanishes on all faces, then rescales the largest norm to `max_norm`.
/// Flows of the result never leave the volume.
pub fn face_taper(f: &DisplacementField, max_norm: f64) -> DisplacementField {
    let dims = f.dims();
    let weight = |p: [usize; 3]| -> f64 {
        (0..3)
            .map(|d| {
                if dims[d] > 1 {
                    (std::f64::consts::PI * p[d] as f64 / (dims[d] - 1) as f64).sin().powi(2)
                } else {
                    1.0
                }
            })
            .product()
    };
    let mut g = DisplacementField::from_fn(dims, |p| {
        let w = weight(p);
        f.vector(dims.index(p[0], p[1], p[2])).map(|v| v * w)
    });
    let m = g.max_norm();
    if m > 0.0 {
        g.scale_in_place(max_norm / m);
    }
    g
}
