//! Spatial transformer: resample a volume through `p - u(p)`.
//!
//! Sample coordinates are clamped to `[0, n - 1]` per axis (border
//! replication), so trilinear weights form a partition of unity everywhere.
//! Along a clamped axis the sample no longer moves with `u`, and the
//! derivative is zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, DisplacementField, LabelStack, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterpKernel {
    #[default]
    Trilinear,
    /// Inference only: labels at evaluation time.
    Nearest,
}

/// Trilinear footprint of one (possibly out-of-grid) sample point.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Stencil {
    lo: [usize; 3],
    hi: [usize; 3],
    frac: [f64; 3],
    /// Axis is inside the grid, so the sample moves with the coordinate.
    live: [bool; 3],
}

impl Stencil {
    #[inline]
    pub(crate) fn new(dims: Dims, p: [f64; 3]) -> Self {
        let mut lo = [0; 3];
        let mut hi = [0; 3];
        let mut frac = [0.0; 3];
        let mut live = [false; 3];
        for d in 0..3 {
            let n = dims[d];
            let max = (n - 1) as f64;
            let c = p[d];
            if n == 1 {
                continue;
            }
            let cc = if c < 0.0 {
                0.0
            } else if c > max {
                max
            } else {
                live[d] = true;
                c
            };
            let i0 = (cc.floor() as usize).min(n - 2);
            lo[d] = i0;
            hi[d] = i0 + 1;
            frac[d] = cc - i0 as f64;
        }
        Stencil { lo, hi, frac, live }
    }

    /// The 8 corner indices and weights, corner bits ordered (x, y, z).
    #[inline]
    pub(crate) fn corners(&self, dims: Dims) -> [(usize, f64); 8] {
        let mut out = [(0usize, 0.0f64); 8];
        for (k, slot) in out.iter_mut().enumerate() {
            let bx = (k >> 2) & 1;
            let by = (k >> 1) & 1;
            let bz = k & 1;
            let pick = |d: usize, b: usize| if b == 1 { self.hi[d] } else { self.lo[d] };
            let wt = |d: usize, b: usize| if b == 1 { self.frac[d] } else { 1.0 - self.frac[d] };
            let idx = dims.index(pick(0, bx), pick(1, by), pick(2, bz));
            *slot = (idx, wt(0, bx) * wt(1, by) * wt(2, bz));
        }
        out
    }

    #[inline]
    pub(crate) fn sample(&self, dims: Dims, data: &[f64]) -> f64 {
        self.corners(dims).iter().map(|&(i, w)| w * data[i]).sum()
    }

    /// Derivative of the interpolated value with respect to the sample
    /// coordinate; zero along clamped axes.
    #[inline]
    pub(crate) fn gradient(&self, dims: Dims, data: &[f64]) -> [f64; 3] {
        let mut g = [0.0; 3];
        let f = self.frac;
        let v = |bx: usize, by: usize, bz: usize| {
            let pick = |d: usize, b: usize| if b == 1 { self.hi[d] } else { self.lo[d] };
            data[dims.index(pick(0, bx), pick(1, by), pick(2, bz))]
        };
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        if self.live[0] {
            let d00 = v(1, 0, 0) - v(0, 0, 0);
            let d01 = v(1, 0, 1) - v(0, 0, 1);
            let d10 = v(1, 1, 0) - v(0, 1, 0);
            let d11 = v(1, 1, 1) - v(0, 1, 1);
            g[0] = lerp(lerp(d00, d01, f[2]), lerp(d10, d11, f[2]), f[1]);
        }
        if self.live[1] {
            let d00 = v(0, 1, 0) - v(0, 0, 0);
            let d01 = v(0, 1, 1) - v(0, 0, 1);
            let d10 = v(1, 1, 0) - v(1, 0, 0);
            let d11 = v(1, 1, 1) - v(1, 0, 1);
            g[1] = lerp(lerp(d00, d01, f[2]), lerp(d10, d11, f[2]), f[0]);
        }
        if self.live[2] {
            let d00 = v(0, 0, 1) - v(0, 0, 0);
            let d01 = v(0, 1, 1) - v(0, 1, 0);
            let d10 = v(1, 0, 1) - v(1, 0, 0);
            let d11 = v(1, 1, 1) - v(1, 1, 0);
            g[2] = lerp(lerp(d00, d01, f[1]), lerp(d10, d11, f[1]), f[0]);
        }
        g
    }

    #[inline]
    pub(crate) fn scatter(&self, dims: Dims, out: &mut [f64], value: f64) {
        for (i, w) in self.corners(dims) {
            out[i] += w * value;
        }
    }
}

#[inline]
fn nearest_index(dims: Dims, p: [f64; 3]) -> usize {
    let r = |d: usize| p[d].round().clamp(0.0, (dims[d] - 1) as f64) as usize;
    dims.index(r(0), r(1), r(2))
}

/// Sample coordinates `p - u(p)` of one warp, kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct WarpTape {
    dims: Dims,
    kernel: InterpKernel,
    coords: Vec<[f64; 3]>,
}

impl WarpTape {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn kernel(&self) -> InterpKernel {
        self.kernel
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    /// Interpolation weights of voxel `idx` (trilinear corners).
    pub fn weights(&self, idx: usize) -> [f64; 8] {
        Stencil::new(self.dims, self.coords[idx])
            .corners(self.dims)
            .map(|(_, w)| w)
    }
}

pub(crate) fn sample_coords(u: &DisplacementField) -> Vec<[f64; 3]> {
    let dims = u.dims();
    dims.iter()
        .enumerate()
        .map(|(i, p)| {
            let v = u.vector(i);
            [
                p[0] as f64 - v[0],
                p[1] as f64 - v[1],
                p[2] as f64 - v[2],
            ]
        })
        .collect()
}

/// `out(p) = img(p - u(p))` under `kernel`.
pub fn warp_volume(img: &Volume, u: &DisplacementField, kernel: InterpKernel) -> Result<(Volume, WarpTape)> {
    let dims = img.dims();
    dims.ensure_eq(&u.dims(), "warp image vs field")?;
    u.ensure_finite()?;
    let coords = sample_coords(u);
    let data = img.data();
    let out: Vec<f64> = match kernel {
        InterpKernel::Trilinear => coords
            .iter()
            .map(|&c| Stencil::new(dims, c).sample(dims, data))
            .collect(),
        InterpKernel::Nearest => coords.iter().map(|&c| data[nearest_index(dims, c)]).collect(),
    };
    let mut warped = Volume::new(dims, out)?;
    warped.set_spacing(img.spacing());
    Ok((warped, WarpTape { dims, kernel, coords }))
}

/// Warps every channel with `kernel`.
pub fn warp_labels_with(s: &LabelStack, u: &DisplacementField, kernel: InterpKernel) -> Result<LabelStack> {
    s.dims().ensure_eq(&u.dims(), "warp labels vs field")?;
    let channels = s
        .channels()
        .iter()
        .map(|ch| warp_volume(ch, u, kernel).map(|(v, _)| v))
        .collect::<Result<Vec<_>>>()?;
    LabelStack::from_soft(channels)
}

/// Trilinear warp of every label channel; values stay in `[0, 1]`.
pub fn warp_labels(s: &LabelStack, u: &DisplacementField) -> Result<LabelStack> {
    warp_labels_with(s, u, InterpKernel::Trilinear)
}

/// Reverse pass of a trilinear warp: returns `(d loss / d img, d loss / d u)`.
pub fn warp_vjp(tape: &WarpTape, img: &Volume, grad_out: &Volume) -> Result<(Volume, DisplacementField)> {
    if tape.kernel == InterpKernel::Nearest {
        return Err(Error::InvalidArgument(
            "nearest-neighbour warps have no usable derivative".into(),
        ));
    }
    let dims = tape.dims;
    if img.dims() != dims || grad_out.dims() != dims {
        return Err(Error::TapeMismatch(format!(
            "tape {:?}, image {:?}, gradient {:?}",
            dims.0,
            img.dims().0,
            grad_out.dims().0
        )));
    }
    let mut grad_img = vec![0.0; dims.len()];
    let mut grad_u = DisplacementField::zeros(dims);
    let data = img.data();
    for (i, (&c, &g)) in tape.coords.iter().zip(grad_out.data()).enumerate() {
        if g == 0.0 {
            continue;
        }
        let st = Stencil::new(dims, c);
        st.scatter(dims, &mut grad_img, g);
        let sg = st.gradient(dims, data);
        for (d, s) in sg.iter().enumerate() {
            grad_u.comp_mut(d)[i] = -g * s;
        }
    }
    Ok((Volume::new(dims, grad_img)?, grad_u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_volume(dims: Dims, rng: &mut Rng) -> Volume {
        Volume::new(dims, rng.uniform_vec(dims.len(), 0.0, 1.0)).unwrap()
    }

    #[test]
    fn zero_field_is_identity() {
        let dims = Dims::new(5, 6, 4);
        let img = random_volume(dims, &mut Rng::new(1));
        for k in [InterpKernel::Trilinear, InterpKernel::Nearest] {
            let (out, _) = warp_volume(&img, &DisplacementField::zeros(dims), k).unwrap();
            for (a, b) in out.data().iter().zip(img.data()) {
                assert!((a - b).abs() <= 1e-7);
            }
        }
    }

    #[test]
    fn integer_shift_hits_grid_points() {
        let dims = Dims::new(8, 3, 3);
        let img = Volume::from_fn(dims, |[x, _, _]| x as f64);
        let (out, _) = warp_volume(&img, &DisplacementField::uniform(dims, [1.0, 0.0, 0.0]), InterpKernel::Trilinear).unwrap();
        for p in dims.iter() {
            let expect = if p[0] == 0 { 0.0 } else { p[0] as f64 - 1.0 };
            assert_eq!(out.at(p[0], p[1], p[2]), expect);
        }
    }

    #[test]
    fn weights_partition_unity_even_out_of_grid() {
        let dims = Dims::cube(5);
        let mut rng = Rng::new(2);
        let n = dims.len();
        let u = DisplacementField::new(
            dims,
            [rng.uniform_vec(n, -7.0, 7.0), rng.uniform_vec(n, -7.0, 7.0), rng.uniform_vec(n, -7.0, 7.0)],
        )
        .unwrap();
        let (_, tape) = warp_volume(&Volume::zeros(dims), &u, InterpKernel::Trilinear).unwrap();
        for i in 0..n {
            let w = tape.weights(i);
            assert!(w.iter().all(|&x| x >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn half_voxel_shift_of_checkerboard_gives_half() {
        let dims = Dims::cube(6);
        let s = LabelStack::new(vec![Volume::from_fn(dims, |[x, y, z]| ((x + y + z) % 2) as f64)]).unwrap();
        let warped = warp_labels(&s, &DisplacementField::uniform(dims, [0.5, 0.0, 0.0])).unwrap();
        for x in 1..6 {
            for y in 0..6 {
                for z in 0..6 {
                    assert!((warped.channel(0).at(x, y, z) - 0.5).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_gradient_in_zero_gradient_out() {
        let dims = Dims::cube(4);
        let mut rng = Rng::new(3);
        let img = random_volume(dims, &mut rng);
        let u = DisplacementField::uniform(dims, [0.3, -0.2, 0.7]);
        let (_, tape) = warp_volume(&img, &u, InterpKernel::Trilinear).unwrap();
        let (gi, gu) = warp_vjp(&tape, &img, &Volume::zeros(dims)).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert_eq!(gu.max_abs(), 0.0);
    }

    #[test]
    fn constant_image_has_no_field_gradient() {
        let dims = Dims::cube(4);
        let img = Volume::filled(dims, 3.0);
        let u = DisplacementField::uniform(dims, [0.3, -0.2, 0.7]);
        let (_, tape) = warp_volume(&img, &u, InterpKernel::Trilinear).unwrap();
        let (_, gu) = warp_vjp(&tape, &img, &Volume::filled(dims, 1.0)).unwrap();
        assert!(gu.max_abs() < 1e-15);
    }

    #[test]
    fn nearest_tape_rejected_by_vjp() {
        let dims = Dims::cube(3);
        let img = Volume::zeros(dims);
        let (_, tape) = warp_volume(&img, &DisplacementField::zeros(dims), InterpKernel::Nearest).unwrap();
        assert!(warp_vjp(&tape, &img, &img).is_err());
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let img = Volume::zeros(Dims::cube(3));
        assert!(warp_volume(&img, &DisplacementField::zeros(Dims::cube(4)), InterpKernel::Trilinear).is_err());
        let (_, tape) = warp_volume(&img, &DisplacementField::zeros(Dims::cube(3)), InterpKernel::Trilinear).unwrap();
        assert!(matches!(
            warp_vjp(&tape, &Volume::zeros(Dims::cube(4)), &Volume::zeros(Dims::cube(4))),
            Err(Error::TapeMismatch(_))
        ));
    }
}
