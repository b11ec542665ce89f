//! Deformation-field algebra: composition, scaling-and-squaring
//! exponentiation of stationary velocity fields, cubic B-spline free-form
//! deformations and Jacobian-determinant folding analysis.
//!
//! All fields follow the sampling convention of [`crate::warp`]: a field `u`
//! represents the map `phi(p) = p - u(p)`.

use crate::error::{Error, Result};
use crate::volume::{Dims, DisplacementField, VelocityField, Volume};
use crate::warp::Stencil;

/// Squaring steps used when callers do not specify one.
pub const DEFAULT_SQUARING_STEPS: u32 = 7;
pub const MAX_SQUARING_STEPS: u32 = 12;

/// Displacement of `phi_a ∘ phi_b`:
/// `u(p) = u_b(p) + u_a(p - u_b(p))`, `u_a` sampled trilinearly with clamped borders.
pub fn compose(a: &DisplacementField, b: &DisplacementField) -> Result<DisplacementField> {
    let dims = a.dims();
    dims.ensure_eq(&b.dims(), "compose")?;
    let mut out = b.clone();
    for (i, p) in dims.iter().enumerate() {
        let v = b.vector(i);
        let st = Stencil::new(
            dims,
            [p[0] as f64 - v[0], p[1] as f64 - v[1], p[2] as f64 - v[2]],
        );
        for c in 0..3 {
            out.comp_mut(c)[i] += st.sample(dims, a.comp(c));
        }
    }
    Ok(out)
}

/// Reverse pass of [`compose`]: returns `(d loss / d a, d loss / d b)`.
pub fn compose_vjp(
    a: &DisplacementField,
    b: &DisplacementField,
    grad: &DisplacementField,
) -> Result<(DisplacementField, DisplacementField)> {
    let dims = a.dims();
    dims.ensure_eq(&b.dims(), "compose_vjp fields")?;
    dims.ensure_eq(&grad.dims(), "compose_vjp gradient")?;
    let mut ga = DisplacementField::zeros(dims);
    let mut gb = grad.clone();
    for (i, p) in dims.iter().enumerate() {
        let g = grad.vector(i);
        if g == [0.0; 3] {
            continue;
        }
        let v = b.vector(i);
        let st = Stencil::new(
            dims,
            [p[0] as f64 - v[0], p[1] as f64 - v[1], p[2] as f64 - v[2]],
        );
        let mut pull = [0.0; 3];
        for c in 0..3 {
            st.scatter(dims, ga.comp_mut(c), g[c]);
            let s = st.gradient(dims, a.comp(c));
            for d in 0..3 {
                pull[d] += g[c] * s[d];
            }
        }
        for d in 0..3 {
            gb.comp_mut(d)[i] -= pull[d];
        }
    }
    Ok((ga, gb))
}

fn check_steps(steps: u32) -> Result<()> {
    if !(1..=MAX_SQUARING_STEPS).contains(&steps) {
        return Err(Error::InvalidArgument(format!(
            "squaring steps must be in [1, {MAX_SQUARING_STEPS}], got {steps}"
        )));
    }
    Ok(())
}

/// Intermediate fields of one scaling-and-squaring pass.
#[derive(Debug, Clone)]
pub struct SvfTape {
    steps: u32,
    /// Input of each squaring, `inputs[0] = v / 2^T`.
    inputs: Vec<DisplacementField>,
}

impl SvfTape {
    pub fn steps(&self) -> u32 {
        self.steps
    }
}

/// `exp(v)`: scale by `1 / 2^T`, then square `T` times.
pub fn scaling_and_squaring(v: &VelocityField, steps: u32) -> Result<DisplacementField> {
    scaling_and_squaring_taped(v, steps).map(|(u, _)| u)
}

pub fn scaling_and_squaring_taped(v: &VelocityField, steps: u32) -> Result<(DisplacementField, SvfTape)> {
    check_steps(steps)?;
    v.field().ensure_finite()?;
    let mut u = v.field().scaled(1.0 / f64::powi(2.0, steps as i32));
    let mut inputs = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let next = compose(&u, &u)?;
        inputs.push(std::mem::replace(&mut u, next));
    }
    Ok((u, SvfTape { steps, inputs }))
}

/// Reverse pass through the squaring recurrence, then the `1 / 2^T` scale.
pub fn svf_vjp(tape: &SvfTape, steps: u32, grad_u: &DisplacementField) -> Result<VelocityField> {
    if steps != tape.steps {
        return Err(Error::TapeMismatch(format!(
            "svf_vjp called with T = {steps}, forward used T = {}",
            tape.steps
        )));
    }
    let dims = tape.inputs[0].dims();
    if grad_u.dims() != dims {
        return Err(Error::TapeMismatch(format!(
            "gradient {:?} vs recorded field {:?}",
            grad_u.dims().0,
            dims.0
        )));
    }
    let mut g = grad_u.clone();
    for u in tape.inputs.iter().rev() {
        let (ga, gb) = compose_vjp(u, u, &g)?;
        g = ga;
        g.axpy(1.0, &gb)?;
    }
    g.scale_in_place(1.0 / f64::powi(2.0, steps as i32));
    Ok(VelocityField(g))
}

/// Uniform cubic B-spline kernel.
#[inline]
pub fn cubic_bspline(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        2.0 / 3.0 - a * a + 0.5 * a * a * a
    } else if a < 2.0 {
        let t = 2.0 - a;
        t * t * t / 6.0
    } else {
        0.0
    }
}

/// Control-point displacements on a regular lattice with integer voxel
/// spacing. Control point `c` sits at image coordinate `(c - 1) * spacing`,
/// giving one control point of margin before the first voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct BsplineLattice {
    spacing: [usize; 3],
    ctrl_dims: Dims,
    comps: [Vec<f64>; 3],
}

impl BsplineLattice {
    /// Zero lattice just large enough to cover `dims`.
    pub fn for_image(dims: Dims, spacing: [usize; 3]) -> Result<Self> {
        if spacing.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "lattice spacing must be >= 1, got {spacing:?}"
            )));
        }
        let ctrl_dims = Dims([0, 1, 2].map(|d| (dims[d] - 1) / spacing[d] + 4));
        Self::zeros(ctrl_dims, spacing)
    }

    pub fn zeros(ctrl_dims: Dims, spacing: [usize; 3]) -> Result<Self> {
        if spacing.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "lattice spacing must be >= 1, got {spacing:?}"
            )));
        }
        let n = ctrl_dims.len();
        Ok(BsplineLattice {
            spacing,
            ctrl_dims,
            comps: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        })
    }

    pub fn from_comps(ctrl_dims: Dims, spacing: [usize; 3], comps: [Vec<f64>; 3]) -> Result<Self> {
        let mut lat = Self::zeros(ctrl_dims, spacing)?;
        for (c, comp) in comps.into_iter().enumerate() {
            if comp.len() != ctrl_dims.len() {
                return Err(Error::DimMismatch(format!(
                    "lattice channel {c}: {} values for {:?}",
                    comp.len(),
                    ctrl_dims.0
                )));
            }
            lat.comps[c] = comp;
        }
        Ok(lat)
    }

    pub fn spacing(&self) -> [usize; 3] {
        self.spacing
    }

    pub fn ctrl_dims(&self) -> Dims {
        self.ctrl_dims
    }

    pub fn comp(&self, c: usize) -> &[f64] {
        &self.comps[c]
    }

    pub fn comp_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.comps[c]
    }

    /// Image coordinate of control index `i` along `axis`.
    pub fn knot(&self, axis: usize, i: usize) -> f64 {
        (i as f64 - 1.0) * self.spacing[axis] as f64
    }

    /// Every voxel of `dims` has its full 4×4×4 support on the lattice.
    pub fn covers(&self, dims: Dims) -> bool {
        (0..3).all(|d| (dims[d] - 1) / self.spacing[d] + 3 < self.ctrl_dims[d])
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.comps.concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.ctrl_dims.len();
        if flat.len() != 3 * n {
            return Err(Error::DimMismatch(format!(
                "flat lattice of length {} for {} control points",
                flat.len(),
                n
            )));
        }
        for c in 0..3 {
            self.comps[c].copy_from_slice(&flat[c * n..(c + 1) * n]);
        }
        Ok(())
    }

    /// Per-axis table: for each voxel coordinate, the first control index and
    /// the four basis weights.
    fn basis_table(&self, dims: Dims) -> [Vec<(usize, [f64; 4])>; 3] {
        [0, 1, 2].map(|d| {
            let delta = self.spacing[d];
            (0..dims[d])
                .map(|p| {
                    let i = p / delta;
                    let t = (p % delta) as f64 / delta as f64;
                    (
                        i,
                        [
                            cubic_bspline(t + 1.0),
                            cubic_bspline(t),
                            cubic_bspline(1.0 - t),
                            cubic_bspline(2.0 - t),
                        ],
                    )
                })
                .collect()
        })
    }

    fn ensure_covers(&self, dims: Dims) -> Result<()> {
        if !self.covers(dims) {
            return Err(Error::InvalidArgument(format!(
                "lattice {:?} with spacing {:?} does not cover image {:?}",
                self.ctrl_dims.0, self.spacing, dims.0
            )));
        }
        Ok(())
    }
}

/// Dense field `u(p) = sum_c u_B(c) prod_d beta((p_d - k(c_d)) / spacing_d)`.
pub fn bspline_to_dense(lat: &BsplineLattice, dims: Dims) -> Result<DisplacementField> {
    lat.ensure_covers(dims)?;
    let table = lat.basis_table(dims);
    let cd = lat.ctrl_dims;
    let mut out = DisplacementField::zeros(dims);
    for (idx, p) in dims.iter().enumerate() {
        let (ix, wx) = table[0][p[0]];
        let (iy, wy) = table[1][p[1]];
        let (iz, wz) = table[2][p[2]];
        let mut acc = [0.0; 3];
        for a in 0..4 {
            for b in 0..4 {
                let wab = wx[a] * wy[b];
                let row = cd.index(ix + a, iy + b, iz);
                for (c, w) in wz.iter().enumerate() {
                    let w = wab * w;
                    for (k, s) in acc.iter_mut().enumerate() {
                        *s += w * lat.comps[k][row + c];
                    }
                }
            }
        }
        for (k, s) in acc.iter().enumerate() {
            out.comp_mut(k)[idx] = *s;
        }
    }
    Ok(out)
}

/// Transpose of [`bspline_to_dense`]: maps a dense gradient back onto the
/// lattice of `lat`.
pub fn bspline_vjp(lat: &BsplineLattice, grad_dense: &DisplacementField) -> Result<BsplineLattice> {
    let dims = grad_dense.dims();
    lat.ensure_covers(dims)?;
    let table = lat.basis_table(dims);
    let cd = lat.ctrl_dims;
    let mut out = BsplineLattice::zeros(cd, lat.spacing)?;
    for (idx, p) in dims.iter().enumerate() {
        let g = grad_dense.vector(idx);
        if g == [0.0; 3] {
            continue;
        }
        let (ix, wx) = table[0][p[0]];
        let (iy, wy) = table[1][p[1]];
        let (iz, wz) = table[2][p[2]];
        for a in 0..4 {
            for b in 0..4 {
                let wab = wx[a] * wy[b];
                let row = cd.index(ix + a, iy + b, iz);
                for (c, w) in wz.iter().enumerate() {
                    let w = wab * w;
                    for (k, gk) in g.iter().enumerate() {
                        out.comps[k][row + c] += w * gk;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Per-voxel Jacobian determinants and the fraction of folded voxels.
#[derive(Debug, Clone)]
pub struct JacobianReport {
    pub det: Volume,
    pub folded_fraction: f64,
}

/// Forward-difference derivative of `f` along `axis`, one-sided backward on
/// the far face.
#[inline]
fn forward_diff(f: &[f64], dims: Dims, p: [usize; 3], idx: usize, axis: usize) -> f64 {
    let s = dims.stride(axis);
    if p[axis] + 1 < dims[axis] {
        f[idx + s] - f[idx]
    } else {
        f[idx] - f[idx - s]
    }
}

/// `det(I + grad u)` per voxel with forward differences; a voxel is folded
/// when its determinant is `<= 0`.
pub fn jacobian_report(u: &DisplacementField) -> Result<JacobianReport> {
    let dims = u.dims();
    if dims.min_extent() < 2 {
        return Err(Error::InvalidArgument(format!(
            "jacobian needs >= 2 voxels per axis, got {:?}",
            dims.0
        )));
    }
    let mut det = Vec::with_capacity(dims.len());
    let mut folded = 0usize;
    for (idx, p) in dims.iter().enumerate() {
        let mut j = [[0.0; 3]; 3];
        for (c, row) in j.iter_mut().enumerate() {
            for (d, e) in row.iter_mut().enumerate() {
                *e = forward_diff(u.comp(c), dims, p, idx, d) + if c == d { 1.0 } else { 0.0 };
            }
        }
        let dj = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
            - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
            + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
        if dj <= 0.0 {
            folded += 1;
        }
        det.push(dj);
    }
    Ok(JacobianReport {
        det: Volume::new(dims, det)?,
        folded_fraction: folded as f64 / dims.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_field(dims: Dims, amp: f64, rng: &mut Rng) -> DisplacementField {
        let n = dims.len();
        DisplacementField::new(
            dims,
            [
                rng.uniform_vec(n, -amp, amp),
                rng.uniform_vec(n, -amp, amp),
                rng.uniform_vec(n, -amp, amp),
            ],
        )
        .unwrap()
    }

    #[test]
    fn zero_is_the_identity_of_compose() {
        let dims = Dims::cube(5);
        let f = random_field(dims, 1.5, &mut Rng::new(1));
        let z = DisplacementField::zeros(dims);
        assert_eq!(compose(&z, &f).unwrap(), f);
        let af = compose(&f, &z).unwrap();
        for c in 0..3 {
            for (a, b) in af.comp(c).iter().zip(f.comp(c)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn translations_add_in_the_interior() {
        let dims = Dims::cube(8);
        let t1 = [0.5, -1.0, 0.25];
        let t2 = [1.0, 0.5, -0.75];
        let u = compose(&DisplacementField::uniform(dims, t1), &DisplacementField::uniform(dims, t2)).unwrap();
        for x in 2..6 {
            for y in 2..6 {
                for z in 2..6 {
                    let v = u.vector(dims.index(x, y, z));
                    for d in 0..3 {
                        assert!((v[d] - (t1[d] + t2[d])).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn steps_out_of_range_rejected() {
        let v = VelocityField(DisplacementField::zeros(Dims::cube(3)));
        assert!(scaling_and_squaring(&v, 0).is_err());
        assert!(scaling_and_squaring(&v, 13).is_err());
        assert!(scaling_and_squaring(&v, 12).is_ok());
    }

    #[test]
    fn zero_and_uniform_velocity() {
        let dims = Dims::cube(6);
        let z = scaling_and_squaring(&VelocityField(DisplacementField::zeros(dims)), 7).unwrap();
        assert_eq!(z.max_abs(), 0.0);
        let c = [0.7, -1.3, 2.1];
        for steps in [1, 4, 7] {
            let u = scaling_and_squaring(&VelocityField(DisplacementField::uniform(dims, c)), steps).unwrap();
            // Clamping only perturbs voxels whose samples leave the grid.
            let v = u.vector(dims.index(3, 3, 3));
            for d in 0..3 {
                assert!((v[d] - c[d]).abs() < 1e-12, "T={steps}: {v:?}");
            }
        }
    }

    #[test]
    fn svf_vjp_rejects_mismatched_steps() {
        let dims = Dims::cube(3);
        let v = VelocityField(DisplacementField::zeros(dims));
        let (_, tape) = scaling_and_squaring_taped(&v, 3).unwrap();
        assert!(matches!(
            svf_vjp(&tape, 4, &DisplacementField::zeros(dims)),
            Err(Error::TapeMismatch(_))
        ));
        let g = svf_vjp(&tape, 3, &DisplacementField::zeros(dims)).unwrap();
        assert_eq!(g.field().max_abs(), 0.0);
    }

    #[test]
    fn bspline_partition_of_unity() {
        let dims = Dims::new(9, 7, 5);
        let mut lat = BsplineLattice::for_image(dims, [2, 3, 2]).unwrap();
        assert!(lat.covers(dims));
        let zero = bspline_to_dense(&lat, dims).unwrap();
        assert_eq!(zero.max_abs(), 0.0);
        let c = [1.5, -2.0, 0.25];
        for k in 0..3 {
            lat.comp_mut(k).iter_mut().for_each(|v| *v = c[k]);
        }
        let dense = bspline_to_dense(&lat, dims).unwrap();
        for k in 0..3 {
            assert!(dense.comp(k).iter().all(|v| (v - c[k]).abs() < 1e-12));
        }
    }

    #[test]
    fn bspline_lattice_too_small_rejected() {
        let lat = BsplineLattice::zeros(Dims::cube(4), [2, 2, 2]).unwrap();
        assert!(!lat.covers(Dims::cube(6)));
        assert!(bspline_to_dense(&lat, Dims::cube(6)).is_err());
        assert!(BsplineLattice::for_image(Dims::cube(4), [0, 1, 1]).is_err());
    }

    #[test]
    fn bspline_vjp_of_zero_is_zero() {
        let dims = Dims::cube(6);
        let lat = BsplineLattice::for_image(dims, [2, 2, 2]).unwrap();
        let g = bspline_vjp(&lat, &DisplacementField::zeros(dims)).unwrap();
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn jacobian_of_identity_and_scaling() {
        let dims = Dims::cube(6);
        let r = jacobian_report(&DisplacementField::zeros(dims)).unwrap();
        assert!(r.det.data().iter().all(|&d| d == 1.0));
        assert_eq!(r.folded_fraction, 0.0);

        let s = DisplacementField::from_fn(dims, |p| p.map(|v| 0.5 * v as f64));
        let r = jacobian_report(&s).unwrap();
        assert!(r.det.data().iter().all(|&d| (d - 1.5f64.powi(3)).abs() < 1e-12));
    }

    #[test]
    fn jacobian_needs_two_voxels() {
        assert!(jacobian_report(&DisplacementField::zeros(Dims::new(1, 4, 4))).is_err());
    }

    #[test]
    fn reflection_folds_every_voxel() {
        let dims = Dims::cube(4);
        // u_x = -2x gives d(x + u_x)/dx = -1.
        let u = DisplacementField::from_fn(dims, |p| [-2.0 * p[0] as f64, 0.0, 0.0]);
        assert_eq!(jacobian_report(&u).unwrap().folded_fraction, 1.0);
    }
}
