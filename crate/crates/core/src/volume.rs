//! Dense 3D grids.
//!
//! Every grid is stored row-major with `z` fastest: the sample at `(x, y, z)`
//! lives at `(x * ny + y) * nz + z`. Displacements are in voxel units;
//! `spacing` is carried along as metadata only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid extent `(nx, ny, nz)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims(pub [usize; 3]);

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims([nx, ny, nz])
    }

    pub fn cube(n: usize) -> Self {
        Dims([n, n, n])
    }

    pub fn len(&self) -> usize {
        self.0[0] * self.0[1] * self.0[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.0[1] + y) * self.0[2] + z
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let z = idx % self.0[2];
        let y = (idx / self.0[2]) % self.0[1];
        let x = idx / (self.0[1] * self.0[2]);
        [x, y, z]
    }

    /// Linear stride of one step along `axis`.
    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        match axis {
            0 => self.0[1] * self.0[2],
            1 => self.0[2],
            _ => 1,
        }
    }

    pub fn min_extent(&self) -> usize {
        self.0.iter().copied().min().unwrap_or(0)
    }

    /// Iterator over all `(x, y, z)` in storage order.
    pub fn iter(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let [nx, ny, nz] = self.0;
        (0..nx).flat_map(move |x| (0..ny).flat_map(move |y| (0..nz).map(move |z| [x, y, z])))
    }

    pub(crate) fn ensure_eq(&self, other: &Dims, what: &str) -> Result<()> {
        if self != other {
            return Err(Error::DimMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.0, other.0
            )));
        }
        Ok(())
    }
}

impl std::ops::Index<usize> for Dims {
    type Output = usize;
    fn index(&self, i: usize) -> &usize {
        &self.0[i]
    }
}

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what} at index {i}")));
    }
    Ok(())
}

/// A scalar volume: an image or a single label channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: [f64; 3],
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        Self::with_spacing(dims, [1.0; 3], data)
    }

    pub fn with_spacing(dims: Dims, spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "volume dims must be positive, got {:?}",
                dims.0
            )));
        }
        if data.len() != dims.len() {
            return Err(Error::DimMismatch(format!(
                "volume {:?} needs {} samples, got {}",
                dims.0,
                dims.len(),
                data.len()
            )));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        check_finite(&data, "volume")?;
        Ok(Volume {
            dims,
            spacing,
            data,
        })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: Dims, value: f64) -> Self {
        Volume {
            dims,
            spacing: [1.0; 3],
            data: vec![value; dims.len()],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut([usize; 3]) -> f64) -> Self {
        let data = dims.iter().map(&mut f).collect();
        Volume {
            dims,
            spacing: [1.0; 3],
            data,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn set_spacing(&mut self, spacing: [f64; 3]) {
        self.spacing = spacing;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw samples. Callers must keep them finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Volume {
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Volume, f: impl Fn(f64, f64) -> f64) -> Result<Volume> {
        self.dims.ensure_eq(&other.dims, "volume zip")?;
        Ok(Volume {
            dims: self.dims,
            spacing: self.spacing,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Dense 3-vector field `u(p)` in voxel units; the sampling map is
/// `p - u(p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    dims: Dims,
    comps: [Vec<f64>; 3],
}

impl DisplacementField {
    pub fn new(dims: Dims, comps: [Vec<f64>; 3]) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "field dims must be positive, got {:?}",
                dims.0
            )));
        }
        for (c, comp) in comps.iter().enumerate() {
            if comp.len() != dims.len() {
                return Err(Error::DimMismatch(format!(
                    "field channel {c} has {} samples, dims {:?} need {}",
                    comp.len(),
                    dims.0,
                    dims.len()
                )));
            }
            check_finite(comp, "displacement field")?;
        }
        Ok(DisplacementField { dims, comps })
    }

    pub fn zeros(dims: Dims) -> Self {
        let n = dims.len();
        DisplacementField {
            dims,
            comps: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        }
    }

    pub fn uniform(dims: Dims, t: [f64; 3]) -> Self {
        let n = dims.len();
        DisplacementField {
            dims,
            comps: [vec![t[0]; n], vec![t[1]; n], vec![t[2]; n]],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut([usize; 3]) -> [f64; 3]) -> Self {
        let mut out = Self::zeros(dims);
        for (i, p) in dims.iter().enumerate() {
            let v = f(p);
            for c in 0..3 {
                out.comps[c][i] = v[c];
            }
        }
        out
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn comp(&self, c: usize) -> &[f64] {
        &self.comps[c]
    }

    pub fn comp_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.comps[c]
    }

    pub fn comps(&self) -> &[Vec<f64>; 3] {
        &self.comps
    }

    pub fn into_comps(self) -> [Vec<f64>; 3] {
        self.comps
    }

    #[inline]
    pub fn vector(&self, idx: usize) -> [f64; 3] {
        [self.comps[0][idx], self.comps[1][idx], self.comps[2][idx]]
    }

    /// Channel `c` as a standalone volume.
    pub fn channel_volume(&self, c: usize) -> Volume {
        Volume {
            dims: self.dims,
            spacing: [1.0; 3],
            data: self.comps[c].clone(),
        }
    }

    pub fn scaled(&self, s: f64) -> DisplacementField {
        let mut out = self.clone();
        out.scale_in_place(s);
        out
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for comp in &mut self.comps {
            comp.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &DisplacementField) -> Result<()> {
        self.dims.ensure_eq(&other.dims, "field axpy")?;
        for c in 0..3 {
            for (a, b) in self.comps[c].iter_mut().zip(&other.comps[c]) {
                *a += s * b;
            }
        }
        Ok(())
    }

    pub fn dot(&self, other: &DisplacementField) -> f64 {
        (0..3)
            .map(|c| {
                self.comps[c]
                    .iter()
                    .zip(&other.comps[c])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .sum()
    }

    /// Largest per-voxel Euclidean norm.
    pub fn max_norm(&self) -> f64 {
        (0..self.dims.len())
            .map(|i| {
                let v = self.vector(i);
                (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
            })
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.comps
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.comps.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }

    pub(crate) fn ensure_finite(&self) -> Result<()> {
        for comp in &self.comps {
            check_finite(comp, "displacement field")?;
        }
        Ok(())
    }

    /// Flattened `[ux..., uy..., uz...]`, used by gradient checks and the optimizer.
    pub fn to_flat(&self) -> Vec<f64> {
        self.comps.concat()
    }

    pub fn from_flat(dims: Dims, flat: &[f64]) -> Result<Self> {
        let n = dims.len();
        if flat.len() != 3 * n {
            return Err(Error::DimMismatch(format!(
                "flat field of length {} for dims {:?}",
                flat.len(),
                dims.0
            )));
        }
        Self::new(
            dims,
            [
                flat[..n].to_vec(),
                flat[n..2 * n].to_vec(),
                flat[2 * n..].to_vec(),
            ],
        )
    }
}

/// A stationary velocity field; exponentiated by scaling and squaring.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField(pub DisplacementField);

impl VelocityField {
    pub fn field(&self) -> &DisplacementField {
        &self.0
    }

    pub fn dims(&self) -> Dims {
        self.0.dims()
    }
}

impl From<DisplacementField> for VelocityField {
    fn from(f: DisplacementField) -> Self {
        VelocityField(f)
    }
}

/// `K` label channels with shared dims. Binary at construction; soft values
/// appear only after linear warping.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelStack {
    channels: Vec<Volume>,
}

impl LabelStack {
    /// Builds a stack of binary masks.
    pub fn new(channels: Vec<Volume>) -> Result<Self> {
        let stack = Self::from_soft(channels)?;
        for (k, ch) in stack.channels.iter().enumerate() {
            if ch.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "label channel {k} is not binary"
                )));
            }
        }
        Ok(stack)
    }

    /// Builds a stack whose channels may hold values in `[0, 1]`.
    pub fn from_soft(channels: Vec<Volume>) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::InvalidArgument("label stack needs K >= 1".into()))?
            .dims();
        for ch in &channels[1..] {
            first.ensure_eq(&ch.dims(), "label channels")?;
        }
        Ok(LabelStack { channels })
    }

    pub fn k(&self) -> usize {
        self.channels.len()
    }

    pub fn dims(&self) -> Dims {
        self.channels[0].dims()
    }

    pub fn channels(&self) -> &[Volume] {
        &self.channels
    }

    pub fn channel(&self, k: usize) -> &Volume {
        &self.channels[k]
    }

    pub fn into_channels(self) -> Vec<Volume> {
        self.channels
    }
}
