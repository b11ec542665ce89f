//! Effective receptive field probing: the magnitude of the gradient of one
//! output displacement with respect to every voxel of the moving image.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::swin::{SwinNet, INIT_SCALE, LEAKY_SLOPE};
use crate::volume::{Dims, DisplacementField, Volume};

/// A registration network mapping `(moving, fixed)` to a displacement field.
pub trait Network {
    fn displacement(&self, moving: &Volume, fixed: &Volume) -> Result<DisplacementField>;

    /// Gradient of `<grad_u, net(moving, fixed)>` with respect to `moving`.
    fn moving_gradient(&self, moving: &Volume, fixed: &Volume, grad_u: &DisplacementField) -> Result<Volume>;
}

impl Network for SwinNet {
    fn displacement(&self, moving: &Volume, fixed: &Volume) -> Result<DisplacementField> {
        Ok(self.forward(moving, fixed, None)?.0)
    }

    fn moving_gradient(&self, moving: &Volume, fixed: &Volume, grad_u: &DisplacementField) -> Result<Volume> {
        let (_, tape) = self.forward(moving, fixed, None)?;
        Ok(self.vjp(&tape, grad_u)?.0)
    }
}

/// Zero-padded `3×3×3` convolution over multi-channel volumes stored
/// channel-major. Weights are `[out][in][27]` with the kernel offset z-fastest.
fn conv3(x: &[f64], cin: usize, dims: Dims, w: &[f64], b: &[f64]) -> Vec<f64> {
    let n = dims.len();
    let cout = b.len();
    let mut y = vec![0.0; cout * n];
    for (o, yo) in y.chunks_mut(n).enumerate() {
        yo.iter_mut().for_each(|v| *v = b[o]);
        for i in 0..cin {
            let xi = &x[i * n..(i + 1) * n];
            let k = &w[(o * cin + i) * 27..][..27];
            for (idx, p) in dims.iter().enumerate() {
                let mut acc = 0.0;
                for (t, q) in Dims::cube(3).iter().enumerate() {
                    let s = [0, 1, 2].map(|d| p[d] as isize + q[d] as isize - 1);
                    if (0..3).all(|d| s[d] >= 0 && (s[d] as usize) < dims[d]) {
                        acc += k[t] * xi[dims.index(s[0] as usize, s[1] as usize, s[2] as usize)];
                    }
                }
                yo[idx] += acc;
            }
        }
    }
    y
}

/// Input gradient of [`conv3`].
fn conv3_input_vjp(gy: &[f64], cin: usize, dims: Dims, w: &[f64], cout: usize) -> Vec<f64> {
    let n = dims.len();
    let mut gx = vec![0.0; cin * n];
    for o in 0..cout {
        let go = &gy[o * n..(o + 1) * n];
        for i in 0..cin {
            let k = &w[(o * cin + i) * 27..][..27];
            let gi = &mut gx[i * n..(i + 1) * n];
            for (idx, p) in dims.iter().enumerate() {
                if go[idx] == 0.0 {
                    continue;
                }
                for (t, q) in Dims::cube(3).iter().enumerate() {
                    let s = [0, 1, 2].map(|d| p[d] as isize + q[d] as isize - 1);
                    if (0..3).all(|d| s[d] >= 0 && (s[d] as usize) < dims[d]) {
                        gi[dims.index(s[0] as usize, s[1] as usize, s[2] as usize)] += k[t] * go[idx];
                    }
                }
            }
        }
    }
    gx
}

/// Two-layer local convolutional reference:
/// `u = conv2(leaky(conv1([moving, fixed])))`, each `3×3×3` with zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvRef {
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl ConvRef {
    pub fn new(hidden: usize, seed: u64) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::InvalidArgument("conv reference needs >= 1 hidden channel".into()));
        }
        let mut rng = Rng::new(seed);
        let s = INIT_SCALE;
        Ok(ConvRef {
            hidden,
            w1: rng.uniform_vec(hidden * 2 * 27, -s, s),
            b1: rng.uniform_vec(hidden, -s, s),
            w2: rng.uniform_vec(3 * hidden * 27, -s, s),
            b2: rng.uniform_vec(3, -s, s),
        })
    }

    fn input(moving: &Volume, fixed: &Volume) -> Result<Vec<f64>> {
        moving.dims().ensure_eq(&fixed.dims(), "conv reference")?;
        Ok([moving.data(), fixed.data()].concat())
    }

    fn hidden_pre(&self, moving: &Volume, fixed: &Volume) -> Result<Vec<f64>> {
        Ok(conv3(&Self::input(moving, fixed)?, 2, moving.dims(), &self.w1, &self.b1))
    }
}

impl Network for ConvRef {
    fn displacement(&self, moving: &Volume, fixed: &Volume) -> Result<DisplacementField> {
        let dims = moving.dims();
        let h: Vec<f64> = self
            .hidden_pre(moving, fixed)?
            .into_iter()
            .map(|v| if v >= 0.0 { v } else { LEAKY_SLOPE * v })
            .collect();
        let y = conv3(&h, self.hidden, dims, &self.w2, &self.b2);
        let n = dims.len();
        DisplacementField::new(dims, [0, 1, 2].map(|c| y[c * n..(c + 1) * n].to_vec()))
    }

    fn moving_gradient(&self, moving: &Volume, fixed: &Volume, grad_u: &DisplacementField) -> Result<Volume> {
        let dims = moving.dims();
        dims.ensure_eq(&grad_u.dims(), "conv reference gradient")?;
        let pre = self.hidden_pre(moving, fixed)?;
        let gy: Vec<f64> = grad_u.comps().concat();
        let gh = conv3_input_vjp(&gy, self.hidden, dims, &self.w2, 3);
        let gpre: Vec<f64> = gh
            .iter()
            .zip(&pre)
            .map(|(g, &v)| if v >= 0.0 { *g } else { LEAKY_SLOPE * g })
            .collect();
        let gx = conv3_input_vjp(&gpre, 2, dims, &self.w1, self.hidden);
        Volume::new(dims, gx[..dims.len()].to_vec())
    }
}

/// `|d (sum_c u_c(tap)) / d I_m|` for every moving-image voxel.
pub fn erf_probe(net: &dyn Network, moving: &Volume, fixed: &Volume, tap: [usize; 3]) -> Result<Volume> {
    let dims = moving.dims();
    if (0..3).any(|d| tap[d] >= dims[d]) {
        return Err(Error::InvalidArgument(format!(
            "tap {tap:?} outside image {:?}",
            dims.0
        )));
    }
    let idx = dims.index(tap[0], tap[1], tap[2]);
    let mut seed = DisplacementField::zeros(dims);
    for c in 0..3 {
        seed.comp_mut(c)[idx] = 1.0;
    }
    Ok(net.moving_gradient(moving, fixed, &seed)?.map(f64::abs))
}

/// Fraction of voxels whose influence exceeds `rel` times the maximum; zero
/// for an all-zero map.
pub fn support_fraction(erf: &Volume, rel: f64) -> f64 {
    let (_, max) = erf.min_max();
    if max <= 0.0 {
        return 0.0;
    }
    let thr = rel * max;
    erf.data().iter().filter(|&&v| v > thr).count() as f64 / erf.data().len() as f64
}

/// Voxel at the center of `dims` (rounded up).
pub fn center_tap(dims: Dims) -> [usize; 3] {
    [dims[0] / 2, dims[1] / 2, dims[2] / 2]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::swin::SwinNetConfig;

    #[test]
    fn tap_must_be_inside() {
        let net = ConvRef::new(2, 0).unwrap();
        let v = Volume::zeros(Dims::cube(4));
        assert!(erf_probe(&net, &v, &v, [4, 0, 0]).is_err());
    }

    #[test]
    fn zero_weights_give_zero_erf() {
        let mut net = SwinNet::new(SwinNetConfig::default()).unwrap();
        let zeros = vec![0.0; net.to_flat().len()];
        net.set_flat(&zeros).unwrap();
        let v = Volume::filled(Dims::cube(8), 0.5);
        let erf = erf_probe(&net, &v, &v, [4, 4, 4]).unwrap();
        assert_eq!(support_fraction(&erf, 1e-8), 0.0);
    }

    #[test]
    fn conv_reference_support_is_local() {
        let net = ConvRef::new(4, 1).unwrap();
        let dims = Dims::cube(8);
        let v = Volume::new(dims, Rng::new(2).uniform_vec(dims.len(), 0.0, 1.0)).unwrap();
        let erf = erf_probe(&net, &v, &v, [4, 4, 4]).unwrap();
        for (idx, p) in dims.iter().enumerate() {
            let near = (0..3).all(|d| p[d].abs_diff(4) <= 2);
            if !near {
                assert_eq!(erf.data()[idx], 0.0);
            }
        }
        assert!(support_fraction(&erf, 1e-8) <= 125.0 / 512.0);
    }
}
