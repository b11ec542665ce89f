//! Monte-Carlo ensembles of warped images, the predictive-variance and
//! expected-error estimators, and the uncertainty calibration error.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::volume::{Dims, Volume};

pub const DEFAULT_SAMPLES: usize = 25;
pub const DEFAULT_BINS: usize = 15;

/// `T` warped samples `I_m ∘ phi_t` and their pointwise mean and population variance.
#[derive(Debug, Clone, PartialEq)]
pub struct McEnsemble {
    samples: Vec<Volume>,
    mean: Volume,
    variance: Volume,
}

impl McEnsemble {
    pub fn new(samples: Vec<Volume>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "ensemble needs >= 2 samples, got {}",
                samples.len()
            )));
        }
        let dims = samples[0].dims();
        for s in &samples[1..] {
            dims.ensure_eq(&s.dims(), "ensemble sample")?;
        }
        let t = samples.len() as f64;
        // Offsets from the first sample keep identical ensembles exact.
        let first = samples[0].data();
        let mut mean = vec![0.0; dims.len()];
        for s in &samples[1..] {
            for ((m, v), f) in mean.iter_mut().zip(s.data()).zip(first) {
                *m += v - f;
            }
        }
        mean.iter_mut().zip(first).for_each(|(m, f)| *m = f + *m / t);
        let mut var = vec![0.0; dims.len()];
        for s in &samples {
            for ((acc, v), m) in var.iter_mut().zip(s.data()).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|v| *v /= t);
        Ok(McEnsemble {
            mean: Volume::new(dims, mean)?,
            variance: Volume::new(dims, var)?,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dims(&self) -> Dims {
        self.mean.dims()
    }

    pub fn samples(&self) -> &[Volume] {
        &self.samples
    }

    /// Pointwise sample mean.
    pub fn mean(&self) -> &Volume {
        &self.mean
    }
}

/// Draws `t` samples from `sampler`, which receives the sample index and the
/// shared generator. Every sample must have the dims of the first.
pub fn mc_collect(
    mut sampler: impl FnMut(usize, &mut Rng) -> Result<Volume>,
    t: usize,
    rng: &mut Rng,
) -> Result<McEnsemble> {
    if t < 2 {
        return Err(Error::InvalidArgument(format!("ensemble needs >= 2 samples, got {t}")));
    }
    let mut samples: Vec<Volume> = Vec::with_capacity(t);
    for i in 0..t {
        let s = sampler(i, rng)?;
        if let Some(first) = samples.first() {
            if first.dims() != s.dims() {
                return Err(Error::DimMismatch(format!(
                    "sample {i} has dims {:?}, expected {:?}",
                    s.dims().0,
                    first.dims().0
                )));
            }
        }
        samples.push(s);
    }
    McEnsemble::new(samples)
}

/// `(1/T) sum_t (s_t - mean)^2`.
pub fn predictive_variance(e: &McEnsemble) -> Volume {
    e.variance.clone()
}

/// `(1/T) sum_t (s_t - I_f)^2`, the expected squared error against the fixed image.
pub fn calibrated_error(e: &McEnsemble, fixed: &Volume) -> Result<Volume> {
    e.dims().ensure_eq(&fixed.dims(), "calibrated error")?;
    let t = e.len() as f64;
    let mut acc = vec![0.0; fixed.data().len()];
    for s in e.samples() {
        for ((a, v), f) in acc.iter_mut().zip(s.data()).zip(fixed.data()) {
            *a += (v - f) * (v - f);
        }
    }
    Volume::new(fixed.dims(), acc.into_iter().map(|a| a / t).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_uncertainty: f64,
    pub mean_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTable {
    pub bins: Vec<CalibrationBin>,
    pub uce: f64,
}

/// Bin of `x` among `bins` equal-width bins over `[lo, hi]`; the top edge
/// belongs to the last bin.
pub fn bin_index(x: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    let b = ((x - lo) / (hi - lo) * bins as f64).floor();
    (b.max(0.0) as usize).min(bins - 1)
}

/// Uncertainty calibration error: voxels are binned by predicted
/// uncertainty into equal-width bins over its range, and
/// `UCE = sum_b (n_b / N) |mean_err_b - mean_unc_b|`. A constant prediction
/// yields a single bin.
pub fn uce(pred: &Volume, observed: &Volume, bins: usize) -> Result<CalibrationTable> {
    pred.dims().ensure_eq(&observed.dims(), "uce")?;
    if bins < 2 {
        return Err(Error::InvalidArgument(format!("uce needs >= 2 bins, got {bins}")));
    }
    let (lo, hi) = pred.min_max();
    let nbins = if hi > lo { bins } else { 1 };
    let width = if hi > lo { (hi - lo) / nbins as f64 } else { 0.0 };
    let mut count = vec![0usize; nbins];
    let mut unc = vec![0.0; nbins];
    let mut err = vec![0.0; nbins];
    for (&p, &o) in pred.data().iter().zip(observed.data()) {
        let b = bin_index(p, lo, hi, nbins);
        count[b] += 1;
        unc[b] += p;
        err[b] += o;
    }
    let n = pred.data().len() as f64;
    let mut total = 0.0;
    let bins = (0..nbins)
        .map(|b| {
            let (mu, me) = if count[b] > 0 {
                (unc[b] / count[b] as f64, err[b] / count[b] as f64)
            } else {
                (0.0, 0.0)
            };
            total += count[b] as f64 / n * (me - mu).abs();
            CalibrationBin {
                lo: lo + b as f64 * width,
                hi: if b + 1 == nbins { hi } else { lo + (b + 1) as f64 * width },
                count: count[b],
                mean_uncertainty: mu,
                mean_error: me,
            }
        })
        .collect();
    Ok(CalibrationTable { bins, uce: total })
}

impl CalibrationTable {
    /// CSV with a comment line, a header, one row per bin and a trailing
    /// comment carrying the UCE.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("# bins are equal-width over raw predicted uncertainty values\n");
        s.push_str("bin_lo,bin_hi,count,mean_uncertainty,mean_error\n");
        for b in &self.bins {
            let _ = writeln!(
                s,
                "{:e},{:e},{},{:e},{:e}",
                b.lo, b.hi, b.count, b.mean_uncertainty, b.mean_error
            );
        }
        let _ = writeln!(s, "# uce={:e}", self.uce);
        s
    }
}
