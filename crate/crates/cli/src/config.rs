//! Command options shared by flags and TOML config files. Every option is
//! optional on both sides; an explicit flag wins over the file, and the file
//! wins over the built-in default.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Fills every `None` field of `self` from `file`.
pub trait Merge {
    fn merge(self, file: Self) -> Self;
}

macro_rules! mergeable {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl Merge for $ty {
            fn merge(self, file: Self) -> Self {
                $ty { $($field: self.$field.or(file.$field)),* }
            }
        }
    };
}

/// Reads a TOML file holding the keys of one command; unknown keys are rejected.
pub fn load<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

/// Parses `N` or `NX,NY,NZ`.
pub fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad extent {p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [n] => Ok([n; 3]),
        [x, y, z] => Ok([x, y, z]),
        _ => Err(format!("expected N or NX,NY,NZ, got {s:?}")),
    }
}

pub fn parse_triple(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("bad value {p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [v] => Ok([v; 3]),
        [x, y, z] => Ok([x, y, z]),
        _ => Err(format!("expected V or X,Y,Z, got {s:?}")),
    }
}

/// Extents accept either a single number or a three-element array in TOML.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Extent<T> {
    One(T),
    Three([T; 3]),
}

impl<T: Copy> Extent<T> {
    pub fn get(self) -> [T; 3] {
        match self {
            Extent::One(v) => [v; 3],
            Extent::Three(v) => v,
        }
    }
}

fn dims_arg(s: &str) -> Result<Extent<usize>, String> {
    parse_dims(s).map(Extent::Three)
}

fn triple_arg(s: &str) -> Result<Extent<f64>, String> {
    parse_triple(s).map(Extent::Three)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Sphere,
    Ellipsoid,
    TwoBlob,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct PhantomOpts {
    /// Shape family
    #[arg(long, value_enum)]
    pub kind: Option<Shape>,
    /// Grid extent: N or NX,NY,NZ [default: 24]
    #[arg(long, value_parser = dims_arg)]
    pub dims: Option<Extent<usize>>,
    /// Sphere and blob radius in voxels [default: 6]
    #[arg(long)]
    pub radius: Option<f64>,
    /// Ellipsoid semi-axes: A or A,B,C [default: 8,6,4.5]
    #[arg(long, value_parser = triple_arg)]
    pub semi_axes: Option<Extent<f64>>,
    /// Distance between the two blob centres [default: 10]
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}
mergeable!(PhantomOpts { kind, dims, radius, semi_axes, separation, seed, out });

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamKind {
    Dense,
    Svf,
    BsplineSvf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    MseDiffusion,
    LnccBendingDice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityArg {
    Mse,
    Lncc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegularizerArg {
    Diffusion,
    Bending,
}

/// Options of the deformable stage, shared by `register` and `uncertainty`.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct DeformOpts {
    /// Deformation model [default: svf]
    #[arg(long, value_enum)]
    pub param: Option<ParamKind>,
    /// Squaring steps for svf models [default: 7]
    #[arg(long)]
    pub steps: Option<u32>,
    /// B-spline control-point spacing in voxels [default: 2]
    #[arg(long)]
    pub spacing: Option<usize>,
    /// Base loss setting [default: mse-diffusion]
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Overrides the preset's similarity
    #[arg(long, value_enum)]
    pub similarity: Option<SimilarityArg>,
    /// Overrides the preset's regularizer
    #[arg(long, value_enum)]
    pub regularizer: Option<RegularizerArg>,
    /// Regularization weight
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Dice weight; needs labels when positive
    #[arg(long)]
    pub gamma: Option<f64>,
    /// LNCC window edge length
    #[arg(long)]
    pub window: Option<usize>,
    /// Iterations [default: 500]
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Gradient-descent step [default: 0.02]
    #[arg(long)]
    pub step: Option<f64>,
    /// Resolution levels, 1 or 2 [default: 1]
    #[arg(long)]
    pub levels: Option<usize>,
    /// Relative early-stop tolerance over 20 iterations, 0 disables [default: 0]
    #[arg(long)]
    pub tolerance: Option<f64>,
}
mergeable!(DeformOpts {
    param, steps, spacing, preset, similarity, regularizer, lambda, gamma, window, iterations, step, levels,
    tolerance
});

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct RegisterOpts {
    /// Moving image (header, payload or stem)
    #[arg(long)]
    pub moving: Option<PathBuf>,
    /// Fixed image
    #[arg(long)]
    pub fixed: Option<PathBuf>,
    /// Moving label channels, comma separated
    #[arg(long, value_delimiter = ',')]
    pub moving_labels: Option<Vec<PathBuf>>,
    /// Fixed label channels, comma separated
    #[arg(long, value_delimiter = ',')]
    pub fixed_labels: Option<Vec<PathBuf>>,
    /// Run the affine stage first
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub affine: Option<bool>,
    /// Affine iterations [default: 200]
    #[arg(long)]
    pub affine_iterations: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub deform: DeformOpts,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Record wall-clock time in the report (makes it run-dependent)
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub timed: Option<bool>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Merge for RegisterOpts {
    fn merge(self, file: Self) -> Self {
        RegisterOpts {
            moving: self.moving.or(file.moving),
            fixed: self.fixed.or(file.fixed),
            moving_labels: self.moving_labels.or(file.moving_labels),
            fixed_labels: self.fixed_labels.or(file.fixed_labels),
            affine: self.affine.or(file.affine),
            affine_iterations: self.affine_iterations.or(file.affine_iterations),
            deform: self.deform.merge(file.deform),
            seed: self.seed.or(file.seed),
            timed: self.timed.or(file.timed),
            out: self.out.or(file.out),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampler {
    /// Gaussian perturbations of the registered velocity field
    Perturbation,
    /// Dropout-masked attention network added to the registered field
    Dropout,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct UncertaintyOpts {
    #[arg(long)]
    pub moving: Option<PathBuf>,
    #[arg(long)]
    pub fixed: Option<PathBuf>,
    /// Ensemble size [default: 25]
    #[arg(long)]
    pub samples: Option<usize>,
    /// Calibration bins [default: 15]
    #[arg(long)]
    pub bins: Option<usize>,
    /// Ensemble source [default: perturbation]
    #[arg(long, value_enum)]
    pub sampler: Option<Sampler>,
    /// Standard deviation of velocity perturbations in voxels [default: 0.5]
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Dropout probability [default: 0.3]
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Weight scale of the dropout network [default: 0.5]
    #[arg(long)]
    pub init_scale: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub deform: DeformOpts,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Merge for UncertaintyOpts {
    fn merge(self, file: Self) -> Self {
        UncertaintyOpts {
            moving: self.moving.or(file.moving),
            fixed: self.fixed.or(file.fixed),
            samples: self.samples.or(file.samples),
            bins: self.bins.or(file.bins),
            sampler: self.sampler.or(file.sampler),
            sigma: self.sigma.or(file.sigma),
            dropout: self.dropout.or(file.dropout),
            init_scale: self.init_scale.or(file.init_scale),
            deform: self.deform.merge(file.deform),
            seed: self.seed.or(file.seed),
            out: self.out.or(file.out),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetKind {
    /// Patch embedding, shifted-window block pairs and a linear head
    Swin,
    /// Two-layer 3x3x3 convolution reference
    Conv,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ErfOpts {
    /// Network [default: swin]
    #[arg(long, value_enum)]
    pub net: Option<NetKind>,
    /// Input extent when no images are given [default: 8]
    #[arg(long, value_parser = dims_arg)]
    pub dims: Option<Extent<usize>>,
    /// Moving image; random smooth inputs are generated when absent
    #[arg(long)]
    pub moving: Option<PathBuf>,
    #[arg(long)]
    pub fixed: Option<PathBuf>,
    /// Probe voxel X,Y,Z [default: centre]
    #[arg(long, value_parser = dims_arg)]
    pub tap: Option<Extent<usize>>,
    /// Patch size [default: 2]
    #[arg(long)]
    pub patch: Option<usize>,
    /// Embedding channels [default: 8]
    #[arg(long)]
    pub channels: Option<usize>,
    /// Attention heads [default: 2]
    #[arg(long)]
    pub heads: Option<usize>,
    /// Window in tokens: M or MX,MY,MZ [default: 2]
    #[arg(long, value_parser = dims_arg)]
    pub window: Option<Extent<usize>>,
    /// Block pairs [default: 1]
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Uniform weight range of the random network [default: 0.5]
    #[arg(long)]
    pub init_scale: Option<f64>,
    /// Hidden channels of the convolution reference [default: 4]
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Load attention-network weights from this stem
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Zero every network weight
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub zero_weights: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
mergeable!(ErfOpts {
    net, dims, moving, fixed, tap, patch, channels, heads, window, pairs, init_scale, hidden, weights,
    zero_weights, seed, out
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MutationArg {
    None,
    FlipDiffusionGradient,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct SelftestOpts {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the JSON report here
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Inject a known defect to confirm the suite catches it
    #[arg(long, value_enum, hide = true)]
    pub mutate: Option<MutationArg>,
}
mergeable!(SelftestOpts { seed, out, mutate });
