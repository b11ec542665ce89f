//! 3D shifted-window self-attention: patch embedding, (shifted) window
//! partition, windowed multi-head attention with relative position bias,
//! MLP, patch merging and dropout masks, each with an explicit
//! vector-Jacobian product.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::volume::{Dims, DisplacementField, Volume};

pub const LN_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const INIT_SCALE: f64 = 0.02;
pub const MLP_RATIO: usize = 4;
pub const ACTIVATION: &str = "leaky_relu(0.2)";

/// Feature lattice: `channels` scalars per token, token-major, tokens in
/// x-major / z-fastest order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    dims: Dims,
    channels: usize,
    data: Vec<f64>,
}

impl TokenGrid {
    pub fn new(dims: Dims, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidArgument("token grid needs >= 1 channel".into()));
        }
        if dims.is_empty() || data.len() != dims.len() * channels {
            return Err(Error::DimMismatch(format!(
                "token grid {:?}×{channels} needs {} values, got {}",
                dims.0,
                dims.len() * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("token grid".into()));
        }
        Ok(TokenGrid { dims, channels, data })
    }

    pub fn zeros(dims: Dims, channels: usize) -> Self {
        TokenGrid {
            dims,
            channels,
            data: vec![0.0; dims.len() * channels],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    fn ensure_shape(&self, dims: Dims, channels: usize, what: &str) -> Result<()> {
        if self.dims != dims || self.channels != channels {
            return Err(Error::TapeMismatch(format!(
                "{what}: expected {:?}×{channels}, got {:?}×{}",
                dims.0, self.dims.0, self.channels
            )));
        }
        Ok(())
    }
}

/// Attention window edge lengths in tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec(pub [usize; 3]);

impl WindowSpec {
    pub fn new(size: [usize; 3]) -> Result<Self> {
        if size.contains(&0) {
            return Err(Error::InvalidArgument(format!("window dims must be >= 1, got {size:?}")));
        }
        Ok(WindowSpec(size))
    }

    /// Entries of one head's relative-position bias table.
    pub fn table_len(&self) -> usize {
        self.0.iter().map(|m| 2 * m - 1).product()
    }

    /// Table slot of the relative offset between in-window positions `a` and `b`.
    pub fn bias_index(&self, a: [usize; 3], b: [usize; 3]) -> usize {
        let [mx, my, mz] = self.0;
        let off = |d: usize, m: usize| a[d] + m - 1 - b[d];
        (off(0, mx) * (2 * my - 1) + off(1, my)) * (2 * mz - 1) + off(2, mz)
    }
}

/// Dense layer `y = W x + b` with `W` stored `out × inp` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub inp: usize,
    pub out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(inp: usize, out: usize) -> Self {
        Linear {
            inp,
            out,
            weight: vec![0.0; inp * out],
            bias: vec![0.0; out],
        }
    }

    pub fn init(inp: usize, out: usize, rng: &mut Rng) -> Self {
        Self::init_scaled(inp, out, INIT_SCALE, rng)
    }

    /// Weights and biases uniform in `[-scale, scale]`.
    pub fn init_scaled(inp: usize, out: usize, scale: f64, rng: &mut Rng) -> Self {
        Linear {
            inp,
            out,
            weight: rng.uniform_vec(inp * out, -scale, scale),
            bias: rng.uniform_vec(out, -scale, scale),
        }
    }

    /// Applies the layer to every `inp`-long row of `x`.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let rows = x.len() / self.inp;
        let mut y = Vec::with_capacity(rows * self.out);
        for r in 0..rows {
            let xr = &x[r * self.inp..(r + 1) * self.inp];
            for o in 0..self.out {
                let w = &self.weight[o * self.inp..(o + 1) * self.inp];
                y.push(self.bias[o] + w.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    pub fn backward(&self, x: &[f64], gy: &[f64], grad: &mut Linear) -> Vec<f64> {
        let rows = x.len() / self.inp;
        let mut gx = vec![0.0; x.len()];
        for r in 0..rows {
            let xr = &x[r * self.inp..(r + 1) * self.inp];
            let gxr = &mut gx[r * self.inp..(r + 1) * self.inp];
            for o in 0..self.out {
                let g = gy[r * self.out + o];
                if g == 0.0 {
                    continue;
                }
                grad.bias[o] += g;
                let w = &self.weight[o * self.inp..(o + 1) * self.inp];
                let gw = &mut grad.weight[o * self.inp..(o + 1) * self.inp];
                for i in 0..self.inp {
                    gw[i] += g * xr[i];
                    gxr[i] += g * w[i];
                }
            }
        }
        gx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(channels: usize) -> Self {
        LayerNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
        }
    }

    fn zeros(channels: usize) -> Self {
        LayerNorm {
            gamma: vec![0.0; channels],
            beta: vec![0.0; channels],
        }
    }

    fn forward(&self, x: &[f64]) -> (Vec<f64>, NormCache) {
        let c = self.gamma.len();
        let rows = x.len() / c;
        let mut y = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let xr = &x[r * c..(r + 1) * c];
            let mean = xr.iter().sum::<f64>() / c as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for k in 0..c {
                let h = (xr[k] - mean) * is;
                xhat[r * c + k] = h;
                y[r * c + k] = self.gamma[k] * h + self.beta[k];
            }
        }
        (y, NormCache { xhat, inv_std })
    }

    fn backward(&self, cache: &NormCache, gy: &[f64], grad: &mut LayerNorm) -> Vec<f64> {
        let c = self.gamma.len();
        let mut gx = vec![0.0; gy.len()];
        let mut gh = vec![0.0; c];
        for (r, &is) in cache.inv_std.iter().enumerate() {
            let xh = &cache.xhat[r * c..(r + 1) * c];
            let g = &gy[r * c..(r + 1) * c];
            for k in 0..c {
                grad.gamma[k] += g[k] * xh[k];
                grad.beta[k] += g[k];
                gh[k] = g[k] * self.gamma[k];
            }
            let mean_g = gh.iter().sum::<f64>() / c as f64;
            let mean_gx = gh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
            for k in 0..c {
                gx[r * c + k] = is * (gh[k] - mean_g - xh[k] * mean_gx);
            }
        }
        gx
    }
}

/// Learnable tensors of one Swin block.
#[derive(Debug, Clone, PartialEq)]
pub struct SwinParams {
    pub channels: usize,
    pub heads: usize,
    pub window: WindowSpec,
    pub norm1: LayerNorm,
    pub qkv: Linear,
    /// One relative-position table per head, head-major.
    pub bias_table: Vec<f64>,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SwinParams {
    fn check_shape(channels: usize, heads: usize) -> Result<()> {
        if channels == 0 || heads == 0 || channels % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "{channels} channels do not split into {heads} heads"
            )));
        }
        Ok(())
    }

    /// Seeded uniform `[-INIT_SCALE, INIT_SCALE]` weights; unit layer-norm scale.
    pub fn init(channels: usize, heads: usize, window: WindowSpec, rng: &mut Rng) -> Result<Self> {
        Self::init_scaled(channels, heads, window, INIT_SCALE, rng)
    }

    pub fn init_scaled(channels: usize, heads: usize, window: WindowSpec, scale: f64, rng: &mut Rng) -> Result<Self> {
        Self::check_shape(channels, heads)?;
        let hidden = MLP_RATIO * channels;
        Ok(SwinParams {
            channels,
            heads,
            window,
            norm1: LayerNorm::new(channels),
            qkv: Linear::init_scaled(channels, 3 * channels, scale, rng),
            bias_table: rng.uniform_vec(heads * window.table_len(), -scale, scale),
            proj: Linear::init_scaled(channels, channels, scale, rng),
            norm2: LayerNorm::new(channels),
            fc1: Linear::init_scaled(channels, hidden, scale, rng),
            fc2: Linear::init_scaled(hidden, channels, scale, rng),
        })
    }

    /// All-zero tensors of the same shapes, used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        SwinParams {
            channels: self.channels,
            heads: self.heads,
            window: self.window,
            norm1: LayerNorm::zeros(self.channels),
            qkv: Linear::zeros(self.qkv.inp, self.qkv.out),
            bias_table: vec![0.0; self.bias_table.len()],
            proj: Linear::zeros(self.proj.inp, self.proj.out),
            norm2: LayerNorm::zeros(self.channels),
            fc1: Linear::zeros(self.fc1.inp, self.fc1.out),
            fc2: Linear::zeros(self.fc2.inp, self.fc2.out),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// Named tensors with their shapes, in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        let lin = |l: &Linear| vec![l.out, l.inp];
        vec![
            ("norm1.gamma", vec![self.channels], &self.norm1.gamma[..]),
            ("norm1.beta", vec![self.channels], &self.norm1.beta[..]),
            ("qkv.weight", lin(&self.qkv), &self.qkv.weight[..]),
            ("qkv.bias", vec![self.qkv.out], &self.qkv.bias[..]),
            ("bias_table", vec![self.heads, self.window.table_len()], &self.bias_table[..]),
            ("proj.weight", lin(&self.proj), &self.proj.weight[..]),
            ("proj.bias", vec![self.proj.out], &self.proj.bias[..]),
            ("norm2.gamma", vec![self.channels], &self.norm2.gamma[..]),
            ("norm2.beta", vec![self.channels], &self.norm2.beta[..]),
            ("fc1.weight", lin(&self.fc1), &self.fc1.weight[..]),
            ("fc1.bias", vec![self.fc1.out], &self.fc1.bias[..]),
            ("fc2.weight", lin(&self.fc2), &self.fc2.weight[..]),
            ("fc2.bias", vec![self.fc2.out], &self.fc2.bias[..]),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        vec![
            &mut self.norm1.gamma,
            &mut self.norm1.beta,
            &mut self.qkv.weight,
            &mut self.qkv.bias,
            &mut self.bias_table,
            &mut self.proj.weight,
            &mut self.proj.bias,
            &mut self.norm2.gamma,
            &mut self.norm2.beta,
            &mut self.fc1.weight,
            &mut self.fc1.bias,
            &mut self.fc2.weight,
            &mut self.fc2.bias,
        ]
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|(_, _, t)| t.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        set_flat(self.tensors_mut(), flat)
    }
}

fn set_flat(tensors: Vec<&mut Vec<f64>>, flat: &[f64]) -> Result<()> {
    let total: usize = tensors.iter().map(|t| t.len()).sum();
    if total != flat.len() {
        return Err(Error::DimMismatch(format!(
            "parameter vector: expected {total} values, got {}",
            flat.len()
        )));
    }
    let mut off = 0;
    for t in tensors {
        let n = t.len();
        t.copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    Ok(())
}

/// Inverted-dropout mask: entries are `0` or `1 / (1 - p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub p: f64,
    pub scale: Vec<f64>,
}

impl DropoutMask {
    pub fn sample(len: usize, p: f64, rng: &mut Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout probability {p} not in [0, 1)")));
        }
        let keep = 1.0 / (1.0 - p);
        let scale = (0..len).map(|_| if rng.bernoulli(p) { 0.0 } else { keep }).collect();
        Ok(DropoutMask { p, scale })
    }

    /// Mask that keeps everything unscaled.
    pub fn keep(len: usize) -> Self {
        DropoutMask {
            p: 0.0,
            scale: vec![1.0; len],
        }
    }

    fn apply(&self, x: &mut [f64]) -> Result<()> {
        if x.len() != self.scale.len() {
            return Err(Error::DimMismatch(format!(
                "dropout mask of {} entries applied to {} values",
                self.scale.len(),
                x.len()
            )));
        }
        x.iter_mut().zip(&self.scale).for_each(|(v, s)| *v *= s);
        Ok(())
    }
}

/// Dropout masks of one block: after the attention output projection and
/// after each MLP layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDropout {
    pub attn: DropoutMask,
    pub fc1: DropoutMask,
    pub fc2: DropoutMask,
}

impl BlockDropout {
    pub fn sample(tokens: usize, channels: usize, p: f64, rng: &mut Rng) -> Result<Self> {
        Ok(BlockDropout {
            attn: DropoutMask::sample(tokens * channels, p, rng)?,
            fc1: DropoutMask::sample(tokens * channels * MLP_RATIO, p, rng)?,
            fc2: DropoutMask::sample(tokens * channels, p, rng)?,
        })
    }

    pub fn keep(tokens: usize, channels: usize) -> Self {
        BlockDropout {
            attn: DropoutMask::keep(tokens * channels),
            fc1: DropoutMask::keep(tokens * channels * MLP_RATIO),
            fc2: DropoutMask::keep(tokens * channels),
        }
    }
}

/// Tokens regrouped into attention windows, window-major, positions inside a
/// window z-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    /// Unpadded token grid.
    pub grid: Dims,
    pub padded: Dims,
    /// Effective window: the configured window clipped to the grid.
    pub window: [usize; 3],
    pub shift: [usize; 3],
    pub channels: usize,
    pub count: usize,
    /// Source token of each slot; `None` for far-face padding.
    pub source: Vec<Option<usize>>,
    /// Shift region of each slot; slots in different regions never attend.
    pub region: Vec<usize>,
    pub data: Vec<f64>,
}

impl WindowBatch {
    pub fn window_len(&self) -> usize {
        self.window.iter().product()
    }

    /// Whether key slot `j` is hidden from query slot `i` (both within window `w`).
    pub fn masked(&self, w: usize, i: usize, j: usize) -> bool {
        let n = self.window_len();
        let (si, sj) = (w * n + i, w * n + j);
        self.region[si] != self.region[sj] || (self.source[sj].is_none() && self.source[si].is_some())
    }

    /// Distinct shift regions over all real tokens.
    pub fn region_count(&self) -> usize {
        let mut seen: Vec<usize> = self
            .source
            .iter()
            .zip(&self.region)
            .filter(|(s, _)| s.is_some())
            .map(|(_, &r)| r)
            .collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }
}

fn region_label(r: usize, n: usize, m: usize, s: usize) -> usize {
    if s == 0 || r < n - m {
        0
    } else if r < n - s {
        1
    } else {
        2
    }
}

/// Splits `t` into windows. Each window axis is clipped to the grid extent,
/// the grid is zero-padded on the far faces to a multiple of the window, and
/// with `shifted` the padded grid is cyclically rolled back by half a window
/// on every axis that is longer than its window.
pub fn window_partition(t: &TokenGrid, spec: WindowSpec, shifted: bool) -> WindowBatch {
    let n = t.dims();
    let c = t.channels();
    let window = [0, 1, 2].map(|d| spec.0[d].min(n[d]));
    let padded = Dims([0, 1, 2].map(|d| n[d].div_ceil(window[d]) * window[d]));
    let shift = [0, 1, 2].map(|d| if shifted && n[d] > window[d] { window[d] / 2 } else { 0 });
    let counts = [0, 1, 2].map(|d| padded[d] / window[d]);
    let count = counts.iter().product();
    let wdims = Dims(window);
    let slots = count * wdims.len();
    let mut source = Vec::with_capacity(slots);
    let mut region = Vec::with_capacity(slots);
    let mut data = Vec::with_capacity(slots * c);
    for w in Dims(counts).iter() {
        for a in wdims.iter() {
            let r = [0, 1, 2].map(|d| w[d] * window[d] + a[d]);
            let orig = [0, 1, 2].map(|d| (r[d] + shift[d]) % padded[d]);
            let label = (0..3).fold(0, |acc, d| acc * 3 + region_label(r[d], padded[d], window[d], shift[d]));
            region.push(label);
            if (0..3).all(|d| orig[d] < n[d]) {
                let idx = n.index(orig[0], orig[1], orig[2]);
                source.push(Some(idx));
                data.extend_from_slice(t.token(idx));
            } else {
                source.push(None);
                data.extend(std::iter::repeat_n(0.0, c));
            }
        }
    }
    WindowBatch {
        grid: n,
        padded,
        window,
        shift,
        channels: c,
        count,
        source,
        region,
        data,
    }
}

/// Inverse of [`window_partition`]: undoes the roll and drops padding. Also
/// the adjoint of the partition, since every real token occupies one slot.
pub fn window_reverse(batch: &WindowBatch, data: &[f64]) -> Result<TokenGrid> {
    let c = batch.channels;
    if data.len() != batch.source.len() * c {
        return Err(Error::TapeMismatch(format!(
            "window data has {} values, batch expects {}",
            data.len(),
            batch.source.len() * c
        )));
    }
    let mut out = TokenGrid::zeros(batch.grid, c);
    for (slot, src) in batch.source.iter().enumerate() {
        if let Some(i) = *src {
            out.data[i * c..(i + 1) * c].copy_from_slice(&data[slot * c..(slot + 1) * c]);
        }
    }
    Ok(out)
}

/// Forward record of [`window_attention`].
#[derive(Debug, Clone)]
pub struct AttnTape {
    x: Vec<f64>,
    qkv: Vec<f64>,
    attn: Vec<f64>,
    heads_out: Vec<f64>,
}

impl AttnTape {
    /// Softmax weights, indexed `[window][head][query][key]`.
    pub fn weights(&self) -> &[f64] {
        &self.attn
    }
}

fn check_attention_input(batch: &WindowBatch, p: &SwinParams) -> Result<()> {
    if batch.channels != p.channels {
        return Err(Error::DimMismatch(format!(
            "window channels {} vs parameter channels {}",
            batch.channels, p.channels
        )));
    }
    if (0..3).any(|d| batch.window[d] > p.window.0[d]) {
        return Err(Error::DimMismatch(format!(
            "window {:?} exceeds bias table window {:?}",
            batch.window, p.window.0
        )));
    }
    SwinParams::check_shape(p.channels, p.heads)
}

/// Multi-head self-attention inside every window:
/// `softmax(Q K^T / sqrt(d) + B + mask) V` per head, heads concatenated and
/// passed through the output projection.
pub fn window_attention(batch: &WindowBatch, p: &SwinParams) -> Result<(Vec<f64>, AttnTape)> {
    check_attention_input(batch, p)?;
    let c = p.channels;
    let d = p.head_dim();
    let h = p.heads;
    let n = batch.window_len();
    let wdims = Dims(batch.window);
    let pos: Vec<[usize; 3]> = wdims.iter().collect();
    let tl = p.window.table_len();
    let scale = 1.0 / (d as f64).sqrt();

    let qkv = p.qkv.forward(&batch.data);
    let mut attn = vec![0.0; batch.count * h * n * n];
    let mut heads_out = vec![0.0; batch.data.len()];
    let mut row = vec![0.0; n];
    for w in 0..batch.count {
        let base = w * n;
        for head in 0..h {
            let qo = head * d;
            let ko = c + head * d;
            let vo = 2 * c + head * d;
            for i in 0..n {
                let q = &qkv[(base + i) * 3 * c + qo..][..d];
                let mut max = f64::NEG_INFINITY;
                for j in 0..n {
                    row[j] = if batch.masked(w, i, j) {
                        f64::NEG_INFINITY
                    } else {
                        let k = &qkv[(base + j) * 3 * c + ko..][..d];
                        let dot: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
                        dot * scale + p.bias_table[head * tl + p.window.bias_index(pos[i], pos[j])]
                    };
                    max = max.max(row[j]);
                }
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                let a = &mut attn[((w * h + head) * n + i) * n..][..n];
                for j in 0..n {
                    a[j] = row[j] / total;
                }
                let out = &mut heads_out[(base + i) * c + qo..][..d];
                for j in 0..n {
                    if a[j] == 0.0 {
                        continue;
                    }
                    let v = &qkv[(base + j) * 3 * c + vo..][..d];
                    for k in 0..d {
                        out[k] += a[j] * v[k];
                    }
                }
            }
        }
    }
    let y = p.proj.forward(&heads_out);
    Ok((
        y,
        AttnTape {
            x: batch.data.clone(),
            qkv,
            attn,
            heads_out,
        },
    ))
}

/// Reverse pass of [`window_attention`]; parameter gradients accumulate into `grad`.
pub fn window_attention_vjp(
    batch: &WindowBatch,
    p: &SwinParams,
    tape: &AttnTape,
    gy: &[f64],
    grad: &mut SwinParams,
) -> Result<Vec<f64>> {
    check_attention_input(batch, p)?;
    if gy.len() != tape.x.len() || tape.x.len() != batch.data.len() {
        return Err(Error::TapeMismatch(format!(
            "attention gradient has {} values, tape recorded {}",
            gy.len(),
            tape.x.len()
        )));
    }
    let c = p.channels;
    let d = p.head_dim();
    let h = p.heads;
    let n = batch.window_len();
    let wdims = Dims(batch.window);
    let pos: Vec<[usize; 3]> = wdims.iter().collect();
    let tl = p.window.table_len();
    let scale = 1.0 / (d as f64).sqrt();
    let qkv = &tape.qkv;

    let g_heads = p.proj.backward(&tape.heads_out, gy, &mut grad.proj);
    let mut g_qkv = vec![0.0; qkv.len()];
    let mut ga = vec![0.0; n];
    for w in 0..batch.count {
        let base = w * n;
        for head in 0..h {
            let qo = head * d;
            let ko = c + head * d;
            let vo = 2 * c + head * d;
            for i in 0..n {
                let a = &tape.attn[((w * h + head) * n + i) * n..][..n];
                let go = &g_heads[(base + i) * c + qo..][..d];
                let mut dot_ga = 0.0;
                for j in 0..n {
                    let v = &qkv[(base + j) * 3 * c + vo..][..d];
                    ga[j] = go.iter().zip(v).map(|(x, y)| x * y).sum();
                    dot_ga += ga[j] * a[j];
                    if a[j] != 0.0 {
                        let gv = &mut g_qkv[(base + j) * 3 * c + vo..][..d];
                        for k in 0..d {
                            gv[k] += a[j] * go[k];
                        }
                    }
                }
                for j in 0..n {
                    let gs = a[j] * (ga[j] - dot_ga);
                    if gs == 0.0 {
                        continue;
                    }
                    grad.bias_table[head * tl + p.window.bias_index(pos[i], pos[j])] += gs;
                    for k in 0..d {
                        let qk = qkv[(base + i) * 3 * c + qo + k];
                        let kk = qkv[(base + j) * 3 * c + ko + k];
                        g_qkv[(base + i) * 3 * c + qo + k] += gs * scale * kk;
                        g_qkv[(base + j) * 3 * c + ko + k] += gs * scale * qk;
                    }
                }
            }
        }
    }
    Ok(p.qkv.backward(&tape.x, &g_qkv, &mut grad.qkv))
}

fn leaky(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn leaky_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Forward record of one [`swin_block`].
#[derive(Debug, Clone)]
pub struct BlockTape {
    dims: Dims,
    channels: usize,
    shifted: bool,
    norm1: NormCache,
    batch: WindowBatch,
    attn: AttnTape,
    norm2: NormCache,
    normed2: Vec<f64>,
    pre_act: Vec<f64>,
    hidden: Vec<f64>,
    drop: Option<BlockDropout>,
}

/// One pre-norm Swin block: `z' = MSA(LN(z)) + z`, `out = MLP(LN(z')) + z'`,
/// with regular windows or, if `shifted`, shifted windows.
pub fn swin_block(
    t: &TokenGrid,
    p: &SwinParams,
    shifted: bool,
    drop: Option<&BlockDropout>,
) -> Result<(TokenGrid, BlockTape)> {
    if t.channels() != p.channels {
        return Err(Error::DimMismatch(format!(
            "tokens have {} channels, block expects {}",
            t.channels(),
            p.channels
        )));
    }
    let (normed, norm1) = p.norm1.forward(t.data());
    let batch = window_partition(&TokenGrid::new(t.dims(), t.channels(), normed)?, p.window, shifted);
    let (attn_out, attn) = window_attention(&batch, p)?;
    let mut branch = window_reverse(&batch, &attn_out)?.into_data();
    if let Some(m) = drop {
        m.attn.apply(&mut branch)?;
    }
    let zhat: Vec<f64> = branch.iter().zip(t.data()).map(|(a, b)| a + b).collect();

    let (normed2, norm2) = p.norm2.forward(&zhat);
    let pre_act = p.fc1.forward(&normed2);
    let mut hidden: Vec<f64> = pre_act.iter().map(|&v| leaky(v)).collect();
    if let Some(m) = drop {
        m.fc1.apply(&mut hidden)?;
    }
    let mut mlp = p.fc2.forward(&hidden);
    if let Some(m) = drop {
        m.fc2.apply(&mut mlp)?;
    }
    let out: Vec<f64> = mlp.iter().zip(&zhat).map(|(a, b)| a + b).collect();
    let batch = WindowBatch { data: Vec::new(), ..batch };
    Ok((
        TokenGrid::new(t.dims(), t.channels(), out)?,
        BlockTape {
            dims: t.dims(),
            channels: t.channels(),
            shifted,
            norm1,
            batch,
            attn,
            norm2,
            normed2,
            pre_act,
            hidden,
            drop: drop.cloned(),
        },
    ))
}

/// Reverse pass of [`swin_block`]: input gradient and parameter gradients.
pub fn swin_block_vjp(p: &SwinParams, tape: &BlockTape, g: &TokenGrid) -> Result<(TokenGrid, SwinParams)> {
    g.ensure_shape(tape.dims, tape.channels, "block gradient")?;
    let mut grad = p.zeros_like();
    let gout = g.data();

    let mut g_mlp = gout.to_vec();
    if let Some(m) = &tape.drop {
        m.fc2.apply(&mut g_mlp)?;
    }
    let mut g_hidden = p.fc2.backward(&tape.hidden, &g_mlp, &mut grad.fc2);
    if let Some(m) = &tape.drop {
        m.fc1.apply(&mut g_hidden)?;
    }
    let g_pre: Vec<f64> = g_hidden
        .iter()
        .zip(&tape.pre_act)
        .map(|(gh, &x)| gh * leaky_grad(x))
        .collect();
    let g_normed2 = p.fc1.backward(&tape.normed2, &g_pre, &mut grad.fc1);
    let g_zhat_ln = p.norm2.backward(&tape.norm2, &g_normed2, &mut grad.norm2);
    let g_zhat: Vec<f64> = gout.iter().zip(&g_zhat_ln).map(|(a, b)| a + b).collect();

    let mut g_branch = g_zhat.clone();
    if let Some(m) = &tape.drop {
        m.attn.apply(&mut g_branch)?;
    }
    let g_windows = window_partition(&TokenGrid::new(tape.dims, tape.channels, g_branch)?, p.window, tape.shifted);
    let batch = WindowBatch {
        data: g_windows.data.clone(),
        ..tape.batch.clone()
    };
    let g_normed_windows = window_attention_vjp(&batch, p, &tape.attn, &g_windows.data, &mut grad)?;
    let g_normed = window_reverse(&batch, &g_normed_windows)?;
    let g_in_ln = p.norm1.backward(&tape.norm1, g_normed.data(), &mut grad.norm1);
    let g_in: Vec<f64> = g_zhat.iter().zip(&g_in_ln).map(|(a, b)| a + b).collect();
    Ok((TokenGrid::new(tape.dims, tape.channels, g_in)?, grad))
}

/// Forward record of [`swin_block_pair`].
#[derive(Debug, Clone)]
pub struct PairTape {
    first: BlockTape,
    second: BlockTape,
}

/// A regular-window block followed by a shifted-window block.
pub fn swin_block_pair(
    t: &TokenGrid,
    params: [&SwinParams; 2],
    drop: Option<[&BlockDropout; 2]>,
) -> Result<(TokenGrid, PairTape)> {
    let (mid, first) = swin_block(t, params[0], false, drop.map(|d| d[0]))?;
    let (out, second) = swin_block(&mid, params[1], true, drop.map(|d| d[1]))?;
    Ok((out, PairTape { first, second }))
}

pub fn swin_block_pair_vjp(
    params: [&SwinParams; 2],
    tape: &PairTape,
    g: &TokenGrid,
) -> Result<(TokenGrid, [SwinParams; 2])> {
    let (g_mid, g1) = swin_block_vjp(params[1], &tape.second, g)?;
    let (g_in, g0) = swin_block_vjp(params[0], &tape.first, &g_mid)?;
    Ok((g_in, [g0, g1]))
}

/// Forward record of [`patch_embed`].
#[derive(Debug, Clone)]
pub struct EmbedTape {
    image: Dims,
    patch: usize,
    patches: Vec<f64>,
}

/// Flattened `2 P^3` patch vectors: channel (moving, fixed), then the
/// in-patch offset z-fastest. Voxels past the image are zero.
fn gather_patches(moving: &Volume, fixed: &Volume, patch: usize) -> (Dims, Vec<f64>) {
    let dims = moving.dims();
    let tdims = Dims([0, 1, 2].map(|d| dims[d].div_ceil(patch)));
    let pdims = Dims::cube(patch);
    let mut out = Vec::with_capacity(tdims.len() * 2 * pdims.len());
    for t in tdims.iter() {
        for img in [moving, fixed] {
            for o in pdims.iter() {
                let v = [0, 1, 2].map(|d| t[d] * patch + o[d]);
                out.push(if (0..3).all(|d| v[d] < dims[d]) { img.at(v[0], v[1], v[2]) } else { 0.0 });
            }
        }
    }
    (tdims, out)
}

/// Linear embedding of non-overlapping `P^3` patches of the moving/fixed
/// pair. No positional embedding is added.
pub fn patch_embed(moving: &Volume, fixed: &Volume, patch: usize, proj: &Linear) -> Result<(TokenGrid, EmbedTape)> {
    moving.dims().ensure_eq(&fixed.dims(), "patch embed")?;
    if patch == 0 {
        return Err(Error::InvalidArgument("patch size must be >= 1".into()));
    }
    if proj.inp != 2 * patch.pow(3) || proj.out == 0 {
        return Err(Error::DimMismatch(format!(
            "embedding maps {} -> {}, patch {patch} needs {} inputs and >= 1 output",
            proj.inp,
            proj.out,
            2 * patch.pow(3)
        )));
    }
    let (tdims, patches) = gather_patches(moving, fixed, patch);
    let tokens = TokenGrid::new(tdims, proj.out, proj.forward(&patches))?;
    Ok((
        tokens,
        EmbedTape {
            image: moving.dims(),
            patch,
            patches,
        },
    ))
}

/// Gradients of [`patch_embed`] with respect to the moving and fixed images.
pub fn patch_embed_vjp(tape: &EmbedTape, proj: &Linear, g: &TokenGrid, grad: &mut Linear) -> Result<[Volume; 2]> {
    let p = tape.patch;
    let tdims = Dims([0, 1, 2].map(|d| tape.image[d].div_ceil(p)));
    g.ensure_shape(tdims, proj.out, "patch embed gradient")?;
    let gp = proj.backward(&tape.patches, g.data(), grad);
    let pdims = Dims::cube(p);
    let mut out = [Volume::zeros(tape.image), Volume::zeros(tape.image)];
    let mut k = 0;
    for t in tdims.iter() {
        for img in out.iter_mut() {
            for o in pdims.iter() {
                let v = [0, 1, 2].map(|d| t[d] * p + o[d]);
                if (0..3).all(|d| v[d] < tape.image[d]) {
                    let idx = tape.image.index(v[0], v[1], v[2]);
                    img.data_mut()[idx] += gp[k];
                }
                k += 1;
            }
        }
    }
    Ok(out)
}

/// Forward record of [`patch_merge`].
#[derive(Debug, Clone)]
pub struct MergeTape {
    dims: Dims,
    channels: usize,
    gathered: Vec<f64>,
}

/// Concatenates each `2×2×2` token neighbourhood (offsets z-fastest) into
/// `8C` channels and reduces to the layer's output width. Odd grids are
/// zero-padded on the far faces.
pub fn patch_merge(t: &TokenGrid, reduction: &Linear) -> Result<(TokenGrid, MergeTape)> {
    let c = t.channels();
    if reduction.inp != 8 * c {
        return Err(Error::DimMismatch(format!(
            "merge reduction takes {} inputs, tokens give {}",
            reduction.inp,
            8 * c
        )));
    }
    let n = t.dims();
    let out_dims = Dims([0, 1, 2].map(|d| n[d].div_ceil(2)));
    let mut gathered = Vec::with_capacity(out_dims.len() * 8 * c);
    for q in out_dims.iter() {
        for o in Dims::cube(2).iter() {
            let s = [0, 1, 2].map(|d| 2 * q[d] + o[d]);
            if (0..3).all(|d| s[d] < n[d]) {
                gathered.extend_from_slice(t.token(n.index(s[0], s[1], s[2])));
            } else {
                gathered.extend(std::iter::repeat_n(0.0, c));
            }
        }
    }
    let out = TokenGrid::new(out_dims, reduction.out, reduction.forward(&gathered))?;
    Ok((out, MergeTape { dims: n, channels: c, gathered }))
}

pub fn patch_merge_vjp(tape: &MergeTape, reduction: &Linear, g: &TokenGrid, grad: &mut Linear) -> Result<TokenGrid> {
    let n = tape.dims;
    let c = tape.channels;
    let out_dims = Dims([0, 1, 2].map(|d| n[d].div_ceil(2)));
    g.ensure_shape(out_dims, reduction.out, "patch merge gradient")?;
    let gg = reduction.backward(&tape.gathered, g.data(), grad);
    let mut out = TokenGrid::zeros(n, c);
    let mut k = 0;
    for q in out_dims.iter() {
        for o in Dims::cube(2).iter() {
            let s = [0, 1, 2].map(|d| 2 * q[d] + o[d]);
            if (0..3).all(|d| s[d] < n[d]) {
                let i = n.index(s[0], s[1], s[2]);
                for ch in 0..c {
                    out.data[i * c + ch] += gg[k * c + ch];
                }
            }
            k += 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwinNetConfig {
    pub patch: usize,
    pub channels: usize,
    pub heads: usize,
    pub window: [usize; 3],
    /// Regular/shifted block pairs applied at token resolution.
    pub pairs: usize,
    pub seed: u64,
    /// Half-width of the uniform weight initialization.
    pub init_scale: f64,
}

impl Default for SwinNetConfig {
    fn default() -> Self {
        SwinNetConfig {
            patch: 2,
            channels: 8,
            heads: 2,
            window: [2, 2, 2],
            pairs: 1,
            seed: 0,
            init_scale: INIT_SCALE,
        }
    }
}

/// Patch embedding, a stack of Swin block pairs and a per-token linear head
/// that emits the displacement of every voxel in the token's patch.
#[derive(Debug, Clone, PartialEq)]
pub struct SwinNet {
    pub config: SwinNetConfig,
    pub embed: Linear,
    pub blocks: Vec<[SwinParams; 2]>,
    pub head: Linear,
}

/// Forward record of [`SwinNet::forward`].
#[derive(Debug, Clone)]
pub struct NetTape {
    embed: EmbedTape,
    pairs: Vec<PairTape>,
    features: TokenGrid,
    image: Dims,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamManifest {
    seed: u64,
    activation: String,
    config: SwinNetConfig,
    tensors: Vec<TensorEntry>,
}

impl SwinNet {
    pub fn new(config: SwinNetConfig) -> Result<Self> {
        if config.patch == 0 {
            return Err(Error::InvalidArgument("patch size must be >= 1".into()));
        }
        let window = WindowSpec::new(config.window)?;
        SwinParams::check_shape(config.channels, config.heads)?;
        let scale = config.init_scale;
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("init scale must be positive, got {scale}")));
        }
        let mut rng = Rng::new(config.seed);
        let p3 = config.patch.pow(3);
        let embed = Linear::init_scaled(2 * p3, config.channels, scale, &mut rng);
        let blocks = (0..config.pairs)
            .map(|_| {
                Ok([
                    SwinParams::init_scaled(config.channels, config.heads, window, scale, &mut rng)?,
                    SwinParams::init_scaled(config.channels, config.heads, window, scale, &mut rng)?,
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::init_scaled(config.channels, 3 * p3, scale, &mut rng);
        Ok(SwinNet {
            config,
            embed,
            blocks,
            head,
        })
    }

    pub fn zeros_like(&self) -> Self {
        SwinNet {
            config: self.config,
            embed: Linear::zeros(self.embed.inp, self.embed.out),
            blocks: self.blocks.iter().map(|[a, b]| [a.zeros_like(), b.zeros_like()]).collect(),
            head: Linear::zeros(self.head.inp, self.head.out),
        }
    }

    pub fn token_dims(&self, image: Dims) -> Dims {
        Dims([0, 1, 2].map(|d| image[d].div_ceil(self.config.patch)))
    }

    /// Independent dropout masks for every block of the network.
    pub fn sample_dropout(&self, image: Dims, p: f64, rng: &mut Rng) -> Result<Vec<[BlockDropout; 2]>> {
        let tokens = self.token_dims(image).len();
        let c = self.config.channels;
        (0..self.blocks.len())
            .map(|_| Ok([BlockDropout::sample(tokens, c, p, rng)?, BlockDropout::sample(tokens, c, p, rng)?]))
            .collect()
    }

    pub fn forward(
        &self,
        moving: &Volume,
        fixed: &Volume,
        drop: Option<&[[BlockDropout; 2]]>,
    ) -> Result<(DisplacementField, NetTape)> {
        if let Some(d) = drop {
            if d.len() != self.blocks.len() {
                return Err(Error::DimMismatch(format!(
                    "{} dropout pairs for {} block pairs",
                    d.len(),
                    self.blocks.len()
                )));
            }
        }
        let (mut tokens, embed) = patch_embed(moving, fixed, self.config.patch, &self.embed)?;
        let mut pairs = Vec::with_capacity(self.blocks.len());
        for (i, [a, b]) in self.blocks.iter().enumerate() {
            let masks = drop.map(|d| [&d[i][0], &d[i][1]]);
            let (next, tape) = swin_block_pair(&tokens, [a, b], masks)?;
            tokens = next;
            pairs.push(tape);
        }
        let raw = self.head.forward(tokens.data());
        let image = moving.dims();
        let p = self.config.patch;
        let pdims = Dims::cube(p);
        let p3 = pdims.len();
        let tdims = tokens.dims();
        let u = DisplacementField::from_fn(image, |v| {
            let t = [0, 1, 2].map(|d| v[d] / p);
            let o = [0, 1, 2].map(|d| v[d] % p);
            let base = tdims.index(t[0], t[1], t[2]) * 3 * p3 + pdims.index(o[0], o[1], o[2]);
            [raw[base], raw[base + p3], raw[base + 2 * p3]]
        });
        Ok((
            u,
            NetTape {
                embed,
                pairs,
                features: tokens,
                image,
            },
        ))
    }

    /// Reverse pass: gradients with respect to the moving image, the fixed
    /// image and every parameter.
    pub fn vjp(&self, tape: &NetTape, grad_u: &DisplacementField) -> Result<(Volume, Volume, SwinNet)> {
        if grad_u.dims() != tape.image {
            return Err(Error::TapeMismatch(format!(
                "output gradient {:?} vs recorded image {:?}",
                grad_u.dims().0,
                tape.image.0
            )));
        }
        let mut grad = self.zeros_like();
        let p = self.config.patch;
        let pdims = Dims::cube(p);
        let p3 = pdims.len();
        let tdims = tape.features.dims();
        let mut g_raw = vec![0.0; tdims.len() * 3 * p3];
        for (idx, v) in tape.image.iter().enumerate() {
            let t = [0, 1, 2].map(|d| v[d] / p);
            let o = [0, 1, 2].map(|d| v[d] % p);
            let base = tdims.index(t[0], t[1], t[2]) * 3 * p3 + pdims.index(o[0], o[1], o[2]);
            for c in 0..3 {
                g_raw[base + c * p3] += grad_u.comp(c)[idx];
            }
        }
        let g_feat = self.head.backward(tape.features.data(), &g_raw, &mut grad.head);
        let mut g = TokenGrid::new(tdims, self.config.channels, g_feat)?;
        for (i, [a, b]) in self.blocks.iter().enumerate().rev() {
            let (g_in, [ga, gb]) = swin_block_pair_vjp([a, b], &tape.pairs[i], &g)?;
            grad.blocks[i] = [ga, gb];
            g = g_in;
        }
        let [gm, gf] = patch_embed_vjp(&tape.embed, &self.embed, &g, &mut grad.embed)?;
        Ok((gm, gf, grad))
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = vec![
            ("embed.weight".to_string(), vec![self.embed.out, self.embed.inp], &self.embed.weight[..]),
            ("embed.bias".to_string(), vec![self.embed.out], &self.embed.bias[..]),
        ];
        for (i, pair) in self.blocks.iter().enumerate() {
            for (j, p) in pair.iter().enumerate() {
                for (name, shape, data) in p.tensors() {
                    out.push((format!("blocks.{i}.{j}.{name}"), shape, data));
                }
            }
        }
        out.push(("head.weight".into(), vec![self.head.out, self.head.inp], &self.head.weight[..]));
        out.push(("head.bias".into(), vec![self.head.out], &self.head.bias[..]));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = vec![&mut self.embed.weight, &mut self.embed.bias];
        for pair in self.blocks.iter_mut() {
            for p in pair.iter_mut() {
                out.extend(p.tensors_mut());
            }
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|(_, _, t)| t.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        set_flat(self.tensors_mut(), flat)
    }

    /// Writes `<stem>.json` (manifest) and `<stem>.bin` (little-endian f64 blob).
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        let mut offset = 0;
        for (name, shape, data) in self.tensors() {
            tensors.push(TensorEntry {
                name,
                shape,
                offset,
                len: data.len(),
            });
            offset += data.len();
            for v in data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = ParamManifest {
            seed: self.config.seed,
            activation: ACTIVATION.into(),
            config: self.config,
            tensors,
        };
        let bin = stem.with_extension("bin");
        std::fs::write(&bin, &blob).map_err(|e| Error::io(&bin, e))?;
        let json = stem.with_extension("json");
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
        Ok(())
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let stem = stem.as_ref();
        let json = stem.with_extension("json");
        let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let manifest: ParamManifest = serde_json::from_str(&text)?;
        if manifest.activation != ACTIVATION {
            return Err(Error::BadHeader {
                path: json,
                reason: format!("unsupported activation {}", manifest.activation),
            });
        }
        let mut net = SwinNet::new(manifest.config)?;
        let bin = stem.with_extension("bin");
        let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let expected: usize = net.tensors().iter().map(|(_, _, t)| t.len()).sum();
        if bytes.len() != expected * 8 {
            return Err(Error::PayloadMismatch {
                path: bin,
                expected: expected * 8,
                found: bytes.len(),
            });
        }
        let layout: Vec<(String, Vec<usize>)> = net.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        if layout.len() != manifest.tensors.len()
            || layout
                .iter()
                .zip(&manifest.tensors)
                .any(|((n, s), e)| *n != e.name || *s != e.shape)
        {
            return Err(Error::BadHeader {
                path: json,
                reason: "tensor layout does not match configuration".into(),
            });
        }
        let flat: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameters in {}", bin.display())));
        }
        net.set_flat(&flat)?;
        Ok(net)
    }
}
