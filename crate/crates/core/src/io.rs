//! On-disk volume format: `<name>.json` header plus `<name>.raw` payload of
//! little-endian `f32` samples in storage order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, DisplacementField, LabelStack, Volume};

pub const DTYPE: &str = "f32le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: String,
}

/// Strips a trailing `.json` or `.raw` so either file (or the bare stem) can
/// name a volume.
pub fn volume_stem(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

fn with_suffix(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn header_path(path: &Path) -> PathBuf {
    with_suffix(&volume_stem(path), "json")
}

pub fn payload_path(path: &Path) -> PathBuf {
    with_suffix(&volume_stem(path), "raw")
}

pub fn volume_read(path: impl AsRef<Path>) -> Result<Volume> {
    let hpath = header_path(path.as_ref());
    let ppath = payload_path(path.as_ref());
    if !hpath.exists() {
        return Err(Error::MissingHeader(hpath));
    }
    let text = fs::read_to_string(&hpath).map_err(|e| Error::io(&hpath, e))?;
    let header: VolumeHeader = serde_json::from_str(&text).map_err(|e| Error::BadHeader {
        path: hpath.clone(),
        reason: e.to_string(),
    })?;
    if header.dtype != DTYPE {
        return Err(Error::BadHeader {
            path: hpath,
            reason: format!("unsupported dtype {:?}", header.dtype),
        });
    }
    let dims = Dims(header.dims);
    let bytes = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    let expected = dims.len() * 4;
    if bytes.len() != expected {
        return Err(Error::PayloadMismatch {
            path: ppath,
            expected,
            found: bytes.len(),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Volume::with_spacing(dims, header.spacing, data)
}

pub fn volume_write(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let mut payload = Vec::with_capacity(v.data().len() * 4);
    for (i, &x) in v.data().iter().enumerate() {
        let s = x as f32;
        if !s.is_finite() {
            return Err(Error::NonFinite(format!(
                "sample {i} ({x}) not representable as f32"
            )));
        }
        payload.extend_from_slice(&s.to_le_bytes());
    }
    let header = VolumeHeader {
        dims: v.dims().0,
        spacing: v.spacing(),
        dtype: DTYPE.to_string(),
    };
    let hpath = header_path(path.as_ref());
    let ppath = payload_path(path.as_ref());
    let text = serde_json::to_string_pretty(&header)?;
    fs::write(&ppath, payload).map_err(|e| Error::io(&ppath, e))?;
    fs::write(&hpath, text + "\n").map_err(|e| Error::io(&hpath, e))?;
    Ok(())
}

const FIELD_SUFFIXES: [&str; 3] = ["ux", "uy", "uz"];

fn suffixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = volume_stem(prefix).into_os_string();
    s.push("_");
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes the three channels as `<prefix>_ux`, `<prefix>_uy`, `<prefix>_uz`.
pub fn field_write(u: &DisplacementField, prefix: impl AsRef<Path>) -> Result<()> {
    for (c, sfx) in FIELD_SUFFIXES.iter().enumerate() {
        volume_write(&u.channel_volume(c), suffixed(prefix.as_ref(), sfx))?;
    }
    Ok(())
}

pub fn field_read(prefix: impl AsRef<Path>) -> Result<DisplacementField> {
    let vols = FIELD_SUFFIXES
        .iter()
        .map(|sfx| volume_read(suffixed(prefix.as_ref(), sfx)))
        .collect::<Result<Vec<_>>>()?;
    let dims = vols[0].dims();
    for v in &vols[1..] {
        dims.ensure_eq(&v.dims(), "field channels")?;
    }
    let mut it = vols.into_iter().map(Volume::into_data);
    DisplacementField::new(
        dims,
        [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()],
    )
}

/// Path of label channel `k` for a volume written at `prefix`.
pub fn label_path(prefix: impl AsRef<Path>, k: usize) -> PathBuf {
    suffixed(prefix.as_ref(), &format!("label{k}"))
}

pub fn labels_write(s: &LabelStack, prefix: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    s.channels()
        .iter()
        .enumerate()
        .map(|(k, ch)| {
            let p = label_path(prefix.as_ref(), k);
            volume_write(ch, &p)?;
            Ok(header_path(&p))
        })
        .collect()
}

pub fn labels_read(paths: &[PathBuf]) -> Result<LabelStack> {
    let channels = paths.iter().map(volume_read).collect::<Result<Vec<_>>>()?;
    LabelStack::new(channels)
}
