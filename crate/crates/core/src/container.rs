//! Shared binary layout for checkpoints and dataset exports:
//!
//! ```text
//! [8-byte magic][u32 LE manifest length][UTF-8 JSON manifest][blob]
//! ```
//!
//! The manifest carries a `tensors` array of `{name, shape, dtype, offset, len}`
//! entries. `offset` is relative to the start of the blob and `len` is in
//! bytes; data is little-endian `f32`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DTYPE_F32LE: &str = "f32le";
const PREFIX_LEN: usize = 12;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub len: u64,
}

/// Splits a file into its manifest bytes and blob, checking magic and framing.
pub struct Framed<'a> {
    pub manifest: &'a [u8],
    pub blob: &'a [u8],
    /// Absolute file offset of the first blob byte.
    pub blob_start: u64,
}

pub fn unframe<'a>(magic: &[u8; 8], bytes: &'a [u8]) -> Result<Framed<'a>> {
    if bytes.len() < 8 {
        return Err(Error::format(bytes.len() as u64, "truncated before end of magic"));
    }
    if &bytes[..8] != magic {
        return Err(Error::format(
            0,
            format!("bad magic, expected {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    if bytes.len() < PREFIX_LEN {
        return Err(Error::format(bytes.len() as u64, "truncated manifest length"));
    }
    let mlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let end = PREFIX_LEN
        .checked_add(mlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format(8, format!("manifest length {mlen} exceeds file size {}", bytes.len())))?;
    Ok(Framed {
        manifest: &bytes[PREFIX_LEN..end],
        blob: &bytes[end..],
        blob_start: end as u64,
    })
}

/// Parses the manifest JSON, reporting errors at the manifest's file offset.
pub fn parse_manifest<T: for<'de> Deserialize<'de>>(framed: &Framed<'_>) -> Result<T> {
    serde_json::from_slice(framed.manifest)
        .map_err(|e| Error::format(PREFIX_LEN as u64, format!("manifest: {e}")))
}

/// Validates tensor entries against the blob and decodes them in manifest order.
pub fn read_tensors(entries: &[TensorEntry], framed: &Framed<'_>) -> Result<Vec<(String, Tensor)>> {
    let base = framed.blob_start;
    let blob_len = framed.blob.len() as u64;
    let mut spans = Vec::with_capacity(entries.len());
    for e in entries {
        if e.dtype != DTYPE_F32LE {
            return Err(Error::format(base + e.offset, format!("`{}`: unsupported dtype {:?}", e.name, e.dtype)));
        }
        if e.shape.is_empty() || e.shape.len() > 4 || e.shape.contains(&0) {
            return Err(Error::format(base + e.offset, format!("`{}`: invalid shape {:?}", e.name, e.shape)));
        }
        let bytes = e
            .shape
            .iter()
            .try_fold(4u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| Error::format(base + e.offset, format!("`{}`: shape overflows", e.name)))?;
        if bytes != e.len {
            return Err(Error::format(
                base + e.offset,
                format!("`{}`: len {} does not match shape {:?} ({} bytes)", e.name, e.len, e.shape, bytes),
            ));
        }
        let end = e
            .offset
            .checked_add(e.len)
            .filter(|&end| end <= blob_len)
            .ok_or_else(|| {
                Error::format(
                    base + blob_len,
                    format!("`{}`: span {}+{} runs past end of blob ({} bytes)", e.name, e.offset, e.len, blob_len),
                )
            })?;
        spans.push((e.offset, end, e.name.as_str()));
    }
    spans.sort_unstable();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(Error::format(
                base + pair[1].0,
                format!("`{}` overlaps `{}`", pair[1].2, pair[0].2),
            ));
        }
    }
    let covered = spans.last().map_or(0, |s| s.1);
    if covered != blob_len {
        return Err(Error::format(
            base + covered,
            format!("blob has {} bytes, manifest accounts for {covered}", blob_len),
        ));
    }

    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let raw = &framed.blob[e.offset as usize..(e.offset + e.len) as usize];
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(base + e.offset + 4 * i as u64, format!("`{}`: non-finite value", e.name)));
        }
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| Error::format(base + e.offset, err.to_string()))?;
        out.push((e.name.clone(), t));
    }
    Ok(out)
}

/// Lays tensors out contiguously and returns their manifest entries.
pub fn layout_blob<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    for (name, t) in tensors {
        let offset = blob.len() as u64;
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: DTYPE_F32LE.to_string(),
            offset,
            len: blob.len() as u64 - offset,
        });
    }
    (entries, blob)
}

pub fn frame(magic: &[u8; 8], manifest: &impl Serialize, blob: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(manifest)?;
    let mlen = u32::try_from(json.len()).map_err(|_| Error::Config("manifest exceeds 4 GiB".into()))?;
    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + blob.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&mlen.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(blob);
    Ok(out)
}

/// Writes via a sibling temporary file and rename, so readers never see a
/// partial file. The parent directory must already exist.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    if !parent.is_dir() {
        return Err(Error::io(
            parent,
            std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        ));
    }
    let file_name = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = parent.join(format!(".{file_name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
