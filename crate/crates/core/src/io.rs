//! On-disk formats.
//!
//! A volume file is a pair `<stem>.json` (header) + `<stem>.raw` (payload).
//! Activity volumes are stored as little-endian f32, label maps as
//! little-endian u16 label codes.

use crate::error::{PvcError, Result};
use crate::volume::{TemplateSet, Volume};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataType {
    F32le,
    U16le,
}

impl DataType {
    pub fn size(self) -> usize {
        match self {
            DataType::F32le => 4,
            DataType::U16le => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub dtype: DataType,
    #[serde(default)]
    pub label_map: bool,
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Accepts `x`, `x.json` or `x.raw` and returns `x`.
pub fn volume_stem(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

fn write_pair(stem: &Path, header: &VolumeHeader, payload: &[u8]) -> Result<()> {
    let stem = volume_stem(stem);
    if let Some(dir) = stem.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(with_ext(&stem, "json"), serde_json::to_vec_pretty(header)?)?;
    std::fs::write(with_ext(&stem, "raw"), payload)?;
    Ok(())
}

fn read_pair(stem: &Path) -> Result<(VolumeHeader, Vec<u8>)> {
    let stem = volume_stem(stem);
    let header: VolumeHeader = serde_json::from_slice(&std::fs::read(with_ext(&stem, "json"))?)?;
    let payload = std::fs::read(with_ext(&stem, "raw"))?;
    let expected = header.dims.iter().product::<usize>() * header.dtype.size();
    if payload.len() != expected {
        return Err(PvcError::Format(format!(
            "{}: payload has {} bytes, header implies {expected}",
            stem.display(),
            payload.len()
        )));
    }
    Ok((header, payload))
}

pub fn write_volume(stem: &Path, v: &Volume) -> Result<()> {
    let header = VolumeHeader {
        dims: v.dims,
        spacing_mm: v.spacing,
        dtype: DataType::F32le,
        label_map: false,
    };
    let payload: Vec<u8> = v.data.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
    write_pair(stem, &header, &payload)
}

pub fn read_volume(stem: &Path) -> Result<Volume> {
    let (h, payload) = read_pair(stem)?;
    if h.dtype != DataType::F32le || h.label_map {
        return Err(PvcError::Format(format!("{} is not an activity volume", stem.display())));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Volume::new(h.dims, h.spacing_mm, data)
}

pub fn write_labels(stem: &Path, t: &TemplateSet, spacing: [f64; 3]) -> Result<()> {
    let header = VolumeHeader {
        dims: t.dims,
        spacing_mm: spacing,
        dtype: DataType::U16le,
        label_map: true,
    };
    let payload: Vec<u8> = t.codes().iter().flat_map(|c| c.to_le_bytes()).collect();
    write_pair(stem, &header, &payload)
}

pub fn read_labels(stem: &Path) -> Result<TemplateSet> {
    let (h, payload) = read_pair(stem)?;
    if h.dtype != DataType::U16le || !h.label_map {
        return Err(PvcError::Format(format!("{} is not a label map", stem.display())));
    }
    let codes: Vec<u16> = payload.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    TemplateSet::from_codes(h.dims, &codes)
}

/// Little-endian byte sink used by the checkpoint encoder.
#[derive(Default)]
pub(crate) struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn u128(&mut self, v: u128) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn blob(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.bytes(b);
    }
    pub fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.bytes(&x.to_le_bytes());
        }
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(PvcError::Format(format!("truncated data at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    pub fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }
    pub fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n).map_err(|_| PvcError::Format(format!("length {n} too large")))
    }
    pub fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }
    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| PvcError::Format("tensor too large".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    pub fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stems() {
        assert_eq!(volume_stem(Path::new("a/b.json")), PathBuf::from("a/b"));
        assert_eq!(volume_stem(Path::new("a/b")), PathBuf::from("a/b"));
        assert_eq!(with_ext(Path::new("a/b.c"), "raw"), PathBuf::from("a/b.c.raw"));
    }

    #[test]
    fn reader_detects_truncation() {
        let mut w = ByteWriter::default();
        w.u32(7);
        let mut r = ByteReader::new(&w.buf);
        assert_eq!(r.u32().unwrap(), 7);
        assert!(r.done());
        assert!(r.u32().is_err());
    }
}
