//! Checkpoint container: named f32 tensors in a little-endian binary file.
//!
//! Layout: magic "TQCK", u32 version, u32 entry count, then per entry a
//! u16 name length, the UTF-8 name, u8 rank, rank u32 extents, and the
//! row-major f32 payload. Optimizer state rides along as `<name>.m` and
//! `<name>.v` entries; scalars are rank-0 tensors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{numel, Element, Parameter};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TQCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl CheckpointEntry {
    pub fn scalar(name: impl Into<String>, value: f32) -> Self {
        Self { name: name.into(), shape: vec![], data: vec![value] }
    }
}

/// Write entries atomically (temp file in the same directory, then rename).
pub fn save_checkpoint(path: impl AsRef<Path>, entries: &[CheckpointEntry]) -> Result<()> {
    let path = path.as_ref();
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "ckpt".into())
    ));
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(entries.len() as u32).to_le_bytes())?;
        for e in entries {
            let name = e.name.as_bytes();
            if name.len() > u16::MAX as usize {
                return Err(Error::Format(format!("entry name too long: {}", e.name)));
            }
            if numel(&e.shape) != e.data.len() {
                return Err(Error::ShapeMismatch { expected: e.shape.clone(), got: vec![e.data.len()] });
            }
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[e.shape.len() as u8])?;
            for &d in &e.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &x in &e.data {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<CheckpointEntry>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    r.read_exact(&mut b4)?;
    let count = u32::from_le_bytes(b4) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let name_len = u16::from_le_bytes(b2) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("checkpoint entry name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            r.read_exact(&mut b4)?;
            shape.push(u32::from_le_bytes(b4) as usize);
        }
        let n = numel(&shape);
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b4)?;
            data.push(f32::from_le_bytes(b4));
        }
        entries.push(CheckpointEntry { name, shape, data });
    }
    Ok(entries)
}

/// Serialize parameters, optionally with their Adam moment buffers.
pub fn params_to_entries<T: Element>(
    params: &[&Parameter<T>],
    with_optimizer: bool,
) -> Vec<CheckpointEntry> {
    let mut out = Vec::new();
    for p in params {
        out.push(CheckpointEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            data: p.data.iter().map(|&x| x.as_f64() as f32).collect(),
        });
        if with_optimizer {
            out.push(CheckpointEntry {
                name: format!("{}.m", p.name),
                shape: p.shape.clone(),
                data: p.m.iter().map(|&x| x.as_f64() as f32).collect(),
            });
            out.push(CheckpointEntry {
                name: format!("{}.v", p.name),
                shape: p.shape.clone(),
                data: p.v.iter().map(|&x| x.as_f64() as f32).collect(),
            });
        }
    }
    out
}

/// Restore parameter values (and Adam state when present) by name.
pub fn entries_to_params<T: Element>(
    entries: &[CheckpointEntry],
    params: &mut [&mut Parameter<T>],
) -> Result<()> {
    let by_name: std::collections::HashMap<&str, &CheckpointEntry> =
        entries.iter().map(|e| (e.name.as_str(), e)).collect();
    for p in params.iter_mut() {
        let e = by_name
            .get(p.name.as_str())
            .ok_or_else(|| Error::Format(format!("checkpoint is missing parameter '{}'", p.name)))?;
        if e.shape != p.shape {
            return Err(Error::ShapeMismatch { expected: p.shape.clone(), got: e.shape.clone() });
        }
        for (d, &x) in p.data.iter_mut().zip(&e.data) {
            *d = T::of(x as f64);
        }
        for (suffix, buf) in [(".m", true), (".v", false)] {
            let key = format!("{}{}", p.name, suffix);
            if let Some(e) = by_name.get(key.as_str()) {
                if e.shape != p.shape {
                    return Err(Error::ShapeMismatch { expected: p.shape.clone(), got: e.shape.clone() });
                }
                let dst = if buf { &mut p.m } else { &mut p.v };
                for (d, &x) in dst.iter_mut().zip(&e.data) {
                    *d = T::of(x as f64);
                }
            }
        }
    }
    Ok(())
}
