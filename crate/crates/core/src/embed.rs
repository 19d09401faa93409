//! Semantic query and clip embeddings.
//!
//! Real deployments precompute 512-d vectors offline and drop them in via
//! the binary embedding file format. For hermetic tests there is a built-in
//! hashed bag-of-words text embedder that is deterministic across platforms.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const EMBED_DIM: usize = 512;

const MAGIC: &[u8; 4] = b"TQSE";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSource {
    ExternalFile,
    HashedBow,
}

#[derive(Debug, Clone)]
pub struct QueryEmbedding {
    pub vector: Vec<f64>,
    pub source: EmbeddingSource,
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct AudioSemanticEmbedding {
    pub vector: Vec<f64>,
}

fn l2_normalize(mut v: Vec<f64>) -> Result<Vec<f64>> {
    if v.len() != EMBED_DIM {
        return Err(Error::ShapeMismatch { expected: vec![EMBED_DIM], got: vec![v.len()] });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerics("embedding contains non-finite values".into()));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Numerics("cannot normalize a zero embedding".into()));
    }
    for x in &mut v {
        *x /= norm;
    }
    Ok(v)
}

pub fn is_unit_norm(v: &[f64]) -> bool {
    (v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-6
}

fn fnv1a_64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Bucket index of a single token under the hashed embedder.
pub fn token_bucket(token: &str) -> usize {
    (fnv1a_64(token.as_bytes()) % EMBED_DIM as u64) as usize
}

fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Deterministic toy text embedder: lowercase, split on non-alphanumeric,
/// FNV-1a each token into one of 512 buckets, count, L2-normalize.
pub fn embed_text_hashed(text: &str) -> Result<QueryEmbedding> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(Error::InvalidArgument(format!("query '{text}' has no tokens")));
    }
    let mut v = vec![0.0; EMBED_DIM];
    for t in &tokens {
        v[token_bucket(t)] += 1.0;
    }
    Ok(QueryEmbedding {
        vector: l2_normalize(v)?,
        source: EmbeddingSource::HashedBow,
        text: text.to_owned(),
    })
}

fn read_vector(path: &Path) -> Result<Vec<f64>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not an embedding file".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported embedding version {version}")));
    }
    r.read_exact(&mut b4)?;
    let dim = u32::from_le_bytes(b4) as usize;
    if dim != EMBED_DIM {
        return Err(Error::Format(format!("embedding dim {dim}, expected {EMBED_DIM}")));
    }
    let mut v = Vec::with_capacity(dim);
    for _ in 0..dim {
        r.read_exact(&mut b4)?;
        v.push(f32::from_le_bytes(b4) as f64);
    }
    Ok(v)
}

/// Load and L2-normalize a query embedding; `text` is carried alongside.
pub fn load_query_embedding(path: impl AsRef<Path>, text: &str) -> Result<QueryEmbedding> {
    Ok(QueryEmbedding {
        vector: l2_normalize(read_vector(path.as_ref())?)?,
        source: EmbeddingSource::ExternalFile,
        text: text.to_owned(),
    })
}

pub fn load_audio_embedding(path: impl AsRef<Path>) -> Result<AudioSemanticEmbedding> {
    Ok(AudioSemanticEmbedding { vector: l2_normalize(read_vector(path.as_ref())?)? })
}

/// Write a vector atomically (temp file in the same directory, then rename).
pub fn save_embedding(vector: &[f64], path: impl AsRef<Path>) -> Result<()> {
    if vector.len() != EMBED_DIM {
        return Err(Error::ShapeMismatch { expected: vec![EMBED_DIM], got: vec![vector.len()] });
    }
    let path = path.as_ref();
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "embed".into())
    ));
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(EMBED_DIM as u32).to_le_bytes())?;
        for &x in vector {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
