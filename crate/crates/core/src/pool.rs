//! Embedded pools and their on-disk formats.
//!
//! Binary embeddings (`GEMB`): 4 magic bytes, `u32` version (1), `u64` row
//! count, `u64` dim, then row-major `f32` values. Gradient-norm sidecar
//! (`GNRM`): 4 magic bytes, `u32` version, `u64` count, then `f32` values.
//! Every multi-byte field is little-endian. Labels are always a CSV sidecar
//! with one integer per line. A CSV fallback is accepted for embeddings and
//! gradient norms.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"GEMB";
pub const GRAD_MAGIC: &[u8; 4] = b"GNRM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolRole {
    Training,
    Validation,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileFormat {
    #[default]
    Binary,
    Csv,
}

/// Borrowed view of one pool entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmbeddedPoint<'a> {
    pub index: usize,
    pub embedding: &'a [f32],
    pub grad_norm: f32,
    pub label: Option<i64>,
}

/// An ordered collection of embedded points sharing one dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct Pool {
    role: PoolRole,
    dim: usize,
    embeddings: Vec<f32>,
    grad_norms: Vec<f32>,
    labels: Option<Vec<i64>>,
}

impl Pool {
    /// Builds a pool, validating every invariant. A missing gradient vector
    /// means zero gradient norm for every point.
    pub fn new(
        role: PoolRole,
        dim: usize,
        embeddings: Vec<f32>,
        grad_norms: Option<Vec<f32>>,
        labels: Option<Vec<i64>>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("embedding dimension must be positive".into()));
        }
        if !embeddings.len().is_multiple_of(dim) {
            return Err(Error::InvalidInput(format!(
                "{} embedding values do not divide into rows of dimension {dim}",
                embeddings.len()
            )));
        }
        let len = embeddings.len() / dim;
        if len == 0 {
            return Err(Error::InvalidInput("pool is empty".into()));
        }
        if let Some(row) = embeddings
            .chunks_exact(dim)
            .position(|r| r.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::InvalidInput(format!(
                "row {}: non-finite embedding value",
                row + 1
            )));
        }
        let grad_norms = grad_norms.unwrap_or_else(|| vec![0.0; len]);
        if grad_norms.len() != len {
            return Err(Error::InvalidInput(format!(
                "{} gradient norms for {len} points",
                grad_norms.len()
            )));
        }
        if let Some(row) = grad_norms.iter().position(|g| !g.is_finite() || *g < 0.0) {
            return Err(Error::InvalidInput(format!(
                "row {}: gradient norm must be finite and non-negative, got {}",
                row + 1,
                grad_norms[row]
            )));
        }
        if let Some(labels) = &labels {
            if labels.len() != len {
                return Err(Error::InvalidInput(format!(
                    "{} labels for {len} points",
                    labels.len()
                )));
            }
        }
        Ok(Self {
            role,
            dim,
            embeddings,
            grad_norms,
            labels,
        })
    }

    pub fn role(&self) -> PoolRole {
        self.role
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.embeddings.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn embedding(&self, index: usize) -> &[f32] {
        &self.embeddings[index * self.dim..(index + 1) * self.dim]
    }

    pub fn embeddings(&self) -> &[f32] {
        &self.embeddings
    }

    pub fn grad_norms(&self) -> &[f32] {
        &self.grad_norms
    }

    pub fn labels(&self) -> Option<&[i64]> {
        self.labels.as_deref()
    }

    pub fn point(&self, index: usize) -> EmbeddedPoint<'_> {
        EmbeddedPoint {
            index,
            embedding: self.embedding(index),
            grad_norm: self.grad_norms[index],
            label: self.labels.as_ref().map(|l| l[index]),
        }
    }

    pub fn points(&self) -> impl Iterator<Item = EmbeddedPoint<'_>> + '_ {
        (0..self.len()).map(|i| self.point(i))
    }

    pub fn with_role(mut self, role: PoolRole) -> Self {
        self.role = role;
        self
    }

    pub fn with_grad_norms(self, grad_norms: Vec<f32>) -> Result<Self> {
        Pool::new(self.role, self.dim, self.embeddings, Some(grad_norms), self.labels)
    }

    pub fn with_labels(self, labels: Vec<i64>) -> Result<Self> {
        Pool::new(
            self.role,
            self.dim,
            self.embeddings,
            Some(self.grad_norms),
            Some(labels),
        )
    }

    /// Copies the given rows, in order, into a new pool. Indices are renumbered
    /// from zero.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut embeddings = Vec::with_capacity(indices.len() * self.dim);
        let mut grad = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    size: self.len(),
                });
            }
            embeddings.extend_from_slice(self.embedding(i));
            grad.push(self.grad_norms[i]);
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Pool::new(self.role, self.dim, embeddings, Some(grad), labels)
    }
}

/// Paths for one pool: embeddings plus optional sidecars.
#[derive(Clone, Debug)]
pub struct PoolFiles {
    pub embeddings: PathBuf,
    pub grad_norms: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub format: FileFormat,
}

/// Loads an embeddings file with no sidecars: gradient norms default to zero.
pub fn load_pool(path: impl AsRef<Path>, format: FileFormat) -> Result<Pool> {
    load_pool_files(
        &PoolFiles {
            embeddings: path.as_ref().to_path_buf(),
            grad_norms: None,
            labels: None,
            format,
        },
        PoolRole::Training,
    )
}

pub fn load_pool_files(files: &PoolFiles, role: PoolRole) -> Result<Pool> {
    let (dim, embeddings) = load_embeddings(&files.embeddings, files.format)?;
    let rows = embeddings.len() / dim.max(1);
    let grad = files
        .grad_norms
        .as_ref()
        .map(|p| load_grad_norms(p, files.format))
        .transpose()?;
    if let (Some(g), Some(path)) = (&grad, &files.grad_norms) {
        if g.len() != rows {
            return Err(Error::Format {
                path: path.clone(),
                message: format!("{} gradient norms for {rows} embedding rows", g.len()),
            });
        }
    }
    let labels = files.labels.as_ref().map(|p| load_labels(p)).transpose()?;
    if let (Some(l), Some(path)) = (&labels, &files.labels) {
        if l.len() != rows {
            return Err(Error::Format {
                path: path.clone(),
                message: format!("{} labels for {rows} embedding rows", l.len()),
            });
        }
    }
    Pool::new(role, dim, embeddings, grad, labels).map_err(|e| match e {
        Error::InvalidInput(message) => Error::Format {
            path: files.embeddings.clone(),
            message,
        },
        other => other,
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

struct ByteReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                message: format!("truncated file: needed {n} bytes at offset {}", self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let found = self.take(4)?;
        if found != magic {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                message: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(found),
                    String::from_utf8_lossy(magic)
                ),
            });
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                message: format!("unsupported version {version}"),
            });
        }
        Ok(())
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let nbytes = count.checked_mul(4).ok_or_else(|| Error::Format {
            path: self.path.to_path_buf(),
            message: "element count overflows".into(),
        })?;
        let raw = self.take(nbytes)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                message: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

fn to_usize(path: &Path, v: u64) -> Result<usize> {
    usize::try_from(v).map_err(|_| Error::Format {
        path: path.to_path_buf(),
        message: format!("size {v} does not fit in memory"),
    })
}

/// Reads an embeddings file, returning `(dim, row-major values)`.
pub fn load_embeddings(path: &Path, format: FileFormat) -> Result<(usize, Vec<f32>)> {
    match format {
        FileFormat::Binary => {
            let bytes = read_bytes(path)?;
            let mut r = ByteReader {
                path,
                bytes: &bytes,
                pos: 0,
            };
            r.header(EMBEDDING_MAGIC)?;
            let rows = to_usize(path, r.u64()?)?;
            let dim = to_usize(path, r.u64()?)?;
            let count = rows.checked_mul(dim).ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                message: "rows * dim overflows".into(),
            })?;
            let values = r.f32s(count)?;
            r.finish()?;
            if dim == 0 {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    message: "dimension must be positive".into(),
                });
            }
            for (row, chunk) in values.chunks_exact(dim).enumerate() {
                if let Some(v) = chunk.iter().find(|v| !v.is_finite()) {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        row: row + 1,
                        message: format!("non-finite value {v}"),
                    });
                }
            }
            Ok((dim, values))
        }
        FileFormat::Csv => {
            let text = read_text(path)?;
            let mut dim = None;
            let mut values = Vec::new();
            for (lineno, line) in text.lines().enumerate() {
                let row = lineno + 1;
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                let mut width = 0;
                for field in line.split(',') {
                    let field = field.trim();
                    let v: f32 = field.parse().map_err(|_| Error::Parse {
                        path: path.to_path_buf(),
                        row,
                        message: format!("cannot parse {field:?} as a number"),
                    })?;
                    if !v.is_finite() {
                        return Err(Error::Parse {
                            path: path.to_path_buf(),
                            row,
                            message: format!("non-finite value {field:?}"),
                        });
                    }
                    values.push(v);
                    width += 1;
                }
                match dim {
                    None => dim = Some(width),
                    Some(d) if d != width => {
                        return Err(Error::Parse {
                            path: path.to_path_buf(),
                            row,
                            message: format!("dimension mismatch: expected {d} columns, found {width}"),
                        })
                    }
                    Some(_) => {}
                }
            }
            let dim = dim.ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                message: "no rows".into(),
            })?;
            Ok((dim, values))
        }
    }
}

pub fn load_grad_norms(path: &Path, format: FileFormat) -> Result<Vec<f32>> {
    let values = match format {
        FileFormat::Binary => {
            let bytes = read_bytes(path)?;
            let mut r = ByteReader {
                path,
                bytes: &bytes,
                pos: 0,
            };
            r.header(GRAD_MAGIC)?;
            let count = to_usize(path, r.u64()?)?;
            let values = r.f32s(count)?;
            r.finish()?;
            values
        }
        FileFormat::Csv => {
            let text = read_text(path)?;
            let mut values = Vec::new();
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                let v: f32 = line.parse().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    row: lineno + 1,
                    message: format!("cannot parse {line:?} as a number"),
                })?;
                values.push(v);
            }
            values
        }
    };
    for (i, g) in values.iter().enumerate() {
        if !g.is_finite() || *g < 0.0 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row: i + 1,
                message: format!("gradient norm must be finite and non-negative, got {g}"),
            });
        }
    }
    Ok(values)
}

/// Reads a label sidecar: one integer per line. A blank line is a point with
/// no label, which is rejected unless every point is unlabeled (an empty file).
pub fn load_labels(path: &Path) -> Result<Vec<i64>> {
    let text = read_text(path)?;
    let mut lines: Vec<&str> = text.lines().map(str::trim).collect();
    while lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    let mut labels = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row: i + 1,
                message: "missing label: labels must be present on all points or none".into(),
            });
        }
        labels.push(line.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            row: i + 1,
            message: format!("cannot parse {line:?} as an integer label"),
        })?);
    }
    Ok(labels)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub fn save_embeddings(pool: &Pool, path: &Path, format: FileFormat) -> Result<()> {
    let mut w = create(path)?;
    let res = (|| -> std::io::Result<()> {
        match format {
            FileFormat::Binary => {
                w.write_all(EMBEDDING_MAGIC)?;
                w.write_all(&FORMAT_VERSION.to_le_bytes())?;
                w.write_all(&(pool.len() as u64).to_le_bytes())?;
                w.write_all(&(pool.dim() as u64).to_le_bytes())?;
                for v in pool.embeddings() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            FileFormat::Csv => {
                for row in pool.embeddings().chunks_exact(pool.dim()) {
                    let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                    writeln!(w, "{}", line.join(","))?;
                }
            }
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

pub fn save_grad_norms(grad_norms: &[f32], path: &Path, format: FileFormat) -> Result<()> {
    let mut w = create(path)?;
    let res = (|| -> std::io::Result<()> {
        match format {
            FileFormat::Binary => {
                w.write_all(GRAD_MAGIC)?;
                w.write_all(&FORMAT_VERSION.to_le_bytes())?;
                w.write_all(&(grad_norms.len() as u64).to_le_bytes())?;
                for v in grad_norms {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            FileFormat::Csv => {
                for v in grad_norms {
                    writeln!(w, "{v}")?;
                }
            }
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

pub fn save_labels(labels: &[i64], path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let res = (|| -> std::io::Result<()> {
        for l in labels {
            writeln!(w, "{l}")?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

/// Writes the pool's embeddings and whichever sidecars `files` names.
pub fn save_pool(pool: &Pool, files: &PoolFiles) -> Result<()> {
    save_embeddings(pool, &files.embeddings, files.format)?;
    if let Some(p) = &files.grad_norms {
        save_grad_norms(pool.grad_norms(), p, files.format)?;
    }
    if let (Some(p), Some(labels)) = (&files.labels, pool.labels()) {
        save_labels(labels, p)?;
    }
    Ok(())
}

/// Reads a newline-separated list of decimal indices.
pub fn load_indices(path: &Path) -> Result<Vec<usize>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        out.push(line.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            row: lineno + 1,
            message: format!("cannot parse {line:?} as an index"),
        })?);
    }
    Ok(out)
}
