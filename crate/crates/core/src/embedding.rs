//! Embedding matrices and their on-disk codec.
//!
//! File layout (little-endian): `EMB1` magic, `u32` row count `n`, `u32`
//! dimension `d`, then `n * d` `f32` values row-major. Row ids live in a
//! sidecar `<file>.ids.json` holding a JSON array of `n` strings.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"EMB1";
pub const HEADER_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected EMB1")]
    BadMagic,
    #[error("file shorter than the {HEADER_LEN}-byte header")]
    ShortHeader,
    #[error("dimension must be positive")]
    ZeroDim,
    #[error(
        "truncated payload: header declares {rows} rows x {dim} = {expected} floats, found {found} ({complete_rows} complete rows)"
    )]
    Truncated {
        rows: usize,
        dim: usize,
        expected: usize,
        found: usize,
        complete_rows: usize,
    },
    #[error("{extra} trailing bytes after {rows} x {dim} payload")]
    TrailingBytes { rows: usize, dim: usize, extra: usize },
    #[error("non-finite value in row {row}")]
    NonFinite { row: usize },
    #[error("ids sidecar has {ids} entries for {rows} rows")]
    IdsLength { ids: usize, rows: usize },
    #[error("bad ids sidecar: {0}")]
    IdsFormat(String),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("row length {got} does not match dimension {dim}")]
    RowLength { got: usize, dim: usize },
    #[error("zero-norm row {row}")]
    ZeroNorm { row: usize },
    #[error("{0} not found")]
    MissingId(String),
    #[error("row index {row} out of range for {rows} rows")]
    RowOutOfRange { row: usize, rows: usize },
}

/// Dense `n x d` matrix of `f32` rows, each with a unique id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f32>,
    ids: Vec<String>,
}

impl EmbeddingMatrix {
    /// Builds a matrix from flat row-major data, checking every invariant.
    pub fn new(dim: usize, data: Vec<f32>, ids: Vec<String>) -> Result<Self, EmbeddingError> {
        if dim == 0 {
            return Err(EmbeddingError::ZeroDim);
        }
        if !data.len().is_multiple_of(dim) {
            return Err(EmbeddingError::RowLength {
                got: data.len() % dim,
                dim,
            });
        }
        let rows = data.len() / dim;
        if ids.len() != rows {
            return Err(EmbeddingError::IdsLength { ids: ids.len(), rows });
        }
        let m = Self { dim, data, ids };
        m.check_finite()?;
        m.check_unique()?;
        Ok(m)
    }

    pub fn from_rows(ids: Vec<String>, rows: &[Vec<f32>]) -> Result<Self, EmbeddingError> {
        let dim = rows.first().map_or(1, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(EmbeddingError::RowLength { got: r.len(), dim });
            }
            data.extend_from_slice(r);
        }
        Self::new(dim, data, ids)
    }

    /// Rows with generated ids `"0"`, `"1"`, ...
    pub fn from_rows_anonymous(rows: &[Vec<f32>]) -> Result<Self, EmbeddingError> {
        let ids = (0..rows.len()).map(|i| i.to_string()).collect();
        Self::from_rows(ids, rows)
    }

    pub fn empty(dim: usize) -> Result<Self, EmbeddingError> {
        Self::new(dim, Vec::new(), Vec::new())
    }

    fn check_finite(&self) -> Result<(), EmbeddingError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(pos) => Err(EmbeddingError::NonFinite { row: pos / self.dim }),
            None => Ok(()),
        }
    }

    fn check_unique(&self) -> Result<(), EmbeddingError> {
        let mut seen = HashSet::with_capacity(self.ids.len());
        for id in &self.ids {
            if !seen.insert(id.as_str()) {
                return Err(EmbeddingError::DuplicateId(id.clone()));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_rows(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Rows as `f64` vectors.
    pub fn rows_f64(&self) -> Vec<Vec<f64>> {
        self.rows().map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect()
    }

    /// Rows for the requested ids, in request order.
    pub fn slice_by_ids<S: AsRef<str>>(&self, ids: &[S]) -> Result<Self, EmbeddingError> {
        let index: HashMap<&str, usize> = self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        let mut out_ids = Vec::with_capacity(ids.len());
        for id in ids {
            let id = id.as_ref();
            let &i = index.get(id).ok_or_else(|| EmbeddingError::MissingId(id.to_string()))?;
            data.extend_from_slice(self.row(i));
            out_ids.push(id.to_string());
        }
        Self::new(self.dim, data, out_ids)
    }

    /// Rows at the given indices; ids are carried along.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self, EmbeddingError> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.n_rows() {
                return Err(EmbeddingError::RowOutOfRange {
                    row: i,
                    rows: self.n_rows(),
                });
            }
            data.extend_from_slice(self.row(i));
            ids.push(self.ids[i].clone());
        }
        Self::new(self.dim, data, ids)
    }

    /// Divides every row by its Euclidean norm (computed in `f64`).
    pub fn l2_normalize(&self) -> Result<Self, EmbeddingError> {
        let mut data = Vec::with_capacity(self.data.len());
        for (i, row) in self.rows().enumerate() {
            let norm = row_norm(row);
            if norm == 0.0 {
                return Err(EmbeddingError::ZeroNorm { row: i });
            }
            data.extend(row.iter().map(|&v| (f64::from(v) / norm) as f32));
        }
        Ok(Self {
            dim: self.dim,
            data,
            ids: self.ids.clone(),
        })
    }

    /// Little-endian header plus payload.
    pub fn to_bytes(&self) -> Result<Vec<u8>, EmbeddingError> {
        self.check_finite()?;
        let mut buf = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.n_rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        Ok(buf)
    }

    /// Decodes the payload file; ids are supplied separately.
    pub fn from_bytes(bytes: &[u8], ids: Vec<String>) -> Result<Self, EmbeddingError> {
        let (rows, dim) = decode_header(bytes)?;
        let payload = &bytes[HEADER_LEN..];
        let expected = rows * dim;
        let found = payload.len() / 4;
        if found < expected {
            return Err(EmbeddingError::Truncated {
                rows,
                dim,
                expected,
                found,
                complete_rows: found / dim,
            });
        }
        if payload.len() != expected * 4 {
            return Err(EmbeddingError::TrailingBytes {
                rows,
                dim,
                extra: payload.len() - expected * 4,
            });
        }
        if ids.len() != rows {
            return Err(EmbeddingError::IdsLength { ids: ids.len(), rows });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(dim, data, ids)
    }
}

pub(crate) fn row_norm(row: &[f32]) -> f64 {
    row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
}

fn decode_header(bytes: &[u8]) -> Result<(usize, usize), EmbeddingError> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(EmbeddingError::BadMagic);
        }
        return Err(EmbeddingError::ShortHeader);
    }
    if &bytes[..4] != MAGIC {
        return Err(EmbeddingError::BadMagic);
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(EmbeddingError::ZeroDim);
    }
    Ok((rows, dim))
}

/// `<file>.ids.json` next to the embedding file.
pub fn ids_sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".ids.json");
    PathBuf::from(s)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EmbeddingError + '_ {
    move |source| EmbeddingError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix, EmbeddingError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let sidecar = ids_sidecar_path(path);
    let ids_text = std::fs::read_to_string(&sidecar).map_err(io_err(&sidecar))?;
    let ids: Vec<String> = serde_json::from_str(&ids_text).map_err(|e| EmbeddingError::IdsFormat(e.to_string()))?;
    EmbeddingMatrix::from_bytes(&bytes, ids)
}

pub fn write_embeddings(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<(), EmbeddingError> {
    let path = path.as_ref();
    let bytes = matrix.to_bytes()?;
    std::fs::write(path, bytes).map_err(io_err(path))?;
    let sidecar = ids_sidecar_path(path);
    let mut f = std::fs::File::create(&sidecar).map_err(io_err(&sidecar))?;
    let ids = serde_json::to_string(&matrix.ids).expect("string array serializes");
    f.write_all(ids.as_bytes()).map_err(io_err(&sidecar))?;
    Ok(())
}
