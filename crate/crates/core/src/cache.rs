//! Key/value cache contents with per-token modality and original position.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::modality::{Modality, TaggedSequence};

/// Bytes per cached scalar (keys and values are accounted as binary32).
pub const BYTES_PER_SCALAR: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    keys: Matrix,
    values: Matrix,
    tags: TaggedSequence,
    /// Absolute sequence position of every cached token.
    positions: Vec<usize>,
    head_dim: usize,
}

impl KvCache {
    pub fn empty(head_dim: usize) -> Result<Self> {
        if head_dim == 0 {
            return Err(Error::ZeroHeadDim);
        }
        Ok(Self {
            keys: Matrix::zeros(0, head_dim),
            values: Matrix::zeros(0, head_dim),
            tags: TaggedSequence::default(),
            positions: Vec::new(),
            head_dim,
        })
    }

    /// Builds a cache whose positions are `0..L`.
    pub fn new(keys: Matrix, values: Matrix, tags: TaggedSequence) -> Result<Self> {
        let positions = (0..keys.rows()).collect();
        Self::with_positions(keys, values, tags, positions)
    }

    pub fn with_positions(
        keys: Matrix,
        values: Matrix,
        tags: TaggedSequence,
        positions: Vec<usize>,
    ) -> Result<Self> {
        let len = keys.rows();
        let head_dim = keys.cols();
        if head_dim == 0 {
            return Err(Error::ZeroHeadDim);
        }
        for (what, found) in [
            ("value rows", values.rows()),
            ("tag count", tags.len()),
            ("position count", positions.len()),
        ] {
            if found != len {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: len,
                    found,
                });
            }
        }
        if values.cols() != head_dim {
            return Err(Error::DimensionMismatch {
                what: "value width",
                expected: head_dim,
                found: values.cols(),
            });
        }
        Ok(Self {
            keys,
            values,
            tags,
            positions,
            head_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn keys(&self) -> &Matrix {
        &self.keys
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn tags(&self) -> &TaggedSequence {
        &self.tags
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn append(&mut self, key: &[f64], value: &[f64], tag: Modality, position: usize) -> Result<()> {
        if key.len() != self.head_dim || value.len() != self.head_dim {
            return Err(Error::DimensionMismatch {
                what: "appended key/value width",
                expected: self.head_dim,
                found: if key.len() != self.head_dim { key.len() } else { value.len() },
            });
        }
        self.keys.push_row(key)?;
        self.values.push_row(value)?;
        self.tags.push(tag);
        self.positions.push(position);
        Ok(())
    }

    /// New cache holding only the given row indices, in the order given.
    pub fn gather(&self, rows: &[usize]) -> KvCache {
        KvCache {
            keys: self.keys.select_rows(rows),
            values: self.values.select_rows(rows),
            tags: self.tags.select(rows),
            positions: rows.iter().map(|&r| self.positions[r]).collect(),
            head_dim: self.head_dim,
        }
    }

    /// Keys plus values, accounted at [`BYTES_PER_SCALAR`].
    pub fn bytes(&self) -> usize {
        self.len() * 2 * self.head_dim * BYTES_PER_SCALAR
    }
}
