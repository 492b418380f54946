//! Attention traces and their binary file format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CSPT" | u16 version | u16 layers | u16 heads | u32 steps | u16 d | u32 L0
//! L0 tag bytes (0 = text, 1 = visual)
//! per step:
//!   u32 new-token count, that many tag bytes
//!   layers x heads blocks, each: u32 rows | u32 cols | rows*cols binary32, row-major
//! ```
//!
//! Block rows are the most recent query positions; columns are every key present after the
//! step's new tokens were appended, so `cols` is fully determined by the header and the
//! preceding new-token counts.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::matrix::Matrix;
use crate::modality::{Modality, TaggedSequence};
use crate::scoring::Logits;

pub const MAGIC: [u8; 4] = *b"CSPT";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("bad magic {0:?}, expected \"CSPT\"")]
    BadMagic([u8; 4]),
    #[error("unsupported trace version {0}")]
    UnsupportedVersion(u16),
    #[error("trace truncated in the header")]
    TruncatedHeader,
    #[error("trace truncated in step {step}")]
    Truncated { step: usize },
    #[error("step {step}: {what} is {found}, expected {expected}")]
    SizeMismatch {
        step: usize,
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{0} trailing bytes after the last step")]
    TrailingBytes(usize),
    #[error("invalid modality byte {byte} (step {step:?})")]
    InvalidTag { step: Option<usize>, byte: u8 },
    #[error("field {what} = {value} does not fit the on-disk width")]
    Overflow { what: &'static str, value: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub new_tags: TaggedSequence,
    /// `[layer][head]`, rows = most recent queries, cols = all current keys.
    pub logits: Vec<Vec<Logits>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub prefill: TaggedSequence,
    pub steps: Vec<TraceStep>,
}

impl AttentionTrace {
    /// Key count present during step `s`.
    pub fn keys_at(&self, s: usize) -> usize {
        self.prefill.len() + self.steps[..=s].iter().map(|st| st.new_tags.len()).sum::<usize>()
    }

    /// Full sequence tags after step `s`.
    pub fn tags_at(&self, s: usize) -> TaggedSequence {
        let mut tags = self.prefill.clone();
        for st in &self.steps[..=s] {
            tags.extend_from(st.new_tags.as_slice());
        }
        tags
    }

    pub fn final_len(&self) -> usize {
        self.prefill.len() + self.steps.iter().map(|st| st.new_tags.len()).sum::<usize>()
    }

    /// Checks every block against the header-derived shape.
    pub fn validate(&self) -> Result<(), TraceError> {
        let mut keys = self.prefill.len();
        for (s, st) in self.steps.iter().enumerate() {
            keys += st.new_tags.len();
            if st.logits.len() != self.layers {
                return Err(TraceError::SizeMismatch {
                    step: s,
                    what: "layer count",
                    expected: self.layers,
                    found: st.logits.len(),
                });
            }
            for layer in &st.logits {
                if layer.len() != self.heads {
                    return Err(TraceError::SizeMismatch {
                        step: s,
                        what: "head count",
                        expected: self.heads,
                        found: layer.len(),
                    });
                }
                for block in layer {
                    if block.cols() != keys {
                        return Err(TraceError::SizeMismatch {
                            step: s,
                            what: "block columns",
                            expected: keys,
                            found: block.cols(),
                        });
                    }
                    if block.rows() > keys {
                        return Err(TraceError::SizeMismatch {
                            step: s,
                            what: "block rows",
                            expected: keys,
                            found: block.rows(),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

fn narrow<T: TryFrom<usize>>(what: &'static str, value: usize) -> Result<T, TraceError> {
    T::try_from(value).map_err(|_| TraceError::Overflow { what, value })
}

pub fn write_trace<W: Write>(trace: &AttentionTrace, w: W) -> Result<(), TraceError> {
    trace.validate()?;
    let mut w = BufWriter::new(w);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&narrow::<u16>("layers", trace.layers)?.to_le_bytes())?;
    w.write_all(&narrow::<u16>("heads", trace.heads)?.to_le_bytes())?;
    w.write_all(&narrow::<u32>("steps", trace.steps.len())?.to_le_bytes())?;
    w.write_all(&narrow::<u16>("d", trace.head_dim)?.to_le_bytes())?;
    w.write_all(&narrow::<u32>("L0", trace.prefill.len())?.to_le_bytes())?;
    let tag_bytes = |tags: &TaggedSequence| tags.as_slice().iter().map(|t| t.to_byte()).collect::<Vec<u8>>();
    w.write_all(&tag_bytes(&trace.prefill))?;
    for st in &trace.steps {
        w.write_all(&narrow::<u32>("new tokens", st.new_tags.len())?.to_le_bytes())?;
        w.write_all(&tag_bytes(&st.new_tags))?;
        for block in st.logits.iter().flatten() {
            w.write_all(&narrow::<u32>("rows", block.rows())?.to_le_bytes())?;
            w.write_all(&narrow::<u32>("cols", block.cols())?.to_le_bytes())?;
            for &v in block.matrix().data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    step: Option<usize>,
}

impl<R: Read> Cursor<R> {
    fn fill(&mut self, buf: &mut [u8]) -> Result<(), TraceError> {
        self.inner.read_exact(buf).map_err(|e| match (e.kind(), self.step) {
            (io::ErrorKind::UnexpectedEof, Some(step)) => TraceError::Truncated { step },
            (io::ErrorKind::UnexpectedEof, None) => TraceError::TruncatedHeader,
            _ => TraceError::Io(e),
        })
    }

    fn u16(&mut self) -> Result<u16, TraceError> {
        let mut b = [0; 2];
        self.fill(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self) -> Result<u32, TraceError> {
        let mut b = [0; 4];
        self.fill(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn tags(&mut self, n: usize) -> Result<TaggedSequence, TraceError> {
        let mut b = vec![0; n];
        self.fill(&mut b)?;
        b.into_iter()
            .map(|byte| Modality::from_byte(byte).ok_or(TraceError::InvalidTag { step: self.step, byte }))
            .collect()
    }
}

pub fn read_trace<R: Read>(r: R) -> Result<AttentionTrace, TraceError> {
    let mut c = Cursor {
        inner: BufReader::new(r),
        step: None,
    };
    let mut magic = [0; 4];
    c.fill(&mut magic)?;
    if magic != MAGIC {
        return Err(TraceError::BadMagic(magic));
    }
    let version = c.u16()?;
    if version != VERSION {
        return Err(TraceError::UnsupportedVersion(version));
    }
    let layers = c.u16()? as usize;
    let heads = c.u16()? as usize;
    let n_steps = c.u32()? as usize;
    let head_dim = c.u16()? as usize;
    let l0 = c.u32()? as usize;
    let prefill = c.tags(l0)?;

    let mut keys = l0;
    // capacity is capped so a corrupt header cannot force a huge allocation
    let mut steps = Vec::with_capacity(n_steps.min(1 << 16));
    for s in 0..n_steps {
        c.step = Some(s);
        let n_new = c.u32()? as usize;
        let new_tags = c.tags(n_new)?;
        keys += n_new;
        let mut per_layer = Vec::with_capacity(layers);
        for _ in 0..layers {
            let mut per_head = Vec::with_capacity(heads);
            for _ in 0..heads {
                let rows = c.u32()? as usize;
                let cols = c.u32()? as usize;
                if cols != keys {
                    return Err(TraceError::SizeMismatch {
                        step: s,
                        what: "block columns",
                        expected: keys,
                        found: cols,
                    });
                }
                if rows > keys {
                    return Err(TraceError::SizeMismatch {
                        step: s,
                        what: "block rows",
                        expected: keys,
                        found: rows,
                    });
                }
                let mut raw = vec![0u8; rows * cols * 4];
                c.fill(&mut raw)?;
                let data: Vec<f64> = raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                    .collect();
                let m = Matrix::from_vec(rows, cols, data).expect("size checked above");
                let logits = Logits::new(m).map_err(|_| TraceError::SizeMismatch {
                    step: s,
                    what: "non-finite logits",
                    expected: 0,
                    found: 1,
                })?;
                per_head.push(logits);
            }
            per_layer.push(per_head);
        }
        steps.push(TraceStep {
            new_tags,
            logits: per_layer,
        });
    }
    let mut rest = Vec::new();
    c.inner.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(TraceError::TrailingBytes(rest.len()));
    }
    Ok(AttentionTrace {
        layers,
        heads,
        head_dim,
        prefill,
        steps,
    })
}

pub fn save_trace(trace: &AttentionTrace, path: impl AsRef<Path>) -> Result<(), TraceError> {
    write_trace(trace, File::create(path)?)
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<AttentionTrace, TraceError> {
    read_trace(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> AttentionTrace {
        let block = |rows: usize, cols: usize, base: f32| {
            let data = (0..rows * cols).map(|i| (base + i as f32 * 0.25) as f64).collect();
            Logits::new(Matrix::from_vec(rows, cols, data).unwrap()).unwrap()
        };
        AttentionTrace {
            layers: 2,
            heads: 1,
            head_dim: 4,
            prefill: TaggedSequence::parse("VVT").unwrap(),
            steps: vec![
                TraceStep {
                    new_tags: TaggedSequence::default(),
                    logits: vec![vec![block(2, 3, 0.0)], vec![block(2, 3, 1.0)]],
                },
                TraceStep {
                    new_tags: TaggedSequence::parse("T").unwrap(),
                    logits: vec![vec![block(1, 4, -1.0)], vec![block(1, 4, 2.0)]],
                },
            ],
        }
    }

    fn bytes(t: &AttentionTrace) -> Vec<u8> {
        let mut out = Vec::new();
        write_trace(t, &mut out).unwrap();
        out
    }

    #[test]
    fn header_layout_is_exact() {
        let b = bytes(&tiny());
        assert_eq!(&b[0..4], b"CSPT");
        assert_eq!(u16::from_le_bytes([b[4], b[5]]), 1);
        assert_eq!(u16::from_le_bytes([b[6], b[7]]), 2);
        assert_eq!(u16::from_le_bytes([b[8], b[9]]), 1);
        assert_eq!(u32::from_le_bytes([b[10], b[11], b[12], b[13]]), 2);
        assert_eq!(u16::from_le_bytes([b[14], b[15]]), 4);
        assert_eq!(u32::from_le_bytes([b[16], b[17], b[18], b[19]]), 3);
        assert_eq!(&b[20..23], &[1, 1, 0]);
        // step 0: zero new tokens, then block rows/cols
        assert_eq!(&b[23..27], &0u32.to_le_bytes());
        assert_eq!(&b[27..31], &2u32.to_le_bytes());
        assert_eq!(&b[31..35], &3u32.to_le_bytes());
        assert_eq!(&b[35..39], &0.0f32.to_le_bytes());
        assert_eq!(&b[39..43], &0.25f32.to_le_bytes());
        let expected_len = 23 + (4 + 2 * (8 + 6 * 4)) + (4 + 1 + 2 * (8 + 4 * 4));
        assert_eq!(b.len(), expected_len);
    }

    #[test]
    fn round_trip() {
        let t = tiny();
        assert_eq!(read_trace(bytes(&t).as_slice()).unwrap(), t);
    }

    #[test]
    fn bad_magic() {
        let mut b = bytes(&tiny());
        b[0] = b'X';
        assert!(matches!(read_trace(b.as_slice()), Err(TraceError::BadMagic(_))));
    }

    #[test]
    fn unsupported_version() {
        let mut b = bytes(&tiny());
        b[4] = 9;
        assert!(matches!(read_trace(b.as_slice()), Err(TraceError::UnsupportedVersion(9))));
    }

    #[test]
    fn truncation_names_the_step() {
        let b = bytes(&tiny());
        let cut = &b[..b.len() - 3];
        assert!(matches!(read_trace(cut), Err(TraceError::Truncated { step: 1 })));
        assert!(matches!(read_trace(&b[..40]), Err(TraceError::Truncated { step: 0 })));
        assert!(matches!(read_trace(&b[..10]), Err(TraceError::TruncatedHeader)));
    }

    #[test]
    fn size_mismatch_and_trailing_bytes() {
        let mut b = bytes(&tiny());
        // step 0 block 0 cols: claim 5 keys instead of 3
        b[31..35].copy_from_slice(&5u32.to_le_bytes());
        assert!(matches!(
            read_trace(b.as_slice()),
            Err(TraceError::SizeMismatch { step: 0, expected: 3, found: 5, .. })
        ));
        let mut b = bytes(&tiny());
        b.push(0);
        assert!(matches!(read_trace(b.as_slice()), Err(TraceError::TrailingBytes(1))));
    }

    #[test]
    fn invalid_tag_byte() {
        let mut b = bytes(&tiny());
        b[21] = 7;
        assert!(matches!(read_trace(b.as_slice()), Err(TraceError::InvalidTag { byte: 7, .. })));
    }

    #[test]
    fn writer_rejects_inconsistent_trace() {
        let mut t = tiny();
        t.steps[1].new_tags = TaggedSequence::default();
        let mut out = Vec::new();
        assert!(matches!(write_trace(&t, &mut out), Err(TraceError::SizeMismatch { step: 1, .. })));
    }

    #[test]
    fn key_bookkeeping() {
        let t = tiny();
        assert_eq!(t.keys_at(0), 3);
        assert_eq!(t.keys_at(1), 4);
        assert_eq!(t.tags_at(1).to_string(), "VVTT");
        assert_eq!(t.final_len(), 4);
    }
}
