//! Byte-level utilities for BEAM files: chunk listing, equal-length diff,
//! patch application and the single-byte x-register operand encoding.

use std::fmt;

use thiserror::Error;

use crate::sterm::{parse_term, Term};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PatchError {
    #[error("length mismatch: {0} vs {1} bytes")]
    LengthMismatch(usize, usize),
    #[error("offset {offset} out of range for {len} bytes")]
    OutOfRange { offset: usize, len: usize },
    #[error("byte at {offset} is {found}, patch expects {expected}")]
    StaleByte { offset: usize, expected: u8, found: u8 },
    #[error("offsets not strictly increasing at {0}")]
    Unordered(usize),
    #[error("malformed patch: {0}")]
    Malformed(String),
    #[error("x{0} has no single-byte encoding")]
    NoSingleByte(u32),
}

impl PatchError {
    pub fn to_term(&self) -> Term {
        let n = |v: usize| Term::int(v);
        match self {
            PatchError::LengthMismatch(a, b) => Term::tuple(vec![Term::atom("length_mismatch"), n(*a), n(*b)]),
            PatchError::OutOfRange { offset, len } => Term::tuple(vec![Term::atom("out_of_range"), n(*offset), n(*len)]),
            PatchError::StaleByte { offset, expected, found } => Term::tuple(vec![
                Term::atom("stale_byte"),
                n(*offset),
                Term::int(*expected),
                Term::int(*found),
            ]),
            PatchError::Unordered(o) => Term::tuple(vec![Term::atom("unordered"), n(*o)]),
            PatchError::Malformed(m) => Term::tuple(vec![Term::atom("malformed"), Term::string(m)]),
            PatchError::NoSingleByte(x) => Term::tuple(vec![Term::atom("no_single_byte"), Term::int(*x)]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchEntry {
    pub offset: usize,
    pub old: u8,
    pub new: u8,
}

/// Byte differences ordered by strictly increasing offset.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PatchSet {
    entries: Vec<PatchEntry>,
}

impl PatchSet {
    pub fn new(entries: Vec<PatchEntry>) -> Result<Self, PatchError> {
        for w in entries.windows(2) {
            if w[1].offset <= w[0].offset {
                return Err(PatchError::Unordered(w[1].offset));
            }
        }
        Ok(PatchSet { entries })
    }

    pub fn entries(&self) -> &[PatchEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The patch that undoes this one.
    pub fn reversed(&self) -> PatchSet {
        PatchSet {
            entries: self
                .entries
                .iter()
                .map(|e| PatchEntry {
                    offset: e.offset,
                    old: e.new,
                    new: e.old,
                })
                .collect(),
        }
    }

    /// Maximal runs of adjacent differing offsets as `(offset, length)`.
    pub fn runs(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for e in &self.entries {
            match out.last_mut() {
                Some((start, len)) if *start + *len == e.offset => *len += 1,
                _ => out.push((e.offset, 1)),
            }
        }
        out
    }

    pub fn to_term(&self) -> Term {
        Term::List(
            self.entries
                .iter()
                .map(|e| Term::tuple(vec![Term::int(e.offset), Term::int(e.old), Term::int(e.new)]))
                .collect(),
        )
    }

    pub fn from_term(t: &Term) -> Result<PatchSet, PatchError> {
        let items = t.as_list().ok_or_else(|| PatchError::Malformed("expected a list".into()))?;
        let mut entries = Vec::with_capacity(items.len());
        for item in items {
            let bad = || PatchError::Malformed(format!("bad entry {item}"));
            let [o, a, b] = item.as_tuple().ok_or_else(bad)? else {
                return Err(bad());
            };
            let byte = |t: &Term| t.as_i64().and_then(|v| u8::try_from(v).ok()).ok_or_else(bad);
            let offset = o.as_i64().and_then(|v| usize::try_from(v).ok()).ok_or_else(bad)?;
            entries.push(PatchEntry {
                offset,
                old: byte(a)?,
                new: byte(b)?,
            });
        }
        PatchSet::new(entries)
    }

    /// Reads the `[{Offset,Old,New},...].` file format.
    pub fn parse(text: &str) -> Result<PatchSet, PatchError> {
        let t = parse_term(text).map_err(|e| PatchError::Malformed(e.to_string()))?;
        PatchSet::from_term(&t)
    }
}

impl fmt::Display for PatchSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_term())
    }
}

/// Differences between two equal-length buffers.
pub fn diff(a: &[u8], b: &[u8]) -> Result<PatchSet, PatchError> {
    if a.len() != b.len() {
        return Err(PatchError::LengthMismatch(a.len(), b.len()));
    }
    let entries = a
        .iter()
        .zip(b)
        .enumerate()
        .filter(|(_, (x, y))| x != y)
        .map(|(offset, (&old, &new))| PatchEntry { offset, old, new })
        .collect();
    Ok(PatchSet { entries })
}

/// Applies `p` to a copy of `a`. Every entry is checked before any byte is
/// written, so an error leaves nothing half-applied.
pub fn apply_patch(a: &[u8], p: &PatchSet, verify: bool) -> Result<Vec<u8>, PatchError> {
    for e in &p.entries {
        let found = *a.get(e.offset).ok_or(PatchError::OutOfRange {
            offset: e.offset,
            len: a.len(),
        })?;
        if verify && found != e.old {
            return Err(PatchError::StaleByte {
                offset: e.offset,
                expected: e.old,
                found,
            });
        }
    }
    let mut out = a.to_vec();
    for e in &p.entries {
        out[e.offset] = e.new;
    }
    Ok(out)
}

/// A byte of the compact operand encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegisterByte {
    X(u32),
    Other(u8),
}

impl fmt::Display for RegisterByte {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegisterByte::X(n) => write!(f, "x{n}"),
            RegisterByte::Other(b) => write!(f, "{b:#04x}"),
        }
    }
}

const X_TAG: u8 = 0b0011;

/// Decodes a single-byte x-register operand: tag 3 in the low nibble, index
/// in the high nibble.
pub fn rewrite_register_byte(b: u8) -> RegisterByte {
    if b & 0x0f == X_TAG {
        RegisterByte::X(u32::from(b >> 4))
    } else {
        RegisterByte::Other(b)
    }
}

pub fn encode_register_byte(x: u32) -> Result<u8, PatchError> {
    if x > 15 {
        return Err(PatchError::NoSingleByte(x));
    }
    Ok((x as u8) << 4 | X_TAG)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChunkError {
    #[error("not a BEAM container")]
    BadMagic,
    #[error("declared size {declared} does not match {actual} bytes after the header")]
    SizeMismatch { declared: usize, actual: usize },
    #[error("chunk {id} truncated at offset {offset}")]
    Truncated { id: String, offset: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub id: String,
    /// Offset of the chunk data (after the 8-byte chunk header).
    pub offset: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkIndex {
    pub chunks: Vec<Chunk>,
    pub declared_size: usize,
}

impl ChunkIndex {
    pub fn get(&self, id: &str) -> Option<&Chunk> {
        self.chunks.iter().find(|c| c.id == id)
    }

    pub fn to_term(&self) -> Term {
        Term::tuple(vec![
            Term::atom("chunks"),
            Term::int(self.declared_size),
            Term::List(
                self.chunks
                    .iter()
                    .map(|c| Term::tuple(vec![Term::string(&c.id), Term::int(c.offset), Term::int(c.length)]))
                    .collect(),
            ),
        ])
    }
}

fn be32(b: &[u8]) -> usize {
    u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize
}

/// Lists the chunks of a `FOR1 .... BEAM` container.
pub fn list_chunks(file: &[u8]) -> Result<ChunkIndex, ChunkError> {
    if file.len() < 12 || &file[..4] != b"FOR1" || &file[8..12] != b"BEAM" {
        return Err(ChunkError::BadMagic);
    }
    let declared = be32(&file[4..8]);
    if declared != file.len() - 8 {
        return Err(ChunkError::SizeMismatch {
            declared,
            actual: file.len() - 8,
        });
    }
    let mut chunks = Vec::new();
    let mut at = 12;
    while at < file.len() {
        let id_end = (at + 4).min(file.len());
        let id = String::from_utf8_lossy(&file[at..id_end]).into_owned();
        let truncated = || ChunkError::Truncated { id: id.clone(), offset: at };
        if file.len() < at + 8 {
            return Err(truncated());
        }
        let length = be32(&file[at + 4..at + 8]);
        let data = at + 8;
        if data + length > file.len() {
            return Err(truncated());
        }
        chunks.push(Chunk {
            id: id.clone(),
            offset: data,
            length,
        });
        at = data + length.div_ceil(4) * 4;
    }
    Ok(ChunkIndex {
        chunks,
        declared_size: declared,
    })
}

/// Serializes chunks into a container, padding each to four bytes.
pub fn build_container(chunks: &[(&[u8; 4], &[u8])]) -> Vec<u8> {
    let mut body = b"BEAM".to_vec();
    for (id, data) in chunks {
        body.extend_from_slice(*id);
        body.extend_from_slice(&(data.len() as u32).to_be_bytes());
        body.extend_from_slice(data);
        body.resize(body.len().div_ceil(4) * 4, 0);
    }
    let mut out = b"FOR1".to_vec();
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend(body);
    out
}
