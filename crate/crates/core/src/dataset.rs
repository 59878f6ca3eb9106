//! Segment dataset file.
//!
//! ```text
//! "PRLL" | u32 version | u32 N | u32 dims[3]
//! N × ( bit-packed roll | 32×36 chord bytes | u8 split )
//! ```
//! Integers are little-endian. Roll bits are packed MSB first in
//! (channel, pitch, frame) order.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::chords::{ChordSequence, CHORD_DIM, SEQ_BEATS};
use crate::pianoroll::{Pianoroll, RollGeometry};

pub const DATASET_MAGIC: &[u8; 4] = b"PRLL";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub roll: Pianoroll,
    pub chords: ChordSequence,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SegmentDataset {
    pub records: Vec<Record>,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("bad magic, not a dataset file")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    VersionMismatch(u32),
    #[error("dataset truncated: header promises {expected} bytes, file has {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error("unsupported roll dims {0:?}")]
    BadDims([u32; 3]),
    #[error("corrupt record {index}: {detail}")]
    Corrupt { index: usize, detail: String },
    #[error("records must use the full 2×128×128 geometry")]
    WrongGeometry,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn record_len(geom: RollGeometry) -> usize {
    geom.numel().div_ceil(8) + SEQ_BEATS * CHORD_DIM + 1
}

fn pack_bits(bits: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b != 0 {
            out[i / 8] |= 0x80 >> (i % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<u8> {
    (0..n).map(|i| (bytes[i / 8] >> (7 - i % 8)) & 1).collect()
}

impl SegmentDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, DatasetError> {
        let geom = RollGeometry::FULL;
        if self.records.iter().any(|r| r.roll.geometry() != geom) {
            return Err(DatasetError::WrongGeometry);
        }
        let mut out = Vec::with_capacity(HEADER_LEN + self.records.len() * record_len(geom));
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for d in geom.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for r in &self.records {
            out.extend_from_slice(&pack_bits(r.roll.bits()));
            out.extend_from_slice(&r.chords.encode());
            out.push(r.split.tag());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DatasetError> {
        let short = |expected| DatasetError::TruncatedFile { expected, found: bytes.len() };
        if bytes.len() < 4 || &bytes[..4] != DATASET_MAGIC {
            return Err(DatasetError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(short(HEADER_LEN));
        }
        let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
        let version = u32_at(4);
        if version != DATASET_VERSION {
            return Err(DatasetError::VersionMismatch(version));
        }
        let n = u32_at(8) as usize;
        let dims = [u32_at(12), u32_at(16), u32_at(20)];
        let geom = RollGeometry::FULL;
        if dims.map(|d| d as usize) != geom.shape() {
            return Err(DatasetError::BadDims(dims));
        }
        let rec = record_len(geom);
        let expected = HEADER_LEN + n * rec;
        if bytes.len() != expected {
            return Err(short(expected));
        }
        let roll_bytes = geom.numel().div_ceil(8);
        let records = bytes[HEADER_LEN..]
            .chunks_exact(rec)
            .enumerate()
            .map(|(index, chunk)| {
                let corrupt = |detail: String| DatasetError::Corrupt { index, detail };
                let roll = Pianoroll::from_bits(geom, unpack_bits(&chunk[..roll_bytes], geom.numel()))
                    .map_err(|e| corrupt(e.to_string()))?;
                let chords =
                    ChordSequence::decode(&chunk[roll_bytes..rec - 1]).map_err(|e| corrupt(e.to_string()))?;
                let split = match chunk[rec - 1] {
                    0 => Split::Train,
                    1 => Split::Val,
                    t => return Err(corrupt(format!("split tag {t}"))),
                };
                Ok(Record { roll, chords, split })
            })
            .collect::<Result<_, _>>()?;
        Ok(SegmentDataset { records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Song-level split: a seeded shuffle, the first round(n/10) songs go to
/// validation.
pub fn split_songs(n_songs: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n_songs).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (n_songs as f64 / 10.0).round() as usize;
    let mut out = vec![Split::Train; n_songs];
    for &i in &order[..n_val] {
        out[i] = Split::Val;
    }
    out
}
