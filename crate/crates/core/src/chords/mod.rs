//! Beat-wise chord labels, the 36-D encoding, rule-based extraction and
//! chord agreement.

mod encoder;

pub use encoder::{ChordEncoder, LATENT_DIM};

use std::fmt::Write as _;

use thiserror::Error;

use crate::pianoroll::Pianoroll;

pub const CHORD_DIM: usize = 36;
pub const SEQ_BEATS: usize = 32;

#[derive(Debug, Error, PartialEq)]
pub enum ChordError {
    #[error("illegal chord vector: {0}")]
    IllegalVector(&'static str),
    #[error("expected {expected} beats, got {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("line {line}: {detail}")]
    BadChordFile { line: usize, detail: String },
}

/// Root and bass pitch classes plus a 12-bit chroma mask (bit i = pitch
/// class i). `Default` is the no-chord label.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ChordLabel {
    pub root: Option<u8>,
    pub bass: Option<u8>,
    pub chroma: u16,
}

impl ChordLabel {
    pub const NONE: ChordLabel = ChordLabel { root: None, bass: None, chroma: 0 };

    pub fn new(root: u8, bass: u8, pitch_classes: &[u8]) -> Self {
        let chroma = pitch_classes.iter().fold(0u16, |m, &p| m | 1 << (p % 12));
        ChordLabel { root: Some(root % 12), bass: Some(bass % 12), chroma }
    }

    pub fn is_none(&self) -> bool {
        self.root.is_none()
    }

    pub fn pitch_classes(&self) -> Vec<u8> {
        (0..12).filter(|&p| self.chroma >> p & 1 == 1).collect()
    }

    pub fn encode(&self) -> [u8; CHORD_DIM] {
        let mut v = [0u8; CHORD_DIM];
        if let Some(r) = self.root {
            v[usize::from(r)] = 1;
        }
        if let Some(b) = self.bass {
            v[12 + usize::from(b)] = 1;
        }
        for p in 0..12 {
            v[24 + p] = (self.chroma >> p & 1) as u8;
        }
        v
    }

    /// Inverse of [`ChordLabel::encode`] on legal vectors: at most one 1 per
    /// one-hot block, root, bass and chroma all present or all absent.
    pub fn decode(v: &[u8]) -> Result<Self, ChordError> {
        if v.len() != CHORD_DIM {
            return Err(ChordError::IllegalVector("length is not 36"));
        }
        if v.iter().any(|&b| b > 1) {
            return Err(ChordError::IllegalVector("entries must be 0 or 1"));
        }
        let one_hot = |block: &[u8]| -> Result<Option<u8>, ChordError> {
            let mut hot = block.iter().enumerate().filter(|(_, &b)| b == 1).map(|(i, _)| i as u8);
            let first = hot.next();
            if hot.next().is_some() {
                return Err(ChordError::IllegalVector("two ones in a one-hot block"));
            }
            Ok(first)
        };
        let root = one_hot(&v[..12])?;
        let bass = one_hot(&v[12..24])?;
        let chroma = v[24..].iter().enumerate().fold(0u16, |m, (i, &b)| m | u16::from(b) << i);
        if root.is_some() != bass.is_some() || root.is_some() != (chroma != 0) {
            return Err(ChordError::IllegalVector("root, bass and chroma must be all present or all absent"));
        }
        Ok(ChordLabel { root, bass, chroma })
    }
}

/// One label per beat of a segment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChordSequence {
    beats: Vec<ChordLabel>,
}

impl ChordSequence {
    pub fn new(beats: Vec<ChordLabel>) -> Result<Self, ChordError> {
        if beats.len() != SEQ_BEATS {
            return Err(ChordError::LengthMismatch { expected: SEQ_BEATS, found: beats.len() });
        }
        Ok(ChordSequence { beats })
    }

    pub fn silent() -> Self {
        ChordSequence { beats: vec![ChordLabel::NONE; SEQ_BEATS] }
    }

    pub fn constant(label: ChordLabel) -> Self {
        ChordSequence { beats: vec![label; SEQ_BEATS] }
    }

    pub fn beats(&self) -> &[ChordLabel] {
        &self.beats
    }

    /// 32×36 row-major 0/1 bytes.
    pub fn encode(&self) -> Vec<u8> {
        self.beats.iter().flat_map(|b| b.encode()).collect()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ChordError> {
        if bytes.len() != SEQ_BEATS * CHORD_DIM {
            return Err(ChordError::LengthMismatch { expected: SEQ_BEATS, found: bytes.len() / CHORD_DIM });
        }
        let beats = bytes.chunks(CHORD_DIM).map(ChordLabel::decode).collect::<Result<_, _>>()?;
        Ok(ChordSequence { beats })
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.encode().into_iter().map(f32::from).collect()
    }

    /// One line per beat: `beat_index root bass chroma_hex`, with `N` for a
    /// missing root or bass and chroma as a 3-digit hex mask.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let pc = |p: Option<u8>| p.map_or_else(|| "N".to_string(), |v| v.to_string());
        for (i, b) in self.beats.iter().enumerate() {
            let _ = writeln!(s, "{i} {} {} {:03x}", pc(b.root), pc(b.bass), b.chroma);
        }
        s
    }

    /// Parses [`ChordSequence::to_text`] output. Blank lines and lines
    /// starting with `#` are skipped; every beat 0..32 must appear once.
    pub fn from_text(text: &str) -> Result<Self, ChordError> {
        let mut beats: Vec<Option<ChordLabel>> = vec![None; SEQ_BEATS];
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |detail: String| ChordError::BadChordFile { line: ln + 1, detail };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(bad(format!("expected 4 fields, found {}", fields.len())));
            }
            let beat: usize = fields[0].parse().map_err(|_| bad(format!("bad beat index {:?}", fields[0])))?;
            if beat >= SEQ_BEATS {
                return Err(bad(format!("beat index {beat} out of range")));
            }
            let pc = |f: &str| -> Result<Option<u8>, ChordError> {
                if f == "N" {
                    return Ok(None);
                }
                match f.parse::<u8>() {
                    Ok(v) if v < 12 => Ok(Some(v)),
                    _ => Err(bad(format!("bad pitch class {f:?}"))),
                }
            };
            let (root, bass) = (pc(fields[1])?, pc(fields[2])?);
            let chroma = u16::from_str_radix(fields[3], 16).map_err(|_| bad(format!("bad chroma {:?}", fields[3])))?;
            if chroma >= 1 << 12 {
                return Err(bad(format!("chroma {:?} exceeds 12 bits", fields[3])));
            }
            let label = ChordLabel { root, bass, chroma };
            ChordLabel::decode(&label.encode()).map_err(|e| bad(e.to_string()))?;
            if beats[beat].replace(label).is_some() {
                return Err(bad(format!("beat {beat} given twice")));
            }
        }
        let missing = beats.iter().position(Option::is_none);
        if let Some(b) = missing {
            return Err(ChordError::BadChordFile { line: 0, detail: format!("beat {b} missing") });
        }
        Ok(ChordSequence { beats: beats.into_iter().map(Option::unwrap).collect() })
    }
}

/// Interval templates in tie-break order.
pub const TEMPLATES: [(&str, &[u8]); 8] = [
    ("maj", &[0, 4, 7]),
    ("min", &[0, 3, 7]),
    ("dim", &[0, 3, 6]),
    ("aug", &[0, 4, 8]),
    ("sus4", &[0, 5, 7]),
    ("dom7", &[0, 4, 7, 10]),
    ("maj7", &[0, 4, 7, 11]),
    ("min7", &[0, 3, 7, 10]),
];

pub fn template_mask(intervals: &[u8], root: u8) -> u16 {
    intervals.iter().fold(0u16, |m, &i| m | 1 << ((root + i) % 12))
}

/// Root with the best template score `|T ∩ chroma| − 0.5·|chroma \ T|`;
/// ties go to the earlier template, then the lower root.
pub fn best_root(chroma: u16) -> Option<u8> {
    if chroma == 0 {
        return None;
    }
    let mut best: Option<(f64, u8)> = None;
    for (_, intervals) in TEMPLATES {
        for root in 0..12u8 {
            let t = template_mask(intervals, root);
            let score = f64::from((t & chroma).count_ones()) - 0.5 * f64::from((chroma & !t).count_ones());
            if best.is_none_or(|(s, _)| score > s) {
                best = Some((score, root));
            }
        }
    }
    best.map(|(_, r)| r)
}

/// Labels each beat of a roll. A pitch sounds in a frame when its onset or
/// sustain bit is set; the chroma keeps pitch classes sounding in at least
/// half of the beat's frames, and the bass is the lowest sounding pitch.
pub fn extract_chords(pr: &Pianoroll) -> ChordSequence {
    let g = pr.geometry();
    let fpb = g.frames_per_beat;
    let need = fpb.div_ceil(2);
    let beats = (0..g.beats.min(SEQ_BEATS))
        .map(|b| {
            let mut counts = [0usize; 12];
            let mut lowest: Option<usize> = None;
            for row in 0..g.pitches {
                let frames = (b * fpb..(b + 1) * fpb).filter(|&f| pr.onset(row, f) || pr.sustain(row, f)).count();
                if frames == 0 {
                    continue;
                }
                let pitch = usize::from(g.pitch_lo) + row;
                lowest.get_or_insert(pitch);
                counts[pitch % 12] = counts[pitch % 12].max(frames);
            }
            let chroma = (0..12).filter(|&p| counts[p] >= need).fold(0u16, |m, p| m | 1 << p);
            match best_root(chroma) {
                Some(root) => ChordLabel { root: Some(root), bass: lowest.map(|p| (p % 12) as u8), chroma },
                None => ChordLabel::NONE,
            }
        })
        .collect::<Vec<_>>();
    let mut beats = beats;
    beats.resize(SEQ_BEATS, ChordLabel::NONE);
    ChordSequence { beats }
}

/// Micro-averaged F1 over all 32×36 binary positions; 1 when both are
/// entirely silent.
pub fn chord_f1(generated: &ChordSequence, target: &ChordSequence) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (g, t) in generated.beats.iter().zip(&target.beats) {
        for (a, b) in g.encode().into_iter().zip(t.encode()) {
            match (a, b) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fn_ += 1,
                _ => {}
            }
        }
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        1.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

/// [`chord_f1`] for raw 36-D beat vectors, checking lengths.
pub fn chord_f1_checked(generated: &[ChordLabel], target: &[ChordLabel]) -> Result<f64, ChordError> {
    if generated.len() != SEQ_BEATS || target.len() != SEQ_BEATS {
        return Err(ChordError::LengthMismatch { expected: SEQ_BEATS, found: generated.len().min(target.len()) });
    }
    Ok(chord_f1(&ChordSequence { beats: generated.to_vec() }, &ChordSequence { beats: target.to_vec() }))
}
