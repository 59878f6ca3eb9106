//! Binary onset/sustain pianorolls, song segmentation and PNG rendering.

use std::path::Path;

use thiserror::Error;

use crate::midi::NoteEvent;

pub const BEATS_PER_BAR: usize = 4;
/// Velocity assigned to decoded notes.
pub const DECODE_VELOCITY: u8 = 100;

/// Pitch window and time grid of a roll.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RollGeometry {
    pub pitch_lo: u8,
    pub pitches: usize,
    pub frames_per_beat: usize,
    pub beats: usize,
}

impl RollGeometry {
    /// 128 pitches × 128 quarter-beat frames (8 bars).
    pub const FULL: RollGeometry = RollGeometry { pitch_lo: 0, pitches: 128, frames_per_beat: 4, beats: 32 };
    /// 32 semitones from C3 × 32 one-beat frames.
    pub const DESK: RollGeometry = RollGeometry { pitch_lo: 48, pitches: 32, frames_per_beat: 1, beats: 32 };

    pub fn frames(&self) -> usize {
        self.beats * self.frames_per_beat
    }

    /// Entries per channel.
    pub fn plane(&self) -> usize {
        self.pitches * self.frames()
    }

    pub fn numel(&self) -> usize {
        2 * self.plane()
    }

    pub fn shape(&self) -> [usize; 3] {
        [2, self.pitches, self.frames()]
    }

    pub fn contains_pitch(&self, pitch: u8) -> bool {
        pitch >= self.pitch_lo && usize::from(pitch - self.pitch_lo) < self.pitches
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum RollError {
    #[error("pitch {0} outside the roll's pitch range")]
    PitchOutOfRange(u8),
    #[error("onset {0} outside the window")]
    OnsetOutOfWindow(f64),
    #[error("non-positive duration {0}")]
    NonPositiveDuration(f64),
    #[error("expected {expected} values, got {found}")]
    ShapeMismatch { expected: usize, found: usize },
}

/// Binary roll laid out as (channel, pitch, frame); channel 0 is onset,
/// channel 1 is sustain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pianoroll {
    geom: RollGeometry,
    data: Vec<u8>,
}

impl Pianoroll {
    pub fn empty(geom: RollGeometry) -> Self {
        Pianoroll { geom, data: vec![0; geom.numel()] }
    }

    /// Builds a roll from 0/1 bytes; any non-zero byte counts as 1.
    pub fn from_bits(geom: RollGeometry, bits: Vec<u8>) -> Result<Self, RollError> {
        if bits.len() != geom.numel() {
            return Err(RollError::ShapeMismatch { expected: geom.numel(), found: bits.len() });
        }
        Ok(Pianoroll { geom, data: bits.into_iter().map(|b| u8::from(b != 0)).collect() })
    }

    /// Binarizes real values at `threshold` (strictly greater is on).
    pub fn from_values(geom: RollGeometry, values: &[f32], threshold: f32) -> Result<Self, RollError> {
        if values.len() != geom.numel() {
            return Err(RollError::ShapeMismatch { expected: geom.numel(), found: values.len() });
        }
        Ok(Pianoroll { geom, data: values.iter().map(|&v| u8::from(v > threshold)).collect() })
    }

    pub fn geometry(&self) -> RollGeometry {
        self.geom
    }

    pub fn bits(&self) -> &[u8] {
        &self.data
    }

    fn idx(&self, ch: usize, row: usize, frame: usize) -> usize {
        (ch * self.geom.pitches + row) * self.geom.frames() + frame
    }

    pub fn get(&self, ch: usize, row: usize, frame: usize) -> bool {
        self.data[self.idx(ch, row, frame)] != 0
    }

    pub fn set(&mut self, ch: usize, row: usize, frame: usize, on: bool) {
        let i = self.idx(ch, row, frame);
        self.data[i] = u8::from(on);
    }

    pub fn onset(&self, row: usize, frame: usize) -> bool {
        self.get(0, row, frame)
    }

    pub fn sustain(&self, row: usize, frame: usize) -> bool {
        self.get(1, row, frame)
    }

    /// Row-major (2, pitches, frames) values mapped to {-1, 1}.
    pub fn to_signed(&self) -> Vec<f32> {
        self.data.iter().map(|&b| if b != 0 { 1.0 } else { -1.0 }).collect()
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&b| b != 0).count()
    }

    pub fn encode(notes: &[NoteEvent], geom: RollGeometry) -> Result<Self, RollError> {
        let mut pr = Pianoroll::empty(geom);
        let fpb = geom.frames_per_beat as f64;
        let frames = geom.frames();
        for n in notes {
            if !geom.contains_pitch(n.pitch) {
                return Err(RollError::PitchOutOfRange(n.pitch));
            }
            if !(n.duration > 0.0) {
                return Err(RollError::NonPositiveDuration(n.duration));
            }
            if !(n.onset >= 0.0 && n.onset < geom.beats as f64) {
                return Err(RollError::OnsetOutOfWindow(n.onset));
            }
            let row = usize::from(n.pitch - geom.pitch_lo);
            let start = (n.onset * fpb).floor() as usize;
            let end = ((n.end() * fpb).ceil() as usize).min(frames);
            pr.set(0, row, start, true);
            for f in start + 1..end {
                pr.set(1, row, f, true);
            }
        }
        Ok(pr)
    }

    /// Each onset starts a note lasting one frame plus the run of sustain
    /// frames that follows it.
    pub fn decode(&self) -> Vec<NoteEvent> {
        let g = self.geom;
        let fpb = g.frames_per_beat as f64;
        let frames = g.frames();
        let mut notes = Vec::new();
        for row in 0..g.pitches {
            for f in 0..frames {
                if !self.onset(row, f) {
                    continue;
                }
                let mut len = 1;
                while f + len < frames && self.sustain(row, f + len) && !self.onset(row, f + len) {
                    len += 1;
                }
                let pitch = g.pitch_lo + row as u8;
                notes.push(NoteEvent::new(pitch, f as f64 / fpb, len as f64 / fpb, DECODE_VELOCITY));
            }
        }
        notes.sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.pitch.cmp(&b.pitch)));
        notes
    }

    /// Re-grids into another geometry, folding pitches into its window by
    /// octaves so pitch classes are kept.
    pub fn project(&self, geom: RollGeometry) -> Pianoroll {
        let notes: Vec<NoteEvent> = self
            .decode()
            .into_iter()
            .filter_map(|n| fold_pitch(n.pitch, geom).map(|pitch| NoteEvent { pitch, ..n }))
            .collect();
        Pianoroll::encode(&notes, geom).expect("folded notes lie inside the window")
    }
}

/// Moves `pitch` by whole octaves into the window, if the window spans one.
pub fn fold_pitch(pitch: u8, geom: RollGeometry) -> Option<u8> {
    if geom.contains_pitch(pitch) {
        return Some(pitch);
    }
    if geom.pitches < 12 {
        return None;
    }
    let lo = i32::from(geom.pitch_lo);
    let p = i32::from(pitch);
    let shifted = if p < lo { p + 12 * ((lo - p + 11) / 12) } else { p - 12 * ((p - lo - geom.pitches as i32) / 12 + 1) };
    u8::try_from(shifted).ok().filter(|&q| geom.contains_pitch(q))
}

/// Cuts a 4/4 song into `bars`-long windows advancing by `hop_bars`; notes
/// are re-based to the window start, truncated at its start and clipped at
/// its end.
pub fn segment_song(notes: &[NoteEvent], bars: usize, hop_bars: usize) -> Vec<Vec<NoteEvent>> {
    if notes.is_empty() || bars == 0 || hop_bars == 0 {
        return Vec::new();
    }
    let last = notes.iter().map(NoteEvent::end).fold(0.0, f64::max);
    let song_bars = (last / BEATS_PER_BAR as f64 - 1e-9).ceil().max(0.0) as usize;
    if song_bars < bars {
        return Vec::new();
    }
    let count = (song_bars - bars) / hop_bars + 1;
    let span = (bars * BEATS_PER_BAR) as f64;
    (0..count)
        .map(|k| {
            let start = (k * hop_bars * BEATS_PER_BAR) as f64;
            let end = start + span;
            notes
                .iter()
                .filter(|n| n.end() > start && n.onset < end)
                .map(|n| {
                    let on = n.onset.max(start);
                    let off = n.end().min(end);
                    NoteEvent::new(n.pitch, on - start, off - on, n.velocity)
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Error)]
pub enum RenderError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Encoding(#[from] png::EncodingError),
}

const BACKGROUND: [u8; 3] = [24, 24, 32];
const ONSET_COLOR: [u8; 3] = [250, 200, 60];
const SUSTAIN_COLOR: [u8; 3] = [70, 150, 230];

/// RGB pixels with pitch vertical (highest pitch on the top row) and time
/// horizontal, each cell drawn as a `scale`×`scale` block.
pub fn render_rgb(pr: &Pianoroll, scale: usize) -> (usize, usize, Vec<u8>) {
    let g = pr.geometry();
    let scale = scale.max(1);
    let (w, h) = (g.frames() * scale, g.pitches * scale);
    let mut px = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let row = g.pitches - 1 - y / scale;
        for x in 0..w {
            let f = x / scale;
            let c = if pr.onset(row, f) {
                ONSET_COLOR
            } else if pr.sustain(row, f) {
                SUSTAIN_COLOR
            } else {
                BACKGROUND
            };
            px.extend_from_slice(&c);
        }
    }
    (w, h, px)
}

pub fn render_png(pr: &Pianoroll, path: impl AsRef<Path>, scale: usize) -> Result<(), RenderError> {
    let (w, h, px) = render_rgb(pr, scale);
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(&px)?;
    writer.finish()?;
    Ok(())
}
