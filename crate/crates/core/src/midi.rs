//! Standard MIDI File reading and writing, reduced to timed note events.

use std::collections::{HashMap, VecDeque};

use thiserror::Error;

/// Division used when writing.
pub const WRITE_DIVISION: u16 = 480;

/// A note with onset and duration in beats (quarter notes).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoteEvent {
    pub pitch: u8,
    pub onset: f64,
    pub duration: f64,
    pub velocity: u8,
}

impl NoteEvent {
    pub fn new(pitch: u8, onset: f64, duration: f64, velocity: u8) -> Self {
        NoteEvent { pitch, onset, duration, velocity }
    }

    pub fn end(&self) -> f64 {
        self.onset + self.duration
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MidiError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported SMF format {0}")]
    UnsupportedFormat(u16),
    #[error("SMPTE time division is not supported")]
    UnsupportedTiming,
    #[error("malformed track {track}: {detail}")]
    MalformedTrack { track: usize, detail: String },
}

/// Non-fatal conditions found while parsing.
#[derive(Clone, Debug, PartialEq)]
pub enum MidiWarning {
    /// A note-on with no matching note-off, clipped at the end of its track.
    UnterminatedNote { track: usize, channel: u8, pitch: u8 },
    /// A time signature other than 4/4.
    NonFourFour { numerator: u8, denominator: u8 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParsedMidi {
    pub notes: Vec<NoteEvent>,
    /// Tempo from the first tempo event, 120 if there is none.
    pub tempo_bpm: f64,
    pub division: u16,
    pub warnings: Vec<MidiWarning>,
}

impl ParsedMidi {
    pub fn is_four_four(&self) -> bool {
        !self.warnings.iter().any(|w| matches!(w, MidiWarning::NonFourFour { .. }))
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Option<u32> {
        let mut v: u32 = 0;
        for _ in 0..4 {
            let b = self.u8()?;
            v = (v << 7) | u32::from(b & 0x7f);
            if b & 0x80 == 0 {
                return Some(v);
            }
        }
        None
    }

    fn done(&self) -> bool {
        self.pos >= self.buf.len()
    }
}

pub fn parse_midi(bytes: &[u8]) -> Result<ParsedMidi, MidiError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4) != Some(b"MThd") {
        return Err(MidiError::MalformedHeader("missing MThd".into()));
    }
    let len = c.u32().ok_or_else(|| MidiError::MalformedHeader("truncated".into()))? as usize;
    if len < 6 {
        return Err(MidiError::MalformedHeader(format!("header length {len}")));
    }
    let header = c.take(len).ok_or_else(|| MidiError::MalformedHeader("truncated".into()))?;
    let format = u16::from_be_bytes([header[0], header[1]]);
    let ntracks = u16::from_be_bytes([header[2], header[3]]);
    let division = u16::from_be_bytes([header[4], header[5]]);
    if format > 1 {
        return Err(MidiError::UnsupportedFormat(format));
    }
    if division & 0x8000 != 0 {
        return Err(MidiError::UnsupportedTiming);
    }
    if division == 0 {
        return Err(MidiError::MalformedHeader("zero division".into()));
    }

    let mut out = ParsedMidi { notes: Vec::new(), tempo_bpm: 120.0, division, warnings: Vec::new() };
    let mut tempo_seen = false;
    let mut track = 0usize;
    while !c.done() && track < ntracks as usize {
        let bad = |detail: &str| MidiError::MalformedTrack { track, detail: detail.into() };
        let id = c.take(4).ok_or_else(|| bad("truncated chunk id"))?;
        let len = c.u32().ok_or_else(|| bad("truncated chunk length"))? as usize;
        let body = c.take(len).ok_or_else(|| bad("chunk extends past end of file"))?;
        if id != b"MTrk" {
            continue;
        }
        parse_track(body, track, division, &mut out, &mut tempo_seen)?;
        track += 1;
    }
    out.notes.sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.pitch.cmp(&b.pitch)).then(a.duration.total_cmp(&b.duration)));
    Ok(out)
}

fn parse_track(body: &[u8], track: usize, division: u16, out: &mut ParsedMidi, tempo_seen: &mut bool) -> Result<(), MidiError> {
    let bad = |detail: &str| MidiError::MalformedTrack { track, detail: detail.into() };
    let div = f64::from(division);
    let mut c = Cursor { buf: body, pos: 0 };
    let mut tick: u64 = 0;
    let mut running: Option<u8> = None;
    let mut open: HashMap<(u8, u8), VecDeque<(u64, u8)>> = HashMap::new();
    let emit = |on: u64, off: u64, pitch: u8, vel: u8, notes: &mut Vec<NoteEvent>| {
        if off > on {
            notes.push(NoteEvent::new(pitch, on as f64 / div, (off - on) as f64 / div, vel));
        }
    };

    while !c.done() {
        tick += u64::from(c.vlq().ok_or_else(|| bad("bad delta time"))?);
        let first = c.u8().ok_or_else(|| bad("truncated event"))?;
        let (status, data0) = if first & 0x80 != 0 {
            (first, None)
        } else {
            (running.ok_or_else(|| bad("data byte without running status"))?, Some(first))
        };
        match status {
            0xff => {
                let kind = c.u8().ok_or_else(|| bad("truncated meta event"))?;
                let len = c.vlq().ok_or_else(|| bad("bad meta length"))? as usize;
                let data = c.take(len).ok_or_else(|| bad("truncated meta data"))?;
                match kind {
                    0x2f => break,
                    0x51 if len == 3 && !*tempo_seen => {
                        let us = u32::from_be_bytes([0, data[0], data[1], data[2]]);
                        if us > 0 {
                            out.tempo_bpm = 60_000_000.0 / f64::from(us);
                            *tempo_seen = true;
                        }
                    }
                    0x58 if len >= 2 => {
                        let (numerator, denominator) = (data[0], 1u32.checked_shl(u32::from(data[1])).unwrap_or(0));
                        if (numerator, denominator) != (4, 4) {
                            out.warnings.push(MidiWarning::NonFourFour { numerator, denominator: denominator.min(255) as u8 });
                        }
                    }
                    _ => {}
                }
            }
            0xf0 | 0xf7 => {
                let len = c.vlq().ok_or_else(|| bad("bad sysex length"))? as usize;
                c.take(len).ok_or_else(|| bad("truncated sysex"))?;
                running = None;
            }
            0x80..=0xef => {
                running = Some(status);
                let nbytes = if matches!(status & 0xf0, 0xc0 | 0xd0) { 1 } else { 2 };
                let mut data = [0u8; 2];
                let mut i = 0;
                if let Some(d) = data0 {
                    data[0] = d;
                    i = 1;
                }
                while i < nbytes {
                    data[i] = c.u8().ok_or_else(|| bad("truncated channel event"))?;
                    i += 1;
                }
                let channel = status & 0x0f;
                let (pitch, vel) = (data[0] & 0x7f, data[1] & 0x7f);
                match status & 0xf0 {
                    0x90 if vel > 0 => open.entry((channel, pitch)).or_default().push_back((tick, vel)),
                    0x80 | 0x90 => {
                        if let Some((on, v)) = open.get_mut(&(channel, pitch)).and_then(|q| q.pop_front()) {
                            emit(on, tick, pitch, v, &mut out.notes);
                        }
                    }
                    _ => {}
                }
            }
            _ => return Err(bad("undefined status byte")),
        }
    }

    let mut dangling: Vec<_> = open.into_iter().filter(|(_, q)| !q.is_empty()).collect();
    dangling.sort_by_key(|(k, _)| *k);
    for ((channel, pitch), q) in dangling {
        for (on, v) in q {
            emit(on, tick, pitch, v, &mut out.notes);
        }
        out.warnings.push(MidiWarning::UnterminatedNote { track, channel, pitch });
    }
    Ok(())
}

fn push_vlq(out: &mut Vec<u8>, mut v: u32) {
    let mut stack = [0u8; 5];
    let mut n = 0;
    loop {
        stack[n] = (v & 0x7f) as u8;
        n += 1;
        v >>= 7;
        if v == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(stack[i] | if i > 0 { 0x80 } else { 0 });
    }
}

/// Writes a format 0 file at division 480. The tempo event is omitted at
/// 120 bpm, the SMF default.
pub fn write_midi(notes: &[NoteEvent], tempo_bpm: f64) -> Vec<u8> {
    let to_tick = |beats: f64| (beats * f64::from(WRITE_DIVISION)).round().max(0.0) as u64;
    // (tick, is_on, pitch, velocity); offs sort before ons at equal ticks.
    let mut events: Vec<(u64, bool, u8, u8)> = Vec::with_capacity(notes.len() * 2);
    for n in notes {
        let on = to_tick(n.onset);
        let off = to_tick(n.end()).max(on + 1);
        events.push((on, true, n.pitch.min(127), n.velocity.clamp(1, 127)));
        events.push((off, false, n.pitch.min(127), 0));
    }
    events.sort_by_key(|&(t, on, p, _)| (t, on, p));

    let mut trk = Vec::new();
    if (tempo_bpm - 120.0).abs() > 1e-9 && tempo_bpm > 0.0 {
        let us = (60_000_000.0 / tempo_bpm).round().clamp(1.0, 16_777_215.0) as u32;
        trk.extend_from_slice(&[0x00, 0xff, 0x51, 0x03]);
        trk.extend_from_slice(&us.to_be_bytes()[1..]);
    }
    let mut last = 0u64;
    for (t, on, p, v) in events {
        push_vlq(&mut trk, (t - last).min(0x0fff_ffff) as u32);
        last = t;
        trk.extend_from_slice(&[if on { 0x90 } else { 0x80 }, p, if on { v } else { 0x40 }]);
    }
    trk.extend_from_slice(&[0x00, 0xff, 0x2f, 0x00]);

    let mut out = Vec::with_capacity(trk.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&WRITE_DIVISION.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(trk.len() as u32).to_be_bytes());
    out.extend_from_slice(&trk);
    out
}
