//! Seeded block-chord songs for smoke tests and overfit runs.
//!
//! Every note starts on a beat, lasts whole beats, and lies in
//! `[48, 80)`, so the songs survive projection to the desk geometry
//! unchanged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chords::{extract_chords, ChordSequence};
use crate::midi::NoteEvent;
use crate::pianoroll::{Pianoroll, RollError, RollGeometry, BEATS_PER_BAR};

const MAJOR: [u8; 3] = [0, 4, 7];
const MINOR: [u8; 3] = [0, 3, 7];

/// A song of `bars` bars: one triad per bar (root position, bass in the
/// 48–59 octave), struck once or twice per bar.
pub fn block_chord_song(bars: usize, seed: u64) -> Vec<NoteEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut notes = Vec::new();
    for bar in 0..bars {
        let root: u8 = rng.random_range(0..12);
        let shape = if rng.random_bool(0.5) { MAJOR } else { MINOR };
        let start = (bar * BEATS_PER_BAR) as f64;
        let hits: &[(f64, f64)] = if rng.random_bool(0.5) { &[(0.0, 4.0)] } else { &[(0.0, 2.0), (2.0, 2.0)] };
        for &(off, dur) in hits {
            for iv in shape {
                notes.push(NoteEvent::new(48 + root + iv, start + off, dur, 90));
            }
        }
    }
    notes.sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.pitch.cmp(&b.pitch)));
    notes
}

/// `n` 8-bar segments encoded at `geom`, each paired with the chords
/// extracted from its own roll.
pub fn block_chord_segments(geom: RollGeometry, n: usize, seed: u64) -> Result<Vec<(Pianoroll, ChordSequence)>, RollError> {
    (0..n)
        .map(|i| {
            let roll = Pianoroll::encode(&block_chord_song(8, seed.wrapping_add(i as u64)), geom)?;
            let chords = extract_chords(&roll);
            Ok((roll, chords))
        })
        .collect()
}
