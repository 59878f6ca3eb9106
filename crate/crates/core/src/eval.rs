//! Objective metrics: per-segment musical features, the overlapping area of
//! their estimated densities, and chord adherence.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::chords::{chord_f1, extract_chords, ChordSequence};
use crate::midi::{parse_midi, MidiError, NoteEvent};
use crate::pianoroll::{Pianoroll, RollError, RollGeometry};

const GRID_POINTS: usize = 1000;
const HIST_BINS: usize = 64;
/// Kernels are cut off this many bandwidths from their center.
const KERNEL_REACH: f64 = 8.0;
const ONSET_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("a feature pool is empty")]
    InsufficientSamples,
    #[error("no segments to evaluate in {0}")]
    EmptyCorpus(String),
    #[error("{path}: {source}")]
    Midi { path: PathBuf, source: MidiError },
    #[error("generated segment {index}: {source}")]
    Roll { index: usize, source: RollError },
    #[error("{targets} chord targets for {segments} generated segments")]
    TargetCount { targets: usize, segments: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Feature pools of a corpus. Durations and IOIs are in beats.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeaturePools {
    pub pitch_range: Vec<f64>,
    pub durations: Vec<f64>,
    pub iois: Vec<f64>,
}

/// Pitch range per segment (segments with fewer than two notes are
/// skipped), every note's duration, and intervals between consecutive
/// distinct onsets within a segment.
pub fn extract_features(segments: &[Vec<NoteEvent>]) -> FeaturePools {
    let mut pools = FeaturePools::default();
    for seg in segments {
        if seg.len() >= 2 {
            let lo = seg.iter().map(|n| n.pitch).min().unwrap_or(0);
            let hi = seg.iter().map(|n| n.pitch).max().unwrap_or(0);
            pools.pitch_range.push(f64::from(hi - lo));
        }
        pools.durations.extend(seg.iter().map(|n| n.duration));
        let mut onsets: Vec<f64> = seg.iter().map(|n| n.onset).collect();
        onsets.sort_by(f64::total_cmp);
        onsets.dedup_by(|b, a| (*b - *a).abs() <= ONSET_EPS);
        pools.iois.extend(onsets.windows(2).map(|w| w[1] - w[0]));
    }
    pools
}

fn variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Scott's rule `σ·n^(−1/5)`.
pub fn scott_bandwidth(v: &[f64]) -> f64 {
    variance(v).sqrt() * (v.len() as f64).powf(-0.2)
}

/// Gaussian KDE of sorted `v` on `grid`, normalized to unit mass on the grid.
fn kde_on_grid(sorted: &[f64], h: f64, grid: &[f64], step: f64) -> Vec<f64> {
    let reach = KERNEL_REACH * h;
    let mut dens: Vec<f64> = grid
        .iter()
        .map(|&x| {
            let lo = sorted.partition_point(|&s| s < x - reach);
            let hi = sorted.partition_point(|&s| s <= x + reach);
            sorted[lo..hi].iter().map(|&s| (-0.5 * ((x - s) / h).powi(2)).exp()).sum::<f64>()
        })
        .collect();
    let mass: f64 = dens.iter().sum::<f64>() * step;
    if mass > 0.0 {
        dens.iter_mut().for_each(|d| *d /= mass);
    }
    dens
}

fn histogram(v: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let mut bins = vec![0.0; HIST_BINS];
    let width = (hi - lo) / HIST_BINS as f64;
    for &x in v {
        let b = (((x - lo) / width) as usize).min(HIST_BINS - 1);
        bins[b] += 1.0;
    }
    bins.iter_mut().for_each(|b| *b /= v.len() as f64);
    bins
}

/// Overlapping area of the two pools' estimated densities, in [0, 1].
///
/// Pools with at least two values and non-zero variance use Gaussian KDEs
/// on a shared 1000-point grid; otherwise normalized 64-bin histograms on
/// the union range are intersected.
pub fn overlapping_area(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::InsufficientSamples);
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let lo = sa[0].min(sb[0]);
    let hi = sa[sa.len() - 1].max(sb[sb.len() - 1]);
    let kde_ok = |s: &[f64]| s.len() >= 2 && s[0] != s[s.len() - 1];
    let oa = if kde_ok(&sa) && kde_ok(&sb) {
        let (ha, hb) = (scott_bandwidth(&sa), scott_bandwidth(&sb));
        let pad = 3.0 * ha.max(hb);
        let (g0, g1) = (lo - pad, hi + pad);
        let step = (g1 - g0) / (GRID_POINTS - 1) as f64;
        let grid: Vec<f64> = (0..GRID_POINTS).map(|i| g0 + i as f64 * step).collect();
        let p = kde_on_grid(&sa, ha, &grid, step);
        let q = kde_on_grid(&sb, hb, &grid, step);
        p.iter().zip(&q).map(|(x, y)| x.min(*y)).sum::<f64>() * step
    } else if hi == lo {
        1.0
    } else {
        let p = histogram(&sa, lo, hi);
        let q = histogram(&sb, lo, hi);
        p.iter().zip(&q).map(|(x, y)| x.min(*y)).sum::<f64>()
    };
    Ok(oa.clamp(0.0, 1.0))
}

/// Table columns: OA per feature, their mean, and chord F1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OaReport {
    pub oa_pitch_range: f64,
    pub oa_ioi: f64,
    pub oa_duration: f64,
    pub oa_avg: f64,
    pub chord_f1: Option<f64>,
}

impl OaReport {
    pub const COLUMNS: [&'static str; 5] = ["Pitch Range", "IOI", "Note Duration", "Avg", "Chord F1"];

    fn cells(&self) -> [String; 5] {
        let f = |v: f64| format!("{v:.4}");
        [
            f(self.oa_pitch_range),
            f(self.oa_ioi),
            f(self.oa_duration),
            f(self.oa_avg),
            self.chord_f1.map_or_else(|| "-".to_string(), f),
        ]
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::COLUMNS.join(","), self.cells().join(","))
    }

    pub fn to_table(&self) -> String {
        let cells = self.cells();
        let widths: Vec<usize> = Self::COLUMNS.iter().zip(&cells).map(|(c, v)| c.len().max(v.len())).collect();
        let row = |items: Vec<&str>| {
            items.iter().zip(&widths).map(|(s, w)| format!(" {s:>w$} ")).collect::<Vec<_>>().join("|")
        };
        let rule = widths.iter().map(|w| "-".repeat(w + 2)).collect::<Vec<_>>().join("+");
        format!("{}\n{}\n{}\n", row(Self::COLUMNS.to_vec()), rule, row(cells.iter().map(String::as_str).collect()))
    }
}

/// Compares generated segments with reference segments. Returns the report
/// and any warnings (currently an unequal segment count).
///
/// Chord F1 is computed when targets are given: the chords of each
/// generated segment are re-extracted from its pianoroll and scored against
/// the target of the same index.
pub fn evaluate(
    generated: &[Vec<NoteEvent>],
    reference: &[Vec<NoteEvent>],
    targets: Option<&[ChordSequence]>,
) -> Result<(OaReport, Vec<String>), EvalError> {
    if generated.is_empty() {
        return Err(EvalError::EmptyCorpus("generated set".into()));
    }
    if reference.is_empty() {
        return Err(EvalError::EmptyCorpus("reference set".into()));
    }
    let mut warnings = Vec::new();
    if generated.len() != reference.len() {
        warnings.push(format!(
            "generated set has {} segments, reference has {}; equal counts are recommended",
            generated.len(),
            reference.len()
        ));
    }
    let g = extract_features(generated);
    let r = extract_features(reference);
    let oa_pitch_range = overlapping_area(&g.pitch_range, &r.pitch_range)?;
    let oa_ioi = overlapping_area(&g.iois, &r.iois)?;
    let oa_duration = overlapping_area(&g.durations, &r.durations)?;
    let chord_f1 = match targets {
        None => None,
        Some(t) if t.len() != generated.len() => {
            return Err(EvalError::TargetCount { targets: t.len(), segments: generated.len() })
        }
        Some(t) => {
            let mut total = 0.0;
            for (index, (seg, target)) in generated.iter().zip(t).enumerate() {
                let roll = Pianoroll::encode(seg, RollGeometry::FULL).map_err(|source| EvalError::Roll { index, source })?;
                total += chord_f1(&extract_chords(&roll), target);
            }
            Some(total / t.len() as f64)
        }
    };
    let report = OaReport {
        oa_pitch_range,
        oa_ioi,
        oa_duration,
        oa_avg: (oa_pitch_range + oa_ioi + oa_duration) / 3.0,
        chord_f1,
    };
    Ok((report, warnings))
}

/// Every `.mid`/`.midi` file of a directory, sorted by name, as one segment
/// each.
pub fn load_midi_dir(dir: impl AsRef<Path>) -> Result<Vec<(PathBuf, Vec<NoteEvent>)>, EvalError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"))
        })
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|path| {
            let bytes = std::fs::read(&path)?;
            match parse_midi(&bytes) {
                Ok(m) => Ok((path, m.notes)),
                Err(source) => Err(EvalError::Midi { path, source }),
            }
        })
        .collect()
}
