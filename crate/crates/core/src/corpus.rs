//! Corpus filtering, hashed train/validation split and random 16-bar
//! training windows.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::midi::{read_midi, to_note_events};
use crate::remi::{encode, EncodeOptions, TokenId};
use crate::score::{quantize, Score, TicksPerStep, STEPS_PER_BAR};

pub const MIN_AUDIO_SCORE: f64 = 0.9;
pub const DEFAULT_HOLDOUT: f64 = 0.10;
pub const WINDOW_BARS: u32 = 16;
pub const MIN_WINDOW_TOKENS: usize = 100;
pub const DEFAULT_MAX_TRIES: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub id: String,
    pub audio_score: Option<f64>,
    pub score: Score,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingWindow {
    pub tokens: Vec<TokenId>,
    pub source_id: String,
    pub start_bar: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FilterStats {
    pub kept: usize,
    pub below_threshold: usize,
    pub missing_score: usize,
}

/// Keeps entries whose audio score is at least 0.9. Entries without a score
/// are dropped and counted separately.
pub fn filter_corpus(entries: Vec<CorpusEntry>) -> (Vec<CorpusEntry>, FilterStats) {
    let mut stats = FilterStats::default();
    let kept: Vec<_> = entries
        .into_iter()
        .filter(|e| match e.audio_score {
            Some(s) if s >= MIN_AUDIO_SCORE => true,
            Some(_) => {
                stats.below_threshold += 1;
                false
            }
            None => {
                stats.missing_score += 1;
                false
            }
        })
        .collect();
    stats.kept = kept.len();
    (kept, stats)
}

/// Uniform value in `[0, 1)` from SHA-256 of `salt`, a NUL byte and `id`.
pub fn split_hash(salt: &str, id: &str) -> f64 {
    let mut h = Sha256::new();
    h.update(salt.as_bytes());
    h.update([0u8]);
    h.update(id.as_bytes());
    let digest = h.finalize();
    let top = u64::from_be_bytes(digest[..8].try_into().expect("digest has 32 bytes"));
    (top >> 11) as f64 / (1u64 << 53) as f64
}

/// Partitions entries into `(train, validation)` by a stable hash of the id,
/// so membership does not depend on corpus order or machine.
pub fn split(entries: Vec<CorpusEntry>, holdout_fraction: f64, salt: &str) -> Result<(Vec<CorpusEntry>, Vec<CorpusEntry>)> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("holdout fraction must be in (0, 1), got {holdout_fraction}")));
    }
    Ok(entries.into_iter().partition(|e| split_hash(salt, &e.id) >= holdout_fraction))
}

/// Number of bars spanned by the score's onsets.
pub fn total_bars(score: &Score) -> u32 {
    score.end_start().div_ceil(STEPS_PER_BAR)
}

/// Draws a random 16-bar window with at least 100 tokens.
///
/// Start bars are uniform over every admissible position; a draw whose
/// encoding is too short is retried up to `max_tries` times.
pub fn sample_window<R: Rng + ?Sized>(entry: &CorpusEntry, rng: &mut R, max_tries: usize) -> Option<TrainingWindow> {
    let bars = total_bars(&entry.score);
    if bars < WINDOW_BARS {
        return None;
    }
    for _ in 0..max_tries {
        let start_bar = rng.random_range(0..=bars - WINDOW_BARS);
        let lo = start_bar * STEPS_PER_BAR;
        let slice = entry.score.slice(lo, lo + WINDOW_BARS * STEPS_PER_BAR, true);
        let tokens = encode(&slice, WINDOW_BARS, EncodeOptions::default()).expect("slice fits the window");
        if tokens.len() >= MIN_WINDOW_TOKENS {
            return Some(TrainingWindow { tokens, source_id: entry.id.clone(), start_bar });
        }
    }
    None
}

/// Per-entry generator so that window draws do not depend on entry order.
pub fn entry_rng(seed: u64, id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    let digest = h.finalize();
    ChaCha8Rng::from_seed(digest.into())
}

/// One window per entry where possible.
pub fn sample_windows(entries: &[CorpusEntry], seed: u64, max_tries: usize) -> Vec<TrainingWindow> {
    entries
        .iter()
        .filter_map(|e| sample_window(e, &mut entry_rng(seed, &e.id), max_tries))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowStats {
    pub count: usize,
    pub min: usize,
    pub p10: usize,
    pub median: usize,
    pub p90: usize,
    pub max: usize,
}

/// Token-length summary, or `None` for no windows. Quantiles use the
/// nearest-rank definition.
pub fn window_stats(windows: &[TrainingWindow]) -> Option<WindowStats> {
    let mut lens: Vec<usize> = windows.iter().map(|w| w.tokens.len()).collect();
    if lens.is_empty() {
        return None;
    }
    lens.sort_unstable();
    let q = |p: f64| lens[((p * lens.len() as f64).ceil() as usize).clamp(1, lens.len()) - 1];
    Some(WindowStats {
        count: lens.len(),
        min: lens[0],
        p10: q(0.1),
        median: q(0.5),
        p90: q(0.9),
        max: lens[lens.len() - 1],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    pub audio_score: Option<f64>,
    pub path: PathBuf,
}

/// Parses `id<TAB>audio_score<TAB>path` lines; `-` marks a missing score.
/// Blank lines are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |msg: String| Error::Malformed(format!("manifest line {}: {msg}", lineno + 1));
        if fields.len() != 3 {
            return Err(bad(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let id = fields[0].to_string();
        if id.is_empty() {
            return Err(bad("empty id".into()));
        }
        let audio_score = match fields[1] {
            "-" => None,
            s => Some(s.parse::<f64>().map_err(|_| bad(format!("audio_score `{s}` is not a number")))?),
        };
        if !seen.insert(id.clone()) {
            return Err(bad(format!("duplicate id `{id}`")));
        }
        out.push(ManifestRecord { id, audio_score, path: PathBuf::from(fields[2]) });
    }
    Ok(out)
}

/// Reads and quantizes one manifest record. Relative paths resolve against `base`.
pub fn load_entry(record: &ManifestRecord, base: &Path) -> Result<CorpusEntry> {
    let path = if record.path.is_absolute() { record.path.clone() } else { base.join(&record.path) };
    let bytes = std::fs::read(&path)?;
    let midi = read_midi(&bytes)?;
    let (events, _) = to_note_events(&midi);
    let q = quantize(&events, TicksPerStep::from_ticks_per_quarter(midi.ticks_per_quarter)?);
    Ok(CorpusEntry { id: record.id.clone(), audio_score: record.audio_score, score: q.score })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::Note;

    fn entry(id: &str, audio_score: Option<f64>) -> CorpusEntry {
        CorpusEntry { id: id.into(), audio_score, score: Score::new() }
    }

    /// `bars` bars with `per_bar` sixteenth notes each.
    fn dense(bars: u32, per_bar: u32) -> Score {
        (0..bars)
            .flat_map(|b| (0..per_bar).map(move |p| Note { start: b * 16 + p, pitch: 60 + (p % 12) as u8, duration: 1 }))
            .collect()
    }

    #[test]
    fn threshold_is_inclusive() {
        let (kept, stats) = filter_corpus(vec![entry("a", Some(0.9)), entry("b", Some(0.89)), entry("c", None)]);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].id, "a");
        assert_eq!(stats, FilterStats { kept: 1, below_threshold: 1, missing_score: 1 });
    }

    #[test]
    fn split_is_deterministic_partition() {
        let entries: Vec<_> = (0..200).map(|i| entry(&format!("piece-{i}"), Some(1.0))).collect();
        let (t1, v1) = split(entries.clone(), 0.1, "salt").unwrap();
        let (t2, v2) = split(entries.clone(), 0.1, "salt").unwrap();
        assert_eq!((t1.clone(), v1.clone()), (t2, v2));
        assert_eq!(t1.len() + v1.len(), 200);
        let vids: HashSet<_> = v1.iter().map(|e| e.id.clone()).collect();
        assert!(t1.iter().all(|e| !vids.contains(&e.id)));
        let (te, ve) = split(vec![], 0.1, "salt").unwrap();
        assert!(te.is_empty() && ve.is_empty());
        assert!(split(vec![], 0.0, "s").is_err());
        assert!(split(vec![], 1.0, "s").is_err());
    }

    #[test]
    fn split_fraction_concentrates() {
        let entries: Vec<_> = (0..10_000).map(|i| entry(&format!("id{i:05}"), Some(1.0))).collect();
        let (_, v) = split(entries, 0.1, "mirror").unwrap();
        let frac = v.len() as f64 / 10_000.0;
        assert!((0.08..=0.12).contains(&frac), "{frac}");
    }

    #[test]
    fn exact_sixteen_bars_start_at_zero() {
        let e = CorpusEntry { id: "x".into(), audio_score: Some(1.0), score: dense(16, 4) };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let w = sample_window(&e, &mut rng, 32).unwrap();
            assert_eq!(w.start_bar, 0);
            assert!(w.tokens.len() >= MIN_WINDOW_TOKENS);
            assert_eq!(w.tokens.iter().filter(|t| **t == TokenId::BAR).count(), 16);
        }
    }

    #[test]
    fn short_or_sparse_pieces_yield_none() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let empty = CorpusEntry { id: "e".into(), audio_score: None, score: Score::new() };
        assert!(sample_window(&empty, &mut rng, 32).is_none());
        let short = CorpusEntry { id: "s".into(), audio_score: None, score: dense(15, 16) };
        assert!(sample_window(&short, &mut rng, 32).is_none());
        // 16 bars of one note each: 1 + 16 * 4 = 65 tokens
        let sparse = CorpusEntry { id: "p".into(), audio_score: None, score: dense(16, 1) };
        assert!(sample_window(&sparse, &mut rng, 32).is_none());
    }

    #[test]
    fn windows_are_rebased() {
        let e = CorpusEntry { id: "x".into(), audio_score: Some(1.0), score: dense(40, 4) };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = sample_window(&e, &mut rng, 32).unwrap();
        let slice = e.score.slice(w.start_bar * 16, (w.start_bar + 16) * 16, true);
        assert_eq!(w.tokens, encode(&slice, 16, EncodeOptions::default()).unwrap());
    }

    #[test]
    fn stats_examples() {
        let win = |n: usize| TrainingWindow { tokens: vec![TokenId::BAR; n], source_id: String::new(), start_bar: 0 };
        let s = window_stats(&[win(100)]).unwrap();
        assert_eq!((s.min, s.median, s.max), (100, 100, 100));
        assert!(window_stats(&[]).is_none());
        assert_eq!(window_stats(&[win(300), win(100), win(200)]).unwrap().median, 200);
    }

    #[test]
    fn manifest_parsing() {
        let m = parse_manifest("a\t0.95\tx.mid\nb\t-\tsub/y.mid\n\n").unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].audio_score, Some(0.95));
        assert_eq!(m[1].audio_score, None);
        assert_eq!(m[1].path, PathBuf::from("sub/y.mid"));
        assert!(parse_manifest("a\t0.9\n").unwrap_err().to_string().contains("line 1"));
        assert!(parse_manifest("a\tx\tp\n").is_err());
        assert!(parse_manifest("a\t1\tp\na\t1\tq\n").unwrap_err().to_string().contains("duplicate"));
    }
}
