//! Quantized note model on a sixteenth-note grid and the JSON interchange
//! format used for prompts and generations.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Steps per 4/4 measure on the sixteenth-note grid.
pub const STEPS_PER_BAR: u32 = 16;
/// Measures in the prompt region, counting the (possibly empty) pickup bar.
pub const PROMPT_BARS: u32 = 5;
/// Measures in the continuation region.
pub const GENERATION_BARS: u32 = 12;
/// Last admissible prompt start (inclusive).
pub const PROMPT_LAST_START: u32 = PROMPT_BARS * STEPS_PER_BAR - 1;
/// First admissible generation start.
pub const GENERATION_FIRST_START: u32 = PROMPT_BARS * STEPS_PER_BAR;
/// Last admissible generation start (inclusive).
pub const GENERATION_LAST_START: u32 = (PROMPT_BARS + GENERATION_BARS) * STEPS_PER_BAR - 1;

/// A single note: onset step, MIDI pitch and length in steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Note {
    pub start: u32,
    pub pitch: u8,
    pub duration: u32,
}

impl Note {
    pub fn new(start: u32, pitch: u8, duration: u32) -> Result<Self> {
        if pitch > 127 {
            return Err(Error::InvalidNote(format!("pitch {pitch} outside 0..=127")));
        }
        if duration == 0 {
            return Err(Error::InvalidNote("duration must be at least 1".into()));
        }
        Ok(Self { start, pitch, duration })
    }

    fn key(&self) -> (u32, u8) {
        (self.start, self.pitch)
    }
}

/// Notes sorted by `(start, pitch)` with no repeated key.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Score {
    notes: Vec<Note>,
}

impl Score {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a canonical score. Notes sharing `(start, pitch)` collapse to the
    /// one with the longest duration.
    pub fn from_notes(mut notes: Vec<Note>) -> Self {
        notes.sort_by(|a, b| a.key().cmp(&b.key()).then(b.duration.cmp(&a.duration)));
        notes.dedup_by_key(|n| n.key());
        Self { notes }
    }

    pub fn notes(&self) -> &[Note] {
        &self.notes
    }

    pub fn len(&self) -> usize {
        self.notes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    pub fn into_notes(self) -> Vec<Note> {
        self.notes
    }

    /// Notes whose start lies in `[start_step, end_step)`. With `rebase`, starts
    /// are shifted so that `start_step` becomes 0.
    pub fn slice(&self, start_step: u32, end_step: u32, rebase: bool) -> Score {
        let lo = self.notes.partition_point(|n| n.start < start_step);
        let hi = self.notes.partition_point(|n| n.start < end_step);
        let notes = self.notes[lo..hi.max(lo)]
            .iter()
            .map(|n| {
                let mut n = *n;
                if rebase {
                    n.start -= start_step;
                }
                n
            })
            .collect();
        Score { notes }
    }

    /// Same notes shifted later by `steps`.
    pub fn shifted(&self, steps: u32) -> Score {
        Score {
            notes: self
                .notes
                .iter()
                .map(|n| Note { start: n.start + steps, ..*n })
                .collect(),
        }
    }

    /// One past the last onset step, or 0 for an empty score.
    pub fn end_start(&self) -> u32 {
        self.notes.last().map_or(0, |n| n.start + 1)
    }
}

impl FromIterator<Note> for Score {
    fn from_iter<I: IntoIterator<Item = Note>>(iter: I) -> Self {
        Score::from_notes(iter.into_iter().collect())
    }
}

/// Ratio of source ticks to grid steps, kept exact as `num / den`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TicksPerStep {
    num: u64,
    den: u64,
}

impl TicksPerStep {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::InvalidArgument(
                "ticks per sixteenth must be positive".into(),
            ));
        }
        Ok(Self { num, den })
    }

    pub fn integer(ticks: u64) -> Result<Self> {
        Self::new(ticks, 1)
    }

    /// A MIDI division (ticks per quarter) spans four grid steps.
    pub fn from_ticks_per_quarter(tpq: u16) -> Result<Self> {
        Self::new(tpq as u64, 4)
    }

    /// Nearest step index; exact halves round up.
    pub fn round_to_step(&self, tick: u64) -> u64 {
        // round(t * den / num) = floor((2 t den + num) / (2 num))
        let num = self.num as u128;
        ((2 * tick as u128 * self.den as u128 + num) / (2 * num)) as u64
    }
}

/// Raw note interval as read from a performance, in source ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawNoteEvent {
    pub onset: i64,
    pub offset: i64,
    pub pitch: i32,
}

/// Why a raw event was left out of a quantized score.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejected {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Quantized {
    pub score: Score,
    pub rejected: Vec<Rejected>,
}

/// Snaps raw note intervals onto the sixteenth grid.
///
/// Onsets and offsets round half-up to the nearest step; durations shorter
/// than one step become one step. Events with a negative onset, an offset
/// before the onset, or a pitch outside 0..=127 are reported in
/// [`Quantized::rejected`] and skipped.
pub fn quantize(events: &[RawNoteEvent], tps: TicksPerStep) -> Quantized {
    let mut notes = Vec::with_capacity(events.len());
    let mut rejected = Vec::new();
    for (index, ev) in events.iter().enumerate() {
        let reason = if ev.onset < 0 {
            Some(format!("negative onset {}", ev.onset))
        } else if ev.offset < ev.onset {
            Some(format!("offset {} precedes onset {}", ev.offset, ev.onset))
        } else if !(0..=127).contains(&ev.pitch) {
            Some(format!("pitch {} outside 0..=127", ev.pitch))
        } else {
            None
        };
        if let Some(reason) = reason {
            rejected.push(Rejected { index, reason });
            continue;
        }
        let on = tps.round_to_step(ev.onset as u64);
        let off = tps.round_to_step(ev.offset as u64);
        let Ok(start) = u32::try_from(on) else {
            rejected.push(Rejected { index, reason: format!("onset {} overflows the grid", ev.onset) });
            continue;
        };
        let duration = u32::try_from(off.saturating_sub(on)).unwrap_or(u32::MAX).max(1);
        notes.push(Note { start, pitch: ev.pitch as u8, duration });
    }
    Quantized { score: Score::from_notes(notes), rejected }
}

/// Which half of a continuation task a note list belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Prompt,
    Generation,
}

impl Region {
    pub fn bounds(self) -> (u32, u32) {
        match self {
            Region::Prompt => (0, PROMPT_LAST_START),
            Region::Generation => (GENERATION_FIRST_START, GENERATION_LAST_START),
        }
    }

    fn key(self) -> &'static str {
        match self {
            Region::Prompt => "prompt",
            Region::Generation => "generation",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// A prompt and, once produced, its continuation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContinuationTask {
    prompt: Score,
    generation: Option<Score>,
}

impl ContinuationTask {
    pub fn new(prompt: Score, generation: Option<Score>) -> Result<Self> {
        check_region(&prompt, Region::Prompt)?;
        if let Some(g) = &generation {
            check_region(g, Region::Generation)?;
        }
        Ok(Self { prompt, generation })
    }

    pub fn prompt(&self) -> &Score {
        &self.prompt
    }

    pub fn generation(&self) -> Option<&Score> {
        self.generation.as_ref()
    }

    pub fn with_generation(&self, generation: Score) -> Result<Self> {
        Self::new(self.prompt.clone(), Some(generation))
    }
}

fn check_region(score: &Score, region: Region) -> Result<()> {
    let (lo, hi) = region.bounds();
    match score.notes().iter().position(|n| n.start < lo || n.start > hi) {
        Some(index) => Err(Error::RegionOutOfRange {
            region,
            index,
            start: score.notes()[index].start as i64,
        }),
        None => Ok(()),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNote {
    start: i64,
    pitch: i64,
    duration: i64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTask {
    prompt: Vec<RawNote>,
    #[serde(default)]
    generation: Option<Vec<RawNote>>,
}

#[derive(Serialize)]
struct TaskDoc<'a> {
    prompt: &'a [Note],
    #[serde(skip_serializing_if = "Option::is_none")]
    generation: Option<&'a [Note]>,
}

fn notes_from_raw(raw: Vec<RawNote>, region: Region) -> Result<Score> {
    let (lo, hi) = region.bounds();
    let mut notes = Vec::with_capacity(raw.len());
    for (index, n) in raw.into_iter().enumerate() {
        if n.start < lo as i64 || n.start > hi as i64 {
            return Err(Error::RegionOutOfRange { region, index, start: n.start });
        }
        if !(0..=127).contains(&n.pitch) {
            return Err(Error::InvalidNoteAt {
                region,
                index,
                reason: format!("pitch {} outside 0..=127", n.pitch),
            });
        }
        if n.duration < 1 || n.duration > u32::MAX as i64 {
            return Err(Error::InvalidNoteAt {
                region,
                index,
                reason: format!("duration {} is not a positive step count", n.duration),
            });
        }
        notes.push(Note { start: n.start as u32, pitch: n.pitch as u8, duration: n.duration as u32 });
    }
    Ok(Score::from_notes(notes))
}

/// Parses an interchange document. Unknown keys are rejected.
pub fn parse_task(text: &str) -> Result<ContinuationTask> {
    let raw: RawTask = serde_json::from_str(text).map_err(|e| Error::Malformed(e.to_string()))?;
    let prompt = notes_from_raw(raw.prompt, Region::Prompt)?;
    let generation = raw
        .generation
        .map(|g| notes_from_raw(g, Region::Generation))
        .transpose()?;
    Ok(ContinuationTask { prompt, generation })
}

/// Serializes a task as pretty-printed JSON with a trailing newline.
pub fn emit_task(task: &ContinuationTask) -> String {
    let doc = TaskDoc {
        prompt: task.prompt.notes(),
        generation: task.generation.as_ref().map(|g| g.notes()),
    };
    let mut out = serde_json::to_string_pretty(&doc).expect("plain structs always serialize");
    out.push('\n');
    out
}
