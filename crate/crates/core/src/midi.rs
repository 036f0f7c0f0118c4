//! Minimal Standard MIDI File support: note events in, format-0 files out.
//!
//! Only metrical divisions are accepted. Tempo, controller, sysex and meta
//! events are skipped on read; channels are merged.

use crate::error::{Error, Result};
use crate::score::{RawNoteEvent, Score};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoteKind {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MidiEvent {
    pub tick: u64,
    pub kind: NoteKind,
    pub pitch: u8,
    pub velocity: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MidiFile {
    pub ticks_per_quarter: u16,
    /// Note events from every track, stably ordered by tick.
    pub events: Vec<MidiEvent>,
    /// Latest tick seen on any track, including end-of-track.
    pub end_tick: u64,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    /// Absolute offset of `buf[0]` in the file, for diagnostics.
    base: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8], base: usize) -> Self {
        Self { buf, pos: 0, base }
    }

    fn offset(&self) -> usize {
        self.base + self.pos
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Midi { offset: self.offset(), message: message.into() }
    }

    fn is_empty(&self) -> bool {
        self.pos >= self.buf.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated: need {n} bytes, {} remain",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn peek(&self) -> Result<u8> {
        self.buf.get(self.pos).copied().ok_or_else(|| self.err("truncated: unexpected end of data"))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32> {
        let start = self.offset();
        let mut value = 0u32;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | (b & 0x7f) as u32;
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(Error::Midi { offset: start, message: "variable-length quantity longer than 4 bytes".into() })
    }
}

/// Parses a format 0 or 1 file into a single tick-ordered note stream.
pub fn read_midi(bytes: &[u8]) -> Result<MidiFile> {
    let mut cur = Cursor::new(bytes, 0);
    if cur.take(4).map_err(|_| cur.err("missing header chunk"))? != b"MThd" {
        return Err(Error::Midi { offset: 0, message: "bad magic: expected MThd".into() });
    }
    let header_len = cur.u32()? as usize;
    if header_len < 6 {
        return Err(cur.err(format!("header chunk length {header_len} is shorter than 6")));
    }
    let header = cur.take(header_len)?;
    let format = u16::from_be_bytes([header[0], header[1]]);
    let n_tracks = u16::from_be_bytes([header[2], header[3]]);
    let division = u16::from_be_bytes([header[4], header[5]]);
    if format > 2 {
        return Err(Error::Midi { offset: 8, message: format!("unsupported format {format}") });
    }
    if division & 0x8000 != 0 {
        return Err(Error::Midi { offset: 12, message: "SMPTE time division is not supported".into() });
    }
    if division == 0 {
        return Err(Error::Midi { offset: 12, message: "division of zero ticks per quarter".into() });
    }

    let mut events = Vec::new();
    let mut end_tick = 0u64;
    let mut tracks_read = 0u16;
    while !cur.is_empty() && tracks_read < n_tracks {
        let id = cur.take(4)?;
        let len = cur.u32()? as usize;
        let body_offset = cur.offset();
        let body = cur.take(len)?;
        if id != b"MTrk" {
            // unknown chunk types are skipped
            continue;
        }
        let end = read_track(Cursor::new(body, body_offset), &mut events)?;
        end_tick = end_tick.max(end);
        tracks_read += 1;
    }
    if tracks_read < n_tracks {
        return Err(cur.err(format!("header declares {n_tracks} tracks, found {tracks_read}")));
    }
    events.sort_by_key(|e| e.tick);
    Ok(MidiFile { ticks_per_quarter: division, events, end_tick })
}

fn read_track(mut cur: Cursor<'_>, out: &mut Vec<MidiEvent>) -> Result<u64> {
    let mut tick = 0u64;
    let mut running: Option<u8> = None;
    while !cur.is_empty() {
        tick += cur.vlq()? as u64;
        let first = cur.peek()?;
        let status = if first & 0x80 != 0 {
            cur.pos += 1;
            first
        } else {
            running.ok_or_else(|| cur.err("running status with no previous status byte"))?
        };
        match status {
            0xff => {
                running = None;
                let meta = cur.u8()?;
                let len = cur.vlq()? as usize;
                cur.take(len)?;
                if meta == 0x2f {
                    return Ok(tick);
                }
            }
            0xf0 | 0xf7 => {
                running = None;
                let len = cur.vlq()? as usize;
                cur.take(len)?;
            }
            0xf1..=0xfe => {
                return Err(cur.err(format!("system message 0x{status:02x} inside a track")));
            }
            _ => {
                running = Some(status);
                let n_data = if matches!(status & 0xf0, 0xc0 | 0xd0) { 1 } else { 2 };
                let data = cur.take(n_data)?;
                if data.iter().any(|b| b & 0x80 != 0) {
                    return Err(cur.err("status byte where a data byte was expected"));
                }
                match status & 0xf0 {
                    0x90 if data[1] > 0 => out.push(MidiEvent {
                        tick,
                        kind: NoteKind::On,
                        pitch: data[0],
                        velocity: data[1],
                    }),
                    0x80 | 0x90 => out.push(MidiEvent {
                        tick,
                        kind: NoteKind::Off,
                        pitch: data[0],
                        velocity: if status & 0xf0 == 0x80 { data[1] } else { 0 },
                    }),
                    _ => {}
                }
            }
        }
    }
    Ok(tick)
}

/// Counts of repairs made while pairing note events.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PairingDiagnostics {
    pub restrikes: usize,
    pub unmatched_on: usize,
    pub orphan_off: usize,
}

/// Pairs note-ons with note-offs into raw intervals, ordered by onset then pitch.
///
/// A note-on for a pitch that is already sounding closes the earlier note at
/// the restrike tick. Notes still sounding at the end close at `end_tick`.
pub fn to_note_events(m: &MidiFile) -> (Vec<RawNoteEvent>, PairingDiagnostics) {
    let mut sounding: [Option<u64>; 128] = [None; 128];
    let mut diag = PairingDiagnostics::default();
    let mut out = Vec::new();
    let close = |onset: u64, offset: u64, pitch: u8, out: &mut Vec<RawNoteEvent>| {
        out.push(RawNoteEvent { onset: onset as i64, offset: offset as i64, pitch: pitch as i32 });
    };
    for ev in &m.events {
        let slot = &mut sounding[(ev.pitch & 0x7f) as usize];
        match ev.kind {
            NoteKind::On => {
                if let Some(onset) = slot.replace(ev.tick) {
                    diag.restrikes += 1;
                    close(onset, ev.tick, ev.pitch, &mut out);
                }
            }
            NoteKind::Off => match slot.take() {
                Some(onset) => close(onset, ev.tick, ev.pitch, &mut out),
                None => diag.orphan_off += 1,
            },
        }
    }
    let last = m.events.last().map_or(0, |e| e.tick).max(m.end_tick);
    for (pitch, slot) in sounding.iter().enumerate() {
        if let Some(onset) = slot {
            diag.unmatched_on += 1;
            close(*onset, last, pitch as u8, &mut out);
        }
    }
    out.sort_by_key(|e| (e.onset, e.pitch));
    (out, diag)
}

fn push_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut buf = [0u8; 5];
    let mut i = buf.len() - 1;
    buf[i] = (value & 0x7f) as u8;
    value >>= 7;
    while value > 0 {
        i -= 1;
        buf[i] = 0x80 | (value & 0x7f) as u8;
        value >>= 7;
    }
    out.extend_from_slice(&buf[i..]);
}

pub const WRITE_VELOCITY: u8 = 64;

/// Writes a format-0 file with division `4 * ticks_per_sixteenth`, channel 0,
/// velocity 64. Note-offs precede note-ons on the same tick.
pub fn write_midi(score: &Score, ticks_per_sixteenth: u16) -> Result<Vec<u8>> {
    let division = ticks_per_sixteenth as u32 * 4;
    if ticks_per_sixteenth == 0 || division >= 0x8000 {
        return Err(Error::InvalidArgument(format!(
            "ticks per sixteenth must be in 1..=8191, got {ticks_per_sixteenth}"
        )));
    }
    let tps = ticks_per_sixteenth as u64;
    // (tick, 0 = off / 1 = on, pitch)
    let mut timeline: Vec<(u64, u8, u8)> = Vec::with_capacity(score.len() * 2);
    for n in score.notes() {
        timeline.push((n.start as u64 * tps, 1, n.pitch));
        timeline.push(((n.start as u64 + n.duration as u64) * tps, 0, n.pitch));
    }
    timeline.sort_unstable();
    if timeline.last().is_some_and(|e| e.0 > u32::MAX as u64) {
        return Err(Error::InvalidArgument("score too long for MIDI delta times".into()));
    }

    let mut track = Vec::with_capacity(timeline.len() * 4 + 4);
    let mut now = 0u64;
    for (tick, is_on, pitch) in timeline {
        push_vlq(&mut track, (tick - now) as u32);
        now = tick;
        if is_on == 1 {
            track.extend_from_slice(&[0x90, pitch, WRITE_VELOCITY]);
        } else {
            track.extend_from_slice(&[0x80, pitch, 0]);
        }
    }
    track.extend_from_slice(&[0x00, 0xff, 0x2f, 0x00]);

    let mut out = Vec::with_capacity(track.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&(division as u16).to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::Note;

    fn header(format: u16, tracks: u16, division: u16) -> Vec<u8> {
        let mut v = b"MThd".to_vec();
        v.extend_from_slice(&6u32.to_be_bytes());
        v.extend_from_slice(&format.to_be_bytes());
        v.extend_from_slice(&tracks.to_be_bytes());
        v.extend_from_slice(&division.to_be_bytes());
        v
    }

    fn track(body: &[u8]) -> Vec<u8> {
        let mut v = b"MTrk".to_vec();
        v.extend_from_slice(&(body.len() as u32).to_be_bytes());
        v.extend_from_slice(body);
        v
    }

    fn on(tick: u64, pitch: u8) -> MidiEvent {
        MidiEvent { tick, kind: NoteKind::On, pitch, velocity: 64 }
    }

    fn off(tick: u64, pitch: u8) -> MidiEvent {
        MidiEvent { tick, kind: NoteKind::Off, pitch, velocity: 0 }
    }

    #[test]
    fn reads_hand_built_file() {
        // delta 0, note-on ch0 60 vel 64; delta 480 (0x83 0x60), note-off 60; EOT
        let mut bytes = header(0, 1, 480);
        bytes.extend(track(&[0x00, 0x90, 60, 64, 0x83, 0x60, 0x80, 60, 0, 0x00, 0xff, 0x2f, 0x00]));
        let m = read_midi(&bytes).unwrap();
        assert_eq!(m.ticks_per_quarter, 480);
        assert_eq!(
            m.events,
            vec![
                on(0, 60),
                MidiEvent { tick: 480, kind: NoteKind::Off, pitch: 60, velocity: 0 }
            ]
        );
    }

    #[test]
    fn velocity_zero_is_note_off_and_running_status_works() {
        let mut bytes = header(0, 1, 96);
        bytes.extend(track(&[0x00, 0x91, 60, 100, 0x60, 60, 0, 0x00, 0xff, 0x2f, 0x00]));
        let m = read_midi(&bytes).unwrap();
        assert_eq!(m.events[1], MidiEvent { tick: 96, kind: NoteKind::Off, pitch: 60, velocity: 0 });
    }

    #[test]
    fn empty_track() {
        let mut bytes = header(0, 1, 96);
        bytes.extend(track(&[0x00, 0xff, 0x2f, 0x00]));
        assert!(read_midi(&bytes).unwrap().events.is_empty());
    }

    #[test]
    fn structured_errors() {
        assert!(matches!(read_midi(b"RIFF0000"), Err(Error::Midi { offset: 0, .. })));
        assert!(matches!(read_midi(b""), Err(Error::Midi { .. })));
        let smpte = header(0, 1, 0xe728);
        assert!(read_midi(&smpte).unwrap_err().to_string().contains("SMPTE"));

        let mut underflow = header(0, 1, 96);
        underflow.extend(track(&[0x00, 60, 64]));
        let err = read_midi(&underflow).unwrap_err();
        assert!(matches!(err, Error::Midi { offset: 23, .. }), "{err}");

        let mut truncated = header(0, 1, 96);
        truncated.extend(track(&[0x00, 0x90, 60, 64]));
        truncated.truncate(truncated.len() - 2);
        assert!(matches!(read_midi(&truncated), Err(Error::Midi { .. })));

        let mut short_event = header(0, 1, 96);
        short_event.extend(track(&[0x00, 0x90, 60]));
        assert!(matches!(read_midi(&short_event), Err(Error::Midi { .. })));
    }

    #[test]
    fn merges_format1_tracks_and_skips_meta() {
        let mut bytes = header(1, 2, 96);
        // tempo meta then nothing
        bytes.extend(track(&[0x00, 0xff, 0x51, 0x03, 0x07, 0xa1, 0x20, 0x00, 0xff, 0x2f, 0x00]));
        bytes.extend(track(&[
            0x00, 0xb0, 64, 127, // pedal, ignored
            0x00, 0x90, 64, 80, 0x30, 0x80, 64, 0, 0x00, 0xff, 0x2f, 0x00,
        ]));
        let m = read_midi(&bytes).unwrap();
        assert_eq!(m.events.len(), 2);
        assert_eq!(m.end_tick, 0x30);
    }

    #[test]
    fn vlq_encoding_matches_smf_table() {
        let cases: [(u32, &[u8]); 6] = [
            (0, &[0x00]),
            (0x40, &[0x40]),
            (0x7f, &[0x7f]),
            (0x80, &[0x81, 0x00]),
            (0x2000, &[0xc0, 0x00]),
            (0x0fff_ffff, &[0xff, 0xff, 0xff, 0x7f]),
        ];
        for (v, enc) in cases {
            let mut out = Vec::new();
            push_vlq(&mut out, v);
            assert_eq!(out, enc);
            assert_eq!(Cursor::new(enc, 0).vlq().unwrap(), v);
        }
    }

    fn file(events: Vec<MidiEvent>, end_tick: u64) -> MidiFile {
        MidiFile { ticks_per_quarter: 480, events, end_tick }
    }

    fn raw(onset: i64, offset: i64, pitch: i32) -> RawNoteEvent {
        RawNoteEvent { onset, offset, pitch }
    }

    #[test]
    fn pairs_direct() {
        let (ev, diag) = to_note_events(&file(vec![on(0, 60), off(480, 60)], 480));
        assert_eq!(ev, vec![raw(0, 480, 60)]);
        assert_eq!(diag, PairingDiagnostics::default());
    }

    #[test]
    fn pairs_restrike() {
        let (ev, diag) = to_note_events(&file(vec![on(0, 60), on(240, 60), off(480, 60)], 480));
        assert_eq!(ev, vec![raw(0, 240, 60), raw(240, 480, 60)]);
        assert_eq!(diag.restrikes, 1);
        // brute-force interval check: no two intervals of one pitch overlap
        for (i, a) in ev.iter().enumerate() {
            for b in &ev[i + 1..] {
                assert!(a.pitch != b.pitch || a.offset <= b.onset || b.offset <= a.onset);
            }
        }
    }

    #[test]
    fn closes_unmatched_at_end() {
        let (ev, diag) = to_note_events(&file(vec![on(0, 60)], 960));
        assert_eq!(ev, vec![raw(0, 960, 60)]);
        assert_eq!(diag.unmatched_on, 1);
        let (_, diag) = to_note_events(&file(vec![off(5, 61)], 960));
        assert_eq!(diag.orphan_off, 1);
    }

    #[test]
    fn write_empty_score() {
        let bytes = write_midi(&Score::new(), 120).unwrap();
        let m = read_midi(&bytes).unwrap();
        assert!(m.events.is_empty());
        assert_eq!(m.ticks_per_quarter, 480);
        assert_eq!(&bytes[bytes.len() - 4..], &[0x00, 0xff, 0x2f, 0x00]);
    }

    #[test]
    fn write_grid_arithmetic() {
        let s = Score::from_notes(vec![Note { start: 16, pitch: 72, duration: 6 }]);
        let m = read_midi(&write_midi(&s, 120).unwrap()).unwrap();
        assert_eq!(m.events.len(), 2);
        assert_eq!((m.events[0].kind, m.events[0].tick), (NoteKind::On, 1920));
        assert_eq!((m.events[1].kind, m.events[1].tick), (NoteKind::Off, 2640));
        assert_eq!(m.events[0].velocity, WRITE_VELOCITY);
    }

    #[test]
    fn write_rejects_bad_resolution() {
        assert!(write_midi(&Score::new(), 0).is_err());
        assert!(write_midi(&Score::new(), 8192).is_err());
    }
}
