mod common;

use common::note;
use contin_core::midi::{read_midi, to_note_events, write_midi};
use contin_core::score::{quantize, Score, TicksPerStep};
use proptest::prelude::*;

/// Scores without two sounding notes of the same pitch at once, which a
/// note-on/note-off stream cannot represent.
fn playable() -> impl Strategy<Value = Score> {
    prop::collection::vec((0u32..300, 0u8..=127, 1u32..40), 0..60).prop_map(|raw| {
        let mut kept: Vec<contin_core::score::Note> = Vec::new();
        for (s, p, d) in raw {
            let clash = kept.iter().any(|n| n.pitch == p && s < n.start + n.duration && n.start < s + d);
            if !clash {
                kept.push(note(s, p, d));
            }
        }
        Score::from_notes(kept)
    })
}

proptest! {
    #[test]
    fn write_read_round_trip(s in playable(), tps in 1u16..480) {
        let bytes = write_midi(&s, tps).unwrap();
        let m = read_midi(&bytes).unwrap();
        prop_assert_eq!(m.ticks_per_quarter, tps * 4);
        let (events, diag) = to_note_events(&m);
        prop_assert_eq!(diag.restrikes + diag.unmatched_on + diag.orphan_off, 0);
        let q = quantize(&events, TicksPerStep::from_ticks_per_quarter(m.ticks_per_quarter).unwrap());
        prop_assert!(q.rejected.is_empty());
        prop_assert_eq!(q.score, s);
    }

    #[test]
    fn reader_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..400)) {
        let _ = read_midi(&bytes);
    }

    #[test]
    fn reader_survives_corruption(s in playable(), flips in prop::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 1..8), cut in any::<prop::sample::Index>()) {
        let mut bytes = write_midi(&s, 24).unwrap();
        for (i, b) in flips {
            let i = i.index(bytes.len());
            bytes[i] = b;
        }
        let _ = read_midi(&bytes);
        let n = cut.index(bytes.len() + 1);
        if let Err(contin_core::Error::Midi { offset, .. }) = read_midi(&bytes[..n]) {
            prop_assert!(offset <= n);
        }
    }
}
