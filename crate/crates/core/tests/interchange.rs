mod common;

use common::{note, task};
use contin_core::score::{emit_task, parse_task, ContinuationTask, Score};
use contin_core::Error;
use proptest::prelude::*;

proptest! {
    #[test]
    fn emit_parse_is_byte_stable(t in task()) {
        let text = emit_task(&t);
        let back = parse_task(&text).unwrap();
        prop_assert_eq!(&back, &t);
        prop_assert_eq!(emit_task(&back), text);
    }

    #[test]
    fn parser_never_panics(s in ".{0,200}") {
        let _ = parse_task(&s);
    }

    #[test]
    fn out_of_range_prompt_start_is_rejected(start in 80u32..10_000) {
        let text = format!(r#"{{"prompt":[{{"start":{start},"pitch":60,"duration":1}}]}}"#);
        let is_range_error = matches!(parse_task(&text), Err(Error::RegionOutOfRange { index: 0, .. }));
        prop_assert!(is_range_error);
    }
}

#[test]
fn missing_generation_is_omitted_on_emit() {
    let t = ContinuationTask::new(Score::from_notes(vec![note(3, 60, 2)]), None).unwrap();
    let text = emit_task(&t);
    assert!(!text.contains("generation"));
    assert!(text.ends_with('\n'));
}

#[test]
fn unknown_keys_are_rejected() {
    assert!(parse_task(r#"{"prompt":[],"extra":1}"#).is_err());
    assert!(parse_task(r#"{"prompt":[{"start":0,"pitch":60,"duration":1,"velocity":9}]}"#).is_err());
    assert!(parse_task(r#"{"generation":[]}"#).is_err());
}
