use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use contin_core::midi::write_midi;
use contin_core::model::{ModelConfig, WeightSet};
use contin_core::remi::VOCAB_SIZE;
use contin_core::score::{parse_task, Note, Score};

const TASK: &str = r#"{
  "prompt": [
    {"start": 0, "pitch": 60, "duration": 4},
    {"start": 4, "pitch": 64, "duration": 4},
    {"start": 16, "pitch": 67, "duration": 8},
    {"start": 79, "pitch": 48, "duration": 16}
  ],
  "generation": [
    {"start": 80, "pitch": 72, "duration": 2},
    {"start": 200, "pitch": 30, "duration": 80}
  ]
}"#;

fn contin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_contin"))
        .current_dir(dir)
        .env_remove("CONTIN_WEIGHTS")
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stderr.is_empty(), "success path wrote to stderr");
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("task.json"), TASK).unwrap();
    let w = WeightSet::random_uniform(&ModelConfig::micro(1, 16, 32, VOCAB_SIZE, 2, 4), 0.5, 3).unwrap();
    fs::write(dir.path().join("w.rwkt"), w.to_bytes()).unwrap();
    dir
}

#[test]
fn vocab_dump_has_228_lines() {
    let dir = setup();
    let text = ok(&contin(dir.path(), &["vocab", "dump"]));
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 228);
    assert_eq!(lines[3], "3\tBAR");
    assert_eq!(lines[227], "227\tDURATION_80");
}

#[test]
fn tokenize_detokenize_round_trip() {
    let dir = setup();
    ok(&contin(dir.path(), &["tokenize", "task.json", "--out", "toks.txt"]));
    ok(&contin(dir.path(), &["detokenize", "toks.txt", "--out", "back.json"]));
    let a = parse_task(TASK).unwrap();
    let b = parse_task(&fs::read_to_string(dir.path().join("back.json")).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn strict_detokenize_reports_the_index() {
    let dir = setup();
    fs::write(dir.path().join("bad.txt"), "BOS BAR PITCH_60 DURATION_4\n").unwrap();
    let out = contin(dir.path(), &["detokenize", "bad.txt"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("token 2"), "{}", stderr(&out));
    let out = contin(dir.path(), &["detokenize", "--lenient", "bad.txt"]);
    ok(&out);
}

#[test]
fn midi_json_round_trip() {
    let dir = setup();
    ok(&contin(dir.path(), &["json2midi", "task.json", "t.mid", "--ticks-per-sixteenth", "30"]));
    ok(&contin(dir.path(), &["midi2json", "t.mid", "back.json"]));
    let back = parse_task(&fs::read_to_string(dir.path().join("back.json")).unwrap()).unwrap();
    assert_eq!(back, parse_task(TASK).unwrap());
}

#[test]
fn empty_prompt_gives_valid_midi() {
    let dir = setup();
    fs::write(dir.path().join("empty.json"), r#"{"prompt": []}"#).unwrap();
    ok(&contin(dir.path(), &["json2midi", "empty.json", "e.mid"]));
    ok(&contin(dir.path(), &["midi2json", "e.mid", "e.json"]));
    let t = parse_task(&fs::read_to_string(dir.path().join("e.json")).unwrap()).unwrap();
    assert!(t.prompt().is_empty() && t.generation().is_none());
}

#[test]
fn smpte_midi_is_rejected() {
    let dir = setup();
    let mut bytes = write_midi(&Score::new(), 24).unwrap();
    bytes[12] = 0xE7; // -25 fps
    bytes[13] = 40;
    fs::write(dir.path().join("smpte.mid"), bytes).unwrap();
    let out = contin(dir.path(), &["midi2json", "smpte.mid", "x.json"]);
    assert_ne!(code(&out), 0);
    assert!(stderr(&out).to_lowercase().contains("smpte"), "{}", stderr(&out));
}

#[test]
fn continue_writes_named_samples() {
    let dir = setup();
    ok(&contin(dir.path(), &["continue", "task.json", "out", "4", "--weights", "w.rwkt", "--seed", "3"]));
    for i in 0..4 {
        let text = fs::read_to_string(dir.path().join(format!("out/sample_{i}.json"))).unwrap();
        let t = parse_task(&text).unwrap();
        assert_eq!(t.prompt(), parse_task(TASK).unwrap().prompt());
        assert!(t.generation().unwrap().notes().iter().all(|n| (80..=271).contains(&n.start)));
    }
    assert_eq!(fs::read_dir(dir.path().join("out")).unwrap().count(), 4);
}

#[test]
fn continue_reads_weights_from_the_environment() {
    let dir = setup();
    let out = Command::new(env!("CARGO_BIN_EXE_contin"))
        .current_dir(dir.path())
        .env("CONTIN_WEIGHTS", dir.path().join("w.rwkt"))
        .args(["continue", "task.json", "out", "1"])
        .output()
        .unwrap();
    ok(&out);
    assert!(dir.path().join("out/sample_0.json").exists());
}

#[test]
fn continue_with_zero_samples_only_creates_the_directory() {
    let dir = setup();
    ok(&contin(dir.path(), &["continue", "task.json", "nested/out", "0", "--weights", "w.rwkt"]));
    assert_eq!(fs::read_dir(dir.path().join("nested/out")).unwrap().count(), 0);
}

#[test]
fn continue_exit_codes() {
    let dir = setup();
    let out = contin(dir.path(), &["continue", "missing.json", "out", "1", "--weights", "w.rwkt"]);
    assert_eq!(code(&out), 2);
    fs::write(dir.path().join("late.json"), r#"{"prompt":[{"start":80,"pitch":60,"duration":1}]}"#).unwrap();
    let out = contin(dir.path(), &["continue", "late.json", "out", "1", "--weights", "w.rwkt"]);
    assert_eq!(code(&out), 3);
    let out = contin(dir.path(), &["continue", "task.json", "out", "1", "--weights", "nope.rwkt"]);
    assert_eq!(code(&out), 4);
    fs::write(dir.path().join("junk.rwkt"), b"RWKT\x01\x00").unwrap();
    let out = contin(dir.path(), &["continue", "task.json", "out", "1", "--weights", "junk.rwkt"]);
    assert_eq!(code(&out), 4);
    let out = contin(dir.path(), &["continue", "task.json", "out", "1"]);
    assert_eq!(code(&out), 4);
    let out = contin(dir.path(), &["continue", "task.json", "out", "1", "--weights", "w.rwkt", "--temperature", "0"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("temperature"));
}

#[test]
fn inspect_weights_lists_tensors() {
    let dir = setup();
    let text = ok(&contin(dir.path(), &["inspect-weights", "w.rwkt"]));
    assert!(text.contains("emb.weight\t[228, 16]"));
    assert!(text.contains("layers 1 d_model 16"));
}

fn write_corpus(dir: &Path) {
    let notes: Vec<Note> = (0..64u32).map(|q| Note::new(q * 4, 60 + (q % 5) as u8, 4).unwrap()).collect();
    let bytes = write_midi(&Score::from_notes(notes), 24).unwrap();
    fs::write(dir.join("piece.mid"), bytes).unwrap();
    fs::write(dir.join("manifest.tsv"), "piece\t0.95\tpiece.mid\nlow\t0.2\tpiece.mid\n").unwrap();
}

#[test]
fn train_toy_writes_checkpoint_and_curve() {
    let dir = setup();
    write_corpus(dir.path());
    fs::write(
        dir.path().join("cfg.toml"),
        "[model]\nn_layers = 1\nd_model = 16\nd_ffn = 32\nn_heads = 1\nrank = 4\n[train]\ntotal_steps = 5\nseq_len = 64\n[corpus]\nholdout = 0.0\n",
    )
    .unwrap();
    let text = ok(&contin(dir.path(), &["train-toy", "manifest.tsv", "cfg.toml", "--out", "run"]));
    assert!(text.contains("1 kept, 1 below threshold"), "{text}");
    let curve = fs::read_to_string(dir.path().join("run/loss_curve.tsv")).unwrap();
    let lines: Vec<&str> = curve.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0].split('\t').count(), 3);
    assert!(lines[0].starts_with("0\t1e-4\t"));
    let info = ok(&contin(dir.path(), &["inspect-weights", "run/checkpoint.rwkt"]));
    assert!(info.contains("layers 1 d_model 16"));
}

#[test]
fn train_toy_without_data_exits_3() {
    let dir = setup();
    fs::write(dir.path().join("empty.tsv"), "").unwrap();
    fs::write(dir.path().join("cfg.toml"), "").unwrap();
    let out = contin(dir.path(), &["train-toy", "empty.tsv", "cfg.toml"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("no training data"));
}

#[test]
fn train_toy_bad_config_names_the_field() {
    let dir = setup();
    write_corpus(dir.path());
    for (cfg, field) in [
        ("[train]\nlr_max = -1.0\n", "lr_max"),
        ("[train]\nweight_decay = -0.5\n", "weight_decay"),
        ("[model]\nn_heads = 0\n", "n_heads"),
        ("[train]\nlearning_rate = 1.0\n", "learning_rate"),
        ("[corpus]\nholdout = 1.5\n", "holdout"),
    ] {
        fs::write(dir.path().join("bad.toml"), cfg).unwrap();
        let out = contin(dir.path(), &["train-toy", "manifest.tsv", "bad.toml"]);
        assert_eq!(code(&out), 2, "{cfg}");
        assert!(stderr(&out).contains(field), "{cfg}: {}", stderr(&out));
    }
}
