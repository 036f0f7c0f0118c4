//! `contin`: continue piano prompts, inspect token streams and weights, and
//! run the toy trainer.

mod train_cmd;

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use contin_core::midi::{read_midi, to_note_events, write_midi};
use contin_core::model::{load_weights, read_manifest, WeightSet};
use contin_core::remi::{decode, encode, format_stream, parse_stream, vocab_table, DecodeMode, EncodeOptions};
use contin_core::sampler::{generate_continuation, GenerationBudget, SamplerParams};
use contin_core::score::{
    emit_task, parse_task, quantize, ContinuationTask, Score, TicksPerStep, GENERATION_BARS, GENERATION_FIRST_START,
    GENERATION_LAST_START, PROMPT_BARS,
};

/// Exit codes.
pub(crate) const EXIT_FAILURE: u8 = 1;
pub(crate) const EXIT_BAD_INPUT: u8 = 2;
pub(crate) const EXIT_INVALID_DATA: u8 = 3;
pub(crate) const EXIT_WEIGHTS: u8 = 4;

#[derive(Debug)]
pub(crate) struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub(crate) fn new(code: u8, message: impl Display) -> Self {
        Self { code, message: message.to_string() }
    }
}

pub(crate) type CmdResult = Result<(), Failure>;

#[derive(Parser)]
#[command(name = "contin", version, about = "Continue 4-measure piano prompts into 12 new measures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write N sampled continuations of a prompt to OUT_DIR/sample_<i>.json.
    Continue(ContinueArgs),
    /// Print the prompt (and generation, if present) as token streams.
    Tokenize {
        input: PathBuf,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Rebuild an interchange document from token streams.
    Detokenize {
        input: PathBuf,
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Skip ungrammatical tokens instead of failing.
        #[arg(long)]
        lenient: bool,
    },
    /// Quantize a MIDI file into an interchange document.
    Midi2json { input: PathBuf, output: PathBuf },
    /// Render an interchange document as a format-0 MIDI file.
    Json2midi {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, default_value_t = 120)]
        ticks_per_sixteenth: u16,
    },
    /// Vocabulary utilities.
    Vocab {
        #[command(subcommand)]
        action: VocabAction,
    },
    /// List the tensors in a weight file.
    InspectWeights { path: PathBuf },
    /// Train a small model on a corpus manifest.
    TrainToy {
        manifest: PathBuf,
        config: PathBuf,
        /// Directory for the checkpoint and loss curve.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum VocabAction {
    /// Print every token as `id<TAB>name`.
    Dump,
}

#[derive(Args)]
struct ContinueArgs {
    input: PathBuf,
    out_dir: PathBuf,
    n_sample: usize,
    /// Weight file in the RWKT container format.
    #[arg(long, env = "CONTIN_WEIGHTS")]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0.95)]
    top_p: f64,
    #[arg(long, default_value_t = 40)]
    top_k: usize,
    #[arg(long, default_value_t = 1.0)]
    rep_penalty: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Continue(args) => cmd_continue(&args),
        Command::Tokenize { input, out } => cmd_tokenize(&input, out.as_deref()),
        Command::Detokenize { input, out, lenient } => cmd_detokenize(&input, out.as_deref(), lenient),
        Command::Midi2json { input, output } => cmd_midi2json(&input, &output),
        Command::Json2midi { input, output, ticks_per_sixteenth } => cmd_json2midi(&input, &output, ticks_per_sixteenth),
        Command::Vocab { action: VocabAction::Dump } => cmd_vocab_dump(),
        Command::InspectWeights { path } => cmd_inspect_weights(&path),
        Command::TrainToy { manifest, config, out } => train_cmd::run(&manifest, &config, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

pub(crate) fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::new(EXIT_BAD_INPUT, format!("cannot read {}: {e}", path.display())))
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, contents).map_err(|e| Failure::new(EXIT_FAILURE, format!("cannot write {}: {e}", path.display())))
}

fn read_task(path: &Path) -> Result<ContinuationTask, Failure> {
    let text = read_text(path)?;
    parse_task(&text).map_err(|e| Failure::new(EXIT_INVALID_DATA, format!("{}: {e}", path.display())))
}

fn output(out: Option<&Path>, text: &str) -> CmdResult {
    match out {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_model(path: Option<&Path>) -> Result<WeightSet, Failure> {
    let Some(path) = path else {
        return Err(Failure::new(EXIT_WEIGHTS, "no weights: pass --weights or set CONTIN_WEIGHTS"));
    };
    let bytes = fs::read(path)
        .map_err(|e| Failure::new(EXIT_WEIGHTS, format!("cannot read weights {}: {e}", path.display())))?;
    load_weights(&bytes).map_err(|e| Failure::new(EXIT_WEIGHTS, format!("{}: {e}", path.display())))
}

fn cmd_continue(args: &ContinueArgs) -> CmdResult {
    let task = read_task(&args.input)?;
    let base = SamplerParams {
        temperature: args.temperature,
        top_p: args.top_p,
        top_k: Some(args.top_k),
        repetition_penalty: args.rep_penalty,
        ..SamplerParams::default()
    };
    base.validate().map_err(|e| Failure::new(EXIT_BAD_INPUT, e))?;
    let weights = load_model(args.weights.as_deref())?;
    if weights.config().vocab_size != contin_core::remi::VOCAB_SIZE {
        return Err(Failure::new(
            EXIT_WEIGHTS,
            format!("weights have vocabulary {}, expected {}", weights.config().vocab_size, contin_core::remi::VOCAB_SIZE),
        ));
    }
    fs::create_dir_all(&args.out_dir)
        .map_err(|e| Failure::new(EXIT_FAILURE, format!("cannot create {}: {e}", args.out_dir.display())))?;
    let budget = GenerationBudget::default();
    (0..args.n_sample).into_par_iter().try_for_each(|i| {
        let params = SamplerParams { seed: args.seed.wrapping_add(i as u64), ..base };
        let cont = generate_continuation(&weights, &task, &params, &budget)
            .map_err(|e| Failure::new(EXIT_FAILURE, format!("sample {i}: {e}")))?;
        let doc = task.with_generation(cont.score).map_err(|e| Failure::new(EXIT_FAILURE, e))?;
        write_file(&args.out_dir.join(format!("sample_{i}.json")), emit_task(&doc))
    })
}

fn cmd_tokenize(input: &Path, out: Option<&Path>) -> CmdResult {
    let task = read_task(input)?;
    let invalid = |e| Failure::new(EXIT_INVALID_DATA, e);
    let mut text = format_stream(&encode(task.prompt(), PROMPT_BARS, EncodeOptions::default()).map_err(invalid)?);
    text.push('\n');
    if let Some(g) = task.generation() {
        let rel: Score = g.notes().iter().map(|n| {
            let mut n = *n;
            n.start -= GENERATION_FIRST_START;
            n
        }).collect();
        let toks = encode(&rel, GENERATION_BARS, EncodeOptions::default()).map_err(invalid)?;
        text.push_str(&format_stream(&toks));
        text.push('\n');
    }
    output(out, &text)
}

fn cmd_detokenize(input: &Path, out: Option<&Path>, lenient: bool) -> CmdResult {
    let text = read_text(input)?;
    let mode = if lenient { DecodeMode::Lenient } else { DecodeMode::Strict };
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.is_empty() || lines.len() > 2 {
        return Err(Failure::new(EXIT_INVALID_DATA, format!("expected 1 or 2 token lines, found {}", lines.len())));
    }
    let mut scores = Vec::new();
    for (line, (name, base)) in lines.iter().zip([("prompt", 0), ("generation", GENERATION_FIRST_START)]) {
        let toks = parse_stream(line).map_err(|e| Failure::new(EXIT_INVALID_DATA, format!("{name}: {e}")))?;
        let d = decode(&toks, base, mode).map_err(|e| Failure::new(EXIT_INVALID_DATA, format!("{name}: {e}")))?;
        scores.push(d.score);
    }
    let mut it = scores.into_iter();
    let prompt = it.next().expect("at least one line");
    let task = ContinuationTask::new(prompt, it.next()).map_err(|e| Failure::new(EXIT_INVALID_DATA, e))?;
    output(out, &emit_task(&task))
}

fn cmd_midi2json(input: &Path, output_path: &Path) -> CmdResult {
    let bytes = fs::read(input).map_err(|e| Failure::new(EXIT_BAD_INPUT, format!("cannot read {}: {e}", input.display())))?;
    let invalid = |e: contin_core::Error| Failure::new(EXIT_INVALID_DATA, format!("{}: {e}", input.display()));
    let midi = read_midi(&bytes).map_err(invalid)?;
    let (events, _) = to_note_events(&midi);
    let tps = TicksPerStep::from_ticks_per_quarter(midi.ticks_per_quarter).map_err(invalid)?;
    let score = quantize(&events, tps).score;
    let prompt = score.slice(0, GENERATION_FIRST_START, false);
    let generation = score.slice(GENERATION_FIRST_START, GENERATION_LAST_START + 1, false);
    let dropped = score.len() - prompt.len() - generation.len();
    let generation = (!generation.is_empty()).then_some(generation);
    let task = ContinuationTask::new(prompt, generation).map_err(invalid)?;
    write_file(output_path, emit_task(&task))?;
    if dropped > 0 {
        println!("dropped {dropped} notes starting after step {GENERATION_LAST_START}");
    }
    Ok(())
}

fn cmd_json2midi(input: &Path, output_path: &Path, tps: u16) -> CmdResult {
    let task = read_task(input)?;
    let notes = task.prompt().notes().iter().chain(task.generation().map_or(&[][..], |g| g.notes())).copied().collect();
    let bytes = write_midi(&Score::from_notes(notes), tps).map_err(|e| Failure::new(EXIT_BAD_INPUT, e))?;
    write_file(output_path, bytes)
}

fn cmd_vocab_dump() -> CmdResult {
    let mut text = String::new();
    for (id, name) in vocab_table() {
        text.push_str(&format!("{id}\t{name}\n"));
    }
    print!("{text}");
    Ok(())
}

fn cmd_inspect_weights(path: &Path) -> CmdResult {
    let bytes = fs::read(path).map_err(|e| Failure::new(EXIT_BAD_INPUT, format!("cannot read {}: {e}", path.display())))?;
    let manifest = read_manifest(&bytes).map_err(|e| Failure::new(EXIT_WEIGHTS, format!("{}: {e}", path.display())))?;
    let mut text = String::new();
    let mut total = 0usize;
    for t in &manifest {
        let n: usize = t.shape.iter().product();
        total += n;
        text.push_str(&format!("{}\t{:?}\t{}\n", t.name, t.shape, n));
    }
    match load_weights(&bytes) {
        Ok(w) => {
            let c = w.config();
            text.push_str(&format!(
                "layers {} d_model {} d_ffn {} vocab {} heads {}\n",
                c.n_layers, c.d_model, c.d_ffn, c.vocab_size, c.n_heads
            ));
        }
        Err(e) => text.push_str(&format!("not loadable: {e}\n")),
    }
    text.push_str(&format!("{} tensors, {total} parameters\n", manifest.len()));
    print!("{text}");
    Ok(())
}
