use std::fs;
use std::path::Path;

use serde::Deserialize;

use contin_core::corpus::{filter_corpus, load_entry, parse_manifest, sample_windows, split, window_stats, DEFAULT_MAX_TRIES};
use contin_core::model::ModelConfig;
use contin_core::remi::VOCAB_SIZE;
use contin_core::train::{train, TrainConfig};
use contin_core::Error;

use crate::{read_text, write_file, CmdResult, Failure, EXIT_BAD_INPUT, EXIT_FAILURE, EXIT_INVALID_DATA};

pub(crate) const CHECKPOINT_FILE: &str = "checkpoint.rwkt";
pub(crate) const CURVE_FILE: &str = "loss_curve.tsv";

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ModelSection {
    n_layers: usize,
    d_model: usize,
    d_ffn: usize,
    n_heads: usize,
    /// Width of every low-rank generator; omitted means the usual sizing rule.
    rank: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { n_layers: 2, d_model: 64, d_ffn: 256, n_heads: 2, rank: Some(16) }
    }
}

impl ModelSection {
    fn config(&self) -> ModelConfig {
        match self.rank {
            Some(r) => ModelConfig::micro(self.n_layers, self.d_model, self.d_ffn, VOCAB_SIZE, self.n_heads, r),
            None => ModelConfig::with_default_ranks(self.n_layers, self.d_model, self.d_ffn, VOCAB_SIZE, self.n_heads),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CorpusSection {
    /// Validation fraction; 0 trains on everything.
    holdout: f64,
    salt: String,
    max_tries: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self { holdout: 0.10, salt: String::new(), max_tries: DEFAULT_MAX_TRIES }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainToyConfig {
    model: ModelSection,
    train: TrainConfig,
    corpus: CorpusSection,
}

fn bad(e: impl std::fmt::Display) -> Failure {
    Failure::new(EXIT_BAD_INPUT, e)
}

fn load_config(path: &Path) -> Result<TrainToyConfig, Failure> {
    let text = read_text(path)?;
    let cfg: TrainToyConfig = toml::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    cfg.model.config().validate().map_err(|e| bad(format!("model.{}", e.to_string().trim_start_matches("invalid model config: "))))?;
    cfg.train.validate().map_err(|e| bad(format!("train.{}", e.to_string().trim_start_matches("invalid argument: "))))?;
    if !(0.0..1.0).contains(&cfg.corpus.holdout) {
        return Err(bad(format!("corpus.holdout: must lie in [0, 1), got {}", cfg.corpus.holdout)));
    }
    if cfg.corpus.max_tries == 0 {
        return Err(bad("corpus.max_tries: must be positive"));
    }
    Ok(cfg)
}

pub(crate) fn run(manifest_path: &Path, config_path: &Path, out: &Path) -> CmdResult {
    let cfg = load_config(config_path)?;
    let manifest = parse_manifest(&read_text(manifest_path)?).map_err(|e| bad(format!("{}: {e}", manifest_path.display())))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let entries = manifest
        .iter()
        .map(|r| load_entry(r, base).map_err(|e| bad(format!("{}: {e}", r.path.display()))))
        .collect::<Result<Vec<_>, _>>()?;
    let (kept, stats) = filter_corpus(entries);
    let train_set = if cfg.corpus.holdout > 0.0 {
        split(kept, cfg.corpus.holdout, &cfg.corpus.salt).map_err(bad)?.0
    } else {
        kept
    };
    println!(
        "corpus: {} kept, {} below threshold, {} without score, {} for training",
        stats.kept,
        stats.below_threshold,
        stats.missing_score,
        train_set.len()
    );
    let no_data = || Failure::new(EXIT_INVALID_DATA, "no training data");
    if train_set.is_empty() {
        return Err(no_data());
    }
    let first = sample_windows(&train_set, cfg.train.seed, cfg.corpus.max_tries);
    if let Some(s) = window_stats(&first) {
        println!(
            "windows: {} (tokens min {} p10 {} median {} p90 {} max {})",
            s.count, s.min, s.p10, s.median, s.p90, s.max
        );
    }

    fs::create_dir_all(out).map_err(|e| Failure::new(EXIT_FAILURE, format!("cannot create {}: {e}", out.display())))?;
    let mut first = Some(first);
    let draw = |epoch: usize| {
        first.take().filter(|_| epoch == 0).unwrap_or_else(|| {
            sample_windows(&train_set, cfg.train.seed.wrapping_add(epoch as u64), cfg.corpus.max_tries)
        })
    };
    let outcome = train(draw, &cfg.model.config(), &cfg.train, |_| {}).map_err(|e| match e {
        Error::NoTrainingData => no_data(),
        e => Failure::new(EXIT_FAILURE, e),
    })?;
    let curve: String = outcome.curve.iter().map(|p| p.to_line() + "\n").collect();
    write_file(&out.join(CURVE_FILE), curve)?;
    let weights = outcome.weights().map_err(|e| Failure::new(EXIT_FAILURE, e))?;
    write_file(&out.join(CHECKPOINT_FILE), weights.to_bytes())?;
    if let Some(last) = outcome.curve.last() {
        println!("step {} loss {:.6}", last.step, last.loss);
    }
    println!("wrote {} and {}", out.join(CHECKPOINT_FILE).display(), out.join(CURVE_FILE).display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let cfg: TrainToyConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.corpus.holdout, 0.10);
        assert_eq!(cfg.model.config(), ModelConfig::micro(2, 64, 256, VOCAB_SIZE, 2, 16));
    }

    #[test]
    fn sections_override_and_unknown_keys_fail() {
        let cfg: TrainToyConfig = toml::from_str("[model]\nd_model = 384\nrank = 64\n[train]\nbatch_size = 32\n").unwrap();
        assert_eq!(cfg.model.config().d_model, 384);
        assert_eq!(cfg.model.config().gate_rank, 64);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.train.lr_max, 1e-4);
        let err = toml::from_str::<TrainToyConfig>("[train]\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn omitted_rank_uses_the_sizing_rule() {
        let cfg: TrainToyConfig =
            toml::from_str("[model]\nn_layers = 12\nd_model = 384\nd_ffn = 1536\nn_heads = 6\nrank = 32\n").unwrap();
        let mut m = cfg.model;
        m.rank = None;
        assert_eq!(m.config(), ModelConfig::paper());
    }
}
