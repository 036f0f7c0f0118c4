//! Logit post-processing, grammar-masked sampling and the continuation loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Model, WeightSet};
use crate::remi::{decode, encode, DecodeMode, EncodeOptions, GrammarState, TokenId, TokenSet};
use crate::score::{ContinuationTask, Score, GENERATION_FIRST_START, GENERATION_LAST_START, PROMPT_BARS};

/// Slack on the nucleus threshold so that a prefix summing to exactly
/// `top_p` is not lost to rounding.
pub const TOP_P_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerParams {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: Option<usize>,
    pub repetition_penalty: f64,
    pub penalty_window: usize,
    pub seed: u64,
}

impl Default for SamplerParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 0.95,
            top_k: Some(40),
            repetition_penalty: 1.0,
            penalty_window: 64,
            seed: 0,
        }
    }
}

impl SamplerParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidArgument(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        if self.top_k == Some(0) {
            return Err(Error::InvalidArgument("top_k must be at least 1".into()));
        }
        if !(self.repetition_penalty >= 1.0 && self.repetition_penalty.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "repetition_penalty must be >= 1, got {}",
                self.repetition_penalty
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerationBudget {
    pub target_bars: u32,
    /// Hard cap on generated tokens.
    pub max_tokens: usize,
}

impl Default for GenerationBudget {
    fn default() -> Self {
        Self { target_bars: crate::score::GENERATION_BARS, max_tokens: 2048 }
    }
}

impl GenerationBudget {
    pub fn validate(&self) -> Result<()> {
        if self.target_bars == 0 || self.max_tokens < self.target_bars as usize {
            return Err(Error::InvalidArgument(format!(
                "budget needs target_bars >= 1 and max_tokens >= target_bars, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Tokens one bar may use, its `BAR` included.
    pub fn per_bar(&self) -> usize {
        self.max_tokens / self.target_bars as usize
    }
}

/// Order used wherever ids are ranked: higher value first, lower id on ties.
fn rank_desc(values: &[f64], ids: &mut [usize]) {
    ids.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
}

/// Turns raw logits into a sampling distribution.
///
/// Stages: mask ids outside `legal`; apply the repetition penalty to legal ids
/// seen in `recent` (positive logits divided, others multiplied); divide by
/// temperature; keep the `top_k` best; keep the smallest descending-probability
/// prefix reaching `top_p`; renormalize.
pub fn transform_logits(
    logits: &[f32],
    recent: &[TokenId],
    params: &SamplerParams,
    legal: &TokenSet,
) -> Result<Vec<f64>> {
    let mut z: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let legal_here = TokenId::new(i as u32).is_some_and(|t| legal.contains(t));
            if legal_here { l as f64 } else { f64::NEG_INFINITY }
        })
        .collect();
    let mut alive: Vec<usize> = (0..z.len()).filter(|&i| z[i].is_finite()).collect();
    if alive.is_empty() {
        return Err(Error::GrammarDeadEnd);
    }

    if params.repetition_penalty != 1.0 {
        let mut seen = vec![false; z.len()];
        for t in recent {
            let i = t.index();
            if i < z.len() && !seen[i] && z[i].is_finite() {
                seen[i] = true;
                z[i] = if z[i] > 0.0 { z[i] / params.repetition_penalty } else { z[i] * params.repetition_penalty };
            }
        }
    }

    for &i in &alive {
        z[i] /= params.temperature;
    }

    rank_desc(&z, &mut alive);
    if let Some(k) = params.top_k {
        alive.truncate(k.max(1));
    }

    let max = z[alive[0]];
    let mut probs = vec![0.0f64; z.len()];
    let mut total = 0.0;
    for &i in &alive {
        probs[i] = (z[i] - max).exp();
        total += probs[i];
    }
    for &i in &alive {
        probs[i] /= total;
    }
    // `alive` is already in descending-probability order.
    let mut cum = 0.0;
    let mut keep = alive.len();
    for (n, &i) in alive.iter().enumerate() {
        cum += probs[i];
        if cum + TOP_P_EPS >= params.top_p {
            keep = n + 1;
            break;
        }
    }
    for &i in &alive[keep..] {
        probs[i] = 0.0;
    }
    let total: f64 = alive[..keep].iter().map(|&i| probs[i]).sum();
    for &i in &alive[..keep] {
        probs[i] /= total;
    }
    Ok(probs)
}

/// Inverse-CDF draw over ids in ascending order.
pub fn sample_token<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> TokenId {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last_nonzero = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        last_nonzero = i;
        cum += p;
        if u < cum {
            return TokenId::new(i as u32).expect("probability vector longer than vocabulary");
        }
    }
    TokenId::new(last_nonzero as u32).expect("probability vector longer than vocabulary")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Continuation {
    /// Notes with starts in the generation region.
    pub score: Score,
    /// Sampled tokens, starting with the first new `BAR`.
    pub tokens: Vec<TokenId>,
    pub bars: u32,
    /// The token cap was hit before the bar target.
    pub truncated: bool,
}

/// Samples a continuation of `task`'s prompt.
///
/// The prompt is fed as five bars (pickup included). Sampling is restricted
/// to grammatical tokens and starts with a fresh bar. Each bar may use at most
/// [`GenerationBudget::per_bar`] tokens; once a bar cannot fit another note it
/// is closed. The stream ends when the model would open a bar beyond the
/// target, or when the last bar fills up.
pub fn generate_continuation(
    w: &WeightSet,
    task: &ContinuationTask,
    params: &SamplerParams,
    budget: &GenerationBudget,
) -> Result<Continuation> {
    params.validate()?;
    budget.validate()?;
    let model = Model::new(w);
    if model.config().vocab_size != crate::remi::VOCAB_SIZE {
        return Err(Error::Config(format!(
            "model vocabulary is {}, tokenizer needs {}",
            model.config().vocab_size,
            crate::remi::VOCAB_SIZE
        )));
    }
    let mut context = encode(task.prompt(), PROMPT_BARS, EncodeOptions::default())?;
    let mut state = model.new_state();
    let mut logits = model.prefill(&mut state, &context)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let per_bar = budget.per_bar();
    let mut grammar = GrammarState::new();
    let mut tokens = Vec::new();
    let mut in_bar = 0usize;
    let mut truncated = false;
    loop {
        if tokens.len() >= budget.max_tokens {
            truncated = grammar.bars_emitted < budget.target_bars;
            break;
        }
        let bar_full = grammar.bars_emitted > 0 && in_bar + 3 > per_bar && grammar.at_boundary();
        let legal = if bar_full {
            if grammar.bars_emitted >= budget.target_bars {
                break;
            }
            TokenSet::only(TokenId::BAR)
        } else {
            grammar.legal_next()
        };
        let recent = &context[context.len().saturating_sub(params.penalty_window)..];
        let probs = transform_logits(&logits, recent, params, &legal)?;
        let t = sample_token(&probs, &mut rng);
        if t == TokenId::BAR {
            if grammar.bars_emitted >= budget.target_bars {
                break;
            }
            in_bar = 0;
        }
        grammar = grammar.advance(t)?;
        in_bar += 1;
        tokens.push(t);
        context.push(t);
        logits = model.step(&mut state, t)?;
    }
    // a capped stream may stop mid-note; drop the dangling tokens
    while !grammar_boundary(&tokens) {
        tokens.pop();
    }
    let decoded = decode(&tokens, GENERATION_FIRST_START, DecodeMode::Strict)?;
    let score = decoded
        .score
        .into_notes()
        .into_iter()
        .filter(|n| n.start <= GENERATION_LAST_START)
        .collect();
    Ok(Continuation { score, tokens, bars: decoded.bars, truncated })
}

fn grammar_boundary(tokens: &[TokenId]) -> bool {
    let mut g = GrammarState::new();
    for &t in tokens {
        g = g.advance(t).expect("generated tokens are grammatical");
    }
    g.at_boundary()
}
