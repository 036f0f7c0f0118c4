//! Desk-scale training: next-token cross-entropy, exact reverse-mode
//! gradients in double precision, Adam with decoupled weight decay and a
//! cosine learning-rate schedule.

mod backprop;
mod loss;
mod mat;
mod optim;
mod params;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

pub use loss::cross_entropy;
pub use optim::{adam_step, lr_at, OptimState};
pub use params::Params;

use crate::corpus::TrainingWindow;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, WeightSet};
use crate::remi::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Maximum tokens per training sequence; longer windows are cropped.
    pub seq_len: usize,
    pub total_steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-4,
            lr_min: 1e-5,
            weight_decay: 0.1,
            batch_size: 4,
            seq_len: 256,
            total_steps: 1000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Rejects out-of-range values; the message starts with the field name.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::InvalidArgument(format!("{field}: {why}")));
        let finite = [
            ("lr_max", self.lr_max),
            ("lr_min", self.lr_min),
            ("weight_decay", self.weight_decay),
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
            ("adam_eps", self.adam_eps),
        ];
        if let Some((f, _)) = finite.iter().find(|(_, v)| !v.is_finite()) {
            return bad(f, "must be finite");
        }
        if self.lr_min <= 0.0 {
            return bad("lr_min", "must be positive");
        }
        if self.lr_max < self.lr_min {
            return bad("lr_max", "must be at least lr_min");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay", "must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.seq_len < 2 {
            return bad("seq_len", "must be at least 2");
        }
        if !(self.adam_beta1 > 0.0 && self.adam_beta1 < 1.0) {
            return bad("adam_beta1", "must lie in (0, 1)");
        }
        if !(self.adam_beta2 > 0.0 && self.adam_beta2 < 1.0) {
            return bad("adam_beta2", "must lie in (0, 1)");
        }
        if self.adam_eps <= 0.0 {
            return bad("adam_eps", "must be positive");
        }
        Ok(())
    }
}

/// Mean next-token loss over a batch and its gradient with respect to every
/// parameter. Each sequence predicts `seq[1..]` from `seq[..n-1]`; padding
/// targets are excluded from the mean.
pub fn grad(params: &Params, batch: &[Vec<TokenId>]) -> Result<(f64, Params)> {
    let vocab = params.config.vocab_size;
    for seq in batch {
        if let Some((i, t)) = seq.iter().enumerate().find(|(_, t)| t.index() >= vocab) {
            return Err(Error::TokenOutOfRange { index: i, id: t.id() as u32 });
        }
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let mut per_seq = Vec::with_capacity(batch.len());
    for seq in batch.iter().filter(|s| s.len() >= 2) {
        let n = seq.len();
        let cache = backprop::forward(params, &seq[..n - 1]);
        let (l, c, dlogits) = loss::loss_sum_and_grad(&cache.logits, &seq[1..]);
        total += l;
        count += c;
        per_seq.push((cache, dlogits));
    }
    if count == 0 {
        return Err(Error::AllPadding);
    }
    let scale = 1.0 / count as f64;
    let mut grads = params.zeros_like();
    for (cache, mut dlogits) in per_seq {
        dlogits.data.iter_mut().for_each(|v| *v *= scale);
        backprop::backward(params, &cache, &dlogits, &mut grads);
    }
    Ok((total * scale, grads))
}

/// Per-token logits from the training forward pass, for cross-checks.
pub fn forward_logits(params: &Params, tokens: &[TokenId]) -> Vec<Vec<f64>> {
    let cache = backprop::forward(params, tokens);
    (0..cache.logits.rows).map(|t| cache.logits.row(t).to_vec()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub lr: f64,
    /// Batch loss before the update at this step.
    pub loss: f64,
}

impl CurvePoint {
    /// `step<TAB>lr<TAB>loss`.
    pub fn to_line(&self) -> String {
        format!("{}\t{:e}\t{}", self.step, self.lr, self.loss)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Params,
    pub curve: Vec<CurvePoint>,
}

impl TrainOutcome {
    pub fn weights(&self) -> Result<WeightSet> {
        self.params.to_weights()
    }
}

fn crop<R: Rng + ?Sized>(tokens: &[TokenId], seq_len: usize, rng: &mut R) -> Vec<TokenId> {
    if tokens.len() <= seq_len {
        return tokens.to_vec();
    }
    let start = rng.random_range(0..=tokens.len() - seq_len);
    tokens[start..start + seq_len].to_vec()
}

/// Training loop over windows supplied per epoch by `draw(epoch)`.
///
/// Each epoch's windows are shuffled and cut into batches; windows longer
/// than `seq_len` get a random crop and shorter ones are right-padded with
/// PAD to the batch maximum. `on_step` sees every curve point as it is
/// produced.
pub fn train(
    mut draw: impl FnMut(usize) -> Vec<TrainingWindow>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&CurvePoint),
) -> Result<TrainOutcome> {
    model.validate()?;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = Params::init(model, cfg.seed);
    let mut opt = OptimState::new(&params);
    let mut curve = Vec::with_capacity(cfg.total_steps);
    let mut epoch = 0;
    let mut pending: Vec<TrainingWindow> = draw(epoch);
    if pending.is_empty() {
        return Err(Error::NoTrainingData);
    }
    pending.shuffle(&mut rng);
    for step in 0..cfg.total_steps {
        if pending.is_empty() {
            epoch += 1;
            pending = draw(epoch);
            if pending.is_empty() {
                return Err(Error::NoTrainingData);
            }
            pending.shuffle(&mut rng);
        }
        let take = cfg.batch_size.min(pending.len());
        let mut batch: Vec<Vec<TokenId>> =
            pending.drain(..take).map(|w| crop(&w.tokens, cfg.seq_len, &mut rng)).collect();
        let longest = batch.iter().map(Vec::len).max().unwrap_or(0);
        batch.iter_mut().for_each(|s| s.resize(longest, TokenId::PAD));

        let lr = lr_at(step, cfg.total_steps, cfg);
        let (loss, g) = match grad(&params, &batch) {
            Ok(v) => v,
            Err(Error::AllPadding) => continue,
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let point = CurvePoint { step, lr, loss };
        on_step(&point);
        curve.push(point);
        adam_step(&mut params, &g, &mut opt, lr, cfg).map_err(|e| match e {
            Error::NonFiniteGradient(_) => Error::Diverged { step, loss },
            e => e,
        })?;
    }
    Ok(TrainOutcome { params, curve })
}

/// Trains on a fixed set of windows, reused every epoch.
pub fn train_toy(
    windows: &[TrainingWindow],
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(WeightSet, Vec<CurvePoint>)> {
    let out = train(|_| windows.to_vec(), model, cfg, |_| {})?;
    Ok((out.weights()?, out.curve))
}
