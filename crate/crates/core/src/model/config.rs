use crate::error::{Error, Result};

/// Architecture dimensions.
///
/// The low-rank widths size the generators for decay, in-context rate, value
/// residual and output gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub n_heads: usize,
    pub decay_rank: usize,
    pub iclr_rank: usize,
    pub value_rank: usize,
    pub gate_rank: usize,
}

fn lora_rank(scale: f64, exponent: f64, d_model: usize) -> usize {
    let r = (scale * (d_model as f64).powf(exponent) / 32.0).round() as usize * 32;
    r.max(32)
}

impl ModelConfig {
    /// 12 layers, width 384, feed-forward 1536, 6 heads of 64.
    pub fn paper() -> Self {
        Self::with_default_ranks(12, 384, 1536, crate::remi::VOCAB_SIZE, 6)
    }

    /// Low-rank widths follow the usual sizing rule for this architecture:
    /// multiples of 32 scaled from `sqrt(d)` (decay, rate, value) and
    /// `d^0.8` (gate).
    pub fn with_default_ranks(
        n_layers: usize,
        d_model: usize,
        d_ffn: usize,
        vocab_size: usize,
        n_heads: usize,
    ) -> Self {
        Self {
            n_layers,
            d_model,
            d_ffn,
            vocab_size,
            n_heads,
            decay_rank: lora_rank(1.8, 0.5, d_model),
            iclr_rank: lora_rank(1.8, 0.5, d_model),
            value_rank: lora_rank(1.3, 0.5, d_model),
            gate_rank: lora_rank(0.6, 0.8, d_model),
        }
    }

    /// Small configuration with every low-rank width set to `rank`.
    pub fn micro(
        n_layers: usize,
        d_model: usize,
        d_ffn: usize,
        vocab_size: usize,
        n_heads: usize,
        rank: usize,
    ) -> Self {
        Self {
            n_layers,
            d_model,
            d_ffn,
            vocab_size,
            n_heads,
            decay_rank: rank,
            iclr_rank: rank,
            value_rank: rank,
            gate_rank: rank,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("vocab_size", self.vocab_size),
            ("n_heads", self.n_heads),
            ("decay_rank", self.decay_rank),
            ("iclr_rank", self.iclr_rank),
            ("value_rank", self.value_rank),
            ("gate_rank", self.gate_rank),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Names of the per-layer time-mix interpolation vectors, in use order.
pub const MIX_NAMES: [&str; 6] = ["x_r", "x_w", "x_k", "x_v", "x_a", "x_g"];

/// Every tensor the model expects, with its shape, in container order.
///
/// Matrices are stored input-major (`[in, out]`), so a projection is `x · W`.
pub fn tensor_schema(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut s: Vec<(String, Vec<usize>)> = vec![
        ("emb.weight".into(), vec![cfg.vocab_size, d]),
        ("ln0.weight".into(), vec![d]),
        ("ln0.bias".into(), vec![d]),
    ];
    for l in 0..cfg.n_layers {
        let p = |n: &str| format!("blocks.{l}.{n}");
        s.push((p("ln1.weight"), vec![d]));
        s.push((p("ln1.bias"), vec![d]));
        s.push((p("ln2.weight"), vec![d]));
        s.push((p("ln2.bias"), vec![d]));
        for m in MIX_NAMES {
            s.push((p(&format!("att.{m}")), vec![d]));
        }
        for (g, r) in [
            ("w", cfg.decay_rank),
            ("a", cfg.iclr_rank),
            ("v", cfg.value_rank),
        ] {
            s.push((p(&format!("att.{g}0")), vec![d]));
            s.push((p(&format!("att.{g}1")), vec![d, r]));
            s.push((p(&format!("att.{g}2")), vec![r, d]));
        }
        s.push((p("att.g1"), vec![d, cfg.gate_rank]));
        s.push((p("att.g2"), vec![cfg.gate_rank, d]));
        s.push((p("att.k_k"), vec![d]));
        s.push((p("att.k_a"), vec![d]));
        s.push((p("att.r_k"), vec![cfg.n_heads, cfg.head_dim()]));
        for proj in ["receptance", "key", "value", "output"] {
            s.push((p(&format!("att.{proj}.weight")), vec![d, d]));
        }
        s.push((p("att.ln_x.weight"), vec![d]));
        s.push((p("att.ln_x.bias"), vec![d]));
        s.push((p("ffn.x_k"), vec![d]));
        s.push((p("ffn.key.weight"), vec![d, cfg.d_ffn]));
        s.push((p("ffn.value.weight"), vec![cfg.d_ffn, d]));
    }
    s.push(("ln_out.weight".into(), vec![d]));
    s.push(("ln_out.bias".into(), vec![d]));
    s.push(("head.weight".into(), vec![d, cfg.vocab_size]));
    s
}

/// Total learned parameters implied by `cfg`.
pub fn schema_param_count(cfg: &ModelConfig) -> usize {
    tensor_schema(cfg).iter().map(|(_, shape)| shape.iter().product::<usize>()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_ranks() {
        let c = ModelConfig::paper();
        assert_eq!((c.decay_rank, c.iclr_rank, c.value_rank, c.gate_rank), (32, 32, 32, 64));
        assert_eq!(c.head_dim(), 64);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_uneven_heads() {
        assert!(ModelConfig::micro(1, 10, 8, 12, 3, 2).validate().is_err());
        assert!(ModelConfig::micro(0, 8, 8, 12, 2, 2).validate().is_err());
    }

    #[test]
    fn schema_names_unique() {
        let s = tensor_schema(&ModelConfig::micro(3, 8, 16, 12, 2, 2));
        let mut names: Vec<_> = s.iter().map(|(n, _)| n.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), s.len());
    }
}
