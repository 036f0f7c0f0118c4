//! Single-precision forward evaluation.
//!
//! Each block is pre-norm: a time-mix sublayer with a per-head matrix state
//! updated by decay plus a delta-rule correction, then a squared-ReLU
//! channel-mix sublayer. Both sublayers mix the current input with the
//! previous position's input (token shift).
//!
//! [`Model::step`] advances one token against a [`DecoderState`].
//! [`Model::forward_full`] evaluates a whole sequence layer by layer with
//! batched projections; it shares no evaluation order with the streaming
//! path beyond the recurrence itself.

use super::config::ModelConfig;
use super::weights::WeightSet;
use crate::error::{Error, Result};
use crate::remi::TokenId;

pub(crate) const LN_EPS: f32 = 1e-5;
pub(crate) const GROUP_NORM_EPS: f32 = 64e-5;
pub(crate) const KK_NORM_EPS: f32 = 1e-12;
/// Decay is `exp(-DECAY_SCALE * sigmoid(.))`, keeping it in `(exp(-0.6065), 1)`.
pub(crate) const DECAY_SCALE: f32 = 0.606_531;

pub type Logits = Vec<f32>;

struct Block<'a> {
    ln1_w: &'a [f32],
    ln1_b: &'a [f32],
    ln2_w: &'a [f32],
    ln2_b: &'a [f32],
    mix: [&'a [f32]; 6],
    w0: &'a [f32],
    w1: &'a [f32],
    w2: &'a [f32],
    a0: &'a [f32],
    a1: &'a [f32],
    a2: &'a [f32],
    v0: &'a [f32],
    v1: &'a [f32],
    v2: &'a [f32],
    g1: &'a [f32],
    g2: &'a [f32],
    k_k: &'a [f32],
    k_a: &'a [f32],
    r_k: &'a [f32],
    receptance: &'a [f32],
    key: &'a [f32],
    value: &'a [f32],
    output: &'a [f32],
    lnx_w: &'a [f32],
    lnx_b: &'a [f32],
    ffn_mix: &'a [f32],
    ffn_key: &'a [f32],
    ffn_value: &'a [f32],
}

/// Borrowed, shape-checked view of a [`WeightSet`].
pub struct Model<'a> {
    cfg: ModelConfig,
    emb: &'a [f32],
    ln0_w: &'a [f32],
    ln0_b: &'a [f32],
    blocks: Vec<Block<'a>>,
    lnout_w: &'a [f32],
    lnout_b: &'a [f32],
    head: &'a [f32],
}

/// Recurrent state for one stream. Size depends only on the config.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub att_shift: Vec<Vec<f32>>,
    pub ffn_shift: Vec<Vec<f32>>,
    /// Per layer, `n_heads` row-major `head_dim x head_dim` matrices.
    pub wkv: Vec<Vec<f32>>,
}

impl DecoderState {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let n = cfg.head_dim();
        Self {
            att_shift: vec![vec![0.0; d]; cfg.n_layers],
            ffn_shift: vec![vec![0.0; d]; cfg.n_layers],
            wkv: vec![vec![0.0; cfg.n_heads * n * n]; cfg.n_layers],
        }
    }

    fn parts(&self) -> impl Iterator<Item = &Vec<f32>> {
        self.att_shift.iter().chain(&self.ffn_shift).chain(&self.wkv)
    }

    /// Little-endian f32 dump of every buffer, layer by layer.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.parts().flat_map(|v| v.iter().flat_map(|x| x.to_le_bytes())).collect()
    }

    pub fn from_bytes(cfg: &ModelConfig, bytes: &[u8]) -> Result<Self> {
        let mut s = Self::new(cfg);
        let expected: usize = s.parts().map(|v| v.len() * 4).sum();
        if bytes.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "state blob has {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        let mut vals = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        for v in s.att_shift.iter_mut().chain(&mut s.ffn_shift).chain(&mut s.wkv) {
            for x in v.iter_mut() {
                *x = vals.next().expect("length checked");
            }
        }
        Ok(s)
    }
}

fn layer_norm(x: &[f32], w: &[f32], b: &[f32], out: &mut [f32]) {
    let n = x.len() as f32;
    let mean = x.iter().sum::<f32>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * inv * w[i] + b[i];
    }
}

/// `out = x · W` for one row, `W` stored `[in, out]`.
fn vec_mat(x: &[f32], w: &[f32], n_out: usize, out: &mut [f32]) {
    out.fill(0.0);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * n_out..(i + 1) * n_out];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-token quantities of the time-mix sublayer up to the state update.
struct MixInputs {
    r: Vec<f32>,
    w: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    kk: Vec<f32>,
    a: Vec<f32>,
    g: Vec<f32>,
}

impl Block<'_> {
    /// State update and readout for one token; returns the pre-gate readout
    /// after group norm and the bonus term.
    fn wkv_step(&self, cfg: &ModelConfig, m: &MixInputs, state: &mut [f32]) -> Vec<f32> {
        let h = cfg.n_heads;
        let n = cfg.head_dim();
        let mut y = vec![0.0f32; cfg.d_model];
        for head in 0..h {
            let o = head * n;
            let s = &mut state[head * n * n..(head + 1) * n * n];
            for i in 0..n {
                let row = &mut s[i * n..(i + 1) * n];
                let mut sa = 0.0f32;
                for j in 0..n {
                    sa -= row[j] * m.kk[o + j];
                }
                let vi = m.v[o + i];
                let mut acc = 0.0f32;
                for j in 0..n {
                    let nv = row[j] * m.w[o + j] + sa * m.kk[o + j] * m.a[o + j] + vi * m.k[o + j];
                    row[j] = nv;
                    acc += nv * m.r[o + j];
                }
                y[o + i] = acc;
            }
            let seg = &mut y[o..o + n];
            let mean = seg.iter().sum::<f32>() / n as f32;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
            let inv = 1.0 / (var + GROUP_NORM_EPS).sqrt();
            let mut rkv = 0.0f32;
            for j in 0..n {
                rkv += m.r[o + j] * m.k[o + j] * self.r_k[o + j];
            }
            for i in 0..n {
                seg[i] = (seg[i] - mean) * inv * self.lnx_w[o + i] + self.lnx_b[o + i] + rkv * m.v[o + i];
            }
        }
        y
    }
}

/// Finishes decay, rate, gate, key normalization and value residual from the
/// raw projections. Shared by both evaluation paths; it is elementwise.
#[allow(clippy::too_many_arguments)]
fn finish_mix(
    cfg: &ModelConfig,
    b: &Block<'_>,
    layer: usize,
    r: Vec<f32>,
    mut k: Vec<f32>,
    mut v: Vec<f32>,
    w_lora: &[f32],
    a_lora: &[f32],
    v_lora: &[f32],
    g: Vec<f32>,
    v_first: &mut Vec<f32>,
) -> MixInputs {
    let d = cfg.d_model;
    let n = cfg.head_dim();
    let w: Vec<f32> = (0..d).map(|i| (-DECAY_SCALE * sigmoid(b.w0[i] + w_lora[i])).exp()).collect();
    let a: Vec<f32> = (0..d).map(|i| sigmoid(b.a0[i] + a_lora[i])).collect();
    let mut kk: Vec<f32> = (0..d).map(|i| k[i] * b.k_k[i]).collect();
    for head in kk.chunks_mut(n) {
        let norm = head.iter().map(|x| x * x).sum::<f32>().sqrt().max(KK_NORM_EPS);
        head.iter_mut().for_each(|x| *x /= norm);
    }
    for i in 0..d {
        k[i] *= 1.0 + (a[i] - 1.0) * b.k_a[i];
    }
    if layer == 0 {
        v_first.clone_from(&v);
    } else {
        for i in 0..d {
            let gate = sigmoid(b.v0[i] + v_lora[i]);
            v[i] += (v_first[i] - v[i]) * gate;
        }
    }
    MixInputs { r, w, k, v, kk, a, g }
}

impl<'a> Model<'a> {
    pub fn new(w: &'a WeightSet) -> Self {
        let cfg = *w.config();
        let t = |name: &str| w.tensor(name).data.as_slice();
        let blocks = (0..cfg.n_layers)
            .map(|l| {
                let p = |n: &str| t(&format!("blocks.{l}.{n}"));
                Block {
                    ln1_w: p("ln1.weight"),
                    ln1_b: p("ln1.bias"),
                    ln2_w: p("ln2.weight"),
                    ln2_b: p("ln2.bias"),
                    mix: super::config::MIX_NAMES.map(|m| p(&format!("att.{m}"))),
                    w0: p("att.w0"),
                    w1: p("att.w1"),
                    w2: p("att.w2"),
                    a0: p("att.a0"),
                    a1: p("att.a1"),
                    a2: p("att.a2"),
                    v0: p("att.v0"),
                    v1: p("att.v1"),
                    v2: p("att.v2"),
                    g1: p("att.g1"),
                    g2: p("att.g2"),
                    k_k: p("att.k_k"),
                    k_a: p("att.k_a"),
                    r_k: p("att.r_k"),
                    receptance: p("att.receptance.weight"),
                    key: p("att.key.weight"),
                    value: p("att.value.weight"),
                    output: p("att.output.weight"),
                    lnx_w: p("att.ln_x.weight"),
                    lnx_b: p("att.ln_x.bias"),
                    ffn_mix: p("ffn.x_k"),
                    ffn_key: p("ffn.key.weight"),
                    ffn_value: p("ffn.value.weight"),
                }
            })
            .collect();
        Self {
            cfg,
            emb: t("emb.weight"),
            ln0_w: t("ln0.weight"),
            ln0_b: t("ln0.bias"),
            blocks,
            lnout_w: t("ln_out.weight"),
            lnout_b: t("ln_out.bias"),
            head: t("head.weight"),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn new_state(&self) -> DecoderState {
        DecoderState::new(&self.cfg)
    }

    fn check_token(&self, index: usize, token: TokenId) -> Result<()> {
        if token.index() >= self.cfg.vocab_size {
            return Err(Error::TokenOutOfRange { index, id: token.id() as u32 });
        }
        Ok(())
    }

    /// Consumes one token, updating `state` in place.
    pub fn step(&self, state: &mut DecoderState, token: TokenId) -> Result<Logits> {
        self.check_token(0, token)?;
        let cfg = &self.cfg;
        let d = cfg.d_model;
        let tok = token.index();
        let mut x = vec![0.0f32; d];
        layer_norm(&self.emb[tok * d..(tok + 1) * d], self.ln0_w, self.ln0_b, &mut x);
        let mut v_first = vec![0.0f32; d];
        let mut xa = vec![0.0f32; d];
        for (l, b) in self.blocks.iter().enumerate() {
            layer_norm(&x, b.ln1_w, b.ln1_b, &mut xa);
            let prev = &state.att_shift[l];
            let mixed: Vec<Vec<f32>> = b
                .mix
                .iter()
                .map(|mu| (0..d).map(|i| xa[i] + (prev[i] - xa[i]) * mu[i]).collect())
                .collect();
            let [xr, xw, xk, xv, xa_, xg] = [0, 1, 2, 3, 4, 5].map(|i| &mixed[i]);
            let proj = |x: &[f32], w: &[f32], n_out: usize| {
                let mut out = vec![0.0; n_out];
                vec_mat(x, w, n_out, &mut out);
                out
            };
            let r = proj(xr, b.receptance, d);
            let k = proj(xk, b.key, d);
            let v = proj(xv, b.value, d);
            let w_hidden: Vec<f32> = proj(xw, b.w1, cfg.decay_rank).into_iter().map(f32::tanh).collect();
            let w_lora = proj(&w_hidden, b.w2, d);
            let a_lora = proj(&proj(xa_, b.a1, cfg.iclr_rank), b.a2, d);
            let v_lora = proj(&proj(xv, b.v1, cfg.value_rank), b.v2, d);
            let g_hidden: Vec<f32> = proj(xg, b.g1, cfg.gate_rank).into_iter().map(sigmoid).collect();
            let g = proj(&g_hidden, b.g2, d);
            let m = finish_mix(cfg, b, l, r, k, v, &w_lora, &a_lora, &v_lora, g, &mut v_first);
            let y = b.wkv_step(cfg, &m, &mut state.wkv[l]);
            let gated: Vec<f32> = y.iter().zip(&m.g).map(|(y, g)| y * g).collect();
            let att = proj(&gated, b.output, d);
            state.att_shift[l].copy_from_slice(&xa);
            for i in 0..d {
                x[i] += att[i];
            }

            let mut xb = vec![0.0f32; d];
            layer_norm(&x, b.ln2_w, b.ln2_b, &mut xb);
            let prev = &state.ffn_shift[l];
            let kin: Vec<f32> = (0..d).map(|i| xb[i] + (prev[i] - xb[i]) * b.ffn_mix[i]).collect();
            let hidden: Vec<f32> = proj(&kin, b.ffn_key, cfg.d_ffn)
                .into_iter()
                .map(|h| {
                    let h = h.max(0.0);
                    h * h
                })
                .collect();
            let ffn = proj(&hidden, b.ffn_value, d);
            state.ffn_shift[l] = xb;
            for i in 0..d {
                x[i] += ffn[i];
            }
        }
        let mut xo = vec![0.0f32; d];
        layer_norm(&x, self.lnout_w, self.lnout_b, &mut xo);
        let mut logits = vec![0.0f32; cfg.vocab_size];
        vec_mat(&xo, self.head, cfg.vocab_size, &mut logits);
        Ok(logits)
    }

    /// Feeds `tokens` in order, returning the logits after the last one.
    pub fn prefill(&self, state: &mut DecoderState, tokens: &[TokenId]) -> Result<Logits> {
        let mut last = None;
        for (i, &t) in tokens.iter().enumerate() {
            self.check_token(i, t)?;
            last = Some(self.step(state, t)?);
        }
        last.ok_or_else(|| Error::InvalidArgument("empty token sequence".into()))
    }

    /// Logits at every position of `tokens`, from a fresh state.
    pub fn forward_full(&self, tokens: &[TokenId]) -> Result<Vec<Logits>> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        for (i, &t) in tokens.iter().enumerate() {
            self.check_token(i, t)?;
        }
        let cfg = &self.cfg;
        let d = cfg.d_model;
        let n_tok = tokens.len();
        let mut x = Rows::zeros(n_tok, d);
        for (t, tok) in tokens.iter().enumerate() {
            let e = &self.emb[tok.index() * d..(tok.index() + 1) * d];
            layer_norm(e, self.ln0_w, self.ln0_b, x.row_mut(t));
        }
        let mut v_first = Rows::zeros(n_tok, d);
        for (l, b) in self.blocks.iter().enumerate() {
            let xa = x.map_rows(|row, out| layer_norm(row, b.ln1_w, b.ln1_b, out));
            let shifted = xa.shifted();
            let mixed: Vec<Rows> = b
                .mix
                .iter()
                .map(|mu| {
                    let mut m = xa.clone();
                    for t in 0..n_tok {
                        let (cur, prev) = (m.row_mut(t), shifted.row(t));
                        for i in 0..d {
                            cur[i] += (prev[i] - cur[i]) * mu[i];
                        }
                    }
                    m
                })
                .collect();
            let r = mixed[0].matmul(b.receptance, d);
            let k = mixed[2].matmul(b.key, d);
            let v = mixed[3].matmul(b.value, d);
            let w_lora = mixed[1].matmul(b.w1, cfg.decay_rank).map_inplace(f32::tanh).matmul(b.w2, d);
            let a_lora = mixed[4].matmul(b.a1, cfg.iclr_rank).matmul(b.a2, d);
            let v_lora = mixed[3].matmul(b.v1, cfg.value_rank).matmul(b.v2, d);
            let g = mixed[5].matmul(b.g1, cfg.gate_rank).map_inplace(sigmoid).matmul(b.g2, d);

            let mut state = vec![0.0f32; cfg.n_heads * cfg.head_dim() * cfg.head_dim()];
            let mut gated = Rows::zeros(n_tok, d);
            for t in 0..n_tok {
                let mut vf = v_first.row(t).to_vec();
                let m = finish_mix(
                    cfg,
                    b,
                    l,
                    r.row(t).to_vec(),
                    k.row(t).to_vec(),
                    v.row(t).to_vec(),
                    w_lora.row(t),
                    a_lora.row(t),
                    v_lora.row(t),
                    g.row(t).to_vec(),
                    &mut vf,
                );
                if l == 0 {
                    v_first.row_mut(t).copy_from_slice(&vf);
                }
                let y = b.wkv_step(cfg, &m, &mut state);
                for (o, (y, g)) in gated.row_mut(t).iter_mut().zip(y.iter().zip(&m.g)) {
                    *o = y * g;
                }
            }
            x.add_assign(&gated.matmul(b.output, d));

            let xb = x.map_rows(|row, out| layer_norm(row, b.ln2_w, b.ln2_b, out));
            let shifted = xb.shifted();
            let mut kin = xb.clone();
            for t in 0..n_tok {
                let (cur, prev) = (kin.row_mut(t), shifted.row(t));
                for i in 0..d {
                    cur[i] += (prev[i] - cur[i]) * b.ffn_mix[i];
                }
            }
            let hidden = kin.matmul(b.ffn_key, cfg.d_ffn).map_inplace(|h| {
                let h = h.max(0.0);
                h * h
            });
            x.add_assign(&hidden.matmul(b.ffn_value, d));
        }
        let xo = x.map_rows(|row, out| layer_norm(row, self.lnout_w, self.lnout_b, out));
        let logits = xo.matmul(self.head, cfg.vocab_size);
        Ok((0..n_tok).map(|t| logits.row(t).to_vec()).collect())
    }
}

/// Row-major matrix of per-position activations.
#[derive(Clone)]
struct Rows {
    n_cols: usize,
    data: Vec<f32>,
}

impl Rows {
    fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self { n_cols, data: vec![0.0; n_rows * n_cols] }
    }

    fn n_rows(&self) -> usize {
        self.data.len() / self.n_cols
    }

    fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.n_cols..(t + 1) * self.n_cols]
    }

    fn row_mut(&mut self, t: usize) -> &mut [f32] {
        &mut self.data[t * self.n_cols..(t + 1) * self.n_cols]
    }

    fn map_rows(&self, f: impl Fn(&[f32], &mut [f32])) -> Rows {
        let mut out = Rows::zeros(self.n_rows(), self.n_cols);
        for t in 0..self.n_rows() {
            f(self.row(t), out.row_mut(t));
        }
        out
    }

    fn map_inplace(mut self, f: impl Fn(f32) -> f32) -> Rows {
        self.data.iter_mut().for_each(|v| *v = f(*v));
        self
    }

    /// Previous-position rows, zero at position 0.
    fn shifted(&self) -> Rows {
        let mut out = Rows::zeros(self.n_rows(), self.n_cols);
        if self.n_rows() > 1 {
            let n = self.data.len() - self.n_cols;
            out.data[self.n_cols..].copy_from_slice(&self.data[..n]);
        }
        out
    }

    fn add_assign(&mut self, other: &Rows) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self · W` with `W` stored `[in, out]`, computed as column dot products.
    fn matmul(&self, w: &[f32], n_out: usize) -> Rows {
        let n_in = self.n_cols;
        let mut wt = vec![0.0f32; w.len()];
        for i in 0..n_in {
            for j in 0..n_out {
                wt[j * n_in + i] = w[i * n_out + j];
            }
        }
        let mut out = Rows::zeros(self.n_rows(), n_out);
        for t in 0..self.n_rows() {
            let x = self.row(t);
            let o = out.row_mut(t);
            for j in 0..n_out {
                let col = &wt[j * n_in..(j + 1) * n_in];
                o[j] = x.iter().zip(col).map(|(a, b)| a * b).sum();
            }
        }
        out
    }
}

/// Logits at every position of `tokens` from a fresh state.
pub fn forward_full(w: &WeightSet, tokens: &[TokenId]) -> Result<Vec<Logits>> {
    Model::new(w).forward_full(tokens)
}

/// One streaming step; returns the logits and the advanced state.
pub fn forward_step(w: &WeightSet, state: &DecoderState, token: TokenId) -> Result<(Logits, DecoderState)> {
    let mut next = state.clone();
    let logits = Model::new(w).step(&mut next, token)?;
    Ok((logits, next))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(i: u32) -> TokenId {
        TokenId::new(i).unwrap()
    }

    #[test]
    fn zero_weights_give_flat_logits() {
        let w = WeightSet::zeros(&ModelConfig::micro(2, 8, 16, 228, 2, 2)).unwrap();
        let out = forward_full(&w, &[tok(17)]).unwrap();
        assert!(out[0].iter().all(|&v| v == out[0][0]));
    }

    #[test]
    fn single_step_equals_full() {
        let w = WeightSet::random_uniform(&ModelConfig::micro(2, 16, 32, 228, 4, 4), 0.5, 3).unwrap();
        let m = Model::new(&w);
        let full = m.forward_full(&[tok(40)]).unwrap();
        let mut st = m.new_state();
        let step = m.step(&mut st, tok(40)).unwrap();
        for (a, b) in full[0].iter().zip(&step) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn deterministic() {
        let w = WeightSet::random_uniform(&ModelConfig::micro(2, 16, 32, 228, 4, 4), 0.5, 9).unwrap();
        let seq: Vec<_> = (0..40).map(|i| tok(i * 5 % 228)).collect();
        assert_eq!(forward_full(&w, &seq).unwrap(), forward_full(&w, &seq).unwrap());
    }

    #[test]
    fn rejects_out_of_vocab_ids() {
        let w = WeightSet::zeros(&ModelConfig::micro(1, 8, 8, 12, 2, 2)).unwrap();
        assert!(matches!(forward_full(&w, &[tok(3), tok(20)]), Err(Error::TokenOutOfRange { index: 1, id: 20 })));
        let st = DecoderState::new(w.config());
        assert!(forward_step(&w, &st, tok(12)).is_err());
        assert!(forward_full(&w, &[]).is_err());
    }

    #[test]
    fn state_bytes_round_trip() {
        let cfg = ModelConfig::micro(2, 8, 16, 12, 2, 2);
        let w = WeightSet::random_uniform(&cfg, 0.5, 1).unwrap();
        let m = Model::new(&w);
        let mut st = m.new_state();
        m.step(&mut st, tok(3)).unwrap();
        let bytes = st.to_bytes();
        assert_eq!(bytes.len(), DecoderState::new(&cfg).to_bytes().len());
        assert_eq!(DecoderState::from_bytes(&cfg, &bytes).unwrap(), st);
        assert!(DecoderState::from_bytes(&cfg, &bytes[1..]).is_err());
    }
}
