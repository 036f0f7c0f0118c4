//! Double-precision forward pass that records activations, and its exact
//! reverse pass.
//!
//! Mirrors the inference recipe operation for operation; the recurrence is
//! unrolled over the whole sequence and every per-step matrix state is kept
//! so the reverse sweep can run backwards through time.

use std::collections::HashMap;

use super::mat::Mat;
use super::params::Params;
use crate::model::config::ModelConfig;
use crate::model::runtime::{DECAY_SCALE, GROUP_NORM_EPS, KK_NORM_EPS, LN_EPS};
use crate::remi::TokenId;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct LnCache {
    xhat: Mat,
    inv: Vec<f64>,
}

fn ln_forward(x: &Mat, w: &[f64], b: &[f64]) -> (Mat, LnCache) {
    let n = x.cols as f64;
    let mut y = Mat::zeros(x.rows, x.cols);
    let mut xhat = Mat::zeros(x.rows, x.cols);
    let mut inv = Vec::with_capacity(x.rows);
    for t in 0..x.rows {
        let row = x.row(t);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let s = 1.0 / (var + LN_EPS as f64).sqrt();
        inv.push(s);
        let (xh, yr) = (xhat.row_mut(t), &mut y.data[t * x.cols..(t + 1) * x.cols]);
        for i in 0..x.cols {
            xh[i] = (row[i] - mean) * s;
            yr[i] = xh[i] * w[i] + b[i];
        }
    }
    (y, LnCache { xhat, inv })
}

/// Normalization backward given the gradient with respect to `xhat`.
fn norm_backward(dxhat: &[f64], xhat: &[f64], inv: f64, out: &mut [f64]) {
    let n = dxhat.len() as f64;
    let mean_d = dxhat.iter().sum::<f64>() / n;
    let mean_dx = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / n;
    for i in 0..dxhat.len() {
        out[i] = inv * (dxhat[i] - mean_d - xhat[i] * mean_dx);
    }
}

fn ln_backward(dy: &Mat, c: &LnCache, w: &[f64], dw: &mut [f64], db: &mut [f64]) -> Mat {
    let mut dx = Mat::zeros(dy.rows, dy.cols);
    let mut dxhat = vec![0.0; dy.cols];
    for t in 0..dy.rows {
        let (g, xh) = (dy.row(t), c.xhat.row(t));
        for i in 0..dy.cols {
            dw[i] += g[i] * xh[i];
            db[i] += g[i];
            dxhat[i] = g[i] * w[i];
        }
        norm_backward(&dxhat, xh, c.inv[t], dx.row_mut(t));
    }
    dx
}

/// Per-layer activations needed by the reverse pass.
struct LayerCache {
    ln1: LnCache,
    /// Previous-position input minus current, for the time-mix shift.
    att_delta: Mat,
    mixes: Vec<Mat>,
    r: Mat,
    k0: Mat,
    v0: Mat,
    w_hidden: Mat,
    w_sig: Mat,
    decay: Mat,
    a_hidden: Mat,
    a: Mat,
    g_hidden: Mat,
    g: Mat,
    kk: Mat,
    kk_norm: Vec<f64>,
    k: Mat,
    v_hidden: Mat,
    v_gate: Mat,
    v: Mat,
    /// Matrix states after each position; entry 0 is the zero initial state.
    states: Vec<f64>,
    yn: Mat,
    gn_inv: Vec<f64>,
    y2: Mat,
    o_in: Mat,
    ln2: LnCache,
    ffn_delta: Mat,
    kin: Mat,
    pre: Mat,
    hidden: Mat,
}

pub(crate) struct ForwardCache {
    tokens: Vec<usize>,
    ln0: LnCache,
    layers: Vec<LayerCache>,
    v_first: Mat,
    ln_out: LnCache,
    xo: Mat,
    pub logits: Mat,
}

struct Slots {
    emb: usize,
    ln0_w: usize,
    ln0_b: usize,
    lnout_w: usize,
    lnout_b: usize,
    head: usize,
    blocks: Vec<HashMap<&'static str, usize>>,
}

impl Slots {
    fn new(p: &Params) -> Self {
        let ix = |n: &str| p.index_of(n).unwrap_or_else(|| panic!("no tensor `{n}`"));
        Self {
            emb: ix("emb.weight"),
            ln0_w: ix("ln0.weight"),
            ln0_b: ix("ln0.bias"),
            lnout_w: ix("ln_out.weight"),
            lnout_b: ix("ln_out.bias"),
            head: ix("head.weight"),
            blocks: (0..p.config.n_layers).map(|l| p.block_slots(l)).collect(),
        }
    }
}

const MIX_KEYS: [&str; 6] = ["att.x_r", "att.x_w", "att.x_k", "att.x_v", "att.x_a", "att.x_g"];
const MIX_R: usize = 0;
const MIX_W: usize = 1;
const MIX_K: usize = 2;
const MIX_V: usize = 3;
const MIX_A: usize = 4;
const MIX_G: usize = 5;

/// Runs the model over `tokens` from a zero state, keeping every activation.
pub(crate) fn forward(p: &Params, tokens: &[TokenId]) -> ForwardCache {
    let cfg = &p.config;
    let s = Slots::new(p);
    let t_len = tokens.len();
    let d = cfg.d_model;
    let tokens: Vec<usize> = tokens.iter().map(|t| t.index()).collect();
    let mut emb = Mat::zeros(t_len, d);
    for (t, &tok) in tokens.iter().enumerate() {
        emb.row_mut(t).copy_from_slice(&p.tensors[s.emb][tok * d..(tok + 1) * d]);
    }
    let (mut x, ln0) = ln_forward(&emb, &p.tensors[s.ln0_w], &p.tensors[s.ln0_b]);
    let mut v_first = Mat::zeros(t_len, d);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (l, b) in s.blocks.iter().enumerate() {
        let w = |k: &str| p.tensors[b[k]].as_slice();
        let (cache, att_out) = time_mix_forward(cfg, l, &w, &x, &mut v_first);
        x.add_assign(&att_out);
        let (ln2_out, ln2) = ln_forward(&x, w("ln2.weight"), w("ln2.bias"));
        let ffn_delta = ln2_out.shifted().zip(&ln2_out, |prev, cur| prev - cur);
        let mu = w("ffn.x_k");
        let mut kin = ln2_out.clone();
        for t in 0..t_len {
            let (row, dr) = (kin.row_mut(t), ffn_delta.row(t));
            for i in 0..d {
                row[i] += dr[i] * mu[i];
            }
        }
        let pre = kin.matmul(w("ffn.key.weight"), cfg.d_ffn);
        let hidden = pre.map(|h| if h > 0.0 { h * h } else { 0.0 });
        x.add_assign(&hidden.matmul(w("ffn.value.weight"), d));
        layers.push(LayerCache { ln2, ffn_delta, kin, pre, hidden, ..cache });
    }
    let (xo, ln_out) = ln_forward(&x, &p.tensors[s.lnout_w], &p.tensors[s.lnout_b]);
    let logits = xo.matmul(&p.tensors[s.head], cfg.vocab_size);
    ForwardCache { tokens, ln0, layers, v_first, ln_out, xo, logits }
}

fn time_mix_forward<'a>(
    cfg: &ModelConfig,
    layer: usize,
    w: &impl Fn(&str) -> &'a [f64],
    x: &Mat,
    v_first: &mut Mat,
) -> (LayerCache, Mat) {
    let d = cfg.d_model;
    let h = cfg.n_heads;
    let n = cfg.head_dim();
    let t_len = x.rows;
    let (xa, ln1) = ln_forward(x, w("ln1.weight"), w("ln1.bias"));
    let att_delta = xa.shifted().zip(&xa, |prev, cur| prev - cur);
    let mixes: Vec<Mat> = MIX_KEYS
        .iter()
        .map(|k| {
            let mu = w(k);
            let mut m = xa.clone();
            for t in 0..t_len {
                let (row, dr) = (m.row_mut(t), att_delta.row(t));
                for i in 0..d {
                    row[i] += dr[i] * mu[i];
                }
            }
            m
        })
        .collect();
    let r = mixes[MIX_R].matmul(w("att.receptance.weight"), d);
    let k0 = mixes[MIX_K].matmul(w("att.key.weight"), d);
    let v0 = mixes[MIX_V].matmul(w("att.value.weight"), d);

    let w_hidden = mixes[MIX_W].matmul(w("att.w1"), cfg.decay_rank).map(f64::tanh);
    let w0 = w("att.w0");
    let mut w_sig = w_hidden.matmul(w("att.w2"), d);
    for t in 0..t_len {
        for (i, v) in w_sig.row_mut(t).iter_mut().enumerate() {
            *v = sigmoid(w0[i] + *v);
        }
    }
    let decay = w_sig.map(|s| (-(DECAY_SCALE as f64) * s).exp());

    let a_hidden = mixes[MIX_A].matmul(w("att.a1"), cfg.iclr_rank);
    let a0 = w("att.a0");
    let mut a = a_hidden.matmul(w("att.a2"), d);
    for t in 0..t_len {
        for (i, v) in a.row_mut(t).iter_mut().enumerate() {
            *v = sigmoid(a0[i] + *v);
        }
    }

    let g_hidden = mixes[MIX_G].matmul(w("att.g1"), cfg.gate_rank).map(sigmoid);
    let g = g_hidden.matmul(w("att.g2"), d);

    let k_k = w("att.k_k");
    let mut kk0 = k0.clone();
    for t in 0..t_len {
        for (i, v) in kk0.row_mut(t).iter_mut().enumerate() {
            *v *= k_k[i];
        }
    }
    let mut kk = kk0;
    let mut kk_norm = Vec::with_capacity(t_len * h);
    for t in 0..t_len {
        for head in kk.row_mut(t).chunks_mut(n) {
            let norm = head.iter().map(|x| x * x).sum::<f64>().sqrt();
            kk_norm.push(norm);
            let denom = norm.max(KK_NORM_EPS as f64);
            head.iter_mut().for_each(|x| *x /= denom);
        }
    }
    let k_a = w("att.k_a");
    let mut k = k0.clone();
    for t in 0..t_len {
        let ar = a.row(t);
        for (i, v) in k.row_mut(t).iter_mut().enumerate() {
            *v *= 1.0 + (ar[i] - 1.0) * k_a[i];
        }
    }

    let v_hidden;
    let v_gate;
    let mut v = v0.clone();
    if layer == 0 {
        v_first.data.copy_from_slice(&v0.data);
        v_hidden = Mat::zeros(0, 0);
        v_gate = Mat::zeros(0, 0);
    } else {
        v_hidden = mixes[MIX_V].matmul(w("att.v1"), cfg.value_rank);
        let v0b = w("att.v0");
        let mut gate = v_hidden.matmul(w("att.v2"), d);
        for t in 0..t_len {
            let (gr, vf, vr) = (gate.row_mut(t), v_first.row(t), &mut v.data[t * d..(t + 1) * d]);
            for i in 0..d {
                gr[i] = sigmoid(v0b[i] + gr[i]);
                vr[i] += (vf[i] - vr[i]) * gr[i];
            }
        }
        v_gate = gate;
    }

    // recurrence
    let hnn = h * n * n;
    let mut states = vec![0.0f64; (t_len + 1) * hnn];
    let mut y = Mat::zeros(t_len, d);
    for t in 0..t_len {
        let (prev, cur) = states.split_at_mut((t + 1) * hnn);
        let prev = &prev[t * hnn..];
        let cur = &mut cur[..hnn];
        let (rr, wr, kr, vr, kkr, ar) = (r.row(t), decay.row(t), k.row(t), v.row(t), kk.row(t), a.row(t));
        for head in 0..h {
            let o = head * n;
            for i in 0..n {
                let base = head * n * n + i * n;
                let sp = &prev[base..base + n];
                let sa: f64 = -(0..n).map(|j| sp[j] * kkr[o + j]).sum::<f64>();
                let mut acc = 0.0;
                for j in 0..n {
                    let nv = sp[j] * wr[o + j] + sa * kkr[o + j] * ar[o + j] + vr[o + i] * kr[o + j];
                    cur[base + j] = nv;
                    acc += nv * rr[o + j];
                }
                y.row_mut(t)[o + i] = acc;
            }
        }
    }

    // group norm, affine, bonus, gate
    let (lnx_w, lnx_b, r_k) = (w("att.ln_x.weight"), w("att.ln_x.bias"), w("att.r_k"));
    let mut yn = Mat::zeros(t_len, d);
    let mut gn_inv = Vec::with_capacity(t_len * h);
    let mut y2 = Mat::zeros(t_len, d);
    for t in 0..t_len {
        for head in 0..h {
            let o = head * n;
            let seg = &y.row(t)[o..o + n];
            let mean = seg.iter().sum::<f64>() / n as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + GROUP_NORM_EPS as f64).sqrt();
            gn_inv.push(inv);
            let bonus: f64 = (0..n).map(|j| r.row(t)[o + j] * k.row(t)[o + j] * r_k[o + j]).sum();
            for i in 0..n {
                let z = (seg[i] - mean) * inv;
                yn.row_mut(t)[o + i] = z;
                y2.row_mut(t)[o + i] = z * lnx_w[o + i] + lnx_b[o + i] + bonus * v.row(t)[o + i];
            }
        }
    }
    let o_in = y2.zip(&g, |a, b| a * b);
    let att_out = o_in.matmul(w("att.output.weight"), d);
    let empty = || Mat::zeros(0, 0);
    (
        LayerCache {
            ln1,
            att_delta,
            mixes,
            r,
            k0,
            v0,
            w_hidden,
            w_sig,
            decay,
            a_hidden,
            a,
            g_hidden,
            g,
            kk,
            kk_norm,
            k,
            v_hidden,
            v_gate,
            v,
            states,
            yn,
            gn_inv,
            y2,
            o_in,
            ln2: LnCache { xhat: empty(), inv: vec![] },
            ffn_delta: empty(),
            kin: empty(),
            pre: empty(),
            hidden: empty(),
        },
        att_out,
    )
}

/// Accumulates parameter gradients into `grads` given `dlogits`.
pub(crate) fn backward(p: &Params, cache: &ForwardCache, dlogits: &Mat, grads: &mut Params) {
    let cfg = &p.config;
    let s = Slots::new(p);
    let d = cfg.d_model;
    let t_len = dlogits.rows;

    cache.xo.acc_t_mul(dlogits, &mut grads.tensors[s.head]);
    let dxo = dlogits.matmul_t(&p.tensors[s.head], d);
    let (gw, gb) = two_mut(&mut grads.tensors, s.lnout_w, s.lnout_b);
    let mut dx = ln_backward(&dxo, &cache.ln_out, &p.tensors[s.lnout_w], gw, gb);

    let mut dv_first = Mat::zeros(t_len, d);
    for l in (0..cfg.n_layers).rev() {
        let b = &s.blocks[l];
        let c = &cache.layers[l];
        let w = |k: &str| p.tensors[b[k]].as_slice();

        // channel mix
        let dffn = &dx;
        c.hidden.acc_t_mul(dffn, &mut grads.tensors[b["ffn.value.weight"]]);
        let dhidden = dffn.matmul_t(w("ffn.value.weight"), cfg.d_ffn);
        let dpre = dhidden.zip(&c.pre, |g, h| if h > 0.0 { 2.0 * h * g } else { 0.0 });
        c.kin.acc_t_mul(&dpre, &mut grads.tensors[b["ffn.key.weight"]]);
        let dkin = dpre.matmul_t(w("ffn.key.weight"), d);
        let (dxb, dmu) = mix_backward(&dkin, &c.ffn_delta, w("ffn.x_k"));
        add_into(&mut grads.tensors[b["ffn.x_k"]], &dmu);
        let (gw, gb) = two_mut(&mut grads.tensors, b["ln2.weight"], b["ln2.bias"]);
        let dres = ln_backward(&dxb, &c.ln2, w("ln2.weight"), gw, gb);
        dx.add_assign(&dres);

        // time mix
        let dxa_res = time_mix_backward(cfg, l, &w, b, c, &dx, &cache.v_first, &mut dv_first, grads);
        let (gw, gb) = two_mut(&mut grads.tensors, b["ln1.weight"], b["ln1.bias"]);
        let dres = ln_backward(&dxa_res, &c.ln1, w("ln1.weight"), gw, gb);
        dx.add_assign(&dres);
    }

    let (gw, gb) = two_mut(&mut grads.tensors, s.ln0_w, s.ln0_b);
    let demb = ln_backward(&dx, &cache.ln0, &p.tensors[s.ln0_w], gw, gb);
    let gemb = &mut grads.tensors[s.emb];
    for (t, &tok) in cache.tokens.iter().enumerate() {
        for (g, v) in gemb[tok * d..(tok + 1) * d].iter_mut().zip(demb.row(t)) {
            *g += v;
        }
    }
}

fn two_mut(v: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Reverse of `m = x + delta ⊙ mu` where `delta = shift(x) - x`.
/// Returns the input gradient and the coefficient gradient.
fn mix_backward(dm: &Mat, delta: &Mat, mu: &[f64]) -> (Mat, Vec<f64>) {
    let d = dm.cols;
    let mut dmu = vec![0.0; d];
    let mut dx = Mat::zeros(dm.rows, d);
    let mut dprev = Mat::zeros(dm.rows, d);
    for t in 0..dm.rows {
        let (g, de) = (dm.row(t), delta.row(t));
        for i in 0..d {
            dmu[i] += g[i] * de[i];
            dx.row_mut(t)[i] = g[i] * (1.0 - mu[i]);
            dprev.row_mut(t)[i] = g[i] * mu[i];
        }
    }
    dx.add_unshifted(&dprev);
    (dx, dmu)
}

/// Backward through one time-mix sublayer. `dout` is the gradient of the
/// residual stream after the sublayer; returns the gradient with respect to
/// the sublayer's normalized input.
#[allow(clippy::too_many_arguments)]
fn time_mix_backward<'a>(
    cfg: &ModelConfig,
    layer: usize,
    w: &impl Fn(&str) -> &'a [f64],
    b: &HashMap<&'static str, usize>,
    c: &LayerCache,
    dout: &Mat,
    v_first: &Mat,
    dv_first: &mut Mat,
    grads: &mut Params,
) -> Mat {
    let d = cfg.d_model;
    let h = cfg.n_heads;
    let n = cfg.head_dim();
    let t_len = dout.rows;
    let g = &mut grads.tensors;

    c.o_in.acc_t_mul(dout, &mut g[b["att.output.weight"]]);
    let do_in = dout.matmul_t(w("att.output.weight"), d);
    let dy2 = do_in.zip(&c.g, |a, gg| a * gg);
    let dgate = do_in.zip(&c.y2, |a, y| a * y);

    // gate generator
    c.g_hidden.acc_t_mul(&dgate, &mut g[b["att.g2"]]);
    let dgh = dgate.matmul_t(w("att.g2"), cfg.gate_rank).zip(&c.g_hidden, |gr, s| gr * s * (1.0 - s));
    c.mixes[MIX_G].acc_t_mul(&dgh, &mut g[b["att.g1"]]);
    let mut dmix: Vec<Mat> = (0..6).map(|_| Mat::zeros(t_len, d)).collect();
    dmix[MIX_G] = dgh.matmul_t(w("att.g1"), d);

    // group norm affine and bonus
    let (lnx_w, r_k) = (w("att.ln_x.weight"), w("att.r_k"));
    let mut dy = Mat::zeros(t_len, d);
    let mut dr = Mat::zeros(t_len, d);
    let mut dk = Mat::zeros(t_len, d);
    let mut dv = Mat::zeros(t_len, d);
    {
        let (dlw, dlb) = two_mut(g, b["att.ln_x.weight"], b["att.ln_x.bias"]);
        for t in 0..t_len {
            let (gy, yn, rr, kr, vr) = (dy2.row(t), c.yn.row(t), c.r.row(t), c.k.row(t), c.v.row(t));
            for i in 0..d {
                dlw[i] += gy[i] * yn[i];
                dlb[i] += gy[i];
            }
            for head in 0..h {
                let o = head * n;
                let bonus: f64 = (0..n).map(|j| rr[o + j] * kr[o + j] * r_k[o + j]).sum();
                let dbonus: f64 = (0..n).map(|i| gy[o + i] * vr[o + i]).sum();
                for i in 0..n {
                    dv.row_mut(t)[o + i] += gy[o + i] * bonus;
                }
                for j in 0..n {
                    dr.row_mut(t)[o + j] += dbonus * kr[o + j] * r_k[o + j];
                    dk.row_mut(t)[o + j] += dbonus * rr[o + j] * r_k[o + j];
                }
                let dyn_: Vec<f64> = (0..n).map(|i| gy[o + i] * lnx_w[o + i]).collect();
                norm_backward(&dyn_, &yn[o..o + n], c.gn_inv[t * h + head], &mut dy.row_mut(t)[o..o + n]);
            }
        }
    }
    {
        let drk = &mut g[b["att.r_k"]];
        for t in 0..t_len {
            let (gy, rr, kr, vr) = (dy2.row(t), c.r.row(t), c.k.row(t), c.v.row(t));
            for head in 0..h {
                let o = head * n;
                let dbonus: f64 = (0..n).map(|i| gy[o + i] * vr[o + i]).sum();
                for j in 0..n {
                    drk[o + j] += dbonus * rr[o + j] * kr[o + j];
                }
            }
        }
    }

    // recurrence, reverse in time
    let hnn = h * n * n;
    let mut ds = vec![0.0f64; hnn];
    let mut dkk = Mat::zeros(t_len, d);
    let mut da = Mat::zeros(t_len, d);
    let mut ddecay = Mat::zeros(t_len, d);
    let mut dsa = vec![0.0f64; n];
    for t in (0..t_len).rev() {
        let cur = &c.states[(t + 1) * hnn..(t + 2) * hnn];
        let prev = &c.states[t * hnn..(t + 1) * hnn];
        let (rr, wr, kr, vr, kkr, ar) = (c.r.row(t), c.decay.row(t), c.k.row(t), c.v.row(t), c.kk.row(t), c.a.row(t));
        let gy = dy.row(t).to_vec();
        for head in 0..h {
            let o = head * n;
            let base = head * n * n;
            let dsh = &mut ds[base..base + n * n];
            let sc = &cur[base..base + n * n];
            let sp = &prev[base..base + n * n];
            // readout y_i = sum_j S_ij r_j
            for i in 0..n {
                for j in 0..n {
                    dsh[i * n + j] += gy[o + i] * rr[o + j];
                    dr.row_mut(t)[o + j] += sc[i * n + j] * gy[o + i];
                }
            }
            // S = S_prev * w_j + sa_i * (kk_j a_j) + v_i k_j, sa_i = -sum_j S_prev_ij kk_j
            for i in 0..n {
                let sa: f64 = -(0..n).map(|j| sp[i * n + j] * kkr[o + j]).sum::<f64>();
                let mut dsa_i = 0.0;
                let mut dv_i = 0.0;
                for j in 0..n {
                    let gs = dsh[i * n + j];
                    dv_i += gs * kr[o + j];
                    dk.row_mut(t)[o + j] += gs * vr[o + i];
                    let db = gs * sa;
                    dkk.row_mut(t)[o + j] += db * ar[o + j];
                    da.row_mut(t)[o + j] += db * kkr[o + j];
                    dsa_i += gs * kkr[o + j] * ar[o + j];
                    ddecay.row_mut(t)[o + j] += gs * sp[i * n + j];
                }
                dv.row_mut(t)[o + i] += dv_i;
                dsa[i] = dsa_i;
            }
            // propagate to S_prev and to kk through sa
            for i in 0..n {
                for j in 0..n {
                    dkk.row_mut(t)[o + j] -= dsa[i] * sp[i * n + j];
                    dsh[i * n + j] = dsh[i * n + j] * wr[o + j] - dsa[i] * kkr[o + j];
                }
            }
        }
    }

    // key normalization: kk = u / max(|u|, eps), u = k0 * k_k
    let mut du = Mat::zeros(t_len, d);
    for t in 0..t_len {
        for head in 0..h {
            let o = head * n;
            let norm = c.kk_norm[t * h + head];
            let (g_kk, kk) = (&dkk.row(t)[o..o + n], &c.kk.row(t)[o..o + n]);
            let out = &mut du.row_mut(t)[o..o + n];
            if norm > KK_NORM_EPS as f64 {
                let dot: f64 = g_kk.iter().zip(kk).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    out[j] = (g_kk[j] - kk[j] * dot) / norm;
                }
            } else {
                for j in 0..n {
                    out[j] = g_kk[j] / KK_NORM_EPS as f64;
                }
            }
        }
    }
    let (k_k, k_a) = (w("att.k_k"), w("att.k_a"));
    let mut dk0 = Mat::zeros(t_len, d);
    {
        let (gkk, gka) = two_mut(g, b["att.k_k"], b["att.k_a"]);
        for t in 0..t_len {
            let (g_u, k0, ar, g_k) = (du.row(t), c.k0.row(t), c.a.row(t), dk.row(t));
            for i in 0..d {
                gkk[i] += g_u[i] * k0[i];
                gka[i] += g_k[i] * k0[i] * (ar[i] - 1.0);
                dk0.row_mut(t)[i] = g_u[i] * k_k[i] + g_k[i] * (1.0 + (ar[i] - 1.0) * k_a[i]);
                da.row_mut(t)[i] += g_k[i] * k0[i] * k_a[i];
            }
        }
    }

    // in-context rate generator
    let da_pre = da.zip(&c.a, |gr, a| gr * a * (1.0 - a));
    da_pre.acc_col_sums(&mut g[b["att.a0"]]);
    c.a_hidden.acc_t_mul(&da_pre, &mut g[b["att.a2"]]);
    let dah = da_pre.matmul_t(w("att.a2"), cfg.iclr_rank);
    c.mixes[MIX_A].acc_t_mul(&dah, &mut g[b["att.a1"]]);
    dmix[MIX_A] = dah.matmul_t(w("att.a1"), d);

    // decay generator
    let scale = DECAY_SCALE as f64;
    let dw_pre = Mat {
        rows: t_len,
        cols: d,
        data: (0..t_len * d)
            .map(|i| {
                let s = c.w_sig.data[i];
                ddecay.data[i] * c.decay.data[i] * -scale * s * (1.0 - s)
            })
            .collect(),
    };
    dw_pre.acc_col_sums(&mut g[b["att.w0"]]);
    c.w_hidden.acc_t_mul(&dw_pre, &mut g[b["att.w2"]]);
    let dwh = dw_pre.matmul_t(w("att.w2"), cfg.decay_rank).zip(&c.w_hidden, |gr, th| gr * (1.0 - th * th));
    c.mixes[MIX_W].acc_t_mul(&dwh, &mut g[b["att.w1"]]);
    dmix[MIX_W] = dwh.matmul_t(w("att.w1"), d);

    // value residual
    let dv0 = if layer == 0 {
        let mut dv0 = dv.clone();
        dv0.add_assign(dv_first);
        dv0
    } else {
        let mut dv0 = Mat::zeros(t_len, d);
        let mut dgate_pre = Mat::zeros(t_len, d);
        for t in 0..t_len {
            let (gv, gate, vf, v0) = (dv.row(t), c.v_gate.row(t), v_first.row(t), c.v0.row(t));
            for i in 0..d {
                dv0.row_mut(t)[i] = gv[i] * (1.0 - gate[i]);
                dgate_pre.row_mut(t)[i] = gv[i] * (vf[i] - v0[i]) * gate[i] * (1.0 - gate[i]);
            }
            for i in 0..d {
                dv_first.row_mut(t)[i] += gv[i] * gate[i];
            }
        }
        dgate_pre.acc_col_sums(&mut g[b["att.v0"]]);
        c.v_hidden.acc_t_mul(&dgate_pre, &mut g[b["att.v2"]]);
        let dvh = dgate_pre.matmul_t(w("att.v2"), cfg.value_rank);
        c.mixes[MIX_V].acc_t_mul(&dvh, &mut g[b["att.v1"]]);
        dmix[MIX_V].add_assign(&dvh.matmul_t(w("att.v1"), d));
        dv0
    };

    // projections
    c.mixes[MIX_R].acc_t_mul(&dr, &mut g[b["att.receptance.weight"]]);
    dmix[MIX_R].add_assign(&dr.matmul_t(w("att.receptance.weight"), d));
    c.mixes[MIX_K].acc_t_mul(&dk0, &mut g[b["att.key.weight"]]);
    dmix[MIX_K].add_assign(&dk0.matmul_t(w("att.key.weight"), d));
    c.mixes[MIX_V].acc_t_mul(&dv0, &mut g[b["att.value.weight"]]);
    dmix[MIX_V].add_assign(&dv0.matmul_t(w("att.value.weight"), d));

    // token-shift mixes
    let mut dxa = Mat::zeros(t_len, d);
    for (m, key) in MIX_KEYS.iter().enumerate() {
        let (dx_m, dmu) = mix_backward(&dmix[m], &c.att_delta, w(key));
        add_into(&mut g[b[key]], &dmu);
        dxa.add_assign(&dx_m);
    }
    dxa
}
