//! Independent reference implementations used as test oracles.
//!
//! Everything here works on plain `f64` vectors with explicit loops and
//! shares no code with the library's tensor or tape machinery; only the
//! weight containers are read.

#![allow(dead_code)]

use kvshare::model::ModelWeights;
use kvshare::numcore::Tensor;
use kvshare::{KVTopology, ModelConfig, Partitioning, Positioning};

/// The nine built-in (partitioning, positioning) pairs.
pub fn nine() -> Vec<(Partitioning, Positioning)> {
    let mut v = Vec::new();
    for p in [Partitioning::Pizza, Partitioning::Sandwich, Partitioning::Lasagna] {
        for q in [Positioning::Bottom, Positioning::Top, Positioning::Middle] {
            v.push((p, q));
        }
    }
    v
}

/// `x [in] @ w [in, out]`.
fn vecmat(x: &[f64], w: &Tensor<f64>) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    assert_eq!(rows, x.len());
    let d = w.data();
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c] += x[r] * d[r * cols + c];
        }
    }
    out
}

fn rms(x: &[f64], w: &Tensor<f64>, eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let s = 1.0 / (ms + eps).sqrt();
    x.iter().zip(w.data()).map(|(v, g)| v * s * g).collect()
}

fn rope(x: &mut [f64], heads: usize, dim: usize, pos: usize, base: f64) {
    for h in 0..heads {
        for j in 0..dim / 2 {
            let theta = pos as f64 * base.powf(-2.0 * j as f64 / dim as f64);
            let (s, c) = theta.sin_cos();
            let a = x[h * dim + 2 * j];
            let b = x[h * dim + 2 * j + 1];
            x[h * dim + 2 * j] = a * c - b * s;
            x[h * dim + 2 * j + 1] = a * s + b * c;
        }
    }
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

/// Output of [`sequential`].
pub struct SeqOut {
    /// `[token][vocab]`
    pub logits: Vec<Vec<f64>>,
    /// `[token][layer]`, rotated keys; `None` at non-KV layers.
    pub keys: Vec<Vec<Option<Vec<f64>>>>,
    pub values: Vec<Vec<Option<Vec<f64>>>>,
}

/// Token-by-token forward: token `t` runs the whole stack while every
/// earlier token's KVs at every KV layer are final. Layer `i` attends to the
/// KVs of layer `kv(i)` for positions `< t`, plus `t` itself when the
/// topology has no upward dependencies. An empty key set contributes zero.
pub fn sequential(cfg: &ModelConfig, topo: &KVTopology, w: &ModelWeights<f64>, tokens: &[usize]) -> SeqOut {
    let n_layers = topo.n_layers();
    let map = topo.kv_map();
    let diag = (0..n_layers).any(|i| map[i] > i);
    let (hd, nh, nkv) = (cfg.head_dim, cfg.n_heads, cfg.n_kv_heads);
    let group = nh / nkv;
    let hidden = cfg.hidden;
    let mut keys: Vec<Vec<Option<Vec<f64>>>> = Vec::new();
    let mut values: Vec<Vec<Option<Vec<f64>>>> = Vec::new();
    let mut logits = Vec::new();
    for (t, &tok) in tokens.iter().enumerate() {
        keys.push(vec![None; n_layers]);
        values.push(vec![None; n_layers]);
        let mut x: Vec<f64> = w.embed.data()[tok * hidden..(tok + 1) * hidden].to_vec();
        for i in 0..n_layers {
            let lw = &w.layers[i];
            let h = rms(&x, &lw.attn_norm, cfg.norm_eps);
            let mut q = vecmat(&h, &lw.wq);
            rope(&mut q, nh, hd, t, cfg.rope_base);
            if map[i] == i {
                let mut k = vecmat(&h, lw.wk.as_ref().unwrap());
                rope(&mut k, nkv, hd, t, cfg.rope_base);
                keys[t][i] = Some(k);
                values[t][i] = Some(vecmat(&h, lw.wv.as_ref().unwrap()));
            }
            let j = map[i];
            let visible = if diag { t } else { t + 1 };
            let mut attn = vec![0.0; nh * hd];
            if visible > 0 {
                for head in 0..nh {
                    let kvh = head / group;
                    let qh = &q[head * hd..(head + 1) * hd];
                    let scores: Vec<f64> = (0..visible)
                        .map(|s| {
                            let k = keys[s][j].as_ref().expect("target KVs computed");
                            let kh = &k[kvh * hd..(kvh + 1) * hd];
                            qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()
                        })
                        .collect();
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for s in 0..visible {
                        let v = values[s][j].as_ref().unwrap();
                        for d in 0..hd {
                            attn[head * hd + d] += e[s] / z * v[kvh * hd + d];
                        }
                    }
                }
            }
            let o = vecmat(&attn, &lw.wo);
            for (a, b) in x.iter_mut().zip(o) {
                *a += b;
            }
            let h2 = rms(&x, &lw.mlp_norm, cfg.norm_eps);
            let g = vecmat(&h2, &lw.w_gate);
            let u = vecmat(&h2, &lw.w_up);
            let act: Vec<f64> = g.iter().zip(&u).map(|(a, b)| silu(*a) * b).collect();
            let m = vecmat(&act, &lw.w_down);
            for (a, b) in x.iter_mut().zip(m) {
                *a += b;
            }
        }
        let h = rms(&x, &w.final_norm, cfg.norm_eps);
        let out = match &w.lm_head {
            Some(head) => vecmat(&h, head),
            None => {
                let e = w.embed.data();
                (0..cfg.vocab_size)
                    .map(|v| (0..hidden).map(|d| h[d] * e[v * hidden + d]).sum())
                    .collect()
            }
        };
        logits.push(out);
    }
    SeqOut { logits, keys, values }
}

/// A standard transformer is the identity topology, where token-by-token
/// evaluation with full causal attention is the textbook definition.
pub fn reference_logits(cfg: &ModelConfig, w: &ModelWeights<f64>, tokens: &[usize]) -> Vec<Vec<f64>> {
    sequential(cfg, &KVTopology::identity(cfg.n_layers), w, tokens).logits
}

/// Greedy continuation by recomputing the reference from scratch each step.
pub fn reference_greedy(cfg: &ModelConfig, w: &ModelWeights<f64>, prompt: &[usize], n: usize) -> Vec<usize> {
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..n {
        let logits = reference_logits(cfg, w, &seq);
        let last = logits.last().unwrap();
        let mut best = 0;
        for (i, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = i;
            }
        }
        out.push(best);
        seq.push(best);
    }
    out
}

/// Mean next-token NLL of `tokens` (all positions but the last predict the
/// next one) computed from oracle logits.
pub fn mean_nll(logits: &[Vec<f64>], tokens: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &target) in logits.iter().zip(&tokens[1..]) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[target];
    }
    total / (tokens.len() - 1) as f64
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Row-major flatten of oracle logits.
pub fn flat(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.concat()
}

/// Deterministic pseudo-random token ids.
pub fn tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) % vocab as u64) as usize
        })
        .collect()
}

/// Scales every weight so a randomly initialised tiny model has logits of
/// order one, which makes numeric comparisons meaningful.
pub fn amplify(w: &mut ModelWeights<f64>, factor: f64) {
    for t in w.tensors_mut() {
        if t.rank() == 2 {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }
}
