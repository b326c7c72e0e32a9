use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tape, Tensor, Var};
use crate::topology::KVTopology;

/// Weights of one decoder layer. `wk`/`wv` exist only on KV layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Option<Tensor<T>>,
    pub wv: Option<Tensor<T>>,
    pub wo: Tensor<T>,
    pub mlp_norm: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

/// Every trainable tensor of the model. Projections are stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T> {
    pub embed: Tensor<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Tensor<T>,
    /// `None` when the head is tied to `embed`.
    pub lm_head: Option<Tensor<T>>,
}

impl<T: Scalar> ModelWeights<T> {
    /// Normal(0, 0.02) init; `wo` and `w_down` are further scaled by
    /// `1/sqrt(2L)`. Norm weights start at one.
    pub fn init(cfg: &ModelConfig, topology: &KVTopology, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if cfg.n_layers != topology.n_layers() {
            return Err(Error::config(format!(
                "model has {} layers but topology has {}",
                cfg.n_layers,
                topology.n_layers()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let resid_scale = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        let mut draw = |shape: &[usize], scale: f64| {
            Tensor::from_fn(shape, |_| T::of(normal.sample(&mut rng) * scale))
        };
        let (h, q, kv, inter) = (cfg.hidden, cfg.q_width(), cfg.kv_width(), cfg.intermediate);
        let embed = draw(&[cfg.vocab_size, h], 1.0);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let wq = draw(&[h, q], 1.0);
            let (wk, wv) = if topology.is_kv_layer(i) {
                (Some(draw(&[h, kv], 1.0)), Some(draw(&[h, kv], 1.0)))
            } else {
                (None, None)
            };
            let wo = draw(&[q, h], resid_scale);
            let w_gate = draw(&[h, inter], 1.0);
            let w_up = draw(&[h, inter], 1.0);
            let w_down = draw(&[inter, h], resid_scale);
            layers.push(LayerWeights {
                attn_norm: Tensor::ones(&[h]),
                wq,
                wk,
                wv,
                wo,
                mlp_norm: Tensor::ones(&[h]),
                w_gate,
                w_up,
                w_down,
            });
        }
        let lm_head = (!cfg.tie_embeddings).then(|| draw(&[h, cfg.vocab_size], 1.0));
        Ok(Self {
            embed,
            layers,
            final_norm: Tensor::ones(&[h]),
            lm_head,
        })
    }

    /// All tensors in canonical order with their checkpoint names.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            out.push((p("attn_norm"), &l.attn_norm));
            out.push((p("wq"), &l.wq));
            if let (Some(k), Some(v)) = (&l.wk, &l.wv) {
                out.push((p("wk"), k));
                out.push((p("wv"), v));
            }
            out.push((p("wo"), &l.wo));
            out.push((p("mlp_norm"), &l.mlp_norm));
            out.push((p("w_gate"), &l.w_gate));
            out.push((p("w_up"), &l.w_up));
            out.push((p("w_down"), &l.w_down));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        if let Some(head) = &self.lm_head {
            out.push(("lm_head".to_string(), head));
        }
        out
    }

    /// Mutable tensors in the same order as [`ModelWeights::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.embed];
        for l in &mut self.layers {
            out.push(&mut l.attn_norm);
            out.push(&mut l.wq);
            if let (Some(k), Some(v)) = (&mut l.wk, &mut l.wv) {
                out.push(k);
                out.push(v);
            }
            out.push(&mut l.wo);
            out.push(&mut l.mlp_norm);
            out.push(&mut l.w_gate);
            out.push(&mut l.w_up);
            out.push(&mut l.w_down);
        }
        out.push(&mut self.final_norm);
        if let Some(head) = &mut self.lm_head {
            out.push(head);
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Number of `W_K` plus `W_V` matrices present.
    pub fn kv_projection_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| usize::from(l.wk.is_some()) + usize::from(l.wv.is_some()))
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        let c = |t: &Tensor<T>| t.cast::<U>();
        ModelWeights {
            embed: c(&self.embed),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm: c(&l.attn_norm),
                    wq: c(&l.wq),
                    wk: l.wk.as_ref().map(c),
                    wv: l.wv.as_ref().map(c),
                    wo: c(&l.wo),
                    mlp_norm: c(&l.mlp_norm),
                    w_gate: c(&l.w_gate),
                    w_up: c(&l.w_up),
                    w_down: c(&l.w_down),
                })
                .collect(),
            final_norm: c(&self.final_norm),
            lm_head: self.lm_head.as_ref().map(c),
        }
    }

    /// Places every tensor on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundWeights {
        let mut leaf = |t: &Tensor<T>| tape.leaf(t.clone(), trainable);
        let embed = leaf(&self.embed);
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let attn_norm = leaf(&l.attn_norm);
                let wq = leaf(&l.wq);
                let wk = l.wk.as_ref().map(&mut leaf);
                let wv = l.wv.as_ref().map(&mut leaf);
                BoundLayer {
                    attn_norm,
                    wq,
                    wk,
                    wv,
                    wo: leaf(&l.wo),
                    mlp_norm: leaf(&l.mlp_norm),
                    w_gate: leaf(&l.w_gate),
                    w_up: leaf(&l.w_up),
                    w_down: leaf(&l.w_down),
                }
            })
            .collect();
        let final_norm = leaf(&self.final_norm);
        let lm_head = self.lm_head.as_ref().map(&mut leaf);
        BoundWeights {
            embed,
            layers,
            final_norm,
            lm_head,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundLayer {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Option<Var>,
    pub wv: Option<Var>,
    pub wo: Var,
    pub mlp_norm: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

/// [`ModelWeights`] placed on a tape.
#[derive(Debug, Clone)]
pub struct BoundWeights {
    pub embed: Var,
    pub layers: Vec<BoundLayer>,
    pub final_norm: Var,
    pub lm_head: Option<Var>,
}

impl BoundWeights {
    /// Vars in the same order as [`ModelWeights::named`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.embed];
        for l in &self.layers {
            out.push(l.attn_norm);
            out.push(l.wq);
            if let (Some(k), Some(v)) = (l.wk, l.wv) {
                out.push(k);
                out.push(v);
            }
            out.extend([l.wo, l.mlp_norm, l.w_gate, l.w_up, l.w_down]);
        }
        out.push(self.final_norm);
        out.extend(self.lm_head);
        out
    }
}
