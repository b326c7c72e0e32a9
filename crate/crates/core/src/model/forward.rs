use super::attention::attend_shared;
use super::{BoundWeights, Iterations, Model};
use crate::error::{Error, Result};
use crate::inference::{KVCache, RunCounters, Stage};
use crate::numcore::{Scalar, Tape, Var};

/// A `[batch, seq_len]` block of token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    ids: Vec<usize>,
    batch: usize,
    seq_len: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<usize>, batch: usize) -> Result<Self> {
        if batch == 0 || ids.is_empty() || !ids.len().is_multiple_of(batch) {
            return Err(Error::dim("token batch", &[ids.len()], &[batch]));
        }
        let seq_len = ids.len() / batch;
        Ok(Self { ids, batch, seq_len })
    }

    pub fn single(ids: &[usize]) -> Result<Self> {
        Self::new(ids.to_vec(), 1)
    }

    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::data("token rows differ in length"));
        }
        Self::new(rows.concat(), rows.len())
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.seq_len..(b + 1) * self.seq_len]
    }
}

/// How a forward pass walks the layer stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardPlan {
    /// `Some` runs the iteration range `m + b` times.
    pub iterations: Option<Iterations>,
    /// Stop all but the last position after the highest KV layer.
    pub early_exit: bool,
    pub stage: Stage,
}

type KvStore = Vec<Option<(Var, Var)>>;

#[derive(Debug, Clone)]
struct Geometry {
    batch: usize,
    seq: usize,
    positions: Vec<usize>,
}

impl<T: Scalar> Model<T> {
    /// General forward pass; returns logits `[rows, vocab]` where rows is
    /// `batch * seq_len`, or `batch` after an early exit.
    ///
    /// With a cache, earlier positions are read from it and the new KVs of
    /// every KV layer are appended at the end of the pass.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bw: &BoundWeights,
        tokens: &TokenBatch,
        cache: Option<&mut KVCache<T>>,
        plan: ForwardPlan,
        counters: &mut RunCounters,
    ) -> Result<Var> {
        let cfg = &self.config;
        let topo = &self.topology;
        let n_layers = topo.n_layers();
        let (batch, seq) = (tokens.batch(), tokens.seq_len());
        let offset = cache.as_ref().map_or(0, |c| c.len());
        match cache.as_ref() {
            Some(c) => {
                if batch != 1 {
                    return Err(Error::state("a KV cache serves exactly one sequence"));
                }
                if offset + seq > c.capacity() {
                    return Err(Error::Capacity {
                        needed: offset + seq,
                        capacity: c.capacity(),
                    });
                }
            }
            None if seq > cfg.max_len => {
                return Err(Error::Capacity {
                    needed: seq,
                    capacity: cfg.max_len,
                });
            }
            None => {}
        }
        if counters.n_layers() != n_layers {
            return Err(Error::state("run counters sized for a different model"));
        }

        let range = topo.iter_range();
        let iterative = match (plan.iterations, range) {
            (Some(it), Some(r)) => {
                if it.b == 0 {
                    return Err(Error::config("b (backprop iterations) must be at least 1"));
                }
                Some((it, r))
            }
            (Some(_), None) => {
                return Err(Error::config(
                    "iterative forward needs a topology with upward dependencies; use the single pass",
                ));
            }
            (None, Some(_)) if !(cache.is_some() && seq == 1) => {
                return Err(Error::state(
                    "topology reads KVs from higher layers: full sequences need the iterative \
                     forward, the single pass only decodes one token against a cache",
                ));
            }
            (None, _) => None,
        };
        let diag = topo.has_upward_dependencies();

        let mut geo = Geometry {
            batch,
            seq,
            positions: (offset..offset + seq).collect(),
        };
        let mut x = tape.gather_rows(bw.embed, tokens.ids())?;

        let mut store: KvStore = vec![None; n_layers];
        if let Some(c) = cache.as_deref() {
            if offset > 0 {
                for i in topo.kv_layers() {
                    if let Some((k, v)) = c.get(i) {
                        store[i] = Some((tape.constant(k), tape.constant(v)));
                    }
                }
            }
        }
        let mut new_kv: KvStore = vec![None; n_layers];

        let exit_after = plan.early_exit.then(|| {
            let top = topo.last_kv_layer();
            range.map_or(top, |r| top.max(r.end))
        });
        let maybe_exit = |tape: &mut Tape<T>, x: Var, i: usize, geo: &mut Geometry| {
            match exit_after {
                Some(e) if i > e && geo.seq > 1 => {
                    let h = cfg.hidden;
                    let x3 = tape.reshape(x, &[geo.batch, geo.seq, h])?;
                    let last = tape.narrow(x3, 1, geo.seq - 1, 1)?;
                    let last_pos = geo.positions[geo.seq - 1];
                    geo.seq = 1;
                    geo.positions = vec![last_pos];
                    tape.reshape(last, &[geo.batch, h])
                }
                _ => Ok(x),
            }
        };

        let head_end = iterative.map_or(n_layers, |(_, r)| r.start);
        for i in 0..head_end {
            x = maybe_exit(tape, x, i, &mut geo)?;
            x = self.layer(tape, bw, i, x, &geo, &mut store, None, &mut new_kv, diag, plan.stage, counters)?;
        }

        if let Some((it, r)) = iterative {
            let base = store.clone();
            let grad_default = tape.grad_enabled();
            let x_in = x;
            let mut prev = base.clone();
            let mut last_new = new_kv.clone();
            for round in 0..it.total() {
                tape.set_grad_enabled(grad_default && round >= it.m);
                let mut cur = base.clone();
                let mut nk = new_kv.clone();
                let mut xi = x_in;
                for i in r.start..=r.end {
                    xi = self.layer(tape, bw, i, xi, &geo, &mut cur, Some(&prev), &mut nk, diag, plan.stage, counters)?;
                }
                prev = cur;
                last_new = nk;
                x = xi;
            }
            tape.set_grad_enabled(grad_default);
            store = prev;
            new_kv = last_new;
            for i in r.end + 1..n_layers {
                x = maybe_exit(tape, x, i, &mut geo)?;
                x = self.layer(tape, bw, i, x, &geo, &mut store, None, &mut new_kv, diag, plan.stage, counters)?;
            }
        }

        let h = tape.rms_norm(x, bw.final_norm, cfg.norm_eps)?;
        let logits = match bw.lm_head {
            Some(head) => tape.matmul(h, head)?,
            None => tape.matmul_nt(h, bw.embed)?,
        };

        if let Some(c) = cache {
            for (i, kv) in new_kv.iter().enumerate() {
                if let Some((k, v)) = kv {
                    let n = c.append(i, tape.value(*k).data(), tape.value(*v).data())?;
                    counters.record_cache_write(i, n);
                }
            }
        }
        Ok(logits)
    }

    #[allow(clippy::too_many_arguments)]
    fn layer(
        &self,
        tape: &mut Tape<T>,
        bw: &BoundWeights,
        i: usize,
        x: Var,
        geo: &Geometry,
        store: &mut KvStore,
        prev: Option<&KvStore>,
        new_kv: &mut KvStore,
        diag: bool,
        stage: Stage,
        counters: &mut RunCounters,
    ) -> Result<Var> {
        let cfg = &self.config;
        let lw = &bw.layers[i];
        counters.record_layer(stage, i, geo.batch * geo.seq);

        let h = tape.rms_norm(x, lw.attn_norm, cfg.norm_eps)?;
        let q = tape.matmul(h, lw.wq)?;
        let q = tape.reshape(q, &[geo.batch, geo.seq, cfg.n_heads, cfg.head_dim])?;
        let q = tape.rope(q, &geo.positions, cfg.rope_base)?;

        if let (Some(wk), Some(wv)) = (lw.wk, lw.wv) {
            let kv_shape = [geo.batch, geo.seq, cfg.n_kv_heads, cfg.head_dim];
            let k = tape.matmul(h, wk)?;
            let k = tape.reshape(k, &kv_shape)?;
            let k = tape.rope(k, &geo.positions, cfg.rope_base)?;
            let v = tape.matmul(h, wv)?;
            let v = tape.reshape(v, &kv_shape)?;
            new_kv[i] = Some((k, v));
            store[i] = Some(match store[i] {
                Some((pk, pv)) => (tape.concat(&[pk, k], 1)?, tape.concat(&[pv, v], 1)?),
                None => (k, v),
            });
        }

        let target = self.topology.target(i);
        let src = if target > i {
            prev.map_or(store[target], |p| p[target])
        } else {
            store[target]
        };
        let attn = attend_shared(tape, q, src, &geo.positions, diag)?;
        let o = tape.matmul(attn, lw.wo)?;
        let x = tape.add(x, o)?;

        let h = tape.rms_norm(x, lw.mlp_norm, cfg.norm_eps)?;
        let m = tape.swiglu(h, lw.w_gate, lw.w_up, lw.w_down)?;
        tape.add(x, m)
    }
}
