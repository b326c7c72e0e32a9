//! KV-cached prefill and decode.
//!
//! Prefill encodes the prompt (iteratively for topologies with upward
//! dependencies) and exits early above the highest KV layer for every prompt
//! position except the last. Decoding is one single-pass step per token.

mod cache;
mod counters;
mod sampler;

pub use cache::KVCache;
pub use counters::{RunCounters, Stage};
pub use sampler::Sampler;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{ForwardPlan, Iterations, Model, TokenBatch};
use crate::numcore::{Scalar, Tape, Tensor};

/// Prompt plus generation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct GenRequest {
    pub prompt: Vec<usize>,
    pub gen_len: usize,
    pub sampler: Sampler,
    pub seed: u64,
}

impl GenRequest {
    pub fn greedy(prompt: Vec<usize>, gen_len: usize) -> Self {
        Self {
            prompt,
            gen_len,
            sampler: Sampler::Greedy,
            seed: 0,
        }
    }

    pub fn validate(&self, max_len: usize) -> Result<()> {
        if self.prompt.is_empty() {
            return Err(Error::data("prompt must contain at least one token"));
        }
        if self.gen_len == 0 {
            return Err(Error::config("generation length must be at least 1"));
        }
        let needed = self.prompt.len() + self.gen_len;
        if needed > max_len {
            return Err(Error::Capacity {
                needed,
                capacity: max_len,
            });
        }
        Ok(())
    }
}

/// Output of [`generate`].
#[derive(Debug, Clone)]
pub struct Generation {
    pub tokens: Vec<usize>,
    pub counters: RunCounters,
    pub prefill_secs: f64,
    pub decode_secs: f64,
    pub cache_bytes: u64,
}

impl Generation {
    pub fn total_secs(&self) -> f64 {
        self.prefill_secs + self.decode_secs
    }

    /// Generated tokens per second of wall-clock time, prefill included.
    pub fn tokens_per_sec(&self) -> f64 {
        let t = self.total_secs();
        if t > 0.0 {
            self.tokens.len() as f64 / t
        } else {
            f64::INFINITY
        }
    }
}

/// Encodes `prompt` into an empty cache and returns the logits of the last
/// position.
pub fn prefill<T: Scalar>(
    model: &Model<T>,
    prompt: &[usize],
    iterations: Iterations,
    cache: &mut KVCache<T>,
    counters: &mut RunCounters,
) -> Result<Tensor<T>> {
    prefill_with_options(model, prompt, iterations, true, cache, counters)
}

/// [`prefill`] with early exit switchable; with it off every prompt position
/// runs through every layer.
pub fn prefill_with_options<T: Scalar>(
    model: &Model<T>,
    prompt: &[usize],
    iterations: Iterations,
    early_exit: bool,
    cache: &mut KVCache<T>,
    counters: &mut RunCounters,
) -> Result<Tensor<T>> {
    if !cache.is_empty() {
        return Err(Error::state("prefill needs an empty cache"));
    }
    if prompt.len() > cache.capacity() {
        return Err(Error::Capacity {
            needed: prompt.len(),
            capacity: cache.capacity(),
        });
    }
    let tokens = TokenBatch::single(prompt)?;
    let plan = ForwardPlan {
        iterations: model
            .topology
            .has_upward_dependencies()
            .then_some(iterations),
        early_exit,
        stage: Stage::Prefill,
    };
    let mut tape = Tape::inference();
    let bw = model.weights.bind(&mut tape, false);
    let out = model.forward(&mut tape, &bw, &tokens, Some(cache), plan, counters)?;
    last_row(tape.value(out))
}

fn last_row<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let rows = logits.shape()[0];
    logits.narrow(0, rows - 1, 1)?.reshape(&[logits.shape()[1]])
}

/// Runs one token through the full stack against the cache and returns its
/// logits.
pub fn decode_logits<T: Scalar>(
    model: &Model<T>,
    token: usize,
    cache: &mut KVCache<T>,
    counters: &mut RunCounters,
) -> Result<Tensor<T>> {
    if cache.is_empty() {
        return Err(Error::state("decode needs a prefilled cache"));
    }
    if cache.len() >= cache.capacity() {
        return Err(Error::Capacity {
            needed: cache.len() + 1,
            capacity: cache.capacity(),
        });
    }
    let tokens = TokenBatch::single(&[token])?;
    let plan = ForwardPlan {
        iterations: None,
        early_exit: false,
        stage: Stage::Decode,
    };
    let mut tape = Tape::inference();
    let bw = model.weights.bind(&mut tape, false);
    let out = model.forward(&mut tape, &bw, &tokens, Some(cache), plan, counters)?;
    last_row(tape.value(out))
}

/// [`decode_logits`] followed by sampling.
pub fn decode_step<T: Scalar>(
    model: &Model<T>,
    token: usize,
    cache: &mut KVCache<T>,
    sampler: &Sampler,
    rng: &mut ChaCha8Rng,
    counters: &mut RunCounters,
) -> Result<usize> {
    let logits = decode_logits(model, token, cache, counters)?;
    Ok(sampler.sample(logits.data(), rng))
}

/// Prefill followed by `gen_len` decode steps.
///
/// The first generated token comes from the prefill logits; each decode step
/// feeds the latest token, so after the last step the cache holds all
/// `prompt + gen_len` positions.
pub fn generate<T: Scalar>(
    model: &Model<T>,
    req: &GenRequest,
    iterations: Iterations,
) -> Result<Generation> {
    req.validate(model.config.max_len)?;
    let mut cache = KVCache::new(&model.config, &model.topology);
    let mut counters = model.counters();
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);

    let start = Instant::now();
    let logits = prefill(model, &req.prompt, iterations, &mut cache, &mut counters)?;
    let mut tokens = vec![req.sampler.sample(logits.data(), &mut rng)];
    let prefill_secs = start.elapsed().as_secs_f64();

    let start = Instant::now();
    for step in 0..req.gen_len {
        let last = *tokens.last().expect("non-empty");
        let logits = decode_logits(model, last, &mut cache, &mut counters)?;
        if step + 1 < req.gen_len {
            tokens.push(req.sampler.sample(logits.data(), &mut rng));
        }
    }
    let decode_secs = start.elapsed().as_secs_f64();

    Ok(Generation {
        tokens,
        counters,
        prefill_secs,
        decode_secs,
        cache_bytes: cache.allocated_bytes(),
    })
}

/// Closed-form count of prefill positions per layer for a prompt of
/// `prompt_len` tokens with early exit.
pub fn expected_prefill_positions(
    topology: &crate::topology::KVTopology,
    prompt_len: usize,
    iterations: Iterations,
) -> Vec<u64> {
    let x = prompt_len as u64;
    let rounds = iterations.total() as u64;
    let range = topology.iter_range();
    let exit_after = range.map_or(topology.last_kv_layer(), |r| r.end.max(topology.last_kv_layer()));
    (0..topology.n_layers())
        .map(|i| match range {
            Some(r) if r.contains(i) => rounds * x,
            _ if i > exit_after => x.min(1),
            _ => x,
        })
        .collect()
}
