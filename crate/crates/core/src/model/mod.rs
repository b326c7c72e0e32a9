//! Decoder-only transformer whose attention reads KVs through a
//! [`KVTopology`].

mod attention;
mod config;
mod forward;
mod weights;

pub use attention::attend_shared;
pub use config::ModelConfig;
pub use forward::{ForwardPlan, TokenBatch};
pub use weights::{BoundLayer, BoundWeights, LayerWeights, ModelWeights};

use crate::error::{Error, Result};
use crate::inference::{RunCounters, Stage};
use crate::numcore::{Scalar, Tape, Tensor, Var};
use crate::topology::KVTopology;

/// Iteration counts for layers with upward dependencies: `m` gradient-free
/// rounds followed by `b` differentiable ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Iterations {
    pub m: usize,
    pub b: usize,
}

impl Iterations {
    pub const fn new(m: usize, b: usize) -> Self {
        Self { m, b }
    }

    pub const fn total(&self) -> usize {
        self.m + self.b
    }
}

impl Default for Iterations {
    fn default() -> Self {
        Self { m: 7, b: 2 }
    }
}

/// Configuration, topology and weights of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub topology: KVTopology,
    pub weights: ModelWeights<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, topology: KVTopology, weights: ModelWeights<T>) -> Result<Self> {
        config.validate()?;
        if config.n_layers != topology.n_layers() || weights.layers.len() != config.n_layers {
            return Err(Error::config(format!(
                "layer counts disagree: config {}, topology {}, weights {}",
                config.n_layers,
                topology.n_layers(),
                weights.layers.len()
            )));
        }
        for (i, l) in weights.layers.iter().enumerate() {
            if l.wk.is_some() != topology.is_kv_layer(i) || l.wv.is_some() != topology.is_kv_layer(i) {
                return Err(Error::config(format!(
                    "layer {}: K/V projections must be present exactly on KV layers",
                    i + 1
                )));
            }
        }
        if weights.lm_head.is_none() != config.tie_embeddings {
            return Err(Error::config("output head presence disagrees with tie_embeddings"));
        }
        Ok(Self {
            config,
            topology,
            weights,
        })
    }

    pub fn init(config: ModelConfig, topology: KVTopology, seed: u64) -> Result<Self> {
        let weights = ModelWeights::init(&config, &topology, seed)?;
        Self::new(config, topology, weights)
    }

    pub fn counters(&self) -> RunCounters {
        RunCounters::new(self.config.n_layers)
    }

    /// One pass over the stack. Valid for topologies without upward
    /// dependencies, or for decoding a single token against a cache.
    pub fn forward_single_pass(
        &self,
        tape: &mut Tape<T>,
        bw: &BoundWeights,
        tokens: &TokenBatch,
        cache: Option<&mut crate::inference::KVCache<T>>,
        counters: &mut RunCounters,
    ) -> Result<Var> {
        let stage = if cache.is_some() { Stage::Decode } else { Stage::Train };
        let plan = ForwardPlan {
            iterations: None,
            early_exit: false,
            stage,
        };
        self.forward(tape, bw, tokens, cache, plan, counters)
    }

    /// Iterative pass over a topology with upward dependencies: `m`
    /// gradient-free rounds then `b` differentiable rounds over the iteration
    /// range, each reading target KVs of the previous round.
    pub fn forward_iterative(
        &self,
        tape: &mut Tape<T>,
        bw: &BoundWeights,
        tokens: &TokenBatch,
        iterations: Iterations,
        counters: &mut RunCounters,
    ) -> Result<Var> {
        let plan = ForwardPlan {
            iterations: Some(iterations),
            early_exit: false,
            stage: Stage::Train,
        };
        self.forward(tape, bw, tokens, None, plan, counters)
    }

    /// Picks the single pass or the iterative pass from the topology.
    pub fn forward_auto(
        &self,
        tape: &mut Tape<T>,
        bw: &BoundWeights,
        tokens: &TokenBatch,
        iterations: Iterations,
        counters: &mut RunCounters,
    ) -> Result<Var> {
        if self.topology.has_upward_dependencies() {
            self.forward_iterative(tape, bw, tokens, iterations, counters)
        } else {
            self.forward_single_pass(tape, bw, tokens, None, counters)
        }
    }

    /// Gradient-free logits for every position.
    pub fn logits(&self, tokens: &TokenBatch, iterations: Iterations) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let bw = self.weights.bind(&mut tape, false);
        let mut counters = self.counters();
        let out = self.forward_auto(&mut tape, &bw, tokens, iterations, &mut counters)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{Partitioning, Positioning};

    #[test]
    fn weights_must_match_topology() {
        let cfg = ModelConfig::tiny(4, 16, 32);
        let a = KVTopology::identity(4);
        let b = KVTopology::build(Partitioning::Pizza, Positioning::Bottom, 4, 2).unwrap();
        let w = ModelWeights::<f32>::init(&cfg, &a, 0).unwrap();
        assert!(Model::new(cfg.clone(), b, w.clone()).is_err());
        assert!(Model::new(cfg, a, w).is_ok());
    }

    #[test]
    fn single_pass_rejects_upward_sequences() {
        let cfg = ModelConfig::tiny(4, 16, 32);
        let t = KVTopology::build(Partitioning::Pizza, Positioning::Top, 4, 2).unwrap();
        let model = Model::<f64>::init(cfg, t, 0).unwrap();
        let mut tape = Tape::new();
        let bw = model.weights.bind(&mut tape, false);
        let tokens = TokenBatch::single(&[1, 2, 3]).unwrap();
        let mut c = model.counters();
        let err = model
            .forward_single_pass(&mut tape, &bw, &tokens, None, &mut c)
            .unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn iterative_rejects_bottom_topology() {
        let cfg = ModelConfig::tiny(4, 16, 32);
        let t = KVTopology::build(Partitioning::Pizza, Positioning::Bottom, 4, 2).unwrap();
        let model = Model::<f64>::init(cfg, t, 0).unwrap();
        let mut tape = Tape::new();
        let bw = model.weights.bind(&mut tape, false);
        let tokens = TokenBatch::single(&[1, 2, 3]).unwrap();
        let mut c = model.counters();
        let err = model
            .forward_iterative(&mut tape, &bw, &tokens, Iterations::new(1, 1), &mut c)
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn iterative_counts_rounds_per_layer() {
        let cfg = ModelConfig::tiny(6, 16, 32);
        let t = KVTopology::build(Partitioning::Sandwich, Positioning::Top, 6, 3).unwrap();
        // kv = [1,5,5,5,5,6]; range [2,5]
        let model = Model::<f64>::init(cfg, t, 0).unwrap();
        let mut tape = Tape::new();
        let bw = model.weights.bind(&mut tape, true);
        let tokens = TokenBatch::single(&[1, 2, 3, 4]).unwrap();
        let mut c = model.counters();
        model
            .forward_iterative(&mut tape, &bw, &tokens, Iterations::new(3, 2), &mut c)
            .unwrap();
        let calls: Vec<u64> = (0..6).map(|i| c.calls(Stage::Train, i)).collect();
        assert_eq!(calls, vec![1, 5, 5, 5, 5, 1]);
    }

    #[test]
    fn length_one_is_independent_of_rounds() {
        let cfg = ModelConfig::tiny(4, 16, 32);
        let t = KVTopology::build(Partitioning::Pizza, Positioning::Middle, 4, 1).unwrap();
        let model = Model::<f64>::init(cfg, t, 3).unwrap();
        let tokens = TokenBatch::single(&[5]).unwrap();
        let a = model.logits(&tokens, Iterations::new(0, 1)).unwrap();
        let b = model.logits(&tokens, Iterations::new(6, 2)).unwrap();
        assert_eq!(a, b);
    }
}
