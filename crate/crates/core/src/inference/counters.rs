/// Phase a forward pass belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Train,
    Prefill,
    Decode,
}

impl Stage {
    fn slot(self) -> usize {
        match self {
            Stage::Train => 0,
            Stage::Prefill => 1,
            Stage::Decode => 2,
        }
    }
}

/// Per-layer invocation and cache-write counters.
///
/// `calls` counts layer forward invocations; `positions` counts token
/// positions pushed through a layer (a call over 8 positions adds 8).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunCounters {
    calls: [Vec<u64>; 3],
    positions: [Vec<u64>; 3],
    cache_writes: Vec<u64>,
}

impl RunCounters {
    pub fn new(n_layers: usize) -> Self {
        let z = || vec![0; n_layers];
        Self {
            calls: [z(), z(), z()],
            positions: [z(), z(), z()],
            cache_writes: z(),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.cache_writes.len()
    }

    pub(crate) fn record_layer(&mut self, stage: Stage, layer: usize, positions: usize) {
        self.calls[stage.slot()][layer] += 1;
        self.positions[stage.slot()][layer] += positions as u64;
    }

    pub(crate) fn record_cache_write(&mut self, layer: usize, positions: usize) {
        self.cache_writes[layer] += positions as u64;
    }

    pub fn calls(&self, stage: Stage, layer: usize) -> u64 {
        self.calls[stage.slot()][layer]
    }

    pub fn positions(&self, stage: Stage, layer: usize) -> u64 {
        self.positions[stage.slot()][layer]
    }

    pub fn positions_per_layer(&self, stage: Stage) -> &[u64] {
        &self.positions[stage.slot()]
    }

    pub fn total_positions(&self, stage: Stage) -> u64 {
        self.positions[stage.slot()].iter().sum()
    }

    pub fn total_calls(&self, stage: Stage) -> u64 {
        self.calls[stage.slot()].iter().sum()
    }

    pub fn cache_writes(&self, layer: usize) -> u64 {
        self.cache_writes[layer]
    }

    pub fn cache_writes_per_layer(&self) -> &[u64] {
        &self.cache_writes
    }

    pub fn total_cache_writes(&self) -> u64 {
        self.cache_writes.iter().sum()
    }

    pub fn merge(&mut self, other: &RunCounters) {
        for s in 0..3 {
            for (a, b) in self.calls[s].iter_mut().zip(&other.calls[s]) {
                *a += b;
            }
            for (a, b) in self.positions[s].iter_mut().zip(&other.positions[s]) {
                *a += b;
            }
        }
        for (a, b) in self.cache_writes.iter_mut().zip(&other.cache_writes) {
            *a += b;
        }
    }
}
