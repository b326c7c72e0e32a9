use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numcore::{Scalar, Tensor};
use crate::topology::KVTopology;

#[derive(Debug, Clone)]
struct LayerCache<T> {
    keys: Box<[T]>,
    values: Box<[T]>,
}

/// Preallocated key/value buffers for the KV layers of one sequence.
///
/// Non-KV layers own no buffers. Each buffer holds `capacity` positions of
/// `n_kv_heads × head_dim` scalars, laid out position-major.
#[derive(Debug, Clone)]
pub struct KVCache<T> {
    layers: Vec<Option<LayerCache<T>>>,
    lens: Vec<usize>,
    capacity: usize,
    n_kv_heads: usize,
    head_dim: usize,
}

impl<T: Scalar> KVCache<T> {
    pub fn new(cfg: &ModelConfig, topology: &KVTopology) -> Self {
        Self::with_capacity(cfg, topology, cfg.max_len)
    }

    pub fn with_capacity(cfg: &ModelConfig, topology: &KVTopology, capacity: usize) -> Self {
        let width = cfg.kv_width();
        let layers = (0..topology.n_layers())
            .map(|i| {
                topology.is_kv_layer(i).then(|| LayerCache {
                    keys: vec![T::zero(); capacity * width].into_boxed_slice(),
                    values: vec![T::zero(); capacity * width].into_boxed_slice(),
                })
            })
            .collect();
        Self {
            layers,
            lens: vec![0; topology.n_layers()],
            capacity,
            n_kv_heads: cfg.n_kv_heads,
            head_dim: cfg.head_dim,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Number of cached positions, shared by every KV layer.
    pub fn len(&self) -> usize {
        self.lens
            .iter()
            .zip(&self.layers)
            .find(|(_, l)| l.is_some())
            .map_or(0, |(&n, _)| n)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn has_layer(&self, layer: usize) -> bool {
        self.layers[layer].is_some()
    }

    pub fn layer_len(&self, layer: usize) -> usize {
        self.lens[layer]
    }

    pub fn n_buffers(&self) -> usize {
        2 * self.layers.iter().filter(|l| l.is_some()).count()
    }

    /// Bytes held by key and value buffers.
    pub fn allocated_bytes(&self) -> u64 {
        let per = std::mem::size_of::<T>() as u64;
        self.layers
            .iter()
            .flatten()
            .map(|l| (l.keys.len() + l.values.len()) as u64 * per)
            .sum()
    }

    pub fn clear(&mut self) {
        self.lens.fill(0);
    }

    fn width(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    /// Appends `positions` rows of keys and values to a KV layer.
    pub fn append(&mut self, layer: usize, keys: &[T], values: &[T]) -> Result<usize> {
        let width = self.width();
        if keys.len() != values.len() || !keys.len().is_multiple_of(width) {
            return Err(Error::dim("cache append", &[keys.len()], &[values.len(), width]));
        }
        let n = keys.len() / width;
        let start = self.lens[layer];
        if start + n > self.capacity {
            return Err(Error::Capacity {
                needed: start + n,
                capacity: self.capacity,
            });
        }
        let buf = self.layers[layer]
            .as_mut()
            .ok_or_else(|| Error::state(format!("layer {} is not a KV layer", layer + 1)))?;
        buf.keys[start * width..(start + n) * width].copy_from_slice(keys);
        buf.values[start * width..(start + n) * width].copy_from_slice(values);
        self.lens[layer] += n;
        Ok(n)
    }

    /// Cached keys and values of a KV layer as `[1, len, n_kv_heads, head_dim]`.
    pub fn get(&self, layer: usize) -> Option<(Tensor<T>, Tensor<T>)> {
        let buf = self.layers[layer].as_ref()?;
        let n = self.lens[layer];
        let w = self.width();
        let shape = [1, n, self.n_kv_heads, self.head_dim];
        let k = Tensor::new(&shape, buf.keys[..n * w].to_vec()).expect("cache shape");
        let v = Tensor::new(&shape, buf.values[..n * w].to_vec()).expect("cache shape");
        Some((k, v))
    }
}
