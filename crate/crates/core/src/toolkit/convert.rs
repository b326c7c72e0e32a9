use super::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{LayerWeights, ModelWeights};
use crate::numcore::Tensor;
use crate::topology::KVTopology;

/// Re-targets a checkpoint to `topology` by averaging key/value projections.
///
/// For each KV layer `j` of the new topology, `W_K(j)` (and `W_V(j)`) becomes
/// the elementwise mean, over every layer `i` with `kv(i) = j`, of the
/// projection layer `i` reads in the source checkpoint. Non-KV layers lose
/// their projections; every other tensor is copied.
///
/// Means are accumulated in f64 and rounded once, so converting an already
/// converted checkpoint to the same topology is a no-op, and converting a
/// standard checkpoint to the identity topology copies it bit for bit.
pub fn convert_pretrained(source: &Checkpoint, topology: &KVTopology) -> Result<Checkpoint> {
    let n = source.config.n_layers;
    if topology.n_layers() != n {
        return Err(Error::config(format!(
            "checkpoint has {n} layers, topology has {}",
            topology.n_layers()
        )));
    }
    let src = &source.weights;
    // projection each source layer effectively uses
    let effective = |i: usize| -> Result<(&Tensor<f32>, &Tensor<f32>)> {
        let owner = source.topology.target(i);
        let l = &src.layers[owner];
        match (&l.wk, &l.wv) {
            (Some(k), Some(v)) => Ok((k, v)),
            _ => Err(Error::data(format!("checkpoint is missing W_K/W_V for layer {}", owner + 1))),
        }
    };

    let mut layers = Vec::with_capacity(n);
    for (j, l) in src.layers.iter().enumerate() {
        let (wk, wv) = if topology.is_kv_layer(j) {
            let members = topology.sharing_set(j);
            let mut ks = Vec::with_capacity(members.len());
            let mut vs = Vec::with_capacity(members.len());
            for &i in &members {
                let (k, v) = effective(i)?;
                ks.push(k);
                vs.push(v);
            }
            (Some(mean(&ks)?), Some(mean(&vs)?))
        } else {
            (None, None)
        };
        layers.push(LayerWeights {
            wk,
            wv,
            ..l.clone()
        });
    }
    let weights = ModelWeights {
        embed: src.embed.clone(),
        layers,
        final_norm: src.final_norm.clone(),
        lm_head: src.lm_head.clone(),
    };
    Checkpoint::new(source.config.clone(), topology.clone(), source.step, weights)
}

fn mean(parts: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = parts.first().ok_or_else(|| Error::data("empty sharing set"))?;
    if parts.len() == 1 {
        return Ok((*first).clone());
    }
    let mut acc = vec![0.0f64; first.numel()];
    for p in parts {
        if p.shape() != first.shape() {
            return Err(Error::dim("convert", first.shape(), p.shape()));
        }
        for (a, &x) in acc.iter_mut().zip(p.data()) {
            *a += f64::from(x);
        }
    }
    let n = parts.len() as f64;
    Tensor::new(first.shape(), acc.into_iter().map(|a| (a / n) as f32).collect())
}
