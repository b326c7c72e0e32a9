//! Binary checkpoint format.
//!
//! ```text
//! magic        8 bytes  "KVSHCKPT"
//! version      u32
//! header_len   u32, then header_len bytes of UTF-8:
//!                [model]     ModelConfig block
//!                [topology]  KVTopology block
//!                [train]     step = N
//! blob_count   u32, then per blob:
//!                name_len u32, name (UTF-8)
//!                ndim u32, dims u64 x ndim
//!                data f32 x prod(dims)
//! ```
//!
//! All integers and floats are little-endian; tensors are row-major. Blobs
//! appear in canonical weight order and must match the header exactly.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{LayerWeights, Model, ModelConfig, ModelWeights};
use crate::numcore::{Scalar, Tensor};
use crate::topology::KVTopology;

pub const MAGIC: &[u8; 8] = b"KVSHCKPT";
pub const VERSION: u32 = 1;

/// Model configuration, topology, training step and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub topology: KVTopology,
    pub step: u64,
    pub weights: ModelWeights<f32>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, topology: KVTopology, step: u64, weights: ModelWeights<f32>) -> Result<Self> {
        // reuse the model's structural checks
        let model = Model::new(config, topology, weights)?;
        check_shapes(&model.config, &model.topology, &model.weights)?;
        Ok(Self {
            config: model.config,
            topology: model.topology,
            step,
            weights: model.weights,
        })
    }

    pub fn from_model<T: Scalar>(model: &Model<T>, step: u64) -> Self {
        Self {
            config: model.config.clone(),
            topology: model.topology.clone(),
            step,
            weights: model.weights.cast(),
        }
    }

    pub fn to_model<T: Scalar>(&self) -> Result<Model<T>> {
        Model::new(self.config.clone(), self.topology.clone(), self.weights.cast())
    }

    /// Number of `W_K` plus `W_V` blobs.
    pub fn kv_blob_count(&self) -> usize {
        self.weights.kv_projection_count()
    }

    pub fn header_text(&self) -> String {
        format!(
            "[model]\n{}[topology]\n{}[train]\nstep = {}\n",
            self.config.to_config_block(),
            self.topology.to_config_block(),
            self.step
        )
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = self.header_text();
        let named = self.weights.named();
        let payload: usize = named.iter().map(|(n, t)| 8 + n.len() + 8 * t.rank() + 4 * t.numel()).sum();
        let mut out = Vec::with_capacity(20 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, t) in named {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let header_len = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(header_len)?)
            .map_err(|_| Error::format("checkpoint header is not UTF-8"))?;
        let (config, topology, step) = parse_header(header)?;
        if config.n_layers != topology.n_layers() {
            return Err(Error::format(format!(
                "header disagrees: model has {} layers, topology {}",
                config.n_layers,
                topology.n_layers()
            )));
        }

        let expected = expected_blobs(&config, &topology);
        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(Error::format(format!(
                "expected {} blobs for this model, found {count}",
                expected.len()
            )));
        }
        let mut tensors = Vec::with_capacity(count);
        for (want_name, want_shape) in &expected {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format("blob name is not UTF-8"))?;
            if name != want_name {
                return Err(Error::format(format!("expected blob `{want_name}`, found `{name}`")));
            }
            let ndim = r.u32()? as usize;
            if ndim != want_shape.len() {
                return Err(Error::format(format!("blob `{name}` has rank {ndim}, expected {}", want_shape.len())));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()?);
            }
            if shape.iter().zip(want_shape).any(|(&a, &b)| a != b as u64) {
                return Err(Error::format(format!("blob `{name}` has shape {shape:?}, expected {want_shape:?}")));
            }
            let n: usize = want_shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::format("blob too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Tensor::new(want_shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(format!("{} trailing bytes after last blob", bytes.len() - r.pos)));
        }
        let weights = assemble(&config, &topology, tensors);
        Self::new(config, topology, step, weights)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

fn parse_header(text: &str) -> Result<(ModelConfig, KVTopology, u64)> {
    let mut sections: Vec<(&str, String)> = Vec::new();
    for line in text.lines() {
        let t = line.trim();
        if t.starts_with('[') && t.ends_with(']') {
            sections.push((&t[1..t.len() - 1], String::new()));
        } else if let Some((_, body)) = sections.last_mut() {
            body.push_str(line);
            body.push('\n');
        } else if !t.is_empty() {
            return Err(Error::format("checkpoint header text before first section"));
        }
    }
    let names: Vec<&str> = sections.iter().map(|(n, _)| *n).collect();
    if names != ["model", "topology", "train"] {
        return Err(Error::format(format!(
            "checkpoint header sections must be [model], [topology], [train]; found {names:?}"
        )));
    }
    let config = ModelConfig::from_config_block(&sections[0].1)?;
    let topology = KVTopology::from_config_block(&sections[1].1)?;
    let train = sections[2].1.trim();
    let step = train
        .strip_prefix("step")
        .and_then(|s| s.trim_start().strip_prefix('='))
        .and_then(|s| s.trim().parse::<u64>().ok())
        .ok_or_else(|| Error::format(format!("bad [train] section `{train}`")))?;
    Ok((config, topology, step))
}

/// Canonical blob names and shapes for a model.
pub fn expected_blobs(cfg: &ModelConfig, topo: &KVTopology) -> Vec<(String, Vec<usize>)> {
    let (h, q, kv, inter, v) = (cfg.hidden, cfg.q_width(), cfg.kv_width(), cfg.intermediate, cfg.vocab_size);
    let mut out = vec![("embed".to_string(), vec![v, h])];
    for i in 0..cfg.n_layers {
        let p = |n: &str| format!("layers.{i}.{n}");
        out.push((p("attn_norm"), vec![h]));
        out.push((p("wq"), vec![h, q]));
        if topo.is_kv_layer(i) {
            out.push((p("wk"), vec![h, kv]));
            out.push((p("wv"), vec![h, kv]));
        }
        out.push((p("wo"), vec![q, h]));
        out.push((p("mlp_norm"), vec![h]));
        out.push((p("w_gate"), vec![h, inter]));
        out.push((p("w_up"), vec![h, inter]));
        out.push((p("w_down"), vec![inter, h]));
    }
    out.push(("final_norm".to_string(), vec![h]));
    if !cfg.tie_embeddings {
        out.push(("lm_head".to_string(), vec![h, v]));
    }
    out
}

fn check_shapes(cfg: &ModelConfig, topo: &KVTopology, w: &ModelWeights<f32>) -> Result<()> {
    for ((name, t), (_, shape)) in w.named().iter().zip(expected_blobs(cfg, topo)) {
        if t.shape() != shape.as_slice() {
            return Err(Error::config(format!(
                "weight `{name}` has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

fn assemble(cfg: &ModelConfig, topo: &KVTopology, tensors: Vec<Tensor<f32>>) -> ModelWeights<f32> {
    let mut it = tensors.into_iter();
    let mut next = || it.next().expect("blob count checked");
    let embed = next();
    let layers = (0..cfg.n_layers)
        .map(|i| {
            let attn_norm = next();
            let wq = next();
            let (wk, wv) = if topo.is_kv_layer(i) {
                (Some(next()), Some(next()))
            } else {
                (None, None)
            };
            LayerWeights {
                attn_norm,
                wq,
                wk,
                wv,
                wo: next(),
                mlp_norm: next(),
                w_gate: next(),
                w_up: next(),
                w_down: next(),
            }
        })
        .collect();
    let final_norm = next();
    let lm_head = (!cfg.tie_embeddings).then(&mut next);
    ModelWeights {
        embed,
        layers,
        final_norm,
        lm_head,
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}
