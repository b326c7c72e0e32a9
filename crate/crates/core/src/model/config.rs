use crate::error::{Error, Result};

/// Upper bound on any single dimension read from a file.
const MAX_DIM: usize = 1 << 24;

/// Architectural hyperparameters of the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hidden: usize,
    pub intermediate: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
    /// Reuse the embedding table as the output head.
    pub tie_embeddings: bool,
}

impl ModelConfig {
    /// 12-layer, 768-wide model with 6 KV heads.
    pub fn preset_110m() -> Self {
        Self {
            hidden: 768,
            intermediate: 2048,
            n_layers: 12,
            n_heads: 12,
            n_kv_heads: 6,
            head_dim: 64,
            vocab_size: 32_000,
            max_len: 1024,
            rope_base: 10_000.0,
            norm_eps: 1e-5,
            tie_embeddings: false,
        }
    }

    /// 22-layer, 2048-wide model with 4 KV heads (TinyLlama shape).
    pub fn preset_1b1() -> Self {
        Self {
            hidden: 2048,
            intermediate: 5632,
            n_layers: 22,
            n_heads: 32,
            n_kv_heads: 4,
            head_dim: 64,
            vocab_size: 32_000,
            max_len: 2048,
            rope_base: 10_000.0,
            norm_eps: 1e-5,
            tie_embeddings: false,
        }
    }

    /// Desk-scale model used by tests and the smoke suites.
    pub fn tiny(n_layers: usize, hidden: usize, vocab_size: usize) -> Self {
        let head_dim = 8.min(hidden);
        let n_heads = hidden / head_dim;
        Self {
            hidden,
            intermediate: hidden * 2,
            n_layers,
            n_heads,
            n_kv_heads: if n_heads.is_multiple_of(2) { n_heads / 2 } else { n_heads },
            head_dim,
            vocab_size,
            max_len: 128,
            rope_base: 10_000.0,
            norm_eps: 1e-5,
            tie_embeddings: false,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "110M" | "110m" => Ok(Self::preset_110m()),
            "1.1B" | "1.1b" => Ok(Self::preset_1b1()),
            other => Err(Error::config(format!(
                "unknown model preset `{other}` (expected 110M or 1.1B)"
            ))),
        }
    }

    /// `key = value` lines, one per field.
    pub fn to_config_block(&self) -> String {
        format!(
            "hidden = {}\nintermediate = {}\nn_layers = {}\nn_heads = {}\nn_kv_heads = {}\n\
             head_dim = {}\nvocab_size = {}\nmax_len = {}\nrope_base = {:?}\nnorm_eps = {:?}\n\
             tie_embeddings = {}\n",
            self.hidden,
            self.intermediate,
            self.n_layers,
            self.n_heads,
            self.n_kv_heads,
            self.head_dim,
            self.vocab_size,
            self.max_len,
            self.rope_base,
            self.norm_eps,
            self.tie_embeddings
        )
    }

    /// Parses a block written by [`ModelConfig::to_config_block`]; every
    /// field is required.
    pub fn from_config_block(text: &str) -> Result<Self> {
        let mut fields = std::collections::BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::format(format!("model line {}: expected `key = value`", lineno + 1))
            })?;
            if fields.insert(k.trim(), v.trim()).is_some() {
                return Err(Error::format(format!("duplicate model key `{}`", k.trim())));
            }
        }
        let mut take = |k: &str| {
            fields
                .remove(k)
                .ok_or_else(|| Error::format(format!("model block is missing `{k}`")))
        };
        let int = |k: &str, v: &str| {
            v.parse::<usize>()
                .ok()
                .filter(|&n| n <= MAX_DIM)
                .ok_or_else(|| Error::format(format!("bad value for `{k}`: `{v}`")))
        };
        let float = |k: &str, v: &str| {
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::format(format!("bad value for `{k}`: `{v}`")))
        };
        let cfg = Self {
            hidden: int("hidden", take("hidden")?)?,
            intermediate: int("intermediate", take("intermediate")?)?,
            n_layers: int("n_layers", take("n_layers")?)?,
            n_heads: int("n_heads", take("n_heads")?)?,
            n_kv_heads: int("n_kv_heads", take("n_kv_heads")?)?,
            head_dim: int("head_dim", take("head_dim")?)?,
            vocab_size: int("vocab_size", take("vocab_size")?)?,
            max_len: int("max_len", take("max_len")?)?,
            rope_base: float("rope_base", take("rope_base")?)?,
            norm_eps: float("norm_eps", take("norm_eps")?)?,
            tie_embeddings: match take("tie_embeddings")? {
                "true" => true,
                "false" => false,
                v => return Err(Error::format(format!("bad value for `tie_embeddings`: `{v}`"))),
            },
        };
        if let Some(k) = fields.keys().next() {
            return Err(Error::format(format!("unknown model key `{k}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn q_width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden", self.hidden),
            ("intermediate", self.intermediate),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("head_dim", self.head_dim),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::config(format!(
                "n_heads ({}) must be divisible by n_kv_heads ({})",
                self.n_heads, self.n_kv_heads
            )));
        }
        if self.head_dim * self.n_heads != self.hidden {
            return Err(Error::config(format!(
                "head_dim ({}) x n_heads ({}) must equal hidden ({})",
                self.head_dim, self.n_heads, self.hidden
            )));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(Error::config("head_dim must be even for rotary embeddings"));
        }
        if !(self.rope_base > 0.0 && self.norm_eps >= 0.0) {
            return Err(Error::config("rope_base must be positive and norm_eps non-negative"));
        }
        Ok(())
    }
}
