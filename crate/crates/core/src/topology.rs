//! Cross-layer KV sharing topologies.
//!
//! A topology assigns to every layer `i` the layer `kv(i)` whose keys and
//! values its queries attend to. Layers with `kv(i) == i` are KV layers and
//! own `W_K`/`W_V`; every other layer borrows the KVs of its target.
//!
//! Layer indices are 0-based in the API. Anything printed or serialized
//! (`Display`, config blocks, the CLI) uses 1-based indices.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Rule that decides which layers are KV layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Partitioning {
    /// The first `l - 1` layers are KV layers, the rest share one target.
    Pizza,
    /// KV layers at both ends, one shared range in between.
    Sandwich,
    /// `l` groups of consecutive layers, one target per group.
    Lasagna,
    Custom,
}

/// Where the target layer sits inside a shared range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Positioning {
    Bottom,
    Top,
    Middle,
    MiddleQuarter,
    MiddleThreeQuarter,
    Custom,
}

impl Partitioning {
    pub const BUILT_IN: [Partitioning; 3] =
        [Partitioning::Pizza, Partitioning::Sandwich, Partitioning::Lasagna];

    pub fn as_str(self) -> &'static str {
        match self {
            Partitioning::Pizza => "pizza",
            Partitioning::Sandwich => "sandwich",
            Partitioning::Lasagna => "lasagna",
            Partitioning::Custom => "custom",
        }
    }
}

impl Positioning {
    /// The three positionings that form the nine named configurations.
    pub const PRIMARY: [Positioning; 3] =
        [Positioning::Bottom, Positioning::Top, Positioning::Middle];

    pub const BUILT_IN: [Positioning; 5] = [
        Positioning::Bottom,
        Positioning::Top,
        Positioning::Middle,
        Positioning::MiddleQuarter,
        Positioning::MiddleThreeQuarter,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Positioning::Bottom => "bottom",
            Positioning::Top => "top",
            Positioning::Middle => "middle",
            Positioning::MiddleQuarter => "middle-1/4",
            Positioning::MiddleThreeQuarter => "middle-3/4",
            Positioning::Custom => "custom",
        }
    }

    /// Index of the target inside the inclusive range `[lo, hi]`.
    fn place(self, lo: usize, hi: usize) -> usize {
        let span = hi - lo;
        match self {
            Positioning::Bottom | Positioning::Custom => lo,
            Positioning::Top => hi,
            Positioning::Middle => lo + span / 2,
            Positioning::MiddleQuarter => lo + span / 4,
            Positioning::MiddleThreeQuarter => lo + 3 * span / 4,
        }
    }
}

impl fmt::Display for Partitioning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Positioning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Partitioning {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pizza" => Ok(Partitioning::Pizza),
            "sandwich" => Ok(Partitioning::Sandwich),
            "lasagna" => Ok(Partitioning::Lasagna),
            "custom" => Ok(Partitioning::Custom),
            other => Err(Error::config(format!("unknown partitioning `{other}`"))),
        }
    }
}

impl FromStr for Positioning {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bottom" => Ok(Positioning::Bottom),
            "top" => Ok(Positioning::Top),
            "middle" => Ok(Positioning::Middle),
            "middle-1/4" | "quarter" => Ok(Positioning::MiddleQuarter),
            "middle-3/4" | "three-quarter" => Ok(Positioning::MiddleThreeQuarter),
            "custom" => Ok(Positioning::Custom),
            other => Err(Error::config(format!("unknown positioning `{other}`"))),
        }
    }
}

/// Inclusive range of layers that need iterative computation (0-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IterRange {
    pub start: usize,
    pub end: usize,
}

impl IterRange {
    pub fn contains(&self, layer: usize) -> bool {
        (self.start..=self.end).contains(&layer)
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl fmt::Display for IterRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.start + 1, self.end + 1)
    }
}

/// The `kv(i)` map plus how it was produced.
///
/// Immutable once built; every constructor validates the map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KVTopology {
    kv_map: Vec<usize>,
    n_kv_layers: usize,
    partitioning: Partitioning,
    positioning: Positioning,
    iter_range: Option<IterRange>,
}

impl KVTopology {
    /// Builds one of the named configurations for `n_layers` layers of which
    /// `n_kv_layers` compute their own KVs.
    pub fn build(
        partitioning: Partitioning,
        positioning: Positioning,
        n_layers: usize,
        n_kv_layers: usize,
    ) -> Result<Self> {
        if partitioning == Partitioning::Custom || positioning == Positioning::Custom {
            return Err(Error::config(
                "custom topologies are built from an explicit kv_map",
            ));
        }
        if n_layers == 0 {
            return Err(Error::config("layer count must be at least 1"));
        }
        if n_kv_layers == 0 || n_kv_layers > n_layers {
            return Err(Error::config(format!(
                "kv layer count must satisfy 1 <= l <= L, got l={n_kv_layers}, L={n_layers}"
            )));
        }
        let (lay, l) = (n_layers, n_kv_layers);
        let mut map: Vec<usize> = (0..lay).collect();
        match partitioning {
            Partitioning::Pizza => {
                let lo = l - 1;
                let target = positioning.place(lo, lay - 1);
                map[lo..].fill(target);
            }
            Partitioning::Sandwich => {
                if l == 1 && lay > 1 {
                    return Err(Error::config(
                        "sandwich partitioning needs l >= 2 (a top KV layer) when L > l",
                    ));
                }
                let head = l / 2; // ceil((l - 1) / 2)
                let tail = (l - 1) / 2;
                let (lo, hi) = (head, lay - 1 - tail);
                let target = positioning.place(lo, hi);
                map[lo..=hi].fill(target);
            }
            Partitioning::Lasagna => {
                let base = lay / l;
                let extra = lay % l;
                let mut lo = 0;
                for g in 0..l {
                    let size = base + usize::from(g < extra);
                    let hi = lo + size - 1;
                    let target = if g == 0 {
                        lo
                    } else {
                        positioning.place(lo, hi)
                    };
                    map[lo..=hi].fill(target);
                    lo = hi + 1;
                }
            }
            Partitioning::Custom => unreachable!(),
        }
        let topo = Self::from_parts(map, partitioning, positioning)?;
        debug_assert_eq!(topo.n_kv_layers, l);
        Ok(topo)
    }

    /// Every layer is a KV layer: a standard transformer.
    pub fn identity(n_layers: usize) -> Self {
        Self::from_parts((0..n_layers).collect(), Partitioning::Custom, Positioning::Custom)
            .expect("identity map is always valid")
    }

    /// Accepts any valid 0-based `kv_map`.
    pub fn custom(kv_map: Vec<usize>) -> Result<Self> {
        Self::from_parts(kv_map, Partitioning::Custom, Positioning::Custom)
    }

    /// Same as [`KVTopology::custom`] but with 1-based layer indices.
    pub fn custom_one_based(kv_map: &[usize]) -> Result<Self> {
        let mut zero = Vec::with_capacity(kv_map.len());
        for (i, &t) in kv_map.iter().enumerate() {
            if t == 0 {
                return Err(Error::config(format!(
                    "layer {}: target index 0 is out of range 1..={}",
                    i + 1,
                    kv_map.len()
                )));
            }
            zero.push(t - 1);
        }
        Self::custom(zero)
    }

    fn from_parts(
        kv_map: Vec<usize>,
        partitioning: Partitioning,
        positioning: Positioning,
    ) -> Result<Self> {
        let n = kv_map.len();
        if n == 0 {
            return Err(Error::config("kv_map must name at least one layer"));
        }
        for (i, &t) in kv_map.iter().enumerate() {
            if t >= n {
                return Err(Error::config(format!(
                    "layer {}: target {} is out of range 1..={n}",
                    i + 1,
                    t + 1
                )));
            }
            if kv_map[t] != t {
                return Err(Error::config(format!(
                    "layer {}: target layer {} is not a KV layer (kv({}) = {})",
                    i + 1,
                    t + 1,
                    t + 1,
                    kv_map[t] + 1
                )));
            }
        }
        if kv_map[0] != 0 {
            if partitioning == Partitioning::Lasagna {
                return Err(Error::config("lasagna topologies must keep layer 1 a KV layer"));
            }
            log::warn!(
                "layer 1 is not a KV layer (kv(1) = {}); expect degraded quality",
                kv_map[0] + 1
            );
        }
        let n_kv_layers = kv_map.iter().enumerate().filter(|&(i, &t)| i == t).count();
        let iter_range = compute_iter_range(&kv_map);
        Ok(Self {
            kv_map,
            n_kv_layers,
            partitioning,
            positioning,
            iter_range,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.kv_map.len()
    }

    pub fn n_kv_layers(&self) -> usize {
        self.n_kv_layers
    }

    pub fn partitioning(&self) -> Partitioning {
        self.partitioning
    }

    pub fn positioning(&self) -> Positioning {
        self.positioning
    }

    /// 0-based `kv(i)` for every layer.
    pub fn kv_map(&self) -> &[usize] {
        &self.kv_map
    }

    pub fn kv_map_one_based(&self) -> Vec<usize> {
        self.kv_map.iter().map(|t| t + 1).collect()
    }

    pub fn target(&self, layer: usize) -> usize {
        self.kv_map[layer]
    }

    pub fn is_kv_layer(&self, layer: usize) -> bool {
        self.kv_map[layer] == layer
    }

    pub fn kv_layers(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_layers()).filter(|&i| self.is_kv_layer(i))
    }

    /// Layer `i` reads KVs of a layer above it.
    pub fn reads_upward(&self, layer: usize) -> bool {
        self.kv_map[layer] > layer
    }

    pub fn iter_range(&self) -> Option<IterRange> {
        self.iter_range
    }

    /// True when some layer attends to KVs of a higher layer. Such topologies
    /// mask the attention diagonal at every layer and need iterative
    /// computation over full sequences.
    pub fn has_upward_dependencies(&self) -> bool {
        self.iter_range.is_some()
    }

    /// Highest KV layer; layers above it only matter for the last position
    /// during prefill.
    pub fn last_kv_layer(&self) -> usize {
        self.kv_layers().last().expect("at least one KV layer")
    }

    /// Layers whose queries attend to KV layer `j`.
    pub fn sharing_set(&self, kv_layer: usize) -> Vec<usize> {
        (0..self.n_layers())
            .filter(|&i| self.kv_map[i] == kv_layer)
            .collect()
    }

    pub fn name(&self) -> String {
        match self.partitioning {
            Partitioning::Custom => "custom".to_string(),
            p => format!("{p}-{}", self.positioning),
        }
    }

    /// Plain-text key/value block embedded in checkpoint headers.
    pub fn to_config_block(&self) -> String {
        let map = self
            .kv_map_one_based()
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "partitioning = {}\npositioning = {}\nlayers = {}\nkv_layers = {}\nkv_map = {}\n",
            self.partitioning,
            self.positioning,
            self.n_layers(),
            self.n_kv_layers,
            map
        )
    }

    /// Parses a block written by [`KVTopology::to_config_block`]. Named
    /// configurations are rebuilt and must agree with the stored map.
    pub fn from_config_block(text: &str) -> Result<Self> {
        let mut partitioning = None;
        let mut positioning = None;
        let mut layers = None;
        let mut kv_layers = None;
        let mut kv_map = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::format(format!("topology line {}: expected `key = value`", lineno + 1))
            })?;
            let value = value.trim();
            match key.trim() {
                "partitioning" => partitioning = Some(value.parse::<Partitioning>()?),
                "positioning" => positioning = Some(value.parse::<Positioning>()?),
                "layers" => layers = Some(parse_count(value, "layers")?),
                "kv_layers" => kv_layers = Some(parse_count(value, "kv_layers")?),
                "kv_map" => {
                    let map = value
                        .trim_matches(|c| c == '[' || c == ']')
                        .split(',')
                        .map(|s| parse_count(s, "kv_map"))
                        .collect::<Result<Vec<_>>>()?;
                    kv_map = Some(map);
                }
                other => {
                    return Err(Error::format(format!("unknown topology key `{other}`")));
                }
            }
        }
        let missing = |k: &str| Error::format(format!("topology block is missing `{k}`"));
        let partitioning = partitioning.ok_or_else(|| missing("partitioning"))?;
        let positioning = positioning.ok_or_else(|| missing("positioning"))?;
        let layers = layers.ok_or_else(|| missing("layers"))?;
        let kv_layers = kv_layers.ok_or_else(|| missing("kv_layers"))?;
        let kv_map = kv_map.ok_or_else(|| missing("kv_map"))?;
        if kv_map.len() != layers {
            return Err(Error::format(format!(
                "kv_map has {} entries but layers = {layers}",
                kv_map.len()
            )));
        }
        let topo = if partitioning == Partitioning::Custom || positioning == Positioning::Custom {
            Self::custom_one_based(&kv_map)?
        } else {
            let built = Self::build(partitioning, positioning, layers, kv_layers)?;
            if built.kv_map_one_based() != kv_map {
                return Err(Error::format(format!(
                    "kv_map disagrees with {partitioning}-{positioning} for L={layers}, l={kv_layers}"
                )));
            }
            built
        };
        if topo.n_kv_layers != kv_layers {
            return Err(Error::format(format!(
                "kv_layers = {kv_layers} but kv_map has {} KV layers",
                topo.n_kv_layers
            )));
        }
        Ok(topo)
    }
}

/// Largest layer count accepted from a config block.
const MAX_LAYERS: usize = 1 << 16;

fn parse_count(s: &str, what: &str) -> Result<usize> {
    s.trim()
        .parse::<usize>()
        .ok()
        .filter(|&n| n <= MAX_LAYERS)
        .ok_or_else(|| Error::format(format!("`{what}`: `{}` is not a count up to {MAX_LAYERS}", s.trim())))
}

impl fmt::Display for KVTopology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} L={} l={} kv_map={:?}",
            self.name(),
            self.n_layers(),
            self.n_kv_layers,
            self.kv_map_one_based()
        )
    }
}

/// Smallest layer range that contains every upward reader and its target.
///
/// For the named configurations this is the range from the first non-KV layer
/// to its target (pizza, sandwich) or from the first layer of the second group
/// to the last group's target (lasagna). `None` when nothing reads upward.
pub fn compute_iter_range(kv_map: &[usize]) -> Option<IterRange> {
    let mut range: Option<IterRange> = None;
    for (i, &t) in kv_map.iter().enumerate() {
        if t > i {
            range = Some(match range {
                None => IterRange { start: i, end: t },
                Some(r) => IterRange {
                    start: r.start.min(i),
                    end: r.end.max(t),
                },
            });
        }
    }
    range
}

/// Memory and parameter accounting for one topology on one model shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheBudget {
    pub seq_len: usize,
    pub bytes_per_scalar: usize,
    pub cache_bytes_per_token: u64,
    pub cache_bytes_total: u64,
    pub kv_param_count: u64,
    pub kv_param_savings_vs_standard: u64,
}

impl CacheBudget {
    pub fn cache_bytes_for(&self, seq_len: usize) -> u64 {
        self.cache_bytes_per_token * seq_len as u64
    }
}

pub fn cache_budget(
    topology: &KVTopology,
    cfg: &ModelConfig,
    seq_len: usize,
    bytes_per_scalar: usize,
) -> Result<CacheBudget> {
    cfg.validate()?;
    if cfg.n_layers != topology.n_layers() {
        return Err(Error::config(format!(
            "model has {} layers but topology has {}",
            cfg.n_layers,
            topology.n_layers()
        )));
    }
    let l = topology.n_kv_layers() as u64;
    let kv_width = (cfg.n_kv_heads * cfg.head_dim) as u64;
    let per_token = l * 2 * kv_width * bytes_per_scalar as u64;
    let per_layer_params = 2 * cfg.hidden as u64 * kv_width;
    Ok(CacheBudget {
        seq_len,
        bytes_per_scalar,
        cache_bytes_per_token: per_token,
        cache_bytes_total: per_token * seq_len as u64,
        kv_param_count: l * per_layer_params,
        kv_param_savings_vs_standard: (cfg.n_layers as u64 - l) * per_layer_params,
    })
}
