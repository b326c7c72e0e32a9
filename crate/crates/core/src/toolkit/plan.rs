use std::fmt::Write;

use crate::error::Result;
use crate::model::ModelConfig;
use crate::topology::{cache_budget, KVTopology};

/// Human-readable summary of a topology: its map, iteration range and the
/// cache and parameter budget on `cfg`.
pub fn plan_report(topo: &KVTopology, cfg: &ModelConfig, seq_len: usize, bytes_per_scalar: usize) -> Result<String> {
    let budget = cache_budget(topo, cfg, seq_len, bytes_per_scalar)?;
    let standard = cache_budget(&KVTopology::identity(topo.n_layers()), cfg, seq_len, bytes_per_scalar)?;
    let map = topo
        .kv_map_one_based()
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(",");
    let range = topo
        .iter_range()
        .map_or_else(|| "none".to_string(), |r| r.to_string());
    let mut s = String::new();
    let _ = writeln!(s, "topology:    {}", topo.name());
    let _ = writeln!(s, "layers:      {}", topo.n_layers());
    let _ = writeln!(s, "kv_layers:   {}", topo.n_kv_layers());
    let _ = writeln!(s, "kv_map:      [{map}]");
    let _ = writeln!(s, "iter_range:  {range}");
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<28}{:>16}{:>16}", format!("seq_len {seq_len}, {bytes_per_scalar} B/scalar"), "this", "standard");
    let rows = [
        ("cache bytes per token", budget.cache_bytes_per_token, standard.cache_bytes_per_token),
        ("cache bytes total", budget.cache_bytes_total, standard.cache_bytes_total),
        ("K/V parameters", budget.kv_param_count, standard.kv_param_count),
        ("K/V parameters saved", budget.kv_param_savings_vs_standard, 0),
    ];
    for (label, a, b) in rows {
        let _ = writeln!(s, "{label:<28}{a:>16}{b:>16}");
    }
    Ok(s)
}
