use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{generate, GenRequest, Sampler, Stage};
use crate::model::{Iterations, Model};
use crate::numcore::Scalar;

/// One benchmark repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub topology: String,
    pub x: usize,
    pub y: usize,
    pub rep: usize,
    pub prefill_secs: f64,
    pub decode_secs: f64,
    pub total_secs: f64,
    pub tokens_per_sec: f64,
    pub prefill_positions: u64,
    pub decode_positions: u64,
    pub kv_writes: u64,
    pub cache_bytes: u64,
}

impl BenchRow {
    pub const COLUMNS: [&'static str; 12] = [
        "topology",
        "x",
        "y",
        "rep",
        "prefill_secs",
        "decode_secs",
        "total_secs",
        "tokens_per_sec",
        "prefill_positions",
        "decode_positions",
        "kv_writes",
        "cache_bytes",
    ];
}

/// Parses a comma-separated list of `x+y` prompt/generation lengths.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, usize)>> {
    let pairs = text
        .split(',')
        .map(|item| {
            let item = item.trim();
            let (x, y) = item
                .split_once('+')
                .ok_or_else(|| Error::config(format!("bench pair `{item}` is not of the form x+y")))?;
            let num = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|&n| n > 0)
                    .ok_or_else(|| Error::config(format!("bench pair `{item}`: `{s}` is not a positive integer")))
            };
            Ok((num(x)?, num(y)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(pairs)
}

/// Runs every pair `reps` times with greedy decoding on seeded random
/// prompts.
pub fn run_bench<T: Scalar>(
    model: &Model<T>,
    pairs: &[(usize, usize)],
    reps: usize,
    iterations: Iterations,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let name = model.topology.name();
    let vocab = model.config.vocab_size;
    let mut rows = Vec::with_capacity(pairs.len() * reps);
    for &(x, y) in pairs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (x as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let prompt: Vec<usize> = (0..x).map(|_| rng.gen_range(0..vocab)).collect();
        for rep in 0..reps {
            let req = GenRequest {
                prompt: prompt.clone(),
                gen_len: y,
                sampler: Sampler::Greedy,
                seed,
            };
            let g = generate(model, &req, iterations)?;
            rows.push(BenchRow {
                topology: name.clone(),
                x,
                y,
                rep,
                prefill_secs: g.prefill_secs,
                decode_secs: g.decode_secs,
                total_secs: g.total_secs(),
                tokens_per_sec: g.tokens_per_sec(),
                prefill_positions: g.counters.total_positions(Stage::Prefill),
                decode_positions: g.counters.total_positions(Stage::Decode),
                kv_writes: g.counters.total_cache_writes(),
                cache_bytes: g.cache_bytes,
            });
        }
    }
    Ok(rows)
}

pub fn write_bench_csv(rows: &[BenchRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(BenchRow::COLUMNS).map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_bench_csv(input: impl Read) -> Result<Vec<BenchRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_owned).collect();
    if header != BenchRow::COLUMNS {
        return Err(Error::format(format!("unexpected bench columns {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::format(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_parse() {
        assert_eq!(parse_pairs("5+16, 64+16").unwrap(), vec![(5, 16), (64, 16)]);
        for bad in ["", "5", "5+", "+3", "0+4", "a+b", "5+16,,"] {
            assert!(parse_pairs(bad).is_err(), "{bad}");
        }
    }
}
