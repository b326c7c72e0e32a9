use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::Scalar;

/// Token selection rule applied to a logits row.
#[derive(Debug, Clone, PartialEq)]
pub enum Sampler {
    /// Argmax; ties go to the lowest token id.
    Greedy,
    Temperature(f64),
    TopK { k: usize, temperature: f64 },
}

impl Sampler {
    pub fn sample<T: Scalar>(&self, logits: &[T], rng: &mut impl Rng) -> usize {
        match *self {
            Sampler::Greedy => argmax(logits),
            Sampler::Temperature(t) => {
                let ids: Vec<usize> = (0..logits.len()).collect();
                draw(logits, &ids, t, rng)
            }
            Sampler::TopK { k, temperature } => {
                let mut ids: Vec<usize> = (0..logits.len()).collect();
                // stable sort keeps lower ids first among equal logits
                ids.sort_by(|&a, &b| {
                    logits[b]
                        .partial_cmp(&logits[a])
                        .unwrap_or(std::cmp::Ordering::Equal)
                });
                ids.truncate(k.max(1));
                draw(logits, &ids, temperature, rng)
            }
        }
    }
}

pub(crate) fn argmax<T: Scalar>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best
}

fn draw<T: Scalar>(logits: &[T], ids: &[usize], temperature: f64, rng: &mut impl Rng) -> usize {
    if temperature <= 0.0 {
        return ids.iter().copied().min_by(|&a, &b| {
            logits[b].partial_cmp(&logits[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        }).unwrap_or(0);
    }
    let max = ids.iter().map(|&i| logits[i].f64()).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = ids
        .iter()
        .map(|&i| ((logits[i].f64() - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (&id, w) in ids.iter().zip(&weights) {
        if u < *w {
            return id;
        }
        u -= w;
    }
    *ids.last().unwrap_or(&0)
}

impl fmt::Display for Sampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sampler::Greedy => f.write_str("greedy"),
            Sampler::Temperature(t) => write!(f, "temperature:{t}"),
            Sampler::TopK { k, temperature } => write!(f, "top-k:{k}:{temperature}"),
        }
    }
}

/// Parses `greedy`, `temperature:T` or `top-k:K[:T]`.
impl FromStr for Sampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |x: &str| {
            x.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v >= 0.0)
                .ok_or_else(|| Error::config(format!("bad sampler number `{x}`")))
        };
        match parts.as_slice() {
            ["greedy"] => Ok(Sampler::Greedy),
            ["temperature", t] => Ok(Sampler::Temperature(num(t)?)),
            ["top-k", k] | ["top-k", k, _] => {
                let k = k
                    .parse::<usize>()
                    .ok()
                    .filter(|&k| k > 0)
                    .ok_or_else(|| Error::config(format!("bad top-k `{k}`")))?;
                let temperature = match parts.get(2) {
                    Some(t) => num(t)?,
                    None => 1.0,
                };
                Ok(Sampler::TopK { k, temperature })
            }
            _ => Err(Error::config(format!("unknown sampler `{s}`"))),
        }
    }
}
