//! Trains every configuration on one corpus and compares perplexities.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::bench::csv_err;
use super::eval::eval_perplexity;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::topology::{KVTopology, Partitioning, Positioning};
use crate::training::{train, TrainSchedule, TrainerOptions};

/// Size and length of each study run.
#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub steps: usize,
    pub seq_len: usize,
    pub batch_rows: usize,
    pub max_lr: f64,
    pub eval_window: usize,
    /// Tokens at the end of the corpus held out for evaluation.
    pub eval_tokens: usize,
    pub seed: u64,
    /// Relative perplexity gap to the baseline still counted as "close".
    pub margin: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            n_layers: 6,
            hidden: 32,
            steps: 300,
            seq_len: 32,
            batch_rows: 8,
            max_lr: 3e-3,
            eval_window: 32,
            eval_tokens: 4096,
            seed: 0,
            margin: 0.10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub topology: String,
    pub kv_layers: usize,
    pub final_train_loss: f64,
    pub perplexity: f64,
    pub ratio_to_standard: f64,
}

/// Directional checks over a finished study.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyFindings {
    /// Every configuration at `l = L/2` is within the margin of the baseline.
    pub half_close_to_standard: bool,
    /// At `l = 2`, the best bottom configuration is worse than the best of
    /// sandwich-top and sandwich-middle.
    pub bottom_worse_at_two: bool,
}

/// Trains the baseline plus all nine configurations at `l = L/2` and
/// `l = 2`, one thread per run.
pub fn ordering_study(corpus: &[usize], vocab_size: usize, cfg: &StudyConfig) -> Result<Vec<StudyRow>> {
    if corpus.len() < cfg.eval_tokens + cfg.seq_len + 2 {
        return Err(Error::data("corpus too small for the study"));
    }
    let (train_part, eval_part) = corpus.split_at(corpus.len() - cfg.eval_tokens);
    let l_half = cfg.n_layers / 2;
    let mut topologies = vec![KVTopology::identity(cfg.n_layers)];
    for l in [l_half, 2] {
        for p in Partitioning::BUILT_IN {
            for q in Positioning::PRIMARY {
                topologies.push(KVTopology::build(p, q, cfg.n_layers, l)?);
            }
        }
    }

    let results: Vec<Result<(f64, f64)>> = std::thread::scope(|s| {
        let handles: Vec<_> = topologies
            .iter()
            .map(|topo| {
                s.spawn(move || -> Result<(f64, f64)> {
                    let mut mc = ModelConfig::tiny(cfg.n_layers, cfg.hidden, vocab_size);
                    mc.max_len = cfg.seq_len.max(cfg.eval_window);
                    let mut model = Model::<f32>::init(mc, topo.clone(), cfg.seed)?;
                    let schedule = TrainSchedule::for_steps(cfg.steps, cfg.max_lr, cfg.batch_rows * cfg.seq_len);
                    let opts = TrainerOptions {
                        seq_len: cfg.seq_len,
                        seed: cfg.seed,
                        ..Default::default()
                    };
                    let reports = train(&mut model, train_part, &schedule, &opts)?;
                    let tail = &reports[reports.len().saturating_sub(10)..];
                    let loss = tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64;
                    let ppl = eval_perplexity(&model, eval_part, cfg.eval_window, cfg.eval_window, schedule.iterations())?;
                    Ok((loss, ppl))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::state("study worker panicked"))))
            .collect()
    });

    let mut rows = Vec::with_capacity(topologies.len());
    let mut baseline = f64::NAN;
    for (topo, res) in topologies.iter().zip(results) {
        let (loss, ppl) = res?;
        let name = if rows.is_empty() {
            baseline = ppl;
            "standard".to_string()
        } else {
            topo.name()
        };
        rows.push(StudyRow {
            topology: name,
            kv_layers: topo.n_kv_layers(),
            final_train_loss: loss,
            perplexity: ppl,
            ratio_to_standard: ppl / baseline,
        });
    }
    Ok(rows)
}

pub fn study_findings(rows: &[StudyRow], n_layers: usize, margin: f64) -> StudyFindings {
    let at = |l: usize| rows.iter().skip(1).filter(move |r| r.kv_layers == l);
    let half_close_to_standard = at(n_layers / 2).all(|r| r.ratio_to_standard <= 1.0 + margin);
    let best = |pred: &dyn Fn(&str) -> bool| {
        at(2)
            .filter(|r| pred(&r.topology))
            .map(|r| r.perplexity)
            .fold(f64::INFINITY, f64::min)
    };
    let bottom = best(&|n| n.ends_with("-bottom"));
    let sandwich = best(&|n| n == "sandwich-top" || n == "sandwich-middle");
    StudyFindings {
        half_close_to_standard,
        bottom_worse_at_two: bottom > sandwich,
    }
}

pub fn write_study_csv(rows: &[StudyRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
