//! Next-token training for every topology.
//!
//! Topologies without upward dependencies train with the ordinary single
//! pass. The others use the iterative forward, so only the last `b` rounds
//! receive gradients.

mod optim;
mod schedule;

pub use optim::{clip_global_norm, global_norm, AdamW};
pub use schedule::{Budget, TrainSchedule, Warmup};

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::inference::{RunCounters, Stage};
use crate::model::{Iterations, Model, TokenBatch};
use crate::numcore::{Scalar, Tape, Tensor};
use crate::toolkit::Checkpoint;

/// Outcome of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub tokens_per_sec: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Layer invocations of this step, per layer.
    pub layer_calls: Vec<u64>,
}

/// Optimizer state carried between steps.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub optimizer: AdamW<T>,
    pub step: usize,
    pub total_steps: usize,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(schedule: &TrainSchedule, total_steps: usize) -> Self {
        Self {
            optimizer: AdamW::new(schedule.beta1, schedule.beta2, schedule.eps, schedule.weight_decay),
            step: 0,
            total_steps,
        }
    }
}

/// Splits each row of `batch` into inputs (all but the last token) and
/// next-token targets.
pub fn shift_batch(batch: &TokenBatch) -> Result<(TokenBatch, Vec<usize>)> {
    let t = batch.seq_len();
    if t < 2 {
        return Err(Error::data("training rows need at least two tokens"));
    }
    let mut inputs = Vec::with_capacity(batch.batch() * (t - 1));
    let mut targets = Vec::with_capacity(batch.batch() * (t - 1));
    for b in 0..batch.batch() {
        let row = batch.row(b);
        inputs.extend_from_slice(&row[..t - 1]);
        targets.extend_from_slice(&row[1..]);
    }
    Ok((TokenBatch::new(inputs, batch.batch())?, targets))
}

/// Mean next-token cross-entropy of `batch` without gradients.
pub fn eval_loss<T: Scalar>(model: &Model<T>, batch: &TokenBatch, iterations: Iterations) -> Result<f64> {
    let (inputs, targets) = shift_batch(batch)?;
    let logits = model.logits(&inputs, iterations)?;
    Ok(logits.cross_entropy(&targets)?.f64())
}

/// Loss and per-parameter gradients (in [`crate::model::ModelWeights::named`]
/// order) for one batch.
pub fn loss_and_grads<T: Scalar>(
    model: &Model<T>,
    batch: &TokenBatch,
    iterations: Iterations,
    counters: &mut RunCounters,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let (inputs, targets) = shift_batch(batch)?;
    let mut tape = Tape::new();
    let bw = model.weights.bind(&mut tape, true);
    let logits = model.forward_auto(&mut tape, &bw, &inputs, iterations, counters)?;
    let loss = tape.cross_entropy(logits, &targets)?;
    let value = tape.value(loss).item().f64();
    let grads = tape.backward(loss)?;
    let grads = bw
        .vars()
        .into_iter()
        .map(|v| grads.get_or_zeros(v, tape.shape(v)))
        .collect();
    Ok((value, grads))
}

/// One optimizer step: loss, backward, global-norm clipping and AdamW with
/// the scheduled learning rate.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    batch: &TokenBatch,
    schedule: &TrainSchedule,
    state: &mut TrainState<T>,
) -> Result<TrainReport> {
    if batch.seq_len() > model.config.max_len + 1 {
        return Err(Error::Capacity {
            needed: batch.seq_len() - 1,
            capacity: model.config.max_len,
        });
    }
    let start = Instant::now();
    let mut counters = model.counters();
    let (loss, mut grads) = loss_and_grads(model, batch, schedule.iterations(), &mut counters)?;
    if !loss.is_finite() {
        return Err(Error::Training {
            step: state.step,
            msg: format!("loss is {loss} (lr {:.3e})", schedule.lr_at(state.step, state.total_steps)),
        });
    }
    let grad_norm = clip_global_norm(&mut grads, schedule.grad_clip);
    if !grad_norm.is_finite() {
        return Err(Error::Training {
            step: state.step,
            msg: format!("gradient norm is {grad_norm} at loss {loss:.4}"),
        });
    }
    let lr = schedule.lr_at(state.step, state.total_steps);
    state.optimizer.step(model.weights.tensors_mut(), &grads, lr)?;
    let secs = start.elapsed().as_secs_f64();
    let tokens = (batch.batch() * (batch.seq_len() - 1)) as f64;
    let report = TrainReport {
        step: state.step,
        loss,
        lr,
        tokens_per_sec: if secs > 0.0 { tokens / secs } else { f64::INFINITY },
        grad_norm,
        layer_calls: (0..counters.n_layers()).map(|i| counters.calls(Stage::Train, i)).collect(),
    };
    state.step += 1;
    Ok(report)
}

/// Draws `rows` windows of `seq_len + 1` tokens at random offsets.
pub fn sample_batch(stream: &[usize], rows: usize, seq_len: usize, rng: &mut ChaCha8Rng) -> Result<TokenBatch> {
    let width = seq_len + 1;
    if stream.len() < width {
        return Err(Error::data(format!(
            "corpus has {} tokens, a training row needs {width}",
            stream.len()
        )));
    }
    let mut ids = Vec::with_capacity(rows * width);
    for _ in 0..rows {
        let start = rng.gen_range(0..=stream.len() - width);
        ids.extend_from_slice(&stream[start..start + width]);
    }
    TokenBatch::new(ids, rows)
}

/// Output locations and cadence for [`train`].
#[derive(Debug, Clone, Default)]
pub struct TrainerOptions {
    pub seq_len: usize,
    pub seed: u64,
    pub metrics_csv: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Write a checkpoint every this many steps; the final step is always
    /// written when a directory is set.
    pub checkpoint_every: usize,
    pub log_every: usize,
}

/// Runs the whole schedule over `stream`, returning every step's report.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    stream: &[usize],
    schedule: &TrainSchedule,
    opts: &TrainerOptions,
) -> Result<Vec<TrainReport>> {
    schedule.validate()?;
    if opts.seq_len == 0 || opts.seq_len > model.config.max_len {
        return Err(Error::config(format!(
            "sequence length {} must lie in 1..={}",
            opts.seq_len, model.config.max_len
        )));
    }
    if let Some(&bad) = stream.iter().find(|&&t| t >= model.config.vocab_size) {
        return Err(Error::data(format!(
            "token {bad} is outside the vocabulary of {}",
            model.config.vocab_size
        )));
    }
    let total = schedule.total_steps(stream.len() as u64)?;
    let rows = (schedule.batch_tokens / opts.seq_len).max(1);
    let mut state = TrainState::new(schedule, total);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut metrics = match &opts.metrics_csv {
        Some(path) => Some(MetricsWriter::create(path)?),
        None => None,
    };
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut reports = Vec::with_capacity(total);
    for step in 0..total {
        let batch = sample_batch(stream, rows, opts.seq_len, &mut rng)?;
        let report = train_step(model, &batch, schedule, &mut state)?;
        if opts.log_every > 0 && step % opts.log_every == 0 {
            log::info!(
                "step {step} loss {:.4} lr {:.3e} {:.0} tok/s",
                report.loss,
                report.lr,
                report.tokens_per_sec
            );
        }
        if let Some(w) = metrics.as_mut() {
            w.append(&report)?;
        }
        if let Some(dir) = &opts.checkpoint_dir {
            let last = step + 1 == total;
            if last || (opts.checkpoint_every > 0 && (step + 1) % opts.checkpoint_every == 0) {
                let ckpt = Checkpoint::from_model(model, (step + 1) as u64);
                ckpt.save(dir.join(format!("step-{:06}.ckpt", step + 1)))?;
                if last {
                    ckpt.save(dir.join("final.ckpt"))?;
                }
            }
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Appends `step,loss,lr,tokens_per_sec` rows.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub const HEADER: &'static str = "step,loss,lr,tokens_per_sec";

    /// Opens `path` for appending, writing the header if the file is new or
    /// empty.
    pub fn create(path: &std::path::Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let fresh = file.metadata()?.len() == 0;
        let mut out = BufWriter::new(file);
        if fresh {
            writeln!(out, "{}", Self::HEADER)?;
        }
        Ok(Self { out })
    }

    pub fn append(&mut self, r: &TrainReport) -> Result<()> {
        writeln!(self.out, "{},{:?},{:?},{:?}", r.step, r.loss, r.lr, r.tokens_per_sec)?;
        self.out.flush()?;
        Ok(())
    }
}
