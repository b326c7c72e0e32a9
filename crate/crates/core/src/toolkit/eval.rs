use crate::error::{Error, Result};
use crate::model::{Iterations, Model, TokenBatch};
use crate::numcore::Scalar;

/// Perplexity of `stream` under `model`.
///
/// Windows hold `window` input positions and start every `stride` tokens;
/// each target token is scored once, by the first window that predicts it.
/// With `stride == window` the windows do not overlap and every token after
/// the first is scored.
pub fn eval_perplexity<T: Scalar>(
    model: &Model<T>,
    stream: &[usize],
    window: usize,
    stride: usize,
    iterations: Iterations,
) -> Result<f64> {
    let (nll, count) = scored_nll(model, stream, window, stride, iterations)?;
    Ok((nll / count as f64).exp())
}

/// Summed next-token NLL and the number of scored targets.
pub fn scored_nll<T: Scalar>(
    model: &Model<T>,
    stream: &[usize],
    window: usize,
    stride: usize,
    iterations: Iterations,
) -> Result<(f64, usize)> {
    let n = stream.len();
    if n < 2 {
        return Err(Error::data(format!("perplexity needs at least 2 tokens, got {n}")));
    }
    if window == 0 || window > model.config.max_len {
        return Err(Error::config(format!(
            "window {window} must lie in 1..={}",
            model.config.max_len
        )));
    }
    if stride == 0 || stride > window {
        return Err(Error::config(format!("stride {stride} must lie in 1..={window}")));
    }
    let mut total = 0.0;
    let mut count = 0;
    let mut next_target = 1;
    let mut begin = 0;
    while next_target < n {
        let end = (begin + window).min(n - 1);
        let inputs = TokenBatch::single(&stream[begin..end])?;
        let targets = &stream[begin + 1..=end];
        let logits = model.logits(&inputs, iterations)?;
        let nll = logits.nll_per_row(targets)?;
        for (k, v) in nll.into_iter().enumerate() {
            if begin + 1 + k >= next_target {
                total += v;
                count += 1;
            }
        }
        next_target = end + 1;
        begin += stride;
    }
    Ok((total, count))
}
