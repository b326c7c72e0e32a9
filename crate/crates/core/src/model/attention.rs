use crate::error::{Error, Result};
use crate::numcore::{Mask, Scalar, Tape, Tensor, Var};

/// Scaled dot-product attention of queries against a (possibly borrowed)
/// layer's keys and values, with grouped-query broadcast.
///
/// * `q`: `[batch, seq, n_heads, head_dim]`, already rotated.
/// * `kv`: `[batch, keys, n_kv_heads, head_dim]` each, or `None` for an empty
///   KV set, which yields a zero output.
/// * `q_pos`: absolute position of each query row; key `s` sits at position
///   `s`. Keys after the query are always masked, the query's own position
///   too when `mask_diagonal` is set.
///
/// Returns `[batch * seq, n_heads * head_dim]`. Query head `h` reads KV head
/// `h / (n_heads / n_kv_heads)`.
pub fn attend_shared<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    kv: Option<(Var, Var)>,
    q_pos: &[usize],
    mask_diagonal: bool,
) -> Result<Var> {
    let qs = tape.shape(q).to_vec();
    if qs.len() != 4 || qs[1] != q_pos.len() {
        return Err(Error::dim("attend_shared", &qs, &[q_pos.len()]));
    }
    let (batch, seq, n_heads, dim) = (qs[0], qs[1], qs[2], qs[3]);
    let Some((k, v)) = kv else {
        return Ok(tape.constant(Tensor::zeros(&[batch * seq, n_heads * dim])));
    };
    let ks = tape.shape(k).to_vec();
    if ks.len() != 4 || ks[0] != batch || ks[3] != dim || tape.shape(v) != ks.as_slice() {
        return Err(Error::dim("attend_shared", &qs, &ks));
    }
    let (n_keys, n_kv) = (ks[1], ks[2]);
    if n_kv == 0 || n_heads % n_kv != 0 {
        return Err(Error::dim("attend_shared", &qs, &ks));
    }
    let group = n_heads / n_kv;

    // [B, T, Hq, D] -> [B, Hq, T, D] -> [B*Hkv, G*T, D]
    let qp = tape.permute(q, &[0, 2, 1, 3])?;
    let qp = tape.reshape(qp, &[batch * n_kv, group * seq, dim])?;
    let kp = tape.permute(k, &[0, 2, 1, 3])?;
    let kp = tape.reshape(kp, &[batch * n_kv, n_keys, dim])?;
    let vp = tape.permute(v, &[0, 2, 1, 3])?;
    let vp = tape.reshape(vp, &[batch * n_kv, n_keys, dim])?;

    let scores = tape.matmul_nt(qp, kp)?;
    let scores = tape.scale(scores, T::of(1.0 / (dim as f64).sqrt()));
    let mask = Mask::causal(q_pos, n_keys, mask_diagonal).tile_rows(group);
    let probs = tape.softmax_rows(scores, Some(&mask))?;
    let out = tape.matmul(probs, vp)?;

    let out = tape.reshape(out, &[batch, n_heads, seq, dim])?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    tape.reshape(out, &[batch * seq, n_heads * dim])
}
