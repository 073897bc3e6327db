use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Tape, Var};
use crate::error::Result;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Weights of one attention layer: `(W, a_src, a_dst)` per head and, for
/// GTCN-G, the residual projection `W′`.
pub struct AttentionLayer {
    pub heads: Vec<(Var, Var, Var)>,
    pub residual: Option<Var>,
}

/// Neighbour pairs of one layer, grouped by target.
///
/// Pair `p` sends input row `src[p]` to output row `target[p]`, whose own
/// input row is `dst[p]`; `offsets` delimits each target's pairs.
#[derive(Clone, Debug, Default)]
pub struct LayerPairs {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub target: Vec<usize>,
    pub offsets: Vec<usize>,
    pub out_rows: usize,
}

/// Attention coefficients `softmax_u LeakyReLU(a_srcᵀ W h_u + a_dstᵀ W h_v)`
/// as a `pairs × 1` column. `wh` is `W h` for every input row.
pub fn attention_coeffs(tape: &mut Tape, wh: Var, a_src: Var, a_dst: Var, pairs: &LayerPairs) -> Result<Var> {
    let s_src = tape.matmul(wh, a_src)?;
    let s_dst = tape.matmul(wh, a_dst)?;
    let from = tape.gather_rows(s_src, pairs.src.iter().map(|&i| Some(i)).collect())?;
    let to = tape.gather_rows(s_dst, pairs.dst.iter().map(|&i| Some(i)).collect())?;
    let logits = tape.add(from, to)?;
    let logits = tape.leaky_relu(logits, LEAKY_SLOPE)?;
    tape.segment_softmax(logits, pairs.offsets.clone())
}

/// One layer: `∥_m tanh(Σ_u α^m_uv W^m h_u)`, then `∥ W′ e_v` when the
/// layer has a residual projection. `e` holds the original features of the
/// output rows.
#[allow(clippy::too_many_arguments)]
pub fn attention_aggregate_residual(
    tape: &mut Tape,
    h: Var,
    e: Option<Var>,
    layer: &AttentionLayer,
    pairs: &LayerPairs,
    dropout: f64,
    rng: &mut ChaCha8Rng,
    train: bool,
    mask_neighbors: bool,
) -> Result<Var> {
    let mut parts = Vec::with_capacity(layer.heads.len() + 1);
    for &(w, a_src, a_dst) in &layer.heads {
        let wh = tape.matmul(h, w)?;
        let alpha = attention_coeffs(tape, wh, a_src, a_dst, pairs)?;
        let alpha = tape.dropout(alpha, dropout, rng, train)?;
        let msgs = tape.gather_rows(wh, pairs.src.iter().map(|&i| Some(i)).collect())?;
        let mut msgs = tape.mul_col(msgs, alpha)?;
        if mask_neighbors {
            msgs = tape.scale(msgs, 0.0)?;
        }
        let agg = tape.scatter_add_rows(msgs, pairs.target.clone(), pairs.out_rows)?;
        parts.push(tape.tanh(agg)?);
    }
    if let (Some(w_res), Some(e)) = (layer.residual, e) {
        parts.push(tape.matmul(e, w_res)?);
    }
    tape.concat(&parts, 1)
}
