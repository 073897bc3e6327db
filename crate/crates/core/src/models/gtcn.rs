use std::sync::Arc;

use crate::diffcore::{SparseRows, Tape, Var};
use crate::error::Result;
use crate::sampler::{khop_sample_nodes, SampleConfig, SampledBlock};

use super::attention::{attention_aggregate_residual, AttentionLayer, LayerPairs};
use super::context::GraphContext;
use super::{linear, ForwardOptions, ModelConfig, ModelKind, ParamVars};

/// Per-row outputs of the four GTCN-G branches.
#[derive(Clone, Copy, Debug)]
pub struct BranchOutputs {
    pub temporal: Var,
    pub spatial: Var,
    pub attention: Var,
    pub residual: Var,
}

/// Gated causal convolution layers over `x: [N, S, D]`. Each entry is
/// `(θ₁, θ₂, b, c, dilation)`; a layer computes
/// `tanh(θ₁ * x + b) ⊙ sigmoid(θ₂ * x + c)`.
pub fn gated_tcn(tape: &mut Tape, mut x: Var, layers: &[(Var, Var, Var, Var, usize)]) -> Result<Var> {
    for &(theta1, theta2, b, c, dilation) in layers {
        let filter = tape.conv1d_causal(x, theta1, b, dilation)?;
        let filter = tape.tanh(filter)?;
        let gate = tape.conv1d_causal(x, theta2, c, dilation)?;
        let gate = tape.sigmoid(gate)?;
        x = tape.hadamard(filter, gate)?;
    }
    Ok(x)
}

/// `softmax_rows(ReLU(E₁ E₂ᵀ))`.
pub fn adaptive_adjacency(tape: &mut Tape, e1: Var, e2: Var) -> Result<Var> {
    let e2t = tape.transpose(e2)?;
    let logits = tape.matmul(e1, e2t)?;
    let logits = tape.relu(logits)?;
    tape.softmax_rows(logits)
}

/// `Σ_k P_fᵏ X W_k1 + P_bᵏ X W_k2 + A_adpᵏ X W_k3` for `k = 0..weights.len()`,
/// returned for the rows `rows` of `x`.
///
/// `P_f` and `P_b` act on every row of `x`; `a_adp` is square over `rows`
/// only, so the adaptive term mixes just those rows. With `rows` covering
/// all of `x` this is the plain full-graph sum. Powers are applied by
/// repeated propagation. `mask_neighbors` keeps only the `k = 0` terms.
pub fn diffusion_gconv(
    tape: &mut Tape,
    x: Var,
    p_f: Arc<SparseRows>,
    p_b: Arc<SparseRows>,
    a_adp: Var,
    rows: &[usize],
    weights: &[[Var; 3]],
    mask_neighbors: bool,
) -> Result<Var> {
    let index: Vec<Option<usize>> = rows.iter().map(|&r| Some(r)).collect();
    let x_rows = tape.gather_rows(x, index.clone())?;
    let (mut yf, mut yb, mut ya) = (x, x, x_rows);
    let mut graph_sum: Option<Var> = None;
    let mut adaptive_sum: Option<Var> = None;
    let accumulate = |tape: &mut Tape, acc: &mut Option<Var>, t: Var| -> Result<()> {
        *acc = Some(match *acc {
            Some(a) => tape.add(a, t)?,
            None => t,
        });
        Ok(())
    };
    for (k, [w1, w2, w3]) in weights.iter().enumerate() {
        if k > 0 {
            if mask_neighbors {
                break;
            }
            yf = tape.spmm(p_f.clone(), yf)?;
            yb = tape.spmm(p_b.clone(), yb)?;
            ya = tape.matmul(a_adp, ya)?;
        }
        let t = tape.matmul(yf, *w1)?;
        accumulate(tape, &mut graph_sum, t)?;
        let t = tape.matmul(yb, *w2)?;
        accumulate(tape, &mut graph_sum, t)?;
        let t = tape.matmul(ya, *w3)?;
        accumulate(tape, &mut adaptive_sum, t)?;
    }
    let graph_rows = tape.gather_rows(graph_sum.expect("at least the zeroth power"), index)?;
    tape.add(graph_rows, adaptive_sum.expect("at least the zeroth power"))
}

/// `ReLU([temporal ∥ spatial ∥ attention ∥ residual] W + b)`.
pub fn fuse_branches(tape: &mut Tape, b: &BranchOutputs, w: Var, bias: Var) -> Result<Var> {
    let cat = tape.concat(&[b.temporal, b.spatial, b.attention, b.residual], 1)?;
    let z = tape.matmul(cat, w)?;
    let z = tape.add_bias(z, bias)?;
    tape.relu(z)
}

fn layer_pairs(block: &SampledBlock, k: usize) -> LayerPairs {
    let (prev, layer) = (&block.layers[k - 1], &block.layers[k]);
    let pos = |u: usize| prev.position(u).expect("sampled nodes persist across layers");
    let mut pairs = LayerPairs {
        offsets: vec![0],
        out_rows: layer.nodes.len(),
        ..Default::default()
    };
    for (i, (&v, nbrs)) in layer.nodes.iter().zip(&layer.sampled).enumerate() {
        // isolated flows attend to themselves
        let sources: &[usize] = if nbrs.is_empty() { std::slice::from_ref(&v) } else { nbrs };
        for &u in sources {
            pairs.src.push(pos(u));
            pairs.dst.push(pos(v));
            pairs.target.push(i);
        }
        pairs.offsets.push(pairs.src.len());
    }
    pairs
}

fn gather(tape: &mut Tape, x: Var, rows: impl IntoIterator<Item = usize>) -> Result<Var> {
    tape.gather_rows(x, rows.into_iter().map(Some).collect())
}

#[allow(clippy::too_many_arguments)]
pub(super) fn attention_model_forward(
    tape: &mut Tape,
    c: &ModelConfig,
    params: &ParamVars,
    ctx: &GraphContext,
    features: Var,
    batch: &[usize],
    sample: &SampleConfig,
    opts: &ForwardOptions,
) -> Result<Var> {
    let gtcn = c.kind == ModelKind::GtcnG;
    let block = khop_sample_nodes(&ctx.line.adjacency, batch, sample, opts.key)?;
    let mut rng = opts.dropout_rng();

    let mut h = gather(tape, features, block.layers[0].nodes.iter().copied())?;
    for k in 1..=block.hops() {
        let heads = (1..=c.heads)
            .map(|m| {
                Ok((
                    params.get(&format!("att{k}.h{m}.w"))?,
                    params.get(&format!("att{k}.h{m}.a_src"))?,
                    params.get(&format!("att{k}.h{m}.a_dst"))?,
                ))
            })
            .collect::<Result<_>>()?;
        let layer = AttentionLayer {
            heads,
            residual: if gtcn { Some(params.get(&format!("att{k}.res"))?) } else { None },
        };
        let e = if gtcn {
            Some(gather(tape, features, block.layers[k].nodes.iter().copied())?)
        } else {
            None
        };
        let pairs = layer_pairs(&block, k);
        h = attention_aggregate_residual(tape, h, e, &layer, &pairs, c.dropout, &mut rng, opts.train, opts.mask_neighbors)?;
    }
    let top = block.batch();
    let batch_rows: Vec<usize> = batch
        .iter()
        .map(|&b| top.position(b).expect("batch is the top layer"))
        .collect();
    let attention = gather(tape, h, batch_rows.iter().copied())?;
    if !gtcn {
        return linear(tape, params, attention, "cls.w", Some("cls.b"));
    }

    // temporal: source history of each batch flow
    let s = ctx.window;
    let mut seq = Vec::with_capacity(batch.len() * s);
    for &b in batch {
        if opts.mask_neighbors {
            seq.extend(std::iter::repeat(None).take(s - 1));
            seq.push(Some(b));
        } else {
            seq.extend_from_slice(ctx.sequence(b));
        }
    }
    let x_seq = tape.gather_rows(features, seq)?;
    let x_seq = tape.reshape(x_seq, [batch.len(), s, c.feature_dim])?;
    let tcn: Vec<_> = [(1, 1), (2, 2)]
        .iter()
        .map(|&(l, dilation)| {
            Ok((
                params.get(&format!("tcn{l}.theta1"))?,
                params.get(&format!("tcn{l}.theta2"))?,
                params.get(&format!("tcn{l}.b"))?,
                params.get(&format!("tcn{l}.c"))?,
                dilation,
            ))
        })
        .collect::<Result<_>>()?;
    let temporal = gated_tcn(tape, x_seq, &tcn)?;
    let temporal = tape.take_step(temporal, s - 1)?;

    // spatial: diffusion over the last sampled hop, adaptive term over the batch
    let around = &block.layers[c.layers - 1].nodes;
    let p_f = Arc::new(ctx.transition(around)?);
    let p_b = Arc::new(transposed_transition(&p_f)?);
    let x_around = gather(tape, features, around.iter().copied())?;
    let centre: Vec<usize> = top
        .nodes
        .iter()
        .map(|&v| around.binary_search(&v).expect("batch within its neighbourhood"))
        .collect();
    let e1 = gather(tape, params.get("gconv.e1")?, top.nodes.iter().copied())?;
    let e2 = gather(tape, params.get("gconv.e2")?, top.nodes.iter().copied())?;
    let a_adp = adaptive_adjacency(tape, e1, e2)?;
    let weights = (0..=c.diffusion_order)
        .map(|k| {
            let w = |j: usize| params.get(&format!("gconv.w{k}_{j}"));
            Ok([w(1)?, w(2)?, w(3)?])
        })
        .collect::<Result<Vec<_>>>()?;
    let spatial = diffusion_gconv(tape, x_around, p_f, p_b, a_adp, &centre, &weights, opts.mask_neighbors)?;
    let spatial = gather(tape, spatial, batch_rows.iter().copied())?;

    let e_batch = gather(tape, features, batch.iter().copied())?;
    let residual = tape.matmul(e_batch, params.get("residual.w")?)?;

    let fused = fuse_branches(
        tape,
        &BranchOutputs {
            temporal,
            spatial,
            attention,
            residual,
        },
        params.get("fuse.w")?,
        params.get("fuse.b")?,
    )?;
    linear(tape, params, fused, "cls.w", Some("cls.b"))
}

/// Row-normalised transpose of the 0/1 pattern of `p`.
fn transposed_transition(p: &SparseRows) -> Result<SparseRows> {
    let mut lists = vec![Vec::new(); p.n_cols()];
    for i in 0..p.n_rows() {
        for (j, _) in p.row(i) {
            lists[j].push(i);
        }
    }
    SparseRows::row_normalized(&lists, p.n_rows())
}
