use crate::diffcore::{Tape, Tensor, Var};
use crate::error::Result;
use crate::sampler::{khop_sample_edges, SampleConfig};

use super::{linear, context::GraphContext, ForwardOptions, ModelConfig, ParamVars};

/// Mean of the message rows sent to each of `out_rows` targets; targets
/// without messages get a zero row. `messages` is `None` when no row has
/// any message at all.
pub fn mean_aggregate(tape: &mut Tape, messages: Option<Var>, targets: &[usize], out_rows: usize, width: usize) -> Result<Var> {
    let Some(messages) = messages else {
        return Ok(tape.constant(Tensor::zeros([out_rows, width])));
    };
    let mut count = vec![0usize; out_rows];
    targets.iter().for_each(|&t| count[t] += 1);
    let sum = tape.scatter_add_rows(messages, targets.to_vec(), out_rows)?;
    let inv = count.iter().map(|&c| if c == 0 { 0.0 } else { 1.0 / c as f64 }).collect();
    tape.scale_rows(sum, inv)
}

/// `ReLU([h_v ∥ h_N(v)] W)`.
pub fn sage_update(tape: &mut Tape, h_self: Var, h_neigh: Var, w: Var) -> Result<Var> {
    let cat = tape.concat(&[h_self, h_neigh], 1)?;
    let z = tape.matmul(cat, w)?;
    tape.relu(z)
}

/// `h_u ∥ h_v`, followed by the flow's own features when `residual` is set.
pub fn sage_edge_embed(tape: &mut Tape, h_u: Var, h_v: Var, e_uv: Var, residual: bool) -> Result<Var> {
    if residual {
        tape.concat(&[h_u, h_v, e_uv], 1)
    } else {
        tape.concat(&[h_u, h_v], 1)
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn egraphsage_forward(
    tape: &mut Tape,
    c: &ModelConfig,
    params: &ParamVars,
    ctx: &GraphContext,
    features: Var,
    batch: &[usize],
    sample: &SampleConfig,
    opts: &ForwardOptions,
) -> Result<Var> {
    let adj = &ctx.endpoint.adj;
    let pairs: Vec<(usize, usize)> = batch.iter().map(|&f| ctx.endpoint.edge_nodes[f]).collect();
    let block = khop_sample_edges(adj, &pairs, sample, opts.key)?;
    let f = c.feature_dim;
    let edge_mean = tape.leaf_shared(ctx.edge_mean.clone(), false);

    let mut h = tape.constant(Tensor::ones([block.layers[0].nodes.len(), f]));
    let mut width = f;
    for k in 1..=block.hops() {
        let (prev, layer) = (&block.layers[k - 1], &block.layers[k]);
        let pos = |u: usize| prev.position(u).expect("sampled nodes persist across layers");
        let (mut targets, mut src, mut entries) = (Vec::new(), Vec::new(), Vec::new());
        if !opts.mask_neighbors {
            for (i, (&v, nbrs)) in layer.nodes.iter().zip(&layer.sampled).enumerate() {
                for &u in nbrs {
                    targets.push(i);
                    src.push(Some(pos(u)));
                    entries.push(adj.entry(v, u).map(Some).expect("sampled pair is an edge"));
                }
            }
        }
        let messages = if targets.is_empty() {
            None
        } else {
            let hu = tape.gather_rows(h, src)?;
            let e = tape.gather_rows(edge_mean, entries)?;
            Some(tape.concat(&[hu, e], 1)?)
        };
        let agg = mean_aggregate(tape, messages, &targets, layer.nodes.len(), width + f)?;
        let h_self = tape.gather_rows(h, layer.nodes.iter().map(|&v| Some(pos(v))).collect())?;
        h = sage_update(tape, h_self, agg, params.get(&format!("sage{k}.w"))?)?;
        width = c.hidden;
    }

    let top = block.batch();
    let at = |u: usize| Some(top.position(u).expect("batch endpoints are in the top layer"));
    let hu = tape.gather_rows(h, pairs.iter().map(|p| at(p.0)).collect())?;
    let hv = tape.gather_rows(h, pairs.iter().map(|p| at(p.1)).collect())?;
    let e = tape.gather_rows(features, batch.iter().map(|&b| Some(b)).collect())?;
    let z = sage_edge_embed(tape, hu, hv, e, true)?;
    linear(tape, params, z, "cls.w", Some("cls.b"))
}
