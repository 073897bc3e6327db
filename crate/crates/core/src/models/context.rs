use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::FlowTable;
use crate::diffcore::{SparseRows, Tensor};
use crate::error::{Error, Result};
use crate::flowgraph::{build_bipartite, pad_virtual, to_line_graph_within, EndpointGraph, LineGraph};

/// Refuse line graphs beyond this many edges unless told otherwise.
pub const DEFAULT_LINE_GRAPH_BUDGET: u64 = 200_000_000;

/// Everything the models read about one set of flows, built once.
///
/// Row `i` of `features` is flow `i`, which is also line-graph node `i`.
#[derive(Clone, Debug)]
pub struct GraphContext {
    pub features: Arc<Tensor>,
    /// Unpadded endpoint graph (E-GraphSAGE).
    pub endpoint: EndpointGraph,
    /// Mean features of the flows behind each endpoint-graph adjacency entry.
    pub edge_mean: Arc<Tensor>,
    /// Line graph over the padded bipartite graph (attention models).
    pub line: LineGraph,
    /// Temporal windows, `num_flows × window`: the flow itself in the last
    /// slot, earlier flows from the same source before it, `None` padding.
    pub sequences: Vec<Option<usize>>,
    pub window: usize,
}

impl GraphContext {
    pub fn build(table: &FlowTable, window: usize, pad_seed: u64) -> Result<Self> {
        Self::build_within(table, window, pad_seed, DEFAULT_LINE_GRAPH_BUDGET)
    }

    pub fn build_within(table: &FlowTable, window: usize, pad_seed: u64, budget: u64) -> Result<Self> {
        if window == 0 {
            return Err(Error::Config("temporal window must be positive".into()));
        }
        let features = Arc::new(
            table
                .feature_tensor()
                .ok_or_else(|| Error::data(None, "no flows to build a graph from"))?,
        );
        let graph = build_bipartite(&table.src, &table.dst)?;
        let endpoint = graph.endpoint_graph();
        let f = table.dim;
        let mut mean = Vec::with_capacity(endpoint.entry_flows.len() * f);
        for flows in &endpoint.entry_flows {
            let start = mean.len();
            mean.resize(start + f, 0.0);
            for &i in flows {
                mean[start..].iter_mut().zip(table.row(i)).for_each(|(m, v)| *m += v);
            }
            let n = flows.len() as f64;
            mean[start..].iter_mut().for_each(|m| *m /= n);
        }
        let edge_mean = Arc::new(Tensor::new([endpoint.entry_flows.len(), f], mean)?);

        let padded = pad_virtual(&graph, &mut ChaCha8Rng::seed_from_u64(pad_seed));
        let line = to_line_graph_within(&padded, &table.timestamps, budget)?;

        // windows follow the original source endpoint, not the padded one
        let mut by_source = vec![Vec::new(); graph.sources.len()];
        for e in &graph.edges {
            by_source[e.src].push(e.flow);
        }
        let mut sequences = vec![None; table.len() * window];
        for flows in &mut by_source {
            flows.sort_by(|&a, &b| table.timestamps[a].total_cmp(&table.timestamps[b]).then(a.cmp(&b)));
            for (p, &flow) in flows.iter().enumerate() {
                let history = &flows[(p + 1).saturating_sub(window)..=p];
                let slot = &mut sequences[flow * window..(flow + 1) * window];
                for (s, &h) in slot[window - history.len()..].iter_mut().zip(history) {
                    *s = Some(h);
                }
            }
        }
        Ok(GraphContext {
            features,
            endpoint,
            edge_mean,
            line,
            sequences,
            window,
        })
    }

    pub fn num_flows(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.row_width()
    }

    pub fn sequence(&self, flow: usize) -> &[Option<usize>] {
        &self.sequences[flow * self.window..(flow + 1) * self.window]
    }

    /// Row-normalised line-graph adjacency induced on `nodes` (sorted).
    pub fn transition(&self, nodes: &[usize]) -> Result<SparseRows> {
        SparseRows::row_normalized(&self.line.adjacency.induced(nodes), nodes.len())
    }
}
