//! K-hop minibatch neighbourhood sampling.
//!
//! Starting from the batch at layer `K`, each step back to layer `k - 1`
//! keeps everything already present and adds, for every node of layer `k`,
//! a uniform sample of its neighbours. The node set of a layer is fixed
//! before that layer's sampling starts, so the cost is bounded by
//! [`estimate_batch_cost`].
//!
//! Batches are either edges of the endpoint graph (E-GraphSAGE) or nodes of
//! the line graph (attention models). Randomness is drawn from a generator
//! keyed on `(seed, epoch, batch, layer, node)`, which makes a sample
//! independent of the order or thread in which batches are prepared.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flowgraph::Adjacency;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleConfig {
    /// Neighbours drawn per node, one entry per hop; `sizes.len()` is `K`.
    pub sizes: Vec<usize>,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            sizes: vec![8, 8],
            seed: 0,
        }
    }
}

impl SampleConfig {
    pub fn hops(&self) -> usize {
        self.sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.contains(&0) {
            return Err(Error::Config(format!("sample sizes must be positive, got {:?}", self.sizes)));
        }
        Ok(())
    }

    /// Size used when sampling for layer `k` (1-based).
    pub fn size_at(&self, k: usize) -> usize {
        self.sizes[k - 1]
    }
}

/// Identifies one batch within a run, for keyed sampling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BatchKey {
    pub epoch: u64,
    pub batch: u64,
}

/// One layer `k` of a sampled neighbourhood.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layer {
    /// `Bᵏ` as undirected pairs `(min, max)`, sorted.
    pub edges: Vec<(usize, usize)>,
    /// `V(Bᵏ)`, sorted.
    pub nodes: Vec<usize>,
    /// For `k ≥ 1`, the neighbours sampled for each entry of `nodes`
    /// (sorted); empty for layer 0.
    pub sampled: Vec<Vec<usize>>,
}

impl Layer {
    pub fn position(&self, v: usize) -> Option<usize> {
        self.nodes.binary_search(&v).ok()
    }
}

/// `layers[k]` holds layer `k`; `layers[K]` is the batch itself.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampledBlock {
    pub layers: Vec<Layer>,
}

impl SampledBlock {
    pub fn hops(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn input_nodes(&self) -> &[usize] {
        &self.layers[0].nodes
    }

    pub fn batch(&self) -> &Layer {
        self.layers.last().expect("at least one layer")
    }
}

/// Mixes the parts into one 64-bit seed (splitmix64 finaliser per part).
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x9E37_79B9_7F4A_7C15u64, |h, &p| {
        let mut z = (h ^ p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    })
}

pub fn node_rng(seed: u64, key: BatchKey, layer: usize, node: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(&[seed, key.epoch, key.batch, layer as u64, node as u64]))
}

/// All neighbours when `degree ≤ size`, otherwise `size` distinct
/// neighbours drawn uniformly without replacement. Sorted.
pub fn sample_neighbors(adj: &Adjacency, node: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let nbrs = adj.neighbors(node);
    if nbrs.len() <= size {
        return nbrs.to_vec();
    }
    let mut out: Vec<usize> = index::sample(rng, nbrs.len(), size)
        .into_iter()
        .map(|i| nbrs[i])
        .collect();
    out.sort_unstable();
    out
}

/// Samples the K-hop neighbourhood of a batch of edges `(u, v)`.
pub fn khop_sample_edges(
    adj: &Adjacency,
    batch: &[(usize, usize)],
    cfg: &SampleConfig,
    key: BatchKey,
) -> Result<SampledBlock> {
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let edges: Vec<(usize, usize)> = batch.iter().map(|&(u, v)| (u.min(v), u.max(v))).collect();
    for &(u, v) in &edges {
        if v >= adj.num_nodes() || !adj.contains(u, v) {
            return Err(Error::Usage(format!("batch edge ({u}, {v}) is not in the graph")));
        }
    }
    expand(adj, edges, Vec::new(), cfg, key)
}

/// Samples the K-hop neighbourhood of a batch of nodes.
pub fn khop_sample_nodes(adj: &Adjacency, batch: &[usize], cfg: &SampleConfig, key: BatchKey) -> Result<SampledBlock> {
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    if let Some(&v) = batch.iter().find(|&&v| v >= adj.num_nodes()) {
        return Err(Error::Usage(format!("batch node {v} is not in the graph")));
    }
    expand(adj, Vec::new(), batch.to_vec(), cfg, key)
}

fn expand(
    adj: &Adjacency,
    mut edges: Vec<(usize, usize)>,
    seeds: Vec<usize>,
    cfg: &SampleConfig,
    key: BatchKey,
) -> Result<SampledBlock> {
    cfg.validate()?;
    edges.sort_unstable();
    edges.dedup();
    let node_set = |edges: &[(usize, usize)]| {
        let mut n: Vec<usize> = edges.iter().flat_map(|&(u, v)| [u, v]).chain(seeds.iter().copied()).collect();
        n.sort_unstable();
        n.dedup();
        n
    };
    let k_max = cfg.hops();
    let mut layers = Vec::with_capacity(k_max + 1);
    let mut nodes = node_set(&edges);
    for k in (1..=k_max).rev() {
        let size = cfg.size_at(k);
        let sampled: Vec<Vec<usize>> = nodes
            .iter()
            .map(|&v| sample_neighbors(adj, v, size, &mut node_rng(cfg.seed, key, k, v)))
            .collect();
        let mut next = edges.clone();
        for (&v, nbrs) in nodes.iter().zip(&sampled) {
            next.extend(nbrs.iter().map(|&u| (u.min(v), u.max(v))));
        }
        next.sort_unstable();
        next.dedup();
        layers.push(Layer {
            edges: std::mem::replace(&mut edges, next),
            nodes,
            sampled,
        });
        nodes = node_set(&edges);
    }
    layers.push(Layer {
        edges,
        nodes,
        sampled: Vec::new(),
    });
    layers.reverse();
    Ok(SampledBlock { layers })
}

/// Worst-case `(nodes, edges)` of a sampled block, given `seeds` starting
/// nodes (two per batch edge, one per batch node) and `batch_edges`.
pub fn estimate_batch_cost(seeds: usize, batch_edges: usize, cfg: &SampleConfig) -> (usize, usize) {
    let (mut nodes, mut edges) = (seeds, batch_edges);
    for &s in cfg.sizes.iter().rev() {
        edges = edges.saturating_add(nodes.saturating_mul(s));
        nodes = nodes.saturating_mul(s.saturating_add(1));
    }
    (nodes, edges)
}
