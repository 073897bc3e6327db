//! Bipartite endpoint graph, virtual-node padding and line-graph conversion.
//!
//! Every unique source endpoint and every unique destination endpoint is a
//! node; every flow is an edge. The line graph turns each flow into a node
//! and links two flows whenever they share an endpoint, so that flow
//! classification becomes node classification.

use std::collections::{BinaryHeap, HashMap};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;

use crate::dataio::Endpoint;
use crate::error::{Error, Result};

/// Sorted, duplicate-free neighbour lists in compressed-row form.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Adjacency {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
}

impl Adjacency {
    /// Builds from per-node neighbour lists, sorting and de-duplicating each.
    pub fn from_lists(mut lists: Vec<Vec<usize>>) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        for list in &mut lists {
            list.sort_unstable();
            list.dedup();
            neighbors.extend_from_slice(list);
            offsets.push(neighbors.len());
        }
        Adjacency { offsets, neighbors }
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    /// Position of `u` within the flattened neighbour array of `v`.
    pub fn entry(&self, v: usize, u: usize) -> Option<usize> {
        self.neighbors(v)
            .binary_search(&u)
            .ok()
            .map(|p| self.offsets[v] + p)
    }

    pub fn num_entries(&self) -> usize {
        self.neighbors.len()
    }

    /// Undirected edge count (each stored pair counted once).
    pub fn num_edges(&self) -> usize {
        self.neighbors.len() / 2
    }

    pub fn contains(&self, v: usize, u: usize) -> bool {
        self.neighbors(v).binary_search(&u).is_ok()
    }

    /// Neighbour lists restricted to `nodes`, re-indexed to positions in
    /// `nodes` (which must be sorted).
    pub fn induced(&self, nodes: &[usize]) -> Vec<Vec<usize>> {
        nodes
            .iter()
            .map(|&v| {
                self.neighbors(v)
                    .iter()
                    .filter_map(|u| nodes.binary_search(u).ok())
                    .collect()
            })
            .collect()
    }
}

/// One flow as an edge between a source-side and a destination-side node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlowEdge {
    pub src: usize,
    pub dst: usize,
    /// Row of the flow in the encoded feature matrix.
    pub flow: usize,
}

/// `G(S, D; E)`. A `None` endpoint marks a virtual node.
#[derive(Clone, Debug, PartialEq)]
pub struct BipartiteGraph {
    pub sources: Vec<Option<Endpoint>>,
    pub destinations: Vec<Option<Endpoint>>,
    pub edges: Vec<FlowEdge>,
}

impl BipartiteGraph {
    pub fn num_nodes(&self) -> usize {
        self.sources.len() + self.destinations.len()
    }

    pub fn source_degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.sources.len()];
        self.edges.iter().for_each(|e| d[e.src] += 1);
        d
    }

    pub fn destination_degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.destinations.len()];
        self.edges.iter().for_each(|e| d[e.dst] += 1);
        d
    }

    /// Degrees over `S ∪ D`, sources first.
    pub fn degrees(&self) -> Vec<usize> {
        let mut d = self.source_degrees();
        d.extend(self.destination_degrees());
        d
    }

    /// Endpoint graph over `S ∪ D` (destinations offset by `|S|`), with the
    /// flows behind every adjacency entry.
    pub fn endpoint_graph(&self) -> EndpointGraph {
        let s = self.sources.len();
        let n = self.num_nodes();
        let mut pair_flows: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        let mut lists = vec![Vec::new(); n];
        for e in &self.edges {
            let (u, v) = (e.src, s + e.dst);
            lists[u].push(v);
            lists[v].push(u);
            pair_flows.entry((u, v)).or_default().push(e.flow);
        }
        let adj = Adjacency::from_lists(lists);
        let mut entry_flows = Vec::with_capacity(adj.num_entries());
        for v in 0..n {
            for &u in adj.neighbors(v) {
                let key = if v < s { (v, u) } else { (u, v) };
                entry_flows.push(pair_flows[&key].clone());
            }
        }
        let edge_nodes = self.edges.iter().map(|e| (e.src, s + e.dst)).collect();
        EndpointGraph {
            adj,
            entry_flows,
            edge_nodes,
        }
    }
}

/// The bipartite graph as a plain undirected graph over `S ∪ D`.
#[derive(Clone, Debug, PartialEq)]
pub struct EndpointGraph {
    pub adj: Adjacency,
    /// For every flattened adjacency entry, the flows joining that pair.
    pub entry_flows: Vec<Vec<usize>>,
    /// Endpoint-graph node pair of each bipartite edge, in edge order.
    pub edge_nodes: Vec<(usize, usize)>,
}

pub fn build_bipartite(src: &[Endpoint], dst: &[Endpoint]) -> Result<BipartiteGraph> {
    if src.is_empty() || src.len() != dst.len() {
        return Err(Error::data(None, format!("need matching non-empty endpoint lists, got {} and {}", src.len(), dst.len())));
    }
    fn intern(index: &mut HashMap<Endpoint, usize>, nodes: &mut Vec<Option<Endpoint>>, e: &Endpoint) -> usize {
        *index.entry(e.clone()).or_insert_with(|| {
            nodes.push(Some(e.clone()));
            nodes.len() - 1
        })
    }
    let (mut s_idx, mut d_idx) = (HashMap::new(), HashMap::new());
    let (mut sources, mut destinations) = (Vec::new(), Vec::new());
    let edges = src
        .iter()
        .zip(dst)
        .enumerate()
        .map(|(flow, (s, d))| FlowEdge {
            src: intern(&mut s_idx, &mut sources, s),
            dst: intern(&mut d_idx, &mut destinations, d),
            flow,
        })
        .collect();
    Ok(BipartiteGraph {
        sources,
        destinations,
        edges,
    })
}

/// Equalises `|S|` and `|D|` with virtual nodes on the smaller side.
///
/// Each virtual node is attached to the real node with the largest current
/// load `degree / (1 + children)`. Every edge of a node that received
/// virtual children then moves to a uniformly drawn member of
/// `{node} ∪ children`. Splitting a node's edges this way never increases
/// `Σ d(d-1)/2` and never raises the maximum degree; `|E|` is unchanged.
pub fn pad_virtual(g: &BipartiteGraph, rng: &mut impl Rng) -> BipartiteGraph {
    let mut out = g.clone();
    let (s, d) = (g.sources.len(), g.destinations.len());
    if s == d {
        return out;
    }
    let pad_sources = s < d;
    let missing = s.abs_diff(d);
    let (side_len, degrees) = if pad_sources {
        (s, g.source_degrees())
    } else {
        (d, g.destination_degrees())
    };

    // (load numerator, load denominator, node); compare d1/c1 vs d2/c2 exactly
    #[derive(PartialEq, Eq)]
    struct Load(usize, usize, usize);
    impl Ord for Load {
        fn cmp(&self, o: &Self) -> std::cmp::Ordering {
            (self.0 * o.1)
                .cmp(&(o.0 * self.1))
                .then_with(|| o.2.cmp(&self.2))
        }
    }
    impl PartialOrd for Load {
        fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(o))
        }
    }
    let mut heap: BinaryHeap<Load> = (0..side_len).map(|v| Load(degrees[v], 1, v)).collect();
    let mut group: Vec<Vec<usize>> = (0..side_len).map(|v| vec![v]).collect();
    for k in 0..missing {
        let Load(deg, parts, v) = heap.pop().expect("non-empty side");
        group[v].push(side_len + k);
        heap.push(Load(deg, parts + 1, v));
    }

    for e in &mut out.edges {
        let home = if pad_sources { &mut e.src } else { &mut e.dst };
        let members = &group[*home];
        if members.len() > 1 {
            *home = members[rng.gen_range(0..members.len())];
        }
    }
    let side = if pad_sources {
        &mut out.sources
    } else {
        &mut out.destinations
    };
    side.extend(std::iter::repeat(None).take(missing));
    out
}

/// Closed-form line-graph size `Σ_{i ∈ S ∪ D} d_i (d_i - 1) / 2`.
///
/// Parallel flows (same source and destination) contribute once per shared
/// endpoint, so this counts endpoint-sharing flow pairs with multiplicity.
pub fn line_graph_edge_count(g: &BipartiteGraph) -> Result<u64> {
    g.degrees().iter().try_fold(0u64, |acc, &d| {
        let d = d as u64;
        d.checked_mul(d.saturating_sub(1))
            .map(|p| p / 2)
            .and_then(|p| acc.checked_add(p))
            .ok_or_else(|| Error::Resource("line-graph edge count overflows 64 bits".into()))
    })
}

/// Flows as nodes, adjacent when they share an endpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct LineGraph {
    pub adjacency: Adjacency,
    /// Feature-matrix row of each node's flow.
    pub flow: Vec<usize>,
    pub timestamps: Vec<f64>,
    /// Endpoint-sharing pairs counted with multiplicity; equals
    /// [`line_graph_edge_count`] of the source graph.
    pub endpoint_pairs: u64,
}

impl LineGraph {
    pub fn num_nodes(&self) -> usize {
        self.flow.len()
    }

    pub fn num_edges(&self) -> usize {
        self.adjacency.num_edges()
    }

    /// Edge list: a `# nodes N` header, then one `u v` line per edge, `u < v`.
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("# nodes {}\n", self.num_nodes());
        for v in 0..self.num_nodes() {
            for &u in self.adjacency.neighbors(v).iter().filter(|&&u| u > v) {
                let _ = writeln!(out, "{v} {u}");
            }
        }
        out
    }

    pub fn write_edge_list(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_edge_list().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// Node `i` of the line graph is edge `i` of `g`. `timestamps` is indexed
/// by flow.
pub fn to_line_graph(g: &BipartiteGraph, timestamps: &[f64]) -> Result<LineGraph> {
    to_line_graph_within(g, timestamps, u64::MAX)
}

/// As [`to_line_graph`], refusing when the predicted size exceeds `budget`
/// edges. The error names the highest-degree endpoints.
pub fn to_line_graph_within(g: &BipartiteGraph, timestamps: &[f64], budget: u64) -> Result<LineGraph> {
    let predicted = line_graph_edge_count(g)?;
    if predicted > budget {
        let s = g.sources.len();
        let mut deg: Vec<(usize, usize)> = g.degrees().into_iter().enumerate().collect();
        deg.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let worst: Vec<String> = deg
            .iter()
            .take(5)
            .map(|&(i, d)| {
                let name = if i < s {
                    g.sources[i].as_ref().map_or("virtual source".into(), |e| format!("src {e}"))
                } else {
                    g.destinations[i - s]
                        .as_ref()
                        .map_or("virtual destination".into(), |e| format!("dst {e}"))
                };
                format!("{name} (degree {d})")
            })
            .collect();
        return Err(Error::Resource(format!(
            "line graph would have {predicted} edges, budget is {budget}; highest-degree endpoints: {}",
            worst.join(", ")
        )));
    }

    let s = g.sources.len();
    let mut incident = vec![Vec::new(); g.num_nodes()];
    for (i, e) in g.edges.iter().enumerate() {
        incident[e.src].push(i);
        incident[s + e.dst].push(i);
    }
    let lists: Vec<Vec<usize>> = g
        .edges
        .iter()
        .enumerate()
        .map(|(i, e)| {
            incident[e.src]
                .iter()
                .chain(&incident[s + e.dst])
                .copied()
                .filter(|&j| j != i)
                .collect()
        })
        .collect();
    let adjacency = Adjacency::from_lists(lists);
    let flow: Vec<usize> = g.edges.iter().map(|e| e.flow).collect();
    let timestamps = flow
        .iter()
        .map(|&f| {
            timestamps
                .get(f)
                .copied()
                .ok_or_else(|| Error::data(Some(f), "flow has no timestamp"))
        })
        .collect::<Result<_>>()?;
    Ok(LineGraph {
        adjacency,
        flow,
        timestamps,
        endpoint_pairs: predicted,
    })
}
