//! The three flow classifiers and their shared plumbing.
//!
//! * `egraphsage_m`: minibatch E-GraphSAGE on the endpoint graph. Node
//!   states start as all-ones vectors, messages carry the mean features of
//!   the flows joining two endpoints, and the final flow embedding
//!   concatenates both endpoint states with the flow's own features.
//! * `gat`: multi-head attention over sampled line-graph neighbourhoods.
//! * `gtcn_g`: the attention branch with a per-layer residual projection of
//!   the original flow features, plus gated temporal convolution over each
//!   flow's source history, adaptive diffusion convolution and a residual
//!   feature branch, fused by a linear layer.
//!
//! All models classify a batch of flows, identified by their row in the
//! encoded feature matrix (which is also their line-graph node id).

mod attention;
mod checkpoint;
mod context;
mod gtcn;
mod sage;

#[cfg(test)]
mod tests;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::sampler::{BatchKey, SampleConfig};

pub use attention::{attention_aggregate_residual, attention_coeffs, AttentionLayer, LayerPairs, LEAKY_SLOPE};
pub use checkpoint::{CKPT_MAGIC, CKPT_VERSION};
pub use context::{GraphContext, DEFAULT_LINE_GRAPH_BUDGET};
pub use gtcn::{adaptive_adjacency, diffusion_gconv, fuse_branches, gated_tcn, BranchOutputs};
pub use sage::{mean_aggregate, sage_edge_embed, sage_update};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "egraphsage_m")]
    EGraphSageM,
    #[serde(rename = "gat")]
    Gat,
    #[serde(rename = "gtcn_g")]
    GtcnG,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::EGraphSageM, ModelKind::Gat, ModelKind::GtcnG];

    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::EGraphSageM => "egraphsage_m",
            ModelKind::Gat => "gat",
            ModelKind::GtcnG => "gtcn_g",
        }
    }

    /// Display name used in comparison tables.
    pub fn display_name(self) -> &'static str {
        match self {
            ModelKind::EGraphSageM => "E-GraphSAGE-M",
            ModelKind::Gat => "GAT",
            ModelKind::GtcnG => "GTCN-G",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown model {s:?}; expected egraphsage_m, gat or gtcn_g")))
    }
}

/// Architecture hyperparameters. Widths that depend on the data
/// (`feature_dim`, `num_classes`, `num_nodes`) are filled in by
/// [`ModelConfig::for_data`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Aggregation rounds (E-GraphSAGE) or attention layers.
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub head_dim: usize,
    /// Highest power of the transition matrices in diffusion convolution.
    pub diffusion_order: usize,
    /// Temporal window length.
    pub window: usize,
    pub kernel_width: usize,
    /// Rank of the adaptive-adjacency node embeddings.
    pub embed_rank: usize,
    /// Dropout on attention coefficients during training.
    pub dropout: f64,
    pub feature_dim: usize,
    pub num_classes: usize,
    /// Line-graph nodes, i.e. rows of the adaptive-adjacency embeddings.
    pub num_nodes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::GtcnG,
            layers: 3,
            heads: 6,
            hidden: 128,
            head_dim: 16,
            diffusion_order: 2,
            window: 8,
            kernel_width: 2,
            embed_rank: 10,
            dropout: 0.5,
            feature_dim: 0,
            num_classes: 0,
            num_nodes: 0,
        }
    }
}

impl ModelConfig {
    /// Defaults for `kind`: two aggregation rounds for E-GraphSAGE, three
    /// attention layers otherwise.
    pub fn new(kind: ModelKind) -> Self {
        ModelConfig {
            kind,
            layers: if kind == ModelKind::EGraphSageM { 2 } else { 3 },
            ..Default::default()
        }
    }

    /// Narrow widths for tests and quick runs.
    pub fn small(kind: ModelKind) -> Self {
        ModelConfig {
            hidden: 16,
            head_dim: 4,
            embed_rank: 4,
            ..Self::new(kind)
        }
    }

    pub fn for_data(mut self, ctx: &GraphContext, num_classes: usize) -> Self {
        self.feature_dim = ctx.feature_dim();
        self.num_nodes = ctx.num_flows();
        self.num_classes = num_classes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(1..=6).contains(&self.layers) {
            return bad(format!("layers must be in 1..=6, got {}", self.layers));
        }
        if self.heads == 0 || self.hidden == 0 || self.head_dim == 0 || self.embed_rank == 0 {
            return bad("heads, hidden, head_dim and embed_rank must be positive".into());
        }
        if self.window == 0 || self.kernel_width == 0 {
            return bad("window and kernel_width must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.feature_dim == 0 || self.num_classes < 2 || self.num_nodes == 0 {
            return bad("model widths not bound to data (feature_dim, num_classes, num_nodes)".into());
        }
        Ok(())
    }

    /// Temporal kernel width, clamped to the window.
    pub fn effective_kernel(&self) -> usize {
        self.kernel_width.min(self.window)
    }

    /// Output width of one attention layer.
    pub fn attention_width(&self) -> usize {
        let residual = if self.kind == ModelKind::GtcnG { self.hidden } else { 0 };
        self.heads * self.head_dim + residual
    }

    /// Per-layer sample sizes: the configured list cut or extended (by
    /// repeating its last entry) to `layers` entries.
    pub fn sample_sizes(&self, sizes: &[usize]) -> Vec<usize> {
        let last = sizes.last().copied().unwrap_or(8);
        (0..self.layers).map(|i| sizes.get(i).copied().unwrap_or(last)).collect()
    }

    pub(crate) fn to_pairs(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("layers", self.layers as f64),
            ("heads", self.heads as f64),
            ("hidden", self.hidden as f64),
            ("head_dim", self.head_dim as f64),
            ("diffusion_order", self.diffusion_order as f64),
            ("window", self.window as f64),
            ("kernel_width", self.kernel_width as f64),
            ("embed_rank", self.embed_rank as f64),
            ("dropout", self.dropout),
            ("feature_dim", self.feature_dim as f64),
            ("num_classes", self.num_classes as f64),
            ("num_nodes", self.num_nodes as f64),
        ]
    }

    pub(crate) fn from_pairs(kind: ModelKind, pairs: &BTreeMap<String, f64>) -> Result<Self> {
        let get = |k: &str| {
            pairs
                .get(k)
                .copied()
                .ok_or_else(|| Error::Config(format!("checkpoint lacks hyperparameter {k}")))
        };
        let int = |k: &str| get(k).map(|v| v as usize);
        Ok(ModelConfig {
            kind,
            layers: int("layers")?,
            heads: int("heads")?,
            hidden: int("hidden")?,
            head_dim: int("head_dim")?,
            diffusion_order: int("diffusion_order")?,
            window: int("window")?,
            kernel_width: int("kernel_width")?,
            embed_rank: int("embed_rank")?,
            dropout: get("dropout")?,
            feature_dim: int("feature_dim")?,
            num_classes: int("num_classes")?,
            num_nodes: int("num_nodes")?,
        })
    }
}

/// Named parameters plus the configuration that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Arc<Tensor>>,
}

impl ModelState {
    /// Glorot-initialised weights, zero biases, small Gaussian embeddings.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let c = &config;
        let mut add = |name: String, t: Tensor| {
            params.insert(name, Arc::new(t));
        };
        let f = c.feature_dim;
        match c.kind {
            ModelKind::EGraphSageM => {
                let mut width = f;
                for k in 1..=c.layers {
                    // [h_v ∥ mean of (h_u ∥ ē_uv)]
                    add(format!("sage{k}.w"), Tensor::glorot(2 * width + f, c.hidden, &mut rng));
                    width = c.hidden;
                }
                add("cls.w".into(), Tensor::glorot(2 * c.hidden + f, c.num_classes, &mut rng));
                add("cls.b".into(), Tensor::zeros([c.num_classes]));
            }
            ModelKind::Gat | ModelKind::GtcnG => {
                let mut width = f;
                for k in 1..=c.layers {
                    for m in 1..=c.heads {
                        add(format!("att{k}.h{m}.w"), Tensor::glorot(width, c.head_dim, &mut rng));
                        add(format!("att{k}.h{m}.a_src"), Tensor::glorot(c.head_dim, 1, &mut rng));
                        add(format!("att{k}.h{m}.a_dst"), Tensor::glorot(c.head_dim, 1, &mut rng));
                    }
                    if c.kind == ModelKind::GtcnG {
                        add(format!("att{k}.res"), Tensor::glorot(f, c.hidden, &mut rng));
                    }
                    width = c.attention_width();
                }
                if c.kind == ModelKind::Gat {
                    add("cls.w".into(), Tensor::glorot(width, c.num_classes, &mut rng));
                    add("cls.b".into(), Tensor::zeros([c.num_classes]));
                } else {
                    let h = c.hidden;
                    let w = c.effective_kernel();
                    for (layer, din) in [(1, f), (2, h)] {
                        let kernel = |rng: &mut ChaCha8Rng| {
                            let t = Tensor::glorot(w * din, h, rng);
                            t.reshape([w, din, h]).expect("kernel shape")
                        };
                        add(format!("tcn{layer}.theta1"), kernel(&mut rng));
                        add(format!("tcn{layer}.theta2"), kernel(&mut rng));
                        add(format!("tcn{layer}.b"), Tensor::zeros([h]));
                        add(format!("tcn{layer}.c"), Tensor::zeros([h]));
                    }
                    add("gconv.e1".into(), Tensor::randn([c.num_nodes, c.embed_rank], 0.5, &mut rng));
                    add("gconv.e2".into(), Tensor::randn([c.num_nodes, c.embed_rank], 0.5, &mut rng));
                    for k in 0..=c.diffusion_order {
                        for j in 1..=3 {
                            add(format!("gconv.w{k}_{j}"), Tensor::glorot(f, h, &mut rng));
                        }
                    }
                    add("residual.w".into(), Tensor::glorot(f, h, &mut rng));
                    add("fuse.w".into(), Tensor::glorot(3 * h + width, h, &mut rng));
                    add("fuse.b".into(), Tensor::zeros([h]));
                    add("cls.w".into(), Tensor::glorot(h, c.num_classes, &mut rng));
                    add("cls.b".into(), Tensor::zeros([c.num_classes]));
                }
            }
        }
        Ok(ModelState { config, params })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> ParamVars {
        ParamVars(
            self.params
                .iter()
                .map(|(n, t)| (n.clone(), tape.leaf_shared(t.clone(), requires_grad)))
                .collect(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(|t| t.is_finite())
    }

    /// `(name, l2 norm)` for every parameter.
    pub fn norms(&self) -> Vec<(String, f64)> {
        self.params.iter().map(|(n, t)| (n.clone(), t.l2_norm())).collect()
    }
}

/// Parameter handles on one tape.
#[derive(Clone, Debug, Default)]
pub struct ParamVars(pub BTreeMap<String, Var>);

impl ParamVars {
    pub fn from_pairs(names: &[String], vars: &[Var]) -> Self {
        ParamVars(names.iter().cloned().zip(vars.iter().copied()).collect())
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOptions {
    pub train: bool,
    /// Zeroes every message that crosses from one flow or endpoint to
    /// another, leaving only self and residual paths.
    pub mask_neighbors: bool,
    /// Per-hop sample sizes before [`ModelConfig::sample_sizes`] fitting.
    pub sample: SampleConfig,
    pub key: BatchKey,
    /// Tracks gradients with respect to the input features.
    pub feature_grad: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            train: false,
            mask_neighbors: false,
            sample: SampleConfig::default(),
            key: BatchKey::default(),
            feature_grad: false,
        }
    }
}

impl ForwardOptions {
    /// No sampling limit and no dropout.
    pub fn full_neighborhood() -> Self {
        ForwardOptions {
            sample: SampleConfig {
                sizes: vec![usize::MAX],
                seed: 0,
            },
            ..Default::default()
        }
    }

    pub(crate) fn dropout_rng(&self) -> ChaCha8Rng {
        // layer index past any real hop keeps this stream apart from sampling
        crate::sampler::node_rng(self.sample.seed, self.key, usize::MAX, usize::MAX)
    }
}

pub struct ForwardOutput {
    /// `batch × classes`.
    pub logits: Var,
    /// The full feature matrix as recorded on the tape.
    pub features: Var,
}

/// Logits for the flows in `batch`, in batch order.
pub fn forward(
    tape: &mut Tape,
    state: &ModelState,
    params: &ParamVars,
    ctx: &GraphContext,
    batch: &[usize],
    opts: &ForwardOptions,
) -> Result<ForwardOutput> {
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    if let Some(&b) = batch.iter().find(|&&b| b >= ctx.num_flows()) {
        return Err(Error::Usage(format!("flow {b} out of {}", ctx.num_flows())));
    }
    let c = &state.config;
    if c.feature_dim != ctx.feature_dim() || c.num_nodes != ctx.num_flows() {
        return Err(Error::Config(format!(
            "model expects {} flows of width {}, graph has {} of width {}",
            c.num_nodes,
            c.feature_dim,
            ctx.num_flows(),
            ctx.feature_dim()
        )));
    }
    if c.kind == ModelKind::GtcnG && c.window != ctx.window {
        return Err(Error::Config(format!("model window {} but graph built with {}", c.window, ctx.window)));
    }
    let features = tape.leaf_shared(ctx.features.clone(), opts.feature_grad);
    let sample = SampleConfig {
        sizes: c.sample_sizes(&opts.sample.sizes),
        seed: opts.sample.seed,
    };
    let logits = match c.kind {
        ModelKind::EGraphSageM => sage::egraphsage_forward(tape, c, params, ctx, features, batch, &sample, opts)?,
        ModelKind::Gat | ModelKind::GtcnG => gtcn::attention_model_forward(tape, c, params, ctx, features, batch, &sample, opts)?,
    };
    Ok(ForwardOutput { logits, features })
}

/// Linear layer `x W + b`.
pub(crate) fn linear(tape: &mut Tape, params: &ParamVars, x: Var, w: &str, b: Option<&str>) -> Result<Var> {
    let y = tape.matmul(x, params.get(w)?)?;
    match b {
        Some(b) => tape.add_bias(y, params.get(b)?),
        None => Ok(y),
    }
}
