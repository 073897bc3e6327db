use std::fmt::Write as _;
use std::fs;

use gtcn_core::dataio::{
    encode, fit_encoder_with, load_flows, split_indices, Bundle, BundleMeta, DatasetSchema, FlowRecord, FlowTable,
    SplitSpec, FLOW_FORMAT_VERSION, SPLIT_NAMES,
};
use gtcn_core::flowgraph::{build_bipartite, line_graph_edge_count, pad_virtual, to_line_graph_within};
use gtcn_core::trainer::{derive_seed, SeedStream};
use gtcn_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{guard_existing, RunConfig};

pub const PREPARE_CONFIG: &str = "prepare.toml";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const LINE_GRAPH_FILE: &str = "graph/line_graph.txt";

fn load_all(cfg: &RunConfig, files: &[std::path::PathBuf], schema: &DatasetSchema) -> Result<Vec<FlowRecord>> {
    let mut records = Vec::new();
    for path in RunConfig::resolve_data_paths(files) {
        log::info!("reading {}", path.display());
        records.extend(load_flows(&path, schema)?);
    }
    if records.is_empty() {
        return Err(Error::data(None, format!("no flow records in {:?}", cfg.data)));
    }
    Ok(records)
}

/// Writes the bundle, graph export and summary; returns the summary text.
pub fn cmd_prepare(cfg: &RunConfig, force: bool) -> Result<String> {
    if cfg.data.is_empty() {
        return Err(Error::Usage("no input data; pass --dataset <csv>".into()));
    }
    let bundle_dir = cfg.bundle_dir();
    guard_existing(&bundle_dir, force)?;
    let schema = DatasetSchema::resolve(&cfg.schema)?;
    let records = load_all(cfg, &cfg.data, &schema)?;
    let spec = SplitSpec {
        ratios: cfg.split,
        seed: derive_seed(cfg.seed, SeedStream::Split),
    };

    let mut warnings = Vec::new();
    let labels: Vec<usize> = records.iter().map(|r| r.label_class).collect();
    let idx = split_indices(&labels, &spec)?;
    warnings.extend(idx.warning.clone());
    let pick = |ix: &[usize]| ix.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    let (parts, split_source) = if cfg.test_data.is_empty() {
        ([pick(&idx.train), pick(&idx.val), pick(&idx.test)], "split")
    } else {
        // official test files: the ratio's test share of `data` joins train
        let mut train = idx.train.clone();
        train.extend_from_slice(&idx.test);
        train.sort_unstable();
        let test = load_all(cfg, &cfg.test_data, &schema)?;
        ([pick(&train), pick(&idx.val), test], "official")
    };

    let [train, val, test] = &parts;
    let encoder = fit_encoder_with(train, &schema, cfg.max_categories)?;
    let tables = [encode(&encoder, train)?, encode(&encoder, val)?, encode(&encoder, test)?];
    let all_binary: Vec<usize> = tables.iter().flat_map(|t| t.label_binary.iter().copied()).collect();
    if all_binary.iter().all(|&b| b == all_binary[0]) {
        let which = if all_binary[0] == 0 { "normal" } else { "attack" };
        warnings.push(format!("single-class data: every flow is {which}"));
    }
    for w in &warnings {
        log::warn!("{w}");
    }

    let dataset = if cfg.dataset.is_empty() { schema.name.clone() } else { cfg.dataset.clone() };
    let [t0, t1, t2] = tables;
    let bundle = Bundle {
        meta: BundleMeta {
            format_version: FLOW_FORMAT_VERSION,
            dataset: dataset.clone(),
            variant: schema.variant.clone(),
            feature_dim: encoder.output_dim(),
            class_names: schema.classes.clone(),
            normal_class: schema.normal_index(),
            split_sizes: [t0.len(), t1.len(), t2.len()],
            split_seed: spec.seed,
            stratified: idx.stratified,
            warnings: warnings.clone(),
            split_source: split_source.into(),
        },
        train: t0,
        val: t1,
        test: t2,
    };
    bundle.write(&bundle_dir)?;

    let summary = summarize(cfg, &bundle)?;
    fs::write(cfg.out.join(SUMMARY_FILE), &summary).map_err(|e| Error::io(cfg.out.join(SUMMARY_FILE), e))?;
    let mut resolved = cfg.clone();
    resolved.dataset = dataset;
    resolved.write(&cfg.out.join(PREPARE_CONFIG))?;
    Ok(summary)
}

/// Graph sizes, the line-graph export and the class distribution table.
fn summarize(cfg: &RunConfig, bundle: &Bundle) -> Result<String> {
    let all = FlowTable::concat(&bundle.splits())?;
    let graph = build_bipartite(&all.src, &all.dst)?;
    let padded = pad_virtual(&graph, &mut ChaCha8Rng::seed_from_u64(cfg.pad_seed()));
    let predicted = line_graph_edge_count(&padded)?;
    let line = to_line_graph_within(&padded, &all.timestamps, cfg.line_graph_budget)?;
    let graph_dir = cfg.out.join("graph");
    fs::create_dir_all(&graph_dir).map_err(|e| Error::io(&graph_dir, e))?;
    line.write_edge_list(&cfg.out.join(LINE_GRAPH_FILE))?;

    let meta = &bundle.meta;
    let mut s = String::from("# prepare summary\n");
    let _ = writeln!(s, "dataset = {}", meta.dataset);
    let _ = writeln!(s, "variant = {}", meta.variant);
    let _ = writeln!(s, "split_source = {}", meta.split_source);
    let _ = writeln!(s, "classes = {}", meta.class_names.len());
    let _ = writeln!(s, "feature_dim = {}", meta.feature_dim);
    for (name, n) in SPLIT_NAMES.iter().zip(meta.split_sizes) {
        let _ = writeln!(s, "{name}_flows = {n}");
    }
    let _ = writeln!(s, "sources = {}", graph.sources.len());
    let _ = writeln!(s, "destinations = {}", graph.destinations.len());
    let _ = writeln!(s, "padded_sources = {}", padded.sources.len());
    let _ = writeln!(s, "padded_destinations = {}", padded.destinations.len());
    let _ = writeln!(s, "line_graph_nodes = {}", line.num_nodes());
    let _ = writeln!(s, "line_graph_edges_predicted = {predicted}");
    let _ = writeln!(s, "line_graph_edges = {}", line.num_edges());
    for w in &meta.warnings {
        let _ = writeln!(s, "warning = {w}");
    }

    s.push_str("\n[class_distribution]\nclass,train,val,test,total,percent\n");
    let total = all.len() as f64;
    for (c, name) in meta.class_names.iter().enumerate() {
        let counts: Vec<usize> = bundle
            .splits()
            .iter()
            .map(|t| t.label_class.iter().filter(|&&y| y == c).count())
            .collect();
        let sum: usize = counts.iter().sum();
        let _ = writeln!(
            s,
            "{name},{},{},{},{sum},{:.3}",
            counts[0],
            counts[1],
            counts[2],
            100.0 * sum as f64 / total
        );
    }
    Ok(s)
}
