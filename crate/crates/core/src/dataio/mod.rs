//! Flow CSV ingestion, feature encoding and the train/validation/test split.

mod bundle;
mod encoder;
mod records;
mod schema;
mod split;
mod synthetic;

pub use bundle::{Bundle, BundleMeta, FLOW_FORMAT_VERSION, FLOW_MAGIC, SPLIT_NAMES};
pub use encoder::{
    class_weights, encode, fit_encoder, fit_encoder_with, CategoricalColumn, ColumnEncoder,
    FeatureEncoder, FlowTable, NumericColumn, DEFAULT_MAX_CATEGORIES, HEAVY_TAIL_RATIO, STD_FLOOR,
};
pub use records::{load_flows, read_flows, BinaryLabel, Endpoint, FlowRecord, RawValue};
pub use schema::DatasetSchema;
pub use synthetic::synthetic_separable;
pub use split::{apportion, split_indices, SplitIndices, SplitSpec, MIN_STRATUM};

/// Splits records with [`split_indices`] on their class labels.
pub fn split(
    records: &[FlowRecord],
    spec: &SplitSpec,
) -> crate::Result<([Vec<FlowRecord>; 3], SplitIndices)> {
    let labels: Vec<usize> = records.iter().map(|r| r.label_class).collect();
    let idx = split_indices(&labels, spec)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    Ok(([pick(&idx.train), pick(&idx.val), pick(&idx.test)], idx))
}
