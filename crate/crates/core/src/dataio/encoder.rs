use std::collections::HashMap;

use super::records::{Endpoint, FlowRecord, RawValue};
use super::schema::DatasetSchema;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Floor on a column's standard deviation.
pub const STD_FLOOR: f64 = 1e-8;
/// A non-negative column whose max/median ratio exceeds this gets `log1p`.
pub const HEAVY_TAIL_RATIO: f64 = 1000.0;
/// Categories kept per column before the rest fold into "unknown".
pub const DEFAULT_MAX_CATEGORIES: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct NumericColumn {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub log1p: bool,
}

impl NumericColumn {
    fn transform(&self, v: f64) -> f64 {
        if self.log1p {
            v.max(0.0).ln_1p()
        } else {
            v
        }
    }

    fn encode(&self, v: Option<f64>) -> f64 {
        match v {
            Some(v) => (self.transform(v) - self.mean) / self.std,
            None => 0.0,
        }
    }
}

/// One-hot column; slot 0 is reserved for unseen categories.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalColumn {
    pub name: String,
    pub categories: Vec<String>,
}

impl CategoricalColumn {
    pub fn index_of(&self, value: &str) -> usize {
        self.categories
            .iter()
            .position(|c| c == value)
            .map_or(0, |i| i + 1)
    }

    pub fn width(&self) -> usize {
        self.categories.len() + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ColumnEncoder {
    Numeric(NumericColumn),
    Categorical(CategoricalColumn),
}

/// Per-column preprocessing fitted on the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureEncoder {
    columns: Vec<ColumnEncoder>,
    dim: usize,
}

impl FeatureEncoder {
    pub fn columns(&self) -> &[ColumnEncoder] {
        &self.columns
    }

    pub fn output_dim(&self) -> usize {
        self.dim
    }
}

pub fn fit_encoder(train: &[FlowRecord], schema: &DatasetSchema) -> Result<FeatureEncoder> {
    fit_encoder_with(train, schema, DEFAULT_MAX_CATEGORIES)
}

pub fn fit_encoder_with(
    train: &[FlowRecord],
    schema: &DatasetSchema,
    max_categories: usize,
) -> Result<FeatureEncoder> {
    if train.is_empty() {
        return Err(Error::data(None, "cannot fit an encoder on an empty training split"));
    }
    let mut columns = Vec::with_capacity(schema.features.len());
    for (j, name) in schema.features.iter().enumerate() {
        if schema.is_categorical(name) {
            let mut categories: Vec<String> = Vec::new();
            for r in train {
                if let RawValue::Categorical(v) = &r.raw_features[j] {
                    if categories.len() < max_categories && !categories.contains(v) {
                        categories.push(v.clone());
                    }
                }
            }
            columns.push(ColumnEncoder::Categorical(CategoricalColumn {
                name: name.clone(),
                categories,
            }));
        } else {
            let values: Vec<f64> = train
                .iter()
                .filter_map(|r| match r.raw_features[j] {
                    RawValue::Numeric(v) => v,
                    RawValue::Categorical(_) => None,
                })
                .collect();
            if values.is_empty() {
                return Err(Error::data(None, format!("column {name} has no values in the training split")));
            }
            columns.push(ColumnEncoder::Numeric(fit_numeric(name, &values)));
        }
    }
    let dim = columns
        .iter()
        .map(|c| match c {
            ColumnEncoder::Numeric(_) => 1,
            ColumnEncoder::Categorical(c) => c.width(),
        })
        .sum();
    Ok(FeatureEncoder { columns, dim })
}

fn fit_numeric(name: &str, values: &[f64]) -> NumericColumn {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    // a zero median with a positive max counts as an unbounded ratio
    let heavy = min >= 0.0
        && max > 0.0
        && (median <= 0.0 || max / median > HEAVY_TAIL_RATIO);
    let mut col = NumericColumn {
        name: name.to_string(),
        mean: 0.0,
        std: 1.0,
        log1p: heavy,
    };
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| col.transform(v)).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|&v| (col.transform(v) - mean).powi(2))
        .sum::<f64>()
        / n;
    col.mean = mean;
    col.std = var.sqrt().max(STD_FLOOR);
    col
}

/// Encoded flows: one feature row, both labels and the endpoints per flow.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlowTable {
    pub dim: usize,
    /// Row-major `len × dim`.
    pub features: Vec<f64>,
    pub label_binary: Vec<usize>,
    pub label_class: Vec<usize>,
    pub src: Vec<Endpoint>,
    pub dst: Vec<Endpoint>,
    pub timestamps: Vec<f64>,
}

impl FlowTable {
    pub fn len(&self) -> usize {
        self.label_class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.label_class.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Feature matrix, or `None` when the table is empty.
    pub fn feature_tensor(&self) -> Option<Tensor> {
        if self.is_empty() {
            return None;
        }
        Tensor::matrix(self.len(), self.dim, self.features.clone()).ok()
    }

    /// Appends `other` after `self`.
    pub fn concat(tables: &[&FlowTable]) -> Result<FlowTable> {
        let dim = tables.iter().find(|t| !t.is_empty()).map_or(0, |t| t.dim);
        if tables.iter().any(|t| !t.is_empty() && t.dim != dim) {
            return Err(Error::dim("flow_table_concat", "feature widths differ"));
        }
        let mut out = FlowTable {
            dim,
            ..FlowTable::default()
        };
        for t in tables {
            out.features.extend_from_slice(&t.features);
            out.label_binary.extend_from_slice(&t.label_binary);
            out.label_class.extend_from_slice(&t.label_class);
            out.src.extend_from_slice(&t.src);
            out.dst.extend_from_slice(&t.dst);
            out.timestamps.extend_from_slice(&t.timestamps);
        }
        Ok(out)
    }

    /// Rows `idx` in the given order.
    pub fn select(&self, idx: &[usize]) -> FlowTable {
        let mut out = FlowTable {
            dim: self.dim,
            ..FlowTable::default()
        };
        for &i in idx {
            out.features.extend_from_slice(self.row(i));
            out.label_binary.push(self.label_binary[i]);
            out.label_class.push(self.label_class[i]);
            out.src.push(self.src[i].clone());
            out.dst.push(self.dst[i].clone());
            out.timestamps.push(self.timestamps[i]);
        }
        out
    }
}

/// Encodes records in order. Unseen categories land in slot 0 and missing
/// numerics at the training mean (0 after scaling).
pub fn encode(enc: &FeatureEncoder, records: &[FlowRecord]) -> Result<FlowTable> {
    let mut table = FlowTable {
        dim: enc.dim,
        features: Vec::with_capacity(records.len() * enc.dim),
        ..FlowTable::default()
    };
    let mut lookup: Vec<Option<HashMap<&str, usize>>> = enc
        .columns
        .iter()
        .map(|c| match c {
            ColumnEncoder::Categorical(c) => Some(
                c.categories
                    .iter()
                    .enumerate()
                    .map(|(i, s)| (s.as_str(), i + 1))
                    .collect(),
            ),
            ColumnEncoder::Numeric(_) => None,
        })
        .collect();
    for (row, r) in records.iter().enumerate() {
        if r.raw_features.len() != enc.columns.len() {
            return Err(Error::data(
                Some(row + 1),
                format!("{} raw features, encoder expects {}", r.raw_features.len(), enc.columns.len()),
            ));
        }
        for ((col, raw), map) in enc.columns.iter().zip(&r.raw_features).zip(lookup.iter_mut()) {
            match (col, raw) {
                (ColumnEncoder::Numeric(c), RawValue::Numeric(v)) => table.features.push(c.encode(*v)),
                (ColumnEncoder::Categorical(c), RawValue::Categorical(v)) => {
                    let slot = map.as_ref().and_then(|m| m.get(v.as_str())).copied().unwrap_or(0);
                    let start = table.features.len();
                    table.features.extend(std::iter::repeat(0.0).take(c.width()));
                    table.features[start + slot] = 1.0;
                }
                _ => {
                    return Err(Error::data(Some(row + 1), "feature kind does not match encoder"));
                }
            }
        }
        table.label_binary.push(r.label_binary.index());
        table.label_class.push(r.label_class);
        table.src.push(r.src.clone());
        table.dst.push(r.dst.clone());
        table.timestamps.push(r.timestamp);
    }
    debug_assert!(table.features.iter().all(|v| v.is_finite()));
    Ok(table)
}

/// Inverse-frequency class weights `N / (C * count_c)`; absent classes get 0.
pub fn class_weights(labels: &[usize], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        counts[y] += 1;
    }
    let n = labels.len() as f64;
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                0.0
            } else {
                n / (num_classes as f64 * c as f64)
            }
        })
        .collect()
}
