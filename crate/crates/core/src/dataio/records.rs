use std::collections::HashMap;
use std::fmt;
use std::io::Read;
use std::path::Path;

use super::schema::DatasetSchema;
use crate::error::{Error, Result};

/// An (IP, port) pair identifying one side of a flow.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Endpoint {
    pub ip: String,
    pub port: u32,
}

impl Endpoint {
    pub fn new(ip: impl Into<String>, port: u32) -> Self {
        Endpoint { ip: ip.into(), port }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.ip, self.port)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryLabel {
    Normal,
    Attack,
}

impl BinaryLabel {
    pub fn index(self) -> usize {
        match self {
            BinaryLabel::Normal => 0,
            BinaryLabel::Attack => 1,
        }
    }
}

/// A feature value as read from the file. Missing numerics are `None`.
#[derive(Clone, Debug, PartialEq)]
pub enum RawValue {
    Numeric(Option<f64>),
    Categorical(String),
}

/// One network flow. `raw_features` follows the schema's feature order.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowRecord {
    pub src: Endpoint,
    pub dst: Endpoint,
    pub timestamp: f64,
    pub raw_features: Vec<RawValue>,
    pub label_binary: BinaryLabel,
    /// Index into the schema's class list.
    pub label_class: usize,
}

pub fn load_flows(path: &Path, schema: &DatasetSchema) -> Result<Vec<FlowRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_flows(file, schema)
}

/// Parses flow records from CSV. Header columns may appear in any order;
/// extra columns are ignored.
pub fn read_flows(reader: impl Read, schema: &DatasetSchema) -> Result<Vec<FlowRecord>> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let columns: Vec<String> = if schema.has_header {
        csv.headers()
            .map_err(|e| Error::Schema(format!("unreadable header: {e}")))?
            .iter()
            .map(str::to_string)
            .collect()
    } else {
        schema.columns.clone()
    };
    let position: HashMap<&str, usize> = columns
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let missing: Vec<&str> = schema
        .required_columns()
        .filter(|c| !position.contains_key(c.as_str()))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Schema(format!(
            "{}: missing required column(s) {}",
            schema.name,
            missing.join(", ")
        )));
    }
    let col = |name: &str| position[name];
    let layout = Layout {
        src_ip: col(&schema.src_ip),
        src_port: col(&schema.src_port),
        dst_ip: col(&schema.dst_ip),
        dst_port: col(&schema.dst_port),
        timestamp: col(&schema.timestamp),
        label_binary: col(&schema.label_binary),
        label_multiclass: col(&schema.label_multiclass),
        features: schema
            .features
            .iter()
            .map(|f| (col(f), schema.is_categorical(f)))
            .collect(),
    };

    let mut out = Vec::new();
    for (i, row) in csv.records().enumerate() {
        // data rows are numbered from 1, after any header
        let row_no = i + 1;
        let row = row.map_err(|e| Error::data(Some(row_no), e.to_string()))?;
        if row.len() < columns.len() {
            return Err(Error::data(
                Some(row_no),
                format!("expected {} fields, found {}", columns.len(), row.len()),
            ));
        }
        out.push(layout.parse(&row, row_no, schema)?);
    }
    Ok(out)
}

struct Layout {
    src_ip: usize,
    src_port: usize,
    dst_ip: usize,
    dst_port: usize,
    timestamp: usize,
    label_binary: usize,
    label_multiclass: usize,
    features: Vec<(usize, bool)>,
}

impl Layout {
    fn parse(&self, row: &csv::StringRecord, row_no: usize, schema: &DatasetSchema) -> Result<FlowRecord> {
        let field = |i: usize| row.get(i).unwrap_or("");
        let endpoint = |ip: usize, port: usize, side: &str| -> Result<Endpoint> {
            let ip = field(ip);
            if ip.is_empty() {
                return Err(Error::data(Some(row_no), format!("empty {side} address")));
            }
            let port = parse_port(field(port))
                .ok_or_else(|| Error::data(Some(row_no), format!("bad {side} port {:?}", field(port))))?;
            Ok(Endpoint::new(ip, port))
        };
        let src = endpoint(self.src_ip, self.src_port, "source")?;
        let dst = endpoint(self.dst_ip, self.dst_port, "destination")?;

        let timestamp = parse_number(field(self.timestamp))
            .ok()
            .flatten()
            .filter(|t| t.is_finite())
            .ok_or_else(|| {
                Error::data(Some(row_no), format!("bad timestamp {:?}", field(self.timestamp)))
            })?;

        let raw_features = self
            .features
            .iter()
            .zip(&schema.features)
            .map(|(&(i, categorical), name)| {
                let v = field(i);
                if categorical {
                    Ok(RawValue::Categorical(v.to_string()))
                } else {
                    parse_number(v).map(RawValue::Numeric).map_err(|_| {
                        Error::data(Some(row_no), format!("column {name}: unparseable number {v:?}"))
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;

        let label_binary = parse_binary(field(self.label_binary)).ok_or_else(|| {
            Error::data(
                Some(row_no),
                format!("bad binary label {:?}", field(self.label_binary)),
            )
        })?;
        let class_raw = field(self.label_multiclass);
        let label_class = schema.class_index(class_raw).ok_or_else(|| {
            Error::data(Some(row_no), format!("unknown class {class_raw:?}"))
        })?;
        let is_normal_class = label_class == schema.normal_index();
        if is_normal_class != (label_binary == BinaryLabel::Normal) {
            return Err(Error::data(
                Some(row_no),
                format!("class {class_raw:?} contradicts binary label {label_binary:?}"),
            ));
        }

        Ok(FlowRecord {
            src,
            dst,
            timestamp,
            raw_features,
            label_binary,
            label_class,
        })
    }
}

/// Empty and `-` fields are missing values.
fn parse_number(s: &str) -> std::result::Result<Option<f64>, ()> {
    if s.is_empty() || s == "-" {
        return Ok(None);
    }
    if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        return u64::from_str_radix(hex, 16).map(|v| Some(v as f64)).map_err(|_| ());
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(()),
    }
}

fn parse_port(s: &str) -> Option<u32> {
    match parse_number(s) {
        Ok(None) => Some(0),
        Ok(Some(v)) if v >= 0.0 && v.fract() == 0.0 && v <= f64::from(u32::MAX) => Some(v as u32),
        _ => None,
    }
}

fn parse_binary(s: &str) -> Option<BinaryLabel> {
    match s.trim().to_lowercase().as_str() {
        "0" | "0.0" | "normal" | "benign" | "false" => Some(BinaryLabel::Normal),
        "1" | "1.0" | "attack" | "malicious" | "true" => Some(BinaryLabel::Attack),
        _ => None,
    }
}
