//! On-disk layout of an encoded split bundle.
//!
//! A bundle is a directory holding `meta.toml` and, for each of `train`,
//! `val` and `test`:
//!
//! * `<split>.bin`, little-endian:
//!   `b"GTCNFLOW"` magic, `u32` format version, `u64` rows, `u64` columns,
//!   then `rows × columns` `f64` features, `rows × 2` `f64` labels
//!   (binary, class index) and `rows` `f64` timestamps, all row-major;
//! * `<split>.endpoints.tsv`: one `src_ip  src_port  dst_ip  dst_port`
//!   line per row, tab separated, in the same order.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::encoder::FlowTable;
use super::records::Endpoint;
use crate::error::{Error, Result};

pub const FLOW_MAGIC: &[u8; 8] = b"GTCNFLOW";
pub const FLOW_FORMAT_VERSION: u32 = 1;
pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub format_version: u32,
    pub dataset: String,
    pub variant: String,
    pub feature_dim: usize,
    pub class_names: Vec<String>,
    pub normal_class: usize,
    pub split_sizes: [usize; 3],
    pub split_seed: u64,
    pub stratified: bool,
    #[serde(default)]
    pub warnings: Vec<String>,
    /// `split` for the 5:2:3 division or `official` when the dataset's own
    /// train/test files were used.
    pub split_source: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub meta: BundleMeta,
    pub train: FlowTable,
    pub val: FlowTable,
    pub test: FlowTable,
}

impl Bundle {
    pub fn splits(&self) -> [&FlowTable; 3] {
        [&self.train, &self.val, &self.test]
    }

    pub fn split(&self, name: &str) -> Option<&FlowTable> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = toml::to_string(&self.meta).expect("meta serialises");
        let meta_path = dir.join("meta.toml");
        fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
        for (name, table) in SPLIT_NAMES.iter().zip(self.splits()) {
            write_table(dir, name, table)?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Bundle> {
        let meta_path = dir.join("meta.toml");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: BundleMeta =
            toml::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
        if meta.format_version != FLOW_FORMAT_VERSION {
            return Err(Error::format(
                &meta_path,
                format!("unsupported bundle version {}", meta.format_version),
            ));
        }
        let [train, val, test] = SPLIT_NAMES.map(|name| read_table(dir, name));
        let (train, val, test) = (train?, val?, test?);
        for (t, &n) in [&train, &val, &test].iter().zip(&meta.split_sizes) {
            if t.len() != n || (!t.is_empty() && t.dim != meta.feature_dim) {
                return Err(Error::format(dir, "split files disagree with meta.toml"));
            }
        }
        Ok(Bundle {
            meta,
            train,
            val,
            test,
        })
    }
}

fn write_table(dir: &Path, name: &str, t: &FlowTable) -> Result<()> {
    let path = dir.join(format!("{name}.bin"));
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(&path, e));
    put(FLOW_MAGIC)?;
    put(&FLOW_FORMAT_VERSION.to_le_bytes())?;
    put(&(t.len() as u64).to_le_bytes())?;
    put(&(t.dim as u64).to_le_bytes())?;
    for v in &t.features {
        put(&v.to_le_bytes())?;
    }
    for (b, c) in t.label_binary.iter().zip(&t.label_class) {
        put(&(*b as f64).to_le_bytes())?;
        put(&(*c as f64).to_le_bytes())?;
    }
    for ts in &t.timestamps {
        put(&ts.to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join(format!("{name}.endpoints.tsv"));
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for (s, d) in t.src.iter().zip(&t.dst) {
        writeln!(w, "{}\t{}\t{}\t{}", s.ip, s.port, d.ip, d.port).map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

fn read_table(dir: &Path, name: &str) -> Result<FlowTable> {
    let path = dir.join(format!("{name}.bin"));
    let mut bytes = Vec::new();
    fs::File::open(&path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(&path, e))?;
    let mut r = ByteReader {
        bytes: &bytes,
        pos: 0,
        path: &path,
    };
    if r.take(8)? != FLOW_MAGIC {
        return Err(Error::format(&path, "bad magic"));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != FLOW_FORMAT_VERSION {
        return Err(Error::format(&path, format!("unsupported version {version}")));
    }
    let rows = r.u64()? as usize;
    let dim = r.u64()? as usize;
    let features = r.f64s(rows * dim)?;
    let labels = r.f64s(rows * 2)?;
    let timestamps = r.f64s(rows)?;
    if r.pos != bytes.len() {
        return Err(Error::format(&path, "trailing bytes"));
    }
    let label_binary = labels.iter().step_by(2).map(|&v| v as usize).collect();
    let label_class = labels.iter().skip(1).step_by(2).map(|&v| v as usize).collect();

    let path = dir.join(format!("{name}.endpoints.tsv"));
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut src = Vec::with_capacity(rows);
    let mut dst = Vec::with_capacity(rows);
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        let parts: Vec<&str> = line.split('\t').collect();
        let port = |s: &str| {
            s.parse::<u32>()
                .map_err(|_| Error::format(&path, format!("line {}: bad port {s:?}", i + 1)))
        };
        if parts.len() != 4 {
            return Err(Error::format(&path, format!("line {}: expected 4 fields", i + 1)));
        }
        src.push(Endpoint::new(parts[0], port(parts[1])?));
        dst.push(Endpoint::new(parts[2], port(parts[3])?));
    }
    if src.len() != rows {
        return Err(Error::format(&path, format!("{} endpoint lines for {rows} rows", src.len())));
    }
    Ok(FlowTable {
        dim,
        features,
        label_binary,
        label_class,
        src,
        dst,
        timestamps,
    })
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl ByteReader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated file"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.path, "size overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
