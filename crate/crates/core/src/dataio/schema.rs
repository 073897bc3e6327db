use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SCHEMA_FORMAT_VERSION: u32 = 1;

const UNSW_NB15: &str = include_str!("../../schemas/unsw_nb15.toml");
const TON_IOT: &str = include_str!("../../schemas/ton_iot.toml");

/// Column layout and label vocabulary of one flow dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub format_version: u32,
    pub name: String,
    /// Which published CSV release the schema describes.
    pub variant: String,
    #[serde(default = "default_true")]
    pub has_header: bool,
    /// Column order for header-less files.
    #[serde(default)]
    pub columns: Vec<String>,
    pub src_ip: String,
    pub src_port: String,
    pub dst_ip: String,
    pub dst_port: String,
    pub timestamp: String,
    pub label_binary: String,
    pub label_multiclass: String,
    pub features: Vec<String>,
    #[serde(default)]
    pub categorical: Vec<String>,
    pub normal_class: String,
    pub classes: Vec<String>,
    /// Extra spellings of class names, keyed in lower case.
    #[serde(default)]
    pub aliases: BTreeMap<String, String>,
}

fn default_true() -> bool {
    true
}

impl DatasetSchema {
    pub fn unsw_nb15() -> Self {
        Self::parse(UNSW_NB15, "builtin:unsw_nb15").expect("bundled schema is valid")
    }

    pub fn ton_iot() -> Self {
        Self::parse(TON_IOT, "builtin:ton_iot").expect("bundled schema is valid")
    }

    /// Resolves a bundled schema name (`unsw_nb15`, `ton_iot`) or a path to
    /// a schema file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        match name_or_path.to_ascii_lowercase().replace('-', "_").as_str() {
            "unsw_nb15" | "unsw" => Ok(Self::unsw_nb15()),
            "ton_iot" | "toniot" => Ok(Self::ton_iot()),
            _ => Self::from_file(Path::new(name_or_path)),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let schema: DatasetSchema =
            toml::from_str(text).map_err(|e| Error::Schema(format!("{origin}: {e}")))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("schema serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != SCHEMA_FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "{}: unsupported schema format version {}",
                self.name, self.format_version
            )));
        }
        if self.features.is_empty() {
            return Err(Error::Schema(format!("{}: no feature columns", self.name)));
        }
        if let Some(c) = self.categorical.iter().find(|c| !self.features.contains(c)) {
            return Err(Error::Schema(format!(
                "{}: categorical column {c} is not a feature",
                self.name
            )));
        }
        if !self.classes.contains(&self.normal_class) {
            return Err(Error::Schema(format!(
                "{}: normal class {} missing from class list",
                self.name, self.normal_class
            )));
        }
        if !self.has_header {
            let missing: Vec<_> = self
                .required_columns()
                .filter(|c| !self.columns.contains(c))
                .cloned()
                .collect();
            if !missing.is_empty() {
                return Err(Error::Schema(format!(
                    "{}: header-less schema does not list columns {}",
                    self.name,
                    missing.join(", ")
                )));
            }
        }
        Ok(())
    }

    /// Every column the loader reads.
    pub fn required_columns(&self) -> impl Iterator<Item = &String> {
        [
            &self.src_ip,
            &self.src_port,
            &self.dst_ip,
            &self.dst_port,
            &self.timestamp,
            &self.label_binary,
            &self.label_multiclass,
        ]
        .into_iter()
        .chain(self.features.iter())
    }

    pub fn is_categorical(&self, column: &str) -> bool {
        self.categorical.iter().any(|c| c == column)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn normal_index(&self) -> usize {
        self.classes
            .iter()
            .position(|c| *c == self.normal_class)
            .expect("validated")
    }

    /// Maps a raw class label to its index: trimmed, case-folded, aliases
    /// applied. An empty label means the normal class.
    pub fn class_index(&self, raw: &str) -> Option<usize> {
        let key = raw.trim().to_lowercase();
        if key.is_empty() {
            return Some(self.normal_index());
        }
        let canonical = self.aliases.get(&key).map(|a| a.to_lowercase()).unwrap_or(key);
        self.classes.iter().position(|c| c.to_lowercase() == canonical)
    }
}
