use std::fs;
use std::path::{Path, PathBuf};

use gtcn_core::models::{ModelConfig, ModelKind, DEFAULT_LINE_GRAPH_BUDGET};
use gtcn_core::trainer::{derive_seed, SeedStream, Task, TrainConfig};
use gtcn_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Environment variable naming the directory that relative dataset paths
/// are resolved against.
pub const DATA_ROOT_ENV: &str = "GTCN_DATA_ROOT";

/// Everything one run depends on. Written verbatim into every run
/// directory, so a run can be repeated or re-evaluated from that file alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Label used in reports; the schema name when empty.
    pub dataset: String,
    /// Raw CSV files, concatenated in order.
    pub data: Vec<PathBuf>,
    /// Files of an official test split. When set, `data` is divided into
    /// train and validation only.
    pub test_data: Vec<PathBuf>,
    /// Bundled schema name or schema file path.
    pub schema: String,
    pub out: PathBuf,
    pub seed: u64,
    pub split: [usize; 3],
    pub max_categories: usize,
    pub line_graph_budget: u64,

    pub model: ModelKind,
    pub task: Task,
    /// Defaults to the model's own depth when absent.
    pub layers: Option<usize>,
    pub heads: usize,
    pub hidden: usize,
    pub head_dim: usize,
    pub diffusion_order: usize,
    pub window: usize,
    pub kernel_width: usize,
    pub embed_rank: usize,
    pub dropout: f64,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub class_weighted: bool,
    pub clip_norm: f64,
    pub sample_sizes: Vec<usize>,
    pub eval_workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        RunConfig {
            dataset: String::new(),
            data: Vec::new(),
            test_data: Vec::new(),
            schema: "unsw_nb15".into(),
            out: PathBuf::from("out"),
            seed: 0,
            split: [5, 2, 3],
            max_categories: gtcn_core::dataio::DEFAULT_MAX_CATEGORIES,
            line_graph_budget: DEFAULT_LINE_GRAPH_BUDGET,
            model: ModelKind::GtcnG,
            task: Task::Binary,
            layers: None,
            heads: m.heads,
            hidden: m.hidden,
            head_dim: m.head_dim,
            diffusion_order: m.diffusion_order,
            window: m.window,
            kernel_width: m.kernel_width,
            embed_rank: m.embed_rank,
            dropout: m.dropout,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            class_weighted: t.class_weighted,
            clip_norm: t.clip_norm,
            sample_sizes: t.sample_sizes,
            eval_workers: t.eval_workers,
        }
    }
}

/// A TOML file as an untyped table, for layering partial configs.
pub fn read_table(path: &Path) -> Result<toml::Table> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.parse().map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        table.try_into().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// Architecture hyperparameters; data-dependent widths are left unset.
    pub fn model_config(&self) -> ModelConfig {
        let base = ModelConfig::new(self.model);
        ModelConfig {
            layers: self.layers.unwrap_or(base.layers),
            heads: self.heads,
            hidden: self.hidden,
            head_dim: self.head_dim,
            diffusion_order: self.diffusion_order,
            window: self.window,
            kernel_width: self.kernel_width,
            embed_rank: self.embed_rank,
            dropout: self.dropout,
            ..base
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            task: self.task,
            class_weighted: self.class_weighted,
            clip_norm: self.clip_norm,
            sample_sizes: self.sample_sizes.clone(),
            eval_workers: self.eval_workers,
        }
    }

    pub fn pad_seed(&self) -> u64 {
        derive_seed(self.seed, SeedStream::Padding)
    }

    pub fn bundle_dir(&self) -> PathBuf {
        self.out.join("bundle")
    }

    pub fn run_name(&self) -> String {
        format!("{}-{}", self.model.tag(), self.task.tag())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out.join("runs").join(self.run_name())
    }

    /// Dataset paths with relative entries resolved against
    /// [`DATA_ROOT_ENV`] when they do not exist as given.
    pub fn resolve_data_paths(paths: &[PathBuf]) -> Vec<PathBuf> {
        let root = std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from);
        paths
            .iter()
            .map(|p| match &root {
                Some(root) if p.is_relative() && !p.exists() => root.join(p),
                _ => p.clone(),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig {
            model: ModelKind::Gat,
            task: Task::Multiclass,
            layers: Some(2),
            sample_sizes: vec![4, 3],
            ..RunConfig::default()
        };
        c.data.push("a.csv".into());
        assert_eq!(toml::from_str::<RunConfig>(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_file_takes_defaults() {
        let c: RunConfig = toml::from_str("model = \"egraphsage_m\"\nlr = 0.01\n").unwrap();
        assert_eq!(c.model, ModelKind::EGraphSageM);
        assert_eq!(c.model_config().layers, 2);
        assert_eq!(c.epochs, 10);
        assert_eq!(c.train_config().lr, 0.01);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("learning_rate = 0.1\n").is_err());
    }
}
