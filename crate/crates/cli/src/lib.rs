//! Command-line driver: `prepare`, `train`, `evaluate` and `report`.
//!
//! A work directory (`--out`) collects everything:
//!
//! ```text
//! out/
//!   prepare.toml          resolved config of the prepare step
//!   summary.txt           graph sizes and class distribution
//!   bundle/               encoded splits
//!   graph/line_graph.txt  line-graph edge list
//!   runs/<model>-<task>/  config.toml, model.ckpt, history.tsv, report_<split>.txt
//!   comparison.txt        written by `report`
//! ```

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use gtcn_core::models::ModelKind;
use gtcn_core::trainer::Task;
use gtcn_core::{Error, Result};

pub mod config;
pub mod prepare;
pub mod report;
pub mod run;

pub use config::{RunConfig, DATA_ROOT_ENV};

#[derive(Debug, Parser)]
#[command(name = "gtcn", version, about = "Flow-graph intrusion detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load, split and encode raw flows; export the graph and a summary.
    Prepare(Flags),
    /// Train one model on a prepared work directory.
    Train(Flags),
    /// Evaluate a trained run on one split.
    Evaluate {
        #[command(flatten)]
        flags: Flags,
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
        split: String,
    },
    /// Merge test reports of one or more work directories into a table.
    Report {
        #[command(flatten)]
        flags: Flags,
        /// Further work directories to include.
        dirs: Vec<PathBuf>,
    },
}

/// Flags shared by every subcommand. Set flags override the config file.
#[derive(Debug, Default, Clone, Args)]
pub struct Flags {
    /// TOML run configuration to start from.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Raw CSV file; repeat for multi-file releases. Relative paths that do
    /// not exist are looked up under $GTCN_DATA_ROOT.
    #[arg(long)]
    pub dataset: Vec<PathBuf>,
    /// Official test-split CSV file; repeatable.
    #[arg(long)]
    pub test_dataset: Vec<PathBuf>,
    /// Bundled schema (unsw_nb15, ton_iot) or schema file.
    #[arg(long)]
    pub schema: Option<String>,
    #[arg(long)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub task: Option<Task>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Comma-separated per-hop neighbour sample sizes.
    #[arg(long, value_delimiter = ',')]
    pub sample_sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Work directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Evaluation threads.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
}

impl Flags {
    /// Config file (if any) with the set flags applied on top.
    pub fn resolve(&self, base: RunConfig) -> RunConfig {
        let mut c = base;
        if !self.dataset.is_empty() {
            c.data = self.dataset.clone();
        }
        if !self.test_dataset.is_empty() {
            c.test_data = self.test_dataset.clone();
        }
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = &self.$flag { c.$field = v.clone(); })*
            };
        }
        set!(schema => schema, model => model, task => task, epochs => epochs,
             batch_size => batch_size, lr => lr, heads => heads,
             sample_sizes => sample_sizes, seed => seed, out => out,
             workers => eval_workers);
        if self.layers.is_some() {
            c.layers = self.layers;
        }
        c
    }

    /// The `--config` file, or defaults.
    pub fn base_config(&self) -> Result<RunConfig> {
        match &self.config {
            Some(path) => RunConfig::from_file(path),
            None => Ok(RunConfig::default()),
        }
    }

    /// Base config for steps after `prepare`: the work directory's
    /// `prepare.toml` with the keys of `--config` laid over it.
    pub fn base_after_prepare(&self) -> Result<RunConfig> {
        let overlay = match &self.config {
            Some(path) => config::read_table(path)?,
            None => toml::Table::new(),
        };
        let out = match (&self.out, overlay.get("out").and_then(|v| v.as_str())) {
            (Some(out), _) => out.clone(),
            (None, Some(out)) => PathBuf::from(out),
            (None, None) => RunConfig::default().out,
        };
        let prepared = out.join(prepare::PREPARE_CONFIG);
        let mut table = if prepared.exists() { config::read_table(&prepared)? } else { toml::Table::new() };
        table.extend(overlay);
        let mut c = RunConfig::from_table(table)?;
        c.out = out;
        Ok(c)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(flags) => {
            let cfg = flags.resolve(flags.base_config()?);
            let summary = prepare::cmd_prepare(&cfg, flags.force)?;
            print!("{summary}");
            Ok(())
        }
        Command::Train(flags) => {
            let cfg = flags.resolve(flags.base_after_prepare()?);
            let outcome = run::cmd_train(&cfg, flags.force)?;
            println!(
                "trained {} for {} epochs; best epoch {} -> {}",
                cfg.run_name(),
                outcome.records.len(),
                outcome.best_epoch,
                cfg.run_dir().display()
            );
            Ok(())
        }
        Command::Evaluate { flags, split } => {
            let cfg = flags.resolve(flags.base_after_prepare()?);
            let (report, path) = run::cmd_evaluate(&cfg.run_dir(), &split, flags.workers)?;
            println!(
                "{} {split}: weighted F1 {} accuracy {} -> {}",
                cfg.run_name(),
                report.weighted_f1,
                report.accuracy,
                path.display()
            );
            Ok(())
        }
        Command::Report { flags, dirs } => {
            let cfg = flags.resolve(flags.base_after_prepare()?);
            let mut all = vec![cfg.out.clone()];
            all.extend(dirs);
            let table = report::cmd_report(&all)?;
            let path = cfg.out.join(report::COMPARISON_FILE);
            std::fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
            print!("{table}");
            Ok(())
        }
    }
}

/// Refuses to touch `path` when it exists, unless `force` is set.
pub(crate) fn guard_existing(path: &std::path::Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Usage(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}
