use std::fs;
use std::path::{Path, PathBuf};

use gtcn_core::dataio::Bundle;
use gtcn_core::models::ModelState;
use gtcn_core::trainer::{derive_seed, evaluate, train, Dataset, EvalReport, History, SeedStream};
use gtcn_core::{Error, Result};

use crate::{guard_existing, RunConfig};

pub const RUN_CONFIG: &str = "config.toml";
pub const CHECKPOINT: &str = "model.ckpt";
pub const HISTORY: &str = "history.tsv";

pub fn report_file(split: &str) -> String {
    format!("report_{split}.txt")
}

fn load_dataset(cfg: &RunConfig) -> Result<(Bundle, Dataset)> {
    let bundle = Bundle::read(&cfg.bundle_dir())?;
    let ds = Dataset::from_bundle(&bundle, cfg.window, cfg.pad_seed(), cfg.line_graph_budget)?;
    Ok((bundle, ds))
}

/// Trains `cfg.model` and writes config, checkpoint and history into the
/// run directory.
pub fn cmd_train(cfg: &RunConfig, force: bool) -> Result<History> {
    let dir = cfg.run_dir();
    guard_existing(&dir, force)?;
    let train_cfg = cfg.train_config();
    train_cfg.validate()?;
    let (bundle, ds) = load_dataset(cfg)?;
    let classes = ds.task_classes(cfg.task).len();
    let model_cfg = cfg.model_config().for_data(&ds.ctx, classes);
    let state = ModelState::init(model_cfg, derive_seed(cfg.seed, SeedStream::Init))?;
    log::info!(
        "training {} on {} ({} train flows, {} parameters)",
        cfg.run_name(),
        bundle.meta.dataset,
        ds.splits[0].len(),
        state.num_scalars()
    );
    let outcome = train(state, &ds, &train_cfg)?;

    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut resolved = cfg.clone();
    resolved.out = absolute(&cfg.out)?;
    resolved.dataset = bundle.meta.dataset.clone();
    resolved.write(&dir.join(RUN_CONFIG))?;
    outcome.state.save(&dir.join(CHECKPOINT))?;
    let history = dir.join(HISTORY);
    fs::write(&history, outcome.history.to_tsv()).map_err(|e| Error::io(&history, e))?;
    Ok(outcome.history)
}

/// Evaluates the run in `run_dir` on `split` using only what the run
/// directory records. Writes and returns the report.
pub fn cmd_evaluate(run_dir: &Path, split: &str, workers: Option<usize>) -> Result<(EvalReport, PathBuf)> {
    let config_path = run_dir.join(RUN_CONFIG);
    if !config_path.exists() {
        return Err(Error::Usage(format!("no trained run at {}", run_dir.display())));
    }
    let cfg = RunConfig::from_file(&config_path)?;
    let (bundle, ds) = load_dataset(&cfg)?;
    let state = ModelState::load_expecting(&run_dir.join(CHECKPOINT), cfg.model)?;
    let expected = cfg.model_config().for_data(&ds.ctx, ds.task_classes(cfg.task).len());
    if state.config != expected {
        return Err(Error::Config(format!(
            "checkpoint architecture {:?} does not match the run config {:?}",
            state.config, expected
        )));
    }
    let mut train_cfg = cfg.train_config();
    if let Some(w) = workers {
        train_cfg.eval_workers = w;
    }
    let report = evaluate(&state, &ds, ds.split(split)?, &train_cfg)?;
    let history = History::from_tsv(
        &fs::read_to_string(run_dir.join(HISTORY)).map_err(|e| Error::io(run_dir.join(HISTORY), e))?,
    )?;
    let meta = [
        ("dataset", bundle.meta.dataset.clone()),
        ("variant", bundle.meta.variant.clone()),
        ("split_source", bundle.meta.split_source.clone()),
        ("model", cfg.model.tag().to_string()),
        ("task", cfg.task.tag().to_string()),
        ("split", split.to_string()),
        ("best_epoch", history.best_epoch.to_string()),
    ];
    let path = run_dir.join(report_file(split));
    fs::write(&path, report.to_text(&meta)).map_err(|e| Error::io(&path, e))?;
    Ok((report, path))
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(|e| Error::io(p, e))
}
