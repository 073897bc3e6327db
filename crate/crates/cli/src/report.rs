use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use gtcn_core::models::ModelKind;
use gtcn_core::trainer::{parse_report_header, Task};
use gtcn_core::{Error, Result};

use crate::run::report_file;

pub const COMPARISON_FILE: &str = "comparison.txt";
/// Cell text for a run that has no test report.
pub const ABSENT: &str = "-";

/// Test-split weighted F1 of every run under `dirs`, as a table with one
/// row per model and a binary and a multiclass column per dataset. Values
/// are copied from the reports verbatim.
pub fn cmd_report(dirs: &[PathBuf]) -> Result<String> {
    // dataset -> (model, task) -> weighted F1 text
    let mut cells: BTreeMap<String, BTreeMap<(ModelKind, Task), String>> = BTreeMap::new();
    let mut found = 0;
    for dir in dirs {
        for kind in ModelKind::ALL {
            for task in [Task::Binary, Task::Multiclass] {
                let path = dir.join("runs").join(format!("{}-{}", kind.tag(), task.tag())).join(report_file("test"));
                if !path.exists() {
                    continue;
                }
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let header = parse_report_header(&text);
                let (Some(dataset), Some(f1)) = (header.get("dataset"), header.get("weighted_f1")) else {
                    return Err(Error::format(&path, "report header lacks dataset or weighted_f1"));
                };
                cells.entry(dataset.clone()).or_default().insert((kind, task), f1.clone());
                found += 1;
            }
        }
    }
    if found == 0 {
        return Err(Error::Usage(format!("no test reports under {dirs:?}; run evaluate first")));
    }

    let mut columns = vec!["algorithm".to_string()];
    for dataset in cells.keys() {
        columns.push(format!("{dataset} binary"));
        columns.push(format!("{dataset} multiclass"));
    }
    let mut rows = vec![columns];
    for kind in ModelKind::ALL {
        let mut row = vec![kind.display_name().to_string()];
        for by_run in cells.values() {
            for task in [Task::Binary, Task::Multiclass] {
                row.push(by_run.get(&(kind, task)).cloned().unwrap_or_else(|| ABSENT.into()));
            }
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|j| rows.iter().map(|r| r[j].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::from("# weighted F1 on the test split\n");
    for row in &rows {
        let line: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    Ok(out)
}
