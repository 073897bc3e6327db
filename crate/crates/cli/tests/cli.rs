mod common;

use std::fs;

use common::*;
use gtcn_core::trainer::parse_report_header;

fn s(p: &std::path::Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn prepare_writes_bundle_graph_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let (out, _) = prepared(dir.path(), 12, 1);
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    let h = parse_report_header(&summary);
    assert_eq!(h["classes"], "10");
    assert_eq!(h["train_flows"], "60");
    assert_eq!(h["val_flows"], "24");
    assert_eq!(h["test_flows"], "36");
    assert_eq!(h["line_graph_edges_predicted"], h["line_graph_edges"]);
    assert!(summary.contains("[class_distribution]\nclass,train,val,test,total,percent\nNormal,"));
    for f in ["bundle/meta.toml", "bundle/train.bin", "bundle/test.endpoints.tsv", "graph/line_graph.txt", "prepare.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let edges = fs::read_to_string(out.join("graph/line_graph.txt")).unwrap();
    assert!(edges.starts_with("# nodes 120\n"));
}

#[test]
fn prepare_refuses_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let (out, _) = prepared(dir.path(), 10, 2);
    let csv = dir.path().join("flows.csv");
    let again = gtcn(&["prepare", "--dataset", s(&csv), "--out", s(&out)]);
    assert_eq!(code(&again), 2);
    assert!(stderr(&again).contains("--force"));
    let forced = gtcn(&["prepare", "--dataset", s(&csv), "--out", s(&out), "--force"]);
    assert_eq!(code(&forced), 0, "{}", stderr(&forced));
}

#[test]
fn all_normal_data_warns_single_class() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("normal.csv");
    let mut counts = [0; 10];
    counts[0] = 30;
    write(&csv, &unsw_csv(&counts, 3));
    let out = dir.path().join("out");
    let o = gtcn(&["prepare", "--dataset", s(&csv), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("warning = single-class data"), "{summary}");
}

#[test]
fn schema_mismatch_names_missing_columns() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("toy.csv");
    write(&csv, "src_ip,src_port,dst_ip,dst_port,ts,label\n1.1.1.1,1,2.2.2.2,2,0,0\n");
    let o = gtcn(&["prepare", "--dataset", s(&csv), "--schema", "ton_iot", "--out", s(&dir.path().join("out"))]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("missing required column") && err.contains("type") && err.contains("duration"), "{err}");
}

#[test]
fn bad_row_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("short.csv");
    write(&csv, "1.1.1.1,1,2.2.2.2\n");
    let o = gtcn(&["prepare", "--dataset", s(&csv), "--out", s(&dir.path().join("out"))]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn data_root_resolves_relative_dataset() {
    let dir = tempfile::tempdir().unwrap();
    write(&dir.path().join("data/flows.csv"), &unsw_csv(&[3; 10], 4));
    let out = dir.path().join("out");
    let o = gtcn_env(&["prepare", "--dataset", "flows.csv", "--out", s(&out)], &[("GTCN_DATA_ROOT", &dir.path().join("data"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let without = gtcn(&["prepare", "--dataset", "flows.csv", "--out", s(&dir.path().join("out2"))]);
    assert_eq!(code(&without), 3);
}

#[test]
fn unknown_model_is_usage_error() {
    let o = gtcn(&["train", "--model", "resnet"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_evaluate_report_round() {
    let dir = tempfile::tempdir().unwrap();
    let (out, cfg) = prepared(dir.path(), 12, 5);
    let base = ["--out", s(&out), "--config", s(&cfg), "--epochs", "2"];

    for model in ["egraphsage_m", "gat", "gtcn_g"] {
        let o = gtcn(&[&["train", "--model", model, "--task", "binary"][..], &base].concat());
        assert_eq!(code(&o), 0, "{model}: {}", stderr(&o));
        let run = out.join(format!("runs/{model}-binary"));
        for f in ["config.toml", "model.ckpt", "history.tsv"] {
            assert!(run.join(f).exists(), "{model} {f}");
        }
        let o = gtcn(&["evaluate", "--model", model, "--task", "binary", "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{model}: {}", stderr(&o));
    }

    // binary report: one attack F1 and a 2×2 matrix
    let report = fs::read_to_string(out.join("runs/gat-binary/report_test.txt")).unwrap();
    let h = parse_report_header(&report);
    assert!(h.contains_key("attack_f1") && h.contains_key("weighted_f1"));
    assert_eq!(h["samples"], "36");
    assert!(report.contains("true\\predicted,Normal,Attack\nNormal,"));

    // regenerating a report gives the same bytes, whatever the worker count
    let o = gtcn(&["evaluate", "--model", "gat", "--task", "binary", "--out", s(&out), "--workers", "3"]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(out.join("runs/gat-binary/report_test.txt")).unwrap(), report);

    // multiclass: 10×10 matrix
    let o = gtcn(&[&["train", "--model", "gtcn_g", "--task", "multi"][..], &base].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = gtcn(&["evaluate", "--model", "gtcn_g", "--task", "multi", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let multi = fs::read_to_string(out.join("runs/gtcn_g-multi/report_test.txt")).unwrap();
    let block = multi.split("[confusion_matrix]\n").nth(1).unwrap().split("\n\n").next().unwrap();
    let lines: Vec<&str> = block.lines().collect();
    assert_eq!(lines.len(), 11);
    assert!(lines.iter().all(|l| l.split(',').count() == 11));
    assert!(!parse_report_header(&multi).contains_key("attack_f1"));

    // comparison: three rows, absent multiclass cells, values passed through
    let o = gtcn(&["report", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = fs::read_to_string(out.join("comparison.txt")).unwrap();
    let rows: Vec<Vec<&str>> = table.lines().skip(2).map(|l| l.split_whitespace().collect()).collect();
    assert_eq!(rows.len(), 3);
    let cell = |name: &str, col: usize| rows.iter().find(|r| r[0] == name).unwrap()[col].to_string();
    assert_eq!(cell("GAT", 1), h["weighted_f1"]);
    assert_eq!(cell("GAT", 2), "-");
    assert_eq!(cell("GTCN-G", 2), parse_report_header(&multi)["weighted_f1"]);
    assert!(table.lines().nth(1).unwrap().contains("UNSW-NB15 binary"));
}

#[test]
fn rerun_without_force_refuses_and_same_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (out, cfg) = prepared(dir.path(), 8, 6);
    let args = ["train", "--model", "gat", "--out", s(&out), "--config", s(&cfg), "--epochs", "2", "--seed", "7"];
    assert_eq!(code(&gtcn(&args)), 0);
    let run = out.join("runs/gat-binary");
    let first = fs::read(run.join("history.tsv")).unwrap();
    let ckpt = fs::read(run.join("model.ckpt")).unwrap();
    let again = gtcn(&args);
    assert_eq!(code(&again), 2);
    let forced = gtcn(&[&args[..], &["--force"]].concat());
    assert_eq!(code(&forced), 0, "{}", stderr(&forced));
    assert_eq!(fs::read(run.join("history.tsv")).unwrap(), first);
    assert_eq!(fs::read(run.join("model.ckpt")).unwrap(), ckpt);
}

#[test]
fn checkpoint_architecture_mismatch_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let (out, cfg) = prepared(dir.path(), 6, 8);
    let o = gtcn(&["train", "--model", "gat", "--out", s(&out), "--config", s(&cfg), "--epochs", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cfg_path = out.join("runs/gat-binary/config.toml");
    let text = fs::read_to_string(&cfg_path).unwrap().replace("heads = 2", "heads = 3");
    fs::write(&cfg_path, text).unwrap();
    let o = gtcn(&["evaluate", "--model", "gat", "--out", s(&out)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("architecture"));
}

#[test]
fn divergence_exits_with_its_own_code() {
    let dir = tempfile::tempdir().unwrap();
    let (out, cfg) = prepared(dir.path(), 6, 9);
    let o = gtcn(&["train", "--model", "egraphsage_m", "--out", s(&out), "--config", s(&cfg), "--epochs", "3", "--lr", "1e300"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("epoch 1") && err.contains("largest parameter norms"), "{err}");
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let (out, cfg) = prepared(dir.path(), 6, 10);
    let o = gtcn(&["train", "--model", "egraphsage_m", "--out", s(&out), "--config", s(&cfg), "--epochs", "1", "--batch-size", "32", "--sample-sizes", "3,2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run_cfg = gtcn_cli::RunConfig::from_file(&out.join("runs/egraphsage_m-binary/config.toml")).unwrap();
    assert_eq!(run_cfg.batch_size, 32);
    assert_eq!(run_cfg.sample_sizes, vec![3, 2]);
    assert_eq!(run_cfg.hidden, 8);
    assert_eq!(run_cfg.epochs, 1);
}

#[test]
fn official_test_files_are_labelled() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train.csv");
    let test = dir.path().join("test.csv");
    write(&train, &unsw_csv(&[10; 10], 11));
    write(&test, &unsw_csv(&[2; 10], 12));
    let out = dir.path().join("out");
    let o = gtcn(&["prepare", "--dataset", s(&train), "--test-dataset", s(&test), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let h = parse_report_header(&fs::read_to_string(out.join("summary.txt")).unwrap());
    assert_eq!(h["split_source"], "official");
    assert_eq!(h["test_flows"], "20");
    assert_eq!(h["val_flows"], "20");
    assert_eq!(h["train_flows"], "80");
}
