#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gtcn_core::dataio::DatasetSchema;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// UNSW-NB15 class shares in percent, in schema order.
pub const UNSW_SHARES: [f64; 10] = [96.83, 0.773, 0.251, 0.167, 1.07, 0.032, 0.722, 0.003, 0.076, 0.075];

/// Header-less UNSW-NB15 rows with `counts[c]` flows of class `c`.
///
/// Every numeric feature grows with the class index and each class uses
/// its own hosts, so the classes are easy to tell apart.
pub fn unsw_csv(counts: &[usize], seed: u64) -> String {
    let schema = DatasetSchema::unsw_nb15();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat(c).take(n)).collect();
    // interleave classes in time
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let mut out = String::new();
    for (t, &c) in order.iter().enumerate() {
        let host = rng.gen_range(0..3);
        let fields: Vec<String> = schema
            .columns
            .iter()
            .map(|col| match col.as_str() {
                "srcip" => format!("175.45.{c}.{host}"),
                "dstip" => format!("149.171.{c}.{}", rng.gen_range(0..3)),
                "sport" => rng.gen_range(1024..1100).to_string(),
                "dsport" => [80, 53, 443][c % 3].to_string(),
                "proto" => ["tcp", "udp"][c % 2].to_string(),
                "state" => ["FIN", "CON", "INT"][c % 3].to_string(),
                "service" => if c == 0 { "-".to_string() } else { "http".to_string() },
                "Stime" | "Ltime" => (1_421_927_000 + t).to_string(),
                "attack_cat" => if c == 0 { String::new() } else { schema.classes[c].clone() },
                "Label" => usize::from(c != 0).to_string(),
                _ => format!("{:.3}", (c as f64 + 1.0) * 10.0 + rng.gen_range(0.0..2.0)),
            })
            .collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn write(path: &Path, text: &str) {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).unwrap();
    }
    std::fs::write(path, text).unwrap();
}

/// Narrow model widths so CLI runs stay fast.
pub const SMALL_CONFIG: &str = "\
hidden = 8
head_dim = 2
heads = 2
embed_rank = 2
window = 4
batch_size = 64
sample_sizes = [4, 4]
";

pub fn gtcn(args: &[&str]) -> Output {
    gtcn_env(args, &[])
}

pub fn gtcn_env(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gtcn"));
    cmd.args(args).env("RUST_LOG", "warn").env_remove("GTCN_DATA_ROOT");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

pub fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A work directory with a prepared UNSW-style bundle of `per_class`
/// flows per class and the small model config.
pub fn prepared(dir: &Path, per_class: usize, seed: u64) -> (PathBuf, PathBuf) {
    let csv = dir.join("flows.csv");
    write(&csv, &unsw_csv(&[per_class; 10], seed));
    let cfg = dir.join("small.toml");
    write(&cfg, SMALL_CONFIG);
    let out = dir.join("out");
    let o = gtcn(&["prepare", "--dataset", csv.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    (out, cfg)
}
