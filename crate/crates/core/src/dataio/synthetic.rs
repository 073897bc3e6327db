//! Synthetic flows that are separable by construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::encoder::FlowTable;
use super::records::Endpoint;

/// Hosts per side reserved for each class.
const HOSTS_PER_CLASS: u32 = 4;

/// `n` flows over `classes` classes with `dim ≥ classes` features.
///
/// Flow `i` has class `i mod classes`. Its feature `c` is `2 + u` and every
/// other feature is `u`, with `u` uniform in `[-0.4, 0.4]`, so the largest
/// coordinate names the class. Each class talks between its own pool of
/// source and destination hosts, so line-graph neighbours share a class.
/// Class 0 is the benign class of the binary labels.
pub fn synthetic_separable(n: usize, classes: usize, dim: usize, seed: u64) -> FlowTable {
    assert!(classes >= 2 && dim >= classes, "need at least two classes and dim >= classes");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = FlowTable {
        dim,
        ..FlowTable::default()
    };
    for i in 0..n {
        let c = i % classes;
        for j in 0..dim {
            let noise = rng.gen_range(-0.4..=0.4);
            table.features.push(if j == c { 2.0 + noise } else { noise });
        }
        let base = c as u32 * HOSTS_PER_CLASS;
        let src = base + rng.gen_range(0..HOSTS_PER_CLASS);
        let dst = base + rng.gen_range(0..HOSTS_PER_CLASS);
        table.src.push(Endpoint::new(format!("10.0.{c}.{src}"), 40000 + src));
        table.dst.push(Endpoint::new(format!("192.168.{c}.{dst}"), 80));
        table.label_class.push(c);
        table.label_binary.push(usize::from(c != 0));
        table.timestamps.push(i as f64);
    }
    table
}
