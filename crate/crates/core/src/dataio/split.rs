use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Classes smaller than this are pooled rather than stratified on their own.
pub const MIN_STRATUM: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    /// Train, validation, test.
    pub ratios: [usize; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            ratios: [5, 2, 3],
            seed: 0,
        }
    }
}

/// Record indices per split, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub stratified: bool,
    /// Set when stratification had to be skipped.
    pub warning: Option<String>,
}

impl SplitIndices {
    pub fn parts(&self) -> [&[usize]; 3] {
        [&self.train, &self.val, &self.test]
    }
}

/// Largest-remainder apportionment of `n` items over `ratios`; ties go to
/// the earlier part.
pub fn apportion(n: usize, ratios: &[usize]) -> Vec<usize> {
    let total: usize = ratios.iter().sum();
    let mut out: Vec<usize> = ratios.iter().map(|&r| n * r / total).collect();
    let mut rest = n - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(n * ratios[i] % total));
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        out[i] += 1;
        rest -= 1;
    }
    out
}

/// Splits record indices by the given per-record class labels.
///
/// Split sizes are the exact apportionment of the ratios over all records.
/// Each class with at least [`MIN_STRATUM`] members is divided in the same
/// proportions (every per-class share within one record of its exact
/// quota); smaller classes are pooled into one stratum. Below
/// [`MIN_STRATUM`] records in total the split is an unstratified shuffle.
pub fn split_indices(labels: &[usize], spec: &SplitSpec) -> Result<SplitIndices> {
    if spec.ratios.iter().any(|&r| r == 0) {
        return Err(Error::Config(format!("split ratios must be positive, got {:?}", spec.ratios)));
    }
    let n = labels.len();
    let targets = apportion(n, &spec.ratios);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    if n < MIN_STRATUM {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let mut parts = cut(&idx, &targets);
        parts.iter_mut().for_each(|p| p.sort_unstable());
        let [train, val, test] = parts;
        return Ok(SplitIndices {
            train,
            val,
            test,
            stratified: false,
            warning: Some(format!("only {n} records; stratification skipped")),
        });
    }

    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut strata: Vec<Vec<usize>> = Vec::new();
    let mut pooled = Vec::new();
    for (_, members) in by_class {
        if members.len() >= MIN_STRATUM {
            strata.push(members);
        } else {
            pooled.extend(members);
        }
    }
    if !pooled.is_empty() {
        pooled.sort_unstable();
        strata.push(pooled);
    }

    let sizes: Vec<usize> = strata.iter().map(Vec::len).collect();
    let alloc = allocate(&sizes, &spec.ratios, &targets);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for (members, counts) in strata.iter_mut().zip(alloc) {
        members.shuffle(&mut rng);
        for (part, chunk) in parts.iter_mut().zip(cut(members, &counts)) {
            part.extend(chunk);
        }
    }
    parts.iter_mut().for_each(|p| p.sort_unstable());
    let [train, val, test] = parts;
    Ok(SplitIndices {
        train,
        val,
        test,
        stratified: true,
        warning: None,
    })
}

fn cut(items: &[usize], counts: &[usize]) -> [Vec<usize>; 3] {
    let mut out: [Vec<usize>; 3] = Default::default();
    let mut start = 0;
    for (o, &c) in out.iter_mut().zip(counts) {
        o.extend_from_slice(&items[start..start + c]);
        start += c;
    }
    out
}

/// Per-stratum counts whose rows sum to the stratum sizes and whose columns
/// sum to `targets`, each cell the floor or ceiling of its exact quota where
/// possible.
///
/// Floors are fixed first; the leftover units are routed with a small
/// max-flow, preferring cells with a fractional quota, then any cell.
fn allocate(sizes: &[usize], ratios: &[usize; 3], targets: &[usize]) -> Vec<[usize; 3]> {
    let total: usize = ratios.iter().sum();
    let mut cells: Vec<[usize; 3]> = sizes
        .iter()
        .map(|&n| [0, 1, 2].map(|s| n * ratios[s] / total))
        .collect();
    let row_need: Vec<usize> = sizes
        .iter()
        .zip(&cells)
        .map(|(&n, c)| n - c.iter().sum::<usize>())
        .collect();
    let mut col_need: Vec<usize> = (0..3)
        .map(|s| targets[s] - cells.iter().map(|c| c[s]).sum::<usize>())
        .collect();
    let mut row_left = row_need.clone();

    for pass in 0..3 {
        let capacity = |r: usize, s: usize| -> usize {
            match pass {
                0 => usize::from(sizes[r] * ratios[s] % total != 0),
                1 => 1,
                _ => usize::MAX,
            }
        };
        let flow = max_flow(&row_left, &col_need, &capacity);
        for (r, row) in flow.iter().enumerate() {
            for s in 0..3 {
                cells[r][s] += row[s];
                row_left[r] -= row[s];
                col_need[s] -= row[s];
            }
        }
        if row_left.iter().all(|&x| x == 0) {
            break;
        }
    }
    cells
}

/// Augmenting-path max-flow on the bipartite network
/// source → row (cap `supply`) → column (cap `capacity`) → sink (cap `demand`).
fn max_flow(supply: &[usize], demand: &[usize], capacity: &dyn Fn(usize, usize) -> usize) -> Vec<[usize; 3]> {
    let rows = supply.len();
    let mut flow = vec![[0usize; 3]; rows];
    let mut row_used = vec![0usize; rows];
    let mut col_used = [0usize; 3];
    loop {
        // BFS over rows/columns with residual edges
        let mut prev_row_of_col: [Option<usize>; 3] = [None; 3];
        let mut prev_col_of_row: Vec<Option<Option<usize>>> = vec![None; rows];
        let mut queue = std::collections::VecDeque::new();
        for r in 0..rows {
            if row_used[r] < supply[r] {
                prev_col_of_row[r] = Some(None);
                queue.push_back(r);
            }
        }
        let mut end_col = None;
        while let Some(r) = queue.pop_front() {
            for s in 0..3 {
                if prev_row_of_col[s].is_some() || flow[r][s] >= capacity(r, s) {
                    continue;
                }
                prev_row_of_col[s] = Some(r);
                if col_used[s] < demand[s] {
                    end_col = Some(s);
                    break;
                }
                for r2 in 0..rows {
                    if prev_col_of_row[r2].is_none() && flow[r2][s] > 0 {
                        prev_col_of_row[r2] = Some(Some(s));
                        queue.push_back(r2);
                    }
                }
            }
            if end_col.is_some() {
                break;
            }
        }
        let Some(mut s) = end_col else { break };
        col_used[s] += 1;
        loop {
            let r = prev_row_of_col[s].expect("path");
            flow[r][s] += 1;
            match prev_col_of_row[r].expect("visited") {
                None => {
                    row_used[r] += 1;
                    break;
                }
                Some(s_prev) => {
                    flow[r][s_prev] -= 1;
                    s = s_prev;
                }
            }
        }
    }
    flow
}
