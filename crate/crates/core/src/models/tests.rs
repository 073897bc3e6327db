use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataio::{Endpoint, FlowTable};
use crate::diffcore::{grad_check, SparseRows};

fn table(flows: &[(u32, u32)], dim: usize, seed: u64) -> FlowTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FlowTable {
        dim,
        features: (0..flows.len() * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        label_binary: (0..flows.len()).map(|i| i % 2).collect(),
        label_class: (0..flows.len()).map(|i| i % 3).collect(),
        src: flows.iter().map(|f| Endpoint::new("10.0.0.1", f.0)).collect(),
        dst: flows.iter().map(|f| Endpoint::new("10.0.0.2", f.1)).collect(),
        timestamps: (0..flows.len()).map(|i| (i * 7 % 5) as f64).collect(),
    }
}

/// Six flows over three sources and three destinations, one parallel pair.
fn six_flows() -> FlowTable {
    table(&[(1, 1), (1, 2), (2, 2), (2, 3), (3, 3), (1, 2)], 3, 9)
}

fn tiny(kind: ModelKind) -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        hidden: 4,
        head_dim: 2,
        embed_rank: 2,
        window: 3,
        ..ModelConfig::new(kind)
    }
}

fn setup(kind: ModelKind, t: &FlowTable) -> (GraphContext, ModelState) {
    let cfg = tiny(kind);
    let ctx = GraphContext::build(t, cfg.window, 1).unwrap();
    let cfg = cfg.for_data(&ctx, 3);
    (ctx, ModelState::init(cfg, 4).unwrap())
}

fn logits(state: &ModelState, ctx: &GraphContext, batch: &[usize], opts: &ForwardOptions) -> Tensor {
    let mut tape = Tape::new();
    let p = state.bind(&mut tape, false);
    let out = forward(&mut tape, state, &p, ctx, batch, opts).unwrap();
    tape.value(out.logits).clone()
}

fn var(tape: &mut Tape, rows: &[Vec<f64>]) -> Var {
    tape.leaf(Tensor::from_rows(rows).unwrap(), true)
}

#[test]
fn mean_aggregate_examples() {
    let mut tape = Tape::new();
    let v = var(&mut tape, &[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]);
    let m = mean_aggregate(&mut tape, Some(v), &[0, 0, 0], 1, 2).unwrap();
    assert_eq!(tape.value(m).data(), &[1.0, 2.0]);

    let m = mean_aggregate(&mut tape, None, &[], 2, 3).unwrap();
    assert_eq!(tape.value(m).data(), &[0.0; 6]);

    let v = var(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let m = mean_aggregate(&mut tape, Some(v), &[1, 1], 2, 2).unwrap();
    assert_eq!(tape.value(m).data(), &[0.0, 0.0, 0.5, 0.5]);
}

#[test]
fn sage_update_examples() {
    let mut tape = Tape::new();
    let h = var(&mut tape, &[vec![1.0, 2.0]]);
    let n = var(&mut tape, &[vec![3.0, -4.0]]);
    let zero = tape.leaf(Tensor::zeros([4, 2]), true);
    let out = sage_update(&mut tape, h, n, zero).unwrap();
    assert_eq!(tape.value(out).data(), &[0.0, 0.0]);

    let select_first = var(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0], vec![0.0, 0.0]]);
    let out = sage_update(&mut tape, h, n, select_first).unwrap();
    assert_eq!(tape.value(out).data(), &[1.0, 2.0]);

    let short = tape.leaf(Tensor::zeros([3, 2]), true);
    assert!(matches!(sage_update(&mut tape, h, n, short), Err(Error::Dimension { .. })));
}

#[test]
fn sage_update_on_path_by_hand() {
    // path a - b - c, scalar states 1, 2, 4; W = [0.5, -0.25]ᵀ
    // b: relu(0.5*2 - 0.25*mean(1, 4)) = relu(1 - 0.625) = 0.375
    // a: relu(0.5*1 - 0.25*2) = 0; c: relu(0.5*4 - 0.25*2) = 1.5
    let mut tape = Tape::new();
    let h = var(&mut tape, &[vec![1.0], vec![2.0], vec![4.0]]);
    let msgs = tape.gather_rows(h, vec![Some(1), Some(0), Some(2), Some(1)]).unwrap();
    let agg = mean_aggregate(&mut tape, Some(msgs), &[0, 1, 1, 2], 3, 1).unwrap();
    let w = var(&mut tape, &[vec![0.5], vec![-0.25]]);
    let out = sage_update(&mut tape, h, agg, w).unwrap();
    assert_eq!(tape.value(out).data(), &[0.0, 0.375, 1.5]);
}

#[test]
fn edge_embed_widths_and_residual_gradient() {
    let mut tape = Tape::new();
    let hu = var(&mut tape, &[vec![1.0, 2.0]]);
    let hv = var(&mut tape, &[vec![3.0, 4.0]]);
    let e = var(&mut tape, &[vec![5.0, 6.0, 7.0]]);
    let with = sage_edge_embed(&mut tape, hu, hv, e, true).unwrap();
    let without = sage_edge_embed(&mut tape, hu, hv, e, false).unwrap();
    assert_eq!(tape.shape(with), &[1, 7]);
    assert_eq!(tape.shape(without), &[1, 4]);

    for residual in [true, false] {
        let mut tape = Tape::new();
        let hu = var(&mut tape, &[vec![1.0, 2.0]]);
        let hv = var(&mut tape, &[vec![3.0, 4.0]]);
        let e = var(&mut tape, &[vec![5.0, 6.0, 7.0]]);
        let z = sage_edge_embed(&mut tape, hu, hv, e, residual).unwrap();
        let sq = tape.hadamard(z, z).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad_or_zeros(e);
        assert_eq!(g.l2_norm() > 0.0, residual);
    }
}

fn seq_input(tape: &mut Tape, values: &[f64]) -> Var {
    tape.leaf(Tensor::new([1, values.len(), 1], values.to_vec()).unwrap(), true)
}

#[test]
fn gated_tcn_constant_fields() {
    let mut tape = Tape::new();
    let x = seq_input(&mut tape, &[0.3, -1.0, 2.0]);
    let zero = tape.leaf(Tensor::zeros([2, 1, 1]), true);
    let b = tape.leaf(Tensor::full([1], 0.7), true);
    let c = tape.leaf(Tensor::full([1], -0.2), true);
    let h = gated_tcn(&mut tape, x, &[(zero, zero, b, c, 1)]).unwrap();
    let want = 0.7f64.tanh() / (1.0 + 0.2f64.exp());
    assert!(tape.value(h).data().iter().all(|&v| (v - want).abs() < 1e-15));
}

#[test]
fn gated_tcn_saturated_gate_passes_filter() {
    let mut tape = Tape::new();
    let x = seq_input(&mut tape, &[0.3, -1.0, 2.0]);
    let theta1 = tape.leaf(Tensor::new([2, 1, 1], vec![0.5, 1.0]).unwrap(), true);
    let zero = tape.leaf(Tensor::zeros([2, 1, 1]), true);
    let b = tape.leaf(Tensor::zeros([1]), true);
    let c = tape.leaf(Tensor::full([1], 30.0), true);
    let gated = gated_tcn(&mut tape, x, &[(theta1, zero, b, c, 1)]).unwrap();
    let filter = tape.conv1d_causal(x, theta1, b, 1).unwrap();
    let filter = tape.tanh(filter).unwrap();
    assert!(tape.value(gated).max_abs_diff(tape.value(filter)) < 1e-9);
}

#[test]
fn gated_tcn_by_hand() {
    // w = 2, taps (0.5 on t-1, 1 on t), b = 0; gate theta2 = (0, 1), c = 0
    // x = [1, 2, 3]: filter pre = [1, 2.5, 4], gate pre = [1, 2, 3]
    let mut tape = Tape::new();
    let x = seq_input(&mut tape, &[1.0, 2.0, 3.0]);
    let theta1 = tape.leaf(Tensor::new([2, 1, 1], vec![0.5, 1.0]).unwrap(), true);
    let theta2 = tape.leaf(Tensor::new([2, 1, 1], vec![0.0, 1.0]).unwrap(), true);
    let zero = tape.leaf(Tensor::zeros([1]), true);
    let h = gated_tcn(&mut tape, x, &[(theta1, theta2, zero, zero, 1)]).unwrap();
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let want = [1.0f64.tanh() * sig(1.0), 2.5f64.tanh() * sig(2.0), 4.0f64.tanh() * sig(3.0)];
    for (got, want) in tape.value(h).data().iter().zip(want) {
        assert!((got - want).abs() < 1e-15);
    }
}

#[test]
fn adaptive_adjacency_examples() {
    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::zeros([4, 2]), true);
    let a = adaptive_adjacency(&mut tape, z, z).unwrap();
    assert!(tape.value(a).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

    // rank one, node 2 dominant in E₂: its column wins in every row
    let e1 = var(&mut tape, &[vec![1.0], vec![0.5], vec![2.0]]);
    let e2 = var(&mut tape, &[vec![0.1], vec![0.2], vec![3.0]]);
    let a = adaptive_adjacency(&mut tape, e1, e2).unwrap();
    let a = tape.value(a);
    for i in 0..3 {
        assert!(a.at(i, 2) > a.at(i, 0) && a.at(i, 2) > a.at(i, 1));
        assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

fn dense_mul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|l| a[i * k + l] * b[l * n + j]).sum();
        }
    }
    out
}

#[test]
fn diffusion_zeroth_order_is_feature_projection() {
    let mut tape = Tape::new();
    let x = var(&mut tape, &[vec![1.0, 2.0], vec![3.0, 4.0]]);
    let p = Arc::new(SparseRows::row_normalized(&[vec![1], vec![0]], 2).unwrap());
    let a = tape.leaf(Tensor::full([2, 2], 0.5), false);
    let w: Vec<Var> = (0..3).map(|j| tape.leaf(Tensor::full([2, 1], j as f64 + 1.0), true)).collect();
    let z = diffusion_gconv(&mut tape, x, p.clone(), p, a, &[0, 1], &[[w[0], w[1], w[2]]], false).unwrap();
    // X (1 + 2 + 3) summed over columns
    assert_eq!(tape.value(z).data(), &[18.0, 42.0]);
}

#[test]
fn diffusion_matches_dense_powers_on_path() {
    // path 0-1-2-3, K = 2, two feature columns, one output column
    let lists = vec![vec![1], vec![0, 2], vec![1, 3], vec![2]];
    let p = Arc::new(SparseRows::row_normalized(&lists, 4).unwrap());
    let pd = p.to_dense();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let a: Vec<f64> = {
        let raw: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
        raw.chunks(4).flat_map(|r| {
            let s: f64 = r.iter().sum();
            r.iter().map(move |v| v / s)
        }).collect()
    };
    let ws: Vec<Vec<f64>> = (0..9).map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();

    let mut want = vec![0.0; 4];
    let (mut pk, mut ak) = (identity(4), identity(4));
    for k in 0..3 {
        if k > 0 {
            pk = dense_mul(&pk, &pd, 4, 4, 4);
            ak = dense_mul(&ak, &a, 4, 4, 4);
        }
        for (m, wi) in [(&pk, 3 * k), (&pk, 3 * k + 1), (&ak, 3 * k + 2)] {
            let mx = dense_mul(m, &x, 4, 4, 2);
            let t = dense_mul(&mx, &ws[wi], 4, 2, 1);
            want.iter_mut().zip(t).for_each(|(w, v)| *w += v);
        }
    }

    let mut tape = Tape::new();
    let xv = tape.leaf(Tensor::matrix(4, 2, x).unwrap(), true);
    let av = tape.leaf(Tensor::matrix(4, 4, a).unwrap(), true);
    let wv: Vec<Var> = ws.iter().map(|w| tape.leaf(Tensor::matrix(2, 1, w.clone()).unwrap(), true)).collect();
    let weights: Vec<[Var; 3]> = wv.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    let z = diffusion_gconv(&mut tape, xv, p.clone(), p, av, &[0, 1, 2, 3], &weights, false).unwrap();
    for (g, w) in tape.value(z).data().iter().zip(&want) {
        assert!((g - w).abs() < 1e-12, "{g} vs {w}");
    }
}

fn identity(n: usize) -> Vec<f64> {
    (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect()
}

fn pairs_for(target_nbrs: &[(usize, &[usize])], out_rows: usize) -> attention::LayerPairs {
    let mut p = attention::LayerPairs {
        offsets: vec![0],
        out_rows,
        ..Default::default()
    };
    for (i, &(v, nbrs)) in target_nbrs.iter().enumerate() {
        for &u in nbrs {
            p.src.push(u);
            p.dst.push(v);
            p.target.push(i);
        }
        p.offsets.push(p.src.len());
    }
    p
}

#[test]
fn attention_uniform_cases() {
    let mut tape = Tape::new();
    let wh = var(&mut tape, &[vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0], vec![0.5, -2.0]]);
    let a_src = var(&mut tape, &[vec![0.3], vec![0.9]]);
    let a_dst = var(&mut tape, &[vec![-0.4], vec![0.2]]);
    let pairs = pairs_for(&[(3, &[0, 1, 2])], 1);
    let alpha = attention_coeffs(&mut tape, wh, a_src, a_dst, &pairs).unwrap();
    assert!(tape.value(alpha).data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

    let wh = var(&mut tape, &[vec![1.0, 5.0], vec![-3.0, 1.0], vec![0.5, -2.0]]);
    let zero = tape.leaf(Tensor::zeros([2, 1]), true);
    let pairs = pairs_for(&[(2, &[0, 1])], 1);
    let alpha = attention_coeffs(&mut tape, wh, zero, zero, &pairs).unwrap();
    assert_eq!(tape.value(alpha).data(), &[0.5, 0.5]);
}

#[test]
fn attention_two_neighbours_by_hand() {
    // scores: u0 → 1*1 + 0.5 = 1.5; u1 → -2*1 + 0.5 = -1.5 → leaky -0.3
    let mut tape = Tape::new();
    let wh = var(&mut tape, &[vec![1.0], vec![-2.0], vec![0.25]]);
    let a_src = var(&mut tape, &[vec![1.0]]);
    let a_dst = var(&mut tape, &[vec![2.0]]);
    let pairs = pairs_for(&[(2, &[0, 1])], 1);
    let alpha = attention_coeffs(&mut tape, wh, a_src, a_dst, &pairs).unwrap();
    let (e0, e1) = (1.5f64.exp(), (-0.3f64).exp());
    let got = tape.value(alpha).data();
    assert!((got[0] - e0 / (e0 + e1)).abs() < 1e-15);
    assert!((got[1] - e1 / (e0 + e1)).abs() < 1e-15);
}

#[test]
fn attention_layer_single_neighbour_and_width() {
    let mut tape = Tape::new();
    let h = var(&mut tape, &[vec![0.2, -0.1], vec![1.0, 3.0]]);
    let w = var(&mut tape, &[vec![0.5, 1.0, -1.0], vec![0.25, 0.0, 2.0]]);
    let a = var(&mut tape, &[vec![0.3], vec![-0.7], vec![0.1]]);
    let layer = AttentionLayer {
        heads: vec![(w, a, a)],
        residual: None,
    };
    let pairs = pairs_for(&[(0, &[1])], 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = attention_aggregate_residual(&mut tape, h, None, &layer, &pairs, 0.5, &mut rng, false, false).unwrap();
    let want = [1.25f64.tanh(), 1.0f64.tanh(), 5.0f64.tanh()];
    for (g, w) in tape.value(out).data().iter().zip(want) {
        assert!((g - w).abs() < 1e-15);
    }

    let e = var(&mut tape, &[vec![1.0, 2.0, 3.0, 4.0]]);
    let res = tape.leaf(Tensor::zeros([4, 5]), true);
    let layer = AttentionLayer {
        heads: vec![(w, a, a), (w, a, a)],
        residual: Some(res),
    };
    let out = attention_aggregate_residual(&mut tape, h, Some(e), &layer, &pairs, 0.0, &mut rng, true, false).unwrap();
    assert_eq!(tape.shape(out), &[1, 2 * 3 + 5]);
}

#[test]
fn fuse_depends_only_on_live_branch() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let zero = tape.leaf(Tensor::zeros([3, 2]), true);
    let w = tape.leaf(Tensor::randn([8, 4], 1.0, &mut rng), true);
    let b = tape.leaf(Tensor::zeros([4]), true);
    let x1 = tape.leaf(Tensor::randn([3, 2], 1.0, &mut rng), true);
    let x2 = tape.leaf(Tensor::randn([3, 2], 1.0, &mut rng), true);
    let run = |tape: &mut Tape, r: Var| {
        let out = fuse_branches(
            tape,
            &BranchOutputs {
                temporal: zero,
                spatial: zero,
                attention: zero,
                residual: r,
            },
            w,
            b,
        )
        .unwrap();
        tape.value(out).clone()
    };
    let f1 = run(&mut tape, x1);
    let direct = {
        let wr = tape.value(w).data()[24..].to_vec();
        let prod = dense_mul(tape.value(x1).data(), &wr, 3, 2, 4);
        prod.into_iter().map(|v| v.max(0.0)).collect::<Vec<_>>()
    };
    for (g, w) in f1.data().iter().zip(&direct) {
        assert!((g - w).abs() < 1e-14);
    }
    assert_ne!(f1, run(&mut tape, x2));
}

#[test]
fn config_fits_sample_sizes_to_depth() {
    let c = ModelConfig { layers: 3, ..ModelConfig::new(ModelKind::Gat) };
    assert_eq!(c.sample_sizes(&[8, 4]), vec![8, 4, 4]);
    assert_eq!(c.sample_sizes(&[8, 4, 2, 1]), vec![8, 4, 2]);
    assert_eq!("gtcn_g".parse::<ModelKind>().unwrap(), ModelKind::GtcnG);
    assert!(matches!("gcn".parse::<ModelKind>(), Err(Error::Config(_))));
}

#[test]
fn eval_forward_is_deterministic_and_finite() {
    let t = six_flows();
    for kind in ModelKind::ALL {
        let (ctx, state) = setup(kind, &t);
        let opts = ForwardOptions::default();
        let a = logits(&state, &ctx, &[0, 3, 5], &opts);
        let b = logits(&state, &ctx, &[0, 3, 5], &opts);
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[3, 3]);
        assert!(a.is_finite());
    }
}

#[test]
fn batch_permutation_permutes_logits() {
    let t = six_flows();
    for kind in ModelKind::ALL {
        let (ctx, state) = setup(kind, &t);
        let opts = ForwardOptions::full_neighborhood();
        let a = logits(&state, &ctx, &[0, 1, 2, 3, 4, 5], &opts);
        let b = logits(&state, &ctx, &[5, 4, 3, 2, 1, 0], &opts);
        for i in 0..6 {
            for (x, y) in a.row(i).iter().zip(b.row(5 - i)) {
                assert!((x - y).abs() < 1e-12, "{kind}");
            }
        }
    }
}

#[test]
fn single_flow_graph_depends_on_its_features() {
    let mut t = table(&[(1, 1)], 2, 0);
    for kind in ModelKind::ALL {
        let cfg = ModelConfig { window: 1, ..tiny(kind) };
        let ctx = GraphContext::build(&t, 1, 0).unwrap();
        let state = ModelState::init(cfg.clone().for_data(&ctx, 2), 0).unwrap();
        let a = logits(&state, &ctx, &[0], &ForwardOptions::default());
        assert!(a.is_finite());
        t.features[0] += 1.0;
        let ctx = GraphContext::build(&t, 1, 0).unwrap();
        let b = logits(&state, &ctx, &[0], &ForwardOptions::default());
        t.features[0] -= 1.0;
        assert_ne!(a, b, "{kind}");
    }
}

#[test]
fn gradients_match_finite_differences() {
    let t = six_flows();
    let labels = [0, 1, 2, 0, 1, 2];
    for kind in ModelKind::ALL {
        let (ctx, state) = setup(kind, &t);
        let names = state.names();
        let inputs: Vec<Tensor> = state.params.values().map(|p| (**p).clone()).collect();
        let opts = ForwardOptions::full_neighborhood();
        let err = grad_check(
            |tape, vars| {
                let p = ParamVars::from_pairs(&names, vars);
                let out = forward(tape, &state, &p, &ctx, &[0, 1, 2, 3, 4, 5], &opts)?;
                tape.cross_entropy(out.logits, &labels, None)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{kind}: {err}");
    }
}

/// E-GraphSAGE computed over the whole endpoint graph with plain loops.
fn sage_full_graph(state: &ModelState, t: &FlowTable) -> Vec<Vec<f64>> {
    let f = t.dim;
    let mut ids: BTreeMap<(u8, Endpoint), usize> = BTreeMap::new();
    let mut id = |side: u8, e: &Endpoint| {
        let n = ids.len();
        *ids.entry((side, e.clone())).or_insert(n)
    };
    let ends: Vec<(usize, usize)> = t.src.iter().zip(&t.dst).map(|(s, d)| (id(0, s), id(1, d))).collect();
    let n = ids.len();
    let mut pair_rows: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, &(s, d)) in ends.iter().enumerate() {
        pair_rows.entry((s, d)).or_default().push(i);
        pair_rows.entry((d, s)).or_default().push(i);
    }
    let ebar = |v: usize, u: usize| {
        let rows = &pair_rows[&(v, u)];
        (0..f)
            .map(|j| rows.iter().map(|&r| t.row(r)[j]).sum::<f64>() / rows.len() as f64)
            .collect::<Vec<f64>>()
    };
    let mut h = vec![vec![1.0; f]; n];
    for k in 1..=state.config.layers {
        let w = &state.params[&format!("sage{k}.w")];
        let out = w.shape()[1];
        let mut next = vec![vec![0.0; out]; n];
        for v in 0..n {
            let nbrs: Vec<usize> = pair_rows.keys().filter(|p| p.0 == v).map(|p| p.1).collect();
            let width = h[0].len() + f;
            let mut agg = vec![0.0; width];
            for &u in &nbrs {
                let msg: Vec<f64> = h[u].iter().copied().chain(ebar(v, u)).collect();
                agg.iter_mut().zip(msg).for_each(|(a, m)| *a += m / nbrs.len() as f64);
            }
            let input: Vec<f64> = h[v].iter().copied().chain(agg).collect();
            for (o, slot) in next[v].iter_mut().enumerate() {
                *slot = input.iter().enumerate().map(|(i, x)| x * w.at(i, o)).sum::<f64>().max(0.0);
            }
        }
        h = next;
    }
    let (cw, cb) = (&state.params["cls.w"], &state.params["cls.b"]);
    ends.iter()
        .enumerate()
        .map(|(i, &(s, d))| {
            let z: Vec<f64> = h[s].iter().chain(&h[d]).chain(t.row(i)).copied().collect();
            (0..cw.shape()[1])
                .map(|c| cb.data()[c] + z.iter().enumerate().map(|(j, x)| x * cw.at(j, c)).sum::<f64>())
                .collect()
        })
        .collect()
}

#[test]
fn sage_minibatch_equals_full_graph() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..10 {
        let flows: Vec<(u32, u32)> = (0..rng.gen_range(3..25)).map(|_| (rng.gen_range(0..6), rng.gen_range(0..8))).collect();
        let t = table(&flows, 3, trial);
        let (ctx, state) = setup(ModelKind::EGraphSageM, &t);
        let want = sage_full_graph(&state, &t);
        let batch: Vec<usize> = (0..t.len()).filter(|_| rng.gen_bool(0.5)).chain([0]).collect();
        let got = logits(&state, &ctx, &batch, &ForwardOptions::full_neighborhood());
        for (r, &b) in batch.iter().enumerate() {
            for (g, w) in got.row(r).iter().zip(&want[b]) {
                assert!((g - w).abs() < 1e-9, "trial {trial}: {g} vs {w}");
            }
        }
    }
}

#[test]
fn residual_path_survives_masking() {
    let t = six_flows();
    let mask = ForwardOptions {
        mask_neighbors: true,
        feature_grad: true,
        ..ForwardOptions::full_neighborhood()
    };
    let probe = |kind| {
        let (ctx, state) = setup(kind, &t);
        let mut tape = Tape::new();
        let p = state.bind(&mut tape, false);
        let out = forward(&mut tape, &state, &p, &ctx, &[2], &mask).unwrap();
        let loss = tape.sum(out.logits).unwrap();
        tape.backward(loss).unwrap();
        tape.grad_or_zeros(out.features).row(2).iter().map(|g| g.abs()).sum::<f64>()
    };
    assert!(probe(ModelKind::GtcnG) > 0.0);
    assert_eq!(probe(ModelKind::Gat), 0.0);
}

#[test]
fn checkpoint_round_trip_and_rejections() {
    let t = six_flows();
    let dir = tempfile::tempdir().unwrap();
    for kind in ModelKind::ALL {
        let (_, state) = setup(kind, &t);
        let path = dir.path().join(format!("{kind}.ckpt"));
        state.save(&path).unwrap();
        assert_eq!(ModelState::load(&path).unwrap(), state);
        let other = ModelKind::ALL.into_iter().find(|&k| k != kind).unwrap();
        assert!(matches!(ModelState::load_expecting(&path, other), Err(Error::Config(_))));
    }
    let (_, state) = setup(ModelKind::Gat, &t);
    let mut bytes = state.to_bytes();
    bytes[8] = 9;
    assert!(matches!(ModelState::from_bytes(&bytes, "x".as_ref()), Err(Error::Config(_))));
    let bytes = state.to_bytes();
    assert!(ModelState::from_bytes(&bytes[..bytes.len() - 3], "x".as_ref()).is_err());
    assert!(ModelState::from_bytes(b"NOTACKPT", "x".as_ref()).is_err());
}

#[test]
fn window_mismatch_is_a_config_error() {
    let t = six_flows();
    let (_, state) = setup(ModelKind::GtcnG, &t);
    let ctx = GraphContext::build(&t, 5, 1).unwrap();
    let mut tape = Tape::new();
    let p = state.bind(&mut tape, false);
    let r = forward(&mut tape, &state, &p, &ctx, &[0], &ForwardOptions::default());
    assert!(matches!(r, Err(Error::Config(_))));
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(100))]

    #[test]
    fn attention_and_adjacency_normalise(seed in proptest::prelude::any::<u64>(), n in 2usize..9, deg in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let wh = tape.leaf(Tensor::randn([n, 3], 2.0, &mut rng), false);
        let a_src = tape.leaf(Tensor::randn([3, 1], 2.0, &mut rng), false);
        let a_dst = tape.leaf(Tensor::randn([3, 1], 2.0, &mut rng), false);
        let nbrs: Vec<Vec<usize>> = (0..n).map(|_| (0..deg).map(|_| rng.gen_range(0..n)).collect()).collect();
        let spec: Vec<(usize, &[usize])> = nbrs.iter().enumerate().map(|(v, l)| (v, l.as_slice())).collect();
        let pairs = pairs_for(&spec, n);
        let alpha = attention_coeffs(&mut tape, wh, a_src, a_dst, &pairs).unwrap();
        let alpha = tape.value(alpha).data().to_vec();
        for w in pairs.offsets.windows(2) {
            let s: f64 = alpha[w[0]..w[1]].iter().sum();
            proptest::prop_assert!((s - 1.0).abs() < 1e-6);
            proptest::prop_assert!(alpha[w[0]..w[1]].iter().all(|&a| a >= 0.0));
        }
        let e1 = tape.leaf(Tensor::randn([n, 2], 3.0, &mut rng), false);
        let e2 = tape.leaf(Tensor::randn([n, 2], 3.0, &mut rng), false);
        let a = adaptive_adjacency(&mut tape, e1, e2).unwrap();
        let a = tape.value(a);
        for i in 0..n {
            proptest::prop_assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            proptest::prop_assert!(a.row(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn temporal_branch_is_causal(seed in proptest::prelude::any::<u64>(), t_perturb in 0usize..2) {
        // reading the second-to-last step must ignore the last one
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Tensor::randn([2, 3, 2], 1.0, &mut rng);
        let k1 = Tensor::randn([2, 2, 3], 1.0, &mut rng);
        let k2 = Tensor::randn([2, 2, 3], 1.0, &mut rng);
        let k3 = Tensor::randn([2, 3, 3], 1.0, &mut rng);
        let k4 = Tensor::randn([2, 3, 3], 1.0, &mut rng);
        let run = |x: &Tensor| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), false);
            let [a, b, c, d] = [&k1, &k2, &k3, &k4].map(|k| tape.leaf(k.clone(), false));
            let z = tape.leaf(Tensor::zeros([3]), false);
            let h = gated_tcn(&mut tape, xv, &[(a, b, z, z, 1), (c, d, z, z, 2)]).unwrap();
            let h = tape.take_step(h, 1).unwrap();
            tape.value(h).clone()
        };
        let before = run(&x);
        x.data_mut()[(t_perturb * 3 + 2) * 2] += 5.0;
        proptest::prop_assert_eq!(before, run(&x));
    }
}
