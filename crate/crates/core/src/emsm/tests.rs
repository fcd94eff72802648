use super::*;
use crate::params::ParamStore;
use crate::tensor::gradcheck::Probe;
use crate::tensor::Tensor;
use crate::testutil::{check_with_params, rand_tensor};

fn build(c: usize, hi: usize, ht: usize, cfg: &EmsmConfig, seed: u64) -> (EmsmBlock, ParamStore<f64>) {
    let mut init = Init::new(seed);
    let b = EmsmBlock::new(&mut init, "blk", c, hi, ht, cfg).unwrap();
    (b, init.store)
}

fn run(block: &EmsmBlock, store: &ParamStore<f64>, x: &Tensor<f64>) -> (Tensor<f64>, Tape<f64>, AttentionMaps) {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let (y, maps) = block.forward_with_maps(&mut tape, &p, xv).unwrap();
    (tape.value(y).clone(), tape, maps)
}

fn set(store: &mut ParamStore<f64>, name: &str, vals: &[f64]) {
    let t = store.by_name_mut(name).unwrap_or_else(|| panic!("{name}"));
    assert_eq!(t.numel(), vals.len(), "{name}");
    t.data_mut().copy_from_slice(vals);
}

fn zero_projections(store: &mut ParamStore<f64>) {
    for s in [".weight", ".bias"] {
        store.zero_matching("blk.inplane.proj", s);
        store.zero_matching("blk.through.proj", s);
    }
}

#[test]
fn zero_projection_branches_vanish_and_block_is_identity() {
    let x = rand_tensor(&[2, 4, 3, 4, 4], 1);
    for fusion in [AttnFusion::Parallel, AttnFusion::Cascaded] {
        let cfg = EmsmConfig { fusion, ..Default::default() };
        let (b, mut store) = build(4, 2, 2, &cfg, 3);
        zero_projections(&mut store);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let i = b.inplane(&mut tape, &p, xv).unwrap().unwrap();
        let t = b.throughplane(&mut tape, &p, xv).unwrap().unwrap();
        assert_eq!(tape.shape(i), &[2, 4, 1, 4, 4]);
        assert_eq!(tape.shape(t), &[2, 4, 3, 1, 1]);
        assert!(tape.value(i).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(t).data().iter().all(|&v| v == 0.0));
        let (y, _, _) = run(&b, &store, &x);
        assert_eq!(y, x);
    }
}

#[test]
fn disabled_branches() {
    let off = EmsmConfig { enable_inplane: false, enable_throughplane: false, ..Default::default() };
    let mut init = Init::new(0);
    assert!(matches!(EmsmBlock::new(&mut init, "blk", 4, 1, 2, &off), Err(Error::Config(_))));

    let bypass = EmsmConfig { bypass: true, ..off };
    let (b, store) = build(4, 1, 2, &bypass, 0);
    assert!(store.is_empty());
    let x = rand_tensor(&[1, 4, 2, 2, 2], 2);
    assert_eq!(run(&b, &store, &x).0, x);
}

#[test]
fn heads_must_divide_channels() {
    let mut init = Init::new(0);
    let cfg = EmsmConfig::default();
    assert!(matches!(EmsmBlock::new(&mut init, "a", 6, 4, 2, &cfg), Err(Error::Config(_))));
    assert!(matches!(EmsmBlock::new(&mut init, "b", 6, 2, 4, &cfg), Err(Error::Config(_))));
    let (b, store) = build(8, 4, 2, &cfg, 0);
    assert_eq!(store.by_name("blk.inplane.alpha").unwrap().data(), &[2f64.sqrt(); 4]);
    assert_eq!(b.heads(), (Some(4), Some(2)));
}

#[test]
fn attention_maps_are_row_stochastic() {
    let x = rand_tensor(&[2, 8, 5, 4, 4], 4);
    let (b, store) = build(8, 2, 4, &EmsmConfig::default(), 5);
    let (_, tape, maps) = run(&b, &store, &x);
    for (m, rows, len) in [(maps.inplane.unwrap(), 2 * 2 * 4, 4), (maps.through.unwrap(), 2 * 4 * 5, 5)] {
        let a = tape.value(m);
        assert_eq!(a.numel(), rows * len);
        for r in a.data().chunks(len) {
            assert!(r.iter().all(|&v| v >= 0.0));
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn depth_one_gives_unit_through_attention() {
    let x = rand_tensor(&[1, 4, 1, 3, 3], 6);
    let (b, store) = build(4, 1, 2, &EmsmConfig::default(), 7);
    let (_, tape, maps) = run(&b, &store, &x);
    assert!(tape.value(maps.through.unwrap()).data().iter().all(|&v| v == 1.0));
}

/// Softmax of a small row, in plain arithmetic.
fn softmax_row(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

#[test]
fn inplane_branch_matches_scalar_hand_evaluation() {
    let cfg = EmsmConfig { enable_throughplane: false, ..Default::default() };
    let (b, mut store) = build(2, 1, 1, &cfg, 8);
    // only the centre tap of a 3x3 kernel touches a 1x1 plane
    let centre = |a: f64, b: f64| {
        let mut v = vec![0.25; 18];
        v[4] = a;
        v[13] = b;
        v
    };
    set(&mut store, "blk.inplane.q.pw.weight", &[0.5, -0.2, 0.3, 0.9]);
    set(&mut store, "blk.inplane.q.pw.bias", &[0.1, 0.0]);
    set(&mut store, "blk.inplane.q.dw.weight", &centre(1.2, -0.7));
    set(&mut store, "blk.inplane.k.pw.weight", &[-0.4, 0.6, 0.8, 0.1]);
    set(&mut store, "blk.inplane.k.dw.weight", &centre(0.9, 1.1));
    set(&mut store, "blk.inplane.k.dw.bias", &[0.05, -0.05]);
    set(&mut store, "blk.inplane.v.pw.weight", &[1.0, 0.5, -0.5, 2.0]);
    set(&mut store, "blk.inplane.v.dw.weight", &centre(0.7, -1.3));
    set(&mut store, "blk.inplane.proj.weight", &[0.3, -0.6, 1.5, 0.2]);
    set(&mut store, "blk.inplane.proj.bias", &[0.01, 0.02]);
    set(&mut store, "blk.inplane.alpha", &[1.7]);
    let x = [0.8, -0.3];

    let q = [1.2 * (0.5 * x[0] - 0.2 * x[1] + 0.1), -0.7 * (0.3 * x[0] + 0.9 * x[1])];
    let k = [0.9 * (-0.4 * x[0] + 0.6 * x[1]) + 0.05, 1.1 * (0.8 * x[0] + 0.1 * x[1]) - 0.05];
    let v = [0.7 * (1.0 * x[0] + 0.5 * x[1]), -1.3 * (-0.5 * x[0] + 2.0 * x[1])];
    let mut mix = [0.0; 2];
    for i in 0..2 {
        let a = softmax_row(&[q[i] * k[0] / 1.7, q[i] * k[1] / 1.7]);
        mix[i] = a[0] * v[0] + a[1] * v[1];
    }
    let want = [
        0.3 * mix[0] - 0.6 * mix[1] + 0.01,
        1.5 * mix[0] + 0.2 * mix[1] + 0.02,
    ];

    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let xv = tape.constant(Tensor::from_f64(&[1, 2, 1, 1, 1], &x).unwrap());
    let out = b.inplane(&mut tape, &p, xv).unwrap().unwrap();
    let got = tape.value(out).data();
    assert!((got[0] - want[0]).abs() < 1e-6 && (got[1] - want[1]).abs() < 1e-6, "{got:?} vs {want:?}");
}

#[test]
fn through_branch_matches_scalar_hand_evaluation() {
    let cfg = EmsmConfig { enable_inplane: false, ..Default::default() };
    let (b, mut store) = build(2, 1, 1, &cfg, 9);
    let delta = [0.0, 1.0, 0.0, 0.0, 1.0, 0.0];
    for t in ["q", "k", "v"] {
        set(&mut store, &format!("blk.through.{t}.pw.weight"), &[1.0, 0.0, 0.0, 1.0]);
        set(&mut store, &format!("blk.through.{t}.pw.bias"), &[0.0, 0.0]);
        set(&mut store, &format!("blk.through.{t}.dw.weight"), &delta);
        set(&mut store, &format!("blk.through.{t}.dw.bias"), &[0.0, 0.0]);
    }
    set(&mut store, "blk.through.proj.weight", &[1.0, 0.0, 0.0, 1.0]);
    // x[c][d], with a 1x2 plane whose mean is the listed value
    let xs = [[0.4, -0.9], [1.3, 0.2]];
    let mut data = Vec::new();
    for row in xs {
        for v in row {
            data.extend([v - 0.1, v + 0.1]);
        }
    }
    let d = 2.0f64;
    let mut want = [[0.0; 2]; 2];
    for i in 0..2 {
        let logits: Vec<f64> = (0..2).map(|j| (xs[0][i] * xs[0][j] + xs[1][i] * xs[1][j]) / d.sqrt()).collect();
        let a = softmax_row(&logits);
        for c in 0..2 {
            want[c][i] = a[0] * xs[c][0] + a[1] * xs[c][1];
        }
    }
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let xv = tape.constant(Tensor::from_f64(&[1, 2, 2, 1, 2], &data).unwrap());
    let out = b.throughplane(&mut tape, &p, xv).unwrap().unwrap();
    let got = tape.value(out).data();
    for c in 0..2 {
        for i in 0..2 {
            assert!((got[c * 2 + i] - want[c][i]).abs() < 1e-6);
        }
    }
}

#[test]
fn parallel_and_cascaded_differ() {
    let x = rand_tensor(&[1, 4, 3, 4, 4], 10);
    let (bp, store) = build(4, 2, 2, &EmsmConfig::default(), 11);
    let cas = EmsmConfig { fusion: AttnFusion::Cascaded, ..Default::default() };
    let (bc, store_c) = build(4, 2, 2, &cas, 11);
    assert_eq!(store.tensors(), store_c.tensors());
    let yp = run(&bp, &store, &x).0;
    let yc = run(&bc, &store_c, &x).0;
    assert!(yp.max_abs_diff(&yc) > 1e-6);
}

#[test]
fn inplane_contribution_ignores_depth_order() {
    let x = rand_tensor(&[1, 4, 4, 3, 3], 12);
    let mut perm = x.clone();
    let order = [3, 1, 0, 2];
    for c in 0..4 {
        for (dst, &src) in order.iter().enumerate() {
            for i in 0..9 {
                perm.data_mut()[(c * 4 + dst) * 9 + i] = x.data()[(c * 4 + src) * 9 + i];
            }
        }
    }
    let (b, store) = build(4, 2, 2, &EmsmConfig::default(), 13);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let a = tape.constant(x);
    let bb = tape.constant(perm);
    let ia = b.inplane(&mut tape, &p, a).unwrap().unwrap();
    let ib = b.inplane(&mut tape, &p, bb).unwrap().unwrap();
    assert!(tape.value(ia).max_abs_diff(tape.value(ib)) < 1e-12);
}

#[test]
fn attention_map_macs_follow_factorized_formula() {
    let cfg = EmsmConfig::default();
    let (b, store) = build(16, 1, 2, &cfg, 14);
    let (d, h, w, c) = (4, 8, 8, 16);
    assert_eq!(b.attention_map_macs(1, [d, h, w]), ((d * d + h * w * c) * c) as u64);
    assert_eq!(b.attention_map_macs(1, [d, h, w]), 16_640);
    let (_, tape, _) = run(&b, &store, &rand_tensor(&[1, c, d, h, w], 15));
    let ctr = tape.counter();
    let measured = ctr.per_op["blk.inplane.attn:matmul"] + ctr.per_op["blk.through.attn:matmul"];
    assert_eq!(measured, 16_640);
    assert_eq!(ctr.per_op, b.analytic_macs(1, [d, h, w]));
    assert_eq!(full_3d_attention_macs(64, [16, 64, 64]), 16u128 * 16 * 64 * 64 * 64 * 64 * 64);
}

#[test]
fn analytic_macs_match_counter_for_all_variants() {
    for (ei, et, fusion, pn) in [
        (true, true, AttnFusion::Parallel, false),
        (true, true, AttnFusion::Cascaded, true),
        (true, false, AttnFusion::Parallel, false),
        (false, true, AttnFusion::Parallel, true),
    ] {
        let cfg = EmsmConfig { enable_inplane: ei, enable_throughplane: et, fusion, pre_norm: pn, bypass: false };
        let (b, store) = build(8, 2, 4, &cfg, 16);
        let (_, tape, _) = run(&b, &store, &rand_tensor(&[2, 8, 3, 6, 4], 17));
        assert_eq!(tape.counter().per_op, b.analytic_macs(2, [3, 6, 4]));
        assert_eq!(tape.counter().mac_count, b.analytic_macs(2, [3, 6, 4]).values().sum::<u64>());
        assert_eq!(b.param_count(), store.total_elements());
    }
}

#[test]
fn block_gradients_match_finite_differences() {
    let x = rand_tensor(&[1, 4, 4, 8, 8], 18);
    for cfg in [
        EmsmConfig::default(),
        EmsmConfig { fusion: AttnFusion::Cascaded, pre_norm: true, ..Default::default() },
    ] {
        let (b, store) = build(4, 2, 2, &cfg, 19);
        let r = check_with_params(&store, &x, Probe::All, |tp, p, xv| b.forward(tp, p, xv));
        assert!(r.passed(1e-4), "{cfg:?}: {} at {:?}", r.max_rel_err, r.worst);
    }
}

