use super::*;
use crate::testutil::{conv_oracle, rand_tensor};
use crate::tensor::gradcheck::{check, Probe};

fn run_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    groups: usize,
    padding: Padding,
) -> (Tensor<f64>, u64) {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let bv = b.map(|b| tape.constant(b.clone()));
    let y = conv3d(&mut tape, xv, wv, bv, groups, padding).unwrap();
    (tape.value(y).clone(), tape.counter().mac_count)
}

fn delta(co: usize, ci: usize, k: [usize; 3]) -> Tensor<f64> {
    let mut w = Tensor::zeros(&[co, ci, k[0], k[1], k[2]]);
    for c in 0..co.min(ci) {
        let off = w.offset(&[c, c, k[0] / 2, k[1] / 2, k[2] / 2]);
        w.data_mut()[off] = 1.0;
    }
    w
}

#[test]
fn conv_inplane_examples() {
    let x = rand_tensor(&[1, 2, 3, 4, 4], 1);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let id = tape.constant(delta(2, 2, [1, 1, 1]));
    let y = conv_inplane(&mut tape, xv, id, None).unwrap();
    assert_eq!(tape.value(y), &x);

    let c = 0.7;
    let xc = tape.constant(Tensor::full(&[1, 1, 2, 5, 5], c));
    let ones = tape.constant(Tensor::full(&[1, 1, 1, 3, 3], 1.0));
    let y = conv_inplane(&mut tape, xc, ones, None).unwrap();
    assert!((tape.value(y).at(&[0, 0, 1, 2, 2]) - 9.0 * c).abs() < 1e-12);
    // corner sees 4 taps under zero padding
    assert!((tape.value(y).at(&[0, 0, 0, 0, 0]) - 4.0 * c).abs() < 1e-12);

    let x = rand_tensor(&[1, 1, 1, 4, 4], 2);
    let w = rand_tensor(&[1, 1, 1, 3, 3], 3);
    let (got, macs) = run_conv(&x, &w, None, 1, Padding::Same);
    assert!(got.max_abs_diff(&conv_oracle(&x, &w, None, 1, true)) < 1e-6);
    assert_eq!(macs, 9 * 16);
}

#[test]
fn conv_throughplane_examples() {
    let x = rand_tensor(&[1, 1, 5, 2, 2], 4);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let id = tape.constant(delta(1, 1, [1, 1, 1]));
    let y = conv_throughplane(&mut tape, xv, id, None).unwrap();
    assert_eq!(tape.value(y), &x);

    let xc = tape.constant(Tensor::full(&[1, 1, 5, 2, 2], 1.5));
    let ones = tape.constant(Tensor::full(&[1, 1, 3, 1, 1], 1.0));
    let y = conv_throughplane(&mut tape, xc, ones, None).unwrap();
    assert!((tape.value(y).at(&[0, 0, 2, 1, 1]) - 4.5).abs() < 1e-12);

    let w = rand_tensor(&[1, 1, 3, 1, 1], 5);
    let (got, macs) = run_conv(&x, &w, None, 1, Padding::Same);
    assert!(got.max_abs_diff(&conv_oracle(&x, &w, None, 1, true)) < 1e-6);
    assert_eq!(macs, 3 * 5 * 4);
}

#[test]
fn conv_pointwise_examples() {
    let x = rand_tensor(&[2, 2, 2, 3, 3], 6);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let id = tape.constant(delta(2, 2, [1, 1, 1]));
    let y = conv_pointwise(&mut tape, xv, id, None).unwrap();
    assert_eq!(tape.value(y), &x);

    let sum = tape.constant(Tensor::full(&[1, 2, 1, 1, 1], 1.0));
    let y = conv_pointwise(&mut tape, xv, sum, None).unwrap();
    let v = tape.value(y);
    for n in 0..2 {
        for z in 0..2 {
            for yy in 0..3 {
                for xx in 0..3 {
                    let want = x.at(&[n, 0, z, yy, xx]) + x.at(&[n, 1, z, yy, xx]);
                    assert!((v.at(&[n, 0, z, yy, xx]) - want).abs() < 1e-12);
                }
            }
        }
    }

    // matmul-over-channels oracle
    let w = rand_tensor(&[3, 2, 1, 1, 1], 7);
    let b = rand_tensor(&[3], 8);
    let (got, _) = run_conv(&x, &w, Some(&b), 1, Padding::Same);
    for n in 0..2 {
        for o in 0..3 {
            for vox in 0..18 {
                let want: f64 = b.data()[o]
                    + (0..2).map(|c| w.data()[o * 2 + c] * x.data()[(n * 2 + c) * 18 + vox]).sum::<f64>();
                assert!((got.data()[(n * 3 + o) * 18 + vox] - want).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn depthwise_convs() {
    let mut tape = Tape::new();
    let x = rand_tensor(&[1, 3, 4, 4], 9);
    let xv = tape.constant(x.clone());
    let mut dk = Tensor::zeros(&[3, 1, 3, 3]);
    for c in 0..3 {
        let off = dk.offset(&[c, 0, 1, 1]);
        dk.data_mut()[off] = 1.0;
    }
    let dkv = tape.constant(dk);
    let y = dwconv2d(&mut tape, xv, dkv, None).unwrap();
    assert_eq!(tape.value(y), &x);

    let cst = tape.constant(Tensor::full(&[1, 2, 5, 5], 2.0));
    let ones = tape.constant(Tensor::full(&[2, 1, 3, 3], 1.0));
    let y = dwconv2d(&mut tape, cst, ones, None).unwrap();
    assert!((tape.value(y).at(&[0, 1, 2, 2]) - 18.0).abs() < 1e-12);

    let w = rand_tensor(&[3, 1, 3, 3], 10);
    let wv = tape.constant(w.clone());
    let y = dwconv2d(&mut tape, xv, wv, None).unwrap();
    let want = conv_oracle(
        &x.clone().reshaped(&[1, 3, 1, 4, 4]).unwrap(),
        &w.reshaped(&[3, 1, 1, 3, 3]).unwrap(),
        None,
        3,
        true,
    );
    assert!(tape.value(y).clone().reshaped(&[1, 3, 1, 4, 4]).unwrap().max_abs_diff(&want) < 1e-6);

    // 1D
    let s = rand_tensor(&[2, 3, 5], 11);
    let sv = tape.constant(s.clone());
    let mut dk = Tensor::zeros(&[3, 1, 3]);
    for c in 0..3 {
        let off = dk.offset(&[c, 0, 1]);
        dk.data_mut()[off] = 1.0;
    }
    let dkv = tape.constant(dk);
    let y = dwconv1d(&mut tape, sv, dkv, None).unwrap();
    assert_eq!(tape.value(y), &s);

    let cst = tape.constant(Tensor::full(&[1, 2, 4], 2.0));
    let ones = tape.constant(Tensor::full(&[2, 1, 3], 1.0));
    let y = dwconv1d(&mut tape, cst, ones, None).unwrap();
    assert!((tape.value(y).at(&[0, 0, 1]) - 6.0).abs() < 1e-12);

    let w = rand_tensor(&[3, 1, 3], 12);
    let wv = tape.constant(w.clone());
    let y = dwconv1d(&mut tape, sv, wv, None).unwrap();
    let want = conv_oracle(
        &s.reshaped(&[2, 3, 5, 1, 1]).unwrap(),
        &w.reshaped(&[3, 1, 3, 1, 1]).unwrap(),
        None,
        3,
        true,
    );
    assert!(tape.value(y).clone().reshaped(&[2, 3, 5, 1, 1]).unwrap().max_abs_diff(&want) < 1e-6);
}

#[test]
fn every_conv_matches_oracle_on_small_extents() {
    let mut seed = 100;
    for &(n, ci, co, groups) in &[(1, 1, 1, 1), (2, 2, 3, 1), (1, 4, 4, 4), (1, 3, 2, 1)] {
        for k in [[1, 3, 3], [3, 1, 1], [1, 1, 1], [3, 3, 3], [1, 5, 5]] {
            for dims in [[1, 5, 5], [3, 4, 5], [5, 2, 3]] {
                seed += 1;
                let x = rand_tensor(&[n, ci, dims[0], dims[1], dims[2]], seed);
                let w = rand_tensor(&[co, ci / groups, k[0], k[1], k[2]], seed + 1000);
                let b = rand_tensor(&[co], seed + 2000);
                let (got, macs) = run_conv(&x, &w, Some(&b), groups, Padding::Same);
                let want = conv_oracle(&x, &w, Some(&b), groups, true);
                assert!(got.max_abs_diff(&want) < 1e-6, "k={k:?} dims={dims:?}");
                assert_eq!(macs as usize, n * co * (ci / groups) * k.iter().product::<usize>() * dims.iter().product::<usize>());
                if k.iter().zip(dims).all(|(&k, d)| k <= d) {
                    let (got, _) = run_conv(&x, &w, Some(&b), groups, Padding::Valid);
                    let want = conv_oracle(&x, &w, Some(&b), groups, false);
                    assert!(got.max_abs_diff(&want) < 1e-6, "valid k={k:?} dims={dims:?}");
                }
            }
        }
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 2, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[1, 3, 1, 3, 3]));
    assert!(matches!(conv_inplane(&mut tape, x, w, None), Err(Error::Dimension(_))));
    let w = tape.constant(Tensor::zeros(&[1, 2, 3, 1, 1]));
    assert!(conv_inplane(&mut tape, x, w, None).is_err());
    let even = tape.constant(Tensor::zeros(&[1, 2, 1, 2, 2]));
    assert!(conv_inplane(&mut tape, x, even, None).is_err());
}

#[test]
fn factorized_delta_composes_to_identity() {
    let x = rand_tensor(&[1, 2, 4, 5, 5], 13);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wi = tape.constant(delta(2, 2, [1, 3, 3]));
    let wt = tape.constant(delta(2, 2, [3, 1, 1]));
    let y = conv_inplane(&mut tape, xv, wi, None).unwrap();
    let y = conv_throughplane(&mut tape, y, wt, None).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn global_average_pools() {
    let mut tape = Tape::<f64>::new();
    let c = tape.constant(Tensor::full(&[1, 2, 3, 2, 2], 2.0));
    let g = gap_through(&mut tape, c).unwrap();
    assert_eq!(tape.shape(g), &[1, 2, 2, 2]);
    assert!(tape.value(g).data().iter().all(|&v| v == 2.0));

    let two = tape.constant(Tensor::from_fn(&[1, 1, 2, 1, 1], |i| i as f64));
    let g = gap_through(&mut tape, two).unwrap();
    assert_eq!(tape.value(g).data(), &[0.5]);

    let plane = tape.constant(Tensor::from_f64(&[1, 1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let g = gap_inplane(&mut tape, plane).unwrap();
    assert_eq!(tape.shape(g), &[1, 1, 1]);
    assert_eq!(tape.value(g).data(), &[2.5]);

    // permutation invariance
    let x = rand_tensor(&[1, 2, 4, 3, 3], 14);
    let mut permuted = x.clone();
    let perm = [2, 0, 3, 1];
    for c in 0..2 {
        for (dst, &src) in perm.iter().enumerate() {
            for i in 0..9 {
                permuted.data_mut()[(c * 4 + dst) * 9 + i] = x.data()[(c * 4 + src) * 9 + i];
            }
        }
    }
    let a = tape.constant(x.clone());
    let b = tape.constant(permuted);
    let ga = gap_through(&mut tape, a).unwrap();
    let gb = gap_through(&mut tape, b).unwrap();
    assert!(tape.value(ga).max_abs_diff(tape.value(gb)) < 1e-15);

    let mut tr = x.clone();
    for plane in 0..8 {
        for i in 0..9 {
            tr.data_mut()[plane * 9 + i] = x.data()[plane * 9 + (8 - i)];
        }
    }
    let a = tape.constant(x);
    let b = tape.constant(tr);
    let ga = gap_inplane(&mut tape, a).unwrap();
    let gb = gap_inplane(&mut tape, b).unwrap();
    assert!(tape.value(ga).max_abs_diff(tape.value(gb)) < 1e-15);
}

#[test]
fn maxpool_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(&[1, 1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = maxpool_inplane(&mut tape, x).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0]);

    let c = tape.constant(Tensor::full(&[1, 3, 16, 64, 64], 1.25));
    let y = maxpool_inplane(&mut tape, c).unwrap();
    assert_eq!(tape.shape(y), &[1, 3, 16, 32, 32]);
    assert!(tape.value(y).data().iter().all(|&v| v == 1.25));

    let odd = tape.constant(Tensor::zeros(&[1, 1, 1, 3, 2]));
    assert!(matches!(maxpool_inplane(&mut tape, odd), Err(Error::Dimension(_))));

    // ties: the gradient goes to the first index only
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::full(&[1, 1, 1, 2, 2], 3.0), true);
    let y = maxpool_inplane(&mut tape, x).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn upsampling_examples() {
    let mut tape = Tape::<f64>::new();
    let row = tape.constant(Tensor::from_f64(&[1, 1, 1, 1, 2], &[0.0, 1.0]).unwrap());
    let y = resize_axis(&mut tape, row, 4, 4).unwrap();
    let want = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
    for (a, b) in tape.value(y).data().iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }

    let c = tape.constant(Tensor::full(&[1, 2, 3, 4, 4], -0.5));
    let y = upsample_transverse(&mut tape, c, 2).unwrap();
    assert_eq!(tape.shape(y), &[1, 2, 3, 8, 8]);
    assert!(tape.value(y).data().iter().all(|&v| (v + 0.5).abs() < 1e-15));

    let col = tape.constant(Tensor::from_f64(&[1, 1, 2, 1, 1], &[0.0, 1.0]).unwrap());
    let y = upsample_depth(&mut tape, col, 2.0).unwrap();
    for (a, b) in tape.value(y).data().iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }

    let v = tape.constant(Tensor::zeros(&[1, 1, 16, 2, 2]));
    let y = upsample_depth(&mut tape, v, 2.0).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 32, 2, 2]);
    let y = upsample_depth(&mut tape, v, 2.5).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 40, 2, 2]);
    assert!(matches!(upsample_depth(&mut tape, v, 0.5), Err(Error::Contract(_))));
}

#[test]
fn gradients_match_finite_differences() {
    let h = 1e-5;
    let x = rand_tensor(&[2, 2, 3, 4, 4], 20);
    let proj = |tp: &mut Tape<f64>, y: Var| -> Result<Var> {
        let w = tp.constant(rand_tensor(tp.shape(y), 77));
        let p = tp.mul(y, w)?;
        tp.sum(p)
    };
    let cases: Vec<(&str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>)> = vec![
        ("conv_inplane", vec![x.clone(), rand_tensor(&[3, 2, 1, 3, 3], 21), rand_tensor(&[3], 22)],
            Box::new(|tp, v| { let y = conv_inplane(tp, v[0], v[1], Some(v[2]))?; proj(tp, y) })),
        ("conv_throughplane", vec![x.clone(), rand_tensor(&[3, 2, 3, 1, 1], 23), rand_tensor(&[3], 24)],
            Box::new(|tp, v| { let y = conv_throughplane(tp, v[0], v[1], Some(v[2]))?; proj(tp, y) })),
        ("conv_pointwise", vec![x.clone(), rand_tensor(&[3, 2, 1, 1, 1], 25)],
            Box::new(|tp, v| { let y = conv_pointwise(tp, v[0], v[1], None)?; proj(tp, y) })),
        ("conv3d_grouped_valid", vec![x.clone(), rand_tensor(&[2, 1, 3, 3, 3], 26)],
            Box::new(|tp, v| { let y = conv3d(tp, v[0], v[1], None, 2, Padding::Valid)?; proj(tp, y) })),
        ("dwconv2d", vec![rand_tensor(&[1, 3, 4, 4], 27), rand_tensor(&[3, 1, 3, 3], 28)],
            Box::new(|tp, v| { let y = dwconv2d(tp, v[0], v[1], None)?; proj(tp, y) })),
        ("dwconv1d", vec![rand_tensor(&[2, 3, 5], 29), rand_tensor(&[3, 1, 3], 30)],
            Box::new(|tp, v| { let y = dwconv1d(tp, v[0], v[1], None)?; proj(tp, y) })),
        ("gap_through", vec![x.clone()], Box::new(|tp, v| { let y = gap_through(tp, v[0])?; proj(tp, y) })),
        ("gap_inplane", vec![x.clone()], Box::new(|tp, v| { let y = gap_inplane(tp, v[0])?; proj(tp, y) })),
        ("maxpool", vec![x.clone()], Box::new(|tp, v| { let y = maxpool_inplane(tp, v[0])?; proj(tp, y) })),
        ("upsample_transverse", vec![x.clone()], Box::new(|tp, v| { let y = upsample_transverse(tp, v[0], 2)?; proj(tp, y) })),
        ("upsample_depth", vec![x.clone()], Box::new(|tp, v| { let y = upsample_depth(tp, v[0], 2.5)?; proj(tp, y) })),
    ];
    for (name, inputs, f) in cases {
        let r = check(|tp, v| f(tp, v), &inputs, h, &Probe::All).unwrap();
        assert!(r.passed(1e-4), "{name}: {} at {:?}", r.max_rel_err, r.worst);
    }
}
