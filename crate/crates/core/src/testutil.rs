//! Shared oracles for unit tests.

use crate::params::{Bound, ParamStore};
use crate::tensor::gradcheck::{check, GradCheckReport, Probe};
use crate::tensor::{Tape, Tensor, Var};
use crate::Result;

/// Deterministic values in [-1, 1].
pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut s = seed ^ 0x9E37_79B9_7F4A_7C15;
    Tensor::from_fn(shape, |_| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s % 20_001) as f64 / 10_000.0 - 1.0
    })
}

/// Direct nested-loop grouped convolution with explicit bounds checks.
pub fn conv_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    groups: usize,
    same: bool,
) -> Tensor<f64> {
    let s = x.shape();
    let (n, d, h, wd) = (s[0], s[2], s[3], s[4]);
    let ws = w.shape();
    let (co, cig, kd, kh, kw) = (ws[0], ws[1], ws[2], ws[3], ws[4]);
    let (pd, ph, pw) = if same { (kd / 2, kh / 2, kw / 2) } else { (0, 0, 0) };
    let (od, oh, ow) = if same { (d, h, wd) } else { (d - kd + 1, h - kh + 1, wd - kw + 1) };
    let cog = co / groups;
    let mut out = Tensor::zeros(&[n, co, od, oh, ow]);
    for bn in 0..n {
        for o in 0..co {
            let g = o / cog;
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b.data()[o]);
                        for cl in 0..cig {
                            let c = g * cig + cl;
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for cc in 0..kw {
                                        let iz = z as isize + a as isize - pd as isize;
                                        let iy = y as isize + bb as isize - ph as isize;
                                        let ix = xx as isize + cc as isize - pw as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                            continue;
                                        }
                                        acc += w.at(&[o, cl, a, bb, cc])
                                            * x.at(&[bn, c, iz as usize, iy as usize, ix as usize]);
                                    }
                                }
                            }
                        }
                        let off = out.offset(&[bn, o, z, y, xx]);
                        out.data_mut()[off] = acc;
                    }
                }
            }
        }
    }
    out
}

/// Finite-difference check of `f` with respect to `x` and every parameter.
/// The output is reduced to a scalar against fixed pseudo-random weights.
pub fn check_with_params<F>(store: &ParamStore<f64>, x: &Tensor<f64>, probe: Probe, f: F) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &Bound, Var) -> Result<Var>,
{
    let mut inputs = vec![x.clone()];
    inputs.extend(store.tensors().iter().cloned());
    check(
        |tp, v| {
            let b = Bound::from_vars(v[1..].to_vec());
            let y = f(tp, &b, v[0])?;
            let w = tp.constant(rand_tensor(tp.shape(y), 77));
            let p = tp.mul(y, w)?;
            tp.sum(p)
        },
        &inputs,
        1e-5,
        &probe,
    )
    .unwrap()
}
