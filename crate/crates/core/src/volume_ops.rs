//! Rank-5 feature-map primitives for the depth-invariant architecture.
//!
//! Feature maps are `(N, C, D, H, W)`: batch, channels, through-plane slices,
//! transverse height and width. Convolutions use zero "same" padding unless a
//! caller asks for `Padding::Valid`. Only [`upsample_depth`] changes `D`.

use rayon::prelude::*;

use crate::error::{dim_err, Error, Result};
use crate::params::{Bound, Init, ParamId};
use crate::real::Real;
use crate::tensor::{BackwardCtx, BackwardOp, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Geometry of a grouped 3D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub co: usize,
    pub groups: usize,
    pub kernel: [usize; 3],
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub pad: [usize; 3],
}

pub(crate) fn five(shape: &[usize]) -> Result<[usize; 5]> {
    match shape {
        [n, c, d, h, w] => Ok([*n, *c, *d, *h, *w]),
        _ => dim_err(format!("expected an (N, C, D, H, W) feature map, got {shape:?}")),
    }
}

impl ConvGeom {
    pub fn new(
        x_shape: &[usize],
        co: usize,
        groups: usize,
        kernel: [usize; 3],
        padding: Padding,
    ) -> Result<Self> {
        let [n, ci, d, h, w] = five(x_shape)?;
        if groups == 0 || ci % groups != 0 || co % groups != 0 {
            return dim_err(format!("conv: {ci} -> {co} channels not divisible into {groups} groups"));
        }
        let input = [d, h, w];
        let mut output = [0; 3];
        let mut pad = [0; 3];
        for a in 0..3 {
            let k = kernel[a];
            match padding {
                Padding::Same => {
                    if k % 2 == 0 {
                        return dim_err(format!("same padding needs odd kernels, got {kernel:?}"));
                    }
                    pad[a] = k / 2;
                    output[a] = input[a];
                }
                Padding::Valid => {
                    if k == 0 || k > input[a] {
                        return dim_err(format!("valid conv: kernel {kernel:?} exceeds input {input:?}"));
                    }
                    output[a] = input[a] - k + 1;
                }
            }
        }
        Ok(Self { n, ci, co, groups, kernel, input, output, pad })
    }

    pub fn cig(&self) -> usize {
        self.ci / self.groups
    }

    pub fn cog(&self) -> usize {
        self.co / self.groups
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// `N · C_o · (C_i/groups) · kd·kh·kw · D_o·H_o·W_o`.
    pub fn macs(&self) -> u64 {
        let out: usize = self.output.iter().product();
        (self.n * self.co * self.cig() * self.taps() * out) as u64
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        [self.co, self.cig(), self.kernel[0], self.kernel[1], self.kernel[2]]
    }

    pub fn out_shape(&self) -> [usize; 5] {
        [self.n, self.co, self.output[0], self.output[1], self.output[2]]
    }

    /// Output index range along `axis` whose input index `o + k - pad` is in bounds.
    #[inline]
    fn span(&self, axis: usize, k: usize) -> (usize, usize) {
        let p = self.pad[axis];
        let lo = p.saturating_sub(k);
        let hi = (self.input[axis] + p).saturating_sub(k).min(self.output[axis]);
        (lo, hi.max(lo))
    }

    /// Visits every (output row, input row) pair touched by tap `(kz, ky, kx)`.
    /// Both offsets point at column 0 of their rows; `x0..x1` is the output
    /// column span, and output column `ox` reads input column `ox + kx - pad_x`.
    #[inline]
    fn rows(&self, kz: usize, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        let [_, ho, wo] = self.output;
        let [_, hi, wi] = self.input;
        let (z0, z1) = self.span(0, kz);
        let (y0, y1) = self.span(1, ky);
        let (x0, x1) = self.span(2, kx);
        if x0 >= x1 {
            return;
        }
        for oz in z0..z1 {
            let iz = oz + kz - self.pad[0];
            for oy in y0..y1 {
                let iy = oy + ky - self.pad[1];
                f((oz * ho + oy) * wo, (iz * hi + iy) * wi, x0, x1);
            }
        }
    }
}

fn conv_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let in_vol: usize = g.input.iter().product();
    let out_vol: usize = g.output.iter().product();
    let [kd, kh, kw] = g.kernel;
    let (cig, cog, px) = (g.cig(), g.cog(), g.pad[2]);
    let mut out = vec![T::zero(); g.n * g.co * out_vol];
    out.par_chunks_mut(out_vol).enumerate().for_each(|(nc, o)| {
        let (n, co) = (nc / g.co, nc % g.co);
        if let Some(b) = b {
            o.iter_mut().for_each(|v| *v = b[co]);
        }
        let grp = co / cog;
        for cl in 0..cig {
            let ci = grp * cig + cl;
            let xin = &x[(n * g.ci + ci) * in_vol..][..in_vol];
            let wbase = (co * cig + cl) * kd * kh * kw;
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w[wbase + (kz * kh + ky) * kw + kx];
                        g.rows(kz, ky, kx, |orow, irow, x0, x1| {
                            let s = irow + x0 + kx - px;
                            let src = &xin[s..s + (x1 - x0)];
                            o[orow + x0..orow + x1]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &v)| *d += wv * v);
                        });
                    }
                }
            }
        }
    });
    out
}

fn conv_grad_input<T: Real>(g: &ConvGeom, w: &[T], gout: &[T]) -> Vec<T> {
    let in_vol: usize = g.input.iter().product();
    let out_vol: usize = g.output.iter().product();
    let [kd, kh, kw] = g.kernel;
    let (cig, cog, px) = (g.cig(), g.cog(), g.pad[2]);
    let mut gx = vec![T::zero(); g.n * g.ci * in_vol];
    gx.par_chunks_mut(in_vol).enumerate().for_each(|(nc, gi)| {
        let (n, ci) = (nc / g.ci, nc % g.ci);
        let grp = ci / cig;
        let cl = ci % cig;
        for co in grp * cog..(grp + 1) * cog {
            let go = &gout[(n * g.co + co) * out_vol..][..out_vol];
            let wbase = (co * cig + cl) * kd * kh * kw;
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w[wbase + (kz * kh + ky) * kw + kx];
                        g.rows(kz, ky, kx, |orow, irow, x0, x1| {
                            let s = irow + x0 + kx - px;
                            gi[s..s + (x1 - x0)]
                                .iter_mut()
                                .zip(&go[orow + x0..orow + x1])
                                .for_each(|(d, &v)| *d += wv * v);
                        });
                    }
                }
            }
        }
    });
    gx
}

fn conv_grad_weight<T: Real>(g: &ConvGeom, x: &[T], gout: &[T]) -> Vec<T> {
    let in_vol: usize = g.input.iter().product();
    let out_vol: usize = g.output.iter().product();
    let [kd, kh, kw] = g.kernel;
    let (cig, cog, px) = (g.cig(), g.cog(), g.pad[2]);
    let per_co = cig * kd * kh * kw;
    let mut gw = vec![T::zero(); g.co * per_co];
    gw.par_chunks_mut(per_co).enumerate().for_each(|(co, gwc)| {
        let grp = co / cog;
        for cl in 0..cig {
            let ci = grp * cig + cl;
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = T::zero();
                        for n in 0..g.n {
                            let go = &gout[(n * g.co + co) * out_vol..][..out_vol];
                            let xin = &x[(n * g.ci + ci) * in_vol..][..in_vol];
                            g.rows(kz, ky, kx, |orow, irow, x0, x1| {
                                let s = irow + x0 + kx - px;
                                acc += go[orow + x0..orow + x1]
                                    .iter()
                                    .zip(&xin[s..s + (x1 - x0)])
                                    .fold(T::zero(), |a, (&p, &q)| a + p * q);
                            });
                        }
                        gwc[(cl * kd + kz) * kh * kw + ky * kw + kx] = acc;
                    }
                }
            }
        }
    });
    gw
}

fn conv_grad_bias<T: Real>(g: &ConvGeom, gout: &[T]) -> Vec<T> {
    let out_vol: usize = g.output.iter().product();
    (0..g.co)
        .map(|co| {
            (0..g.n)
                .map(|n| gout[(n * g.co + co) * out_vol..][..out_vol].iter().copied().sum::<T>())
                .fold(T::zero(), |a, v| a + v)
        })
        .collect()
}

struct Conv {
    geom: ConvGeom,
}

impl<T: Real> BackwardOp<T> for Conv {
    fn kind(&self) -> &'static str {
        "conv"
    }

    fn macs(&self) -> u64 {
        self.geom.macs()
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let x = ctx.inputs[0].data();
        let w = ctx.inputs[1].data();
        let mut out = vec![
            ctx.needs[0].then(|| conv_grad_input(&self.geom, w, g)),
            ctx.needs[1].then(|| conv_grad_weight(&self.geom, x, g)),
        ];
        if ctx.inputs.len() == 3 {
            out.push(ctx.needs[2].then(|| conv_grad_bias(&self.geom, g)));
        }
        out
    }
}

/// Grouped 3D convolution of `x (N, C_i, D, H, W)` with
/// `w (C_o, C_i/groups, kd, kh, kw)` and optional bias `(C_o)`.
pub fn conv3d<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    bias: Option<Var>,
    groups: usize,
    padding: Padding,
) -> Result<Var> {
    let ws = tape.shape(w).to_vec();
    let [co, cig, kd, kh, kw] = five(&ws)?;
    let geom = ConvGeom::new(tape.shape(x), co, groups, [kd, kh, kw], padding)?;
    if geom.cig() != cig {
        return dim_err(format!(
            "conv: input has {} channels but kernel bank {ws:?} expects {}",
            geom.ci,
            cig * groups
        ));
    }
    if let Some(b) = bias {
        if tape.shape(b) != [co] {
            return dim_err(format!("conv: bias shape {:?} != [{co}]", tape.shape(b)));
        }
    }
    let data = conv_forward(
        &geom,
        tape.value(x).data(),
        tape.value(w).data(),
        bias.map(|b| tape.value(b).data()),
    );
    let out = Tensor::new(&geom.out_shape(), data)?;
    let mut inputs = vec![x, w];
    inputs.extend(bias);
    tape.push(out, &inputs, Conv { geom })
}

fn check_kernel(tape_shape: &[usize], want: [usize; 3], what: &str) -> Result<()> {
    let k = &tape_shape[2..];
    let ok = k.len() == 3 && k.iter().zip(want).all(|(&a, b)| b == 0 || a == b);
    if !ok {
        return dim_err(format!("{what}: unexpected kernel bank shape {tape_shape:?}"));
    }
    Ok(())
}

/// 1×k×k convolution applied independently to every depth slice.
pub fn conv_inplane<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
    let ws = tape.shape(w).to_vec();
    check_kernel(&ws, [1, 0, 0], "conv_inplane")?;
    if ws.len() == 5 && ws[3] != ws[4] {
        return dim_err(format!("conv_inplane: kernel must be square, got {ws:?}"));
    }
    conv3d(tape, x, w, bias, 1, Padding::Same)
}

/// k×1×1 convolution along depth only.
pub fn conv_throughplane<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
    check_kernel(tape.shape(w), [0, 1, 1], "conv_throughplane")?;
    conv3d(tape, x, w, bias, 1, Padding::Same)
}

/// 1×1×1 per-voxel channel mixing.
pub fn conv_pointwise<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
    check_kernel(tape.shape(w), [1, 1, 1], "conv_pointwise")?;
    conv3d(tape, x, w, bias, 1, Padding::Same)
}

/// Depth-wise 2D convolution of `(N, C, H, W)` maps with `(C, 1, k, k)` kernels.
pub fn dwconv2d<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let [n, c, h, wd] = match s.as_slice() {
        [n, c, h, w] => [*n, *c, *h, *w],
        _ => return dim_err(format!("dwconv2d expects (N, C, H, W), got {s:?}")),
    };
    let ws = tape.shape(w).to_vec();
    let [k1, k2] = match ws.as_slice() {
        [cw, 1, k1, k2] if *cw == c => [*k1, *k2],
        _ => return dim_err(format!("dwconv2d: kernel bank {ws:?} does not match {c} channels")),
    };
    let x5 = tape.reshape(x, &[n, c, 1, h, wd])?;
    let w5 = tape.reshape(w, &[c, 1, 1, k1, k2])?;
    let y = conv3d(tape, x5, w5, bias, c, Padding::Same)?;
    tape.reshape(y, &[n, c, h, wd])
}

/// Depth-wise 1D convolution of `(N, C, D)` sequences with `(C, 1, k)` kernels.
pub fn dwconv1d<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let [n, c, d] = match s.as_slice() {
        [n, c, d] => [*n, *c, *d],
        _ => return dim_err(format!("dwconv1d expects (N, C, D), got {s:?}")),
    };
    let ws = tape.shape(w).to_vec();
    let k = match ws.as_slice() {
        [cw, 1, k] if *cw == c => *k,
        _ => return dim_err(format!("dwconv1d: kernel bank {ws:?} does not match {c} channels")),
    };
    let x5 = tape.reshape(x, &[n, c, d, 1, 1])?;
    let w5 = tape.reshape(w, &[c, 1, k, 1, 1])?;
    let y = conv3d(tape, x5, w5, bias, c, Padding::Same)?;
    tape.reshape(y, &[n, c, d])
}

/// Mean over depth: `(N, C, D, H, W) -> (N, C, H, W)`.
pub fn gap_through<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    five(tape.shape(x))?;
    tape.mean_axes(x, &[2], false)
}

/// Mean over the transverse plane: `(N, C, D, H, W) -> (N, C, D)`.
pub fn gap_inplane<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    five(tape.shape(x))?;
    tape.mean_axes(x, &[3, 4], false)
}

struct MaxPool {
    argmax: Vec<usize>,
    in_len: usize,
}

impl<T: Real> BackwardOp<T> for MaxPool {
    fn kind(&self) -> &'static str {
        "maxpool"
    }

    fn backward(&self, _ctx: &BackwardCtx<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let mut gx = vec![T::zero(); self.in_len];
        for (&src, &gv) in self.argmax.iter().zip(g) {
            gx[src] += gv;
        }
        vec![Some(gx)]
    }
}

/// 2×2 transverse max-pooling; depth untouched. Ties go to the first index in
/// row-major window order.
pub fn maxpool_inplane<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let [n, c, d, h, w] = five(tape.shape(x))?;
    if h % 2 != 0 || w % 2 != 0 {
        return dim_err(format!("maxpool_inplane needs even H and W, got {h}x{w}"));
    }
    let (ho, wo) = (h / 2, w / 2);
    let xd = tape.value(x).data();
    let planes = n * c * d;
    let mut out = vec![T::zero(); planes * ho * wo];
    let mut argmax = vec![0usize; out.len()];
    out.par_chunks_mut(ho * wo)
        .zip(argmax.par_chunks_mut(ho * wo))
        .enumerate()
        .for_each(|(p, (o, am))| {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let at = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[at] > xd[best] {
                            best = at;
                        }
                    }
                    o[oy * wo + ox] = xd[best];
                    am[oy * wo + ox] = best;
                }
            }
        });
    let out = Tensor::new(&[n, c, d, ho, wo], out)?;
    let in_len = xd.len();
    tape.push(out, &[x], MaxPool { argmax, in_len })
}

struct Resize {
    outer: usize,
    len_in: usize,
    len_out: usize,
    inner: usize,
}

/// Align-corners sample position: output `i` reads input `i·(L_in−1)/(L_out−1)`.
fn lerp_taps(len_in: usize, len_out: usize, i: usize) -> (usize, usize, f64) {
    if len_out == 1 || len_in == 1 {
        return (0, 0, 0.0);
    }
    let pos = (i * (len_in - 1)) as f64 / (len_out - 1) as f64;
    let i0 = (pos.floor() as usize).min(len_in - 1);
    let i1 = (i0 + 1).min(len_in - 1);
    (i0, i1, pos - i0 as f64)
}

impl<T: Real> BackwardOp<T> for Resize {
    fn kind(&self) -> &'static str {
        "interpolate"
    }

    fn backward(&self, _ctx: &BackwardCtx<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let (li, lo, inner) = (self.len_in, self.len_out, self.inner);
        let mut gx = vec![T::zero(); self.outer * li * inner];
        gx.par_chunks_mut(li * inner).enumerate().for_each(|(o, gxo)| {
            let go = &g[o * lo * inner..(o + 1) * lo * inner];
            for i in 0..lo {
                let (i0, i1, f) = lerp_taps(li, lo, i);
                let (w0, w1) = (T::of(1.0 - f), T::of(f));
                for k in 0..inner {
                    let v = go[i * inner + k];
                    gxo[i0 * inner + k] += w0 * v;
                    gxo[i1 * inner + k] += w1 * v;
                }
            }
        });
        vec![Some(gx)]
    }
}

/// Linear interpolation along one axis with the align-corners convention.
pub fn resize_axis<T: Real>(tape: &mut Tape<T>, x: Var, axis: usize, len_out: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if axis >= s.len() || len_out == 0 {
        return dim_err(format!("resize_axis: axis {axis} / length {len_out} invalid for {s:?}"));
    }
    let outer: usize = s[..axis].iter().product();
    let len_in = s[axis];
    let inner: usize = s[axis + 1..].iter().product();
    let xd = tape.value(x).data();
    let mut out = vec![T::zero(); outer * len_out * inner];
    out.par_chunks_mut(len_out * inner).enumerate().for_each(|(o, oo)| {
        let xo = &xd[o * len_in * inner..(o + 1) * len_in * inner];
        for i in 0..len_out {
            let (i0, i1, f) = lerp_taps(len_in, len_out, i);
            let (w0, w1) = (T::of(1.0 - f), T::of(f));
            for k in 0..inner {
                oo[i * inner + k] = w0 * xo[i0 * inner + k] + w1 * xo[i1 * inner + k];
            }
        }
    });
    let mut shape = s;
    shape[axis] = len_out;
    let out = Tensor::new(&shape, out)?;
    tape.push(out, &[x], Resize { outer, len_in, len_out, inner })
}

/// Depth-invariant bilinear (align-corners) upsampling of the transverse plane.
pub fn upsample_transverse<T: Real>(tape: &mut Tape<T>, x: Var, factor: usize) -> Result<Var> {
    let [_, _, _, h, w] = five(tape.shape(x))?;
    if factor == 0 {
        return Err(Error::Contract("upsample factor must be positive".into()));
    }
    let y = resize_axis(tape, x, 3, h * factor)?;
    resize_axis(tape, y, 4, w * factor)
}

/// Output depth for a longitudinal scale factor `r`.
pub fn depth_out(d: usize, r: f64) -> Result<usize> {
    if !(r.is_finite() && r >= 1.0) {
        return Err(Error::Contract(format!("depth scale factor must be >= 1, got {r}")));
    }
    let out = (r * d as f64).round() as usize;
    if out < d {
        return Err(Error::Contract(format!("round({r}·{d}) = {out} < {d}")));
    }
    Ok(out)
}

/// Linear (align-corners) interpolation along depth to `round(r·D)` slices.
pub fn upsample_depth<T: Real>(tape: &mut Tape<T>, x: Var, r: f64) -> Result<Var> {
    let [_, _, d, _, _] = five(tape.shape(x))?;
    let out = depth_out(d, r)?;
    resize_axis(tape, x, 2, out)
}

/// A convolution with its own weight and bias parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub ci: usize,
    pub co: usize,
    pub kernel: [usize; 3],
    pub groups: usize,
}

impl ConvLayer {
    /// Registers `<name>.weight` (He-uniform) and `<name>.bias` (zeros).
    pub fn new(
        init: &mut Init,
        name: &str,
        ci: usize,
        co: usize,
        kernel: [usize; 3],
        groups: usize,
    ) -> Result<Self> {
        if groups == 0 || ci % groups != 0 || co % groups != 0 {
            return Err(Error::Config(format!("{name}: {ci}->{co} not divisible by {groups} groups")));
        }
        let fan_in = ci / groups * kernel.iter().product::<usize>();
        let weight = init.kaiming_uniform(
            &format!("{name}.weight"),
            &[co, ci / groups, kernel[0], kernel[1], kernel[2]],
            fan_in,
        )?;
        let bias = Some(init.zeros(&format!("{name}.bias"), &[co])?);
        Ok(Self { name: name.to_string(), weight, bias, ci, co, kernel, groups })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let w = p.var(self.weight);
        let b = self.bias.map(|b| p.var(b));
        tape.scoped(&self.name, |tp| conv3d(tp, x, w, b, self.groups, Padding::Same))
    }

    pub fn weight_count(&self) -> usize {
        self.co * self.ci / self.groups * self.kernel.iter().product::<usize>()
    }

    pub fn bias_count(&self) -> usize {
        if self.bias.is_some() {
            self.co
        } else {
            0
        }
    }

    /// Analytic MACs for an input of shape `(N, C_i, D, H, W)`.
    pub fn macs(&self, n: usize, dhw: [usize; 3]) -> u64 {
        (n * self.co * (self.ci / self.groups) * self.kernel.iter().product::<usize>() * dhw.iter().product::<usize>())
            as u64
    }

    /// Label under which the op counter files this layer's MACs.
    pub fn label(&self) -> String {
        format!("{}:conv", self.name)
    }
}

#[cfg(test)]
mod tests;
