//! Differentiable operations over [`Tape`] values.

use rayon::prelude::*;

use crate::error::{dim_err, Error, Result};
use crate::real::Real;

use super::array::{for_each_broadcast, Tensor};
use super::tape::{BackwardCtx, BackwardOp, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Square,
    Sqrt,
    Abs,
    Exp,
    Recip,
    /// Gaussian-error linear unit, `x·Φ(x)`.
    Gelu,
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
fn gelu<T: Real>(x: T) -> T {
    x * T::of(0.5) * (T::one() + (x * T::of(INV_SQRT_2)).erf())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (x * T::of(INV_SQRT_2)).erf());
    let pdf = T::of(INV_SQRT_2PI) * (-(x * x) * T::of(0.5)).exp();
    cdf + x * pdf
}

struct Binary(BinaryKind);

impl<T: Real> BackwardOp<T> for Binary {
    fn kind(&self) -> &'static str {
        match self.0 {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let a = ctx.inputs[0].data();
        let b = ctx.inputs[1].data();
        let (ga, gb) = match self.0 {
            BinaryKind::Add => (g.to_vec(), g.to_vec()),
            BinaryKind::Sub => (g.to_vec(), g.iter().map(|&v| -v).collect()),
            BinaryKind::Mul => (
                g.iter().zip(b).map(|(&g, &b)| g * b).collect(),
                g.iter().zip(a).map(|(&g, &a)| g * a).collect(),
            ),
            BinaryKind::Div => (
                g.iter().zip(b).map(|(&g, &b)| g / b).collect(),
                g.iter()
                    .zip(a.iter().zip(b))
                    .map(|(&g, (&a, &b))| -g * a / (b * b))
                    .collect(),
            ),
        };
        vec![ctx.needs[0].then_some(ga), ctx.needs[1].then_some(gb)]
    }
}

struct Unary(UnaryKind);

impl<T: Real> BackwardOp<T> for Unary {
    fn kind(&self) -> &'static str {
        match self.0 {
            UnaryKind::Square => "square",
            UnaryKind::Sqrt => "sqrt",
            UnaryKind::Abs => "abs",
            UnaryKind::Exp => "exp",
            UnaryKind::Recip => "recip",
            UnaryKind::Gelu => "gelu",
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let x = ctx.inputs[0].data();
        let y = ctx.output.data();
        let two = T::of(2.0);
        let out = g
            .iter()
            .zip(x.iter().zip(y))
            .map(|(&g, (&x, &y))| {
                g * match self.0 {
                    UnaryKind::Square => two * x,
                    UnaryKind::Sqrt => T::one() / (two * y),
                    UnaryKind::Abs => x.signum() * (if x == T::zero() { T::zero() } else { T::one() }),
                    UnaryKind::Exp => y,
                    UnaryKind::Recip => -y * y,
                    UnaryKind::Gelu => gelu_grad(x),
                }
            })
            .collect();
        vec![Some(out)]
    }
}

/// `y = scale·x + shift`.
struct Affine<T> {
    scale: T,
}

impl<T: Real> BackwardOp<T> for Affine<T> {
    fn kind(&self) -> &'static str {
        "affine"
    }

    fn backward(&self, _ctx: &BackwardCtx<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.iter().map(|&v| v * self.scale).collect())]
    }
}

struct Broadcast {
    kind: BinaryKind,
}

impl<T: Real> BackwardOp<T> for Broadcast {
    fn kind(&self) -> &'static str {
        "broadcast"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let a = ctx.inputs[0];
        let b = ctx.inputs[1];
        let (ad, bd) = (a.data(), b.data());
        let mut ga = ctx.needs[0].then(|| vec![T::zero(); ad.len()]);
        let mut gb = ctx.needs[1].then(|| vec![T::zero(); bd.len()]);
        for_each_broadcast(a.shape(), b.shape(), |i, o| {
            let (da, db) = match self.kind {
                BinaryKind::Add => (g[i], g[i]),
                BinaryKind::Sub => (g[i], -g[i]),
                BinaryKind::Mul => (g[i] * bd[o], g[i] * ad[i]),
                BinaryKind::Div => (g[i] / bd[o], -g[i] * ad[i] / (bd[o] * bd[o])),
            };
            if let Some(ga) = ga.as_mut() {
                ga[i] += da;
            }
            if let Some(gb) = gb.as_mut() {
                gb[o] += db;
            }
        });
        vec![ga, gb]
    }
}

/// Reduction onto a same-rank shape with 1 at reduced axes.
struct Reduce<T> {
    full_shape: Vec<usize>,
    reduced_shape: Vec<usize>,
    factor: T,
}

impl<T: Real> BackwardOp<T> for Reduce<T> {
    fn kind(&self) -> &'static str {
        "reduce"
    }

    fn backward(&self, _ctx: &BackwardCtx<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let n: usize = self.full_shape.iter().product();
        let mut out = vec![T::zero(); n];
        for_each_broadcast(&self.full_shape, &self.reduced_shape, |i, o| {
            out[i] = g[o] * self.factor;
        });
        vec![Some(out)]
    }
}

struct Reshape;

impl<T: Real> BackwardOp<T> for Reshape {
    fn kind(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, _ctx: &BackwardCtx<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.to_vec())]
    }
}

struct Transpose {
    batch: usize,
    rows: usize,
    cols: usize,
}

fn transpose_batched<T: Copy + Default>(x: &[T], batch: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::default(); x.len()];
    for b in 0..batch {
        let src = &x[b * rows * cols..(b + 1) * rows * cols];
        let dst = &mut out[b * rows * cols..(b + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

impl<T: Real> BackwardOp<T> for Transpose {
    fn kind(&self) -> &'static str {
        "transpose"
    }

    fn backward(&self, _ctx: &BackwardCtx<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(transpose_batched(g, self.batch, self.cols, self.rows))]
    }
}

struct MatMul {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Real> BackwardOp<T> for MatMul {
    fn kind(&self) -> &'static str {
        "matmul"
    }

    fn macs(&self) -> u64 {
        (self.batch * self.m * self.k * self.n) as u64
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let a = ctx.inputs[0].data();
        let b = ctx.inputs[1].data();
        // dA = G·Bᵀ
        let ga = ctx.needs[0].then(|| {
            let mut ga = vec![T::zero(); a.len()];
            ga.par_chunks_mut(k).enumerate().for_each(|(row, out)| {
                let bi = row / m;
                let grow = &g[row * n..(row + 1) * n];
                let bm = &b[bi * k * n..(bi + 1) * k * n];
                for (p, o) in out.iter_mut().enumerate() {
                    let brow = &bm[p * n..(p + 1) * n];
                    *o = grow.iter().zip(brow).fold(T::zero(), |s, (&x, &y)| s + x * y);
                }
            });
            ga
        });
        // dB = Aᵀ·G
        let gb = ctx.needs[1].then(|| {
            let mut gb = vec![T::zero(); b.len()];
            gb.par_chunks_mut(n).enumerate().for_each(|(row, out)| {
                let (bi, p) = (row / k, row % k);
                for i in 0..m {
                    let av = a[bi * m * k + i * k + p];
                    let grow = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
                    out.iter_mut().zip(grow).for_each(|(o, &x)| *o += av * x);
                }
            });
            gb
        });
        vec![ga, gb]
    }
}

struct Softmax {
    outer: usize,
    len: usize,
    inner: usize,
}

impl<T: Real> BackwardOp<T> for Softmax {
    fn kind(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let y = ctx.output.data();
        let mut out = vec![T::zero(); y.len()];
        for o in 0..self.outer {
            for i in 0..self.inner {
                let base = o * self.len * self.inner + i;
                let dot = (0..self.len)
                    .map(|l| g[base + l * self.inner] * y[base + l * self.inner])
                    .fold(T::zero(), |s, v| s + v);
                for l in 0..self.len {
                    let at = base + l * self.inner;
                    out[at] = y[at] * (g[at] - dot);
                }
            }
        }
        vec![Some(out)]
    }
}

fn same_shape<T: Real>(tape: &Tape<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return dim_err(format!(
            "{what}: shapes {:?} and {:?} differ",
            tape.shape(a),
            tape.shape(b)
        ));
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        same_shape(self, a, b, "elementwise op")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data: Vec<T> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
            })
            .collect();
        let out = Tensor::new(av.shape(), data)?;
        self.push(out, &[a, b], Binary(kind))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Div)
    }

    pub fn unary(&mut self, a: Var, kind: UnaryKind) -> Result<Var> {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .map(|&x| match kind {
                UnaryKind::Square => x * x,
                UnaryKind::Sqrt => x.sqrt(),
                UnaryKind::Abs => x.abs(),
                UnaryKind::Exp => x.exp(),
                UnaryKind::Recip => T::one() / x,
                UnaryKind::Gelu => gelu(x),
            })
            .collect();
        let out = Tensor::new(av.shape(), data)?;
        self.push(out, &[a], Unary(kind))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Square)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Sqrt)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Abs)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Gelu)
    }

    /// `scale·a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let (s, t) = (T::of(scale), T::of(shift));
        let av = self.value(a);
        let out = Tensor::new(av.shape(), av.data().iter().map(|&x| x * s + t).collect())?;
        self.push(out, &[a], Affine { scale: s })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.affine(a, s, 0.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.affine(a, 1.0, s)
    }

    /// Combines `a` with `b`, where `b` has the same rank as `a` and extent 1
    /// exactly on the listed `axes`. Broadcasting is never inferred.
    pub fn broadcast(&mut self, a: Var, b: Var, axes: &[usize], kind: BinaryKind) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != sb.len() {
            return dim_err(format!("broadcast: rank of {sb:?} differs from {sa:?}"));
        }
        for ax in 0..sa.len() {
            let expanded = axes.contains(&ax);
            let ok = if expanded { sb[ax] == 1 } else { sb[ax] == sa[ax] };
            if !ok {
                return dim_err(format!(
                    "broadcast: {sb:?} cannot expand to {sa:?} over axes {axes:?}"
                ));
            }
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![T::zero(); ad.len()];
        for_each_broadcast(&sa, &sb, |i, o| {
            data[i] = match kind {
                BinaryKind::Add => ad[i] + bd[o],
                BinaryKind::Sub => ad[i] - bd[o],
                BinaryKind::Mul => ad[i] * bd[o],
                BinaryKind::Div => ad[i] / bd[o],
            };
        });
        let out = Tensor::new(&sa, data)?;
        self.push(out, &[a, b], Broadcast { kind })
    }

    pub fn broadcast_add(&mut self, a: Var, b: Var, axes: &[usize]) -> Result<Var> {
        self.broadcast(a, b, axes, BinaryKind::Add)
    }

    fn reduce(&mut self, a: Var, axes: &[usize], keepdim: bool, mean: bool) -> Result<Var> {
        let full = self.shape(a).to_vec();
        if axes.iter().any(|&ax| ax >= full.len()) {
            return dim_err(format!("reduce: axes {axes:?} out of range for {full:?}"));
        }
        let reduced: Vec<usize> = full
            .iter()
            .enumerate()
            .map(|(i, &e)| if axes.contains(&i) { 1 } else { e })
            .collect();
        let count: usize = axes.iter().map(|&ax| full[ax]).product();
        let factor = if mean { T::one() / T::of(count as f64) } else { T::one() };
        let ad = self.value(a).data();
        let n: usize = reduced.iter().product();
        let mut acc = vec![T::zero(); n];
        for_each_broadcast(&full, &reduced, |i, o| acc[o] += ad[i]);
        acc.iter_mut().for_each(|v| *v *= factor);
        let out_shape = if keepdim {
            reduced.clone()
        } else {
            let s: Vec<usize> = reduced
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &e)| e)
                .collect();
            if s.is_empty() {
                vec![1]
            } else {
                s
            }
        };
        let out = Tensor::new(&out_shape, acc)?;
        self.push(out, &[a], Reduce { full_shape: full, reduced_shape: reduced, factor })
    }

    pub fn sum_axes(&mut self, a: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(a, axes, keepdim, false)
    }

    pub fn mean_axes(&mut self, a: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(a, axes, keepdim, true)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.reduce(a, &axes, false, false)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.reduce(a, &axes, false, true)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        self.push(out, &[a], Reshape)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return dim_err(format!("transpose needs rank >= 2, got {s:?}"));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = s[..s.len() - 2].iter().product();
        let data = transpose_batched(self.value(a).data(), batch, rows, cols);
        let mut shape = s.clone();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let out = Tensor::new(&shape, data)?;
        self.push(out, &[a], Transpose { batch, rows, cols })
    }

    /// Matrix product of `[m,k]·[k,n]`, or batched `[B,m,k]·[B,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, m, k, k2, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) => (1, *m, *k, *k2, *n),
            ([ba, m, k], [bb, k2, n]) if ba == bb => (*ba, *m, *k, *k2, *n),
            _ => return dim_err(format!("matmul: unsupported shapes {sa:?} x {sb:?}")),
        };
        if k != k2 {
            return dim_err(format!("matmul: inner extents differ in {sa:?} x {sb:?}"));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![T::zero(); batch * m * n];
        out.par_chunks_mut(n).enumerate().for_each(|(row, o)| {
            let bi = row / m;
            let arow = &ad[row * k..(row + 1) * k];
            let bm = &bd[bi * k * n..(bi + 1) * k * n];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &bm[p * n..(p + 1) * n];
                o.iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
            }
        });
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let out = Tensor::new(&shape, out)?;
        self.push(out, &[a, b], MatMul { batch, m, k, n })
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::Dimension(format!("softmax axis {axis} out of range for {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let x = self.value(a).data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let max = (0..len)
                    .map(|l| x[base + l * inner])
                    .fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for l in 0..len {
                    let e = (x[base + l * inner] - max).exp();
                    y[base + l * inner] = e;
                    z += e;
                }
                for l in 0..len {
                    y[base + l * inner] /= z;
                }
            }
        }
        let out = Tensor::new(&s, y)?;
        self.push(out, &[a], Softmax { outer, len, inner })
    }
}
