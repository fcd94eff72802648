//! Training losses (on the tape) and evaluation metrics (plain f64).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::volume_ops::{conv3d, five, Padding};
use crate::Real;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Reported in place of an infinite PSNR.
pub const PSNR_CAP: f64 = 100.0;

const C1: f64 = SSIM_K1 * SSIM_K1;
const C2: f64 = SSIM_K2 * SSIM_K2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Charbonnier,
    L1,
    Mse,
    Ssim,
    #[default]
    CharbonnierPlusSsim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub epsilon: f64,
    pub lambda: f64,
    pub mode: LossMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { epsilon: 1e-3, lambda: 2.0, mode: LossMode::CharbonnierPlusSsim }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "loss needs epsilon > 0 and lambda >= 0, got {} and {}",
                self.epsilon, self.lambda
            )));
        }
        Ok(())
    }
}

/// Scalar loss and its components.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub charbonnier: Option<Var>,
    pub ssim: Option<Var>,
}

fn same_shape<T: Real>(tape: &Tape<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Dimension(format!(
            "{what}: prediction {:?} vs target {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

/// `sqrt(‖p − t‖² + ε²)` per batch item, averaged over the batch.
pub fn charbonnier<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var, eps: f64) -> Result<Var> {
    same_shape(tape, pred, target, "charbonnier")?;
    let rank = tape.shape(pred).len();
    let d = tape.sub(pred, target)?;
    let sq = tape.square(d)?;
    let axes: Vec<usize> = (1..rank).collect();
    let per_item = if axes.is_empty() { sq } else { tape.sum_axes(sq, &axes, false)? };
    let shifted = tape.add_scalar(per_item, eps * eps)?;
    let r = tape.sqrt(shifted)?;
    tape.mean(r)
}

pub fn l1<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    same_shape(tape, pred, target, "l1")?;
    let d = tape.sub(pred, target)?;
    let a = tape.abs(d)?;
    tape.mean(a)
}

pub fn mse<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    same_shape(tape, pred, target, "mse")?;
    let d = tape.sub(pred, target)?;
    let s = tape.square(d)?;
    tape.mean(s)
}

/// Largest odd length not exceeding `min(SSIM_WINDOW, extent)`.
pub fn window_len(extent: usize) -> usize {
    let k = SSIM_WINDOW.min(extent).max(1);
    if k % 2 == 0 {
        k - 1
    } else {
        k
    }
}

/// Normalized 1D Gaussian taps.
pub fn gaussian(len: usize, sigma: f64) -> Vec<f64> {
    let c = (len as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..len).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid separable Gaussian filtering of `(M, 1, 1, H, W)`.
fn filter_plane<T: Real>(tape: &mut Tape<T>, x: Var, wy: &[f64], wx: &[f64]) -> Result<Var> {
    let kx = tape.constant(Tensor::from_f64(&[1, 1, 1, 1, wx.len()], wx)?);
    let ky = tape.constant(Tensor::from_f64(&[1, 1, 1, wy.len(), 1], wy)?);
    let y = conv3d(tape, x, kx, None, 1, Padding::Valid)?;
    conv3d(tape, y, ky, None, 1, Padding::Valid)
}

/// `1 − mean` of the per-slice SSIM maps over every `(n, c, d)` slice.
pub fn ssim_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    same_shape(tape, pred, target, "ssim_loss")?;
    let [n, c, d, h, w] = five(tape.shape(pred))?;
    let (wy, wx) = (gaussian(window_len(h), SSIM_SIGMA), gaussian(window_len(w), SSIM_SIGMA));
    tape.scoped("loss.ssim", |tp| {
        let planes = [n * c * d, 1, 1, h, w];
        let x = tp.reshape(pred, &planes)?;
        let y = tp.reshape(target, &planes)?;
        let xx = tp.mul(x, x)?;
        let yy = tp.mul(y, y)?;
        let xy = tp.mul(x, y)?;
        let mx = filter_plane(tp, x, &wy, &wx)?;
        let my = filter_plane(tp, y, &wy, &wx)?;
        let exx = filter_plane(tp, xx, &wy, &wx)?;
        let eyy = filter_plane(tp, yy, &wy, &wx)?;
        let exy = filter_plane(tp, xy, &wy, &wx)?;
        let mx2 = tp.mul(mx, mx)?;
        let my2 = tp.mul(my, my)?;
        let mxy = tp.mul(mx, my)?;
        let sx = tp.sub(exx, mx2)?;
        let sy = tp.sub(eyy, my2)?;
        let sxy = tp.sub(exy, mxy)?;
        let a = tp.affine(mxy, 2.0, C1)?;
        let b = tp.affine(sxy, 2.0, C2)?;
        let num = tp.mul(a, b)?;
        let m2 = tp.add(mx2, my2)?;
        let s2 = tp.add(sx, sy)?;
        let da = tp.add_scalar(m2, C1)?;
        let db = tp.add_scalar(s2, C2)?;
        let den = tp.mul(da, db)?;
        let map = tp.div(num, den)?;
        let m = tp.mean(map)?;
        tp.affine(m, -1.0, 1.0)
    })
}

pub fn total_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var, cfg: &LossConfig) -> Result<LossParts> {
    cfg.validate()?;
    let parts = match cfg.mode {
        LossMode::Charbonnier => {
            let c = charbonnier(tape, pred, target, cfg.epsilon)?;
            LossParts { total: c, charbonnier: Some(c), ssim: None }
        }
        LossMode::L1 => LossParts { total: l1(tape, pred, target)?, charbonnier: None, ssim: None },
        LossMode::Mse => LossParts { total: mse(tape, pred, target)?, charbonnier: None, ssim: None },
        LossMode::Ssim => {
            let s = ssim_loss(tape, pred, target)?;
            LossParts { total: s, charbonnier: None, ssim: Some(s) }
        }
        LossMode::CharbonnierPlusSsim => {
            let c = charbonnier(tape, pred, target, cfg.epsilon)?;
            let s = ssim_loss(tape, pred, target)?;
            let ws = tape.scale(s, cfg.lambda)?;
            LossParts { total: tape.add(c, ws)?, charbonnier: Some(c), ssim: Some(s) }
        }
    };
    Ok(parts)
}

/// Valid correlation of a row-major grid with one 1D kernel along `axis`.
fn filter_axis(x: &[f64], shape: &[usize], axis: usize, k: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut out_shape = shape.to_vec();
    out_shape[axis] = shape[axis] + 1 - k.len();
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let (len_in, len_out) = (shape[axis], out_shape[axis]);
    let mut out = vec![0.0; outer * len_out * inner];
    for o in 0..outer {
        for i in 0..len_out {
            for (t, &kv) in k.iter().enumerate() {
                let src = &x[(o * len_in + i + t) * inner..][..inner];
                let dst = &mut out[(o * len_out + i) * inner..][..inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += kv * s);
            }
        }
    }
    (out, out_shape)
}

/// Mean SSIM over a grid using a separable Gaussian window on every axis.
fn ssim_nd(a: &[f64], b: &[f64], shape: &[usize]) -> f64 {
    let filt = |v: &[f64]| {
        let (mut cur, mut s) = (v.to_vec(), shape.to_vec());
        for ax in 0..shape.len() {
            let k = gaussian(window_len(shape[ax]), SSIM_SIGMA);
            let (nx, ns) = filter_axis(&cur, &s, ax, &k);
            cur = nx;
            s = ns;
        }
        cur
    };
    let prod = |f: fn(f64, f64) -> f64| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<f64>>();
    let mx = filt(a);
    let my = filt(b);
    let exx = filt(&prod(|x, _| x * x));
    let eyy = filt(&prod(|_, y| y * y));
    let exy = filt(&prod(|x, y| x * y));
    let n = mx.len();
    let mut acc = 0.0;
    for i in 0..n {
        let (ux, uy) = (mx[i], my[i]);
        let sx = exx[i] - ux * ux;
        let sy = eyy[i] - uy * uy;
        let sxy = exy[i] - ux * uy;
        acc += ((2.0 * ux * uy + C1) * (2.0 * sxy + C2)) / ((ux * ux + uy * uy + C1) * (sx + sy + C2));
    }
    acc / n as f64
}

fn check_len(a: &[f64], b: &[f64], n: usize, what: &str) -> Result<()> {
    if a.len() != n || b.len() != n {
        return Err(Error::Dimension(format!("{what}: lengths {} and {} for {n} elements", a.len(), b.len())));
    }
    Ok(())
}

/// Mean local SSIM of two `h × w` images on a unit data range.
pub fn ssim_2d(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    check_len(a, b, h * w, "ssim_2d")?;
    Ok(ssim_nd(a, b, &[h, w]))
}

/// Slice-averaged 2D SSIM of two `d × h × w` volumes.
pub fn ssim_2d_slices(a: &[f64], b: &[f64], dhw: [usize; 3]) -> Result<f64> {
    let [d, h, w] = dhw;
    check_len(a, b, d * h * w, "ssim_2d_slices")?;
    let plane = h * w;
    let total: f64 = (0..d).map(|z| ssim_nd(&a[z * plane..][..plane], &b[z * plane..][..plane], &[h, w])).sum();
    Ok(total / d as f64)
}

/// SSIM with an 11×11×11 Gaussian window (clipped on short axes).
pub fn ssim_3d(a: &[f64], b: &[f64], dhw: [usize; 3]) -> Result<f64> {
    check_len(a, b, dhw.iter().product(), "ssim_3d")?;
    Ok(ssim_nd(a, b, &dhw))
}

pub fn mse_of(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Dimension(format!("mse: lengths {} and {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    mse_of(a, b).map(f64::sqrt)
}

/// `10·log10(1 / mse)` on a unit data range, capped at [`PSNR_CAP`].
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64> {
    let m = mse_of(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

/// Quality of one restored volume against its reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub id: String,
    pub psnr: f64,
    /// Normalized units; multiply by 100 for the usual table scale.
    pub rmse: f64,
    pub ssim2d: f64,
    pub ssim3d: f64,
}

impl MetricReport {
    pub fn evaluate(id: &str, pred: &[f64], target: &[f64], dhw: [usize; 3]) -> Result<Self> {
        Ok(Self {
            id: id.to_string(),
            psnr: psnr(pred, target)?,
            rmse: rmse(pred, target)?,
            ssim2d: ssim_2d_slices(pred, target, dhw)?,
            ssim3d: ssim_3d(pred, target, dhw)?,
        })
    }

    pub fn rmse_e2(&self) -> f64 {
        self.rmse * 100.0
    }

    /// Field-wise mean, labelled `id`.
    pub fn mean(id: &str, reports: &[MetricReport]) -> Option<Self> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(Self {
            id: id.to_string(),
            psnr: avg(|r| r.psnr),
            rmse: avg(|r| r.rmse),
            ssim2d: avg(|r| r.ssim2d),
            ssim3d: avg(|r| r.ssim3d),
        })
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metric report serializes")
    }
}
