//! Factorized self-attention: a transposed (channel-covariance) branch over
//! the depth-pooled plane and a token branch over the plane-pooled depth
//! sequence, fused back into the volume by broadcasting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamId};
use crate::tensor::{BinaryKind, Tape, Var};
use crate::volume_ops::{five, gap_inplane, gap_through, ConvLayer};
use crate::Real;

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnFusion {
    #[default]
    Parallel,
    Cascaded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmsmConfig {
    pub enable_inplane: bool,
    pub enable_throughplane: bool,
    pub fusion: AttnFusion,
    /// Skip the block entirely (pure residual).
    pub bypass: bool,
    /// Per-channel standardization of the branch input.
    pub pre_norm: bool,
}

impl Default for EmsmConfig {
    fn default() -> Self {
        Self {
            enable_inplane: true,
            enable_throughplane: true,
            fusion: AttnFusion::Parallel,
            bypass: false,
            pre_norm: false,
        }
    }
}

impl EmsmConfig {
    pub fn bypassed() -> Self {
        Self { bypass: true, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.bypass && !self.enable_inplane && !self.enable_throughplane {
            return Err(Error::Config(
                "attention block has both branches disabled but is not bypassed".into(),
            ));
        }
        Ok(())
    }

    /// Whether the block is a pure residual.
    pub fn is_identity(&self) -> bool {
        self.bypass || (!self.enable_inplane && !self.enable_throughplane)
    }
}

/// Q/K/V projections (pointwise then depth-wise) and the output projection.
#[derive(Clone, Debug)]
struct Branch {
    scope: String,
    qkv: [(ConvLayer, ConvLayer); 3],
    proj: ConvLayer,
    heads: usize,
}

impl Branch {
    fn new(init: &mut Init, scope: &str, c: usize, heads: usize, dw_kernel: [usize; 3]) -> Result<Self> {
        let mut mk = |tag: &str| -> Result<(ConvLayer, ConvLayer)> {
            Ok((
                ConvLayer::new(init, &format!("{scope}.{tag}.pw"), c, c, [1, 1, 1], 1)?,
                ConvLayer::new(init, &format!("{scope}.{tag}.dw"), c, c, dw_kernel, c)?,
            ))
        };
        let qkv = [mk("q")?, mk("k")?, mk("v")?];
        let proj = ConvLayer::new(init, &format!("{scope}.proj"), c, c, [1, 1, 1], 1)?;
        Ok(Self { scope: scope.to_string(), qkv, proj, heads })
    }

    fn project<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<[Var; 3]> {
        let mut out = [x; 3];
        for (o, (pw, dw)) in out.iter_mut().zip(&self.qkv) {
            let y = pw.forward(tape, p, x)?;
            *o = dw.forward(tape, p, y)?;
        }
        Ok(out)
    }

    fn layers(&self) -> Vec<&ConvLayer> {
        let mut v: Vec<&ConvLayer> = self.qkv.iter().flat_map(|(a, b)| [a, b]).collect();
        v.push(&self.proj);
        v
    }
}

/// Attention over the channel axis of the depth-pooled plane, plus a
/// token-attention over depth of the plane-pooled sequence.
#[derive(Clone, Debug)]
pub struct EmsmBlock {
    pub name: String,
    pub channels: usize,
    pub cfg: EmsmConfig,
    inplane: Option<Branch>,
    through: Option<Branch>,
    alpha: Option<ParamId>,
}

/// Attention maps produced during one forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct AttentionMaps {
    /// `(N·heads_in, C/heads_in, C/heads_in)`, rows are queries.
    pub inplane: Option<Var>,
    /// `(N·heads_th, D, D)`, rows are queries.
    pub through: Option<Var>,
}

impl EmsmBlock {
    pub fn new(
        init: &mut Init,
        name: &str,
        channels: usize,
        heads_in: usize,
        heads_th: usize,
        cfg: &EmsmConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut block = Self {
            name: name.to_string(),
            channels,
            cfg: cfg.clone(),
            inplane: None,
            through: None,
            alpha: None,
        };
        if cfg.is_identity() {
            return Ok(block);
        }
        if cfg.enable_inplane {
            check_heads(name, channels, heads_in, "in-plane")?;
            let scope = format!("{name}.inplane");
            let b = Branch::new(init, &scope, channels, heads_in, [1, 3, 3])?;
            let a0 = ((channels / heads_in) as f64).sqrt();
            block.alpha = Some(init.constant(&format!("{scope}.alpha"), &[heads_in], a0)?);
            block.inplane = Some(b);
        }
        if cfg.enable_throughplane {
            check_heads(name, channels, heads_th, "through-plane")?;
            let scope = format!("{name}.through");
            block.through = Some(Branch::new(init, &scope, channels, heads_th, [3, 1, 1])?);
        }
        Ok(block)
    }

    /// In-plane branch output, shape `(N, C, 1, H, W)`.
    pub fn inplane<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Option<Var>> {
        self.inplane_with_map(tape, p, x).map(|o| o.map(|(y, _)| y))
    }

    /// Through-plane branch output, shape `(N, C, D, 1, 1)`.
    pub fn throughplane<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Option<Var>> {
        self.through_with_map(tape, p, x).map(|o| o.map(|(y, _)| y))
    }

    fn inplane_with_map<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
    ) -> Result<Option<(Var, Var)>> {
        let Some(b) = &self.inplane else { return Ok(None) };
        let [n, c, _, h, w] = self.check_input(tape, x)?;
        let x = self.maybe_norm(tape, x)?;
        let pooled = gap_through(tape, x)?;
        let pooled = tape.reshape(pooled, &[n, c, 1, h, w])?;
        let [q, k, v] = b.project(tape, p, pooled)?;
        let heads = b.heads;
        let ch = c / heads;
        let rows = [n * heads, ch, h * w];
        let q = tape.reshape(q, &rows)?;
        let k = tape.reshape(k, &rows)?;
        let v = tape.reshape(v, &rows)?;
        let kt = tape.transpose(k)?;
        let logits = tape.scoped(&format!("{}.attn", b.scope), |tp| tp.matmul(q, kt))?;
        let logits = tape.reshape(logits, &[n, heads, ch, ch])?;
        let alpha = p.var(self.alpha.expect("alpha exists with the in-plane branch"));
        let alpha = tape.reshape(alpha, &[1, heads, 1, 1])?;
        let logits = tape.broadcast(logits, alpha, &[0, 2, 3], BinaryKind::Div)?;
        let logits = tape.reshape(logits, &[n * heads, ch, ch])?;
        let attn = tape.softmax(logits, 2)?;
        let out = tape.scoped(&format!("{}.apply", b.scope), |tp| tp.matmul(attn, v))?;
        let out = tape.reshape(out, &[n, c, 1, h, w])?;
        let out = b.proj.forward(tape, p, out)?;
        Ok(Some((out, attn)))
    }

    fn through_with_map<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
    ) -> Result<Option<(Var, Var)>> {
        let Some(b) = &self.through else { return Ok(None) };
        let [n, c, d, _, _] = self.check_input(tape, x)?;
        let x = self.maybe_norm(tape, x)?;
        let pooled = gap_inplane(tape, x)?;
        let pooled = tape.reshape(pooled, &[n, c, d, 1, 1])?;
        let [q, k, v] = b.project(tape, p, pooled)?;
        let heads = b.heads;
        let rows = [n * heads, c / heads, d];
        let q = tape.reshape(q, &rows)?;
        let k = tape.reshape(k, &rows)?;
        let v = tape.reshape(v, &rows)?;
        let qt = tape.transpose(q)?;
        let logits = tape.scoped(&format!("{}.attn", b.scope), |tp| tp.matmul(qt, k))?;
        let logits = tape.scale(logits, 1.0 / (d as f64).sqrt())?;
        let attn = tape.softmax(logits, 2)?;
        let at = tape.transpose(attn)?;
        let out = tape.scoped(&format!("{}.apply", b.scope), |tp| tp.matmul(v, at))?;
        let out = tape.reshape(out, &[n, c, d, 1, 1])?;
        let out = b.proj.forward(tape, p, out)?;
        Ok(Some((out, attn)))
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        self.forward_with_maps(tape, p, x).map(|(y, _)| y)
    }

    pub fn forward_with_maps<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
    ) -> Result<(Var, AttentionMaps)> {
        let mut maps = AttentionMaps::default();
        if self.cfg.is_identity() {
            self.check_input(tape, x)?;
            return Ok((x, maps));
        }
        let cascaded = self.cfg.fusion == AttnFusion::Cascaded;
        let mut y = x;
        if let Some((a, m)) = self.inplane_with_map(tape, p, x)? {
            maps.inplane = Some(m);
            y = tape.broadcast_add(y, a, &[2])?;
        }
        let src = if cascaded { y } else { x };
        if let Some((t, m)) = self.through_with_map(tape, p, src)? {
            maps.through = Some(m);
            y = tape.broadcast_add(y, t, &[3, 4])?;
        }
        Ok((y, maps))
    }

    fn check_input<T: Real>(&self, tape: &Tape<T>, x: Var) -> Result<[usize; 5]> {
        let s = five(tape.shape(x))?;
        if s[1] != self.channels {
            return Err(Error::Dimension(format!(
                "{}: expected {} channels, got {:?}",
                self.name, self.channels, s
            )));
        }
        Ok(s)
    }

    fn maybe_norm<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        if self.cfg.pre_norm {
            standardize(tape, x)
        } else {
            Ok(x)
        }
    }

    pub fn conv_layers(&self) -> Vec<&ConvLayer> {
        self.inplane.iter().chain(&self.through).flat_map(Branch::layers).collect()
    }

    pub fn alpha(&self) -> Option<ParamId> {
        self.alpha
    }

    pub fn heads(&self) -> (Option<usize>, Option<usize>) {
        (self.inplane.as_ref().map(|b| b.heads), self.through.as_ref().map(|b| b.heads))
    }

    pub fn param_count(&self) -> usize {
        let convs: usize = self.conv_layers().iter().map(|l| l.weight_count() + l.bias_count()).sum();
        convs + self.inplane.as_ref().map_or(0, |b| b.heads)
    }

    /// MACs spent building the attention maps (the logits products).
    pub fn attention_map_macs(&self, n: usize, dhw: [usize; 3]) -> u64 {
        let [d, h, w] = dhw;
        let c = self.channels;
        let mut total = 0;
        if let Some(b) = &self.inplane {
            total += n * c * (c / b.heads) * h * w;
        }
        if self.through.is_some() {
            total += n * c * d * d;
        }
        total as u64
    }

    /// Analytic MACs per op-counter label for input `(n, C, d, h, w)`.
    pub fn analytic_macs(&self, n: usize, dhw: [usize; 3]) -> BTreeMap<String, u64> {
        let [d, h, w] = dhw;
        let c = self.channels;
        let mut m = BTreeMap::new();
        if let Some(b) = &self.inplane {
            for l in b.layers() {
                m.insert(l.label(), l.macs(n, [1, h, w]));
            }
            let prod = (n * c * (c / b.heads) * h * w) as u64;
            m.insert(format!("{}.attn:matmul", b.scope), prod);
            m.insert(format!("{}.apply:matmul", b.scope), prod);
        }
        if let Some(b) = &self.through {
            for l in b.layers() {
                m.insert(l.label(), l.macs(n, [d, 1, 1]));
            }
            let prod = (n * c * d * d) as u64;
            m.insert(format!("{}.attn:matmul", b.scope), prod);
            m.insert(format!("{}.apply:matmul", b.scope), prod);
        }
        m
    }
}

fn check_heads(name: &str, c: usize, heads: usize, which: &str) -> Result<()> {
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("{name}: {which} heads {heads} do not divide {c} channels")));
    }
    Ok(())
}

/// Zero-mean, unit-variance per `(n, c)` over depth and plane.
pub fn standardize<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let axes = [2, 3, 4];
    let mu = tape.mean_axes(x, &axes, true)?;
    let centered = tape.broadcast(x, mu, &axes, BinaryKind::Sub)?;
    let sq = tape.square(centered)?;
    let var = tape.mean_axes(sq, &axes, true)?;
    let var = tape.add_scalar(var, NORM_EPS)?;
    let sd = tape.sqrt(var)?;
    tape.broadcast(centered, sd, &axes, BinaryKind::Div)
}

/// Attention-map MACs of an unfactorized 3D self-attention over all voxels.
pub fn full_3d_attention_macs(c: usize, dhw: [usize; 3]) -> u128 {
    let t = dhw.iter().product::<usize>() as u128;
    t * t * c as u128
}

#[cfg(test)]
mod tests;
