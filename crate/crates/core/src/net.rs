//! U-shaped encoder/decoder of attention + feed-forward blocks. Every
//! resampling inside the U is transverse; depth changes once, at the end.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ecfn::{EcfnBlock, EcfnConfig};
use crate::emsm::{EmsmBlock, EmsmConfig};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::gradcheck::{check, GradCheckReport, Probe, GRADCHECK_STEP};
use crate::tensor::{Tape, Tensor, Var};
use crate::volume_ops::{depth_out, five, maxpool_inplane, upsample_depth, upsample_transverse, ConvLayer};
use crate::Real;

/// Kernel bound `1/sqrt(fan_in)`. He-uniform (`sqrt 2`) compounds through the
/// residual sums of a norm-free U and overflows the useful range.
pub const DEFAULT_INIT_GAIN: f64 = 0.577_350_269_189_625_8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub levels: usize,
    /// In-plane head count per level, shallowest first.
    pub heads_in: Vec<usize>,
    pub heads_th: usize,
    /// Through-plane upsampling factor.
    pub r: f64,
    pub emsm: EmsmConfig,
    pub ecfn: EcfnConfig,
    /// Scale of the fan-in-uniform kernel initialization.
    pub init_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            levels: 4,
            heads_in: vec![1, 2, 4, 8],
            heads_th: 2,
            r: 2.0,
            emsm: EmsmConfig::default(),
            ecfn: EcfnConfig::default(),
            init_gain: DEFAULT_INIT_GAIN,
        }
    }
}

impl ModelConfig {
    /// Full-size configuration.
    pub fn full() -> Self {
        Self::default()
    }

    /// Same topology at 16 base channels.
    pub fn desk() -> Self {
        Self { base_channels: 16, ..Self::default() }
    }

    /// Tiny three-level configuration for gradient checks.
    pub fn micro() -> Self {
        Self { base_channels: 4, levels: 3, ..Self::default() }
    }

    /// Every attention block replaced by a pure residual.
    pub fn without_attention(&self) -> Self {
        Self { emsm: EmsmConfig { bypass: true, ..self.emsm.clone() }, ..self.clone() }
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.levels == 0 {
            return Err(Error::Config("base_channels and levels must be positive".into()));
        }
        if self.heads_in.len() < self.levels {
            return Err(Error::Config(format!(
                "heads_in lists {} levels, need {}",
                self.heads_in.len(),
                self.levels
            )));
        }
        if !(self.r.is_finite() && self.r >= 1.0) {
            return Err(Error::Config(format!("r must be >= 1, got {}", self.r)));
        }
        if !(self.init_gain.is_finite() && self.init_gain > 0.0) {
            return Err(Error::Config(format!("init_gain must be positive, got {}", self.init_gain)));
        }
        self.emsm.validate()?;
        self.ecfn.validate()
    }

    /// Checks an input shape `(N, 1, D, H, W)` against the pooling depth.
    pub fn check_input(&self, shape: &[usize]) -> Result<[usize; 5]> {
        let s = five(shape)?;
        if s[1] != 1 {
            return Err(Error::Dimension(format!("input must have one channel, got {shape:?}")));
        }
        let m = 1usize << (self.levels - 1);
        if s[3] % m != 0 || s[4] % m != 0 {
            return Err(Error::Config(format!(
                "input plane {}x{} is not divisible by {m} for {} levels",
                s[3], s[4], self.levels
            )));
        }
        Ok(s)
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<[usize; 5]> {
        let [n, _, d, h, w] = self.check_input(input)?;
        Ok([n, 1, depth_out(d, self.r)?, h, w])
    }

    pub fn latent_shape(&self, input: &[usize]) -> Result<[usize; 5]> {
        let [n, _, d, h, w] = self.check_input(input)?;
        let f = 1 << (self.levels - 1);
        Ok([n, self.channels(self.levels), d, h / f, w / f])
    }
}

/// Attention block followed by a feed-forward block.
#[derive(Clone, Debug)]
pub struct LitBlock {
    pub emsm: EmsmBlock,
    pub ecfn: EcfnBlock,
}

impl LitBlock {
    fn new(init: &mut Init, name: &str, ci: usize, co: usize, heads_in: usize, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            emsm: EmsmBlock::new(init, &format!("{name}.emsm"), ci, heads_in, cfg.heads_th, &cfg.emsm)?,
            ecfn: EcfnBlock::new(init, &format!("{name}.ecfn"), ci, co, &cfg.ecfn)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.emsm.forward(tape, p, x)?;
        self.ecfn.forward(tape, p, y)
    }

    pub fn conv_layers(&self) -> Vec<&ConvLayer> {
        let mut v = self.emsm.conv_layers();
        v.extend(self.ecfn.conv_layers());
        v
    }

    pub fn analytic_macs(&self, n: usize, dhw: [usize; 3]) -> BTreeMap<String, u64> {
        let mut m = self.emsm.analytic_macs(n, dhw);
        m.extend(self.ecfn.analytic_macs(n, dhw));
        m
    }
}

/// One decoder level: upsample, reduce channels, block, add skip.
#[derive(Clone, Debug)]
pub struct DecoderLevel {
    pub level: usize,
    pub reduce: ConvLayer,
    pub block: LitBlock,
}

#[derive(Clone, Debug)]
pub struct LitFormer {
    pub cfg: ModelConfig,
    pub stem: EcfnBlock,
    /// Levels 1..=L.
    pub encoder: Vec<LitBlock>,
    /// Levels L-1 down to 1.
    pub decoder: Vec<DecoderLevel>,
    pub refine: EcfnBlock,
    pub head: EcfnBlock,
}

/// Intermediate shapes recorded by [`LitFormer::forward_traced`].
#[derive(Clone, Debug)]
pub struct Trace {
    pub output: Var,
    pub latent: Var,
    pub stem: Var,
    pub stages: Vec<(String, Vec<usize>)>,
}

impl LitFormer {
    /// Deterministic construction from `seed`. Parameters come back in f64.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<f64>)> {
        cfg.validate()?;
        let mut init = Init::new(seed);
        init.gain = cfg.init_gain;
        let c = cfg.base_channels;
        let stem = EcfnBlock::new(&mut init, "stem", 1, c, &cfg.ecfn)?;
        let mut encoder = Vec::with_capacity(cfg.levels);
        for l in 1..=cfg.levels {
            let ci = if l == 1 { c } else { cfg.channels(l - 1) };
            let name = format!("enc{l}");
            encoder.push(LitBlock::new(&mut init, &name, ci, cfg.channels(l), cfg.heads_in[l - 1], cfg)?);
        }
        let mut decoder = Vec::with_capacity(cfg.levels - 1);
        for l in (1..cfg.levels).rev() {
            let (cl, cu) = (cfg.channels(l), cfg.channels(l + 1));
            let reduce = ConvLayer::new(&mut init, &format!("dec{l}.reduce"), cu, cl, [1, 1, 1], 1)?;
            let block = LitBlock::new(&mut init, &format!("dec{l}"), cl, cl, cfg.heads_in[l - 1], cfg)?;
            decoder.push(DecoderLevel { level: l, reduce, block });
        }
        let refine = EcfnBlock::new(&mut init, "refine", c, c, &cfg.ecfn)?;
        let head = EcfnBlock::new(&mut init, "head", c, 1, &cfg.ecfn)?;
        let model = Self { cfg: cfg.clone(), stem, encoder, decoder, refine, head };
        Ok((model, init.store))
    }

    /// The same assembly with every attention block bypassed.
    pub fn variant_2plus1d_unet(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<f64>)> {
        Self::build(&cfg.without_attention(), seed)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        self.forward_traced(tape, p, x).map(|t| t.output)
    }

    pub fn forward_traced<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Trace> {
        self.cfg.check_input(tape.shape(x))?;
        let mut stages = Vec::new();
        let mut note = |tape: &Tape<T>, name: &str, v: Var| stages.push((name.to_string(), tape.shape(v).to_vec()));

        let f0 = self.stem.forward(tape, p, x)?;
        note(tape, "stem", f0);
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut y = f0;
        for (i, blk) in self.encoder.iter().enumerate() {
            if i > 0 {
                y = maxpool_inplane(tape, y)?;
                note(tape, &format!("pool{}", i + 1), y);
            }
            y = blk.forward(tape, p, y)?;
            note(tape, &format!("enc{}", i + 1), y);
            skips.push(y);
        }
        let latent = y;
        for lvl in &self.decoder {
            y = upsample_transverse(tape, y, 2)?;
            y = lvl.reduce.forward(tape, p, y)?;
            y = lvl.block.forward(tape, p, y)?;
            let skip = skips[lvl.level - 1];
            if tape.shape(y) != tape.shape(skip) {
                return Err(Error::Dimension(format!(
                    "decoder level {}: {:?} vs skip {:?}",
                    lvl.level,
                    tape.shape(y),
                    tape.shape(skip)
                )));
            }
            y = tape.add(y, skip)?;
            note(tape, &format!("dec{}", lvl.level), y);
        }
        let fd = self.refine.forward(tape, p, y)?;
        let fdf = tape.add(fd, f0)?;
        note(tape, "refine", fdf);
        let up = upsample_depth(tape, fdf, self.cfg.r)?;
        note(tape, "upsample_depth", up);
        let output = self.head.forward(tape, p, up)?;
        note(tape, "head", output);
        Ok(Trace { output, latent, stem: f0, stages })
    }

    pub fn conv_layers(&self) -> Vec<&ConvLayer> {
        let mut v = self.stem.conv_layers();
        for b in &self.encoder {
            v.extend(b.conv_layers());
        }
        for d in &self.decoder {
            v.push(&d.reduce);
            v.extend(d.block.conv_layers());
        }
        v.extend(self.refine.conv_layers());
        v.extend(self.head.conv_layers());
        v
    }

    pub fn emsm_blocks(&self) -> Vec<&EmsmBlock> {
        self.encoder.iter().chain(self.decoder.iter().map(|d| &d.block)).map(|b| &b.emsm).collect()
    }

    pub fn ecfn_blocks(&self) -> Vec<&EcfnBlock> {
        let mut v = vec![&self.stem];
        v.extend(self.encoder.iter().map(|b| &b.ecfn));
        v.extend(self.decoder.iter().map(|d| &d.block.ecfn));
        v.push(&self.refine);
        v.push(&self.head);
        v
    }

    /// Analytic MACs per op-counter label for one forward pass.
    pub fn analytic_macs(&self, input: &[usize]) -> Result<BTreeMap<String, u64>> {
        let [n, _, d, h, w] = self.cfg.check_input(input)?;
        let mut m = self.stem.analytic_macs(n, [d, h, w]);
        for (i, blk) in self.encoder.iter().enumerate() {
            let f = 1 << i;
            m.extend(blk.analytic_macs(n, [d, h / f, w / f]));
        }
        for lvl in &self.decoder {
            let f = 1 << (lvl.level - 1);
            let dhw = [d, h / f, w / f];
            m.insert(lvl.reduce.label(), lvl.reduce.macs(n, dhw));
            m.extend(lvl.block.analytic_macs(n, dhw));
        }
        m.extend(self.refine.analytic_macs(n, [d, h, w]));
        m.extend(self.head.analytic_macs(n, [depth_out(d, self.cfg.r)?, h, w]));
        Ok(m)
    }
}

/// Central-difference check of the whole network with respect to its input
/// and every parameter, in f64. The output is reduced against fixed
/// pseudo-random weights (a weighted mean, so the scalar is unit-scale).
pub fn network_gradcheck(cfg: &ModelConfig, seed: u64, input: &[usize], probe: &Probe) -> Result<GradCheckReport> {
    let (model, store) = LitFormer::build(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let n: usize = input.iter().product();
    let x = Tensor::new(input, (0..n).map(|_| rng.random_range(0.0..1.0)).collect())?;
    let out = cfg.output_shape(input)?;
    let m: usize = out.iter().product();
    let weights = Tensor::new(&out, (0..m).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let mut inputs = vec![x];
    inputs.extend(store.tensors().iter().cloned());
    check(
        |tp, v| {
            let p = Bound::from_vars(v[1..].to_vec());
            let y = model.forward(tp, &p, v[0])?;
            let w = tp.constant(weights.clone());
            let yw = tp.mul(y, w)?;
            tp.mean(yw)
        },
        &inputs,
        GRADCHECK_STEP,
        probe,
    )
}
