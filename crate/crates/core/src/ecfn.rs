//! Convolutional feed-forward block built from factorized (2+1)D units.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, Init};
use crate::tensor::{Tape, Var};
use crate::volume_ops::{five, ConvLayer};
use crate::Real;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EcfnFusion {
    /// Conv-I(x) + Conv-T(x) + IM(x).
    #[default]
    Parallel,
    /// Conv-T(Conv-I(x)) + IM(x).
    Cascaded,
    /// Unfactorized K×K×K kernel + IM(x), for comparison.
    Full3d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EcfnConfig {
    pub fusion: EcfnFusion,
    /// GELU between the two units.
    pub activation: bool,
    /// Odd spatial kernel size K.
    pub kernel: usize,
}

impl Default for EcfnConfig {
    fn default() -> Self {
        Self { fusion: EcfnFusion::Parallel, activation: true, kernel: 3 }
    }
}

impl EcfnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("eCFN kernel must be odd, got {}", self.kernel)));
        }
        Ok(())
    }
}

/// One (2+1)D unit with its identity / projection path.
#[derive(Clone, Debug)]
pub struct EcfnUnit {
    pub name: String,
    pub ci: usize,
    pub co: usize,
    pub fusion: EcfnFusion,
    convs: Vec<ConvLayer>,
    proj: Option<ConvLayer>,
}

impl EcfnUnit {
    pub fn new(init: &mut Init, name: &str, ci: usize, co: usize, fusion: EcfnFusion, k: usize) -> Result<Self> {
        let convs = match fusion {
            EcfnFusion::Parallel => vec![
                ConvLayer::new(init, &format!("{name}.conv_i"), ci, co, [1, k, k], 1)?,
                ConvLayer::new(init, &format!("{name}.conv_t"), ci, co, [k, 1, 1], 1)?,
            ],
            EcfnFusion::Cascaded => vec![
                ConvLayer::new(init, &format!("{name}.conv_i"), ci, co, [1, k, k], 1)?,
                ConvLayer::new(init, &format!("{name}.conv_t"), co, co, [k, 1, 1], 1)?,
            ],
            EcfnFusion::Full3d => vec![ConvLayer::new(init, &format!("{name}.conv_3d"), ci, co, [k, k, k], 1)?],
        };
        let proj = if ci != co {
            Some(ConvLayer::new(init, &format!("{name}.proj"), ci, co, [1, 1, 1], 1)?)
        } else {
            None
        };
        Ok(Self { name: name.to_string(), ci, co, fusion, convs, proj })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let s = five(tape.shape(x))?;
        if s[1] != self.ci {
            return Err(Error::Dimension(format!("{}: expected {} channels, got {:?}", self.name, self.ci, s)));
        }
        let im = match &self.proj {
            Some(g) => g.forward(tape, p, x)?,
            None => x,
        };
        let local = match self.fusion {
            EcfnFusion::Parallel => {
                let a = self.convs[0].forward(tape, p, x)?;
                let b = self.convs[1].forward(tape, p, x)?;
                tape.add(a, b)?
            }
            EcfnFusion::Cascaded => {
                let a = self.convs[0].forward(tape, p, x)?;
                self.convs[1].forward(tape, p, a)?
            }
            EcfnFusion::Full3d => self.convs[0].forward(tape, p, x)?,
        };
        tape.add(local, im)
    }

    pub fn conv_layers(&self) -> Vec<&ConvLayer> {
        self.convs.iter().chain(&self.proj).collect()
    }

    /// Weights of the spatial kernels only (no biases, no projection).
    pub fn kernel_weights(&self) -> usize {
        self.convs.iter().map(ConvLayer::weight_count).sum()
    }

    pub fn projection(&self) -> Option<&ConvLayer> {
        self.proj.as_ref()
    }

    pub fn param_count(&self) -> usize {
        self.conv_layers().iter().map(|l| l.weight_count() + l.bias_count()).sum()
    }

    pub fn analytic_macs(&self, n: usize, dhw: [usize; 3]) -> BTreeMap<String, u64> {
        self.conv_layers().into_iter().map(|l| (l.label(), l.macs(n, dhw))).collect()
    }
}

/// Two stacked units: channel-preserving, then channel-changing.
#[derive(Clone, Debug)]
pub struct EcfnBlock {
    pub name: String,
    pub unit1: EcfnUnit,
    pub unit2: EcfnUnit,
    pub activation: bool,
}

impl EcfnBlock {
    pub fn new(init: &mut Init, name: &str, ci: usize, co: usize, cfg: &EcfnConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            name: name.to_string(),
            unit1: EcfnUnit::new(init, &format!("{name}.unit1"), ci, ci, cfg.fusion, cfg.kernel)?,
            unit2: EcfnUnit::new(init, &format!("{name}.unit2"), ci, co, cfg.fusion, cfg.kernel)?,
            activation: cfg.activation,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.unit1.forward(tape, p, x)?;
        let y = if self.activation { tape.gelu(y)? } else { y };
        self.unit2.forward(tape, p, y)
    }

    pub fn ci(&self) -> usize {
        self.unit1.ci
    }

    pub fn co(&self) -> usize {
        self.unit2.co
    }

    pub fn conv_layers(&self) -> Vec<&ConvLayer> {
        let mut v = self.unit1.conv_layers();
        v.extend(self.unit2.conv_layers());
        v
    }

    pub fn param_count(&self) -> usize {
        self.unit1.param_count() + self.unit2.param_count()
    }

    pub fn analytic_macs(&self, n: usize, dhw: [usize; 3]) -> BTreeMap<String, u64> {
        let mut m = self.unit1.analytic_macs(n, dhw);
        m.extend(self.unit2.analytic_macs(n, dhw));
        m
    }
}

/// Kernel weights of a parallel (2+1)D unit: `C_i·C_o·(K²+K)`.
pub fn factorized_weights(ci: usize, co: usize, k: usize) -> usize {
    ci * co * (k * k + k)
}

/// Kernel weights of the equivalent 3D convolution: `C_i·C_o·K³`.
pub fn full_3d_weights(ci: usize, co: usize, k: usize) -> usize {
    ci * co * k * k * k
}
