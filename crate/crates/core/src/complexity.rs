//! Parameter and multiply-accumulate accounting, checked against the op
//! counter of an instrumented forward pass.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ecfn::{factorized_weights, full_3d_weights, EcfnFusion};
use crate::emsm::full_3d_attention_macs;
use crate::error::{Error, Result};
use crate::net::LitFormer;
use crate::params::ParamStore;
use crate::tensor::{OpCounter, Tape, Tensor};

/// Reference size of the full model and of the attention-free variant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub params_m: f64,
    pub params_tol: f64,
    pub flops_g: f64,
    pub flops_tol: f64,
}

pub const LITFORMER_TARGET: Target = Target { params_m: 7.2, params_tol: 0.2, flops_g: 27.2, flops_tol: 0.3 };
pub const UNET_TARGET: Target = Target { params_m: 5.8, params_tol: 0.2, flops_g: 26.9, flops_tol: 0.3 };

/// Input assumed for the reference FLOPs figures.
pub const FLOPS_INPUT: [usize; 5] = [1, 1, 16, 64, 64];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub weights: usize,
    pub biases: usize,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormulaCheck {
    pub id: String,
    pub predicted: f64,
    pub measured: f64,
    /// Relative tolerance; 0 means exact equality.
    pub tolerance: f64,
    /// Non-gating checks are reported but never fail a run.
    pub gating: bool,
    pub passed: bool,
}

impl FormulaCheck {
    fn exact(id: impl Into<String>, predicted: u128, measured: u128) -> Self {
        Self {
            id: id.into(),
            predicted: predicted as f64,
            measured: measured as f64,
            tolerance: 0.0,
            gating: true,
            passed: predicted == measured,
        }
    }

    fn within(id: impl Into<String>, predicted: f64, measured: f64, tolerance: f64, gating: bool) -> Self {
        let passed = ((measured - predicted) / predicted).abs() <= tolerance;
        Self { id: id.into(), predicted, measured, tolerance, gating, passed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub model: String,
    pub input_shape: Vec<usize>,
    /// Shape of the instrumented pass used for the exact cross-check.
    pub verify_shape: Vec<usize>,
    pub assumptions: Vec<String>,
    pub layers: Vec<LayerEntry>,
    pub total_params: usize,
    pub total_bias_params: usize,
    pub total_macs: u64,
    pub attention_map_macs: u64,
    /// Attention-map MACs if every block attended over all voxels.
    pub attention_map_macs_3d: f64,
    pub conv_macs: u64,
    /// Convolution MACs if every factorized unit were a full 3D kernel.
    pub conv_macs_3d: u64,
    pub aux_ops: BTreeMap<String, u64>,
    pub checks: Vec<FormulaCheck>,
}

impl ComplexityReport {
    /// True when every gating check passed.
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed || !c.gating)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {}  input {:?}", self.model, self.input_shape);
        for a in &self.assumptions {
            let _ = writeln!(s, "# assumption: {a}");
        }
        let w = self.layers.iter().map(|l| l.name.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(s, "{:<w$}  {:>10}  {:>8}  {:>16}", "layer", "weights", "biases", "MACs");
        for l in &self.layers {
            let _ = writeln!(s, "{:<w$}  {:>10}  {:>8}  {:>16}", l.name, l.weights, l.biases, l.macs);
        }
        let _ = writeln!(
            s,
            "{:<w$}  {:>10}  {:>8}  {:>16}",
            "total",
            self.total_params - self.total_bias_params,
            self.total_bias_params,
            self.total_macs
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<40} {:>18} {:>18} {:>8} {:>6}", "check", "predicted", "measured", "tol", "result");
        for c in &self.checks {
            let verdict = match (c.passed, c.gating) {
                (true, _) => "pass",
                (false, true) => "FAIL",
                (false, false) => "off",
            };
            let _ = writeln!(
                s,
                "{:<40} {:>18.6e} {:>18.6e} {:>8} {:>6}",
                c.id,
                c.predicted,
                c.measured,
                if c.tolerance == 0.0 { "exact".to_string() } else { format!("{}%", c.tolerance * 100.0) },
                verdict
            );
        }
        s
    }

    /// One summary row: model, params [M], MACs [G].
    pub fn table_row(&self) -> String {
        format!(
            "{:<14} {:>8.2} {:>10.2}",
            self.model,
            self.total_params as f64 / 1e6,
            self.total_macs as f64 / 1e9
        )
    }
}

/// Parameter counts grouped by layer, biases separate.
pub fn count_params(store: &ParamStore<f64>) -> Vec<LayerEntry> {
    let mut groups: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (_, name, t) in store.iter() {
        let (layer, is_bias) = match name.rsplit_once('.') {
            Some((l, "weight")) => (l, false),
            Some((l, "bias")) => (l, true),
            _ => (name, false),
        };
        let e = groups.entry(layer.to_string()).or_default();
        if is_bias {
            e.1 += t.numel();
        } else {
            e.0 += t.numel();
        }
    }
    groups
        .into_iter()
        .map(|(name, (weights, biases))| LayerEntry { name, weights, biases, macs: 0 })
        .collect()
}

/// Analytic MACs per op-counter label.
pub fn count_macs(model: &LitFormer, input: &[usize]) -> Result<BTreeMap<String, u64>> {
    model.analytic_macs(input)
}

/// Runs one instrumented forward pass on a zero input.
pub fn measure_macs(model: &LitFormer, store: &ParamStore<f64>, input: &[usize]) -> Result<OpCounter> {
    let store = store.cast::<f32>();
    let mut tape = Tape::<f32>::new();
    let p = store.bind(&mut tape);
    let x = tape.constant(Tensor::zeros(input));
    model.forward(&mut tape, &p, x)?;
    Ok(tape.counter().clone())
}

/// Smallest input that exercises every level: depth 4, plane `2^(L-1)`.
pub fn verify_shape(model: &LitFormer) -> [usize; 5] {
    let side = 1 << (model.cfg.levels - 1);
    [1, 1, 4, side.max(2), side.max(2)]
}

fn layer_of(label: &str) -> &str {
    label.split_once(':').map_or(label, |(l, _)| l)
}

/// Builds the full report: per-layer counts at `input`, exact analytic vs
/// instrumented comparison at [`verify_shape`], and formula checks.
pub fn analyze(
    name: &str,
    model: &LitFormer,
    store: &ParamStore<f64>,
    input: &[usize],
    target: Option<&Target>,
) -> Result<ComplexityReport> {
    let analytic = count_macs(model, input)?;
    let mut layers = count_params(store);
    let mut index: BTreeMap<String, usize> =
        layers.iter().enumerate().map(|(i, l)| (l.name.clone(), i)).collect();
    for (label, &m) in &analytic {
        let layer = layer_of(label).to_string();
        let i = *index.entry(layer.clone()).or_insert_with(|| {
            layers.push(LayerEntry { name: layer, weights: 0, biases: 0, macs: 0 });
            layers.len() - 1
        });
        layers[i].macs += m;
    }
    layers.sort_by(|a, b| a.name.cmp(&b.name));

    let [n, _, d, h, w] = model.cfg.check_input(input)?;
    let mut attn = 0u64;
    let mut attn3d = 0u128;
    for (i, b) in model.emsm_blocks().iter().enumerate() {
        let f = level_factor(model, i);
        let dhw = [d, h / f, w / f];
        attn += b.attention_map_macs(n, dhw);
        if !b.conv_layers().is_empty() {
            attn3d += n as u128 * full_3d_attention_macs(b.channels, dhw);
        }
    }
    let conv: u64 = analytic.iter().filter(|(k, _)| k.ends_with(":conv")).map(|(_, v)| v).sum();
    let conv3d = conv_macs_if_3d(model, &analytic);

    let mut checks = Vec::new();
    let vshape = verify_shape(model);
    let measured = measure_macs(model, store, &vshape)?;
    let expected = count_macs(model, &vshape)?;
    let mut mismatched = 0;
    for label in expected.keys().chain(measured.per_op.keys()) {
        let (a, m) = (expected.get(label).copied().unwrap_or(0), measured.per_op.get(label).copied().unwrap_or(0));
        if a != m {
            mismatched += 1;
            checks.push(FormulaCheck::exact(format!("macs[{label}]"), a as u128, m as u128));
        }
    }
    checks.push(FormulaCheck::exact(
        "macs.analytic_vs_counter.total",
        expected.values().map(|&v| v as u128).sum(),
        measured.mac_count as u128,
    ));
    checks.push(FormulaCheck::exact("macs.analytic_vs_counter.layers_mismatched", 0, mismatched));

    for b in model.ecfn_blocks() {
        for u in [&b.unit1, &b.unit2] {
            if u.fusion == EcfnFusion::Parallel {
                let k = model.cfg.ecfn.kernel;
                let lhs = u.kernel_weights() as u128 * (k * k * k) as u128;
                let rhs = full_3d_weights(u.ci, u.co, k) as u128 * (k * k + k) as u128;
                checks.push(FormulaCheck::exact(format!("ecfn.ratio[{}]", u.name), rhs, lhs));
                debug_assert_eq!(u.kernel_weights(), factorized_weights(u.ci, u.co, k));
            }
        }
    }
    let attn_measured: u64 = measured.per_op.iter().filter(|(k, _)| k.ends_with(".attn:matmul")).map(|(_, v)| v).sum();
    let [vn, _, vd, vh, vw] = vshape;
    let attn_formula: u64 = model
        .emsm_blocks()
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let f = level_factor(model, i);
            let (hw, c) = (vh / f * (vw / f), b.channels);
            let (hi, ht) = b.heads();
            (hi.map_or(0, |h| hw * c * c / h) + ht.map_or(0, |_| vd * vd * c)) * vn
        })
        .sum::<usize>() as u64;
    checks.push(FormulaCheck::exact("emsm.attention_map_macs", attn_formula as u128, attn_measured as u128));

    let total_params = store.total_elements();
    let total_macs: u64 = analytic.values().sum();
    let mut assumptions = vec![
        "FLOPs are multiply-accumulates (one MAC = one unit)".to_string(),
        "softmax, pooling, interpolation and elementwise ops are listed under aux_ops and excluded".to_string(),
        format!("exact analytic vs counter comparison runs at input {vshape:?}"),
    ];
    if let Some(t) = target {
        let p = total_params as f64 / 1e6;
        checks.push(FormulaCheck::within("table.params_m", t.params_m, p, t.params_tol, true));
        if input == FLOPS_INPUT {
            checks.push(FormulaCheck::within("table.flops_g", t.flops_g, total_macs as f64 / 1e9, t.flops_tol, false));
            assumptions.push(format!(
                "reference FLOPs assumed for input {FLOPS_INPUT:?}; the FLOPs check is informational (non-gating)"
            ));
        }
    }
    Ok(ComplexityReport {
        model: name.to_string(),
        input_shape: input.to_vec(),
        verify_shape: vshape.to_vec(),
        assumptions,
        layers,
        total_params,
        total_bias_params: count_params(store).iter().map(|l| l.biases).sum(),
        total_macs,
        attention_map_macs: attn,
        attention_map_macs_3d: attn3d as f64,
        conv_macs: conv,
        conv_macs_3d: conv3d,
        aux_ops: measured.aux,
        checks,
    })
}

/// Transverse downsampling factor of the i-th attention block in
/// encoder-then-decoder order.
fn level_factor(model: &LitFormer, i: usize) -> usize {
    let l = model.encoder.len();
    if i < l {
        1 << i
    } else {
        1 << (model.decoder[i - l].level - 1)
    }
}

fn conv_macs_if_3d(model: &LitFormer, analytic: &BTreeMap<String, u64>) -> u64 {
    let k = model.cfg.ecfn.kernel as u64;
    let mut ecfn_total = 0;
    let mut ecfn_labels = Vec::new();
    for b in model.ecfn_blocks() {
        for u in [&b.unit1, &b.unit2] {
            for l in u.conv_layers() {
                ecfn_labels.push(l.label());
            }
            let convs = u.conv_layers();
            // Conv-I costs C_i·C_o·K²·DHW; the K³ kernel over the same span costs K times that
            ecfn_total += match u.fusion {
                EcfnFusion::Full3d => analytic[&convs[0].label()],
                _ => analytic[&convs[0].label()] * k,
            };
            if let Some(p) = u.projection() {
                ecfn_total += analytic[&p.label()];
            }
        }
    }
    let other: u64 = analytic
        .iter()
        .filter(|(label, _)| label.ends_with(":conv") && !ecfn_labels.contains(label))
        .map(|(_, v)| v)
        .sum();
    ecfn_total + other
}

/// Both reference rows at the assumed FLOPs input.
pub fn table_rows(cfg: &crate::net::ModelConfig, seed: u64) -> Result<Vec<ComplexityReport>> {
    let (full, fs) = LitFormer::build(cfg, seed)?;
    let (unet, us) = LitFormer::variant_2plus1d_unet(cfg, seed)?;
    let full_shape = cfg.base_channels == 64 && cfg.levels == 4;
    let (tf, tu) = if full_shape { (Some(&LITFORMER_TARGET), Some(&UNET_TARGET)) } else { (None, None) };
    let input = FLOPS_INPUT;
    cfg.check_input(&input).map_err(|e| Error::Config(format!("FLOPs input: {e}")))?;
    Ok(vec![analyze("litformer", &full, &fs, &input, tf)?, analyze("(2+1)DUnet", &unet, &us, &input, tu)?])
}
