//! Volume-level evaluation against the reference, with a trilinear baseline
//! and a histogram of residual HU values.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{denormalize_hu, normalize, Volume};
use crate::error::{Error, Result};
use crate::net::LitFormer;
use crate::objectives::MetricReport;
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor};
use crate::train::predict;
use crate::volume_ops::upsample_depth;

pub const HIST_RANGE: (f64, f64) = (-200.0, 200.0);
pub const HIST_STEP: f64 = 5.0;

/// Fixed-bin histogram of `prediction - reference` in HU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
    pub counts: Vec<u64>,
    pub below: u64,
    pub above: u64,
}

impl Histogram {
    pub fn new() -> Self {
        let bins = ((HIST_RANGE.1 - HIST_RANGE.0) / HIST_STEP).round() as usize;
        Self { lo: HIST_RANGE.0, hi: HIST_RANGE.1, step: HIST_STEP, counts: vec![0; bins], below: 0, above: 0 }
    }

    /// Bins are half-open `[lo + k·step, lo + (k+1)·step)`; `hi` itself
    /// lands in the last bin.
    pub fn add(&mut self, r: f64) {
        if r < self.lo {
            self.below += 1;
        } else if r > self.hi {
            self.above += 1;
        } else {
            let k = (((r - self.lo) / self.step).floor() as usize).min(self.counts.len() - 1);
            self.counts[k] += 1;
        }
    }

    pub fn merge(&mut self, o: &Histogram) {
        self.counts.iter_mut().zip(&o.counts).for_each(|(a, b)| *a += b);
        self.below += o.below;
        self.above += o.above;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.below + self.above
    }
}

impl Default for Histogram {
    fn default() -> Self {
        Self::new()
    }
}

/// Depth-only linear interpolation of the normalized input (the transverse
/// grid already matches), i.e. trilinear upsampling to the target grid.
pub fn trilinear(input: &Volume, r: f64) -> Result<Tensor<f64>> {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(normalize(input));
    let y = upsample_depth(&mut tape, x, r)?;
    Ok(tape.value(y).clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: Vec<MetricReport>,
    pub baseline: Vec<MetricReport>,
    pub histogram: Histogram,
}

#[derive(Serialize)]
struct Line<'a> {
    kind: &'a str,
    #[serde(flatten)]
    report: &'a MetricReport,
}

impl EvalReport {
    pub fn model_mean(&self) -> Option<MetricReport> {
        MetricReport::mean("mean", &self.model)
    }

    pub fn baseline_mean(&self) -> Option<MetricReport> {
        MetricReport::mean("mean", &self.baseline)
    }

    /// One JSON object per line: per-volume and mean metrics for the model
    /// and the baseline, then the histogram.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        let mut push = |kind: &str, r: &MetricReport| {
            out.push_str(&serde_json::to_string(&Line { kind, report: r }).expect("line serializes"));
            out.push('\n');
        };
        for r in &self.model {
            push("model", r);
        }
        if let Some(m) = self.model_mean() {
            push("model_mean", &m);
        }
        for r in &self.baseline {
            push("trilinear", r);
        }
        if let Some(m) = self.baseline_mean() {
            push("trilinear_mean", &m);
        }
        let h = serde_json::json!({ "kind": "residual_histogram_hu", "histogram": self.histogram });
        out.push_str(&h.to_string());
        out.push('\n');
        out
    }
}

/// Scores `(id, input, reference)` triples. Without a model only the
/// trilinear baseline is computed. Volumes are evaluated in parallel.
pub fn evaluate(
    model: Option<(&LitFormer, &ParamStore<f32>)>,
    r: f64,
    pairs: &[(String, Volume, Volume)],
) -> Result<EvalReport> {
    type One = (Option<MetricReport>, MetricReport, Histogram);
    let per: Vec<One> = pairs
        .par_iter()
        .map(|(id, input, reference)| -> Result<One> {
            let target = normalize(reference);
            let dhw = reference.dhw;
            let base = trilinear(input, r)?;
            if base.shape() != target.shape() {
                return Err(Error::Dimension(format!(
                    "{id}: upsampled input {:?} vs reference {:?}",
                    base.shape(),
                    target.shape()
                )));
            }
            let baseline = MetricReport::evaluate(id, base.data(), target.data(), dhw)?;
            let mut hist = Histogram::new();
            let model_report = match model {
                Some((m, p)) => {
                    let pred: Vec<f64> = predict(m, p, input)?.data().iter().map(|&v| v as f64).collect();
                    for (a, b) in pred.iter().zip(target.data()) {
                        hist.add(denormalize_hu(*a) - denormalize_hu(*b));
                    }
                    Some(MetricReport::evaluate(id, &pred, target.data(), dhw)?)
                }
                None => {
                    for (a, b) in base.data().iter().zip(target.data()) {
                        hist.add(denormalize_hu(*a) - denormalize_hu(*b));
                    }
                    None
                }
            };
            Ok((model_report, baseline, hist))
        })
        .collect::<Result<_>>()?;
    let mut report = EvalReport { model: Vec::new(), baseline: Vec::new(), histogram: Histogram::new() };
    for (m, b, h) in per {
        report.model.extend(m);
        report.baseline.push(b);
        report.histogram.merge(&h);
    }
    Ok(report)
}
