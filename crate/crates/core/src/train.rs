//! Run configuration and the single-threaded trainer.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{augment, extract_patches, normalize, simulate_pairs, PatchPair, SimulateConfig, Volume};
use crate::error::{Error, Result};
use crate::net::{LitFormer, ModelConfig};
use crate::objectives::{charbonnier, total_loss, LossConfig, LossMode};
use crate::optim::{adamw_step, lr_at, AdamState, AdamWConfig};
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub augment: bool,
    /// Log every n-th step; the first and last steps are always logged.
    pub log_every: usize,
    /// Checkpoint every n-th step (0: only at the end).
    pub checkpoint_every: usize,
    /// Global gradient-norm ceiling (0: off).
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr_max: 2e-4,
            lr_min: 1e-6,
            warmup_epochs: 2,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 1e-9,
            batch_size: 2,
            augment: true,
            log_every: 1,
            checkpoint_every: 0,
            grad_clip: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr_min < self.lr_max && self.lr_min >= 0.0) {
            return bad(format!("need 0 <= lr_min < lr_max, got {} / {}", self.lr_min, self.lr_max));
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!("warmup_epochs {} must be below epochs {}", self.warmup_epochs, self.epochs));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return bad("batch_size and log_every must be positive".into());
        }
        if !(self.grad_clip >= 0.0) {
            return bad(format!("grad_clip must be >= 0, got {}", self.grad_clip));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.weight_decay < 0.0 {
            return bad(format!("betas {} / {} and weight decay {}", self.beta1, self.beta2, self.weight_decay));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, weight_decay: self.weight_decay }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub simulate: SimulateConfig,
    /// Input-grid patch extent.
    pub patch: [usize; 3],
    pub stride: [usize; 3],
    /// Keep at most this many patches (0: all).
    pub max_patches: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { simulate: SimulateConfig::default(), patch: [16, 64, 64], stride: [16, 64, 64], max_patches: 0 }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max` (0: no-op).
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor<f32>], max: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
    if max > 0.0 && norm > max {
        let s = (max / norm) as f32;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
    }
    norm
}

/// Everything a run depends on besides the data files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::full(),
            loss: LossConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Full-size model and schedule.
    pub fn full() -> Self {
        Self::default()
    }

    /// Small overfitting run: four 8×32×32 patches, 200 steps.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.model = ModelConfig { base_channels: 8, levels: 3, ..ModelConfig::default() };
        c.data = DataConfig {
            simulate: SimulateConfig {
                volumes: 1,
                phantom: crate::data::PhantomConfig { dhw: [16, 64, 64], structures: 14 },
                ..SimulateConfig::default()
            },
            patch: [8, 32, 32],
            stride: [8, 32, 32],
            max_patches: 4,
        };
        c.loss.mode = LossMode::Charbonnier;
        c.train = TrainConfig {
            epochs: 100,
            lr_max: 1e-2,
            lr_min: 1e-3,
            warmup_epochs: 5,
            augment: false,
            log_every: 10,
            grad_clip: 1.0,
            ..TrainConfig::default()
        };
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    /// Simulated pairs cut into patches, shuffled by seed.
    pub fn training_patches(&self) -> Result<Vec<PatchPair>> {
        let pairs = simulate_pairs(&self.data.simulate, self.seed)?;
        patches_from_pairs(&pairs, &self.data, self.seed)
    }
}

pub fn patches_from_pairs(pairs: &[(String, Volume, Volume)], cfg: &DataConfig, seed: u64) -> Result<Vec<PatchPair>> {
    let mut out = Vec::new();
    for (i, (_, ldr, ndr)) in pairs.iter().enumerate() {
        out.extend(extract_patches(ldr, ndr, cfg.patch, cfg.stride, seed.wrapping_add(i as u64))?);
    }
    if cfg.max_patches > 0 {
        out.truncate(cfg.max_patches);
    }
    if out.is_empty() {
        return Err(Error::Config("no training patches".into()));
    }
    Ok(out)
}

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub charbonnier: Option<f64>,
    pub ssim: Option<f64>,
    pub wall_ms: u64,
}

impl RunRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Same record with the timestamp cleared.
    pub fn without_time(&self) -> Self {
        Self { wall_ms: 0, ..self.clone() }
    }
}

/// Stacks normalized volumes into an `(N, 1, D, H, W)` f32 tensor.
pub fn stack(vols: &[&Volume]) -> Result<Tensor<f32>> {
    let dhw = vols.first().ok_or_else(|| Error::Contract("empty batch".into()))?.dhw;
    let mut data = Vec::with_capacity(vols.len() * dhw.iter().product::<usize>());
    for v in vols {
        if v.dhw != dhw {
            return Err(Error::Dimension(format!("batch mixes {dhw:?} and {:?}", v.dhw)));
        }
        data.extend(normalize(v).data().iter().map(|&x| x as f32));
    }
    Tensor::new(&[vols.len(), 1, dhw[0], dhw[1], dhw[2]], data)
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: LitFormer,
    pub params: ParamStore<f32>,
    pub adam: AdamState,
    /// Optimizer steps completed.
    pub step: usize,
    patches: Vec<PatchPair>,
    started: Instant,
}

impl Trainer {
    pub fn new(cfg: RunConfig, patches: Vec<PatchPair>) -> Result<Self> {
        cfg.validate()?;
        if patches.is_empty() {
            return Err(Error::Config("no training patches".into()));
        }
        let (model, store) = LitFormer::build(&cfg.model, cfg.seed)?;
        let params = store.cast::<f32>();
        let adam = AdamState::new(&params);
        Ok(Self { cfg, model, params, adam, step: 0, patches, started: Instant::now() })
    }

    /// Restores parameters, moments and the step counter.
    pub fn from_checkpoint(ck: &Checkpoint, patches: Vec<PatchPair>) -> Result<Self> {
        let (cfg, model, params) = restore_model(ck)?;
        if patches.is_empty() {
            return Err(Error::Config("no training patches".into()));
        }
        let mut adam = AdamState::new(&params);
        for (i, (_, name, _)) in params.iter().enumerate() {
            adam.m[i] = fetch(ck, "adam.m", name, params.tensors()[i].shape())?.data().to_vec();
            adam.v[i] = fetch(ck, "adam.v", name, params.tensors()[i].shape())?.data().to_vec();
        }
        adam.step = ck.step;
        Ok(Self { cfg, model, params, adam, step: ck.step as usize, patches, started: Instant::now() })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::with_capacity(3 * self.params.len());
        for (i, (_, name, t)) in self.params.iter().enumerate() {
            tensors.push((format!("param/{name}"), t.clone()));
            let m = Tensor::new(t.shape(), self.adam.m[i].clone()).expect("moment shape");
            let v = Tensor::new(t.shape(), self.adam.v[i].clone()).expect("moment shape");
            tensors.push((format!("adam.m/{name}"), m));
            tensors.push((format!("adam.v/{name}"), v));
        }
        Checkpoint { step: self.step as u64, config: self.cfg.to_toml(), tensors }
    }

    pub fn patches(&self) -> &[PatchPair] {
        &self.patches
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.patches.len().div_ceil(self.cfg.train.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.train.epochs * self.steps_per_epoch()
    }

    pub fn lr(&self, step: usize) -> f64 {
        let t = &self.cfg.train;
        lr_at(step, self.total_steps(), t.warmup_epochs * self.steps_per_epoch(), t.lr_max, t.lr_min)
    }

    /// Patch indices and augmentation seeds for `step`; a function of
    /// `(seed, step)` only, so resumed runs see the same batches.
    pub fn batch_plan(&self, step: usize) -> Vec<(usize, u64)> {
        let spe = self.steps_per_epoch();
        let (epoch, k) = (step / spe, step % spe);
        let mut order: Vec<usize> = (0..self.patches.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (epoch as u64).wrapping_mul(0xA24B_AED4_963E_E407)));
        let b = self.cfg.train.batch_size;
        order[k * b..((k + 1) * b).min(order.len())]
            .iter()
            .enumerate()
            .map(|(j, &i)| (i, self.cfg.seed.wrapping_add((step * b + j) as u64 * 0x9E37_79B9)))
            .collect()
    }

    fn batch(&self, step: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let owned: Vec<PatchPair> = self
            .batch_plan(step)
            .into_iter()
            .map(|(i, s)| if self.cfg.train.augment { augment(&self.patches[i], s).0 } else { self.patches[i].clone() })
            .collect();
        let inputs: Vec<&Volume> = owned.iter().map(|p| &p.input).collect();
        let targets: Vec<&Volume> = owned.iter().map(|p| &p.target).collect();
        Ok((stack(&inputs)?, stack(&targets)?))
    }

    /// One forward/backward/update. Non-finite values abort with the step.
    pub fn train_step(&mut self) -> Result<RunRecord> {
        let step = self.step;
        let ctx = |e: Error| match e {
            Error::NonFinite { op } => Error::NonFinite { op: format!("{op} at training step {}", step + 1) },
            e => e,
        };
        let (x, y) = self.batch(step)?;
        let mut tape = Tape::<f32>::new();
        let bound = self.params.bind(&mut tape);
        let xv = tape.constant(x);
        let yv = tape.constant(y);
        let pred = self.model.forward(&mut tape, &bound, xv).map_err(ctx)?;
        let parts = total_loss(&mut tape, pred, yv, &self.cfg.loss).map_err(ctx)?;
        let loss = tape.value(parts.total).item() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: format!("training loss at step {}", step + 1) });
        }
        tape.backward(parts.total).map_err(ctx)?;
        let mut grads: Vec<Tensor<f32>> = bound
            .vars()
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, p)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            let name = self.params.name(self.params.ids().nth(i).expect("index in range")).to_string();
            return Err(Error::NonFinite { op: format!("gradient of `{name}` at training step {}", step + 1) });
        }
        clip_grad_norm(&mut grads, self.cfg.train.grad_clip);
        let lr = self.lr(step);
        adamw_step(&mut self.params, &grads, &mut self.adam, lr, &self.cfg.train.adamw())?;
        self.step += 1;
        let val = |v: Option<crate::tensor::Var>| v.map(|v| tape.value(v).item() as f64);
        Ok(RunRecord {
            step: self.step,
            epoch: step / self.steps_per_epoch(),
            lr,
            loss,
            charbonnier: val(parts.charbonnier),
            ssim: val(parts.ssim),
            wall_ms: self.started.elapsed().as_millis() as u64,
        })
    }

    /// Trains until `until` steps are done (capped at the schedule length).
    /// Logged records go to `log`; checkpoints to `ckpt` when given.
    pub fn run(&mut self, until: usize, ckpt: Option<&Path>, mut log: impl FnMut(&RunRecord) -> Result<()>) -> Result<()> {
        let until = until.min(self.total_steps());
        let t = self.cfg.train.clone();
        while self.step < until {
            let rec = self.train_step()?;
            if rec.step == 1 || rec.step % t.log_every == 0 || rec.step == until {
                log(&rec)?;
            }
            if let Some(p) = ckpt {
                if (t.checkpoint_every > 0 && rec.step % t.checkpoint_every == 0) || rec.step == until {
                    self.checkpoint().save(p)?;
                }
            }
        }
        Ok(())
    }

    /// Normalized prediction for one `(1, 1, D, H, W)` input.
    pub fn predict(&self, input: &Volume) -> Result<Tensor<f32>> {
        predict(&self.model, &self.params, input)
    }

    /// Charbonnier of the current model on every training patch, unaugmented.
    pub fn training_charbonnier(&self) -> Result<f64> {
        let mut total = 0.0;
        for p in &self.patches {
            let pred = self.predict(&p.input)?;
            let mut tape = Tape::<f32>::new();
            let a = tape.constant(pred);
            let b = tape.constant(stack(&[&p.target])?);
            let c = charbonnier(&mut tape, a, b, self.cfg.loss.epsilon)?;
            total += tape.value(c).item() as f64;
        }
        Ok(total / self.patches.len() as f64)
    }
}

fn fetch<'a>(ck: &'a Checkpoint, prefix: &str, name: &str, shape: &[usize]) -> Result<&'a Tensor<f32>> {
    let t = ck.get(&format!("{prefix}/{name}")).ok_or_else(|| Error::Contract(format!("checkpoint lacks {prefix}/{name}")))?;
    if t.shape() != shape {
        return Err(Error::Dimension(format!("checkpoint {prefix}/{name} has shape {:?}, model wants {shape:?}", t.shape())));
    }
    Ok(t)
}

/// Rebuilds the model named by a checkpoint's configuration and loads its
/// parameters.
pub fn restore_model(ck: &Checkpoint) -> Result<(RunConfig, LitFormer, ParamStore<f32>)> {
    let cfg = RunConfig::from_toml(&ck.config)?;
    let (model, store) = LitFormer::build(&cfg.model, cfg.seed)?;
    let mut params = store.cast::<f32>();
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let name = params.name(id).to_string();
        let t = fetch(ck, "param", &name, params.get(id).shape())?.clone();
        *params.get_mut(id) = t;
    }
    Ok((cfg, model, params))
}

/// Forward pass without gradients.
pub fn predict(model: &LitFormer, params: &ParamStore<f32>, input: &Volume) -> Result<Tensor<f32>> {
    let mut tape = Tape::<f32>::new();
    let bound = crate::params::Bound::from_vars(params.tensors().iter().map(|t| tape.constant(t.clone())).collect());
    let x = tape.constant(stack(&[input])?);
    let y = model.forward(&mut tape, &bound, x)?;
    Ok(tape.value(y).clone())
}
