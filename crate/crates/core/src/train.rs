//! Training loops, baselines and resumable run state.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::data::{BatchConfig, Batcher};
use crate::distill::{compactor_param_name, Distiller, MaskState, StepRecord};
use crate::error::{Error, Result};
use crate::eval::kd_logit_loss_with_grad;
use crate::io::{read_checkpoint, write_atomic, write_checkpoint};
use crate::model::{self, init_model, Batch, ModelConfig, ModelWeights};
use crate::optim::{AdamWConfig, LearningRates, Moments, OptimState, ParamGroup};
use crate::alignment::build_groups;
use crate::reparam::ReparamModel;
use crate::runconfig::{model_config_text, parse_model_config};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub warmup_steps: u64,
    /// Decay linearly to zero over the run after warmup.
    pub lr_decay: bool,
    pub adamw: AdamWConfig,
    pub log_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            seed: 0,
            lr: 1e-3,
            warmup_steps: 0,
            lr_decay: false,
            adamw: AdamWConfig::default(),
            log_interval: 10,
        }
    }
}

impl TrainConfig {
    fn rates(&self) -> LearningRates {
        LearningRates {
            warmup_steps: self.warmup_steps,
            decay_steps: if self.lr_decay { self.steps } else { 0 },
            ..LearningRates::uniform(self.lr)
        }
    }
}

/// Logit distillation target for a student.
#[derive(Clone, Copy)]
pub struct KdTarget<'a> {
    pub teacher: &'a ModelWeights,
    pub tau: f64,
}

/// Plain training of a single model.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub weights: ModelWeights,
    pub optim: OptimState,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(weights: ModelWeights, config: TrainConfig) -> Self {
        let optim = OptimState::new(config.adamw);
        Self {
            weights,
            optim,
            config,
        }
    }

    pub fn step_index(&self) -> u64 {
        self.optim.step()
    }

    /// One AdamW step on the hard loss, or on `½·hard + ½·KD` with a target.
    pub fn step(&mut self, batch: &Batch, kd: Option<KdTarget<'_>>) -> Result<f64> {
        let tr = model::trace_masked(&self.weights, batch)?;
        let ce = model::masked_cross_entropy(&tr, batch)?;
        let (loss, grad) = match kd {
            None => (ce.loss, ce.grad),
            Some(kd) => {
                let rows = tr.logit_rows.as_deref().expect("trace_masked");
                let t_logits = model::forward(kd.teacher, batch)?.logits.select_rows(rows)?;
                let (kd_loss, mut kd_grad) =
                    kd_logit_loss_with_grad(&tr.output.logits, &t_logits, kd.tau)?;
                let mut grad = ce.grad;
                grad.scale(0.5);
                kd_grad.scale(0.5);
                grad.add_assign(&kd_grad)?;
                (0.5 * ce.loss + 0.5 * kd_loss, grad)
            }
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {loss} at step {}",
                self.optim.step()
            )));
        }
        let grads = model::backward(&self.weights, batch, &tr, &grad)?;
        let t = self.optim.begin_step();
        let lr = self.config.rates().at(t, ParamGroup::Base);
        for ((name, value), (_, g)) in self.weights.named_mut().into_iter().zip(grads.named()) {
            self.optim.update(&name, ParamGroup::Base, lr, value, g)?;
        }
        Ok(loss)
    }

    fn batch_config(&self) -> BatchConfig {
        BatchConfig {
            batch_size: self.config.batch_size,
            mode: self.weights.config.mode,
            vocab_size: self.weights.config.vocab_size,
            seed: self.config.seed,
        }
    }

    /// Trains until `config.steps`, reporting `(step, loss)` after each step.
    pub fn run(
        &mut self,
        seqs: &[Vec<u32>],
        kd: Option<KdTarget<'_>>,
        mut on_step: impl FnMut(u64, f64) -> Result<()>,
    ) -> Result<()> {
        self.run_until(seqs, self.config.steps, kd, &mut on_step)
    }

    /// Trains until `until` completed steps (capped at `config.steps`).
    pub fn run_until(
        &mut self,
        seqs: &[Vec<u32>],
        until: u64,
        kd: Option<KdTarget<'_>>,
        mut on_step: impl FnMut(u64, f64) -> Result<()>,
    ) -> Result<()> {
        let mut batcher = Batcher::new(seqs, self.batch_config())?;
        while self.step_index() < until.min(self.config.steps) {
            let step = self.step_index();
            let loss = self.step(&batcher.batch(step)?, kd)?;
            on_step(step, loss)?;
        }
        Ok(())
    }
}

/// Plain training of a freshly initialized model with the given budget.
pub fn train_scratch_baseline(config: &ModelConfig, seqs: &[Vec<u32>], budget: &TrainConfig) -> Result<ModelWeights> {
    let mut t = Trainer::new(init_model(config, budget.seed)?, budget.clone());
    t.run(seqs, None, |_, _| Ok(()))?;
    Ok(t.weights)
}

/// Training on `½·hard + ½·KL(teacher ‖ student)` at temperature `tau`.
pub fn train_kd_baseline(
    config: &ModelConfig,
    teacher: &ModelWeights,
    seqs: &[Vec<u32>],
    budget: &TrainConfig,
    tau: f64,
) -> Result<ModelWeights> {
    let mut t = Trainer::new(init_model(config, budget.seed)?, budget.clone());
    t.run(seqs, Some(KdTarget { teacher, tau }), |_, _| Ok(()))?;
    Ok(t.weights)
}

/// Runs a distiller until `until` completed steps (capped at its budget).
pub fn run_distill(
    d: &mut Distiller,
    seqs: &[Vec<u32>],
    until: u64,
    mut on_step: impl FnMut(&Distiller, &StepRecord) -> Result<()>,
) -> Result<()> {
    let cfg = BatchConfig {
        batch_size: d.config.batch_size,
        mode: d.model.config().mode,
        vocab_size: d.model.config().vocab_size,
        seed: d.config.seed,
    };
    let mut batcher = Batcher::new(seqs, cfg)?;
    while d.step_index() < until.min(d.config.steps) {
        let batch = batcher.batch(d.step_index())?;
        let rec = d.step(&batch)?;
        on_step(d, &rec)?;
    }
    Ok(())
}

/// Whether a step belongs in the training log.
pub fn should_log(rec: &StepRecord, log_interval: u64, last_step: u64) -> bool {
    rec.grew || rec.step % log_interval.max(1) == 0 || rec.step + 1 == last_step
}

pub const MODEL_FILE: &str = "model.ckpt";
pub const CONFIG_SUFFIX: &str = "cfg";
pub const OPTIM_FILE: &str = "optim.ckpt";
pub const STATE_FILE: &str = "state.txt";
pub const REPARAM_FILE: &str = "reparam.ckpt";

/// Sidecar path holding the model configuration of a checkpoint.
pub fn config_path(ckpt: &Path) -> std::path::PathBuf {
    ckpt.with_extension(CONFIG_SUFFIX)
}

pub fn save_model(path: &Path, w: &ModelWeights) -> Result<()> {
    let tensors: BTreeMap<String, Tensor> = w.clone().into_named();
    write_checkpoint(path, &tensors)?;
    write_atomic(&config_path(path), model_config_text(&w.config).as_bytes())
}

pub fn load_model(path: &Path) -> Result<ModelWeights> {
    let cfg_text = fs::read_to_string(config_path(path))?;
    let cfg = parse_model_config(&cfg_text)?;
    ModelWeights::from_named(cfg, read_checkpoint(path)?)
}

fn save_optim(path: &Path, o: &OptimState) -> Result<()> {
    let mut t = BTreeMap::new();
    for (name, m) in o.moments() {
        t.insert(format!("optim.m.{name}"), m.first.clone());
        t.insert(format!("optim.v.{name}"), m.second.clone());
    }
    write_checkpoint(path, &t)
}

fn load_optim(path: &Path, config: AdamWConfig, step: u64) -> Result<OptimState> {
    let mut t = read_checkpoint(path)?;
    let mut moments = BTreeMap::new();
    let names: Vec<String> = t
        .keys()
        .filter_map(|k| k.strip_prefix("optim.m.").map(str::to_string))
        .collect();
    for name in names {
        let first = t.remove(&format!("optim.m.{name}")).expect("listed");
        let second = t
            .remove(&format!("optim.v.{name}"))
            .ok_or_else(|| Error::Format(format!("missing second moment for {name}")))?;
        moments.insert(name, Moments { first, second });
    }
    if let Some(k) = t.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {k} in optimizer state")));
    }
    OptimState::restore(config, step, moments)
}

fn save_step(dir: &Path, step: u64) -> Result<()> {
    write_atomic(&dir.join(STATE_FILE), format!("step = {step}\n").as_bytes())
}

fn load_step(dir: &Path) -> Result<u64> {
    let text = fs::read_to_string(dir.join(STATE_FILE))?;
    text.lines()
        .find_map(|l| l.strip_prefix("step = "))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::Format("state file lacks `step = N`".into()))
}

/// Writes weights, optimizer moments and step counter into `dir`.
pub fn save_trainer(dir: &Path, t: &Trainer) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_model(&dir.join(MODEL_FILE), &t.weights)?;
    save_optim(&dir.join(OPTIM_FILE), &t.optim)?;
    save_step(dir, t.step_index())
}

pub fn load_trainer(dir: &Path, config: TrainConfig) -> Result<Trainer> {
    let weights = load_model(&dir.join(MODEL_FILE))?;
    let step = load_step(dir)?;
    let optim = load_optim(&dir.join(OPTIM_FILE), config.adamw, step)?;
    Ok(Trainer {
        weights,
        optim,
        config,
    })
}

/// Teacher tensors, leader compactors (`compactor.<slot>`) and masks
/// (`mask.<group>`, 1 = dropped).
pub fn save_reparam(path: &Path, model: &ReparamModel, masks: &MaskState) -> Result<()> {
    let mut t = model.teacher.clone().into_named();
    for g in model.groups() {
        t.insert(compactor_param_name(g.leader), model.weight(g.leader).clone());
    }
    for gm in &masks.groups {
        let v: Vec<f32> = gm.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        t.insert(format!("mask.{}", gm.group_id), Tensor::vector(v));
    }
    write_checkpoint(path, &t)?;
    write_atomic(&config_path(path), model_config_text(&model.teacher.config).as_bytes())
}

/// Loads a re-parameterized model and the raw masks stored with it.
pub fn load_reparam(path: &Path) -> Result<(ReparamModel, BTreeMap<usize, Vec<bool>>)> {
    let cfg = parse_model_config(&fs::read_to_string(config_path(path))?)?;
    let mut tensors = read_checkpoint(path)?;
    let mut leaders = Vec::new();
    for g in build_groups(cfg.layers) {
        let name = compactor_param_name(g.leader);
        let w = tensors
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
        leaders.push((g.leader, w));
    }
    let mut masks = BTreeMap::new();
    let mask_names: Vec<String> = tensors.keys().filter(|k| k.starts_with("mask.")).cloned().collect();
    for name in mask_names {
        let id: usize = name["mask.".len()..]
            .parse()
            .map_err(|_| Error::Format(format!("bad mask name {name}")))?;
        let t = tensors.remove(&name).expect("listed");
        let bits = t
            .data()
            .iter()
            .map(|&v| match v {
                0.0 => Ok(false),
                1.0 => Ok(true),
                _ => Err(Error::Format(format!("{name} holds a value other than 0/1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        masks.insert(id, bits);
    }
    let teacher = ModelWeights::from_named(cfg, tensors)?;
    Ok((ReparamModel::from_parts(teacher, leaders)?, masks))
}

/// Installs stored masks into a fresh mask state, checking sizes.
pub fn restore_masks(state: &mut MaskState, stored: &BTreeMap<usize, Vec<bool>>) -> Result<()> {
    for gm in &mut state.groups {
        if let Some(bits) = stored.get(&gm.group_id) {
            if bits.len() != gm.size() {
                return Err(Error::State(format!(
                    "stored mask of group {} has {} entries, expected {}",
                    gm.group_id,
                    bits.len(),
                    gm.size()
                )));
            }
            let k = bits.iter().filter(|&&b| b).count();
            if k > gm.drop_target {
                return Err(Error::State(format!(
                    "stored mask of group {} drops {k} > target {}",
                    gm.group_id, gm.drop_target
                )));
            }
            gm.mask = bits.clone();
        }
    }
    Ok(())
}

/// Writes the full distillation state into `dir`.
pub fn save_distiller(dir: &Path, d: &Distiller) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_reparam(&dir.join(REPARAM_FILE), &d.model, &d.masks)?;
    save_optim(&dir.join(OPTIM_FILE), &d.optim)?;
    save_step(dir, d.step_index())
}

pub fn load_distiller(dir: &Path, config: crate::distill::DistillConfig) -> Result<Distiller> {
    let (model, masks) = load_reparam(&dir.join(REPARAM_FILE))?;
    let step = load_step(dir)?;
    let mut d = Distiller::new(model, config)?;
    restore_masks(&mut d.masks, &masks)?;
    d.sync_ln_stats()?;
    d.optim = load_optim(&dir.join(OPTIM_FILE), d.config.adamw, step)?;
    Ok(d)
}
