//! Progressive compactor pruning.
//!
//! Every `interval` steps each unfinished group grows its mask by `d_inc`
//! and reselects which leader columns are penalized. Masked columns follow
//! the norm-penalty gradient, unmasked ones the task gradient; the teacher
//! weights always take the task gradient at their own (lower) rate.

use std::fmt;
use std::str::FromStr;

use crate::alignment::{check_alignment, leader_gradient, Color, GradientPolicy};
use crate::error::{Error, Result};
use crate::merge::LnMerge;
use crate::model::{Batch, LayerDims, ModelConfig};
use crate::optim::{AdamWConfig, LearningRates, OptimState, ParamGroup};
use crate::reparam::{penalty_gradient, Orientation, ReparamModel};
use crate::tensor::Tensor;

/// Mask growth per event: `max(1, ⌊(size_t − size_s)/16⌋)`.
pub fn increment_rule(size_t: usize, size_s: usize) -> Result<usize> {
    if size_t <= size_s {
        return Err(Error::Config(format!(
            "teacher size {size_t} must exceed target size {size_s}"
        )));
    }
    Ok(((size_t - size_s) / 16).max(1))
}

/// Indices of the `k` smallest scores, ties broken by smaller index, among
/// those not excluded.
fn smallest(scores: &[f64], k: usize, excluded: &[bool]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| !excluded[i]).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Marks the `k` smallest norms (ties to the smaller index).
pub fn select_mask(norms: &[f64], k: usize) -> Vec<bool> {
    let mut m = vec![false; norms.len()];
    for i in smallest(norms, k.min(norms.len()), &m.clone()) {
        m[i] = true;
    }
    m
}

/// How attention-inner heads are compressed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Strategy {
    /// Keep every head, shrink each head's width equally.
    #[default]
    DimReduce,
    /// Drop whole heads.
    HeadDrop,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::DimReduce => "dim_reduce",
            Strategy::HeadDrop => "head_drop",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dim_reduce" => Ok(Strategy::DimReduce),
            "head_drop" => Ok(Strategy::HeadDrop),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

/// Which hidden coordinates layer norms take their statistics from during
/// distillation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LnStats {
    /// Only coordinates the residual mask keeps, so the merged student's
    /// layer norms see the same statistics.
    #[default]
    Kept,
    /// Every teacher coordinate, dropped or not.
    All,
}

impl fmt::Display for LnStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LnStats::Kept => "kept",
            LnStats::All => "all",
        })
    }
}

impl FromStr for LnStats {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kept" => Ok(LnStats::Kept),
            "all" => Ok(LnStats::All),
            other => Err(Error::Config(format!("unknown ln_stats `{other}`"))),
        }
    }
}

/// Structural constraint on one group's mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskShape {
    Free,
    /// Whole head blocks of width `head_dim`.
    Heads { heads: usize, head_dim: usize },
    /// The same number of columns inside each head block.
    PerHead { heads: usize, head_dim: usize },
}

impl MaskShape {
    fn new(strategy: Strategy, heads: usize, head_dim: usize) -> Self {
        match strategy {
            Strategy::HeadDrop => MaskShape::Heads { heads, head_dim },
            Strategy::DimReduce => MaskShape::PerHead { heads, head_dim },
        }
    }

    /// Mask sizes must be multiples of this.
    pub fn quantum(&self) -> usize {
        match *self {
            MaskShape::Free => 1,
            MaskShape::Heads { head_dim, .. } => head_dim,
            MaskShape::PerHead { heads, .. } => heads,
        }
    }
}

/// Reselects a mask of size `k` under `shape`. With `pinned`, previously
/// masked entries stay masked and only the difference is chosen.
pub fn select_constrained(norms: &[f64], k: usize, shape: MaskShape, pinned: Option<&[bool]>) -> Result<Vec<bool>> {
    let s = norms.len();
    if k % shape.quantum() != 0 || k > s {
        return Err(Error::Config(format!(
            "mask size {k} is not a multiple of {} within {s}",
            shape.quantum()
        )));
    }
    let mut mask = pinned.map(<[bool]>::to_vec).unwrap_or_else(|| vec![false; s]);
    match shape {
        MaskShape::Free => {
            let have = mask.iter().filter(|&&m| m).count();
            for i in smallest(norms, k.saturating_sub(have), &mask.clone()) {
                mask[i] = true;
            }
        }
        MaskShape::Heads { heads, head_dim } => {
            let scores: Vec<f64> = (0..heads)
                .map(|h| norms[h * head_dim..(h + 1) * head_dim].iter().sum())
                .collect();
            let dropped: Vec<bool> = (0..heads).map(|h| mask[h * head_dim]).collect();
            let have = dropped.iter().filter(|&&d| d).count();
            for h in smallest(&scores, (k / head_dim).saturating_sub(have), &dropped) {
                mask[h * head_dim..(h + 1) * head_dim].fill(true);
            }
        }
        MaskShape::PerHead { heads, head_dim } => {
            let per = k / heads;
            for h in 0..heads {
                let r = h * head_dim..(h + 1) * head_dim;
                let block = &mut mask[r.clone()];
                let have = block.iter().filter(|&&m| m).count();
                for i in smallest(&norms[r], per.saturating_sub(have), &block.to_vec()) {
                    block[i] = true;
                }
            }
        }
    }
    Ok(mask)
}

/// Applies the head strategy to a mask of size `k` over leader norms.
pub fn constrain_mask_strategy(
    norms: &[f64],
    k: usize,
    strategy: Strategy,
    heads: usize,
    head_dim: usize,
) -> Result<Vec<bool>> {
    if heads * head_dim != norms.len() {
        return Err(Error::shape("constrain_mask_strategy", &[norms.len()], &[heads, head_dim]));
    }
    select_constrained(norms, k, MaskShape::new(strategy, heads, head_dim), None)
}

/// Takes column `i` (row `i` for `Row`) from `g_pen` where `mask[i]`, else
/// from `g_ori`.
pub fn fuse_gradients(g_ori: &Tensor, g_pen: &Tensor, mask: &[bool], orientation: Orientation) -> Result<Tensor> {
    if g_ori.shape() != g_pen.shape() {
        return Err(Error::shape("fuse_gradients", g_ori.shape(), g_pen.shape()));
    }
    let (r, c) = g_ori.dims2()?;
    let axis = match orientation {
        Orientation::Column => c,
        Orientation::Row => r,
    };
    if mask.len() != axis {
        return Err(Error::shape("fuse_gradients mask", &[mask.len()], &[axis]));
    }
    let mut out = g_ori.clone();
    for i in 0..r {
        for j in 0..c {
            let m = match orientation {
                Orientation::Column => mask[j],
                Orientation::Row => mask[i],
            };
            if m {
                out.set(i, j, g_pen.at(i, j));
            }
        }
    }
    Ok(out)
}

/// Training configuration of a distillation run.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Mask growth interval `N`.
    pub interval: u64,
    pub norm_p: f64,
    pub lr: LearningRates,
    pub adamw: AdamWConfig,
    pub strategy: Strategy,
    pub policy: GradientPolicy,
    pub hidden_target: usize,
    /// Attention-inner width (`heads · head_dim`) kept per layer.
    pub attn_target: Option<usize>,
    pub ffn_target: Option<usize>,
    /// Per-layer overrides; empty means the global target everywhere.
    pub attn_target_layers: Vec<usize>,
    pub ffn_target_layers: Vec<usize>,
    pub penalty_scale: f64,
    pub pin_mask: bool,
    pub ln_stats: LnStats,
    pub ln_merge: LnMerge,
    /// Log every this many steps (growth events are always logged).
    pub log_interval: u64,
}

impl DistillConfig {
    /// Defaults for compressing the residual width to `hidden_target`.
    pub fn new(hidden_target: usize) -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            seed: 0,
            interval: 500,
            norm_p: 2.0,
            lr: LearningRates::default(),
            adamw: AdamWConfig::default(),
            strategy: Strategy::DimReduce,
            policy: GradientPolicy::LeaderOnly,
            hidden_target,
            attn_target: None,
            ffn_target: None,
            attn_target_layers: Vec::new(),
            ffn_target_layers: Vec::new(),
            penalty_scale: 1.0,
            pin_mask: false,
            ln_stats: LnStats::Kept,
            ln_merge: LnMerge::Select,
            log_interval: 10,
        }
    }

    fn attn_target(&self, l: usize, teacher: &LayerDims) -> usize {
        self.attn_target_layers
            .get(l)
            .copied()
            .or(self.attn_target)
            .unwrap_or(teacher.attn())
    }

    fn ffn_target(&self, l: usize, teacher: &LayerDims) -> usize {
        self.ffn_target_layers
            .get(l)
            .copied()
            .or(self.ffn_target)
            .unwrap_or(teacher.ffn)
    }

    /// Checks the targets against a teacher, listing every violation.
    pub fn validate(&self, teacher: &ModelConfig) -> Result<()> {
        let mut errs = Vec::new();
        if self.interval == 0 {
            errs.push("interval must be at least 1".to_string());
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be at least 1".to_string());
        }
        if !(self.norm_p >= 1.0) {
            errs.push(format!("norm_p must be at least 1 (got {})", self.norm_p));
        }
        if self.hidden_target == 0 || self.hidden_target > teacher.hidden {
            errs.push(format!(
                "hidden target {} must lie in 1..={}",
                self.hidden_target, teacher.hidden
            ));
        }
        for (name, v) in [("attn", &self.attn_target_layers), ("ffn", &self.ffn_target_layers)] {
            if !v.is_empty() && v.len() != teacher.layers {
                errs.push(format!(
                    "{name} per-layer targets list {} layers, teacher has {}",
                    v.len(),
                    teacher.layers
                ));
            }
        }
        for l in 0..teacher.layers {
            let d = teacher.layer(l);
            let a = self.attn_target(l, &d);
            let f = self.ffn_target(l, &d);
            if a == 0 || a > d.attn() {
                errs.push(format!("layer {l}: attention target {a} must lie in 1..={}", d.attn()));
            } else {
                let q = MaskShape::new(self.strategy, d.heads, d.head_dim).quantum();
                if (d.attn() - a) % q != 0 {
                    errs.push(match self.strategy {
                        Strategy::HeadDrop => format!(
                            "layer {l}: head_drop target {a} is not a multiple of head width {}",
                            d.head_dim
                        ),
                        Strategy::DimReduce => format!(
                            "layer {l}: dim_reduce target {a} is not a multiple of head count {}",
                            d.heads
                        ),
                    });
                }
            }
            if f == 0 || f > d.ffn {
                errs.push(format!("layer {l}: ffn target {f} must lie in 1..={}", d.ffn));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}

/// Mask bookkeeping of one alignment group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupMask {
    pub group_id: usize,
    /// `true` marks a penalized column (to be dropped).
    pub mask: Vec<bool>,
    /// Final number of dropped columns.
    pub drop_target: usize,
    pub d_inc: usize,
    pub shape: MaskShape,
}

impl GroupMask {
    pub fn k(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn size(&self) -> usize {
        self.mask.len()
    }

    pub fn is_complete(&self) -> bool {
        self.k() == self.drop_target
    }

    /// Number of growth events needed to reach the target.
    pub fn events_needed(&self) -> usize {
        self.drop_target.div_ceil(self.d_inc.max(1))
    }
}

/// One mask per alignment group, indexed by group id.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskState {
    pub groups: Vec<GroupMask>,
}

impl MaskState {
    /// Empty masks sized from the teacher and the run targets.
    pub fn new(model: &ReparamModel, cfg: &DistillConfig) -> Result<Self> {
        let t = model.config();
        cfg.validate(t)?;
        let groups = model
            .groups()
            .iter()
            .map(|g| {
                let (size, target, shape) = match g.color {
                    Color::Blue => (t.hidden, cfg.hidden_target, MaskShape::Free),
                    Color::Orange(l) => {
                        let d = t.layer(l);
                        (
                            d.attn(),
                            cfg.attn_target(l, &d),
                            MaskShape::new(cfg.strategy, d.heads, d.head_dim),
                        )
                    }
                    Color::Green(l) => {
                        let d = t.layer(l);
                        (d.ffn, cfg.ffn_target(l, &d), MaskShape::Free)
                    }
                };
                let q = shape.quantum();
                let d_inc = if size > target {
                    increment_rule(size, target)?.div_ceil(q) * q
                } else {
                    q
                };
                Ok(GroupMask {
                    group_id: g.id,
                    mask: vec![false; size],
                    drop_target: size - target,
                    d_inc,
                    shape,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { groups })
    }

    pub fn is_complete(&self) -> bool {
        self.groups.iter().all(GroupMask::is_complete)
    }
}

/// Per-group values reported after a step.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupRecord {
    pub group_id: usize,
    pub k: usize,
    /// Sum of leader column norms over masked columns, after the update.
    pub dropped_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    /// Whether any mask grew at this step.
    pub grew: bool,
    pub groups: Vec<GroupRecord>,
}

impl StepRecord {
    /// Log lines `step\tloss\tgroup_id\tk\tdropped_norm`, one per group.
    pub fn log_lines(&self) -> String {
        let mut s = String::new();
        for g in &self.groups {
            s.push_str(&format!(
                "{}\t{:.6}\t{}\t{}\t{:.6}\n",
                self.step, self.loss, g.group_id, g.k, g.dropped_norm
            ));
        }
        s
    }
}

/// Name under which a leader compactor is stored and optimized.
pub fn compactor_param_name(slot: impl fmt::Display) -> String {
    format!("compactor.{slot}")
}

/// Name under which a teacher tensor is optimized.
pub fn base_param_name(name: &str) -> String {
    format!("base.{name}")
}

/// A re-parameterized model in training.
#[derive(Clone, Debug)]
pub struct Distiller {
    pub model: ReparamModel,
    pub masks: MaskState,
    pub optim: OptimState,
    pub config: DistillConfig,
}

impl Distiller {
    pub fn new(model: ReparamModel, config: DistillConfig) -> Result<Self> {
        let masks = MaskState::new(&model, &config)?;
        let optim = OptimState::new(config.adamw);
        let mut d = Self {
            model,
            masks,
            optim,
            config,
        };
        d.sync_ln_stats()?;
        Ok(d)
    }

    /// Points the model's layer-norm statistics at the current residual mask.
    pub fn sync_ln_stats(&mut self) -> Result<()> {
        let excluded = match self.config.ln_stats {
            LnStats::Kept => Some(self.masks.groups[0].mask.clone()),
            LnStats::All => None,
        };
        self.model.set_ln_excluded(excluded)
    }

    /// Number of completed steps.
    pub fn step_index(&self) -> u64 {
        self.optim.step()
    }

    fn leader_norms(&self, group_id: usize) -> Result<Vec<f64>> {
        let leader = self.model.groups()[group_id].leader;
        self.model.weight(leader).column_norms(self.config.norm_p)
    }

    fn dropped_norm(&self, gm: &GroupMask) -> Result<f64> {
        let norms = self.leader_norms(gm.group_id)?;
        Ok(norms.iter().zip(&gm.mask).filter(|(_, &m)| m).map(|(n, _)| n).sum())
    }

    /// Grows and reselects masks when the schedule calls for it.
    fn maybe_grow(&mut self, step: u64) -> Result<bool> {
        if step % self.config.interval != 0 {
            return Ok(false);
        }
        let mut grew = false;
        for i in 0..self.masks.groups.len() {
            let gm = &self.masks.groups[i];
            if gm.is_complete() {
                continue;
            }
            let k = (gm.k() + gm.d_inc).min(gm.drop_target);
            let norms = self.leader_norms(gm.group_id)?;
            let pinned = self.config.pin_mask.then_some(gm.mask.as_slice());
            let mask = select_constrained(&norms, k, gm.shape, pinned)?;
            self.masks.groups[i].mask = mask;
            grew = true;
        }
        if grew {
            self.sync_ln_stats()?;
        }
        Ok(grew)
    }

    fn diagnostics(&self) -> String {
        let norms: Vec<String> = self
            .model
            .groups()
            .iter()
            .map(|g| format!("{}={:.4e}", g.id, self.model.weight(g.leader).frobenius_norm()))
            .collect();
        format!("group leader norms: {}", norms.join(" "))
    }

    /// One training step on `batch`: schedule, forward/backward, fusion,
    /// AdamW, leader broadcast.
    pub fn step(&mut self, batch: &Batch) -> Result<StepRecord> {
        let step = self.optim.step();
        let grew = self.maybe_grow(step)?;
        let out = self.model.loss_and_grads(batch)?;
        if !out.loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {} at step {step}; {}",
                out.loss,
                self.diagnostics()
            )));
        }
        let layers = self.model.config().layers;
        let mut fused = Vec::with_capacity(self.masks.groups.len());
        for (g, gm) in self.model.groups().iter().zip(&self.masks.groups) {
            let g_ori = leader_gradient(g, &out.grads, layers, self.config.policy)?;
            let leader_w = self.model.weight(g.leader);
            let mut g_pen = penalty_gradient(leader_w, Orientation::Column, self.config.norm_p)?;
            if self.config.penalty_scale != 1.0 {
                g_pen.scale(self.config.penalty_scale as f32);
            }
            fused.push((g.leader, fuse_gradients(&g_ori, &g_pen, &gm.mask, Orientation::Column)?));
        }

        let t = self.optim.begin_step();
        let lr_base = self.config.lr.at(t, ParamGroup::Base);
        let lr_comp = self.config.lr.at(t, ParamGroup::Compactor);
        let base_grads = out.grads.base;
        for ((name, value), (_, grad)) in self.model.teacher.named_mut().into_iter().zip(base_grads.named()) {
            self.optim
                .update(&base_param_name(&name), ParamGroup::Base, lr_base, value, grad)?;
        }
        for (slot, grad) in fused {
            let name = compactor_param_name(slot);
            let w = self.model.weight_mut(slot);
            self.optim.update(&name, ParamGroup::Compactor, lr_comp, w, &grad)?;
        }
        self.model.broadcast()?;

        let groups = self
            .masks
            .groups
            .iter()
            .map(|gm| {
                Ok(GroupRecord {
                    group_id: gm.group_id,
                    k: gm.k(),
                    dropped_norm: self.dropped_norm(gm)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(StepRecord {
            step,
            loss: out.loss,
            grew,
            groups,
        })
    }

    /// Verifies leader/member equality across every group.
    pub fn check_alignment(&self) -> Result<()> {
        check_alignment(&self.model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn increments() {
        assert_eq!(increment_rule(768, 516).unwrap(), 15);
        assert_eq!(increment_rule(64, 32).unwrap(), 2);
        assert_eq!(increment_rule(40, 30).unwrap(), 1);
        assert!(increment_rule(30, 30).is_err());
    }

    #[test]
    fn mask_selection() {
        assert_eq!(select_mask(&[0.1, 5.0, 0.3], 2), vec![true, false, true]);
        assert_eq!(select_mask(&[0.1, 5.0, 0.3], 0), vec![false; 3]);
        assert_eq!(select_mask(&[1.0; 5], 3), vec![true, true, true, false, false]);
    }

    #[test]
    fn head_drop_takes_weakest_block() {
        let norms = [0.25, 0.75, 4.5, 4.5, 4.5, 4.5, 4.5, 4.5];
        let m = constrain_mask_strategy(&norms, 2, Strategy::HeadDrop, 4, 2).unwrap();
        assert_eq!(m, vec![true, true, false, false, false, false, false, false]);
        assert!(constrain_mask_strategy(&norms, 3, Strategy::HeadDrop, 4, 2).is_err());
    }

    #[test]
    fn dim_reduce_is_balanced() {
        let norms = [0.5, 0.1, 0.9, 0.2, 9.0, 8.0, 7.0, 6.0];
        let m = constrain_mask_strategy(&norms, 4, Strategy::DimReduce, 2, 4).unwrap();
        assert_eq!(m, vec![false, true, false, true, false, false, true, true]);
    }

    #[test]
    fn pinned_selection_keeps_previous() {
        let prev = vec![false, false, true, false];
        let m = select_constrained(&[0.1, 0.2, 9.0, 0.3], 2, MaskShape::Free, Some(&prev)).unwrap();
        assert_eq!(m, vec![true, false, true, false]);
    }

    #[test]
    fn fusion_picks_streams() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[&[-1.0, -2.0], &[-3.0, -4.0]]).unwrap();
        let f = fuse_gradients(&a, &b, &[true, false], Orientation::Column).unwrap();
        assert_eq!(f.data(), &[-1.0, 2.0, -3.0, 4.0]);
        let f = fuse_gradients(&a, &b, &[true, false], Orientation::Row).unwrap();
        assert_eq!(f.data(), &[-1.0, -2.0, 3.0, 4.0]);
        assert_eq!(fuse_gradients(&a, &b, &[false, false], Orientation::Column).unwrap(), a);
        assert!(fuse_gradients(&a, &b, &[true], Orientation::Column).is_err());
    }
}
