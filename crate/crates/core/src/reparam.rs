//! Compactors wrapped around every linear map of a teacher.
//!
//! Each wrapped weight `W` computes `rc · W · cc`, with the bias carried
//! through the column compactor as `b · cc`. All compactors start as the
//! identity so the wrapped model reproduces the teacher exactly.
//!
//! Training runs the ordinary model forward/backward on the effective
//! weights, then maps effective gradients back onto teacher weights and
//! compactors.

use std::fmt;

use crate::alignment::{build_groups, broadcast_all, AlignmentGroup};
use crate::error::{Error, Result};
use crate::linalg::{gemm_new, triple_product, View};
use crate::model::{self, Batch, ForwardOutput, ModelConfig, ModelWeights};
use crate::tensor::Tensor;

/// Norms below this are treated as zero by the penalty gradient.
pub const NORM_GUARD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Orientation {
    Row,
    Column,
}

/// A teacher weight that can carry compactors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Site {
    /// Token, position and segment tables (shared column compactor).
    Embedding,
    Query(usize),
    Key(usize),
    Value(usize),
    AttnOutput(usize),
    Up(usize),
    Down(usize),
    /// Output projection `W_out` (tied to the token table by default).
    Output,
}

/// Dimension family a compactor acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Residual,
    AttnInner(usize),
    FfnInner(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Slot {
    pub site: Site,
    pub orientation: Orientation,
}

const LAYER_SITES: usize = 6;
const SLOTS_PER_LAYER: usize = 2 * LAYER_SITES;

impl Site {
    fn layer_site(l: usize, k: usize) -> Site {
        match k {
            0 => Site::Query(l),
            1 => Site::Key(l),
            2 => Site::Value(l),
            3 => Site::AttnOutput(l),
            4 => Site::Up(l),
            _ => Site::Down(l),
        }
    }

    /// Layer index and position within the layer, for per-layer sites.
    fn layer_pos(&self) -> Option<(usize, usize)> {
        match *self {
            Site::Query(l) => Some((l, 0)),
            Site::Key(l) => Some((l, 1)),
            Site::Value(l) => Some((l, 2)),
            Site::AttnOutput(l) => Some((l, 3)),
            Site::Up(l) => Some((l, 4)),
            Site::Down(l) => Some((l, 5)),
            Site::Embedding | Site::Output => None,
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Site::Embedding => f.write_str("embedding"),
            Site::Output => f.write_str("output"),
            Site::Query(l) => write!(f, "layer.{l}.query"),
            Site::Key(l) => write!(f, "layer.{l}.key"),
            Site::Value(l) => write!(f, "layer.{l}.value"),
            Site::AttnOutput(l) => write!(f, "layer.{l}.attn_out"),
            Site::Up(l) => write!(f, "layer.{l}.up"),
            Site::Down(l) => write!(f, "layer.{l}.down"),
        }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let o = match self.orientation {
            Orientation::Row => "row",
            Orientation::Column => "column",
        };
        write!(f, "{}.{o}", self.site)
    }
}

impl Slot {
    pub fn row(site: Site) -> Self {
        Slot {
            site,
            orientation: Orientation::Row,
        }
    }

    pub fn column(site: Site) -> Self {
        Slot {
            site,
            orientation: Orientation::Column,
        }
    }

    /// Every slot of an `layers`-layer model in canonical order.
    pub fn all(layers: usize) -> Vec<Slot> {
        let mut v = vec![Slot::column(Site::Embedding)];
        for l in 0..layers {
            for k in 0..LAYER_SITES {
                let site = Site::layer_site(l, k);
                v.push(Slot::row(site));
                v.push(Slot::column(site));
            }
        }
        v.push(Slot::row(Site::Output));
        v
    }

    /// Position of this slot in [`Slot::all`].
    pub fn index(&self, layers: usize) -> Option<usize> {
        let o = usize::from(self.orientation == Orientation::Column);
        match (self.site, self.orientation) {
            (Site::Embedding, Orientation::Column) => Some(0),
            (Site::Output, Orientation::Row) => Some(1 + SLOTS_PER_LAYER * layers),
            (Site::Embedding | Site::Output, _) => None,
            (site, _) => {
                let (l, k) = site.layer_pos()?;
                (l < layers).then(|| 1 + SLOTS_PER_LAYER * l + 2 * k + o)
            }
        }
    }

    pub fn family(&self) -> Family {
        use Orientation::*;
        match (self.site, self.orientation) {
            (Site::Query(l) | Site::Key(l) | Site::Value(l), Column) => Family::AttnInner(l),
            (Site::AttnOutput(l), Row) => Family::AttnInner(l),
            (Site::Up(l), Column) => Family::FfnInner(l),
            (Site::Down(l), Row) => Family::FfnInner(l),
            _ => Family::Residual,
        }
    }
}

impl Family {
    pub fn size(&self, cfg: &ModelConfig) -> usize {
        match *self {
            Family::Residual => cfg.hidden,
            Family::AttnInner(l) => cfg.layer(l).attn(),
            Family::FfnInner(l) => cfg.layer(l).ffn,
        }
    }
}

/// A square map inserted before (row) or after (column) a teacher weight.
#[derive(Clone, Debug, PartialEq)]
pub struct Compactor {
    pub slot: Slot,
    pub weight: Tensor,
    pub group_id: usize,
    pub is_leader: bool,
}

impl Compactor {
    pub fn orientation(&self) -> Orientation {
        self.slot.orientation
    }

    pub fn family(&self) -> Family {
        self.slot.family()
    }
}

/// Teacher weights plus one compactor per slot.
#[derive(Clone, Debug, PartialEq)]
pub struct ReparamModel {
    pub teacher: ModelWeights,
    compactors: Vec<Compactor>,
    groups: Vec<AlignmentGroup>,
    ln_excluded: Option<Vec<bool>>,
}

/// Gradients of a loss w.r.t. teacher weights and every compactor slot.
#[derive(Clone, Debug)]
pub struct ReparamGrads {
    pub base: ModelWeights,
    /// Indexed like [`ReparamModel::compactors`].
    pub compactors: Vec<Tensor>,
}

impl ReparamGrads {
    pub fn get(&self, slot: Slot, layers: usize) -> &Tensor {
        &self.compactors[slot.index(layers).expect("valid slot")]
    }
}

/// Loss, gradients and forward output of one batch.
pub struct ReparamStep {
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
    pub grads: ReparamGrads,
}

/// Wraps every linear map of `teacher` with identity compactors.
pub fn insert_compactors(teacher: ModelWeights) -> ReparamModel {
    let cfg = &teacher.config;
    let groups = build_groups(cfg.layers);
    let mut compactors: Vec<Compactor> = Slot::all(cfg.layers)
        .into_iter()
        .map(|slot| Compactor {
            slot,
            weight: Tensor::identity(slot.family().size(cfg)),
            group_id: usize::MAX,
            is_leader: false,
        })
        .collect();
    for g in &groups {
        for (slot, _) in &g.members {
            let c = &mut compactors[slot.index(cfg.layers).expect("grouped slot exists")];
            c.group_id = g.id;
            c.is_leader = *slot == g.leader;
        }
    }
    ReparamModel {
        teacher,
        compactors,
        groups,
        ln_excluded: None,
    }
}

fn view(t: &Tensor) -> View<'_> {
    let (r, c) = t.dims2().expect("2-D tensor");
    View::dense(t.data(), 0, r, c)
}

fn row_view(t: &Tensor) -> View<'_> {
    View::dense(t.data(), 0, 1, t.len())
}

fn product3(a: &Tensor, b: &Tensor, c: &Tensor) -> Result<Tensor> {
    let data = triple_product(view(a), view(b), view(c));
    Tensor::new(&[a.rows(), c.cols()], data)
}

fn product(a: View<'_>, b: View<'_>) -> Result<Tensor> {
    let (r, c) = (a.rows(), b.cols());
    Tensor::new(&[r, c], gemm_new(a, b))
}

/// Gradients of `W_eff = rc·W·cc`, `b_eff = b·cc` given `G = ∂/∂W_eff` and
/// `g_b = ∂/∂b_eff`: returns `(dW, db, d_rc, d_cc)`.
fn wrapped_backward(
    w: &Tensor,
    b: &Tensor,
    rc: &Tensor,
    cc: &Tensor,
    g: &Tensor,
    g_b: &Tensor,
) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let dw = product3(&rc.transpose()?, g, &cc.transpose()?)?;
    let db = product(row_view(g_b), view(cc).t())?.reshape(&[b.len()])?;
    let wc = product(view(w), view(cc))?;
    let d_rc = product(view(g), view(&wc).t())?;
    let rw = product(view(rc), view(w))?;
    let mut d_cc = product(view(&rw).t(), view(g))?;
    let outer = product(row_view(b).t(), row_view(g_b))?;
    d_cc.add_assign(&outer)?;
    Ok((dw, db, d_rc, d_cc))
}

impl ReparamModel {
    pub fn config(&self) -> &ModelConfig {
        &self.teacher.config
    }

    pub fn compactors(&self) -> &[Compactor] {
        &self.compactors
    }

    pub fn groups(&self) -> &[AlignmentGroup] {
        &self.groups
    }

    pub fn compactor(&self, slot: Slot) -> &Compactor {
        &self.compactors[slot.index(self.config().layers).expect("valid slot")]
    }

    /// Direct access to a compactor weight. Training code writes leaders
    /// only and then calls [`ReparamModel::broadcast`].
    pub fn weight_mut(&mut self, slot: Slot) -> &mut Tensor {
        let i = slot.index(self.config().layers).expect("valid slot");
        &mut self.compactors[i].weight
    }

    pub fn weight(&self, slot: Slot) -> &Tensor {
        &self.compactor(slot).weight
    }

    /// Copies every leader to its group members (transposed for Flip).
    pub fn broadcast(&mut self) -> Result<()> {
        let groups = self.groups.clone();
        broadcast_all(self, &groups)
    }

    /// Replaces a compactor weight, checking its shape.
    pub fn set_weight(&mut self, slot: Slot, w: Tensor) -> Result<()> {
        let cur = self.weight_mut(slot);
        if cur.shape() != w.shape() {
            return Err(Error::shape("set_weight", cur.shape(), w.shape()));
        }
        *cur = w;
        Ok(())
    }

    /// The ordinary (untied) model computed by the wrapped network.
    pub fn effective_weights(&self) -> Result<ModelWeights> {
        let t = &self.teacher;
        let mut cfg = t.config.clone();
        cfg.tie_output = false;
        let c_emb = self.weight(Slot::column(Site::Embedding));
        let mut eff = ModelWeights {
            config: cfg,
            token: product(view(&t.token), view(c_emb))?,
            position: product(view(&t.position), view(c_emb))?,
            segment: t
                .segment
                .as_ref()
                .map(|s| product(view(s), view(c_emb)))
                .transpose()?,
            emb_ln_gamma: t.emb_ln_gamma.clone(),
            emb_ln_beta: t.emb_ln_beta.clone(),
            layers: t.layers.clone(),
            output: None,
            output_bias: t.output_bias.clone(),
        };
        for (l, lw) in eff.layers.iter_mut().enumerate() {
            for k in 0..LAYER_SITES {
                let site = Site::layer_site(l, k);
                let rc = self.weight(Slot::row(site));
                let cc = self.weight(Slot::column(site));
                let (w, b) = layer_pair_mut(lw, k);
                *w = product3(rc, w, cc)?;
                *b = product(row_view(b), view(cc))?.reshape(&[cc.cols()])?;
            }
        }
        let rc_out = self.weight(Slot::row(Site::Output));
        eff.output = Some(match &t.output {
            Some(w) => product(view(rc_out), view(w))?,
            None => product(view(rc_out), view(&t.token).t())?,
        });
        Ok(eff)
    }

    /// Hidden coordinates left out of layer-norm statistics, if any.
    pub fn ln_excluded(&self) -> Option<&[bool]> {
        self.ln_excluded.as_deref()
    }

    /// Leaves the `true` coordinates of the hidden width out of every layer
    /// norm's mean and variance; `None` restores plain layer norm.
    pub fn set_ln_excluded(&mut self, excluded: Option<Vec<bool>>) -> Result<()> {
        if let Some(e) = &excluded {
            if e.len() != self.teacher.config.hidden {
                return Err(Error::shape("set_ln_excluded", &[e.len()], &[self.teacher.config.hidden]));
            }
        }
        self.ln_excluded = excluded.filter(|e| e.iter().any(|&b| b));
        Ok(())
    }

    /// Forward pass of the wrapped network.
    pub fn forward(&self, batch: &Batch) -> Result<ForwardOutput> {
        model::forward_excluding(&self.effective_weights()?, batch, self.ln_excluded())
    }

    /// Maps gradients w.r.t. the effective weights onto the parameters.
    pub fn map_gradients(&self, eff_grads: &ModelWeights) -> Result<ReparamGrads> {
        let t = &self.teacher;
        let layers = t.config.layers;
        let mut base = t.zeros_like();
        let mut comp: Vec<Tensor> = self
            .compactors
            .iter()
            .map(|c| Tensor::zeros(c.weight.shape()))
            .collect();

        for (l, (tw, gw)) in t.layers.iter().zip(&eff_grads.layers).enumerate() {
            for k in 0..LAYER_SITES {
                let site = Site::layer_site(l, k);
                let rc = self.weight(Slot::row(site));
                let cc = self.weight(Slot::column(site));
                let (w, b) = layer_pair(tw, k);
                let (g, g_b) = layer_pair(gw, k);
                let (dw, db, d_rc, d_cc) = wrapped_backward(w, b, rc, cc, g, g_b)?;
                let (bw, bb) = layer_pair_mut(&mut base.layers[l], k);
                *bw = dw;
                *bb = db;
                comp[Slot::row(site).index(layers).expect("slot")] = d_rc;
                comp[Slot::column(site).index(layers).expect("slot")] = d_cc;
            }
            let bl = &mut base.layers[l];
            bl.ln1_gamma = gw.ln1_gamma.clone();
            bl.ln1_beta = gw.ln1_beta.clone();
            bl.ln2_gamma = gw.ln2_gamma.clone();
            bl.ln2_beta = gw.ln2_beta.clone();
        }

        // Embedding tables: E_eff = E·C.
        let c_emb = self.weight(Slot::column(Site::Embedding));
        let c_t = view(c_emb).t();
        base.token = product(view(&eff_grads.token), c_t)?;
        base.position = product(view(&eff_grads.position), c_t)?;
        let mut dc = product(view(&t.token).t(), view(&eff_grads.token))?;
        dc.add_assign(&product(view(&t.position).t(), view(&eff_grads.position))?)?;
        if let (Some(s), Some(gs)) = (&t.segment, &eff_grads.segment) {
            base.segment = Some(product(view(gs), c_t)?);
            dc.add_assign(&product(view(s).t(), view(gs))?)?;
        }
        comp[0] = dc;
        base.emb_ln_gamma = eff_grads.emb_ln_gamma.clone();
        base.emb_ln_beta = eff_grads.emb_ln_beta.clone();
        base.output_bias = eff_grads.output_bias.clone();

        // Output head: W_out_eff = rc·S with S = W_out or W_Tᵀ.
        let g_out = eff_grads
            .output
            .as_ref()
            .ok_or_else(|| Error::State("effective gradients lack an output head".into()))?;
        let rc_out = self.weight(Slot::row(Site::Output));
        let ds = product(view(rc_out).t(), view(g_out))?;
        let out_idx = Slot::row(Site::Output).index(layers).expect("slot");
        match &t.output {
            Some(w) => {
                comp[out_idx] = product(view(g_out), view(w).t())?;
                base.output = Some(ds);
            }
            None => {
                comp[out_idx] = product(view(g_out), view(&t.token))?;
                base.token.add_assign(&ds.transpose()?)?;
            }
        }
        Ok(ReparamGrads {
            base,
            compactors: comp,
        })
    }

    /// Cross-entropy on `batch.loss_mask` with gradients for all parameters.
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<ReparamStep> {
        let eff = self.effective_weights()?;
        let tr = model::trace_masked_excluding(&eff, batch, self.ln_excluded())?;
        let ce = model::masked_cross_entropy(&tr, batch)?;
        let eff_grads = model::backward(&eff, batch, &tr, &ce.grad)?;
        let grads = self.map_gradients(&eff_grads)?;
        Ok(ReparamStep {
            loss: ce.loss,
            correct: ce.correct,
            count: ce.count,
            grads,
        })
    }

    pub(crate) fn from_parts(
        teacher: ModelWeights,
        leaders: Vec<(Slot, Tensor)>,
    ) -> Result<ReparamModel> {
        let mut m = insert_compactors(teacher);
        for (slot, w) in leaders {
            if !m.compactor(slot).is_leader {
                return Err(Error::Format(format!("{slot} is not a group leader")));
            }
            m.set_weight(slot, w)?;
        }
        m.broadcast()?;
        Ok(m)
    }
}

fn layer_pair(lw: &model::LayerWeights, k: usize) -> (&Tensor, &Tensor) {
    match k {
        0 => (&lw.wq, &lw.bq),
        1 => (&lw.wk, &lw.bk),
        2 => (&lw.wv, &lw.bv),
        3 => (&lw.wo, &lw.bo),
        4 => (&lw.wu, &lw.bu),
        _ => (&lw.wd, &lw.bd),
    }
}

fn layer_pair_mut(lw: &mut model::LayerWeights, k: usize) -> (&mut Tensor, &mut Tensor) {
    match k {
        0 => (&mut lw.wq, &mut lw.bq),
        1 => (&mut lw.wk, &mut lw.bk),
        2 => (&mut lw.wv, &mut lw.bv),
        3 => (&mut lw.wo, &mut lw.bo),
        4 => (&mut lw.wu, &mut lw.bu),
        _ => (&mut lw.wd, &mut lw.bd),
    }
}

/// Weight and bias of a per-layer site; `None` for embedding and output.
pub fn site_weight(w: &ModelWeights, site: Site) -> Option<(&Tensor, &Tensor)> {
    let (l, k) = site.layer_pos()?;
    Some(layer_pair(&w.layers[l], k))
}

pub fn site_weight_mut(w: &mut ModelWeights, site: Site) -> Option<(&mut Tensor, &mut Tensor)> {
    let (l, k) = site.layer_pos()?;
    Some(layer_pair_mut(&mut w.layers[l], k))
}

/// All per-layer sites of layer `l`, in canonical order.
pub fn layer_sites(l: usize) -> [Site; LAYER_SITES] {
    std::array::from_fn(|k| Site::layer_site(l, k))
}

/// Gradient of `Σ_j ‖w_j‖_p` over columns (or rows for `Row`).
///
/// For `p = 2` each column maps to `w_j / ‖w_j‖₂`; columns whose norm is
/// below [`NORM_GUARD`] map to exact zeros.
pub fn penalty_gradient(weight: &Tensor, orientation: Orientation, p: f64) -> Result<Tensor> {
    let (r, c) = weight.dims2()?;
    let norms = match orientation {
        Orientation::Column => weight.column_norms(p)?,
        Orientation::Row => weight.row_norms(p)?,
    };
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        for j in 0..c {
            let n = match orientation {
                Orientation::Column => norms[j],
                Orientation::Row => norms[i],
            };
            if n < NORM_GUARD {
                continue;
            }
            let w = weight.at(i, j) as f64;
            let g = if p == 2.0 {
                w / n
            } else {
                w.signum() * w.abs().powf(p - 1.0) / n.powf(p - 1.0)
            };
            out.set(i, j, g as f32);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slot_indices_follow_canonical_order() {
        for layers in [0, 1, 3] {
            for (i, s) in Slot::all(layers).iter().enumerate() {
                assert_eq!(s.index(layers), Some(i), "{s}");
            }
        }
        assert_eq!(Slot::row(Site::Embedding).index(2), None);
        assert_eq!(Slot::row(Site::Query(2)).index(2), None);
    }

    #[test]
    fn degenerate_stack_has_two_slots() {
        let slots = Slot::all(0);
        assert_eq!(
            slots,
            vec![Slot::column(Site::Embedding), Slot::row(Site::Output)]
        );
    }

    #[test]
    fn penalty_examples() {
        let w = Tensor::from_rows(&[&[3.0, 0.0], &[4.0, 0.0]]).unwrap();
        let g = penalty_gradient(&w, Orientation::Column, 2.0).unwrap();
        assert_eq!(g.data(), &[0.6, 0.0, 0.8, 0.0]);
        let id = Tensor::identity(3);
        assert_eq!(penalty_gradient(&id, Orientation::Row, 2.0).unwrap(), id);
    }
}
