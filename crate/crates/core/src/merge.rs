//! Folding compressed compactors into the teacher to obtain a student.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::alignment::Color;
use crate::distill::{GroupMask, MaskShape, MaskState};
use crate::error::{Error, Result};
use crate::linalg::{gemm_new, triple_product, View};
use crate::model::{LayerDims, ModelConfig, ModelWeights};
use crate::reparam::{layer_sites, site_weight, site_weight_mut, Orientation, ReparamModel, Site, Slot};
use crate::tensor::Tensor;

/// Keeps the unmasked columns (`Column`) or rows (`Row`) of a compactor.
pub fn compress_compactor(weight: &Tensor, mask: &[bool], orientation: Orientation) -> Result<Tensor> {
    let (r, c) = weight.dims2()?;
    let axis = match orientation {
        Orientation::Column => c,
        Orientation::Row => r,
    };
    if mask.len() != axis {
        return Err(Error::State(format!(
            "mask of length {} does not fit a compactor of size {axis}",
            mask.len()
        )));
    }
    let keep: Vec<usize> = (0..axis).filter(|&i| !mask[i]).collect();
    match orientation {
        Orientation::Column => weight.select_columns(&keep),
        Orientation::Row => weight.select_rows(&keep),
    }
}

fn view(t: &Tensor) -> Result<View<'_>> {
    let (r, c) = t.dims2()?;
    Ok(View::dense(t.data(), 0, r, c))
}

/// `rc · W · cc` in f64, with the identity for an absent side.
pub fn merge_linear(w: &Tensor, rc: Option<&Tensor>, cc: Option<&Tensor>) -> Result<Tensor> {
    let (b, c) = w.dims2()?;
    if let Some(rc) = rc {
        if rc.cols() != b {
            return Err(Error::shape("merge_linear", rc.shape(), w.shape()));
        }
    }
    if let Some(cc) = cc {
        if cc.rows() != c {
            return Err(Error::shape("merge_linear", w.shape(), cc.shape()));
        }
    }
    let rows = rc.map_or(b, Tensor::rows);
    let cols = cc.map_or(c, Tensor::cols);
    let data = match (rc, cc) {
        (Some(r), Some(k)) => triple_product(view(r)?, view(w)?, view(k)?),
        (Some(r), None) => gemm_new(view(r)?, view(w)?),
        (None, Some(k)) => gemm_new(view(w)?, view(k)?),
        (None, None) => w.data().to_vec(),
    };
    Tensor::new(&[rows, cols], data)
}

/// `b · cc` for a bias vector.
pub fn merge_bias(b: &Tensor, cc: &Tensor) -> Result<Tensor> {
    if cc.dims2()?.0 != b.len() {
        return Err(Error::shape("merge_bias", b.shape(), cc.shape()));
    }
    let data = gemm_new(View::dense(b.data(), 0, 1, b.len()), view(cc)?);
    Tensor::new(&[cc.cols()], data)
}

/// `(gamma · cc, beta · cc)`. Exact only when `cc` is a pure selection.
pub fn merge_layernorm(gamma: &Tensor, beta: &Tensor, cc: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((merge_bias(gamma, cc)?, merge_bias(beta, cc)?))
}

/// `(gamma[K], beta[K])` for the coordinates `K` the mask keeps.
pub fn select_layernorm(gamma: &Tensor, beta: &Tensor, mask: &[bool]) -> Result<(Tensor, Tensor)> {
    if gamma.len() != mask.len() || beta.len() != mask.len() {
        return Err(Error::shape("select_layernorm", gamma.shape(), beta.shape()));
    }
    let pick = |t: &Tensor| Tensor::vector(t.data().iter().zip(mask).filter(|(_, &m)| !m).map(|(v, _)| *v).collect());
    Ok((pick(gamma), pick(beta)))
}

/// How layer-norm affine parameters reach the student.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LnMerge {
    /// Keep the parameters of the surviving residual coordinates. Layer
    /// norms act per coordinate after the compactors, so this is exact.
    #[default]
    Select,
    /// `gamma · cc'` and `beta · cc'`, exact only for selection compactors.
    Linear,
}

impl fmt::Display for LnMerge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LnMerge::Select => "select",
            LnMerge::Linear => "linear",
        })
    }
}

impl FromStr for LnMerge {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "select" => Ok(LnMerge::Select),
            "linear" => Ok(LnMerge::Linear),
            other => Err(Error::Config(format!("unknown ln_merge `{other}`"))),
        }
    }
}

/// Compression residual of one compactor.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualEntry {
    pub group_id: usize,
    pub slot: Slot,
    pub kept: usize,
    pub dropped: usize,
    /// `‖discarded‖_F / ‖whole‖_F`.
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct MergeReport {
    pub entries: Vec<ResidualEntry>,
}

impl MergeReport {
    pub fn mean_residual(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.iter().map(|e| e.residual).sum::<f64>() / self.entries.len() as f64
    }

    pub fn max_residual(&self) -> f64 {
        self.entries.iter().map(|e| e.residual).fold(0.0, f64::max)
    }

    /// `group_id\tsite\tkept\tdropped\tresidual` per compactor.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{:.6e}",
                e.group_id, e.slot, e.kept, e.dropped, e.residual
            );
        }
        s
    }
}

fn residual(weight: &Tensor, mask: &[bool], orientation: Orientation) -> f64 {
    let total = weight.frobenius_norm();
    if total == 0.0 {
        return 0.0;
    }
    let mut dropped = 0.0f64;
    for i in 0..weight.rows() {
        for j in 0..weight.cols() {
            let m = match orientation {
                Orientation::Column => mask[j],
                Orientation::Row => mask[i],
            };
            if m {
                dropped += (weight.at(i, j) as f64).powi(2);
            }
        }
    }
    dropped.sqrt() / total
}

/// Sets masked leader columns to zero and re-broadcasts.
pub fn zero_masked_columns(model: &mut ReparamModel, masks: &MaskState) -> Result<()> {
    let leaders: Vec<(Slot, usize)> = model.groups().iter().map(|g| (g.leader, g.id)).collect();
    for (slot, id) in leaders {
        let mask = &masks.groups[id].mask;
        let w = model.weight_mut(slot);
        for i in 0..w.rows() {
            for (j, &m) in mask.iter().enumerate() {
                if m {
                    w.set(i, j, 0.0);
                }
            }
        }
    }
    model.broadcast()
}

fn layer_dims(orange: &GroupMask, green: &GroupMask) -> Result<LayerDims> {
    let k = orange.k();
    let (heads, head_dim) = match orange.shape {
        MaskShape::Heads { heads, head_dim } => (heads - k / head_dim, head_dim),
        MaskShape::PerHead { heads, head_dim } => (heads, head_dim - k / heads),
        MaskShape::Free => {
            return Err(Error::State("attention mask carries no head structure".into()));
        }
    };
    if heads == 0 || head_dim == 0 {
        return Err(Error::State("attention would be compressed to nothing".into()));
    }
    Ok(LayerDims {
        heads,
        head_dim,
        ffn: green.size() - green.k(),
    })
}

/// Compresses every compactor by its group mask and folds it into the
/// teacher weights.
pub fn build_student(model: &ReparamModel, masks: &MaskState) -> Result<(ModelWeights, MergeReport)> {
    build_student_with(model, masks, LnMerge::default())
}

pub fn build_student_with(model: &ReparamModel, masks: &MaskState, ln: LnMerge) -> Result<(ModelWeights, MergeReport)> {
    let t = &model.teacher;
    let tc = &t.config;
    if masks.groups.len() != model.groups().len() {
        return Err(Error::State("mask state does not match the model's groups".into()));
    }
    if let Some(g) = masks.groups.iter().find(|g| !g.is_complete()) {
        return Err(Error::State(format!(
            "mask of group {} is incomplete ({} of {} columns dropped)",
            g.group_id,
            g.k(),
            g.drop_target
        )));
    }

    let mut report = MergeReport::default();
    let mut compressed = Vec::with_capacity(model.compactors().len());
    for c in model.compactors() {
        let gm = &masks.groups[c.group_id];
        compressed.push(compress_compactor(&c.weight, &gm.mask, c.orientation())?);
        report.entries.push(ResidualEntry {
            group_id: c.group_id,
            slot: c.slot,
            kept: gm.size() - gm.k(),
            dropped: gm.k(),
            residual: residual(&c.weight, &gm.mask, c.orientation()),
        });
    }
    let get = |slot: Slot| &compressed[slot.index(tc.layers).expect("valid slot")];

    let blue = &masks.groups[0];
    let merge_ln = |g: &Tensor, b: &Tensor, cc: &Tensor| match ln {
        LnMerge::Select => select_layernorm(g, b, &blue.mask),
        LnMerge::Linear => merge_layernorm(g, b, cc),
    };
    let mut cfg = ModelConfig {
        hidden: blue.size() - blue.k(),
        ..tc.clone()
    };
    let mut dims = Vec::with_capacity(tc.layers);
    for g in model.groups() {
        if let Color::Orange(l) = g.color {
            let green = &masks.groups[1 + tc.layers + l];
            dims.push(layer_dims(&masks.groups[g.id], green)?);
        }
    }
    if let Some(first) = dims.first().copied() {
        cfg.heads = first.heads;
        cfg.head_dim = first.head_dim;
        cfg.ffn = first.ffn;
    }
    cfg.per_layer = if dims.iter().all(|d| Some(*d) == dims.first().copied()) {
        Vec::new()
    } else {
        dims.clone()
    };

    let c_emb = get(Slot::column(Site::Embedding));
    let (emb_ln_gamma, emb_ln_beta) = merge_ln(&t.emb_ln_gamma, &t.emb_ln_beta, c_emb)?;
    let mut s = ModelWeights {
        config: cfg.clone(),
        token: merge_linear(&t.token, None, Some(c_emb))?,
        position: merge_linear(&t.position, None, Some(c_emb))?,
        segment: t
            .segment
            .as_ref()
            .map(|seg| merge_linear(seg, None, Some(c_emb)))
            .transpose()?,
        emb_ln_gamma,
        emb_ln_beta,
        layers: t.layers.clone(),
        output: None,
        output_bias: t.output_bias.clone(),
    };

    for l in 0..tc.layers {
        for site in layer_sites(l) {
            let (w, b) = site_weight(t, site).expect("layer site");
            let rc = get(Slot::row(site));
            let cc = get(Slot::column(site));
            let mut w_s = merge_linear(w, Some(rc), Some(cc))?;
            let mut b_s = merge_bias(b, cc)?;
            if let Site::Query(_) = site {
                // Preserve the teacher's 1/√d_k score scale when d_k shrinks.
                let (dk_t, dk_s) = (tc.layer(l).head_dim, dims[l].head_dim);
                if dk_t != dk_s {
                    let f = ((dk_s as f64) / (dk_t as f64)).sqrt() as f32;
                    w_s.scale(f);
                    b_s.scale(f);
                }
            }
            let (sw, sb) = site_weight_mut(&mut s, site).expect("layer site");
            *sw = w_s;
            *sb = b_s;
        }
        let tl = &t.layers[l];
        let c_o = get(Slot::column(Site::AttnOutput(l)));
        let c_d = get(Slot::column(Site::Down(l)));
        let (g1, b1) = merge_ln(&tl.ln1_gamma, &tl.ln1_beta, c_o)?;
        let (g2, b2) = merge_ln(&tl.ln2_gamma, &tl.ln2_beta, c_d)?;
        let sl = &mut s.layers[l];
        sl.ln1_gamma = g1;
        sl.ln1_beta = b1;
        sl.ln2_gamma = g2;
        sl.ln2_beta = b2;
    }

    let rc_out = get(Slot::row(Site::Output));
    match &t.output {
        Some(w) => {
            s.output = Some(merge_linear(w, Some(rc_out), None)?);
            s.config.tie_output = false;
        }
        None => {
            // Still tied when the output row compactor is the flipped
            // embedding compactor, which broadcasting guarantees.
            let flipped = c_emb.transpose()?;
            if flipped.shape() == rc_out.shape()
                && flipped.data().iter().zip(rc_out.data()).all(|(a, b)| a.to_bits() == b.to_bits())
            {
                s.config.tie_output = true;
            } else {
                let w_out = merge_linear(&t.token.transpose()?, Some(rc_out), None)?;
                s.output = Some(w_out);
                s.config.tie_output = false;
            }
        }
    }
    s.config.validate()?;
    Ok((s, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f32]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn compress_examples() {
        let id = Tensor::identity(3);
        let c = compress_compactor(&id, &[false, true, false], Orientation::Column).unwrap();
        assert_eq!(c, t(&[&[1.0, 0.0], &[0.0, 0.0], &[0.0, 1.0]]));
        let r = compress_compactor(&id.transpose().unwrap(), &[false, true, false], Orientation::Row).unwrap();
        assert_eq!(r, c.transpose().unwrap());
        assert!(compress_compactor(&id, &[true], Orientation::Row).is_err());
    }

    #[test]
    fn merge_examples() {
        let w = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let sel = merge_linear(&w, Some(&t(&[&[1.0, 0.0]])), Some(&t(&[&[1.0], &[0.0]]))).unwrap();
        assert_eq!(sel.data(), &[1.0]);
        let avg = merge_linear(&w, Some(&t(&[&[0.5, 0.5]])), Some(&t(&[&[1.0], &[1.0]]))).unwrap();
        assert_eq!(avg.data(), &[5.0]);
        let id = Tensor::identity(2);
        assert_eq!(merge_linear(&w, Some(&id), Some(&id)).unwrap(), w);
        let b = merge_bias(&Tensor::vector(vec![1.0, 1.0]), &t(&[&[2.0], &[3.0]])).unwrap();
        assert_eq!(b.data(), &[5.0]);
        assert!(merge_linear(&w, Some(&Tensor::identity(3)), None).is_err());
    }

    #[test]
    fn layernorm_column_sums() {
        let cc = t(&[&[1.0, 0.5], &[2.0, -1.0]]);
        let (g, b) = merge_layernorm(&Tensor::vector(vec![1.0, 1.0]), &Tensor::vector(vec![0.0, 0.0]), &cc).unwrap();
        assert_eq!(g.data(), &[3.0, -0.5]);
        assert_eq!(b.data(), &[0.0, 0.0]);
    }

    #[test]
    fn layernorm_selection() {
        let (g, b) = select_layernorm(
            &Tensor::vector(vec![1.0, 2.0, 3.0]),
            &Tensor::vector(vec![4.0, 5.0, 6.0]),
            &[false, true, false],
        )
        .unwrap();
        assert_eq!(g.data(), &[1.0, 3.0]);
        assert_eq!(b.data(), &[4.0, 6.0]);
        assert!(select_layernorm(&Tensor::vector(vec![1.0]), &Tensor::vector(vec![1.0]), &[false, true]).is_err());
        assert_eq!("linear".parse::<LnMerge>().unwrap(), LnMerge::Linear);
        assert!("mean".parse::<LnMerge>().is_err());
    }
}
