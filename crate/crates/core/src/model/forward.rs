//! Forward pass with saved activations, and the hand-derived backward pass
//! for the fixed encoder topology.
//!
//! Activations are 2-D with one row per token; row `b·n + i` holds position
//! `i` of sequence `b`.

use super::config::{Mode, ModelConfig};
use super::weights::ModelWeights;
use crate::error::{Error, Result};
use crate::linalg::{gemm, OutView, View};
use crate::ops::{
    self, add_row_bias, column_sums, embedding_backward, embedding_gather, gelu, gelu_backward,
    layer_norm_backward, layer_norm_excluding, matmul, matmul_nt, matmul_tn, LayerNormCache,
};
use crate::tensor::Tensor;

/// One batch of equal-length sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    /// Model inputs (after any MLM corruption), `batch_size · seq_len`.
    pub input_ids: Vec<u32>,
    /// Segment of each position (encoder mode only; ignored otherwise).
    pub segment_ids: Vec<u32>,
    /// Prediction target of each position.
    pub targets: Vec<u32>,
    /// Positions that contribute to the loss.
    pub loss_mask: Vec<bool>,
}

impl Batch {
    pub fn tokens(&self) -> usize {
        self.batch_size * self.seq_len
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let t = self.tokens();
        if self.input_ids.len() != t
            || self.segment_ids.len() != t
            || self.targets.len() != t
            || self.loss_mask.len() != t
        {
            return Err(Error::InvalidBatch(format!(
                "field lengths do not match {} x {}",
                self.batch_size, self.seq_len
            )));
        }
        if self.seq_len > cfg.max_seq_len {
            return Err(Error::InvalidBatch(format!(
                "sequence length {} exceeds max_seq_len {}",
                self.seq_len, cfg.max_seq_len
            )));
        }
        if let Some(&id) = self
            .input_ids
            .iter()
            .chain(&self.targets)
            .find(|&&id| id as usize >= cfg.vocab_size)
        {
            return Err(Error::Index {
                index: id as usize,
                bound: cfg.vocab_size,
            });
        }
        if cfg.has_segments() {
            if let Some(&s) = self.segment_ids.iter().find(|&&s| s > 1) {
                return Err(Error::Index {
                    index: s as usize,
                    bound: 2,
                });
            }
        }
        Ok(())
    }

    /// Keeps only sequences `rows` of this batch, in the given order.
    /// Flat indices of positions that contribute to the loss.
    pub fn masked_rows(&self) -> Vec<usize> {
        (0..self.tokens()).filter(|&i| self.loss_mask[i]).collect()
    }

    pub fn select(&self, rows: &[usize]) -> Batch {
        let n = self.seq_len;
        let pick = |v: &[u32]| rows.iter().flat_map(|&r| v[r * n..(r + 1) * n].to_vec()).collect();
        Batch {
            batch_size: rows.len(),
            seq_len: n,
            input_ids: pick(&self.input_ids),
            segment_ids: pick(&self.segment_ids),
            targets: pick(&self.targets),
            loss_mask: rows
                .iter()
                .flat_map(|&r| self.loss_mask[r * n..(r + 1) * n].to_vec())
                .collect(),
        }
    }
}

/// Results of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[b·n, |V|]`.
    pub logits: Tensor,
    /// `H^0 ..= H^L`, each `[b·n, d]`.
    pub hidden: Vec<Tensor>,
    /// One `[b, A, n, n]` tensor of attention probabilities per layer.
    pub attention: Vec<Tensor>,
}

struct LayerTrace {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    context: Tensor,
    ln1: Option<LayerNormCache>,
    attn_out: Tensor,
    up_pre: Tensor,
    up_act: Tensor,
    ln2: Option<LayerNormCache>,
}

/// Saved activations needed by [`backward`].
pub struct Trace {
    pub output: ForwardOutput,
    /// When set, `output.logits` holds only these rows of the batch.
    pub logit_rows: Option<Vec<usize>>,
    emb_ln: Option<LayerNormCache>,
    layers: Vec<LayerTrace>,
}

fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut y = matmul(x, w)?;
    add_row_bias(&mut y, b)?;
    Ok(y)
}

fn norm(
    cfg: &ModelConfig,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    excluded: Option<&[bool]>,
) -> Result<(Tensor, Option<LayerNormCache>)> {
    if cfg.layer_norm {
        let (y, c) = layer_norm_excluding(x, gamma, beta, cfg.ln_eps, excluded)?;
        Ok((y, Some(c)))
    } else {
        Ok((x.clone(), None))
    }
}

fn norm_backward(
    cache: &Option<LayerNormCache>,
    gamma: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    match cache {
        Some(c) => layer_norm_backward(c, gamma, dy),
        None => Ok((
            dy.clone(),
            Tensor::zeros(gamma.shape()),
            Tensor::zeros(gamma.shape()),
        )),
    }
}

/// Runs the model and returns logits, hidden states and attention maps.
pub fn forward(weights: &ModelWeights, batch: &Batch) -> Result<ForwardOutput> {
    trace(weights, batch).map(|t| t.output)
}

/// Forward pass that keeps every activation needed for [`backward`].
pub fn trace(weights: &ModelWeights, batch: &Batch) -> Result<Trace> {
    trace_rows(weights, batch, None, None)
}

/// Like [`trace`], but logits are produced only for rows with `loss_mask` set.
pub fn trace_masked(weights: &ModelWeights, batch: &Batch) -> Result<Trace> {
    trace_masked_excluding(weights, batch, None)
}

/// [`forward`] with hidden coordinates left out of every layer norm's
/// statistics (`true` = left out).
pub fn forward_excluding(weights: &ModelWeights, batch: &Batch, ln_excluded: Option<&[bool]>) -> Result<ForwardOutput> {
    trace_rows(weights, batch, None, ln_excluded).map(|t| t.output)
}

/// [`trace_masked`] with hidden coordinates left out of layer-norm statistics.
pub fn trace_masked_excluding(weights: &ModelWeights, batch: &Batch, ln_excluded: Option<&[bool]>) -> Result<Trace> {
    let rows = batch.masked_rows();
    trace_rows(weights, batch, Some(rows), ln_excluded)
}

fn trace_rows(
    weights: &ModelWeights,
    batch: &Batch,
    logit_rows: Option<Vec<usize>>,
    ln_excluded: Option<&[bool]>,
) -> Result<Trace> {
    let cfg = &weights.config;
    batch.validate(cfg)?;
    let (b, n, d) = (batch.batch_size, batch.seq_len, cfg.hidden);

    let mut x = embedding_gather(&weights.token, &batch.input_ids)?;
    {
        let data = x.data_mut();
        for (row, chunk) in data.chunks_exact_mut(d.max(1)).enumerate() {
            let pos = weights.position.row(row % n);
            for (v, p) in chunk.iter_mut().zip(pos) {
                *v += p;
            }
            if let Some(seg) = &weights.segment {
                let s = seg.row(batch.segment_ids[row] as usize);
                for (v, p) in chunk.iter_mut().zip(s) {
                    *v += p;
                }
            }
        }
    }
    let (h0, emb_ln) = norm(cfg, &x, &weights.emb_ln_gamma, &weights.emb_ln_beta, ln_excluded)?;

    let mut hidden = vec![h0];
    let mut attention = Vec::with_capacity(cfg.layers);
    let mut layers = Vec::with_capacity(cfg.layers);
    for (l, lw) in weights.layers.iter().enumerate() {
        let dims = cfg.layer(l);
        let (heads, dk, a) = (dims.heads, dims.head_dim, dims.attn());
        let h = hidden.last().expect("at least H^0");
        let q = linear(h, &lw.wq, &lw.bq)?;
        let k = linear(h, &lw.wk, &lw.bk)?;
        let v = linear(h, &lw.wv, &lw.bv)?;
        let scale = 1.0 / (dk as f32).sqrt();
        let mut probs = vec![0.0f32; b * heads * n * n];
        let mut context = Tensor::zeros(&[b * n, a]);
        for bi in 0..b {
            for hd in 0..heads {
                let off = bi * n * a + hd * dk;
                let qv = View::strided(q.data(), off, n, dk, a, 1);
                let kv = View::strided(k.data(), off, n, dk, a, 1);
                let p_off = (bi * heads + hd) * n * n;
                gemm(qv, kv.t(), OutView::dense(&mut probs, p_off, n), false);
                for i in 0..n {
                    let row = &mut probs[p_off + i * n..p_off + (i + 1) * n];
                    for s in row.iter_mut() {
                        *s *= scale;
                    }
                    let visible = match cfg.mode {
                        Mode::EncoderMlm => n,
                        Mode::DecoderCausal => i + 1,
                    };
                    ops::softmax_prefix(row, visible);
                }
                let vv = View::strided(v.data(), off, n, dk, a, 1);
                let pv = View::dense(&probs, p_off, n, n);
                gemm(
                    pv,
                    vv,
                    OutView {
                        data: context.data_mut(),
                        offset: off,
                        rs: a,
                        cs: 1,
                    },
                    false,
                );
            }
        }
        let attn_out = linear(&context, &lw.wo, &lw.bo)?;
        let mut s1 = h.clone();
        s1.add_assign(&attn_out)?;
        let (o, ln1) = norm(cfg, &s1, &lw.ln1_gamma, &lw.ln1_beta, ln_excluded)?;
        let up_pre = linear(&o, &lw.wu, &lw.bu)?;
        let up_act = gelu(&up_pre);
        let f = linear(&up_act, &lw.wd, &lw.bd)?;
        let mut s2 = o.clone();
        s2.add_assign(&f)?;
        let (h_next, ln2) = norm(cfg, &s2, &lw.ln2_gamma, &lw.ln2_beta, ln_excluded)?;
        attention.push(Tensor::new(&[b, heads, n, n], probs)?);
        layers.push(LayerTrace {
            q,
            k,
            v,
            context,
            ln1,
            attn_out: o,
            up_pre,
            up_act,
            ln2,
        });
        hidden.push(h_next);
    }

    let last = hidden.last().expect("at least H^0");
    let selected;
    let head_in = match &logit_rows {
        Some(rows) => {
            selected = last.select_rows(rows)?;
            &selected
        }
        None => last,
    };
    let mut logits = match &weights.output {
        Some(w) => matmul(head_in, w)?,
        None => matmul_nt(head_in, &weights.token)?,
    };
    add_row_bias(&mut logits, &weights.output_bias)?;

    Ok(Trace {
        output: ForwardOutput {
            logits,
            hidden,
            attention,
        },
        logit_rows,
        emb_ln,
        layers,
    })
}

/// Gradients of a scalar loss w.r.t. every weight, given `dlogits`.
pub fn backward(
    weights: &ModelWeights,
    batch: &Batch,
    trace: &Trace,
    dlogits: &Tensor,
) -> Result<ModelWeights> {
    let cfg = &weights.config;
    let (b, n) = (batch.batch_size, batch.seq_len);
    let mut grads = weights.zeros_like();
    let out = &trace.output;
    let full = out.hidden.last().expect("at least H^0");
    let selected;
    let last = match &trace.logit_rows {
        Some(rows) => {
            selected = full.select_rows(rows)?;
            &selected
        }
        None => full,
    };
    if dlogits.shape() != out.logits.shape() {
        return Err(Error::shape("backward dlogits", out.logits.shape(), dlogits.shape()));
    }

    grads.output_bias = column_sums(dlogits);
    let dh_head = match &weights.output {
        Some(w) => {
            grads.output = Some(matmul_tn(last, dlogits)?);
            matmul_nt(dlogits, w)?
        }
        None => {
            grads.token = matmul_tn(dlogits, last)?;
            matmul(dlogits, &weights.token)?
        }
    };
    let mut dh = match &trace.logit_rows {
        Some(rows) => {
            let d = cfg.hidden;
            let mut dh = Tensor::zeros(full.shape());
            let data = dh.data_mut();
            for (k, &r) in rows.iter().enumerate() {
                data[r * d..(r + 1) * d].copy_from_slice(dh_head.row(k));
            }
            dh
        }
        None => dh_head,
    };

    for l in (0..cfg.layers).rev() {
        let lw = &weights.layers[l];
        let tr = &trace.layers[l];
        let dims = cfg.layer(l);
        let (heads, dk, a) = (dims.heads, dims.head_dim, dims.attn());
        let h_in = &out.hidden[l];
        let o = &tr.attn_out;

        // H^l = LN2(O + FFN(O))
        let (ds2, dg2, db2) = norm_backward(&tr.ln2, &lw.ln2_gamma, &dh)?;
        let mut do_total = ds2.clone();
        let g = &mut grads.layers[l];
        g.ln2_gamma = dg2;
        g.ln2_beta = db2;
        g.wd = matmul_tn(&tr.up_act, &ds2)?;
        g.bd = column_sums(&ds2);
        let dact = matmul_nt(&ds2, &lw.wd)?;
        let dpre = gelu_backward(&tr.up_pre, &dact)?;
        g.wu = matmul_tn(o, &dpre)?;
        g.bu = column_sums(&dpre);
        do_total.add_assign(&matmul_nt(&dpre, &lw.wu)?)?;

        // O = LN1(H + ctx·W_O + b_O)
        let (ds1, dg1, db1) = norm_backward(&tr.ln1, &lw.ln1_gamma, &do_total)?;
        g.ln1_gamma = dg1;
        g.ln1_beta = db1;
        g.wo = matmul_tn(&tr.context, &ds1)?;
        g.bo = column_sums(&ds1);
        let dctx = matmul_nt(&ds1, &lw.wo)?;

        let probs = out.attention[l].data();
        let scale = 1.0 / (dk as f32).sqrt();
        let mut dq = Tensor::zeros(&[b * n, a]);
        let mut dkm = Tensor::zeros(&[b * n, a]);
        let mut dv = Tensor::zeros(&[b * n, a]);
        let mut dp = vec![0.0f32; n * n];
        let mut ds = vec![0.0f32; n * n];
        for bi in 0..b {
            for hd in 0..heads {
                let off = bi * n * a + hd * dk;
                let p_off = (bi * heads + hd) * n * n;
                let pv = View::dense(probs, p_off, n, n);
                let dcv = View::strided(dctx.data(), off, n, dk, a, 1);
                let vv = View::strided(tr.v.data(), off, n, dk, a, 1);
                gemm(dcv, vv.t(), OutView::dense(&mut dp, 0, n), false);
                gemm(
                    pv.t(),
                    dcv,
                    OutView {
                        data: dv.data_mut(),
                        offset: off,
                        rs: a,
                        cs: 1,
                    },
                    false,
                );
                for i in 0..n {
                    let r = i * n..(i + 1) * n;
                    ops::softmax_row_backward(
                        &probs[p_off + i * n..p_off + (i + 1) * n],
                        &dp[r.clone()],
                        &mut ds[r],
                    );
                }
                for s in ds.iter_mut() {
                    *s *= scale;
                }
                let dsv = View::dense(&ds, 0, n, n);
                let qv = View::strided(tr.q.data(), off, n, dk, a, 1);
                let kv = View::strided(tr.k.data(), off, n, dk, a, 1);
                gemm(
                    dsv,
                    kv,
                    OutView {
                        data: dq.data_mut(),
                        offset: off,
                        rs: a,
                        cs: 1,
                    },
                    false,
                );
                gemm(
                    dsv.t(),
                    qv,
                    OutView {
                        data: dkm.data_mut(),
                        offset: off,
                        rs: a,
                        cs: 1,
                    },
                    false,
                );
            }
        }
        g.wq = matmul_tn(h_in, &dq)?;
        g.bq = column_sums(&dq);
        g.wk = matmul_tn(h_in, &dkm)?;
        g.bk = column_sums(&dkm);
        g.wv = matmul_tn(h_in, &dv)?;
        g.bv = column_sums(&dv);

        let mut dh_prev = ds1;
        dh_prev.add_assign(&matmul_nt(&dq, &lw.wq)?)?;
        dh_prev.add_assign(&matmul_nt(&dkm, &lw.wk)?)?;
        dh_prev.add_assign(&matmul_nt(&dv, &lw.wv)?)?;
        dh = dh_prev;
    }

    let (dx, dg0, db0) = norm_backward(&trace.emb_ln, &weights.emb_ln_gamma, &dh)?;
    grads.emb_ln_gamma = dg0;
    grads.emb_ln_beta = db0;
    let dtok = embedding_backward(&batch.input_ids, &dx, cfg.vocab_size)?;
    grads.token.add_assign(&dtok)?;
    let d = cfg.hidden;
    let mut dpos = vec![0.0f64; cfg.max_seq_len * d];
    let mut dseg = vec![0.0f64; 2 * d];
    for row in 0..b * n {
        let g = dx.row(row);
        let p = row % n;
        for j in 0..d {
            dpos[p * d + j] += g[j] as f64;
        }
        if cfg.has_segments() {
            let s = batch.segment_ids[row] as usize;
            for j in 0..d {
                dseg[s * d + j] += g[j] as f64;
            }
        }
    }
    grads.position = Tensor::new(
        &[cfg.max_seq_len, d],
        dpos.into_iter().map(|v| v as f32).collect(),
    )?;
    if cfg.has_segments() {
        grads.segment = Some(Tensor::new(&[2, d], dseg.into_iter().map(|v| v as f32).collect())?);
    }
    Ok(grads)
}

/// Loss and its gradient w.r.t. all weights.
pub struct LossAndGrads {
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
    pub grads: ModelWeights,
}

/// Cross-entropy of a [`trace_masked`] trace, whose logits are the masked rows.
pub(crate) fn masked_cross_entropy(tr: &Trace, batch: &Batch) -> Result<ops::CrossEntropy> {
    let rows = tr.logit_rows.as_deref().expect("trace_masked");
    let targets: Vec<u32> = rows.iter().map(|&r| batch.targets[r]).collect();
    ops::mlm_cross_entropy(&tr.output.logits, &targets, &vec![true; rows.len()])
}

/// Cross-entropy over `batch.loss_mask` followed by a full backward pass.
pub fn loss_and_grads(weights: &ModelWeights, batch: &Batch) -> Result<LossAndGrads> {
    let tr = trace_masked(weights, batch)?;
    let ce = masked_cross_entropy(&tr, batch)?;
    let grads = backward(weights, batch, &tr, &ce.grad)?;
    Ok(LossAndGrads {
        loss: ce.loss,
        correct: ce.correct,
        count: ce.count,
        grads,
    })
}

/// Cross-entropy of the model on a batch, without gradients.
pub fn batch_loss(weights: &ModelWeights, batch: &Batch) -> Result<f64> {
    let out = forward(weights, batch)?;
    Ok(ops::mlm_cross_entropy(&out.logits, &batch.targets, &batch.loss_mask)?.loss)
}
