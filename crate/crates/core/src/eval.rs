//! Held-out quality, attention inheritance and logit distillation loss.

use std::fmt::Write as _;
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::{eval_batches, BatchConfig};
use crate::error::{Error, Result};
use crate::model::{forward, Batch, ModelWeights};
use crate::ops::mlm_cross_entropy;
use crate::tensor::Tensor;

pub use crate::train::{train_kd_baseline, train_scratch_baseline};

/// Token-weighted cross-entropy and accuracy over masked positions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlmScore {
    pub loss: f64,
    pub accuracy: f64,
    pub tokens: usize,
}

/// Scores a model on fixed batches (same masks every call).
pub fn score_batches(weights: &ModelWeights, batches: &[Batch]) -> Result<MlmScore> {
    if batches.is_empty() {
        return Err(Error::InvalidBatch("no evaluation batches".into()));
    }
    let (mut loss, mut correct, mut count) = (0.0f64, 0usize, 0usize);
    for b in batches {
        let out = forward(weights, b)?;
        let ce = mlm_cross_entropy(&out.logits, &b.targets, &b.loss_mask)?;
        loss += ce.loss * ce.count as f64;
        correct += ce.correct;
        count += ce.count;
    }
    Ok(MlmScore {
        loss: loss / count as f64,
        accuracy: correct as f64 / count as f64,
        tokens: count,
    })
}

/// Deterministic masked evaluation on a heldout split.
pub fn mlm_eval(weights: &ModelWeights, heldout: &[Vec<u32>], batch_size: usize, seed: u64) -> Result<MlmScore> {
    let cfg = BatchConfig {
        batch_size,
        mode: weights.config.mode,
        vocab_size: weights.config.vocab_size,
        seed,
    };
    score_batches(weights, &eval_batches(heldout, &cfg)?)
}

/// Jensen–Shannon divergence with natural logs; bounded by ln 2.
pub fn js_divergence(p: &[f32], q: &[f32]) -> f64 {
    let kl_to_mid = |a: f64, m: f64| if a > 0.0 { a * (a / m).ln() } else { 0.0 };
    let mut js = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let (a, b) = (a as f64, b as f64);
        let m = 0.5 * (a + b);
        js += 0.5 * kl_to_mid(a, m) + 0.5 * kl_to_mid(b, m);
    }
    js.max(0.0)
}

/// How student heads are paired with teacher heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Matching {
    /// Head `h` with head `h`.
    #[default]
    Index,
    /// Minimum-cost one-to-one assignment per layer.
    Assignment,
}

impl fmt::Display for Matching {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Matching::Index => "index",
            Matching::Assignment => "assignment",
        })
    }
}

impl FromStr for Matching {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "index" => Ok(Matching::Index),
            "assignment" => Ok(Matching::Assignment),
            other => Err(Error::Config(format!("unknown head matching `{other}`"))),
        }
    }
}

/// Mean JS divergence of each student head against its matched teacher head.
#[derive(Clone, Debug, PartialEq)]
pub struct DivergenceMatrix {
    /// `values[l][h]` for student layer `l`, head `h`.
    pub values: Vec<Vec<f64>>,
    /// Teacher head matched to each student head.
    pub matched: Vec<Vec<usize>>,
}

impl DivergenceMatrix {
    pub fn mean(&self) -> f64 {
        let all: Vec<f64> = self.values.iter().flatten().copied().collect();
        if all.is_empty() {
            0.0
        } else {
            all.iter().sum::<f64>() / all.len() as f64
        }
    }
}

/// Minimum-cost assignment of every row to a distinct column
/// (`rows ≤ cols`), by the Hungarian method. Returns the column per row.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if n > m || cost.iter().any(|r| r.len() != m) {
        return Err(Error::shape("min_cost_assignment", &[n], &[m]));
    }
    // Potentials formulation with 1-based sentinels.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    Ok(out)
}

/// Per-head attention divergence between a student and its teacher.
pub fn attention_divergence(
    student: &ModelWeights,
    teacher: &ModelWeights,
    batches: &[Batch],
    matching: Matching,
) -> Result<DivergenceMatrix> {
    let (sc, tc) = (&student.config, &teacher.config);
    if sc.layers != tc.layers {
        return Err(Error::Config(format!(
            "student has {} layers, teacher {}",
            sc.layers, tc.layers
        )));
    }
    if batches.is_empty() {
        return Err(Error::InvalidBatch("no batches for attention comparison".into()));
    }
    for b in batches {
        for cfg in [sc, tc] {
            if b.seq_len > cfg.max_seq_len {
                return Err(Error::InvalidBatch(format!(
                    "sequence length {} exceeds a model's max_seq_len {}",
                    b.seq_len, cfg.max_seq_len
                )));
            }
        }
    }
    // cost[l][a][b]: summed JS of student head a vs teacher head b.
    let mut cost: Vec<Vec<Vec<f64>>> = (0..sc.layers)
        .map(|l| vec![vec![0.0; tc.layer(l).heads]; sc.layer(l).heads])
        .collect();
    let mut rows = 0usize;
    for b in batches {
        let so = forward(student, b)?;
        let to = forward(teacher, b)?;
        let n = b.seq_len;
        rows += b.batch_size * n;
        for l in 0..sc.layers {
            let (sa, ta) = (&so.attention[l], &to.attention[l]);
            let (hs, ht) = (sc.layer(l).heads, tc.layer(l).heads);
            for bi in 0..b.batch_size {
                for a in 0..hs {
                    let targets: Vec<usize> = match matching {
                        Matching::Index => vec![a],
                        Matching::Assignment => (0..ht).collect(),
                    };
                    for tb in targets {
                        if tb >= ht {
                            return Err(Error::Config(format!(
                                "index matching needs teacher head {tb} in layer {l}"
                            )));
                        }
                        let so_off = (bi * hs + a) * n * n;
                        let to_off = (bi * ht + tb) * n * n;
                        let mut s = 0.0;
                        for i in 0..n {
                            s += js_divergence(
                                &sa.data()[so_off + i * n..so_off + (i + 1) * n],
                                &ta.data()[to_off + i * n..to_off + (i + 1) * n],
                            );
                        }
                        cost[l][a][tb] += s;
                    }
                }
            }
        }
    }
    let mut values = Vec::with_capacity(sc.layers);
    let mut matched = Vec::with_capacity(sc.layers);
    for c in cost {
        let pick = match matching {
            Matching::Index => (0..c.len()).collect(),
            Matching::Assignment => min_cost_assignment(&c)?,
        };
        values.push(pick.iter().enumerate().map(|(a, &tb)| c[a][tb] / rows as f64).collect());
        matched.push(pick);
    }
    Ok(DivergenceMatrix { values, matched })
}

/// `KL(p_t ‖ p_s)` between `softmax(z/τ)` distributions, averaged over
/// rows, with its gradient w.r.t. the student logits.
pub fn kd_logit_loss_with_grad(student: &Tensor, teacher: &Tensor, tau: f64) -> Result<(f64, Tensor)> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive (got {tau})")));
    }
    if student.shape() != teacher.shape() {
        return Err(Error::shape("kd_logit_loss", student.shape(), teacher.shape()));
    }
    let (r, c) = student.dims2()?;
    let mut grad = Tensor::zeros(&[r, c]);
    let mut total = 0.0;
    let log_softmax = |row: &[f32]| -> Vec<f64> {
        let z: Vec<f64> = row.iter().map(|&v| v as f64 / tau).collect();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        z.iter().map(|v| v - lse).collect()
    };
    for i in 0..r {
        let ls = log_softmax(student.row(i));
        let lt = log_softmax(teacher.row(i));
        for j in 0..c {
            let pt = lt[j].exp();
            if pt > 0.0 {
                total += pt * (lt[j] - ls[j]);
            }
            let g = (ls[j].exp() - pt) / (tau * r as f64);
            grad.set(i, j, g as f32);
        }
    }
    Ok((total / r.max(1) as f64, grad))
}

pub fn kd_logit_loss(student: &Tensor, teacher: &Tensor, tau: f64) -> Result<f64> {
    kd_logit_loss_with_grad(student, teacher, tau).map(|(l, _)| l)
}

/// Hex SHA-256 of a resolved configuration text.
pub fn config_hash(config_text: &str) -> String {
    Sha256::digest(config_text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Evaluation summary written next to a model.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub model: String,
    pub config_text: String,
    pub seed: u64,
    pub score: MlmScore,
    pub divergence: Option<DivergenceMatrix>,
    pub matching: Matching,
    pub mean_residual: Option<f64>,
}

impl EvalReport {
    /// `key: value` lines, then an optional tab-separated divergence block.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "version: wid {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(s, "model: {}", self.model);
        let _ = writeln!(s, "config_hash: {}", config_hash(&self.config_text));
        let _ = writeln!(s, "seed: {}", self.seed);
        let _ = writeln!(s, "heldout_loss: {:.6}", self.score.loss);
        let _ = writeln!(s, "heldout_accuracy: {:.6}", self.score.accuracy);
        let _ = writeln!(s, "heldout_tokens: {}", self.score.tokens);
        if let Some(r) = self.mean_residual {
            let _ = writeln!(s, "mean_compression_residual: {r:.6e}");
        }
        if let Some(d) = &self.divergence {
            let _ = writeln!(s, "head_matching: {}", self.matching);
            let _ = writeln!(s, "mean_attention_js: {:.6}", d.mean());
            let _ = writeln!(s, "attention_js:");
            let _ = writeln!(s, "layer\thead\tteacher_head\tjs");
            for (l, (vals, m)) in d.values.iter().zip(&d.matched).enumerate() {
                for (h, (v, t)) in vals.iter().zip(m).enumerate() {
                    let _ = writeln!(s, "{l}\t{h}\t{t}\t{v:.6}");
                }
            }
        }
        let _ = writeln!(s, "config:");
        for line in self.config_text.lines() {
            let _ = writeln!(s, "  {line}");
        }
        s
    }

    /// Plot-ready rows: `metric,layer,head,value`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,layer,head,value\n");
        let _ = writeln!(s, "heldout_loss,,,{:.6}", self.score.loss);
        let _ = writeln!(s, "heldout_accuracy,,,{:.6}", self.score.accuracy);
        if let Some(d) = &self.divergence {
            for (l, vals) in d.values.iter().enumerate() {
                for (h, v) in vals.iter().enumerate() {
                    let _ = writeln!(s, "attention_js,{l},{h},{v:.6}");
                }
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn js_properties() {
        let p = [0.5f32, 0.5];
        let q = [1.0f32, 0.0];
        assert_eq!(js_divergence(&p, &p), 0.0);
        // m = (0.75, 0.25): ½·KL(p‖m) + ½·KL(q‖m).
        let m = [0.75f64, 0.25];
        let expect = 0.5 * (0.5 * (0.5 / m[0]).ln() + 0.5 * (0.5 / m[1]).ln()) + 0.5 * (1.0 / m[0]).ln();
        assert!((js_divergence(&p, &q) - expect).abs() < 1e-12);
        assert!((js_divergence(&p, &q) - js_divergence(&q, &p)).abs() < 1e-15);
        let disjoint = js_divergence(&[1.0, 0.0], &[0.0, 1.0]);
        assert!((disjoint - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn assignment_finds_optimum() {
        let cost = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
        assert_eq!(min_cost_assignment(&cost).unwrap(), vec![1, 0, 2]);
        let wide = vec![vec![9.0, 1.0, 5.0, 0.5], vec![9.0, 0.2, 5.0, 7.0]];
        assert_eq!(min_cost_assignment(&wide).unwrap(), vec![3, 1]);
    }

    #[test]
    fn kd_examples() {
        let s = Tensor::from_rows(&[&[1.0, 2.0, 0.5, -1.0]]).unwrap();
        assert_eq!(kd_logit_loss(&s, &s, 1.0).unwrap(), 0.0);
        let t = Tensor::from_rows(&[&[0.0, -1.0, 2.0, 1.0]]).unwrap();
        let soft = |z: &[f32]| {
            let e: Vec<f64> = z.iter().map(|v| (*v as f64 / 2.0).exp()).collect();
            let sum: f64 = e.iter().sum();
            e.into_iter().map(|v| v / sum).collect::<Vec<_>>()
        };
        let (ps, pt) = (soft(s.row(0)), soft(t.row(0)));
        let hand: f64 = pt.iter().zip(&ps).map(|(a, b)| a * (a / b).ln()).sum();
        assert!((kd_logit_loss(&s, &t, 2.0).unwrap() - hand).abs() < 1e-6);
        assert!(kd_logit_loss(&s, &t, 1e6).unwrap() < 1e-9);
        assert!(kd_logit_loss(&s, &t, 0.0).is_err());
    }
}
