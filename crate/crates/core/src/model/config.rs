use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ops::DEFAULT_LN_EPS;

/// Training objective and attention visibility.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Bidirectional encoder with a masked-language-model head.
    EncoderMlm,
    /// Left-to-right decoder with next-token prediction.
    DecoderCausal,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::EncoderMlm => "encoder_mlm",
            Mode::DecoderCausal => "decoder_causal",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder_mlm" => Ok(Mode::EncoderMlm),
            "decoder_causal" => Ok(Mode::DecoderCausal),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// Inner sizes of one transformer layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LayerDims {
    pub heads: usize,
    pub head_dim: usize,
    pub ffn: usize,
}

impl LayerDims {
    /// Width of the packed Q/K/V projections, `heads · head_dim`.
    pub fn attn(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Architecture hyperparameters of a BERT-style model.
///
/// `head_dim` defaults to `hidden / heads`. Students produced by merging may
/// carry a different attention width, and `per_layer` overrides the inner
/// sizes of individual layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn: usize,
    pub layers: usize,
    pub max_seq_len: usize,
    pub mode: Mode,
    /// Output projection shares the token table (`W_out = W_Tᵀ`).
    pub tie_output: bool,
    /// `false` replaces every layer norm with the identity.
    pub layer_norm: bool,
    pub ln_eps: f32,
    pub per_layer: Vec<LayerDims>,
}

impl ModelConfig {
    /// Standard BERT shape: `head_dim = d/A`, `d_f = 4d`, 512 positions.
    pub fn bert(vocab_size: usize, hidden: usize, heads: usize, layers: usize) -> Result<Self> {
        if heads == 0 || hidden % heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {hidden} is not divisible by head count {heads}"
            )));
        }
        let cfg = Self {
            vocab_size,
            hidden,
            heads,
            head_dim: hidden / heads,
            ffn: 4 * hidden,
            layers,
            max_seq_len: 512,
            mode: Mode::EncoderMlm,
            tie_output: true,
            layer_norm: true,
            ln_eps: DEFAULT_LN_EPS,
            per_layer: Vec::new(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_ffn(mut self, ffn: usize) -> Self {
        self.ffn = ffn;
        self
    }

    pub fn with_max_seq_len(mut self, n: usize) -> Self {
        self.max_seq_len = n;
        self
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn layer(&self, l: usize) -> LayerDims {
        self.per_layer.get(l).copied().unwrap_or(LayerDims {
            heads: self.heads,
            head_dim: self.head_dim,
            ffn: self.ffn,
        })
    }

    /// Whether every layer shares the top-level inner sizes.
    pub fn is_uniform(&self) -> bool {
        let base = self.layer(usize::MAX);
        (0..self.layers).all(|l| self.layer(l) == base)
    }

    pub fn has_segments(&self) -> bool {
        self.mode == Mode::EncoderMlm
    }

    /// Checks every constraint and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("ffn", self.ffn),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be at least 1"));
            }
        }
        if !(self.ln_eps > 0.0) {
            errs.push(format!("ln_eps must be positive (got {})", self.ln_eps));
        }
        if !self.per_layer.is_empty() && self.per_layer.len() != self.layers {
            errs.push(format!(
                "per-layer overrides cover {} layers but the model has {}",
                self.per_layer.len(),
                self.layers
            ));
        }
        for (l, d) in self.per_layer.iter().enumerate() {
            if d.heads == 0 || d.head_dim == 0 || d.ffn == 0 {
                errs.push(format!("layer {l} has a zero inner size"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}

/// Exact number of trainable scalars in a model with this configuration.
pub fn param_count(cfg: &ModelConfig) -> u64 {
    let (v, d) = (cfg.vocab_size as u64, cfg.hidden as u64);
    let mut total = v * d + cfg.max_seq_len as u64 * d + 2 * d;
    if cfg.has_segments() {
        total += 2 * d;
    }
    for l in 0..cfg.layers {
        let dims = cfg.layer(l);
        let (a, f) = (dims.attn() as u64, dims.ffn as u64);
        total += 3 * (d * a + a); // Q, K, V
        total += a * d + d; // output projection
        total += d * f + f + f * d + d; // up, down
        total += 4 * d; // two layer norms
    }
    if !cfg.tie_output {
        total += d * v;
    }
    total + v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bert_rejects_indivisible_heads() {
        let err = ModelConfig::bert(100, 10, 3, 1).unwrap_err();
        assert!(err.to_string().contains("not divisible"));
    }

    #[test]
    fn validate_lists_every_violation() {
        let mut cfg = ModelConfig::bert(100, 8, 2, 1).unwrap();
        cfg.vocab_size = 0;
        cfg.ffn = 0;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("vocab_size") && msg.contains("ffn"), "{msg}");
    }

    #[test]
    fn degenerate_count_by_hand() {
        // L=0, |V|=1, d=1, 4 positions, tied output:
        // token 1 + position 4 + segment 2 + embedding LN 2 + output bias 1.
        let mut cfg = ModelConfig::bert(1, 1, 1, 0).unwrap().with_max_seq_len(4);
        assert_eq!(param_count(&cfg), 10);
        cfg.tie_output = false;
        assert_eq!(param_count(&cfg), 11);
    }
}
