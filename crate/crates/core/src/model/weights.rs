use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const INIT_STD: f32 = 0.02;

/// Weights of one transformer layer. Linear weights are stored `in × out`
/// so a layer computes `x·W + b`; Q/K/V pack all heads column-wise, head `a`
/// owning columns `[a·d_k, (a+1)·d_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wu: Tensor,
    pub bu: Tensor,
    pub wd: Tensor,
    pub bd: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

const LAYER_FIELDS: [&str; 16] = [
    "attn.query.weight",
    "attn.query.bias",
    "attn.key.weight",
    "attn.key.bias",
    "attn.value.weight",
    "attn.value.bias",
    "attn.output.weight",
    "attn.output.bias",
    "attn.ln.gamma",
    "attn.ln.beta",
    "ffn.up.weight",
    "ffn.up.bias",
    "ffn.down.weight",
    "ffn.down.bias",
    "ffn.ln.gamma",
    "ffn.ln.beta",
];

impl LayerWeights {
    fn fields(&self) -> [&Tensor; 16] {
        [
            &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo,
            &self.ln1_gamma, &self.ln1_beta, &self.wu, &self.bu, &self.wd, &self.bd,
            &self.ln2_gamma, &self.ln2_beta,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.wq, &mut self.bq, &mut self.wk, &mut self.bk, &mut self.wv, &mut self.bv,
            &mut self.wo, &mut self.bo, &mut self.ln1_gamma, &mut self.ln1_beta, &mut self.wu,
            &mut self.bu, &mut self.wd, &mut self.bd, &mut self.ln2_gamma, &mut self.ln2_beta,
        ]
    }

    fn from_fields(mut f: impl FnMut(&str) -> Result<Tensor>) -> Result<Self> {
        Ok(Self {
            wq: f(LAYER_FIELDS[0])?,
            bq: f(LAYER_FIELDS[1])?,
            wk: f(LAYER_FIELDS[2])?,
            bk: f(LAYER_FIELDS[3])?,
            wv: f(LAYER_FIELDS[4])?,
            bv: f(LAYER_FIELDS[5])?,
            wo: f(LAYER_FIELDS[6])?,
            bo: f(LAYER_FIELDS[7])?,
            ln1_gamma: f(LAYER_FIELDS[8])?,
            ln1_beta: f(LAYER_FIELDS[9])?,
            wu: f(LAYER_FIELDS[10])?,
            bu: f(LAYER_FIELDS[11])?,
            wd: f(LAYER_FIELDS[12])?,
            bd: f(LAYER_FIELDS[13])?,
            ln2_gamma: f(LAYER_FIELDS[14])?,
            ln2_beta: f(LAYER_FIELDS[15])?,
        })
    }
}

/// The full named weight set of an encoder (or decoder) with its LM head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub token: Tensor,
    pub position: Tensor,
    /// Present in encoder mode only.
    pub segment: Option<Tensor>,
    pub emb_ln_gamma: Tensor,
    pub emb_ln_beta: Tensor,
    pub layers: Vec<LayerWeights>,
    /// `None` when the output projection is tied to the token table.
    pub output: Option<Tensor>,
    pub output_bias: Tensor,
}

/// Name and shape of every tensor a configuration requires, in canonical order.
pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (v, d) = (cfg.vocab_size, cfg.hidden);
    let mut out = vec![
        ("embeddings.token".to_string(), vec![v, d]),
        ("embeddings.position".to_string(), vec![cfg.max_seq_len, d]),
    ];
    if cfg.has_segments() {
        out.push(("embeddings.segment".into(), vec![2, d]));
    }
    out.push(("embeddings.ln.gamma".into(), vec![d]));
    out.push(("embeddings.ln.beta".into(), vec![d]));
    for l in 0..cfg.layers {
        let dims = cfg.layer(l);
        let (a, f) = (dims.attn(), dims.ffn);
        let shapes: [Vec<usize>; 16] = [
            vec![d, a],
            vec![a],
            vec![d, a],
            vec![a],
            vec![d, a],
            vec![a],
            vec![a, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, f],
            vec![f],
            vec![f, d],
            vec![d],
            vec![d],
            vec![d],
        ];
        for (name, shape) in LAYER_FIELDS.iter().zip(shapes) {
            out.push((format!("layer.{l}.{name}"), shape));
        }
    }
    if !cfg.tie_output {
        out.push(("head.weight".into(), vec![d, v]));
    }
    out.push(("head.bias".into(), vec![v]));
    out
}

impl ModelWeights {
    /// Assembles weights from named tensors, checking every shape.
    pub fn from_named(config: ModelConfig, mut named: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes: BTreeMap<String, Vec<usize>> = expected_shapes(&config).into_iter().collect();
        let mut take = |name: &str| -> Result<Tensor> {
            let t = named
                .remove(name)
                .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
            let want = &shapes[name];
            if t.shape() != want.as_slice() {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    want
                )));
            }
            Ok(t)
        };
        let token = take("embeddings.token")?;
        let position = take("embeddings.position")?;
        let segment = if config.has_segments() {
            Some(take("embeddings.segment")?)
        } else {
            None
        };
        let emb_ln_gamma = take("embeddings.ln.gamma")?;
        let emb_ln_beta = take("embeddings.ln.beta")?;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            layers.push(LayerWeights::from_fields(|f| take(&format!("layer.{l}.{f}")))?);
        }
        let output = if config.tie_output {
            None
        } else {
            Some(take("head.weight")?)
        };
        let output_bias = take("head.bias")?;
        if let Some(extra) = named.keys().next() {
            return Err(Error::Format(format!("unexpected tensor `{extra}`")));
        }
        Ok(Self {
            config,
            token,
            position,
            segment,
            emb_ln_gamma,
            emb_ln_beta,
            layers,
            output,
            output_bias,
        })
    }

    /// All tensors with their canonical names, in canonical order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("embeddings.token".to_string(), &self.token),
            ("embeddings.position".to_string(), &self.position),
        ];
        if let Some(s) = &self.segment {
            out.push(("embeddings.segment".into(), s));
        }
        out.push(("embeddings.ln.gamma".into(), &self.emb_ln_gamma));
        out.push(("embeddings.ln.beta".into(), &self.emb_ln_beta));
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_FIELDS.iter().zip(layer.fields()) {
                out.push((format!("layer.{l}.{name}"), t));
            }
        }
        if let Some(o) = &self.output {
            out.push(("head.weight".into(), o));
        }
        out.push(("head.bias".into(), &self.output_bias));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("embeddings.token".to_string(), &mut self.token),
            ("embeddings.position".to_string(), &mut self.position),
        ];
        if let Some(s) = &mut self.segment {
            out.push(("embeddings.segment".into(), s));
        }
        out.push(("embeddings.ln.gamma".into(), &mut self.emb_ln_gamma));
        out.push(("embeddings.ln.beta".into(), &mut self.emb_ln_beta));
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in LAYER_FIELDS.iter().zip(layer.fields_mut()) {
                out.push((format!("layer.{l}.{name}"), t));
            }
        }
        if let Some(o) = &mut self.output {
            out.push(("head.weight".into(), o));
        }
        out.push(("head.bias".into(), &mut self.output_bias));
        out
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor> {
        self.named()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }

    /// Same structure with every tensor zeroed; used as a gradient container.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.named_mut() {
            t.data_mut().fill(0.0);
        }
        z
    }

    pub fn num_params(&self) -> u64 {
        self.named().iter().map(|(_, t)| t.len() as u64).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    /// Largest absolute elementwise difference across all tensors.
    pub fn max_abs_diff(&self, other: &ModelWeights) -> Result<f32> {
        let a = self.named();
        let b = other.named();
        if a.len() != b.len() {
            return Err(Error::State("weight sets differ in structure".into()));
        }
        let mut worst = 0.0f32;
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            if na != nb {
                return Err(Error::State(format!("tensor order differs: {na} vs {nb}")));
            }
            worst = worst.max(ta.max_abs_diff(tb)?);
        }
        Ok(worst)
    }
}

/// Deterministic initialization: linear and embedding weights from a normal
/// with σ = 0.02 truncated at 2σ, biases 0, layer-norm gamma 1 and beta 0.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, INIT_STD).expect("valid std");
    let mut named = BTreeMap::new();
    for (name, shape) in expected_shapes(config) {
        let numel: usize = shape.iter().product();
        let data = if name.ends_with(".gamma") {
            vec![1.0; numel]
        } else if name.ends_with(".weight") || name.starts_with("embeddings.") && !name.contains(".ln.") {
            (0..numel)
                .map(|_| loop {
                    let x = normal.sample(&mut rng);
                    if x.abs() <= 2.0 * INIT_STD {
                        break x;
                    }
                })
                .collect()
        } else {
            vec![0.0; numel]
        };
        named.insert(name, Tensor::new(&shape, data)?);
    }
    ModelWeights::from_named(config.clone(), named)
}
