//! `key = value` run configuration.
//!
//! Lines starting with `#` are comments. Unknown keys, malformed lines and
//! unparsable values are all reported together in one error.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::alignment::GradientPolicy;
use crate::distill::{DistillConfig, Strategy};
use crate::error::{Error, Result};
use crate::eval::Matching;
use crate::model::{LayerDims, Mode, ModelConfig};
use crate::ops::DEFAULT_LN_EPS;
use crate::optim::{AdamWConfig, LearningRates};
use crate::train::TrainConfig;

pub const MODEL_KEYS: &[&str] = &[
    "vocab_size",
    "hidden",
    "heads",
    "head_dim",
    "ffn",
    "layers",
    "max_seq_len",
    "mode",
    "tie_output",
    "layer_norm",
    "ln_eps",
    "layer_dims",
];

pub const TRAIN_KEYS: &[&str] = &[
    "steps",
    "batch_size",
    "seed",
    "lr",
    "warmup_steps",
    "lr_decay",
    "weight_decay",
    "beta1",
    "beta2",
    "adam_eps",
    "log_interval",
];

pub const DISTILL_KEYS: &[&str] = &[
    "hidden_target",
    "attn_target",
    "ffn_target",
    "attn_target_layers",
    "ffn_target_layers",
    "interval",
    "norm_p",
    "lr_compactor",
    "lr_base",
    "strategy",
    "gradient_policy",
    "penalty_scale",
    "pin_mask",
    "ln_stats",
    "ln_merge",
];

pub const EVAL_KEYS: &[&str] = &["eval_batch_size", "eval_seed", "kd_tau", "head_matching"];

pub const PATH_KEYS: &[&str] = &["corpus", "teacher"];

fn known(key: &str) -> bool {
    [MODEL_KEYS, TRAIN_KEYS, DISTILL_KEYS, EVAL_KEYS, PATH_KEYS]
        .iter()
        .any(|ks| ks.contains(&key))
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    entries: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut errs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                errs.push(format!("line {}: expected `key = value`", i + 1));
                continue;
            };
            let (k, v) = (k.trim(), v.trim());
            if !known(k) {
                errs.push(format!("line {}: unknown key `{k}`", i + 1));
            } else if entries.insert(k.to_string(), v.to_string()).is_some() {
                errs.push(format!("line {}: duplicate key `{k}`", i + 1));
            }
        }
        if errs.is_empty() {
            Ok(Self { entries })
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn get_raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Sets a key, rejecting unknown ones.
    pub fn set(&mut self, key: &str, value: impl ToString) -> Result<()> {
        if !known(key) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Model architecture. `vocab_size`, `hidden`, `heads` and `layers` are
    /// required; the rest default to the standard BERT shape.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut r = Reader::new(self);
        let vocab_size = r.required("vocab_size");
        let hidden: usize = r.required("hidden");
        let heads: usize = r.required("heads");
        let layers = r.required("layers");
        let head_dim = r.get("head_dim").unwrap_or(if heads > 0 { hidden / heads } else { 0 });
        let cfg = ModelConfig {
            vocab_size,
            hidden,
            heads,
            head_dim,
            ffn: r.get("ffn").unwrap_or(4 * hidden),
            layers,
            max_seq_len: r.get("max_seq_len").unwrap_or(512),
            mode: r.get("mode").unwrap_or(Mode::EncoderMlm),
            tie_output: r.get("tie_output").unwrap_or(true),
            layer_norm: r.get("layer_norm").unwrap_or(true),
            ln_eps: r.get("ln_eps").unwrap_or(DEFAULT_LN_EPS),
            per_layer: r.get::<LayerList>("layer_dims").map(|l| l.0).unwrap_or_default(),
        };
        if r.errs.is_empty() {
            if let Err(Error::Config(msg)) = cfg.validate() {
                r.errs.push(msg);
            }
        }
        r.finish(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut r = Reader::new(self);
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            steps: r.get("steps").unwrap_or(d.steps),
            batch_size: r.get("batch_size").unwrap_or(d.batch_size),
            seed: r.get("seed").unwrap_or(d.seed),
            lr: r.get("lr").unwrap_or(d.lr),
            warmup_steps: r.get("warmup_steps").unwrap_or(d.warmup_steps),
            lr_decay: r.get("lr_decay").unwrap_or(d.lr_decay),
            adamw: r.adamw(d.adamw),
            log_interval: r.get("log_interval").unwrap_or(d.log_interval),
        };
        if cfg.batch_size == 0 {
            r.errs.push("batch_size must be at least 1".into());
        }
        if !(cfg.lr > 0.0) {
            r.errs.push(format!("lr must be positive (got {})", cfg.lr));
        }
        r.finish(cfg)
    }

    /// Distillation settings; `hidden_target` is required.
    pub fn distill_config(&self, teacher: &ModelConfig) -> Result<DistillConfig> {
        let mut r = Reader::new(self);
        let d = DistillConfig::new(0);
        let hidden_target = r.required("hidden_target");
        let lr_d = LearningRates::default();
        let steps = r.get("steps").unwrap_or(d.steps);
        let lr_decay: bool = r.get("lr_decay").unwrap_or(false);
        let cfg = DistillConfig {
            steps,
            batch_size: r.get("batch_size").unwrap_or(d.batch_size),
            seed: r.get("seed").unwrap_or(d.seed),
            interval: r.get("interval").unwrap_or(d.interval),
            norm_p: r.get("norm_p").unwrap_or(d.norm_p),
            lr: LearningRates {
                base: r.get("lr_base").unwrap_or(lr_d.base),
                compactor: r.get("lr_compactor").unwrap_or(lr_d.compactor),
                warmup_steps: r.get("warmup_steps").unwrap_or(0),
                decay_steps: if lr_decay { steps } else { 0 },
            },
            adamw: r.adamw(d.adamw),
            strategy: r.get("strategy").unwrap_or(Strategy::DimReduce),
            policy: r.get("gradient_policy").unwrap_or(GradientPolicy::LeaderOnly),
            hidden_target,
            attn_target: r.get("attn_target"),
            ffn_target: r.get("ffn_target"),
            attn_target_layers: r.get::<UsizeList>("attn_target_layers").map(|l| l.0).unwrap_or_default(),
            ffn_target_layers: r.get::<UsizeList>("ffn_target_layers").map(|l| l.0).unwrap_or_default(),
            penalty_scale: r.get("penalty_scale").unwrap_or(d.penalty_scale),
            pin_mask: r.get("pin_mask").unwrap_or(false),
            ln_stats: r.get("ln_stats").unwrap_or_default(),
            ln_merge: r.get("ln_merge").unwrap_or_default(),
            log_interval: r.get("log_interval").unwrap_or(d.log_interval),
        };
        if r.errs.is_empty() {
            if let Err(Error::Config(msg)) = cfg.validate(teacher) {
                r.errs.push(msg);
            }
        }
        r.finish(cfg)
    }

    pub fn eval_batch_size(&self) -> Result<usize> {
        let mut r = Reader::new(self);
        let v = r.get("eval_batch_size").unwrap_or(16);
        r.finish(v)
    }

    pub fn eval_seed(&self) -> Result<u64> {
        let mut r = Reader::new(self);
        let v = r.get("eval_seed").unwrap_or(1234);
        r.finish(v)
    }

    pub fn kd_tau(&self) -> Result<f64> {
        let mut r = Reader::new(self);
        let v = r.get("kd_tau").unwrap_or(1.0);
        r.finish(v)
    }

    pub fn head_matching(&self) -> Result<Option<Matching>> {
        let mut r = Reader::new(self);
        let v = r.get("head_matching");
        r.finish(v)
    }
}

struct Reader<'a> {
    cfg: &'a RunConfig,
    errs: Vec<String>,
}

impl<'a> Reader<'a> {
    fn new(cfg: &'a RunConfig) -> Self {
        Self { cfg, errs: Vec::new() }
    }

    fn get<T: FromStr>(&mut self, key: &str) -> Option<T> {
        let raw = self.cfg.get_raw(key)?;
        match raw.parse() {
            Ok(v) => Some(v),
            Err(_) => {
                self.errs.push(format!("invalid value `{raw}` for `{key}`"));
                None
            }
        }
    }

    fn required<T: FromStr + Default>(&mut self, key: &str) -> T {
        if self.cfg.get_raw(key).is_none() {
            self.errs.push(format!("missing required key `{key}`"));
            return T::default();
        }
        self.get(key).unwrap_or_default()
    }

    fn adamw(&mut self, d: AdamWConfig) -> AdamWConfig {
        AdamWConfig {
            beta1: self.get("beta1").unwrap_or(d.beta1),
            beta2: self.get("beta2").unwrap_or(d.beta2),
            eps: self.get("adam_eps").unwrap_or(d.eps),
            weight_decay_base: self.get("weight_decay").unwrap_or(d.weight_decay_base),
            weight_decay_compactor: d.weight_decay_compactor,
        }
    }

    fn finish<T>(self, v: T) -> Result<T> {
        if self.errs.is_empty() {
            Ok(v)
        } else {
            Err(Error::Config(self.errs.join("; ")))
        }
    }
}

struct UsizeList(Vec<usize>);

impl FromStr for UsizeList {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        s.split(',')
            .map(|t| t.trim().parse().map_err(|_| ()))
            .collect::<std::result::Result<_, _>>()
            .map(UsizeList)
    }
}

/// `heads:head_dim:ffn` per layer, comma separated.
struct LayerList(Vec<LayerDims>);

impl FromStr for LayerList {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        s.split(',')
            .map(|t| {
                let p: Vec<usize> = t
                    .trim()
                    .split(':')
                    .map(|x| x.parse().map_err(|_| ()))
                    .collect::<std::result::Result<_, _>>()?;
                match p[..] {
                    [heads, head_dim, ffn] => Ok(LayerDims { heads, head_dim, ffn }),
                    _ => Err(()),
                }
            })
            .collect::<std::result::Result<_, _>>()
            .map(LayerList)
    }
}

/// Serializes every field of a model configuration.
pub fn model_config_text(cfg: &ModelConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "vocab_size = {}", cfg.vocab_size);
    let _ = writeln!(s, "hidden = {}", cfg.hidden);
    let _ = writeln!(s, "heads = {}", cfg.heads);
    let _ = writeln!(s, "head_dim = {}", cfg.head_dim);
    let _ = writeln!(s, "ffn = {}", cfg.ffn);
    let _ = writeln!(s, "layers = {}", cfg.layers);
    let _ = writeln!(s, "max_seq_len = {}", cfg.max_seq_len);
    let _ = writeln!(s, "mode = {}", cfg.mode);
    let _ = writeln!(s, "tie_output = {}", cfg.tie_output);
    let _ = writeln!(s, "layer_norm = {}", cfg.layer_norm);
    let _ = writeln!(s, "ln_eps = {:e}", cfg.ln_eps);
    if !cfg.per_layer.is_empty() {
        let dims: Vec<String> = cfg
            .per_layer
            .iter()
            .map(|d| format!("{}:{}:{}", d.heads, d.head_dim, d.ffn))
            .collect();
        let _ = writeln!(s, "layer_dims = {}", dims.join(","));
    }
    s
}

pub fn parse_model_config(text: &str) -> Result<ModelConfig> {
    RunConfig::parse(text)?.model_config()
}

pub fn train_config_text(cfg: &TrainConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "steps = {}", cfg.steps);
    let _ = writeln!(s, "batch_size = {}", cfg.batch_size);
    let _ = writeln!(s, "seed = {}", cfg.seed);
    let _ = writeln!(s, "lr = {:e}", cfg.lr);
    let _ = writeln!(s, "warmup_steps = {}", cfg.warmup_steps);
    let _ = writeln!(s, "lr_decay = {}", cfg.lr_decay);
    adamw_text(&mut s, &cfg.adamw);
    let _ = writeln!(s, "log_interval = {}", cfg.log_interval);
    s
}

fn adamw_text(s: &mut String, a: &AdamWConfig) {
    let _ = writeln!(s, "weight_decay = {:e}", a.weight_decay_base);
    let _ = writeln!(s, "beta1 = {}", a.beta1);
    let _ = writeln!(s, "beta2 = {}", a.beta2);
    let _ = writeln!(s, "adam_eps = {:e}", a.eps);
}

pub fn distill_config_text(cfg: &DistillConfig) -> String {
    let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    let mut s = String::new();
    let _ = writeln!(s, "steps = {}", cfg.steps);
    let _ = writeln!(s, "batch_size = {}", cfg.batch_size);
    let _ = writeln!(s, "seed = {}", cfg.seed);
    let _ = writeln!(s, "interval = {}", cfg.interval);
    let _ = writeln!(s, "norm_p = {}", cfg.norm_p);
    let _ = writeln!(s, "lr_base = {:e}", cfg.lr.base);
    let _ = writeln!(s, "lr_compactor = {:e}", cfg.lr.compactor);
    let _ = writeln!(s, "warmup_steps = {}", cfg.lr.warmup_steps);
    let _ = writeln!(s, "lr_decay = {}", cfg.lr.decay_steps > 0);
    adamw_text(&mut s, &cfg.adamw);
    let _ = writeln!(s, "strategy = {}", cfg.strategy);
    let _ = writeln!(s, "gradient_policy = {}", cfg.policy);
    let _ = writeln!(s, "hidden_target = {}", cfg.hidden_target);
    if let Some(a) = cfg.attn_target {
        let _ = writeln!(s, "attn_target = {a}");
    }
    if let Some(f) = cfg.ffn_target {
        let _ = writeln!(s, "ffn_target = {f}");
    }
    if !cfg.attn_target_layers.is_empty() {
        let _ = writeln!(s, "attn_target_layers = {}", join(&cfg.attn_target_layers));
    }
    if !cfg.ffn_target_layers.is_empty() {
        let _ = writeln!(s, "ffn_target_layers = {}", join(&cfg.ffn_target_layers));
    }
    let _ = writeln!(s, "penalty_scale = {}", cfg.penalty_scale);
    let _ = writeln!(s, "pin_mask = {}", cfg.pin_mask);
    let _ = writeln!(s, "ln_stats = {}", cfg.ln_stats);
    let _ = writeln!(s, "ln_merge = {}", cfg.ln_merge);
    let _ = writeln!(s, "log_interval = {}", cfg.log_interval);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lists_every_problem() {
        let err = RunConfig::parse("# c\nhiden = 3\nnonsense\nsteps = 4\nsteps = 5\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("hiden") && msg.contains("line 3") && msg.contains("duplicate"), "{msg}");
        let cfg = RunConfig::parse("hidden = x\nheads = 2\n").unwrap();
        let msg = cfg.model_config().unwrap_err().to_string();
        assert!(msg.contains("`x`") && msg.contains("vocab_size") && msg.contains("layers"), "{msg}");
    }

    #[test]
    fn model_config_round_trips() {
        let mut cfg = ModelConfig::bert(50, 12, 3, 2).unwrap().with_mode(Mode::DecoderCausal);
        cfg.per_layer = vec![
            LayerDims { heads: 3, head_dim: 2, ffn: 7 },
            LayerDims { heads: 1, head_dim: 4, ffn: 9 },
        ];
        cfg.tie_output = false;
        assert_eq!(parse_model_config(&model_config_text(&cfg)).unwrap(), cfg);
    }

    #[test]
    fn distill_round_trips() {
        let teacher = ModelConfig::bert(50, 16, 4, 2).unwrap();
        let mut d = DistillConfig::new(8);
        d.attn_target = Some(8);
        d.strategy = Strategy::HeadDrop;
        d.ffn_target_layers = vec![32, 16];
        d.lr.compactor = 2e-3;
        d.lr.decay_steps = d.steps;
        let back = RunConfig::parse(&distill_config_text(&d)).unwrap().distill_config(&teacher).unwrap();
        assert_eq!(back, d);
        let bad = RunConfig::parse("hidden_target = 8\nattn_target = 6\nstrategy = head_drop\n").unwrap();
        assert!(bad.distill_config(&teacher).unwrap_err().to_string().contains("multiple"));
    }
}
