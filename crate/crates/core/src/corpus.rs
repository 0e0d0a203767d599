//! Synthetic token corpus with learnable structure.
//!
//! Content tokens are split into contiguous clusters. The first half of
//! every sequence follows an order-2 Markov chain: the cluster of the next
//! token is drawn from a sparse successor set keyed by the clusters of the
//! previous two tokens, and the token itself from a fixed Zipf-like
//! distribution inside that cluster. With probability `epsilon` a uniformly
//! random token is emitted instead. The chain starts from its stationary
//! pair distribution. In the second half each token copies the token
//! `copy_lag` positions earlier with probability `copy_prob`, and is
//! otherwise drawn from the stationary unigram distribution, so every
//! position has the same marginal.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
/// Ids below this are reserved for special tokens.
pub const NUM_SPECIAL: u32 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    /// Total number of distinct sequences (train plus heldout).
    pub seqs: usize,
    pub seq_len: usize,
    pub seed: u64,
    /// Number of token clusters the chain moves between.
    pub clusters: usize,
    /// Successor clusters per cluster pair.
    pub branching: usize,
    /// Probability of emitting a uniformly random token instead.
    pub epsilon: f64,
    pub copy_lag: usize,
    pub copy_prob: f64,
    /// Fraction of sequences written to the heldout split.
    pub heldout_fraction: f64,
}

impl CorpusSpec {
    pub fn new(vocab_size: usize, seqs: usize, seq_len: usize, seed: u64) -> Self {
        let content = vocab_size.saturating_sub(NUM_SPECIAL as usize);
        Self {
            vocab_size,
            seqs,
            seq_len,
            seed,
            clusters: (content / 8).clamp(1, 16),
            branching: 4,
            epsilon: 0.05,
            copy_lag: (seq_len / 2).max(1),
            copy_prob: 0.5,
            heldout_fraction: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.vocab_size < 8 {
            errs.push(format!("vocab must be at least 8 (got {})", self.vocab_size));
        }
        if self.seqs == 0 {
            errs.push("corpus would be empty (seqs = 0)".to_string());
        }
        if self.seq_len < 4 {
            errs.push(format!("sequence length must be at least 4 (got {})", self.seq_len));
        }
        if self.branching == 0 {
            errs.push("branching must be at least 1".to_string());
        }
        let content = self.vocab_size.saturating_sub(NUM_SPECIAL as usize);
        if self.clusters == 0 || self.clusters > content {
            errs.push(format!("clusters must lie in 1..={content} (got {})", self.clusters));
        }
        if !(0.0..=1.0).contains(&self.epsilon) || !(0.0..=1.0).contains(&self.copy_prob) {
            errs.push("epsilon and copy_prob must lie in [0, 1]".to_string());
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            errs.push("heldout_fraction must lie in [0, 1)".to_string());
        }
        if self.copy_lag == 0 || self.copy_lag >= self.seq_len {
            errs.push(format!("copy_lag must lie in 1..{}", self.seq_len));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}

/// The order-2 chain and its stationary distributions.
pub struct Generator {
    spec: CorpusSpec,
    /// Content-vocabulary size (`vocab_size − NUM_SPECIAL`).
    m: usize,
    /// Cluster of every content token.
    cluster_of: Vec<usize>,
    /// `P(next token | clusters x, y)` for every cluster pair `x·K + y`.
    next: Vec<WeightedIndex<f64>>,
    next_probs: Vec<Vec<f64>>,
    /// Stationary probability of each token pair `a·m + b`.
    pair_stationary: Vec<f64>,
    unigram: Vec<f64>,
}

impl Generator {
    pub fn new(spec: CorpusSpec) -> Result<Self> {
        spec.validate()?;
        let m = spec.vocab_size - NUM_SPECIAL as usize;
        let k = spec.clusters;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let cluster_of: Vec<usize> = (0..m).map(|t| t * k / m).collect();
        // Zipf weights over a random ranking inside each cluster.
        let mut within = vec![0.0; m];
        for c in 0..k {
            let members: Vec<usize> = (0..m).filter(|&t| cluster_of[t] == c).collect();
            let mut ranks: Vec<usize> = (1..=members.len()).collect();
            ranks.shuffle(&mut rng);
            let total: f64 = ranks.iter().map(|&r| 1.0 / r as f64).sum();
            for (&t, &r) in members.iter().zip(&ranks) {
                within[t] = 1.0 / r as f64 / total;
            }
        }
        let eps = spec.epsilon;
        let next_probs: Vec<Vec<f64>> = (0..k * k)
            .map(|_| {
                let raw: Vec<(usize, f64)> = (0..spec.branching)
                    .map(|_| (rng.random_range(0..k), rng.random_range(0.1..1.0)))
                    .collect();
                let total: f64 = raw.iter().map(|e| e.1).sum();
                let mut dist = vec![eps / m as f64; m];
                for (c, w) in raw {
                    for t in 0..m {
                        if cluster_of[t] == c {
                            dist[t] += (1.0 - eps) * w / total * within[t];
                        }
                    }
                }
                dist
            })
            .collect();
        let next = next_probs
            .iter()
            .map(|d| WeightedIndex::new(d).map_err(|e| Error::State(format!("transition table: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Self {
            spec,
            m,
            cluster_of,
            next,
            next_probs,
            pair_stationary: Vec::new(),
            unigram: Vec::new(),
        };
        g.solve_stationary();
        Ok(g)
    }

    pub fn spec(&self) -> &CorpusSpec {
        &self.spec
    }

    fn context(&self, a: usize, b: usize) -> usize {
        self.cluster_of[a] * self.spec.clusters + self.cluster_of[b]
    }

    /// The chain only sees cluster pairs, so it lumps onto a chain over
    /// cluster pairs with stationary law `π`. From it,
    /// `ρ(x, b) = Σ_w π(w, x)·P(b | w, x)` is the joint law of the previous
    /// token's cluster and the current token, and the token-pair law is
    /// `P(a, b) = Σ_x ρ(x, a)·P(b | x, cluster(a))`.
    fn solve_stationary(&mut self) {
        let (m, k) = (self.m, self.spec.clusters);
        let mut lumped = vec![vec![0.0; k]; k * k];
        for (xy, dist) in self.next_probs.iter().enumerate() {
            for t in 0..m {
                lumped[xy][self.cluster_of[t]] += dist[t];
            }
        }
        let mut pi = vec![1.0 / (k * k) as f64; k * k];
        for _ in 0..10_000 {
            let mut next = vec![0.0; k * k];
            for x in 0..k {
                for y in 0..k {
                    let p = pi[x * k + y];
                    for z in 0..k {
                        next[y * k + z] += p * lumped[x * k + y][z];
                    }
                }
            }
            let delta: f64 = next.iter().zip(&pi).map(|(x, y)| (x - y).abs()).sum();
            pi = next;
            if delta < 1e-15 {
                break;
            }
        }
        let mut rho = vec![0.0; k * m];
        for w in 0..k {
            for x in 0..k {
                let p = pi[w * k + x];
                for (b, &q) in self.next_probs[w * k + x].iter().enumerate() {
                    rho[x * m + b] += p * q;
                }
            }
        }
        let mut pair = vec![0.0; m * m];
        for a in 0..m {
            let y = self.cluster_of[a];
            for x in 0..k {
                let r = rho[x * m + a];
                for (b, &q) in self.next_probs[x * k + y].iter().enumerate() {
                    pair[a * m + b] += r * q;
                }
            }
        }
        self.unigram = (0..m).map(|b| (0..m).map(|a| pair[a * m + b]).sum()).collect();
        self.pair_stationary = pair;
    }

    /// Stationary probability of each vocabulary id (zero for specials).
    pub fn stationary_unigram(&self) -> Vec<f64> {
        let mut v = vec![0.0; NUM_SPECIAL as usize];
        v.extend(&self.unigram);
        v
    }

    fn sample(&self, rng: &mut ChaCha8Rng, pairs: &WeightedIndex<f64>, uni: &WeightedIndex<f64>) -> Vec<u32> {
        let (m, n, spec) = (self.m, self.spec.seq_len, &self.spec);
        let half = n / 2;
        let mut out = Vec::with_capacity(n);
        let start = pairs.sample(rng);
        out.push((start / m) as u32);
        out.push((start % m) as u32);
        while out.len() < half.max(2) {
            let (a, b) = (out[out.len() - 2] as usize, out[out.len() - 1] as usize);
            out.push(self.next[self.context(a, b)].sample(rng) as u32);
        }
        while out.len() < n {
            let i = out.len();
            let tok = if i >= spec.copy_lag && rng.random::<f64>() < spec.copy_prob {
                out[i - spec.copy_lag]
            } else {
                uni.sample(rng) as u32
            };
            out.push(tok);
        }
        out.into_iter().map(|t| t + NUM_SPECIAL).collect()
    }

    /// Draws `spec.seqs` distinct sequences and splits them.
    pub fn generate(&self) -> Result<Corpus> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ 0x5eed_c0de);
        let pairs = WeightedIndex::new(&self.pair_stationary)
            .map_err(|e| Error::State(format!("stationary distribution: {e}")))?;
        let uni = WeightedIndex::new(&self.unigram)
            .map_err(|e| Error::State(format!("unigram distribution: {e}")))?;
        let mut seen = HashSet::new();
        let mut seqs = Vec::with_capacity(self.spec.seqs);
        let max_draws = self.spec.seqs.saturating_mul(20).max(1000);
        let mut draws = 0;
        while seqs.len() < self.spec.seqs {
            if draws == max_draws {
                return Err(Error::Config(format!(
                    "could only draw {} distinct sequences of the {} requested",
                    seqs.len(),
                    self.spec.seqs
                )));
            }
            draws += 1;
            let s = self.sample(&mut rng, &pairs, &uni);
            if seen.insert(s.clone()) {
                seqs.push(s);
            }
        }
        let mut n_held = (self.spec.seqs as f64 * self.spec.heldout_fraction).round() as usize;
        if self.spec.heldout_fraction > 0.0 && self.spec.seqs >= 2 {
            n_held = n_held.clamp(1, self.spec.seqs - 1);
        }
        let heldout = seqs.split_off(seqs.len() - n_held);
        Ok(Corpus {
            seq_len: self.spec.seq_len,
            train: seqs,
            heldout,
        })
    }
}

/// Train and heldout splits of equal-length sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub seq_len: usize,
    pub train: Vec<Vec<u32>>,
    pub heldout: Vec<Vec<u32>>,
}

pub const TRAIN_FILE: &str = "train.txt";
pub const HELDOUT_FILE: &str = "heldout.txt";

fn write_split(path: &Path, seqs: &[Vec<u32>]) -> Result<()> {
    let mut text = String::new();
    for s in seqs {
        let line: Vec<String> = s.iter().map(u32::to_string).collect();
        text.push_str(&line.join(" "));
        text.push('\n');
    }
    crate::io::write_atomic(path, text.as_bytes())
}

/// Reads one split: one sequence per line, ids separated by spaces.
pub fn read_split(path: &Path) -> Result<Vec<Vec<u32>>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let seq = line
            .split_whitespace()
            .map(|t| t.parse::<u32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(seq);
    }
    Ok(out)
}

impl Corpus {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_split(&dir.join(TRAIN_FILE), &self.train)?;
        write_split(&dir.join(HELDOUT_FILE), &self.heldout)
    }

    /// Loads both splits from `dir` and checks ids and lengths.
    pub fn read(dir: &Path, vocab_size: usize) -> Result<Corpus> {
        let train = read_split(&dir.join(TRAIN_FILE))?;
        let heldout_path = dir.join(HELDOUT_FILE);
        let heldout = if heldout_path.exists() {
            read_split(&heldout_path)?
        } else {
            Vec::new()
        };
        let seq_len = train
            .first()
            .or(heldout.first())
            .map(Vec::len)
            .ok_or_else(|| Error::InvalidBatch(format!("corpus at {} is empty", dir.display())))?;
        for s in train.iter().chain(&heldout) {
            if s.len() != seq_len {
                return Err(Error::Format(format!(
                    "sequences have unequal lengths ({} and {seq_len})",
                    s.len()
                )));
            }
            if let Some(&bad) = s.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(Error::Index {
                    index: bad as usize,
                    bound: vocab_size,
                });
            }
        }
        Ok(Corpus {
            seq_len,
            train,
            heldout,
        })
    }
}

/// Total-variation distance between the empirical unigram of `seqs` and `p`.
pub fn unigram_tv(seqs: &[Vec<u32>], p: &[f64]) -> f64 {
    let mut counts = vec![0.0f64; p.len()];
    let mut total = 0.0;
    for s in seqs {
        for &t in s {
            counts[t as usize] += 1.0;
            total += 1.0;
        }
    }
    0.5 * counts
        .iter()
        .zip(p)
        .map(|(c, q)| (c / total - q).abs())
        .sum::<f64>()
}

/// Writes the resolved generator settings next to the corpus files.
pub fn write_spec(dir: &Path, spec: &CorpusSpec) -> Result<()> {
    let mut f = Vec::new();
    writeln!(f, "vocab_size = {}", spec.vocab_size)?;
    writeln!(f, "seqs = {}", spec.seqs)?;
    writeln!(f, "seq_len = {}", spec.seq_len)?;
    writeln!(f, "seed = {}", spec.seed)?;
    writeln!(f, "clusters = {}", spec.clusters)?;
    writeln!(f, "branching = {}", spec.branching)?;
    writeln!(f, "epsilon = {}", spec.epsilon)?;
    writeln!(f, "copy_lag = {}", spec.copy_lag)?;
    writeln!(f, "copy_prob = {}", spec.copy_prob)?;
    writeln!(f, "heldout_fraction = {}", spec.heldout_fraction)?;
    crate::io::write_atomic(&dir.join("corpus.cfg"), &f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_degenerate_specs() {
        assert!(Generator::new(CorpusSpec::new(512, 0, 16, 1)).is_err());
        assert!(Generator::new(CorpusSpec::new(7, 10, 16, 1)).is_err());
    }

    #[test]
    fn ids_are_content_tokens_and_splits_disjoint() {
        let g = Generator::new(CorpusSpec::new(16, 200, 12, 9)).unwrap();
        let c = g.generate().unwrap();
        assert_eq!(c.train.len() + c.heldout.len(), 200);
        let train: HashSet<_> = c.train.iter().collect();
        assert!(c.heldout.iter().all(|s| !train.contains(s)));
        for s in c.train.iter().chain(&c.heldout) {
            assert_eq!(s.len(), 12);
            assert!(s.iter().all(|&t| (NUM_SPECIAL..16).contains(&t)));
        }
        let p = g.stationary_unigram();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
