//! Deterministic batches from a corpus.
//!
//! Training batches depend only on `(seed, step)`: sequence order comes from
//! a seeded permutation per epoch and MLM corruption from a ChaCha stream
//! keyed by the step. A resumed run therefore needs no sampler state.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{MASK, NUM_SPECIAL};
use crate::error::{Error, Result};
use crate::model::{Batch, Mode};

/// Fraction of positions selected for prediction.
pub const MLM_PROB: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub mode: Mode,
    pub vocab_size: usize,
    pub seed: u64,
}

/// Builds a batch from whole sequences, corrupting it with `rng` in
/// encoder mode.
pub fn make_batch(seqs: &[&[u32]], cfg: &BatchConfig, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let n = seqs
        .first()
        .map(|s| s.len())
        .ok_or_else(|| Error::InvalidBatch("no sequences".into()))?;
    if seqs.iter().any(|s| s.len() != n) {
        return Err(Error::InvalidBatch("sequences have unequal lengths".into()));
    }
    match cfg.mode {
        Mode::DecoderCausal => {
            if n < 2 {
                return Err(Error::InvalidBatch("causal batches need length ≥ 2".into()));
            }
            let m = n - 1;
            let mut b = Batch {
                batch_size: seqs.len(),
                seq_len: m,
                input_ids: Vec::with_capacity(seqs.len() * m),
                segment_ids: vec![0; seqs.len() * m],
                targets: Vec::with_capacity(seqs.len() * m),
                loss_mask: vec![true; seqs.len() * m],
            };
            for s in seqs {
                b.input_ids.extend_from_slice(&s[..m]);
                b.targets.extend_from_slice(&s[1..]);
            }
            Ok(b)
        }
        Mode::EncoderMlm => {
            let half = n / 2;
            let mut b = Batch {
                batch_size: seqs.len(),
                seq_len: n,
                input_ids: Vec::with_capacity(seqs.len() * n),
                segment_ids: Vec::with_capacity(seqs.len() * n),
                targets: Vec::with_capacity(seqs.len() * n),
                loss_mask: Vec::with_capacity(seqs.len() * n),
            };
            for s in seqs {
                b.targets.extend_from_slice(s);
                b.segment_ids.extend((0..n).map(|i| u32::from(i >= half)));
                for &tok in s.iter() {
                    let selected = rng.random::<f64>() < MLM_PROB;
                    b.loss_mask.push(selected);
                    b.input_ids.push(if selected { corrupt(tok, cfg, rng) } else { tok });
                }
            }
            if !b.loss_mask.iter().any(|&m| m) {
                let i = rng.random_range(0..b.loss_mask.len());
                b.loss_mask[i] = true;
                b.input_ids[i] = corrupt(b.targets[i], cfg, rng);
            }
            Ok(b)
        }
    }
}

/// 80% MASK, 10% random content token, 10% unchanged.
fn corrupt(tok: u32, cfg: &BatchConfig, rng: &mut ChaCha8Rng) -> u32 {
    let u = rng.random::<f64>();
    if u < 0.8 {
        MASK
    } else if u < 0.9 {
        rng.random_range(NUM_SPECIAL..cfg.vocab_size as u32)
    } else {
        tok
    }
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Training batches in seeded shuffled epochs.
pub struct Batcher<'a> {
    seqs: &'a [Vec<u32>],
    cfg: BatchConfig,
    cached: Option<(u64, Vec<usize>)>,
}

impl<'a> Batcher<'a> {
    pub fn new(seqs: &'a [Vec<u32>], cfg: BatchConfig) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::InvalidBatch("training corpus is empty".into()));
        }
        if cfg.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(Self {
            seqs,
            cfg,
            cached: None,
        })
    }

    fn permutation(&mut self, epoch: u64) -> &[usize] {
        if self.cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.seqs.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0xba7c_4e5);
            rng.set_stream(epoch);
            perm.shuffle(&mut rng);
            self.cached = Some((epoch, perm));
        }
        &self.cached.as_ref().expect("just filled").1
    }

    /// The batch consumed at optimizer step `step` (0-based).
    pub fn batch(&mut self, step: u64) -> Result<Batch> {
        let n = self.seqs.len() as u64;
        let bs = self.cfg.batch_size as u64;
        let mut picks = Vec::with_capacity(bs as usize);
        for j in 0..bs {
            let global = step * bs + j;
            let (epoch, pos) = (global / n, (global % n) as usize);
            picks.push(self.permutation(epoch)[pos]);
        }
        let seqs: Vec<&[u32]> = picks.iter().map(|&i| self.seqs[i].as_slice()).collect();
        make_batch(&seqs, &self.cfg, &mut step_rng(self.cfg.seed, step))
    }
}

/// Fixed evaluation batches covering every sequence once, in order.
pub fn eval_batches(seqs: &[Vec<u32>], cfg: &BatchConfig) -> Result<Vec<Batch>> {
    if seqs.is_empty() {
        return Err(Error::InvalidBatch("evaluation corpus is empty".into()));
    }
    let mut rng = step_rng(cfg.seed, u64::MAX);
    seqs.chunks(cfg.batch_size.max(1))
        .map(|chunk| {
            let refs: Vec<&[u32]> = chunk.iter().map(Vec::as_slice).collect();
            make_batch(&refs, cfg, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mode: Mode) -> BatchConfig {
        BatchConfig {
            batch_size: 3,
            mode,
            vocab_size: 20,
            seed: 5,
        }
    }

    fn seqs() -> Vec<Vec<u32>> {
        (0..7).map(|i| (0..10).map(|j| 4 + (i + j) % 16).collect()).collect()
    }

    #[test]
    fn batches_depend_only_on_step() {
        let s = seqs();
        let mut a = Batcher::new(&s, cfg(Mode::EncoderMlm)).unwrap();
        let mut b = Batcher::new(&s, cfg(Mode::EncoderMlm)).unwrap();
        let late = a.batch(9).unwrap();
        for step in 0..9 {
            b.batch(step).unwrap();
        }
        assert_eq!(late, b.batch(9).unwrap());
        assert_eq!(a.batch(2).unwrap(), b.batch(2).unwrap());
    }

    #[test]
    fn epochs_visit_every_sequence() {
        let s = seqs();
        let mut c = cfg(Mode::DecoderCausal);
        c.batch_size = 1;
        let mut b = Batcher::new(&s, c).unwrap();
        let mut firsts: Vec<u32> = (0..7).map(|t| b.batch(t).unwrap().input_ids[0]).collect();
        firsts.sort();
        assert_eq!(firsts, (4..11).collect::<Vec<_>>());
    }

    #[test]
    fn causal_targets_are_shifted() {
        let s = seqs();
        let b = make_batch(&[&s[0]], &cfg(Mode::DecoderCausal), &mut step_rng(0, 0)).unwrap();
        assert_eq!(b.seq_len, 9);
        assert_eq!(&b.input_ids[1..], &b.targets[..8]);
    }

    #[test]
    fn mlm_always_predicts_something() {
        let s = vec![vec![5u32, 6]];
        for step in 0..50 {
            let b = make_batch(&[&s[0]], &cfg(Mode::EncoderMlm), &mut step_rng(1, step)).unwrap();
            assert!(b.loss_mask.iter().any(|&m| m));
            assert_eq!(b.segment_ids, vec![0, 1]);
        }
    }
}
