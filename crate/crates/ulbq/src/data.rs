//! Character-level corpus handling: tokenizer, splits, and sampling.
//!
//! The tokenizer is built from the corpus itself — its alphabet is the
//! sorted set of distinct characters — so there are no external vocabulary
//! assets and any UTF-8 text file works. The encoded corpus is split
//! contiguously into train/valid/test ranges; all sampling draws from the
//! train range only.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Fraction of tokens in the train split; the remainder is halved between
/// validation and test.
pub const TRAIN_FRACTION: f64 = 0.9;

/// Sorted-alphabet character tokenizer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    /// Distinct characters, sorted ascending; a character's index is its id.
    chars: Vec<char>,
}

impl Tokenizer {
    pub fn from_text(text: &str) -> Tokenizer {
        let mut chars: Vec<char> = text.chars().collect();
        chars.sort_unstable();
        chars.dedup();
        Tokenizer { chars }
    }

    /// Rebuild from a stored alphabet (one id per character, in order).
    pub fn from_alphabet(chars: Vec<char>) -> Result<Tokenizer> {
        if chars.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::corrupt("tokenizer alphabet is not sorted and distinct"));
        }
        Ok(Tokenizer { chars })
    }

    pub fn vocab(&self) -> usize {
        self.chars.len()
    }

    pub fn alphabet(&self) -> &[char] {
        &self.chars
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .map(|c| {
                self.chars
                    .binary_search(&c)
                    .map(|i| i as u32)
                    .map_err(|_| Error::data(format!("character {c:?} is not in the alphabet")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        ids.iter()
            .map(|&i| {
                self.chars
                    .get(i as usize)
                    .copied()
                    .ok_or_else(|| Error::data(format!("token id {i} out of range")))
            })
            .collect()
    }
}

/// A batch of fixed-length sequences with next-character targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// `n × seq_len` input ids, row-major.
    pub inputs: Vec<u32>,
    /// `n × seq_len` target ids (inputs shifted one position left).
    pub targets: Vec<u32>,
    pub n: usize,
    pub seq_len: usize,
}

impl Batch {
    pub fn shape(&self) -> (usize, usize) {
        (self.n, self.seq_len)
    }
}

/// An encoded corpus with contiguous train/valid/test ranges.
#[derive(Debug, Clone)]
pub struct TextDataset {
    pub tokenizer: Tokenizer,
    tokens: Vec<u32>,
    train_end: usize,
    valid_end: usize,
}

impl TextDataset {
    pub fn from_text(text: &str) -> Result<TextDataset> {
        let tokenizer = Tokenizer::from_text(text);
        if tokenizer.vocab() < 2 {
            return Err(Error::data(format!(
                "corpus needs at least 2 distinct characters, found {}",
                tokenizer.vocab()
            )));
        }
        let tokens = tokenizer.encode(text)?;
        let train_end = (tokens.len() as f64 * TRAIN_FRACTION) as usize;
        let valid_end = train_end + (tokens.len() - train_end) / 2;
        Ok(TextDataset { tokenizer, tokens, train_end, valid_end })
    }

    pub fn load(path: &Path) -> Result<TextDataset> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        TextDataset::from_text(&text)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn train_tokens(&self) -> &[u32] {
        &self.tokens[..self.train_end]
    }

    pub fn valid_tokens(&self) -> &[u32] {
        &self.tokens[self.train_end..self.valid_end]
    }

    pub fn test_tokens(&self) -> &[u32] {
        &self.tokens[self.valid_end..]
    }

    /// Draw `n` training sequences of `seq_len` tokens (plus the shifted
    /// targets), start positions uniform under the given seed. The same
    /// seed always yields the same batch.
    pub fn sample_batch(&self, n: usize, seq_len: usize, seed: u64) -> Result<Batch> {
        let mut rng = Rng::seeded(seed);
        self.sample_batch_with(n, seq_len, &mut rng)
    }

    /// Like [`Self::sample_batch`] but advancing a caller-owned stream, for
    /// loops that draw many batches.
    pub fn sample_batch_with(&self, n: usize, seq_len: usize, rng: &mut Rng) -> Result<Batch> {
        assert!(n > 0 && seq_len > 0, "batch dimensions must be positive");
        let need = seq_len + 1;
        let train = self.train_tokens();
        if train.len() < need {
            return Err(Error::data(format!(
                "train split has {} tokens but sampling needs at least {need} (seq_len {seq_len} + 1 target)",
                train.len()
            )));
        }
        let span = train.len() - need + 1;
        let mut inputs = Vec::with_capacity(n * seq_len);
        let mut targets = Vec::with_capacity(n * seq_len);
        for _ in 0..n {
            let start = rng.below(span);
            inputs.extend_from_slice(&train[start..start + seq_len]);
            targets.extend_from_slice(&train[start + 1..start + need]);
        }
        Ok(Batch { inputs, targets, n, seq_len })
    }
}
