//! Byte-level corpora, batch sampling, and the `SNFC` corpus cache.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const CACHE_MAGIC: &[u8; 4] = b"SNFC";

/// Share of the corpus held out (from the tail) for validation.
pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.1;

/// Token stream with a train prefix and a validation tail.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedCorpus {
    tokens: Vec<u16>,
    vocab_size: u32,
    train_end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

/// `batch × seq_len` next-token windows, flattened row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub batch: usize,
    pub seq_len: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    /// Absolute start offset of each window in the token stream.
    pub offsets: Vec<usize>,
}

/// Raw bytes become token ids 0..=255.
pub fn tokenize_bytes(text: &[u8]) -> Result<TokenizedCorpus> {
    if text.is_empty() {
        return Err(Error::Ingestion("empty input".into()));
    }
    TokenizedCorpus::from_tokens(text.iter().map(|&b| u16::from(b)).collect(), 256)
}

pub fn detokenize(tokens: &[u16]) -> Vec<u8> {
    tokens.iter().map(|&t| t as u8).collect()
}

impl TokenizedCorpus {
    pub fn from_tokens(tokens: Vec<u16>, vocab_size: u32) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Ingestion("empty token stream".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| u32::from(t) >= vocab_size) {
            return Err(Error::Ingestion(format!("token {bad} >= vocab {vocab_size}")));
        }
        let mut c = TokenizedCorpus {
            tokens,
            vocab_size,
            train_end: 0,
        };
        c.set_validation_fraction(DEFAULT_VALIDATION_FRACTION)?;
        Ok(c)
    }

    /// Re-split so the last `fraction` of tokens is validation.
    pub fn set_validation_fraction(&mut self, fraction: f64) -> Result<()> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::Parameter(format!("validation fraction {fraction} not in (0,1)")));
        }
        let n = self.tokens.len();
        if n < 2 {
            return Err(Error::Ingestion("corpus needs at least 2 tokens to split".into()));
        }
        let val = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
        self.train_end = n - val;
        Ok(())
    }

    pub fn tokens(&self) -> &[u16] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size as usize
    }

    pub fn range(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Train => 0..self.train_end,
            Split::Validation => self.train_end..self.tokens.len(),
        }
    }

    /// A new corpus over `tokens[start..end]`, re-split with the default fraction.
    pub fn subrange(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.tokens.len() {
            return Err(Error::Parameter(format!("bad subrange {start}..{end}")));
        }
        Self::from_tokens(self.tokens[start..end].to_vec(), self.vocab_size)
    }

    /// The single window starting at absolute `offset`.
    pub fn window_at(&self, offset: usize, seq_len: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        if offset + seq_len + 1 > self.tokens.len() {
            return Err(Error::Ingestion(format!(
                "window {offset}+{seq_len} exceeds corpus of {}",
                self.tokens.len()
            )));
        }
        let w = &self.tokens[offset..offset + seq_len + 1];
        Ok((
            w[..seq_len].iter().map(|&t| t as usize).collect(),
            w[1..].iter().map(|&t| t as usize).collect(),
        ))
    }

    fn batch_from_offsets(&self, offsets: Vec<usize>, seq_len: usize) -> Batch {
        let mut inputs = Vec::with_capacity(offsets.len() * seq_len);
        let mut targets = Vec::with_capacity(offsets.len() * seq_len);
        for &o in &offsets {
            let w = &self.tokens[o..o + seq_len + 1];
            inputs.extend(w[..seq_len].iter().map(|&t| t as usize));
            targets.extend(w[1..].iter().map(|&t| t as usize));
        }
        Batch {
            batch: offsets.len(),
            seq_len,
            inputs,
            targets,
            offsets,
        }
    }

    fn check_split_len(&self, split: Split, seq_len: usize) -> Result<std::ops::Range<usize>> {
        let r = self.range(split);
        if seq_len == 0 || r.len() < seq_len + 1 {
            return Err(Error::Ingestion(format!(
                "{split:?} split has {} tokens, need at least {}",
                r.len(),
                seq_len + 1
            )));
        }
        Ok(r)
    }

    /// Uniformly placed windows inside `split`, reproducible from `seed`.
    pub fn sample_batch(&self, split: Split, batch: usize, seq_len: usize, seed: u64) -> Result<Batch> {
        let r = self.check_split_len(split, seq_len)?;
        let last = r.end - seq_len - 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let offsets = (0..batch).map(|_| rng.random_range(r.start..=last)).collect();
        Ok(self.batch_from_offsets(offsets, seq_len))
    }

    /// A fixed schedule of `n_batches` evenly spaced windows over `split`.
    pub fn fixed_batches(
        &self,
        split: Split,
        n_batches: usize,
        batch: usize,
        seq_len: usize,
    ) -> Result<Vec<Batch>> {
        let r = self.check_split_len(split, seq_len)?;
        let count = n_batches * batch;
        let span = r.len() - seq_len - 1;
        let offsets: Vec<usize> = (0..count)
            .map(|i| r.start + if count <= 1 { 0 } else { i * span / (count - 1) })
            .collect();
        Ok(offsets
            .chunks(batch)
            .map(|c| self.batch_from_offsets(c.to_vec(), seq_len))
            .collect())
    }

    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + 2 * self.tokens.len());
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&self.vocab_size.to_le_bytes());
        buf.extend_from_slice(&(self.tokens.len() as u64).to_le_bytes());
        for t in &self.tokens {
            buf.extend_from_slice(&t.to_le_bytes());
        }
        fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn read_cache(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != CACHE_MAGIC {
            return Err(Error::Format("missing SNFC header".into()));
        }
        let vocab = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() != count * 2 {
            return Err(Error::Format(format!(
                "SNFC declares {count} tokens but carries {} bytes",
                body.len()
            )));
        }
        let tokens = body
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        Self::from_tokens(tokens, vocab)
    }
}

/// Load a corpus: an `SNFC` cache if the magic matches, raw bytes otherwise.
pub fn load_corpus(path: &Path) -> Result<TokenizedCorpus> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.starts_with(CACHE_MAGIC) {
        TokenizedCorpus::read_cache(&bytes)
    } else {
        tokenize_bytes(&bytes)
    }
}

/// Deterministic pseudo-language text for toy experiments.
///
/// Words are drawn from a fixed random lexicon with a Zipf-like unigram
/// law and a sparse bigram preference, so the stream has learnable
/// structure at the character, word, and word-transition level.
pub fn synthetic_text(n_bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    const LETTERS: &[u8] = b"etaoinshrdlcumwfgypbvk";
    let lexicon: Vec<Vec<u8>> = (0..400)
        .map(|_| {
            let len = rng.random_range(2..=7);
            (0..len)
                .map(|i| {
                    // cheap vowel/consonant alternation keeps words pronounceable
                    let pool: &[u8] = if i % 2 == 1 { b"aeiou" } else { LETTERS };
                    pool[rng.random_range(0..pool.len())]
                })
                .collect()
        })
        .collect();
    let weights: Vec<f64> = (1..=lexicon.len()).map(|r| 1.0 / r as f64).collect();
    let total: f64 = weights.iter().sum();
    let successors: Vec<[usize; 3]> = (0..lexicon.len())
        .map(|_| std::array::from_fn(|_| rng.random_range(0..40)))
        .collect();
    let draw_zipf = |rng: &mut ChaCha8Rng| {
        let mut u = rng.random::<f64>() * total;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                return i;
            }
            u -= w;
        }
        weights.len() - 1
    };

    let mut out = Vec::with_capacity(n_bytes + 16);
    let mut prev = draw_zipf(&mut rng);
    let mut sentence_len = 0;
    while out.len() < n_bytes {
        let word = if rng.random::<f64>() < 0.6 {
            successors[prev][rng.random_range(0..3)]
        } else {
            draw_zipf(&mut rng)
        };
        if sentence_len == 0 {
            let mut w = lexicon[word].clone();
            w[0] = w[0].to_ascii_uppercase();
            out.extend_from_slice(&w);
        } else {
            out.extend_from_slice(&lexicon[word]);
        }
        sentence_len += 1;
        if sentence_len >= 4 && rng.random::<f64>() < 0.2 {
            out.extend_from_slice(b".\n");
            sentence_len = 0;
        } else {
            out.push(b' ');
        }
        prev = word;
    }
    out.truncate(n_bytes);
    out
}
