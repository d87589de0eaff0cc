//! Compact token vocabulary: the subset of base tokenizer ids that actually
//! occur in a corpus, re-indexed densely so the embedding table stays small.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::TextTokenizer;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("vocabulary file: {0}")]
    Io(#[from] std::io::Error),
    #[error("vocabulary file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported vocabulary version {0}")]
    Version(u32),
}

/// Compact indices of the four specials. These always occupy 0..=3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub pad: u32,
    pub bos: u32,
    pub eos: u32,
    pub unk: u32,
}

pub const SPECIALS: Specials = Specials { pad: 0, bos: 1, eos: 2, unk: 3 };
pub const N_SPECIALS: u32 = 4;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    min_frequency: u64,
    specials: Specials,
    /// (base_id, compact_id, frequency) for every retained non-special id.
    entries: Vec<(u32, u32, u64)>,
}

#[derive(Debug, Clone)]
pub struct TokenVocabulary {
    base_to_compact: BTreeMap<u32, u32>,
    compact_to_base: Vec<u32>,
    frequencies: BTreeMap<u32, u64>,
    pub min_frequency: u64,
}

impl TokenVocabulary {
    /// Builds the vocabulary from already-counted base-id frequencies. The
    /// caller must have excluded the tokenizer's own marker ids. Retained
    /// ids are compacted in ascending base-id order after the specials.
    pub fn from_frequencies(frequencies: BTreeMap<u32, u64>, min_frequency: u64) -> Self {
        let min_frequency = min_frequency.max(1);
        let mut base_to_compact = BTreeMap::new();
        let mut compact_to_base = Vec::new();
        for (&base, &freq) in &frequencies {
            if freq >= min_frequency {
                let compact = N_SPECIALS + compact_to_base.len() as u32;
                base_to_compact.insert(base, compact);
                compact_to_base.push(base);
            }
        }
        if compact_to_base.is_empty() {
            log::warn!("token vocabulary has no retained entries; only specials are mapped");
        }
        TokenVocabulary { base_to_compact, compact_to_base, frequencies, min_frequency }
    }

    /// Counts base-id frequencies over a corpus of pre-tokenized id streams.
    pub fn build<I, S>(streams: I, tokenizer: &dyn TextTokenizer, min_frequency: u64) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u32]>,
    {
        let mut freq: BTreeMap<u32, u64> = BTreeMap::new();
        for stream in streams {
            for &id in stream.as_ref() {
                if !tokenizer.is_special(id) {
                    *freq.entry(id).or_insert(0) += 1;
                }
            }
        }
        Self::from_frequencies(freq, min_frequency)
    }

    /// Number of compact text-token indices, specials included.
    pub fn text_dim(&self) -> u32 {
        N_SPECIALS + self.compact_to_base.len() as u32
    }

    pub fn retained(&self) -> &[u32] {
        &self.compact_to_base
    }

    pub fn frequency(&self, base: u32) -> u64 {
        self.frequencies.get(&base).copied().unwrap_or(0)
    }

    /// Maps a base tokenizer id to its compact index. Marker ids map to the
    /// corresponding specials; anything unseen maps to unk.
    pub fn compact(&self, base: u32, tokenizer: &dyn TextTokenizer) -> u32 {
        if base == tokenizer.bos_id() {
            SPECIALS.bos
        } else if base == tokenizer.eos_id() {
            SPECIALS.eos
        } else if base == tokenizer.pad_id() {
            SPECIALS.pad
        } else if base == tokenizer.unk_id() {
            SPECIALS.unk
        } else {
            self.base_to_compact.get(&base).copied().unwrap_or(SPECIALS.unk)
        }
    }

    pub fn base_of(&self, compact: u32) -> Option<u32> {
        compact.checked_sub(N_SPECIALS).and_then(|i| self.compact_to_base.get(i as usize)).copied()
    }

    pub fn save(&self, w: &mut dyn Write) -> Result<(), VocabError> {
        let file = VocabFile {
            version: 1,
            min_frequency: self.min_frequency,
            specials: SPECIALS,
            entries: self
                .compact_to_base
                .iter()
                .enumerate()
                .map(|(i, &base)| (base, N_SPECIALS + i as u32, self.frequency(base)))
                .collect(),
        };
        serde_json::to_writer(w, &file)?;
        Ok(())
    }

    pub fn load(r: impl Read) -> Result<Self, VocabError> {
        let file: VocabFile = serde_json::from_reader(r)?;
        if file.version != 1 {
            return Err(VocabError::Version(file.version));
        }
        let mut frequencies = BTreeMap::new();
        for &(base, _, freq) in &file.entries {
            frequencies.insert(base, freq);
        }
        Ok(Self::from_frequencies(frequencies, file.min_frequency))
    }

    pub fn load_file(path: &Path) -> Result<Self, VocabError> {
        Self::load(std::fs::File::open(path)?)
    }
}
