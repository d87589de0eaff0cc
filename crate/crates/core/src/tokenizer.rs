//! Pluggable text tokenization behind a "text to base token ids" interface.
//!
//! The default implementation loads a SentencePiece-style vocabulary file —
//! one piece per line (an optional tab-separated score column is ignored),
//! the piece id being the line number — and tokenizes by greedy longest
//! match. A full multilingual vocabulary export can be dropped in without
//! shipping any model weights.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("tokenizer vocabulary '{path}': {source}")]
    Unreadable { path: String, source: std::io::Error },
    #[error("tokenizer vocabulary is missing required piece '{0}'")]
    MissingSpecial(&'static str),
    #[error("tokenizer vocabulary is empty")]
    Empty,
}

/// Word-boundary marker used by SentencePiece vocabularies.
pub const WORD_BOUNDARY: char = '\u{2581}';

pub trait TextTokenizer {
    /// Base token ids for `text`, wrapped in the tokenizer's own
    /// sequence-start and sequence-end markers.
    fn encode(&self, text: &str) -> Vec<u32>;
    fn bos_id(&self) -> u32;
    fn eos_id(&self) -> u32;
    fn pad_id(&self) -> u32;
    fn unk_id(&self) -> u32;
    fn base_vocab_size(&self) -> u32;

    fn is_special(&self, id: u32) -> bool {
        id == self.bos_id() || id == self.eos_id() || id == self.pad_id() || id == self.unk_id()
    }
}

#[derive(Debug)]
pub struct SubwordTokenizer {
    piece_ids: HashMap<String, u32>,
    max_piece_chars: usize,
    n_pieces: u32,
    bos: u32,
    eos: u32,
    pad: u32,
    unk: u32,
}

impl SubwordTokenizer {
    pub fn from_reader(reader: impl Read) -> Result<Self, TokenizerError> {
        let mut piece_ids = HashMap::new();
        let mut max_piece_chars = 0;
        let mut n = 0u32;
        for line in BufReader::new(reader).lines() {
            let line = line.map_err(|e| TokenizerError::Unreadable {
                path: "<reader>".into(),
                source: e,
            })?;
            let piece = line.split('\t').next().unwrap_or("").to_string();
            if piece.is_empty() {
                n += 1; // blank line still consumes an id slot
                continue;
            }
            max_piece_chars = max_piece_chars.max(piece.chars().count());
            piece_ids.entry(piece).or_insert(n);
            n += 1;
        }
        if n == 0 {
            return Err(TokenizerError::Empty);
        }
        let find = |name: &'static str| -> Result<u32, TokenizerError> {
            piece_ids.get(name).copied().ok_or(TokenizerError::MissingSpecial(name))
        };
        let bos = find("<s>")?;
        let pad = find("<pad>")?;
        let eos = find("</s>")?;
        let unk = find("<unk>")?;
        Ok(SubwordTokenizer { piece_ids, max_piece_chars, n_pieces: n, bos, eos, pad, unk })
    }

    pub fn from_file(path: &Path) -> Result<Self, TokenizerError> {
        let f = std::fs::File::open(path).map_err(|e| TokenizerError::Unreadable {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_reader(f)
    }

    fn is_special_piece(piece: &str) -> bool {
        matches!(piece, "<s>" | "</s>" | "<pad>" | "<unk>")
    }
}

impl TextTokenizer for SubwordTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        // SentencePiece convention: a word-boundary marker replaces every
        // space and is prepended to the text.
        let mut normalized = String::with_capacity(text.len() + 4);
        normalized.push(WORD_BOUNDARY);
        for ch in text.chars() {
            normalized.push(if ch == ' ' { WORD_BOUNDARY } else { ch });
        }

        let chars: Vec<(usize, char)> = normalized.char_indices().collect();
        let mut byte_offsets: Vec<usize> = chars.iter().map(|(b, _)| *b).collect();
        byte_offsets.push(normalized.len());

        let mut out = vec![self.bos];
        let mut i = 0;
        while i < chars.len() {
            let mut matched = None;
            let longest = self.max_piece_chars.min(chars.len() - i);
            for len in (1..=longest).rev() {
                let cand = &normalized[byte_offsets[i]..byte_offsets[i + len]];
                if Self::is_special_piece(cand) {
                    continue; // literal text never produces marker tokens
                }
                if let Some(&id) = self.piece_ids.get(cand) {
                    matched = Some((id, len));
                    break;
                }
            }
            match matched {
                Some((id, len)) => {
                    out.push(id);
                    i += len;
                }
                None => {
                    out.push(self.unk);
                    i += 1;
                }
            }
        }
        out.push(self.eos);
        out
    }

    fn bos_id(&self) -> u32 {
        self.bos
    }

    fn eos_id(&self) -> u32 {
        self.eos
    }

    fn pad_id(&self) -> u32 {
        self.pad
    }

    fn unk_id(&self) -> u32 {
        self.unk
    }

    fn base_vocab_size(&self) -> u32 {
        self.n_pieces
    }
}

/// Writes a minimal tokenizer vocabulary covering printable ASCII plus the
/// given extra pieces. Used for fixtures and as a starting point when no
/// pretrained vocabulary export is available.
pub fn write_ascii_vocab(out: &mut dyn std::io::Write, extra: &[&str]) -> std::io::Result<()> {
    writeln!(out, "<s>")?;
    writeln!(out, "<pad>")?;
    writeln!(out, "</s>")?;
    writeln!(out, "<unk>")?;
    writeln!(out, "{WORD_BOUNDARY}")?;
    for b in 0x21u8..0x7f {
        writeln!(out, "{}", b as char)?;
    }
    for piece in extra {
        writeln!(out, "{piece}")?;
    }
    Ok(())
}
