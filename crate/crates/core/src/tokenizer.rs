use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const UNK: &str = "<unk>";

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const UNK_ID: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    Word,
    Char,
}

/// Fixed-vocabulary tokenizer. Ids are vocabulary indices; the first three
/// entries are always pad, bos and unk.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    mode: TokenizerMode,
    vocab: Vec<String>,
    index: HashMap<String, usize>,
}

impl Tokenizer {
    /// Builds a tokenizer from content tokens; specials are prepended.
    pub fn from_tokens<I, S>(mode: TokenizerMode, tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = vec![PAD.to_string(), BOS.to_string(), UNK.to_string()];
        vocab.extend(tokens.into_iter().map(Into::into));
        Self::from_vocab(mode, vocab)
    }

    /// Builds a tokenizer from a full vocabulary whose first three lines are
    /// the specials.
    pub fn from_vocab(mode: TokenizerMode, vocab: Vec<String>) -> Result<Self> {
        if vocab.len() < 3 || vocab[PAD_ID] != PAD || vocab[BOS_ID] != BOS || vocab[UNK_ID] != UNK {
            return Err(Error::format(
                "vocab.txt",
                format!("first three entries must be {PAD}, {BOS}, {UNK}"),
            ));
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (id, tok) in vocab.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::format("vocab.txt", format!("empty token at line {id}")));
            }
            if mode == TokenizerMode::Char && id > UNK_ID && tok.chars().count() != 1 {
                return Err(Error::format(
                    "vocab.txt",
                    format!("char tokenizer entry {tok:?} is not a single character"),
                ));
            }
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::format("vocab.txt", format!("duplicate token {tok:?}")));
            }
        }
        Ok(Self { mode, vocab, index })
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.vocab.get(id).map(String::as_str)
    }

    /// Whether every word of `text` maps to a known (non-unk) id.
    pub fn covers(&self, text: &str) -> bool {
        let ids = self.tokenize(text);
        !ids.is_empty() && ids.iter().all(|&id| id != UNK_ID)
    }

    /// Word mode lower-cases and splits on whitespace; char mode maps each
    /// character. Unknown pieces become the unk id.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        match self.mode {
            TokenizerMode::Word => text
                .split_whitespace()
                .map(|w| {
                    let w = w.to_lowercase();
                    self.index.get(w.as_str()).copied().unwrap_or(UNK_ID)
                })
                .collect(),
            TokenizerMode::Char => text
                .chars()
                .map(|ch| {
                    let mut buf = [0u8; 4];
                    let s: &str = ch.encode_utf8(&mut buf);
                    self.index.get(s).copied().unwrap_or(UNK_ID)
                })
                .collect(),
        }
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        let pieces = ids
            .iter()
            .map(|&id| self.vocab.get(id).map_or(UNK, String::as_str));
        match self.mode {
            TokenizerMode::Word => pieces.collect::<Vec<_>>().join(" "),
            TokenizerMode::Char => pieces.collect(),
        }
    }

    /// The canonical form `detokenize(tokenize(text))` returns for in-vocab
    /// text.
    pub fn normalize(&self, text: &str) -> String {
        match self.mode {
            TokenizerMode::Word => text
                .split_whitespace()
                .map(str::to_lowercase)
                .collect::<Vec<_>>()
                .join(" "),
            TokenizerMode::Char => text.to_string(),
        }
    }

    /// Ids that are not pad/bos/unk.
    pub fn content_ids(&self) -> impl Iterator<Item = usize> + '_ {
        (UNK_ID + 1)..self.vocab.len()
    }
}
