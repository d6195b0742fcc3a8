//! Token id layouts. Content ids come first; specials are reserved at the
//! top of each range.

use serde::{Deserialize, Serialize};

/// Text vocabulary: `words` content ids, then BOS, EOS, PAD, the
/// translation-instruction token and UNK (emitted only by the oracle
/// transcriber, never by a model).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextVocab {
    pub words: usize,
}

impl TextVocab {
    pub fn new(words: usize) -> Self {
        Self { words }
    }
    pub fn bos(&self) -> usize {
        self.words
    }
    pub fn eos(&self) -> usize {
        self.words + 1
    }
    pub fn pad(&self) -> usize {
        self.words + 2
    }
    pub fn instruction(&self) -> usize {
        self.words + 3
    }
    pub fn unk(&self) -> usize {
        self.words + 4
    }
    pub fn size(&self) -> usize {
        self.words + 5
    }
    pub fn is_content(&self, id: usize) -> bool {
        id < self.words
    }
}

/// Audio vocabulary: `codebook` speech-token ids, then BOS, EOS and PAD.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudioVocab {
    pub codebook: usize,
}

impl AudioVocab {
    pub fn new(codebook: usize) -> Self {
        Self { codebook }
    }
    pub fn bos(&self) -> usize {
        self.codebook
    }
    pub fn eos(&self) -> usize {
        self.codebook + 1
    }
    pub fn pad(&self) -> usize {
        self.codebook + 2
    }
    pub fn size(&self) -> usize {
        self.codebook + 3
    }
    pub fn is_content(&self, id: usize) -> bool {
        id < self.codebook
    }
}
