//! Byte-level vocabulary with reserved control, sentinel and language-code tokens.
//!
//! Id layout, in order:
//!
//! | ids                          | meaning                       |
//! |------------------------------|-------------------------------|
//! | 0, 1, 2                      | `PAD`, `EOS`, `SEP`           |
//! | 3 .. 3+k                     | sentinels `<S_0>` .. `<S_k-1>`|
//! | 3+k .. 3+k+L                 | language codes `<2xx>`        |
//! | 3+k+L .. 3+k+L+256           | raw bytes 0..=255             |
//!
//! The layout is a pure function of `(lang_codes, sentinel_count)`; nothing
//! about a corpus ever leaks into it.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = u32;
pub type TokenSeq = Vec<TokenId>;

pub const PAD: TokenId = 0;
pub const EOS: TokenId = 1;
pub const SEP: TokenId = 2;

const NUM_CONTROL: usize = 3;
const NUM_BYTES: usize = 256;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VocabError {
    #[error("duplicate language code {0:?}")]
    DuplicateLanguage(String),
    #[error("language code list is empty")]
    NoLanguages,
    #[error("invalid language code {0:?}: must be non-empty and free of whitespace")]
    InvalidLanguage(String),
    #[error("sentinel_count must be at least 1")]
    NoSentinels,
    #[error("token id {id} is out of range for a vocabulary of size {size}")]
    OutOfRange { id: TokenId, size: usize },
    #[error("unknown language code {0:?}")]
    UnknownLanguage(String),
}

/// The persisted form of a [`Vocab`]: enough to rebuild it bit-for-bit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub lang_codes: Vec<String>,
    pub sentinel_count: usize,
}

#[derive(Clone, PartialEq, Eq)]
pub struct Vocab {
    lang_codes: Vec<String>,
    sentinel_count: usize,
    lang_ids: HashMap<String, TokenId>,
}

impl fmt::Debug for Vocab {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Vocab")
            .field("lang_codes", &self.lang_codes)
            .field("sentinel_count", &self.sentinel_count)
            .field("size", &self.size())
            .finish()
    }
}

/// Builds a vocabulary for the given language codes and number of sentinels.
pub fn build_vocab<S: AsRef<str>>(
    lang_codes: &[S],
    sentinel_count: usize,
) -> Result<Vocab, VocabError> {
    Vocab::new(lang_codes, sentinel_count)
}

impl Vocab {
    pub fn new<S: AsRef<str>>(lang_codes: &[S], sentinel_count: usize) -> Result<Self, VocabError> {
        if sentinel_count == 0 {
            return Err(VocabError::NoSentinels);
        }
        if lang_codes.is_empty() {
            return Err(VocabError::NoLanguages);
        }
        let first_lang = (NUM_CONTROL + sentinel_count) as TokenId;
        let mut lang_ids = HashMap::with_capacity(lang_codes.len());
        let mut codes = Vec::with_capacity(lang_codes.len());
        for (i, code) in lang_codes.iter().enumerate() {
            let code = code.as_ref();
            if code.is_empty() || code.chars().any(char::is_whitespace) {
                return Err(VocabError::InvalidLanguage(code.to_string()));
            }
            if lang_ids
                .insert(code.to_string(), first_lang + i as TokenId)
                .is_some()
            {
                return Err(VocabError::DuplicateLanguage(code.to_string()));
            }
            codes.push(code.to_string());
        }
        Ok(Self {
            lang_codes: codes,
            sentinel_count,
            lang_ids,
        })
    }

    pub fn from_layout(layout: &VocabLayout) -> Result<Self, VocabError> {
        Self::new(&layout.lang_codes, layout.sentinel_count)
    }

    pub fn layout(&self) -> VocabLayout {
        VocabLayout {
            lang_codes: self.lang_codes.clone(),
            sentinel_count: self.sentinel_count,
        }
    }

    pub fn size(&self) -> usize {
        NUM_CONTROL + self.sentinel_count + self.lang_codes.len() + NUM_BYTES
    }

    pub fn sentinel_count(&self) -> usize {
        self.sentinel_count
    }

    pub fn lang_codes(&self) -> &[String] {
        &self.lang_codes
    }

    /// Id assigned to raw byte 0.
    pub fn byte_offset(&self) -> TokenId {
        (NUM_CONTROL + self.sentinel_count + self.lang_codes.len()) as TokenId
    }

    /// Id of sentinel `S_i`, if `i < sentinel_count`.
    pub fn sentinel(&self, i: usize) -> Option<TokenId> {
        (i < self.sentinel_count).then(|| (NUM_CONTROL + i) as TokenId)
    }

    /// Inverse of [`Vocab::sentinel`].
    pub fn sentinel_index(&self, id: TokenId) -> Option<usize> {
        let id = id as usize;
        (NUM_CONTROL..NUM_CONTROL + self.sentinel_count)
            .contains(&id)
            .then(|| id - NUM_CONTROL)
    }

    pub fn is_sentinel(&self, id: TokenId) -> bool {
        self.sentinel_index(id).is_some()
    }

    pub fn lang_code(&self, code: &str) -> Result<TokenId, VocabError> {
        self.lang_ids
            .get(code)
            .copied()
            .ok_or_else(|| VocabError::UnknownLanguage(code.to_string()))
    }

    pub fn lang_of(&self, id: TokenId) -> Option<&str> {
        let first = NUM_CONTROL + self.sentinel_count;
        let id = id as usize;
        (first..first + self.lang_codes.len())
            .contains(&id)
            .then(|| self.lang_codes[id - first].as_str())
    }

    pub fn is_lang_code(&self, id: TokenId) -> bool {
        self.lang_of(id).is_some()
    }

    pub fn byte_of(&self, id: TokenId) -> Option<u8> {
        let off = self.byte_offset();
        (id >= off && ((id - off) as usize) < NUM_BYTES).then(|| (id - off) as u8)
    }

    /// True for every id that is not a raw byte.
    pub fn is_special(&self, id: TokenId) -> bool {
        id < self.byte_offset()
    }

    pub fn encode(&self, text: &str) -> TokenSeq {
        let off = self.byte_offset();
        text.bytes().map(|b| off + b as TokenId).collect()
    }

    /// Decodes ids back to text. Runs of byte tokens are decoded as UTF-8
    /// (lossily, since model output may split a multi-byte character);
    /// special tokens are rendered as bracketed markers.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String, VocabError> {
        let mut out = String::new();
        let mut bytes = Vec::new();
        for &id in ids {
            if id as usize >= self.size() {
                return Err(VocabError::OutOfRange {
                    id,
                    size: self.size(),
                });
            }
            if let Some(b) = self.byte_of(id) {
                bytes.push(b);
                continue;
            }
            if !bytes.is_empty() {
                out.push_str(&String::from_utf8_lossy(&bytes));
                bytes.clear();
            }
            out.push_str(&self.special_marker(id));
        }
        if !bytes.is_empty() {
            out.push_str(&String::from_utf8_lossy(&bytes));
        }
        Ok(out)
    }

    /// Decodes only the byte tokens, dropping every special id. Used when
    /// turning model output into a prediction string.
    pub fn decode_text(&self, ids: &[TokenId]) -> String {
        let bytes: Vec<u8> = ids.iter().filter_map(|&id| self.byte_of(id)).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    fn special_marker(&self, id: TokenId) -> String {
        match id {
            PAD => "<pad>".to_string(),
            EOS => "</s>".to_string(),
            SEP => "<sep>".to_string(),
            _ => {
                if let Some(i) = self.sentinel_index(id) {
                    format!("<S_{i}>")
                } else if let Some(code) = self.lang_of(id) {
                    format!("<2{code}>")
                } else {
                    unreachable!("id {id} is neither byte nor special")
                }
            }
        }
    }
}
