//! Token vocabulary with fixed reserved ids.

use crate::error::{Error, Result};

pub const BLANK: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED: usize = 4;

/// Character vocabulary. Ids 0..=3 are reserved (blank, bos, eos, unk);
/// content characters occupy dense ids from 4 upward in lexicon order.
/// Blank exists for the CTC head only and never appears in decoder targets
/// or outputs; bos only ever appears as the step-0 history symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    chars: Vec<char>,
}

impl Vocab {
    pub fn new(chars: Vec<char>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for &c in &chars {
            if !seen.insert(c) {
                return Err(Error::Vocab(format!("duplicate character `{c}`")));
            }
        }
        Ok(Vocab { chars })
    }

    /// Total size including the four reserved ids.
    pub fn size(&self) -> usize {
        RESERVED + self.chars.len()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id_of(&self, c: char) -> Option<u32> {
        self.chars.iter().position(|&x| x == c).map(|i| (i + RESERVED) as u32)
    }

    pub fn char_of(&self, id: u32) -> Option<char> {
        let idx = id as usize;
        if idx < RESERVED {
            None
        } else {
            self.chars.get(idx - RESERVED).copied()
        }
    }

    /// Encode a transcript; unknown characters are an error rather than unk,
    /// since every on-disk artifact in this pipeline is produced against a
    /// known lexicon.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .map(|c| self.id_of(c).ok_or_else(|| Error::Vocab(format!("`{c}` not in vocabulary"))))
            .collect()
    }

    /// Decode content token ids back to text. Reserved ids are an error.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        ids.iter()
            .map(|&id| {
                self.char_of(id)
                    .ok_or_else(|| Error::Vocab(format!("id {id} is reserved or out of range")))
            })
            .collect()
    }

    pub fn is_content(&self, id: u32) -> bool {
        (id as usize) >= RESERVED && (id as usize) < self.size()
    }
}
