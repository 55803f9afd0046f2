//! Character tokenizer with fixed special ids: PAD=0, BOS=1, EOS=2, then the
//! corpus characters in sorted order.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const N_SPECIALS: usize = 3;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Tokenizer {
    chars: Vec<char>,
    #[serde(skip)]
    id_of: BTreeMap<char, usize>,
}

impl Tokenizer {
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut set = BTreeSet::new();
        let mut nonempty = false;
        for text in corpus {
            nonempty = true;
            set.extend(text.chars());
        }
        if !nonempty || set.is_empty() {
            return Err(Error::Tokenizer("empty corpus".into()));
        }
        let chars: Vec<char> = set.into_iter().collect();
        Ok(Self::from_chars(chars))
    }

    fn from_chars(chars: Vec<char>) -> Self {
        let id_of = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, N_SPECIALS + i))
            .collect();
        Tokenizer { chars, id_of }
    }

    /// Rebuild the char -> id map after deserialization.
    pub fn rehydrate(self) -> Self {
        Self::from_chars(self.chars)
    }

    pub fn vocab_size(&self) -> usize {
        N_SPECIALS + self.chars.len()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.id_of
                    .get(&c)
                    .copied()
                    .ok_or_else(|| Error::Tokenizer(format!("character {c:?} not in vocabulary")))
            })
            .collect()
    }

    /// Inverse of `encode` on covered text; special ids render as nothing.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter_map(|&id| id.checked_sub(N_SPECIALS).and_then(|i| self.chars.get(i)))
            .collect()
    }
}
