use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const BOS_ID: usize = 0;
pub const EOS_ID: usize = 1;

/// Whitespace word-level vocabulary. Ids 0 and 1 are always `<bos>` and `<eos>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Lexicon {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Lexicon {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Lexicon> for Vec<String> {
    fn from(l: Lexicon) -> Self {
        l.tokens
    }
}

impl Lexicon {
    /// Builds a sorted vocabulary from corpus lines plus reserved `extra` words.
    pub fn build<'a>(lines: impl IntoIterator<Item = &'a str>, extra: &[String]) -> Self {
        let mut words = BTreeSet::new();
        for line in lines {
            for w in line.split_whitespace() {
                words.insert(w.to_string());
            }
        }
        words.extend(extra.iter().cloned());
        words.remove(BOS);
        words.remove(EOS);
        let mut tokens = vec![BOS.to_string(), EOS.to_string()];
        tokens.extend(words);
        Self::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.tokens.get(i).map_or("<?>", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
