use std::collections::{BTreeSet, HashMap};

use super::lexer::lex;
use super::SmilesError;

pub const PAD: u32 = 0;
pub const LENGTH: u32 = 1;
pub const UNK: u32 = 2;
/// The component separator `.`.
pub const DOT: u32 = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<len>", "<unk>", "."];

/// Token ↔ id table. Ids 0..4 are reserved; corpus tokens follow in sorted
/// order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Result<Self, SmilesError> {
        let mut seen = BTreeSet::new();
        for smi in corpus {
            for t in lex(smi)? {
                seen.insert(t.text);
            }
        }
        Ok(Self::from_tokens(seen.into_iter().filter(|t| !SPECIALS.contains(&t.as_str()))))
    }

    fn from_tokens(rest: impl IntoIterator<Item = String>) -> Self {
        let tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(rest).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocab { tokens, index }
    }

    /// `K`, the number of categories including the reserved ids.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Unseen tokens become `UNK`.
    pub fn encode(&self, smiles: &str) -> Result<Vec<u32>, SmilesError> {
        Ok(lex(smiles)?.iter().map(|t| self.id(&t.text).unwrap_or(UNK)).collect())
    }

    /// Concatenates surface forms; out-of-range ids render as `<unk>`.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.token(i).unwrap_or(SPECIALS[UNK as usize])).collect()
    }

    /// Space-separated corpus tokens, reserved ids omitted.
    pub fn to_text(&self) -> String {
        self.tokens[SPECIALS.len()..].join(" ")
    }

    pub fn from_text(text: &str) -> Self {
        Self::from_tokens(text.split_whitespace().map(str::to_string))
    }
}
