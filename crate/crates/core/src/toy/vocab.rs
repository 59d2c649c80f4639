//! Word-level vocabulary where `|` and newline are always single tokens.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::episode::{TokenId, Tokenizer};

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const EOS: TokenId = 2;
pub const PIPE: TokenId = 3;
pub const NEWLINE: TokenId = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<unk>", "<eos>", "|", "\n"];

/// Byte spans of the tokens of `text`: whitespace separates words, `|` and
/// `\n` are emitted on their own.
pub fn split_word_spans(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        let standalone = c == '|' || c == '\n';
        if standalone || c.is_whitespace() {
            if let Some(s) = start.take() {
                out.push((s, i));
            }
            if standalone {
                out.push((i, i + 1));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push((s, text.len()));
    }
    out
}

pub fn split_words(text: &str) -> Vec<&str> {
    split_word_spans(text)
        .into_iter()
        .map(|(a, b)| &text[a..b])
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Specials followed by every observed token in sorted order.
    pub fn build<'a, I>(texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut observed = BTreeSet::new();
        for t in texts {
            for w in split_words(t) {
                if !SPECIALS.contains(&w) {
                    observed.insert(w.to_string());
                }
            }
        }
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(observed)
            .collect();
        Self::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id as usize).map_or("<unk>", String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Checks that specials sit at their fixed ids.
    pub fn is_well_formed(&self) -> bool {
        self.tokens.len() >= SPECIALS.len()
            && SPECIALS
                .iter()
                .enumerate()
                .all(|(i, s)| self.tokens[i] == *s && self.index.get(*s) == Some(&(i as TokenId)))
    }
}

fn is_word(id: TokenId) -> bool {
    id != PIPE && id != NEWLINE
}

impl Tokenizer for Vocab {
    fn encode(&self, text: &str) -> Vec<TokenId> {
        split_words(text).into_iter().map(|w| self.id(w)).collect()
    }

    /// Adjacent word tokens are joined by one space; `|` and newline attach
    /// directly. PAD and EOS decode to nothing.
    fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        let mut prev_word = false;
        for &id in ids {
            if id == PAD || id == EOS {
                continue;
            }
            let word = is_word(id);
            if word && prev_word {
                out.push(' ');
            }
            out.push_str(self.token(id));
            prev_word = word;
        }
        out
    }
}

/// All vocabulary-building text of a record rendered in both header orders.
pub fn build_vocab<'a, I>(texts: I) -> Vocab
where
    I: IntoIterator<Item = &'a str>,
{
    Vocab::build(texts)
}
