//! Tokenizers used to count the first tokens of object strings.

use std::collections::BTreeSet;

use super::vocab::Vocab;

pub trait Tokenizer {
    fn tokenize(&self, word: &str) -> Vec<String>;

    fn first_token(&self, word: &str) -> Option<String> {
        self.tokenize(word).into_iter().next()
    }
}

/// Whole words that are in the vocabulary stay whole; anything else maps to
/// the unknown token.
impl Tokenizer for Vocab {
    fn tokenize(&self, text: &str) -> Vec<String> {
        text.split_whitespace()
            .map(|w| {
                if self.contains(w) {
                    w.to_string()
                } else {
                    super::vocab::UNK.to_string()
                }
            })
            .collect()
    }
}

/// Greedy longest-prefix segmentation over a fixed piece inventory, falling
/// back to single characters. Spaces start a new word.
#[derive(Debug, Clone, Default)]
pub struct PieceTokenizer {
    pieces: BTreeSet<String>,
    longest: usize,
}

impl PieceTokenizer {
    pub fn new<I, S>(pieces: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let pieces: BTreeSet<String> = pieces
            .into_iter()
            .map(|p| p.as_ref().trim().to_string())
            .filter(|p| !p.is_empty() && !p.starts_with('#'))
            .collect();
        let longest = pieces.iter().map(|p| p.chars().count()).max().unwrap_or(0);
        PieceTokenizer { pieces, longest }
    }

    /// One piece per line; blank lines and `#` comments are ignored.
    pub fn from_text(text: &str) -> Self {
        Self::new(text.lines())
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }
}

impl Tokenizer for PieceTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            let chars: Vec<char> = word.chars().collect();
            let mut i = 0;
            while i < chars.len() {
                let max = self.longest.min(chars.len() - i);
                let len = (2..=max)
                    .rev()
                    .find(|&n| {
                        let cand: String = chars[i..i + n].iter().collect();
                        self.pieces.contains(&cand)
                    })
                    .unwrap_or(1);
                out.push(chars[i..i + len].iter().collect());
                i += len;
            }
        }
        out
    }
}
