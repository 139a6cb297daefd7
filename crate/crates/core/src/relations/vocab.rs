//! Word-level vocabulary. Every surface form is one token.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary with `<pad>` = 0 and `<unk>` = 1 followed by
    /// `words` in order. Repeats and the special tokens are skipped.
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocab {
            words: Vec::new(),
            ids: HashMap::new(),
        };
        v.insert(PAD)?;
        v.insert(UNK)?;
        for w in words {
            v.insert(w.as_ref())?;
        }
        Ok(v)
    }

    fn insert(&mut self, word: &str) -> Result<usize> {
        if word.is_empty() || word.chars().any(char::is_whitespace) {
            return Err(Error::Input(format!(
                "vocabulary word {word:?} is empty or contains whitespace"
            )));
        }
        if let Some(&id) = self.ids.get(word) {
            return Ok(id);
        }
        let id = self.words.len();
        self.words.push(word.to_string());
        self.ids.insert(word.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn pad(&self) -> usize {
        0
    }

    pub fn unk(&self) -> usize {
        1
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.ids
            .get(word)
            .copied()
            .ok_or_else(|| Error::Vocab(word.to_string()))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.ids.contains_key(word)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Splits on whitespace and maps each word to its id.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&i| {
                self.word(i)
                    .ok_or_else(|| Error::Input(format!("token id {i} outside vocabulary")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    /// One word per line, in id order.
    pub fn to_text(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let words: Vec<&str> = text.lines().collect();
        if words.len() < 2 || words[0] != PAD || words[1] != UNK {
            return Err(Error::Format(format!(
                "vocabulary must start with {PAD} and {UNK}"
            )));
        }
        let v = Vocab::from_words(&words[2..])?;
        if v.len() != words.len() {
            return Err(Error::Format("vocabulary lists a word twice".into()));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::container::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_dense_and_bidirectional() {
        let v = Vocab::from_words(["a", "b", "a", "c"]).unwrap();
        assert_eq!(v.len(), 5);
        for (i, w) in v.words().iter().enumerate() {
            assert_eq!(v.id(w).unwrap(), i);
            assert_eq!(v.word(i), Some(w.as_str()));
        }
        assert_eq!(v.encode("c a").unwrap(), vec![4, 2]);
        assert_eq!(v.decode(&[4, 2]).unwrap(), "c a");
    }

    #[test]
    fn unknown_words_are_named() {
        let v = Vocab::from_words(["a"]).unwrap();
        match v.encode("a zebra") {
            Err(Error::Vocab(w)) => assert_eq!(w, "zebra"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn text_round_trip() {
        let v = Vocab::from_words(["x", "y", ";"]).unwrap();
        assert_eq!(Vocab::from_text(&v.to_text()).unwrap(), v);
        assert!(Vocab::from_text("x\ny\n").is_err());
        assert!(Vocab::from_text("<pad>\n<unk>\nx\nx\n").is_err());
    }
}
