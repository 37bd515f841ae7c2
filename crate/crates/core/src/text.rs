use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const MASK: &str = "[MASK]";
pub const SEP: &str = "[SEP]";
pub const SPECIALS: [&str; 4] = [UNK, CLS, MASK, SEP];

pub const UNK_ID: usize = 0;
pub const CLS_ID: usize = 1;

/// Token ids of one text, always starting with `[CLS]` when produced by
/// [`Vocab::encode`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq(pub Vec<usize>);

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }
}

/// Word-level vocabulary; unknown words map to `[UNK]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Specials first, then every distinct word of `corpus` in sorted order.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a [String]>) -> Self {
        let mut set = BTreeSet::new();
        for words in corpus {
            for w in words {
                if !SPECIALS.contains(&w.as_str()) {
                    set.insert(w.clone());
                }
            }
        }
        let words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(set).collect();
        Self::from_words(words).expect("specials are unique")
    }

    fn from_words(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Parse(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        if words.len() < SPECIALS.len() || words[..SPECIALS.len()].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::Parse("vocabulary must start with the special tokens".into()));
        }
        Ok(Self { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or(UNK, String::as_str)
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// Maps words (already including `[CLS]`) to ids.
    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> TokenSeq {
        TokenSeq(words.iter().map(|w| self.id(w.as_ref())).collect())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for word in &self.words {
            writeln!(w, "{word}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let words = r.lines().collect::<std::io::Result<Vec<_>>>()?;
        Self::from_words(words)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_maps_unknown_words() {
        let corpus = [vec!["[CLS]".to_string(), "b".into(), "a".into()]];
        let v = Vocab::build(corpus.iter().map(Vec::as_slice));
        assert_eq!(v.len(), 6);
        assert_eq!(v.encode(&["[CLS]", "a", "zzz"]).0, vec![CLS_ID, 4, UNK_ID]);
        let mut buf = Vec::new();
        v.write(&mut buf).unwrap();
        assert_eq!(Vocab::read(&buf[..]).unwrap(), v);
    }
}
