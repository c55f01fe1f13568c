//! Character vocabulary for movetext.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_VOCAB: usize = 32;

/// Every character movetext can contain without result markers.
pub const CANONICAL_CHARS: &str = " #+-.0123456789;=BKNOQRabcdefghx";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    chars: Vec<char>,
}

impl Vocab {
    pub fn new(mut chars: Vec<char>) -> Result<Self> {
        chars.sort_unstable();
        chars.dedup();
        if chars.len() > MAX_VOCAB {
            return Err(Error::Data(format!(
                "vocabulary has {} characters, limit is {MAX_VOCAB}",
                chars.len()
            )));
        }
        Ok(Self { chars })
    }

    pub fn canonical() -> Self {
        Self::new(CANONICAL_CHARS.chars().collect()).expect("32 characters")
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id(&self, c: char) -> Option<u8> {
        self.chars.binary_search(&c).ok().map(|i| i as u8)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<u8>> {
        text.char_indices()
            .map(|(offset, ch)| self.id(ch).ok_or(Error::UnknownChar { ch, offset }))
            .collect()
    }

    pub fn detokenize(&self, ids: &[u8]) -> Result<String> {
        ids.iter()
            .map(|&i| {
                self.chars
                    .get(i as usize)
                    .copied()
                    .ok_or_else(|| Error::Data(format!("token id {i} outside vocabulary of {}", self.len())))
            })
            .collect()
    }
}

/// Sorted distinct characters over `corpus`.
pub fn build_vocab<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Result<Vocab> {
    let mut seen = std::collections::BTreeSet::new();
    for line in corpus {
        seen.extend(line.chars());
    }
    Vocab::new(seen.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_has_32() {
        assert_eq!(Vocab::canonical().len(), 32);
    }

    #[test]
    fn round_trip() {
        let v = build_vocab([";1.e4 e5 2.Nf3", ";1.d4 O-O"]).unwrap();
        let text = ";1.e4 e5 2.Nf3";
        assert_eq!(v.detokenize(&v.tokenize(text).unwrap()).unwrap(), text);
    }

    #[test]
    fn unknown_char() {
        let v = Vocab::canonical();
        match v.tokenize(";1.e4 z") {
            Err(Error::UnknownChar { ch, offset }) => assert_eq!((ch, offset), ('z', 6)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn too_many() {
        let text: String = ('A'..='z').collect();
        assert!(build_vocab([text.as_str()]).is_err());
    }
}
