use std::collections::HashMap;

use crate::encoder::TokenSeq;
use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";

/// Token table; a token's id is its line number in the vocabulary file.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    pad: usize,
    unk: usize,
    eos: usize,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Config("vocabulary is empty".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token `{t}`")));
            }
        }
        let find = |t: &str| {
            index
                .get(t)
                .copied()
                .ok_or_else(|| Error::Config(format!("vocabulary lacks special token {t}")))
        };
        let (pad, unk, eos) = (find(PAD)?, find(UNK)?, find(EOS)?);
        Ok(Vocab {
            tokens,
            index,
            pad,
            unk,
            eos,
        })
    }

    /// One token per line.
    pub fn from_text(text: &str) -> Result<Self> {
        Self::new(text.lines().map(str::to_string).filter(|l| !l.is_empty()).collect())
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn pad_id(&self) -> usize {
        self.pad
    }

    pub fn unk_id(&self) -> usize {
        self.unk
    }

    pub fn eos_id(&self) -> usize {
        self.eos
    }

    /// Lowercases, splits on whitespace, maps unknown words to `<unk>`,
    /// appends `<eos>` and pads to `max_len`. Texts with more than
    /// `max_len - 1` words are truncated so `<eos>` always fits.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<TokenSeq> {
        if max_len == 0 {
            return Err(Error::Config("max_text_len must be at least 1".into()));
        }
        let lowered = text.to_lowercase();
        let mut ids: Vec<usize> = lowered
            .split_whitespace()
            .take(max_len - 1)
            .map(|w| self.id(w).unwrap_or(self.unk))
            .collect();
        let eos_index = ids.len();
        ids.push(self.eos);
        ids.resize(max_len, self.pad);
        Ok(TokenSeq { ids, eos_index })
    }

    /// Words before `<eos>`, space-joined.
    pub fn detokenize(&self, seq: &TokenSeq) -> String {
        seq.ids[..seq.eos_index]
            .iter()
            .map(|&i| self.token(i).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::from_text("<pad>\n<unk>\n<eos>\nnice\nwarm\nweather\n").unwrap()
    }

    #[test]
    fn maps_words_and_appends_eos() {
        let v = vocab();
        let t = v.tokenize("Nice warm  weather", 6).unwrap();
        assert_eq!(t.ids, vec![3, 4, 5, 2, 0, 0]);
        assert_eq!(t.eos_index, 3);
    }

    #[test]
    fn truncates_keeping_eos() {
        let v = vocab();
        let t = v.tokenize("nice warm weather nice warm weather", 4).unwrap();
        assert_eq!(t.ids, vec![3, 4, 5, 2]);
        assert_eq!(t.eos_index, 3);
    }

    #[test]
    fn unknown_word_maps_to_unk() {
        let v = vocab();
        let t = v.tokenize("nice cold", 5).unwrap();
        assert_eq!(t.ids[1], v.unk_id());
    }

    #[test]
    fn empty_or_incomplete_vocab_is_a_config_error() {
        assert!(matches!(Vocab::new(vec![]), Err(Error::Config(_))));
        assert!(matches!(Vocab::from_text("<pad>\n<eos>\n"), Err(Error::Config(_))));
    }

    #[test]
    fn text_file_round_trip() {
        let v = vocab();
        assert_eq!(Vocab::from_text(&v.to_text()).unwrap(), v);
    }
}
