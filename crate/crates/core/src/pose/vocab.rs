use std::collections::{BTreeSet, HashMap};

use super::DataError;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Splits a gloss sentence into tokens.
pub trait GlossTokenizer {
    fn tokenize<'a>(&self, text: &'a str) -> Vec<&'a str>;
}

/// Word-level tokenization on whitespace.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl GlossTokenizer for WhitespaceTokenizer {
    fn tokenize<'a>(&self, text: &'a str) -> Vec<&'a str> {
        text.split_whitespace().collect()
    }
}

/// Token ↔ id bijection. Ids 0–3 are PAD, BOS, EOS, UNK; gloss tokens follow
/// in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        Self::build_with(corpus, &WhitespaceTokenizer)
    }

    pub fn build_with<'a>(corpus: impl IntoIterator<Item = &'a str>, tok: &dyn GlossTokenizer) -> Self {
        let unique: BTreeSet<&str> = corpus
            .into_iter()
            .flat_map(|s| tok.tokenize(s))
            .filter(|t| !RESERVED.contains(t))
            .collect();
        Self::from_tokens(unique.into_iter().map(str::to_owned))
    }

    /// Gloss tokens in id order (ids start at 4). Duplicates are an error.
    pub fn from_tokens(glosses: impl IntoIterator<Item = String>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(glosses);
        let index: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        assert_eq!(index.len(), tokens.len(), "duplicate vocabulary token");
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED.len()
    }

    /// Gloss tokens only, in id order.
    pub fn glosses(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Unknown words map to UNK.
    pub fn encode(&self, text: &str) -> Result<GlossSequence, DataError> {
        let ids = WhitespaceTokenizer.tokenize(text).into_iter().map(|t| self.id(t).unwrap_or(UNK)).collect();
        GlossSequence::new(ids)
    }

    pub fn decode(&self, seq: &GlossSequence) -> String {
        seq.ids().iter().map(|&i| self.token(i).unwrap_or("<unk>")).collect::<Vec<_>>().join(" ")
    }

    pub fn decode_tokens(&self, seq: &GlossSequence) -> Vec<String> {
        seq.ids().iter().map(|&i| self.token(i).unwrap_or("<unk>").to_owned()).collect()
    }
}

/// Gloss ids without BOS/EOS/PAD.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct GlossSequence {
    ids: Vec<usize>,
}

impl GlossSequence {
    pub fn new(ids: Vec<usize>) -> Result<Self, DataError> {
        if let Some(bad) = ids.iter().find(|&&i| i == PAD || i == BOS || i == EOS) {
            return Err(DataError::Format(format!("reserved id {bad} inside gloss sequence")));
        }
        Ok(GlossSequence { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexicographic_ids_after_reserved() {
        let v = Vocabulary::build(["QUESTION HE"]);
        assert_eq!(v.id("HE"), Some(4));
        assert_eq!(v.id("QUESTION"), Some(5));
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn duplicates_do_not_change_vocabulary() {
        let a = Vocabulary::build(["HE FRIEND SCHOOL", "HE FRIEND SCHOOL", "QUESTION HE"]);
        let b = Vocabulary::build(["HE FRIEND SCHOOL", "QUESTION HE"]);
        assert_eq!(a, b);
    }

    #[test]
    fn encode_decode_round_trip() {
        let corpus = ["HE TEACHER NO I SCHOOL", "QUESTION HE FRIEND SCHOOL", "HE FRIEND HOUSE"];
        let v = Vocabulary::build(corpus);
        for s in corpus {
            assert_eq!(v.decode(&v.encode(s).unwrap()), s);
        }
        let unk = v.encode("HE DOG").unwrap();
        assert_eq!(unk.ids()[1], UNK);
    }

    #[test]
    fn gloss_sequence_rejects_reserved() {
        assert!(GlossSequence::new(vec![4, EOS]).is_err());
        assert!(GlossSequence::new(vec![4, UNK]).is_ok());
    }
}
