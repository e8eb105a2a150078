use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Corpus, GlossSentence};

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";

/// Word to id mapping with `<unk>` fixed at 0 and `<eos>` at 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    pub const UNK_ID: u32 = 0;
    pub const EOS_ID: u32 = 1;

    /// Counts token frequencies over `corpus` and keeps every word seen at
    /// least `min_count` times, most frequent first with lexicographic
    /// tie-break.
    pub fn build(corpus: &Corpus, min_count: usize) -> Self {
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for tok in corpus.tokens() {
            *freq.entry(tok).or_default() += 1;
        }
        let mut kept: Vec<(&str, usize)> = freq
            .into_iter()
            .filter(|&(w, c)| c >= min_count.max(1) && w != UNK && w != EOS)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_words(kept.into_iter().map(|(w, _)| w.to_string()))
            .expect("reserved tokens filtered above")
    }

    /// Builds a vocabulary from content words in id order (ids start at 2).
    /// Fails on duplicates or on the reserved tokens.
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Result<Self, String> {
        let mut v = Self {
            words: vec![UNK.to_string(), EOS.to_string()],
            ids: HashMap::new(),
        };
        v.ids.insert(UNK.to_string(), Self::UNK_ID);
        v.ids.insert(EOS.to_string(), Self::EOS_ID);
        for w in words {
            if v.ids.contains_key(&w) {
                return Err(format!("duplicate vocabulary entry '{w}'"));
            }
            v.ids.insert(w.clone(), v.words.len() as u32);
            v.words.push(w);
        }
        Ok(v)
    }

    /// Rebuilds from the full id-ordered word list (as stored in checkpoints).
    pub fn from_id_order(words: &[String]) -> Result<Self, String> {
        match words {
            [unk, eos, rest @ ..] if unk == UNK && eos == EOS => Self::from_words(rest.iter().cloned()),
            _ => Err("vocabulary must start with <unk>, <eos>".into()),
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> u32 {
        self.ids.get(word).copied().unwrap_or(Self::UNK_ID)
    }

    pub fn get(&self, word: &str) -> Option<u32> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// All words in id order, reserved tokens included.
    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn tokenize(&self, sentence: &GlossSentence, append_eos: bool) -> Vec<u32> {
        let mut ids: Vec<u32> = sentence.tokens.iter().map(|t| self.id(t)).collect();
        if append_eos {
            ids.push(Self::EOS_ID);
        }
        ids
    }

    /// Inverse of [`tokenize`](Self::tokenize) for in-range ids; a trailing
    /// `<eos>` is dropped.
    pub fn detokenize(&self, ids: &[u32]) -> Vec<String> {
        let ids = match ids.split_last() {
            Some((&Self::EOS_ID, rest)) => rest,
            _ => ids,
        };
        ids.iter()
            .map(|&i| self.word(i).unwrap_or(UNK).to_string())
            .collect()
    }

    /// Flat id stream `<eos> s1 <eos> s2 <eos> ...`. The leading `<eos>` is
    /// the context for the first word so every token is a prediction target.
    pub fn stream(&self, corpus: &Corpus) -> Vec<u32> {
        let mut out = Vec::with_capacity(corpus.token_count() + corpus.len() + 1);
        out.push(Self::EOS_ID);
        for s in corpus.sentences() {
            out.extend(self.tokenize(s, true));
        }
        out
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.words.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let words = Vec::<String>::deserialize(d)?;
        Self::from_id_order(&words).map_err(serde::de::Error::custom)
    }
}
