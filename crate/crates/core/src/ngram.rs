//! Count-based n-gram language model.
//!
//! Sentences are tokenised with eos appended and left-padded with
//! `order - 1` eos ids, so every token (eos included) is a prediction target
//! with a full-length context. Counts are kept for every context length
//! `0..order`; each lower order is the marginal of the one above it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Vocabulary};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Smoothing {
    /// Relative frequencies. An unseen context backs off to the longest
    /// seen suffix.
    Mle,
    /// Add-k on the full-order context.
    AddK { k: f64 },
    /// Interpolated Witten-Bell, bottoming out in the uniform distribution.
    WittenBell,
}

impl Smoothing {
    /// Parses `mle`, `wb`/`witten_bell`, `add1`, or `add_k:<k>`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mle" => Ok(Smoothing::Mle),
            "wb" | "witten_bell" | "witten-bell" => Ok(Smoothing::WittenBell),
            "add1" | "laplace" => Ok(Smoothing::AddK { k: 1.0 }),
            _ => {
                if let Some(k) = s.strip_prefix("add_k:").or_else(|| s.strip_prefix("add-k:")) {
                    let k: f64 = k
                        .parse()
                        .map_err(|_| Error::Validation(format!("bad add-k constant '{k}'")))?;
                    if !(k > 0.0 && k.is_finite()) {
                        return Err(Error::Validation(format!("add-k constant must be > 0, got {k}")));
                    }
                    return Ok(Smoothing::AddK { k });
                }
                Err(Error::Validation(format!(
                    "unknown smoothing '{s}' (options: mle, wb, add1, add_k:<k>)"
                )))
            }
        }
    }
}

impl std::fmt::Display for Smoothing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Smoothing::Mle => f.write_str("mle"),
            Smoothing::AddK { k } => write!(f, "add_k:{k}"),
            Smoothing::WittenBell => f.write_str("wb"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct ContextCounts {
    total: u64,
    words: BTreeMap<u32, u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NgramModel {
    order: usize,
    smoothing: Smoothing,
    vocab: Vocabulary,
    /// `tables[k]` maps contexts of length `k` to their continuation counts.
    tables: Vec<BTreeMap<Vec<u32>, ContextCounts>>,
}

impl NgramModel {
    /// A model without observations.
    pub fn empty(vocab: Vocabulary, order: usize, smoothing: Smoothing) -> Result<Self> {
        if order == 0 {
            return Err(Error::Config("n-gram order must be at least 1".into()));
        }
        Ok(Self {
            order,
            smoothing,
            vocab,
            tables: vec![BTreeMap::new(); order],
        })
    }

    pub fn fit(corpus: &Corpus, vocab: &Vocabulary, order: usize, smoothing: Smoothing) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Size(format!(
                "cannot fit an n-gram model on empty corpus '{}'",
                corpus.name
            )));
        }
        let mut m = Self::empty(vocab.clone(), order, smoothing)?;
        for s in corpus.sentences() {
            let padded = m.padded(&vocab.tokenize(s, true));
            for j in order - 1..padded.len() {
                let w = padded[j];
                for k in 0..order {
                    let c = m.tables[k].entry(padded[j - k..j].to_vec()).or_default();
                    c.total += 1;
                    *c.words.entry(w).or_default() += 1;
                }
            }
        }
        Ok(m)
    }

    fn padded(&self, ids: &[u32]) -> Vec<u32> {
        let mut p = vec![Vocabulary::EOS_ID; self.order - 1];
        p.extend_from_slice(ids);
        p
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn smoothing(&self) -> Smoothing {
        self.smoothing
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Count of `word` after exactly `context` (any length below `order`).
    pub fn count(&self, context: &[u32], word: u32) -> u64 {
        self.tables
            .get(context.len())
            .and_then(|t| t.get(context))
            .and_then(|c| c.words.get(&word))
            .copied()
            .unwrap_or(0)
    }

    /// Total occurrences of `context` as a conditioning history.
    pub fn context_total(&self, context: &[u32]) -> u64 {
        self.tables
            .get(context.len())
            .and_then(|t| t.get(context))
            .map_or(0, |c| c.total)
    }

    /// Last `order - 1` ids of `history`, left-padded with eos.
    fn context_of(&self, history: &[u32]) -> Vec<u32> {
        let n = self.order - 1;
        let mut ctx = vec![Vocabulary::EOS_ID; n.saturating_sub(history.len())];
        ctx.extend_from_slice(&history[history.len().saturating_sub(n)..]);
        ctx
    }

    /// `P(word | history)`.
    pub fn prob(&self, history: &[u32], word: u32) -> f64 {
        let ctx = self.context_of(history);
        let v = self.vocab.len() as f64;
        match self.smoothing {
            Smoothing::Mle => {
                for k in (0..ctx.len() + 1).rev() {
                    let c = &ctx[ctx.len() - k..];
                    let total = self.context_total(c);
                    if total > 0 {
                        return self.count(c, word) as f64 / total as f64;
                    }
                }
                1.0 / v
            }
            Smoothing::AddK { k } => {
                (self.count(&ctx, word) as f64 + k) / (self.context_total(&ctx) as f64 + k * v)
            }
            Smoothing::WittenBell => {
                let mut p = 1.0 / v;
                for k in 0..=ctx.len() {
                    let c = &ctx[ctx.len() - k..];
                    if let Some(cc) = self.tables[k].get(c) {
                        let types = cc.words.len() as f64;
                        let total = cc.total as f64;
                        let hits = cc.words.get(&word).copied().unwrap_or(0) as f64;
                        p = (hits + types * p) / (total + types);
                    }
                }
                p
            }
        }
    }

    /// Natural-log probability.
    pub fn logprob(&self, history: &[u32], word: u32) -> f64 {
        self.prob(history, word).ln()
    }

    /// Negative log-likelihood of every target of one sentence (eos included),
    /// in order. Tokens are mapped through the model's vocabulary.
    pub fn sentence_nlls(&self, ids: &[u32]) -> Vec<f64> {
        let padded = self.padded(ids);
        (self.order - 1..padded.len())
            .map(|j| -self.logprob(&padded[..j], padded[j]))
            .collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(Dump::from(self)).expect("dump serialises")
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self> {
        let d: Dump = serde_json::from_value(value)?;
        d.try_into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(&self.to_json())?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(serde_json::from_str(&text)?)
    }
}

#[derive(Serialize, Deserialize)]
struct DumpEntry {
    context: Vec<u32>,
    total: u64,
    counts: BTreeMap<u32, u64>,
}

#[derive(Serialize, Deserialize)]
struct Dump {
    order: usize,
    smoothing: Smoothing,
    vocab: Vocabulary,
    /// Index `k` holds the contexts of length `k`.
    counts: Vec<Vec<DumpEntry>>,
}

impl From<&NgramModel> for Dump {
    fn from(m: &NgramModel) -> Self {
        Dump {
            order: m.order,
            smoothing: m.smoothing,
            vocab: m.vocab.clone(),
            counts: m
                .tables
                .iter()
                .map(|t| {
                    t.iter()
                        .map(|(ctx, c)| DumpEntry {
                            context: ctx.clone(),
                            total: c.total,
                            counts: c.words.clone(),
                        })
                        .collect()
                })
                .collect(),
        }
    }
}

impl TryFrom<Dump> for NgramModel {
    type Error = Error;

    fn try_from(d: Dump) -> Result<Self> {
        if d.counts.len() != d.order {
            return Err(Error::Validation(format!(
                "n-gram dump has {} count tables for order {}",
                d.counts.len(),
                d.order
            )));
        }
        let mut m = NgramModel::empty(d.vocab, d.order, d.smoothing)?;
        for (k, entries) in d.counts.into_iter().enumerate() {
            for e in entries {
                if e.context.len() != k || e.counts.values().sum::<u64>() != e.total {
                    return Err(Error::Validation(format!(
                        "inconsistent n-gram entry {:?}",
                        e.context
                    )));
                }
                m.tables[k].insert(
                    e.context,
                    ContextCounts {
                        total: e.total,
                        words: e.counts,
                    },
                );
            }
        }
        Ok(m)
    }
}
