//! Corpus ingestion: ELAN tier exports and plain line corpora, gloss
//! normalisation, vocabularies, splits and statistics.

mod elan;
mod gloss;
mod vocab;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use elan::{parse_elan_export, AnnotationDoc, Interval, TierNames};
pub use gloss::{normalize_gloss, segment_sentences, ExclusionSet, HandPolicy};
pub use vocab::{Vocabulary, EOS, UNK};

/// A non-empty sequence of normalised tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlossSentence {
    pub tokens: Vec<String>,
    pub source_span: Option<(u64, u64)>,
}

impl GlossSentence {
    /// Returns `None` for an empty token list.
    pub fn new(tokens: Vec<String>) -> Option<Self> {
        (!tokens.is_empty()).then_some(Self {
            tokens,
            source_span: None,
        })
    }

    pub fn with_span(tokens: Vec<String>, span: (u64, u64)) -> Option<Self> {
        Self::new(tokens).map(|mut s| {
            s.source_span = Some(span);
            s
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub name: String,
    sentences: Vec<GlossSentence>,
}

impl Corpus {
    pub fn new(name: impl Into<String>, sentences: Vec<GlossSentence>) -> Self {
        Self {
            name: name.into(),
            sentences,
        }
    }

    /// One sentence per non-blank line, whitespace-separated, lowercased.
    pub fn from_lines(name: impl Into<String>, text: &str) -> Self {
        let sentences = text
            .lines()
            .filter_map(|line| GlossSentence::new(line.split_whitespace().map(str::to_lowercase).collect()))
            .collect();
        Self::new(name, sentences)
    }

    pub fn sentences(&self) -> &[GlossSentence] {
        &self.sentences
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.sentences
            .iter()
            .flat_map(|s| s.tokens.iter().map(String::as_str))
    }

    /// Tokens excluding end-of-sentence markers.
    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(GlossSentence::len).sum()
    }

    /// Plain-text form: tokens joined by one space, one sentence per LF-terminated line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.sentences {
            out.push_str(&s.tokens.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Reads a plain corpus file, one sentence per line.
pub fn load_line_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Corpus::from_lines(name, &text))
}

/// Parses every `*.tsv` file under `dir` (in file-name order) and
/// concatenates their sentences.
pub fn load_elan_dir(
    dir: impl AsRef<Path>,
    tiers: &TierNames,
    policy: HandPolicy,
    exclude: &ExclusionSet,
) -> Result<Corpus> {
    let dir = dir.as_ref();
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "tsv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Size(format!("no .tsv files in {}", dir.display())));
    }
    let per_file: Vec<Vec<GlossSentence>> = files
        .par_iter()
        .map(|p| parse_elan_export(p, tiers).map(|doc| segment_sentences(&doc, policy, exclude)))
        .collect::<Result<_>>()?;
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "elan".into());
    Ok(Corpus::new(name, per_file.into_iter().flatten().collect()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Corpus,
    pub valid: Corpus,
    pub test: Corpus,
}

/// Sizes of an 85:15 split whose held-out part is halved, the odd sentence
/// going to validation.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 85 / 100;
    let rest = n - train;
    let valid = rest.div_ceil(2);
    (train, valid, rest - valid)
}

/// Shuffles with a seeded permutation, then cuts into train/valid/test
/// according to [`split_sizes`].
pub fn split_corpus(corpus: &Corpus, seed: u64) -> Result<Split> {
    let n = corpus.len();
    if n < 3 {
        return Err(Error::Size(format!(
            "cannot split a corpus of {n} sentences (need at least 3)"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (n_train, n_valid, _) = split_sizes(n);
    let pick = |idx: &[usize], suffix: &str| {
        Corpus::new(
            format!("{}.{suffix}", corpus.name),
            idx.iter().map(|&i| corpus.sentences[i].clone()).collect(),
        )
    };
    Ok(Split {
        train: pick(&order[..n_train], "train"),
        valid: pick(&order[n_train..n_train + n_valid], "valid"),
        test: pick(&order[n_train + n_valid..], "test"),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub sentence_count: usize,
    pub mean_len: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub token_count: usize,
}

/// Sentence-length and vocabulary statistics. `vocab_size` counts distinct
/// tokens, reserved markers excluded.
pub fn corpus_stats(corpus: &Corpus) -> Result<CorpusStats> {
    if corpus.is_empty() {
        return Err(Error::Size(format!("corpus '{}' is empty", corpus.name)));
    }
    let lens = corpus.sentences.iter().map(GlossSentence::len);
    let token_count = corpus.token_count();
    let vocab_size = corpus.tokens().collect::<std::collections::HashSet<_>>().len();
    Ok(CorpusStats {
        sentence_count: corpus.len(),
        mean_len: token_count as f64 / corpus.len() as f64,
        min_len: lens.clone().min().unwrap_or(0),
        max_len: lens.max().unwrap_or(0),
        vocab_size,
        token_count,
    })
}
