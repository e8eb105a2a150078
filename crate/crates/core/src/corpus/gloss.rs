//! Gloss normalisation and sentence segmentation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::elan::{AnnotationDoc, Interval};
use super::GlossSentence;

/// Gloss classes dropped before modelling, matched against the text before
/// the first `:` (or the whole label when there is no colon).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionSet {
    prefixes: BTreeSet<String>,
}

impl Default for ExclusionSet {
    /// Pointing and possessive signs (`PT`), gestures (`G`) and `PALM-UP`.
    fn default() -> Self {
        Self::new(["PT", "G", "PALM-UP"])
    }
}

impl ExclusionSet {
    pub fn new<I, S>(prefixes: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            prefixes: prefixes.into_iter().map(Into::into).collect(),
        }
    }

    pub fn insert(&mut self, prefix: impl Into<String>) {
        self.prefixes.insert(prefix.into());
    }

    pub fn contains(&self, prefix: &str) -> bool {
        self.prefixes.contains(prefix)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.prefixes.iter().map(String::as_str)
    }
}

/// Maps a raw ID-gloss to a model token, or `None` when the gloss class is
/// excluded.
///
/// Leading and trailing `?` (uncertain identification) are removed, the
/// class prefix is checked against `exclude`, and for prefixed glosses such
/// as `FS:PUPPY` or `DSEW(FLAT)-BE:ANIMAL` only the text after the final
/// colon is kept. Internal whitespace becomes `-`.
///
/// ```
/// use glosslm::corpus::{normalize_gloss, ExclusionSet};
///
/// let ex = ExclusionSet::default();
/// assert_eq!(normalize_gloss("FS:PUPPY", &ex).as_deref(), Some("puppy"));
/// assert_eq!(normalize_gloss("PT:PRO1SG", &ex), None);
/// ```
pub fn normalize_gloss(raw: &str, exclude: &ExclusionSet) -> Option<String> {
    let edge = |c: char| c == '?' || c.is_whitespace();
    let label = raw.trim_matches(edge);
    if label.is_empty() {
        return None;
    }
    let prefix = label.split(':').next().unwrap_or(label);
    if exclude.contains(prefix) {
        return None;
    }
    let body = label.rsplit(':').next().unwrap_or(label).trim_matches(edge);
    let token = body
        .split_whitespace()
        .collect::<Vec<_>>()
        .join("-")
        .to_lowercase();
    if token.is_empty() {
        None
    } else {
        Some(token)
    }
}

/// Which hand tiers contribute glosses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum HandPolicy {
    /// Right-hand glosses only.
    #[default]
    RhOnly,
    /// Right-hand glosses plus left-hand glosses that overlap no right-hand gloss.
    RhPlusLhExclusive,
}

/// Splits a document into sentences using the free-translation intervals as
/// boundaries. A gloss belongs to the interval containing its start time.
pub fn segment_sentences(
    doc: &AnnotationDoc,
    policy: HandPolicy,
    exclude: &ExclusionSet,
) -> Vec<GlossSentence> {
    let mut glosses: Vec<&Interval> = doc.rh_glosses.iter().collect();
    if policy == HandPolicy::RhPlusLhExclusive {
        glosses.extend(
            doc.lh_glosses
                .iter()
                .filter(|lh| !doc.rh_glosses.iter().any(|rh| rh.overlaps(lh))),
        );
        // stable: RH precedes LH on equal start times
        glosses.sort_by_key(|g| g.start_ms);
    }

    doc.free_translations
        .iter()
        .filter_map(|ft| {
            let tokens: Vec<String> = glosses
                .iter()
                .filter(|g| ft.contains_ms(g.start_ms))
                .filter_map(|g| normalize_gloss(&g.label, exclude))
                .collect();
            GlossSentence::with_span(tokens, (ft.start_ms, ft.end_ms))
        })
        .collect()
}
