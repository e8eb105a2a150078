//! Tab-separated ELAN tier exports.
//!
//! Each row is `tier<TAB>start_ms<TAB>end_ms<TAB>label`. A header row is
//! allowed on the first line and is recognised by a non-numeric second
//! column. Rows belonging to tiers other than the three declared ones are
//! ignored.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One time-aligned annotation on a tier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub start_ms: u64,
    pub end_ms: u64,
    pub label: String,
}

impl Interval {
    pub fn new(start_ms: u64, end_ms: u64, label: impl Into<String>) -> Self {
        Self {
            start_ms,
            end_ms,
            label: label.into(),
        }
    }

    /// Half-open overlap test.
    pub fn overlaps(&self, other: &Interval) -> bool {
        self.start_ms < other.end_ms && other.start_ms < self.end_ms
    }

    pub fn contains_ms(&self, t: u64) -> bool {
        self.start_ms <= t && t < self.end_ms
    }
}

/// Labels of the three tiers read from an export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierNames {
    pub right_hand: String,
    pub left_hand: String,
    pub free_translation: String,
}

impl Default for TierNames {
    fn default() -> Self {
        Self {
            right_hand: "RH-IDgloss".into(),
            left_hand: "LH-IDgloss".into(),
            free_translation: "Free Translation".into(),
        }
    }
}

impl TierNames {
    /// Parses `"rh,lh,free"`.
    pub fn parse_list(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        match parts.as_slice() {
            [rh, lh, ft] if !rh.is_empty() && !lh.is_empty() && !ft.is_empty() => Ok(Self {
                right_hand: rh.to_string(),
                left_hand: lh.to_string(),
                free_translation: ft.to_string(),
            }),
            _ => Err(Error::Config(format!(
                "expected three comma-separated tier names, got '{s}'"
            ))),
        }
    }
}

/// The three tiers of one annotated recording, each sorted by start time.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationDoc {
    pub rh_glosses: Vec<Interval>,
    pub lh_glosses: Vec<Interval>,
    pub free_translations: Vec<Interval>,
}

impl AnnotationDoc {
    /// Parses export text. `source` names the input in error messages.
    pub fn from_tsv_str(text: &str, tiers: &TierNames, source: &str) -> Result<Self> {
        let mut doc = AnnotationDoc::default();
        let mut seen = [false; 3];

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.strip_suffix('\r').unwrap_or(raw);
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 4 {
                // A header may be shorter than a data row; only accept that on line 1.
                if idx == 0 && cols.get(1).is_none_or(|c| c.trim().parse::<u64>().is_err()) {
                    continue;
                }
                return Err(parse_err(
                    source,
                    line_no,
                    format!("expected 4 tab-separated columns, found {}", cols.len()),
                ));
            }
            if idx == 0 && cols[1].trim().parse::<u64>().is_err() {
                continue;
            }
            let tier = cols[0].trim();
            let slot = if tier == tiers.right_hand {
                0
            } else if tier == tiers.left_hand {
                1
            } else if tier == tiers.free_translation {
                2
            } else {
                continue;
            };
            let start = parse_ms(cols[1], source, line_no, "start_ms")?;
            let end = parse_ms(cols[2], source, line_no, "end_ms")?;
            let label = cols[3..].join("\t").trim().to_string();
            if start >= end {
                return Err(Error::Validation(format!(
                    "{source}:{line_no}: interval start {start} is not before end {end}"
                )));
            }
            if label.is_empty() {
                return Err(parse_err(source, line_no, "empty annotation label".into()));
            }
            seen[slot] = true;
            let iv = Interval::new(start, end, label);
            match slot {
                0 => doc.rh_glosses.push(iv),
                1 => doc.lh_glosses.push(iv),
                _ => doc.free_translations.push(iv),
            }
        }

        let names = [&tiers.right_hand, &tiers.left_hand, &tiers.free_translation];
        for (present, name) in seen.iter().zip(names) {
            if !present {
                return Err(Error::MissingTier {
                    file: source.to_string(),
                    tier: name.clone(),
                });
            }
        }

        for (tier, name) in [
            (&mut doc.rh_glosses, names[0]),
            (&mut doc.lh_glosses, names[1]),
            (&mut doc.free_translations, names[2]),
        ] {
            tier.sort_by_key(|iv| (iv.start_ms, iv.end_ms));
            if let Some(w) = tier.windows(2).find(|w| w[0].overlaps(&w[1])) {
                return Err(Error::Validation(format!(
                    "{source}: overlapping intervals on tier '{name}': [{}, {}) '{}' and [{}, {}) '{}'",
                    w[0].start_ms, w[0].end_ms, w[0].label, w[1].start_ms, w[1].end_ms, w[1].label
                )));
            }
        }
        Ok(doc)
    }
}

fn parse_err(source: &str, line: usize, msg: String) -> Error {
    Error::Parse {
        file: source.to_string(),
        line,
        msg,
    }
}

fn parse_ms(col: &str, source: &str, line: usize, what: &str) -> Result<u64> {
    col.trim().parse::<u64>().map_err(|_| {
        parse_err(
            source,
            line,
            format!("{what} '{}' is not a non-negative integer", col.trim()),
        )
    })
}

/// Reads one export file.
pub fn parse_elan_export(path: impl AsRef<Path>, tiers: &TierNames) -> Result<AnnotationDoc> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    AnnotationDoc::from_tsv_str(&text, tiers, &path.display().to_string())
}
