//! Perplexity, OOV rates and result tables.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::corpus::{Corpus, Vocabulary};
use crate::error::{Error, Result};
use crate::models::{IdBatch, LanguageModel, Mode, Network};
use crate::ngram::NgramModel;

/// Steps per forward pass when streaming a corpus through an LSTM.
pub const EVAL_CHUNK: usize = 64;
/// Context windows per forward pass for the FFNN.
const FFNN_EVAL_BATCH: usize = 256;

/// Kahan-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn add(&mut self, x: f64) {
        // compensation of an infinite term would be inf - inf = NaN
        if !x.is_finite() || !self.sum.is_finite() {
            self.sum += x;
            return;
        }
        let y = x - self.comp;
        let t = self.sum + y;
        self.comp = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

impl FromIterator<f64> for KahanSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut k = KahanSum::default();
        iter.into_iter().for_each(|x| k.add(x));
        k
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    pub model: String,
    pub corpus: String,
    /// Prediction targets, eos included.
    pub tokens: usize,
    /// Mean negative log-likelihood in nats per token. Infinite values,
    /// from unsmoothed models on unseen events, are stored as `null`.
    #[serde(with = "infinite_as_null")]
    pub cross_entropy: f64,
    #[serde(with = "infinite_as_null")]
    pub perplexity: f64,
    pub oov_rate: f64,
    pub seed: Option<u64>,
    pub vocab_size: usize,
    pub timestamp: Option<String>,
}

mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl PerplexityReport {
    /// Builds a report from per-token negative log-likelihoods.
    pub fn from_nlls(
        model: impl Into<String>,
        corpus: &Corpus,
        nlls: &[f64],
        vocab: &Vocabulary,
    ) -> Result<Self> {
        if nlls.is_empty() {
            return Err(Error::Size(format!(
                "corpus '{}' has no tokens to score",
                corpus.name
            )));
        }
        let ce = nlls.iter().copied().collect::<KahanSum>().value() / nlls.len() as f64;
        Ok(Self {
            model: model.into(),
            corpus: corpus.name.clone(),
            tokens: nlls.len(),
            cross_entropy: ce,
            perplexity: ce.exp(),
            oov_rate: oov_rate(corpus, vocab)?,
            seed: None,
            vocab_size: vocab.len(),
            timestamp: None,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_timestamp(mut self, ts: Option<String>) -> Self {
        self.timestamp = ts;
        self
    }

    /// One aligned line for terminal output.
    pub fn table_line(&self) -> String {
        format!(
            "{:<12} {:<12} {:>8} {:>10.4} {:>12.4} {:>7.2}%",
            self.model,
            self.corpus,
            self.tokens,
            self.cross_entropy,
            self.perplexity,
            100.0 * self.oov_rate
        )
    }

    pub fn table_header() -> String {
        format!(
            "{:<12} {:<12} {:>8} {:>10} {:>12} {:>8}",
            "model", "corpus", "tokens", "CE", "perplexity", "OOV"
        )
    }
}

/// Fraction of corpus tokens (eos excluded) that map to unk under `vocab`.
pub fn oov_rate(corpus: &Corpus, vocab: &Vocabulary) -> Result<f64> {
    let n = corpus.token_count();
    if n == 0 {
        return Err(Error::Size(format!("corpus '{}' is empty", corpus.name)));
    }
    let unk = corpus
        .tokens()
        .filter(|t| vocab.id(t) == Vocabulary::UNK_ID)
        .count();
    Ok(unk as f64 / n as f64)
}

/// Fraction of distinct corpus word types that map to unk under `vocab`.
pub fn oov_type_rate(corpus: &Corpus, vocab: &Vocabulary) -> Result<f64> {
    let types: std::collections::BTreeSet<&str> = corpus.tokens().collect();
    if types.is_empty() {
        return Err(Error::Size(format!("corpus '{}' is empty", corpus.name)));
    }
    let unk = types.iter().filter(|t| vocab.id(t) == Vocabulary::UNK_ID).count();
    Ok(unk as f64 / types.len() as f64)
}

/// `logsumexp(row) - row[target]` accumulated in f64.
fn row_nll(row: &[f32], target: u32) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let lse = max + row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln();
    lse - row[target as usize] as f64
}

fn logits_nlls(logits: &Tensor, targets: &[u32]) -> Vec<f64> {
    targets
        .iter()
        .enumerate()
        .map(|(r, &t)| row_nll(logits.row(r), t))
        .collect()
}

/// Per-target negative log-likelihoods of `corpus` under `model`, in corpus
/// order. Inputs are tokenised with the model's input vocabulary, targets
/// with its output vocabulary.
pub fn token_nlls(model: &LanguageModel, corpus: &Corpus) -> Result<Vec<f64>> {
    token_nlls_chunked(model, corpus, EVAL_CHUNK)
}

/// As [`token_nlls`], feeding an LSTM `chunk` steps at a time with the
/// hidden state threaded across chunks.
pub fn token_nlls_chunked(model: &LanguageModel, corpus: &Corpus, chunk: usize) -> Result<Vec<f64>> {
    let chunk = chunk.max(1);
    match model.network() {
        Network::Lstm(m) => {
            let inputs = model.input_vocab().stream(corpus);
            let targets = model.output_vocab().stream(corpus);
            let n = inputs.len().saturating_sub(1);
            let mut state = m.zero_state(1);
            let mut out = Vec::with_capacity(n);
            let mut i = 0;
            while i < n {
                let len = chunk.min(n - i);
                let batch = IdBatch::new(1, len, inputs[i..i + len].to_vec())?;
                let mut g = m.graph();
                let (z, next) = m.forward(&mut g, &batch, &state, Mode::Eval, 0)?;
                out.extend(logits_nlls(g.value(z), &targets[i + 1..i + 1 + len]));
                state = next;
                i += len;
            }
            Ok(out)
        }
        Network::Ffnn(m) => {
            let (contexts, targets) = ffnn_pairs(model, corpus, m.config().context_len);
            let per_chunk: Vec<Result<Vec<f64>>> = contexts
                .par_chunks(FFNN_EVAL_BATCH)
                .zip(targets.par_chunks(FFNN_EVAL_BATCH))
                .map(|(ctx, tgt)| {
                    let batch = IdBatch::from_rows(ctx)?;
                    let mut g = m.graph();
                    let z = m.forward(&mut g, &batch)?;
                    Ok(logits_nlls(g.value(z), tgt))
                })
                .collect();
            let mut out = Vec::with_capacity(targets.len());
            for r in per_chunk {
                out.extend(r?);
            }
            Ok(out)
        }
    }
}

/// Every (eos-padded context, target) pair of `corpus` in order.
pub(crate) fn ffnn_pairs(
    model: &LanguageModel,
    corpus: &Corpus,
    context_len: usize,
) -> (Vec<Vec<u32>>, Vec<u32>) {
    let mut contexts = Vec::new();
    let mut targets = Vec::new();
    for s in corpus.sentences() {
        let ins = model.input_vocab().tokenize(s, true);
        let outs = model.output_vocab().tokenize(s, true);
        let mut padded = vec![Vocabulary::EOS_ID; context_len];
        padded.extend_from_slice(&ins);
        for (j, &t) in outs.iter().enumerate() {
            contexts.push(padded[j..j + context_len].to_vec());
            targets.push(t);
        }
    }
    (contexts, targets)
}

/// Perplexity of `corpus` under `model` in evaluation mode.
pub fn evaluate(model: &LanguageModel, corpus: &Corpus, model_id: &str) -> Result<PerplexityReport> {
    let nlls = token_nlls(model, corpus)?;
    PerplexityReport::from_nlls(model_id, corpus, &nlls, model.output_vocab())
}

/// Scores a corpus from another language: tokens are mapped through the
/// model's own vocabularies, unknown words becoming unk.
pub fn cross_lingual_eval(
    model: &LanguageModel,
    corpus: &Corpus,
    model_id: &str,
) -> Result<PerplexityReport> {
    evaluate(model, corpus, model_id)
}

pub fn ngram_token_nlls(model: &NgramModel, corpus: &Corpus) -> Vec<f64> {
    let per_sentence: Vec<Vec<f64>> = corpus
        .sentences()
        .par_iter()
        .map(|s| model.sentence_nlls(&model.vocab().tokenize(s, true)))
        .collect();
    per_sentence.concat()
}

pub fn evaluate_ngram(model: &NgramModel, corpus: &Corpus, model_id: &str) -> Result<PerplexityReport> {
    let nlls = ngram_token_nlls(model, corpus);
    PerplexityReport::from_nlls(model_id, corpus, &nlls, model.vocab())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// In-domain results: methods × datasets.
    Table1,
    /// Transfer results: methods × transfer procedures.
    Table2,
}

impl Layout {
    pub fn columns(self) -> &'static [&'static str] {
        match self {
            Layout::Table1 => &["ptb", "bsl"],
            Layout::Table2 => &["finetune", "substitute"],
        }
    }
}

/// Method × condition grid of reports.
///
/// A report's row is the part of its model id before the first `:`
/// (`ffnn`, `lstm` or `ngram`). Its column is the corpus id for
/// [`Layout::Table1`] and the part of the model id after the `:` for
/// [`Layout::Table2`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsMatrix {
    pub layout: Layout,
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub cells: BTreeMap<String, BTreeMap<String, Option<PerplexityReport>>>,
    /// OOV rate per column, taken from the first filled cell.
    pub oov: BTreeMap<String, Option<f64>>,
}

const METHODS: [&str; 3] = ["ffnn", "lstm", "ngram"];

pub fn emit_results_matrix(reports: &[PerplexityReport], layout: Layout) -> Result<ResultsMatrix> {
    let columns: Vec<String> = layout.columns().iter().map(|s| s.to_string()).collect();
    let mut placed: BTreeMap<(String, String), PerplexityReport> = BTreeMap::new();
    for r in reports {
        let (method, cond) = match r.model.split_once(':') {
            Some((m, c)) => (m, Some(c)),
            None => (r.model.as_str(), None),
        };
        if !METHODS.contains(&method) {
            return Err(Error::Validation(format!(
                "unknown method '{method}' in report '{}'",
                r.model
            )));
        }
        let col = match layout {
            Layout::Table1 => r.corpus.as_str(),
            Layout::Table2 => cond.unwrap_or(""),
        };
        if !columns.iter().any(|c| c == col) {
            return Err(Error::Validation(format!(
                "report '{}' on '{}' has no column in {layout:?} (columns: {})",
                r.model,
                r.corpus,
                columns.join(", ")
            )));
        }
        let key = (method.to_string(), col.to_string());
        if placed.contains_key(&key) {
            return Err(Error::Conflict(format!(
                "two reports for cell {}/{}",
                key.0, key.1
            )));
        }
        placed.insert(key, r.clone());
    }
    let mut rows: Vec<String> = vec!["ffnn".into(), "lstm".into()];
    if placed.keys().any(|(m, _)| m == "ngram") {
        rows.push("ngram".into());
    }
    let cells = rows
        .iter()
        .map(|row| {
            let line = columns
                .iter()
                .map(|c| (c.clone(), placed.get(&(row.clone(), c.clone())).cloned()))
                .collect();
            (row.clone(), line)
        })
        .collect();
    let oov = columns
        .iter()
        .map(|c| {
            let rate = rows
                .iter()
                .find_map(|row| placed.get(&(row.clone(), c.clone())))
                .map(|r| r.oov_rate);
            (c.clone(), rate)
        })
        .collect();
    Ok(ResultsMatrix {
        layout,
        rows,
        columns,
        cells,
        oov,
    })
}

impl ResultsMatrix {
    pub fn get(&self, row: &str, column: &str) -> Option<&PerplexityReport> {
        self.cells.get(row)?.get(column)?.as_ref()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("matrix serialises");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Perplexities with two decimals; missing cells are shown as "—".
    pub fn render_text(&self) -> String {
        let mut grid: Vec<Vec<String>> = Vec::new();
        let mut header = vec![String::new()];
        header.extend(self.columns.iter().cloned());
        grid.push(header);
        for row in &self.rows {
            let mut line = vec![row.to_uppercase()];
            for c in &self.columns {
                line.push(
                    self.get(row, c)
                        .map_or("—".into(), |r| format!("{:.2}", r.perplexity)),
                );
            }
            grid.push(line);
        }
        let mut line = vec!["OOV".to_string()];
        for c in &self.columns {
            line.push(self.oov[c].map_or("—".into(), |o| format!("{:.2}%", 100.0 * o)));
        }
        grid.push(line);

        let ncol = grid[0].len();
        let widths: Vec<usize> = (0..ncol)
            .map(|j| grid.iter().map(|l| l[j].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for l in &grid {
            let cells: Vec<String> = l
                .iter()
                .enumerate()
                .map(|(j, s)| {
                    let pad = widths[j] - s.chars().count();
                    if j == 0 {
                        format!("{s}{}", " ".repeat(pad))
                    } else {
                        format!("{}{s}", " ".repeat(pad))
                    }
                })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{FfnnConfig, LstmConfig};

    fn report(model: &str, corpus: &str, ppl: f64) -> PerplexityReport {
        PerplexityReport {
            model: model.into(),
            corpus: corpus.into(),
            tokens: 10,
            cross_entropy: ppl.ln(),
            perplexity: ppl,
            oov_rate: 0.1,
            seed: Some(1),
            vocab_size: 5,
            timestamp: None,
        }
    }

    #[test]
    fn oov_examples() {
        let v = Vocabulary::from_words(["a".to_string(), "b".to_string()]).unwrap();
        assert_eq!(oov_rate(&Corpus::from_lines("x", "a c b c\n"), &v).unwrap(), 0.5);
        assert_eq!(oov_rate(&Corpus::from_lines("x", "a b\nb\n"), &v).unwrap(), 0.0);
        assert_eq!(
            oov_type_rate(&Corpus::from_lines("x", "a c b c\n"), &v).unwrap(),
            1.0 / 3.0
        );
        assert!(matches!(
            oov_rate(&Corpus::from_lines("x", ""), &v),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn perplexity_of_ln_ten() {
        let c = Corpus::from_lines("x", "a\n");
        let v = Vocabulary::build(&c, 1);
        let r = PerplexityReport::from_nlls("m", &c, &[10f64.ln(); 4], &v).unwrap();
        assert!((r.perplexity - 10.0).abs() < 1e-9);
        assert_eq!(r.perplexity, r.cross_entropy.exp());
    }

    #[test]
    fn infinite_perplexity_round_trips_through_json() {
        let c = Corpus::from_lines("x", "a\n");
        let v = Vocabulary::build(&c, 1);
        let r = PerplexityReport::from_nlls("m", &c, &[1.0, f64::INFINITY], &v).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"perplexity\":null"));
        let back: PerplexityReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn kahan_keeps_infinities() {
        let k: KahanSum = [1.0, f64::INFINITY, 2.0, f64::INFINITY].into_iter().collect();
        assert_eq!(k.value(), f64::INFINITY);
        let k: KahanSum = [f64::INFINITY, f64::NEG_INFINITY].into_iter().collect();
        assert!(k.value().is_nan());
    }

    #[test]
    fn kahan_beats_naive_on_small_increments() {
        let xs: Vec<f64> = std::iter::once(1e16)
            .chain(std::iter::repeat(1.0).take(1000))
            .collect();
        let k: KahanSum = xs.iter().copied().collect();
        assert_eq!(k.value(), 1e16 + 1000.0);
    }

    #[test]
    fn zero_output_layers_give_uniform_perplexity() {
        let c = Corpus::from_lines("c", "a b c\nb a\nc\n");
        let v = Vocabulary::build(&c, 1);
        let mut lstm = LanguageModel::lstm(LstmConfig::untied(0, 4, 5), v.clone(), 1).unwrap();
        let mut ffnn = LanguageModel::ffnn(
            FfnnConfig {
                vocab_size: 0,
                context_len: 2,
                embed_dim: 3,
                hidden_dim: 4,
                output_size: None,
            },
            v.clone(),
            1,
        )
        .unwrap();
        for m in [&mut lstm, &mut ffnn] {
            for p in m.params_mut().iter_mut() {
                if p.name.starts_with("output.") {
                    p.value.fill(0.0);
                }
            }
            let r = evaluate(m, &c, "m").unwrap();
            assert_eq!(r.tokens, 9);
            assert!((r.perplexity / v.len() as f64 - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn table1_with_two_reports() {
        let m = emit_results_matrix(
            &[report("lstm", "ptb", 65.91), report("ffnn", "bsl", 258.1)],
            Layout::Table1,
        )
        .unwrap();
        let text = m.render_text();
        assert_eq!(text.matches('—').count(), 2);
        assert!(text.contains("65.91") && text.contains("258.10"));
        assert_eq!(m.rows, ["ffnn", "lstm"]);
        assert_eq!(ResultsMatrix::from_json(&m.to_json()).unwrap(), m);
        let again = emit_results_matrix(
            &[report("lstm", "ptb", 65.91), report("ffnn", "bsl", 258.1)],
            Layout::Table1,
        )
        .unwrap();
        assert_eq!(again.to_json(), m.to_json());
    }

    #[test]
    fn table2_and_conflicts() {
        let m = emit_results_matrix(
            &[
                report("lstm:finetune", "bsl", 121.46),
                report("ngram:substitute", "bsl", 9.0),
            ],
            Layout::Table2,
        )
        .unwrap();
        assert_eq!(m.rows, ["ffnn", "lstm", "ngram"]);
        assert_eq!(m.get("lstm", "finetune").unwrap().perplexity, 121.46);
        let dup = emit_results_matrix(
            &[report("lstm", "ptb", 1.0), report("lstm", "ptb", 2.0)],
            Layout::Table1,
        );
        assert!(matches!(dup, Err(Error::Conflict(_))));
        assert!(emit_results_matrix(&[report("lstm", "wiki", 1.0)], Layout::Table1).is_err());
    }
}
