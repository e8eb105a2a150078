//! Synthetic languages for controlled transfer experiments.
//!
//! A language is a class-based second-order Markov chain: words belong to
//! classes, each word is emitted from its class with Zipf-distributed
//! weights, and the next class depends on the two previous classes. Two
//! languages built from the same lexicon seed share words, classes and
//! emission weights and differ only in their class transitions.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{derive_seed, rng_from_seed};
use crate::corpus::{Corpus, GlossSentence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrammarSpec {
    pub classes: usize,
    pub words_per_class: usize,
    /// Successor classes allowed after each two-class history.
    pub branching: usize,
    /// Probability of ending the sentence after each token but the first.
    pub end_prob: f64,
    pub max_len: usize,
    /// Zipf exponent of the within-class emission weights.
    pub zipf: f64,
}

impl Default for GrammarSpec {
    /// 8 classes of 25 words (200 words), sentences of about 5 tokens.
    fn default() -> Self {
        Self {
            classes: 8,
            words_per_class: 25,
            branching: 3,
            end_prob: 0.2,
            max_len: 13,
            zipf: 1.0,
        }
    }
}

impl GrammarSpec {
    pub fn vocab_size(&self) -> usize {
        self.classes * self.words_per_class
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkovGrammar {
    spec: GrammarSpec,
    /// `lexicon[class]` lists the class's words.
    lexicon: Vec<Vec<String>>,
    emission: Vec<WeightedIndex<f64>>,
    /// Indexed by `prev2 * (classes + 1) + prev1`; `classes` marks the
    /// sentence start. Outcome `classes` ends the sentence.
    transitions: Vec<(Vec<usize>, WeightedIndex<f64>)>,
}

impl MarkovGrammar {
    /// Lexicon and emissions come from `lexicon_seed`, transitions from
    /// `grammar_seed`.
    pub fn new(spec: GrammarSpec, lexicon_seed: u64, grammar_seed: u64) -> Self {
        assert!(spec.classes >= 1 && spec.words_per_class >= 1);
        assert!((1..=spec.classes).contains(&spec.branching));
        assert!((0.0..1.0).contains(&spec.end_prob) && spec.max_len >= 1);

        let mut lrng = rng_from_seed(lexicon_seed);
        let mut words: Vec<String> = (0..spec.vocab_size()).map(|i| format!("w{i:03}")).collect();
        rand::seq::SliceRandom::shuffle(words.as_mut_slice(), &mut lrng);
        let lexicon: Vec<Vec<String>> = words.chunks(spec.words_per_class).map(|c| c.to_vec()).collect();
        let zipf: Vec<f64> = (1..=spec.words_per_class)
            .map(|r| (r as f64).powf(-spec.zipf))
            .collect();
        let emission = (0..spec.classes)
            .map(|_| WeightedIndex::new(&zipf).expect("positive weights"))
            .collect();

        let mut grng = rng_from_seed(grammar_seed);
        let start = spec.classes;
        let mut transitions = Vec::with_capacity((start + 1) * (start + 1));
        for _prev2 in 0..=start {
            for prev1 in 0..=start {
                let succ: Vec<usize> = sample(&mut grng, spec.classes, spec.branching).into_vec();
                let mut weights: Vec<f64> = succ.iter().map(|_| grng.gen_range(0.5..1.5)).collect();
                let z: f64 = weights.iter().sum();
                let p_end = if prev1 == start { 0.0 } else { spec.end_prob };
                weights.iter_mut().for_each(|w| *w *= (1.0 - p_end) / z);
                let mut outcomes = succ;
                outcomes.push(spec.classes);
                weights.push(p_end);
                let dist = WeightedIndex::new(&weights).expect("positive weights");
                transitions.push((outcomes, dist));
            }
        }
        Self {
            spec,
            lexicon,
            emission,
            transitions,
        }
    }

    pub fn spec(&self) -> &GrammarSpec {
        &self.spec
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.lexicon.iter().flatten().map(String::as_str)
    }

    pub fn sample_sentence<R: Rng>(&self, rng: &mut R) -> Vec<String> {
        let start = self.spec.classes;
        let (mut prev2, mut prev1) = (start, start);
        let mut out = Vec::new();
        while out.len() < self.spec.max_len {
            let (outcomes, dist) = &self.transitions[prev2 * (start + 1) + prev1];
            let class = outcomes[dist.sample(rng)];
            if class == start {
                break;
            }
            out.push(self.lexicon[class][self.emission[class].sample(rng)].clone());
            (prev2, prev1) = (prev1, class);
        }
        out
    }

    pub fn sample_corpus(&self, name: &str, sentences: usize, seed: u64) -> Corpus {
        let mut rng = rng_from_seed(seed);
        let sents = (0..sentences)
            .map(|_| GlossSentence::new(self.sample_sentence(&mut rng)).expect("first token is never END"))
            .collect();
        Corpus::new(name, sents)
    }
}

/// Two languages over one lexicon with independently drawn grammars.
pub fn language_pair(spec: &GrammarSpec, seed: u64) -> (MarkovGrammar, MarkovGrammar) {
    let lex = derive_seed(seed, &[0]);
    (
        MarkovGrammar::new(spec.clone(), lex, derive_seed(seed, &[1])),
        MarkovGrammar::new(spec.clone(), lex, derive_seed(seed, &[2])),
    )
}
