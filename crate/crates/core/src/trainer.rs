//! Batching, the SGD loop with learning-rate annealing and best-model
//! selection, and the two transfer procedures.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{derive_seed, rng_from_seed, sgd_step};
use crate::corpus::{Corpus, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{ffnn_pairs, token_nlls, KahanSum};
use crate::models::{save_checkpoint, IdBatch, LanguageModel, Mode, Network, TrainingMetadata};

const SUBSTITUTE_SEED_TAG: u64 = 0x5355_4253;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub bptt: usize,
    pub lr: f64,
    /// Divisor applied to the learning rate when validation stalls.
    pub anneal_factor: f64,
    /// Epochs without improvement before the learning rate is divided.
    pub anneal_patience: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            bptt: 5,
            lr: 30.0,
            anneal_factor: 4.0,
            anneal_patience: 1,
            clip_norm: Some(0.25),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.bptt == 0 || self.anneal_patience == 0 {
            return Err(Error::Config(
                "batch_size, bptt and anneal_patience must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.anneal_factor > 1.0) {
            return Err(Error::Config(format!(
                "anneal_factor must exceed 1, got {}",
                self.anneal_factor
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_cross_entropy: f64,
    pub valid_cross_entropy: f64,
    pub valid_perplexity: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    /// Wall-clock time; not written to history files.
    #[serde(skip)]
    pub seconds: f64,
}

impl EpochRecord {
    /// Equality on everything except wall-clock time.
    pub fn same_trajectory(&self, other: &EpochRecord) -> bool {
        self.epoch == other.epoch
            && self.train_cross_entropy.to_bits() == other.train_cross_entropy.to_bits()
            && self.valid_cross_entropy.to_bits() == other.valid_cross_entropy.to_bits()
            && self.lr.to_bits() == other.lr.to_bits()
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    /// The model with the lowest validation perplexity.
    pub best: LanguageModel,
    pub best_metadata: TrainingMetadata,
    /// Where `best` was written, if a checkpoint path was given.
    pub best_checkpoint: Option<PathBuf>,
    pub history: Vec<EpochRecord>,
    /// Epoch `best` comes from; 0 when no epoch was run.
    pub selection_epoch: usize,
}

/// Divide-on-plateau learning-rate schedule.
#[derive(Debug, Clone)]
pub struct Annealer {
    lr: f64,
    factor: f64,
    patience: usize,
    stale: usize,
    best: f64,
}

impl Annealer {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            lr,
            factor,
            patience,
            stale: 0,
            best: f64::INFINITY,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one validation perplexity; returns whether it is a new best.
    pub fn observe(&mut self, perplexity: f64) -> bool {
        if perplexity < self.best {
            self.best = perplexity;
            self.stale = 0;
            return true;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.lr /= self.factor;
            self.stale = 0;
        }
        false
    }
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct RunOutputs {
    pub checkpoint: Option<PathBuf>,
    pub history: Option<PathBuf>,
}

/// Input and target windows, each `batch × steps`.
pub type LstmBatch = (IdBatch, IdBatch);

/// Cuts a token stream into `batch_size` contiguous parallel streams and
/// walks them in windows of up to `bptt` steps, targets shifted by one.
pub fn make_lstm_batches(stream: &[u32], batch_size: usize, bptt: usize) -> Result<Vec<LstmBatch>> {
    make_paired_lstm_batches(stream, stream, batch_size, bptt)
}

/// As [`make_lstm_batches`] with inputs and targets drawn from two aligned
/// streams (the same text tokenised through different vocabularies).
pub fn make_paired_lstm_batches(
    inputs: &[u32],
    targets: &[u32],
    batch_size: usize,
    bptt: usize,
) -> Result<Vec<LstmBatch>> {
    if inputs.len() != targets.len() {
        return Err(Error::Size("input and target streams differ in length".into()));
    }
    if batch_size == 0 || bptt == 0 {
        return Err(Error::Config("batch_size and bptt must be positive".into()));
    }
    if inputs.len() < 2 * batch_size {
        return Err(Error::Size(format!(
            "stream of {} tokens is too short for batch size {batch_size}",
            inputs.len()
        )));
    }
    let n = inputs.len() / batch_size;
    let mut out = Vec::new();
    let mut i = 0;
    while i < n - 1 {
        let seq = bptt.min(n - 1 - i);
        let window = |src: &[u32], offset: usize| {
            let ids = (0..batch_size)
                .flat_map(|b| src[b * n + offset..b * n + offset + seq].iter().copied())
                .collect();
            IdBatch::new(batch_size, seq, ids)
        };
        out.push((window(inputs, i)?, window(targets, i + 1)?));
        i += bptt;
    }
    Ok(out)
}

/// Contexts `batch × context_len` and their targets.
pub type FfnnBatch = (IdBatch, Vec<u32>);

/// One pair per target token (eos included), contexts left-padded with eos,
/// shuffled by `shuffle_seed` when given and cut into batches.
pub fn make_ffnn_batches(
    model: &LanguageModel,
    corpus: &Corpus,
    context_len: usize,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<FfnnBatch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let (contexts, targets) = ffnn_pairs(model, corpus, context_len);
    let mut order: Vec<usize> = (0..targets.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut rng_from_seed(seed));
    }
    order
        .chunks(batch_size)
        .map(|idx| {
            let rows: Vec<Vec<u32>> = idx.iter().map(|&i| contexts[i].clone()).collect();
            Ok((
                IdBatch::from_rows(&rows)?,
                idx.iter().map(|&i| targets[i]).collect(),
            ))
        })
        .collect()
}

fn mean_nll(model: &LanguageModel, corpus: &Corpus) -> Result<f64> {
    let nlls = token_nlls(model, corpus)?;
    if nlls.is_empty() {
        return Err(Error::Size(format!(
            "validation corpus '{}' is empty",
            corpus.name
        )));
    }
    Ok(nlls.iter().copied().collect::<KahanSum>().value() / nlls.len() as f64)
}

/// Runs one epoch of SGD and returns the token-weighted mean training loss.
fn run_epoch(
    model: &mut LanguageModel,
    train: &Corpus,
    config: &TrainConfig,
    epoch: usize,
    lr: f64,
) -> Result<f64> {
    let mut total = KahanSum::default();
    let mut count = 0usize;
    let check = |loss: f64, step: usize| {
        if loss.is_finite() {
            Ok(())
        } else {
            Err(Error::Diverged {
                epoch,
                reason: format!("non-finite loss at step {step}"),
            })
        }
    };
    match model.network().clone() {
        Network::Lstm(_) => {
            let inputs = model.input_vocab().stream(train);
            let targets = model.output_vocab().stream(train);
            let batches = make_paired_lstm_batches(&inputs, &targets, config.batch_size, config.bptt)?;
            // a frozen trunk stays deterministic: no weight-drop masks
            let mode = if model.is_substituted() {
                Mode::Eval
            } else {
                Mode::Train
            };
            let mut state = match model.network() {
                Network::Lstm(m) => m.zero_state(config.batch_size),
                Network::Ffnn(_) => unreachable!(),
            };
            for (step, (x, y)) in batches.iter().enumerate() {
                let Network::Lstm(m) = model.network() else {
                    unreachable!()
                };
                let mask_seed = derive_seed(config.seed, &[epoch as u64, step as u64]);
                let mut g = m.graph();
                let (z, next) = m.forward(&mut g, x, &state, mode, mask_seed)?;
                let l = g.log_softmax_cross_entropy(z, &y.time_major())?;
                let loss = g.scalar(l);
                check(loss, step)?;
                let grads = g.backward(l)?;
                state = next;
                model.params_mut().accumulate(&grads);
                sgd_step(model.params_mut(), lr, config.clip_norm)?;
                total.add(loss * y.ids().len() as f64);
                count += y.ids().len();
            }
        }
        Network::Ffnn(m) => {
            let shuffle = derive_seed(config.seed, &[epoch as u64]);
            let batches = make_ffnn_batches(
                model,
                train,
                m.config().context_len,
                config.batch_size,
                Some(shuffle),
            )?;
            for (step, (x, y)) in batches.iter().enumerate() {
                let Network::Ffnn(m) = model.network() else {
                    unreachable!()
                };
                let mut g = m.graph();
                let z = m.forward(&mut g, x)?;
                let l = g.log_softmax_cross_entropy(z, y)?;
                let loss = g.scalar(l);
                check(loss, step)?;
                let grads = g.backward(l)?;
                model.params_mut().accumulate(&grads);
                sgd_step(model.params_mut(), lr, config.clip_norm)?;
                total.add(loss * y.len() as f64);
                count += y.len();
            }
        }
    }
    if count == 0 {
        return Err(Error::Size(format!(
            "training corpus '{}' yields no targets",
            train.name
        )));
    }
    Ok(total.value() / count as f64)
}

/// Trains `model` and keeps the epoch with the lowest validation
/// perplexity. The learning rate is divided by `anneal_factor` after
/// `anneal_patience` consecutive epochs without improvement.
pub fn train(
    mut model: LanguageModel,
    train: &Corpus,
    valid: &Corpus,
    config: &TrainConfig,
    outputs: &RunOutputs,
) -> Result<RunResult> {
    config.validate()?;
    model.check_invariants()?;
    let frozen = model.frozen_fingerprint();
    let divergence_bound = 3.0 * (model.output_vocab().len() as f64).ln();

    let mut history_file = match &outputs.history {
        Some(p) => Some(std::io::BufWriter::new(
            std::fs::File::create(p).map_err(|e| Error::io(p, e))?,
        )),
        None => None,
    };

    let mut meta = TrainingMetadata {
        seed: config.seed,
        ..TrainingMetadata::default()
    };
    let mut best: Option<(LanguageModel, TrainingMetadata)> = None;
    let mut history = Vec::with_capacity(config.epochs);
    let mut schedule = Annealer::new(config.lr, config.anneal_factor, config.anneal_patience);

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let lr = schedule.lr();
        let train_ce = run_epoch(&mut model, train, config, epoch, lr)?;
        if !train_ce.is_finite() || train_ce > divergence_bound {
            return Err(Error::Diverged {
                epoch,
                reason: format!(
                    "training cross-entropy {train_ce:.4} exceeds 3 ln V = {divergence_bound:.4}"
                ),
            });
        }
        epoch_invariants(&model, &frozen)?;
        let valid_ce = mean_nll(&model, valid)?;
        let rec = EpochRecord {
            epoch,
            train_cross_entropy: train_ce,
            valid_cross_entropy: valid_ce,
            valid_perplexity: valid_ce.exp(),
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        if let (Some(w), Some(p)) = (history_file.as_mut(), &outputs.history) {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n").map_err(|e| Error::io(p, e))?;
            w.flush().map_err(|e| Error::io(p, e))?;
        }

        if schedule.observe(rec.valid_perplexity) {
            meta.epoch = epoch;
            meta.valid_perplexity = Some(rec.valid_perplexity);
            if let Some(p) = &outputs.checkpoint {
                save_checkpoint(&model, &meta, p)?;
            }
            best = Some((model.clone(), meta.clone()));
        }
        history.push(rec);
    }

    let (best, best_metadata) = match best {
        Some(b) => b,
        None => {
            meta.valid_perplexity = Some(mean_nll(&model, valid)?.exp());
            if let Some(p) = &outputs.checkpoint {
                save_checkpoint(&model, &meta, p)?;
            }
            (model, meta)
        }
    };
    Ok(RunResult {
        selection_epoch: best_metadata.epoch,
        best,
        best_metadata,
        best_checkpoint: outputs.checkpoint.clone(),
        history,
    })
}

fn epoch_invariants(model: &LanguageModel, frozen: &str) -> Result<()> {
    model.check_invariants()?;
    if model.frozen_fingerprint() != frozen {
        return Err(Error::Internal(
            "a frozen parameter changed during training".into(),
        ));
    }
    Ok(())
}

/// Continues training a pretrained model on new corpora with every
/// parameter trainable. The pretrained vocabulary is kept, so target words
/// it lacks become unk.
pub fn finetune(
    mut model: LanguageModel,
    train_corpus: &Corpus,
    valid: &Corpus,
    config: &TrainConfig,
    outputs: &RunOutputs,
) -> Result<RunResult> {
    model.params_mut().set_trainable(true);
    train(model, train_corpus, valid, config, outputs)
}

/// Replaces the output layer by one over `target_vocab`, freezes the rest
/// and trains only the new layer.
pub fn train_substituted(
    model: &LanguageModel,
    target_vocab: &Vocabulary,
    train_corpus: &Corpus,
    valid: &Corpus,
    config: &TrainConfig,
    outputs: &RunOutputs,
) -> Result<RunResult> {
    let init = derive_seed(config.seed, &[SUBSTITUTE_SEED_TAG]);
    let substituted = model.substitute_output_layer(target_vocab, init)?;
    train(substituted, train_corpus, valid, config, outputs)
}

/// Reads a JSON-lines history file.
pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{FfnnConfig, LstmConfig};
    use proptest::prelude::*;

    fn ids(b: &IdBatch) -> Vec<Vec<u32>> {
        (0..b.rows()).map(|r| b.row(r).to_vec()).collect()
    }

    #[test]
    fn lstm_windows_by_enumeration() {
        // 12 ids, batch 2 -> streams 0..6 and 6..12; bptt 2 -> windows of
        // 2, 2 and a final one of length 1 (5 targets per stream).
        let stream: Vec<u32> = (0..12).collect();
        let batches = make_lstm_batches(&stream, 2, 2).unwrap();
        let got: Vec<(Vec<Vec<u32>>, Vec<Vec<u32>>)> =
            batches.iter().map(|(x, y)| (ids(x), ids(y))).collect();
        assert_eq!(
            got,
            vec![
                (vec![vec![0, 1], vec![6, 7]], vec![vec![1, 2], vec![7, 8]]),
                (vec![vec![2, 3], vec![8, 9]], vec![vec![3, 4], vec![9, 10]]),
                (vec![vec![4], vec![10]], vec![vec![5], vec![11]]),
            ]
        );
    }

    #[test]
    fn ten_ids_batch_two() {
        let stream: Vec<u32> = (0..10).collect();
        let batches = make_lstm_batches(&stream, 2, 2).unwrap();
        let lens: Vec<usize> = batches.iter().map(|(x, _)| x.cols()).collect();
        assert_eq!(lens, [2, 2]);
        assert_eq!(ids(&batches[1].1), [vec![3, 4], vec![8, 9]]);
    }

    #[test]
    fn single_stream_single_window() {
        let stream: Vec<u32> = (0..9).collect();
        let b = make_lstm_batches(&stream, 1, 8).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].0.ids(), &stream[..8]);
        assert_eq!(b[0].1.ids(), &stream[1..]);
    }

    #[test]
    fn short_stream_rejected() {
        assert!(matches!(make_lstm_batches(&[1, 2, 3], 2, 2), Err(Error::Size(_))));
    }

    proptest! {
        #[test]
        fn target_count(len in 2usize..200, batch in 1usize..8, bptt in 1usize..9) {
            prop_assume!(len >= 2 * batch);
            let stream: Vec<u32> = (0..len as u32).collect();
            let b = make_lstm_batches(&stream, batch, bptt).unwrap();
            let targets: usize = b.iter().map(|(_, y)| y.ids().len()).sum();
            prop_assert_eq!(targets, batch * (len / batch - 1));
            for (x, y) in &b {
                for r in 0..batch {
                    for (a, t) in x.row(r).iter().zip(y.row(r)) {
                        prop_assert_eq!(a + 1, *t);
                    }
                }
            }
        }
    }

    fn ab_model(context: usize) -> (LanguageModel, Vocabulary) {
        let v = Vocabulary::from_words(["a".to_string(), "b".to_string()]).unwrap();
        let cfg = FfnnConfig {
            vocab_size: 0,
            context_len: context,
            embed_dim: 2,
            hidden_dim: 2,
            output_size: None,
        };
        (LanguageModel::ffnn(cfg, v.clone(), 0).unwrap(), v)
    }

    #[test]
    fn ffnn_pairs_by_enumeration() {
        let (m, _) = ab_model(2);
        let c = Corpus::from_lines("c", "a b\n");
        let b = make_ffnn_batches(&m, &c, 2, 10, None).unwrap();
        assert_eq!(b.len(), 1);
        let (a, bb, eos) = (2, 3, Vocabulary::EOS_ID);
        assert_eq!(ids(&b[0].0), [vec![eos, eos], vec![eos, a], vec![a, bb]]);
        assert_eq!(b[0].1, [a, bb, eos]);
        assert!(make_ffnn_batches(&m, &Corpus::from_lines("e", ""), 2, 4, None)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn ffnn_pair_count_and_shuffle() {
        let (m, _) = ab_model(3);
        let c = Corpus::from_lines("c", "a b a\nb\na a b b\n");
        let plain = make_ffnn_batches(&m, &c, 3, 4, None).unwrap();
        let shuffled = make_ffnn_batches(&m, &c, 3, 4, Some(7)).unwrap();
        let count = |b: &[FfnnBatch]| b.iter().map(|(_, y)| y.len()).sum::<usize>();
        assert_eq!(count(&plain), c.token_count() + c.len());
        assert_eq!(count(&shuffled), count(&plain));
        assert_eq!(shuffled, make_ffnn_batches(&m, &c, 3, 4, Some(7)).unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            anneal_factor: 1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    fn cyclic(n: usize) -> Corpus {
        Corpus::from_lines("cyc", &"a b c\n".repeat(n))
    }

    fn tiny_lstm(v: &Vocabulary) -> LanguageModel {
        let cfg = LstmConfig {
            vocab_size: 0,
            embed_dim: 8,
            hidden_dims: vec![8, 8],
            tie_weights: true,
            weight_drop_p: 0.2,
            output_size: None,
        };
        LanguageModel::lstm(cfg, v.clone(), 3).unwrap()
    }

    #[test]
    fn two_anneal_triggers() {
        let mut a = Annealer::new(30.0, 4.0, 1);
        assert!(a.observe(100.0));
        assert!(!a.observe(100.0));
        assert!(a.observe(90.0));
        assert!(!a.observe(95.0));
        assert_eq!(a.lr(), 1.875);
        let mut patient = Annealer::new(30.0, 4.0, 2);
        patient.observe(10.0);
        patient.observe(11.0);
        assert_eq!(patient.lr(), 30.0);
        patient.observe(12.0);
        assert_eq!(patient.lr(), 7.5);
    }

    #[test]
    fn training_history_and_selection() {
        let c = cyclic(20);
        let v = Vocabulary::build(&c, 1);
        let cfg = TrainConfig {
            epochs: 6,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let r = train(tiny_lstm(&v), &c, &c, &cfg, &RunOutputs::default()).unwrap();
        assert_eq!(r.history.len(), 6);
        for w in r.history.windows(2) {
            assert!(w[1].lr <= w[0].lr);
        }
        let best = r
            .history
            .iter()
            .map(|h| h.valid_perplexity)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(r.history[r.selection_epoch - 1].valid_perplexity, best);
    }

    #[test]
    fn zero_epochs_keeps_initial_model() {
        let c = cyclic(10);
        let v = Vocabulary::build(&c, 1);
        let m = tiny_lstm(&v);
        let cfg = TrainConfig {
            epochs: 0,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let r = finetune(m.clone(), &c, &c, &cfg, &RunOutputs::default()).unwrap();
        assert_eq!(r.best, m);
        assert_eq!(r.selection_epoch, 0);
        assert!(r.history.is_empty());
    }

    #[test]
    fn substituted_training_touches_only_output() {
        let c = cyclic(20);
        let v = Vocabulary::build(&c, 1);
        let src = tiny_lstm(&v);
        let target = Corpus::from_lines("t", &"a c x\n".repeat(20));
        let tv = Vocabulary::build(&target, 1);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let r = train_substituted(&src, &tv, &target, &target, &cfg, &RunOutputs::default()).unwrap();
        let before = src.substitute_output_layer(&tv, 0).unwrap();
        assert_eq!(r.best.frozen_fingerprint(), before.frozen_fingerprint());
        assert_eq!(r.best.output_vocab(), &tv);
        assert_eq!(r.best.input_vocab(), &v);
    }
}
