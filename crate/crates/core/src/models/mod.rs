//! The two network architectures, their shared wrapper and the checkpoint
//! container.

mod checkpoint;
mod ffnn;
mod lstm;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{ParamStore, Parameter};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};

pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint, Checkpoint, ManifestEntry,
    TrainingMetadata, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, DEFAULT_INIT,
};
pub use ffnn::{FfnnConfig, FfnnModel};
pub use lstm::{HiddenState, LstmConfig, LstmModel, FORGET_BIAS, INIT_RANGE};

/// Whether stochastic regularisation is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Row-major matrix of token ids (`batch × steps` or `batch × context`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdBatch {
    rows: usize,
    cols: usize,
    ids: Vec<u32>,
}

impl IdBatch {
    pub fn new(rows: usize, cols: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != rows * cols {
            return Err(Error::Shape {
                op: "IdBatch",
                left: (rows, cols),
                right: (ids.len(), 1),
            });
        }
        Ok(Self { rows, cols, ids })
    }

    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Size("ragged id batch".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.ids[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<u32> {
        (0..self.rows).map(|r| self.ids[r * self.cols + c]).collect()
    }

    /// Ids in time-major order (`index = col * rows + row`), matching the
    /// row order of LSTM logits.
    pub fn time_major(&self) -> Vec<u32> {
        (0..self.cols).flat_map(|c| self.column(c)).collect()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Ffnn,
    Lstm,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Ffnn => "ffnn",
            Arch::Lstm => "lstm",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Network {
    Ffnn(FfnnModel),
    Lstm(LstmModel),
}

/// A network together with the vocabulary its inputs are tokenised with
/// and the vocabulary its outputs predict. The two differ only after
/// output-layer substitution.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel {
    network: Network,
    input_vocab: Vocabulary,
    output_vocab: Vocabulary,
}

impl LanguageModel {
    pub fn lstm(mut config: LstmConfig, vocab: Vocabulary, init_seed: u64) -> Result<Self> {
        config.vocab_size = vocab.len();
        Ok(Self {
            network: Network::Lstm(LstmModel::new(config, init_seed)?),
            output_vocab: vocab.clone(),
            input_vocab: vocab,
        })
    }

    pub fn ffnn(mut config: FfnnConfig, vocab: Vocabulary, init_seed: u64) -> Result<Self> {
        config.vocab_size = vocab.len();
        Ok(Self {
            network: Network::Ffnn(FfnnModel::new(config, init_seed)?),
            output_vocab: vocab.clone(),
            input_vocab: vocab,
        })
    }

    pub(crate) fn from_parts(
        network: Network,
        input_vocab: Vocabulary,
        output_vocab: Vocabulary,
    ) -> Result<Self> {
        let m = Self {
            network,
            input_vocab,
            output_vocab,
        };
        m.check_invariants()?;
        Ok(m)
    }

    pub fn arch(&self) -> Arch {
        match self.network {
            Network::Ffnn(_) => Arch::Ffnn,
            Network::Lstm(_) => Arch::Lstm,
        }
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn params(&self) -> &ParamStore {
        match &self.network {
            Network::Ffnn(m) => m.params(),
            Network::Lstm(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match &mut self.network {
            Network::Ffnn(m) => m.params_mut(),
            Network::Lstm(m) => m.params_mut(),
        }
    }

    pub fn input_vocab(&self) -> &Vocabulary {
        &self.input_vocab
    }

    pub fn output_vocab(&self) -> &Vocabulary {
        &self.output_vocab
    }

    /// Architecture configuration as JSON.
    pub fn config_json(&self) -> serde_json::Value {
        match &self.network {
            Network::Ffnn(m) => serde_json::to_value(m.config()),
            Network::Lstm(m) => serde_json::to_value(m.config()),
        }
        .expect("configs serialise")
    }

    /// True once the output layer has been replaced.
    pub fn is_substituted(&self) -> bool {
        match &self.network {
            Network::Ffnn(m) => m.config().output_size.is_some(),
            Network::Lstm(m) => m.config().output_size.is_some(),
        }
    }

    pub fn is_tied(&self) -> bool {
        matches!(&self.network, Network::Lstm(m) if m.is_tied())
    }

    /// Replaces the output layer by a freshly initialised one sized to
    /// `new_vocab`, freezes everything else and breaks any weight tie.
    /// Inputs keep being tokenised with the original vocabulary.
    pub fn substitute_output_layer(&self, new_vocab: &Vocabulary, init_seed: u64) -> Result<Self> {
        if new_vocab.len() < 2 {
            return Err(Error::Config(
                "substituted vocabulary needs at least 2 entries".into(),
            ));
        }
        let network = match &self.network {
            Network::Ffnn(m) => Network::Ffnn(m.with_new_output(new_vocab.len(), init_seed)?),
            Network::Lstm(m) => Network::Lstm(m.with_new_output(new_vocab.len(), init_seed)?),
        };
        Self::from_parts(network, self.input_vocab.clone(), new_vocab.clone())
    }

    /// Structural checks: vocabulary sizes agree with the configuration and
    /// a tied LSTM projects through its embedding matrix.
    pub fn check_invariants(&self) -> Result<()> {
        let (vocab, out, tied_ok) = match &self.network {
            Network::Ffnn(m) => (m.config().vocab_size, m.config().output_size(), true),
            Network::Lstm(m) => (
                m.config().vocab_size,
                m.config().output_size(),
                m.config().tie_weights == (m.output_weight_id() == m.embedding_id()),
            ),
        };
        if vocab != self.input_vocab.len() || out != self.output_vocab.len() {
            return Err(Error::Internal(format!(
                "model sizes {vocab}/{out} disagree with vocabularies {}/{}",
                self.input_vocab.len(),
                self.output_vocab.len()
            )));
        }
        if !tied_ok {
            return Err(Error::Internal(
                "output projection no longer shares the embedding".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 over names and bit patterns of all frozen parameters.
    pub fn frozen_fingerprint(&self) -> String {
        fingerprint(self.params().iter().filter(|p| !p.trainable))
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(self.params().iter())
    }
}

fn fingerprint<'a>(params: impl Iterator<Item = &'a Parameter>) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.name.as_bytes());
        h.update([0]);
        for x in p.value.data() {
            h.update(x.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
