use serde::{Deserialize, Serialize};

use super::lstm::INIT_RANGE;
use super::IdBatch;
use crate::autodiff::{rng_from_seed, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FfnnConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_size: Option<usize>,
}

impl FfnnConfig {
    /// Five-word context, 400-wide embedding and hidden layer.
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            context_len: 5,
            embed_dim: 400,
            hidden_dim: 400,
            output_size: None,
        }
    }

    pub fn output_size(&self) -> usize {
        self.output_size.unwrap_or(self.vocab_size)
    }

    pub fn feature_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.context_len == 0 {
            return Err(Error::Config("context_len must be at least 1".into()));
        }
        if self.vocab_size == 0 || self.embed_dim == 0 || self.hidden_dim == 0 || self.output_size() == 0 {
            return Err(Error::Config("FFNN dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn parameter_shapes(&self) -> Vec<(String, usize, usize)> {
        vec![
            ("embedding.weight".into(), self.vocab_size, self.embed_dim),
            (
                "hidden.weight".into(),
                self.context_len * self.embed_dim,
                self.hidden_dim,
            ),
            ("hidden.bias".into(), 1, self.hidden_dim),
            ("output.weight".into(), self.hidden_dim, self.output_size()),
            ("output.bias".into(), 1, self.output_size()),
        ]
    }
}

/// Concatenated context embeddings, one ReLU layer, untied linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnnModel<T: Scalar = f32> {
    config: FfnnConfig,
    params: ParamStore<T>,
    embedding: ParamId,
    hidden_w: ParamId,
    hidden_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

impl<T: Scalar> FfnnModel<T> {
    /// Weights uniform in `[-0.1, 0.1]`, biases zero.
    pub fn new(config: FfnnConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(init_seed);
        let mut params = ParamStore::new();
        let ids: Vec<ParamId> = config
            .parameter_shapes()
            .into_iter()
            .map(|(name, r, c)| {
                let t = if name.ends_with(".bias") {
                    Tensor::zeros(r, c)
                } else {
                    Tensor::uniform(r, c, INIT_RANGE, &mut rng)
                };
                params.add(name, t)
            })
            .collect();
        Ok(Self {
            config,
            params,
            embedding: ids[0],
            hidden_w: ids[1],
            hidden_b: ids[2],
            out_w: ids[3],
            out_b: ids[4],
        })
    }

    pub fn config(&self) -> &FfnnConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn graph(&self) -> Graph<'_, T> {
        Graph::new(&self.params)
    }

    pub fn embedding_id(&self) -> ParamId {
        self.embedding
    }

    pub fn output_weight_id(&self) -> ParamId {
        self.out_w
    }

    pub fn output_bias_id(&self) -> ParamId {
        self.out_b
    }

    /// Hidden-layer activations, `batch × hidden_dim`.
    pub fn features(&self, g: &mut Graph<'_, T>, contexts: &IdBatch) -> Result<Var> {
        debug_assert!(std::ptr::eq(g.params(), &self.params));
        if contexts.cols() != self.config.context_len {
            return Err(Error::Shape {
                op: "ffnn context",
                left: contexts.shape(),
                right: (contexts.rows(), self.config.context_len),
            });
        }
        let emb = g.param(self.embedding);
        let parts = (0..contexts.cols())
            .map(|j| g.embedding(emb, &contexts.column(j)))
            .collect::<Result<Vec<_>>>()?;
        let x = g.concat_cols(&parts)?;
        let w = g.param(self.hidden_w);
        let b = g.param(self.hidden_b);
        let h = g.matmul(x, w)?;
        let h = g.add_bias_row(h, b)?;
        Ok(g.relu(h))
    }

    /// Pre-softmax logits, `batch × output_size`.
    pub fn forward(&self, g: &mut Graph<'_, T>, contexts: &IdBatch) -> Result<Var> {
        let h = self.features(g, contexts)?;
        let w = g.param(self.out_w);
        let b = g.param(self.out_b);
        let z = g.matmul(h, w)?;
        g.add_bias_row(z, b)
    }

    pub fn with_new_output(&self, output_size: usize, init_seed: u64) -> Result<Self> {
        let mut config = self.config.clone();
        config.output_size = Some(output_size);
        let mut fresh = Self::new(config, init_seed)?;
        for p in fresh.params.iter_mut() {
            if p.name.starts_with("output.") {
                continue;
            }
            p.value = self
                .params
                .by_name(&p.name)
                .expect("same trunk layout")
                .value
                .clone();
            p.trainable = false;
        }
        Ok(fresh)
    }
}
