use serde::{Deserialize, Serialize};

use super::{IdBatch, Mode};
use crate::autodiff::{
    derive_seed, make_dropout_mask, rng_from_seed, Graph, ParamId, ParamStore, Scalar, Tensor, Var,
};
use crate::error::{Error, Result};

pub const INIT_RANGE: f64 = 0.1;
pub const FORGET_BIAS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub tie_weights: bool,
    /// Probability of dropping a hidden-to-hidden weight during training.
    pub weight_drop_p: f64,
    /// Width of the output layer when it differs from `vocab_size`
    /// (after output-layer substitution).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_size: Option<usize>,
}

impl LstmConfig {
    /// 400-wide embedding, layers of 1150/1150/400, tied output.
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 400,
            hidden_dims: vec![1150, 1150, 400],
            tie_weights: true,
            weight_drop_p: 0.5,
            output_size: None,
        }
    }

    /// Three equal layers with an untied output projection.
    pub fn untied(vocab_size: usize, embed_dim: usize, hidden: usize) -> Self {
        Self {
            vocab_size,
            embed_dim,
            hidden_dims: vec![hidden; 3],
            tie_weights: false,
            weight_drop_p: 0.5,
            output_size: None,
        }
    }

    pub fn output_size(&self) -> usize {
        self.output_size.unwrap_or(self.vocab_size)
    }

    /// Width of the top LSTM layer, the input of the output projection.
    pub fn feature_dim(&self) -> usize {
        self.hidden_dims.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.output_size() == 0 {
            return Err(Error::Config("LSTM dimensions must be positive".into()));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::Config(
                "LSTM needs at least one layer of positive width".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.weight_drop_p) {
            return Err(Error::Config(format!(
                "weight_drop_p must lie in [0, 1), got {}",
                self.weight_drop_p
            )));
        }
        if self.tie_weights {
            if self.feature_dim() != self.embed_dim {
                return Err(Error::Config(format!(
                    "tied weights need the last hidden layer ({}) to equal the embedding width ({})",
                    self.feature_dim(),
                    self.embed_dim
                )));
            }
            if self.output_size() != self.vocab_size {
                return Err(Error::Config(
                    "tied weights need output size = vocabulary size".into(),
                ));
            }
        }
        Ok(())
    }

    /// `(name, rows, cols)` of every parameter in store order.
    pub fn parameter_shapes(&self) -> Vec<(String, usize, usize)> {
        let mut out = vec![("embedding.weight".to_string(), self.vocab_size, self.embed_dim)];
        let mut input = self.embed_dim;
        for (l, &h) in self.hidden_dims.iter().enumerate() {
            out.push((format!("lstm.{l}.weight_ih"), input, 4 * h));
            out.push((format!("lstm.{l}.weight_hh"), h, 4 * h));
            out.push((format!("lstm.{l}.bias_ih"), 1, 4 * h));
            out.push((format!("lstm.{l}.bias_hh"), 1, 4 * h));
            input = h;
        }
        if !self.tie_weights {
            out.push(("output.weight".into(), self.feature_dim(), self.output_size()));
        }
        out.push(("output.bias".into(), 1, self.output_size()));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerIds {
    w_ih: ParamId,
    w_hh: ParamId,
    b_ih: ParamId,
    b_hh: ParamId,
    hidden: usize,
}

/// Per-layer `(h, c)`, each `batch × hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState<T = f32> {
    pub layers: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> HiddenState<T> {
    pub fn batch_size(&self) -> usize {
        self.layers.first().map_or(0, |(h, _)| h.rows())
    }
}

/// Embedding, stacked LSTM layers and a linear output layer that is either
/// the transposed embedding (tied) or a separate matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmModel<T: Scalar = f32> {
    config: LstmConfig,
    params: ParamStore<T>,
    embedding: ParamId,
    layers: Vec<LayerIds>,
    out_weight: Option<ParamId>,
    out_bias: ParamId,
}

impl<T: Scalar> LstmModel<T> {
    /// Weights uniform in `[-0.1, 0.1]`, forget-gate input bias 1, output
    /// bias 0.
    pub fn new(config: LstmConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(init_seed);
        let mut params = ParamStore::new();
        let mut embedding = None;
        let mut out_weight = None;
        let mut out_bias = None;
        let mut pending: Vec<ParamId> = Vec::new();
        let mut layers = Vec::new();

        for (name, r, c) in config.parameter_shapes() {
            let mut t = Tensor::uniform(r, c, INIT_RANGE, &mut rng);
            if name == "output.bias" {
                t.fill(T::zero());
            }
            if name.ends_with("bias_ih") {
                let h = c / 4;
                t.data_mut()[h..2 * h]
                    .iter_mut()
                    .for_each(|x| *x = T::of_f64(FORGET_BIAS));
            }
            let id = params.add(name.clone(), t);
            match name.as_str() {
                "embedding.weight" => embedding = Some(id),
                "output.weight" => out_weight = Some(id),
                "output.bias" => out_bias = Some(id),
                _ => {
                    pending.push(id);
                    if pending.len() == 4 {
                        layers.push(LayerIds {
                            w_ih: pending[0],
                            w_hh: pending[1],
                            b_ih: pending[2],
                            b_hh: pending[3],
                            hidden: config.hidden_dims[layers.len()],
                        });
                        pending.clear();
                    }
                }
            }
        }
        Ok(Self {
            config,
            params,
            embedding: embedding.expect("embedding declared"),
            layers,
            out_weight,
            out_bias: out_bias.expect("output bias declared"),
        })
    }

    pub fn config(&self) -> &LstmConfig {
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

    /// The parameter used as output projection; the embedding when tied.
    pub fn output_weight_id(&self) -> ParamId {
        self.out_weight.unwrap_or(self.embedding)
    }

    pub fn output_bias_id(&self) -> ParamId {
        self.out_bias
    }

    pub fn is_tied(&self) -> bool {
        self.out_weight.is_none()
    }

    pub fn zero_state(&self, batch: usize) -> HiddenState<T> {
        HiddenState {
            layers: self
                .layers
                .iter()
                .map(|l| (Tensor::zeros(batch, l.hidden), Tensor::zeros(batch, l.hidden)))
                .collect(),
        }
    }

    /// Top-layer activations for every position, time-major
    /// (`row = t * batch + b`), and the detached final state.
    pub fn features(
        &self,
        g: &mut Graph<'_, T>,
        inputs: &IdBatch,
        state: &HiddenState<T>,
        mode: Mode,
        mask_seed: u64,
    ) -> Result<(Var, HiddenState<T>)> {
        debug_assert!(std::ptr::eq(g.params(), &self.params));
        let batch = inputs.rows();
        if state.layers.len() != self.layers.len() || state.batch_size() != batch {
            return Err(Error::Shape {
                op: "lstm state",
                left: (state.layers.len(), state.batch_size()),
                right: (self.layers.len(), batch),
            });
        }
        let emb = g.param(self.embedding);

        struct Layer {
            w_ih: Var,
            w_hh: Var,
            b_ih: Var,
            b_hh: Var,
            h: Var,
            c: Var,
            hidden: usize,
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, (ids, (h0, c0))) in self.layers.iter().zip(&state.layers).enumerate() {
            let mut w_hh = g.param(ids.w_hh);
            if mode == Mode::Train && self.config.weight_drop_p > 0.0 {
                let (r, c) = self.params.get(ids.w_hh).value.shape();
                let keep = 1.0 - self.config.weight_drop_p;
                let mask = make_dropout_mask(r, c, keep, derive_seed(mask_seed, &[l as u64]))?;
                w_hh = g.apply_mask(w_hh, mask)?;
            }
            layers.push(Layer {
                w_ih: g.param(ids.w_ih),
                w_hh,
                b_ih: g.param(ids.b_ih),
                b_hh: g.param(ids.b_hh),
                h: g.constant(h0.clone()),
                c: g.constant(c0.clone()),
                hidden: ids.hidden,
            });
        }

        let mut tops = Vec::with_capacity(inputs.cols());
        for t in 0..inputs.cols() {
            let mut x = g.embedding(emb, &inputs.column(t))?;
            for layer in &mut layers {
                let xi = g.matmul(x, layer.w_ih)?;
                let xi = g.add_bias_row(xi, layer.b_ih)?;
                let hh = g.matmul(layer.h, layer.w_hh)?;
                let hh = g.add_bias_row(hh, layer.b_hh)?;
                let gates = g.add(xi, hh)?;
                let n = layer.hidden;
                let i = g.slice_cols(gates, 0, n)?;
                let f = g.slice_cols(gates, n, 2 * n)?;
                let c_hat = g.slice_cols(gates, 2 * n, 3 * n)?;
                let o = g.slice_cols(gates, 3 * n, 4 * n)?;
                let i = g.sigmoid(i);
                let f = g.sigmoid(f);
                let c_hat = g.tanh(c_hat);
                let o = g.sigmoid(o);
                let keep = g.mul(f, layer.c)?;
                let write = g.mul(i, c_hat)?;
                layer.c = g.add(keep, write)?;
                let tc = g.tanh(layer.c);
                layer.h = g.mul(o, tc)?;
                x = layer.h;
            }
            tops.push(x);
        }
        let features = g.concat_rows(&tops)?;
        let next = HiddenState {
            layers: layers
                .iter()
                .map(|l| (g.value(l.h).clone(), g.value(l.c).clone()))
                .collect(),
        };
        Ok((features, next))
    }

    /// Pre-softmax logits, `(batch * steps) × output_size`, time-major.
    pub fn forward(
        &self,
        g: &mut Graph<'_, T>,
        inputs: &IdBatch,
        state: &HiddenState<T>,
        mode: Mode,
        mask_seed: u64,
    ) -> Result<(Var, HiddenState<T>)> {
        let (h, next) = self.features(g, inputs, state, mode, mask_seed)?;
        let b = g.param(self.out_bias);
        let logits = match self.out_weight {
            None => {
                let e = g.param(self.embedding);
                g.matmul_t(h, e)?
            }
            Some(w) => {
                let w = g.param(w);
                g.matmul(h, w)?
            }
        };
        Ok((g.add_bias_row(logits, b)?, next))
    }

    /// Same trunk with a fresh `feature_dim × output_size` output layer.
    /// Every trunk parameter is copied and frozen; the tie, if any, is broken.
    pub fn with_new_output(&self, output_size: usize, init_seed: u64) -> Result<Self> {
        let mut config = self.config.clone();
        config.tie_weights = false;
        config.output_size = Some(output_size);
        let mut fresh = Self::new(config, init_seed)?;
        for p in fresh.params.iter_mut() {
            if p.name.starts_with("output.") {
                continue;
            }
            let src = self.params.by_name(&p.name).expect("same trunk layout");
            p.value = src.value.clone();
            p.trainable = false;
        }
        Ok(fresh)
    }
}
