#![allow(dead_code)]

use glosslm::autodiff::{rng_from_seed, Gradients, ParamStore, Tensor};
use glosslm::models::{FfnnConfig, FfnnModel, HiddenState, IdBatch, LstmConfig, LstmModel, Mode};
use glosslm::Result;
use rand::Rng;

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-3;

/// Largest observed elementwise relative error and where it occurred.
#[derive(Debug)]
pub struct Worst {
    pub rel: f64,
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error of two derivatives. Entries where both magnitudes fall
/// below `floor` are compared against `floor` instead.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Redraws every parameter uniformly in `[-bound, bound]`.
pub fn randomize(store: &mut ParamStore<f64>, bound: f64, seed: u64) {
    let mut rng = rng_from_seed(seed);
    for p in store.iter_mut() {
        p.value = Tensor::uniform(p.value.rows(), p.value.cols(), bound, &mut rng);
    }
}

/// Compares analytic gradients of `loss` with central differences over every
/// entry of every trainable parameter.
pub fn check_gradients<M>(
    model: &mut M,
    store: impl Fn(&mut M) -> &mut ParamStore<f64>,
    loss: impl Fn(&M) -> Result<(f64, Gradients<f64>)>,
) -> Worst {
    let (_, grads) = loss(model).unwrap();
    let ids: Vec<_> = store(model).ids().collect();
    let mut worst = Worst {
        rel: 0.0,
        param: String::new(),
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for id in ids {
        let (name, len, trainable) = {
            let p = store(model).get(id);
            (p.name.clone(), p.value.len(), p.trainable)
        };
        if !trainable {
            continue;
        }
        for k in 0..len {
            let orig = store(model).get(id).value.data()[k];
            store(model).get_mut(id).value.data_mut()[k] = orig + FD_STEP;
            let up = loss(model).unwrap().0;
            store(model).get_mut(id).value.data_mut()[k] = orig - FD_STEP;
            let down = loss(model).unwrap().0;
            store(model).get_mut(id).value.data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[k]);
            let rel = rel_err(analytic, numeric, 1e-6);
            if rel > worst.rel {
                worst = Worst {
                    rel,
                    param: name.clone(),
                    index: k,
                    analytic,
                    numeric,
                };
            }
        }
    }
    worst
}

pub fn random_ids(rows: usize, cols: usize, vocab: usize, seed: u64) -> IdBatch {
    let mut rng = rng_from_seed(seed);
    let ids = (0..rows * cols).map(|_| rng.gen_range(0..vocab as u32)).collect();
    IdBatch::new(rows, cols, ids).unwrap()
}

pub fn random_state(dims: &[usize], batch: usize, seed: u64) -> HiddenState<f64> {
    let mut rng = rng_from_seed(seed);
    HiddenState {
        layers: dims
            .iter()
            .map(|&h| {
                (
                    Tensor::uniform(batch, h, 0.5, &mut rng),
                    Tensor::uniform(batch, h, 0.5, &mut rng),
                )
            })
            .collect(),
    }
}

/// Gradient check of the FFNN forward pass on a random small shape.
pub fn ffnn_case(seed: u64) -> Worst {
    let cfg = FfnnConfig {
        vocab_size: 7,
        context_len: 3,
        embed_dim: 4,
        hidden_dim: 5,
        output_size: None,
    };
    let mut model = FfnnModel::<f64>::new(cfg, seed).unwrap();
    randomize(model.params_mut(), 0.5, seed + 1);
    let contexts = random_ids(4, 3, 7, seed + 2);
    let targets: Vec<u32> = random_ids(1, 4, 7, seed + 3).ids().to_vec();
    let worst = check_gradients(
        &mut model,
        |m| m.params_mut(),
        |m| {
            let mut g = m.graph();
            let z = m.forward(&mut g, &contexts)?;
            let l = g.log_softmax_cross_entropy(z, &targets)?;
            let v = g.scalar(l);
            Ok((v, g.backward(l)?))
        },
    );
    worst
}

/// Gradient check of an unrolled LSTM loss from a random initial state.
pub fn lstm_case(dims: Vec<usize>, embed: usize, tie: bool, steps: usize, mode: Mode, seed: u64) -> Worst {
    let vocab = 8;
    let cfg = LstmConfig {
        vocab_size: vocab,
        embed_dim: embed,
        hidden_dims: dims.clone(),
        tie_weights: tie,
        weight_drop_p: 0.3,
        output_size: None,
    };
    let mut model = LstmModel::<f64>::new(cfg, seed).unwrap();
    randomize(model.params_mut(), 0.5, seed + 1);
    let batch = 2;
    let inputs = random_ids(batch, steps, vocab, seed + 2);
    let targets = random_ids(batch, steps, vocab, seed + 3).time_major();
    let state = random_state(&dims, batch, seed + 4);
    let worst = check_gradients(
        &mut model,
        |m| m.params_mut(),
        |m| {
            let mut g = m.graph();
            let (z, _) = m.forward(&mut g, &inputs, &state, mode, 99)?;
            let l = g.log_softmax_cross_entropy(z, &targets)?;
            let v = g.scalar(l);
            Ok((v, g.backward(l)?))
        },
    );
    worst
}
