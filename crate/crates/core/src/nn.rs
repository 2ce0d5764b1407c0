//! Fully connected feed-forward networks with sigmoid hidden layers and one
//! linear output node, trained by backpropagating a loss subgradient.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataset::{Dataset, Row};
use crate::error::{Error, Result};
use crate::loss::LossSpec;
use crate::train::{partition, rng_for, EarlyStopping, Optimizer, StopReason, TrainConfig, TrainTrace, Verdict};

/// Network parameters. `weights[l]` maps layer `l` to layer `l + 1` and is
/// stored row-major with shape `layer_sizes[l + 1] x layer_sizes[l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Cached forward quantities and (after [`backward`]) the per-layer deltas.
///
/// Index 0 of `activations` is the input; `pre_activations[l]` and `deltas[l]`
/// belong to layer `l + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackpropState {
    pub activations: Vec<Vec<f64>>,
    pub pre_activations: Vec<Vec<f64>>,
    pub deltas: Vec<Vec<f64>>,
}

/// Gradients with the same shapes as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Gradients {
            weights: model.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    fn clear(&mut self) {
        self.weights.iter_mut().flatten().for_each(|g| *g = 0.0);
        self.biases.iter_mut().flatten().for_each(|g| *g = 0.0);
    }

    /// Parameters flattened as all weights, then all biases, layer by layer.
    pub fn flatten(&self) -> Vec<f64> {
        self.weights
            .iter()
            .flatten()
            .chain(self.biases.iter().flatten())
            .copied()
            .collect()
    }
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

impl MlpModel {
    /// All-zero parameters.
    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        check_arch(layer_sizes)?;
        let weights = layer_sizes
            .windows(2)
            .map(|w| vec![0.0; w[0] * w[1]])
            .collect();
        let biases = layer_sizes[1..].iter().map(|&k| vec![0.0; k]).collect();
        Ok(MlpModel {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
        })
    }

    /// Glorot-uniform weights in `[-r, r]`, `r = sqrt(6 / (fan_in + fan_out))`,
    /// and zero biases.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        let mut model = MlpModel::zeros(layer_sizes)?;
        let mut rng = rng_for(seed);
        for (l, w) in model.weights.iter_mut().enumerate() {
            let r = (6.0 / (layer_sizes[l] + layer_sizes[l + 1]) as f64).sqrt();
            for v in w.iter_mut() {
                *v = rng.random_range(-r..=r);
            }
        }
        Ok(model)
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Parameters flattened in the same order as [`Gradients::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        self.weights
            .iter()
            .flatten()
            .chain(self.biases.iter().flatten())
            .copied()
            .collect()
    }

    pub fn new_state(&self) -> BackpropState {
        BackpropState {
            activations: self.layer_sizes.iter().map(|&k| vec![0.0; k]).collect(),
            pre_activations: self.layer_sizes[1..].iter().map(|&k| vec![0.0; k]).collect(),
            deltas: self.layer_sizes[1..].iter().map(|&k| vec![0.0; k]).collect(),
        }
    }

    fn forward_into(&self, x: &[f64], state: &mut BackpropState) -> f64 {
        state.activations[0].copy_from_slice(x);
        let last = self.n_layers() - 1;
        for l in 0..self.n_layers() {
            let fan_in = self.layer_sizes[l];
            let (prev, next) = state.activations.split_at_mut(l + 1);
            let input = &prev[l];
            let out = &mut next[0];
            let w = &self.weights[l];
            for j in 0..self.layer_sizes[l + 1] {
                let row = &w[j * fan_in..(j + 1) * fan_in];
                let z: f64 = row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()
                    + self.biases[l][j];
                state.pre_activations[l][j] = z;
                out[j] = if l == last { z } else { sigmoid(z) };
            }
        }
        state.activations[last + 1][0]
    }

    /// Accumulates `scale * dL/dparams` into `grads` given `dloss = dL/dy`.
    fn backward_into(&self, state: &mut BackpropState, dloss: f64, scale: f64, grads: &mut Gradients) {
        let last = self.n_layers() - 1;
        state.deltas[last][0] = dloss;
        for l in (0..self.n_layers()).rev() {
            let fan_in = self.layer_sizes[l];
            let fan_out = self.layer_sizes[l + 1];
            if l > 0 {
                let (lower, upper) = state.deltas.split_at_mut(l);
                let below = &mut lower[l - 1];
                let here = &upper[0];
                for k in 0..fan_in {
                    let mut acc = 0.0;
                    for j in 0..fan_out {
                        acc += self.weights[l][j * fan_in + k] * here[j];
                    }
                    let a = state.activations[l][k];
                    below[k] = acc * a * (1.0 - a);
                }
            }
            let delta = &state.deltas[l];
            let input = &state.activations[l];
            let gw = &mut grads.weights[l];
            for j in 0..fan_out {
                let d = delta[j] * scale;
                if d == 0.0 {
                    continue;
                }
                for (g, a) in gw[j * fan_in..(j + 1) * fan_in].iter_mut().zip(input) {
                    *g += d * a;
                }
                grads.biases[l][j] += d;
            }
        }
    }

    pub fn predict(&self, features: &[f64]) -> Result<f64> {
        forward(self, features).map(|(y, _)| y)
    }

    pub fn predict_all(&self, dataset: &Dataset) -> Result<Vec<f64>> {
        let mut state = self.new_state();
        dataset
            .rows
            .iter()
            .map(|r| {
                self.check_input(&r.features)?;
                Ok(self.forward_into(&r.features, &mut state))
            })
            .collect()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Text record: `mlp <sizes...>` then, per layer, one line of row-major
    /// weights and one line of biases (17 significant digits).
    pub fn to_text(&self) -> String {
        let mut out = String::from("mlp");
        for s in &self.layer_sizes {
            out.push_str(&format!(" {s}"));
        }
        out.push('\n');
        for (w, b) in self.weights.iter().zip(&self.biases) {
            let line = |vals: &[f64]| {
                vals.iter()
                    .map(|v| format!("{v:.16e}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            out.push_str(&line(w));
            out.push('\n');
            out.push_str(&line(b));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let bad = |row: usize, msg: String| Error::Parse { row, msg };
        let (hrow, header) = lines.next().ok_or_else(|| bad(1, "empty model file".into()))?;
        let mut toks = header.split_whitespace();
        if toks.next() != Some("mlp") {
            return Err(bad(hrow + 1, "expected `mlp` header".into()));
        }
        let sizes = toks
            .map(|t| t.parse::<usize>().map_err(|_| bad(hrow + 1, format!("bad layer size `{t}`"))))
            .collect::<Result<Vec<usize>>>()?;
        let mut model = MlpModel::zeros(&sizes).map_err(|e| bad(hrow + 1, e.to_string()))?;
        let mut read = |expected: usize, dst: &mut Vec<f64>| -> Result<()> {
            let (row, line) = lines
                .next()
                .ok_or_else(|| bad(0, "truncated model file".into()))?;
            let vals = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| bad(row + 1, format!("non-numeric `{t}`"))))
                .collect::<Result<Vec<f64>>>()?;
            if vals.len() != expected {
                return Err(bad(row + 1, format!("expected {expected} values, got {}", vals.len())));
            }
            *dst = vals;
            Ok(())
        };
        for l in 0..model.weights.len() {
            let nw = model.weights[l].len();
            let nb = model.biases[l].len();
            read(nw, &mut model.weights[l])?;
            read(nb, &mut model.biases[l])?;
        }
        Ok(model)
    }
}

fn check_arch(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 {
        return Err(Error::Config("a network needs at least an input and an output layer".into()));
    }
    if sizes.contains(&0) {
        return Err(Error::Config("layer sizes must be positive".into()));
    }
    if *sizes.last().expect("nonempty") != 1 {
        return Err(Error::Config("the output layer must have exactly one node".into()));
    }
    Ok(())
}

/// Forward pass: sigmoid hidden layers, identity output.
pub fn forward(model: &MlpModel, features: &[f64]) -> Result<(f64, BackpropState)> {
    model.check_input(features)?;
    let mut state = model.new_state();
    let y = model.forward_into(features, &mut state);
    Ok((y, state))
}

/// Backpropagates the loss subgradient at `(s, y)`; fills `state.deltas`.
pub fn backward(
    model: &MlpModel,
    state: &mut BackpropState,
    s: f64,
    spec: &LossSpec,
) -> Result<Gradients> {
    let shapes_match = state.activations.len() == model.layer_sizes.len()
        && state
            .activations
            .iter()
            .zip(&model.layer_sizes)
            .all(|(a, &k)| a.len() == k)
        && state.deltas.len() == model.weights.len();
    if !shapes_match {
        return Err(Error::Input("backprop state does not match the model".into()));
    }
    let y = *state.activations.last().and_then(|a| a.first()).expect("output node");
    let dloss = spec.eval(s, y).subgrad;
    let mut grads = Gradients::zeros_like(model);
    model.backward_into(state, dloss, 1.0, &mut grads);
    Ok(grads)
}

fn mean_loss(model: &MlpModel, dataset: &Dataset, idx: &[usize], spec: &LossSpec, state: &mut BackpropState) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    let total: f64 = idx
        .iter()
        .map(|&i| {
            let row = &dataset.rows[i];
            let y = model.forward_into(&row.features, state);
            spec.eval(row.sale, y).value
        })
        .sum();
    total / idx.len() as f64
}

struct AdamState {
    m: Gradients,
    v: Gradients,
    t: i32,
}

fn apply_update(
    model: &mut MlpModel,
    grads: &Gradients,
    eta: f64,
    optimizer: &Optimizer,
    adam: &mut Option<AdamState>,
) {
    match optimizer {
        Optimizer::Sgd => {
            for (w, g) in model.weights.iter_mut().flatten().zip(grads.weights.iter().flatten()) {
                *w -= eta * g;
            }
            for (b, g) in model.biases.iter_mut().flatten().zip(grads.biases.iter().flatten()) {
                *b -= eta * g;
            }
        }
        Optimizer::Adam {
            beta1,
            beta2,
            epsilon,
        } => {
            let st = adam.get_or_insert_with(|| AdamState {
                m: Gradients::zeros_like(model),
                v: Gradients::zeros_like(model),
                t: 0,
            });
            st.t += 1;
            let c1 = 1.0 - beta1.powi(st.t);
            let c2 = 1.0 - beta2.powi(st.t);
            let step = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= eta * mh / (vh.sqrt() + epsilon);
            };
            let params = model.weights.iter_mut().flatten().chain(model.biases.iter_mut().flatten());
            let gs = grads.weights.iter().flatten().chain(grads.biases.iter().flatten());
            let ms = st.m.weights.iter_mut().flatten().chain(st.m.biases.iter_mut().flatten());
            let vs = st.v.weights.iter_mut().flatten().chain(st.v.biases.iter_mut().flatten());
            for (((p, g), m), v) in params.zip(gs).zip(ms).zip(vs) {
                step(p, *g, m, v);
            }
        }
    }
}

/// One pass over `order` in mini-batches of `batch_size`, averaging gradients
/// within each batch. Returns the index of the first batch that produced a
/// non-finite parameter, if any.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    model: &mut MlpModel,
    dataset: &Dataset,
    order: &[usize],
    batch_size: usize,
    spec: &LossSpec,
    eta: f64,
    optimizer: &Optimizer,
    adam: &mut Option<AdamState>,
    state: &mut BackpropState,
    grads: &mut Gradients,
) -> Option<usize> {
    for (b, batch) in order.chunks(batch_size).enumerate() {
        grads.clear();
        let scale = 1.0 / batch.len() as f64;
        let mut any = false;
        for &i in batch {
            let row = &dataset.rows[i];
            let y = model.forward_into(&row.features, state);
            let d = spec.eval(row.sale, y).subgrad;
            if d != 0.0 {
                any = true;
                model.backward_into(state, d, scale, grads);
            }
        }
        if any || matches!(optimizer, Optimizer::Adam { .. }) {
            apply_update(model, grads, eta, optimizer, adam);
        }
        if model.biases.last().is_some_and(|b| !b[0].is_finite()) {
            return Some(b);
        }
    }
    None
}

/// Mini-batch SGD (or Adam) with backpropagation.
///
/// Initial weights come from `config.seed`; the mini-batch order is a single
/// permutation of the training partition drawn once per run and reused every
/// epoch. Early stopping and best-snapshot selection follow [`crate::linear::fit_gd`].
pub fn fit_sgd(
    dataset: &Dataset,
    spec: &LossSpec,
    arch: &[usize],
    config: &TrainConfig,
) -> Result<(MlpModel, TrainTrace)> {
    let start = Instant::now();
    spec.validate()?;
    if dataset.is_empty() {
        return Err(Error::Input("cannot train on an empty dataset".into()));
    }
    let p = dataset.dim()?;
    check_arch(arch)?;
    if arch[0] != p {
        return Err(Error::Dimension {
            expected: p,
            got: arch[0],
        });
    }
    let mut model = MlpModel::init(arch, config.seed)?;
    let mut rng = rng_for(config.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let mut part = partition(dataset.len(), config, &mut rng);
    config.validate(part.train.len())?;
    part.train.shuffle(&mut rng);

    let mut state = model.new_state();
    let mut grads = Gradients::zeros_like(&model);
    let mut adam = None;
    let mut best = model.clone();
    let mut trace = TrainTrace::empty();
    let initial = mean_loss(&model, dataset, &part.val, spec, &mut state);
    let mut stopper = EarlyStopping::new(config, initial);

    for epoch in 1..=config.max_epochs {
        if let Some(batch) = run_epoch(
            &mut model,
            dataset,
            &part.train,
            config.batch_size,
            spec,
            config.eta,
            &config.optimizer,
            &mut adam,
            &mut state,
            &mut grads,
        ) {
            return Err(Error::Divergence {
                epoch,
                batch: Some(batch),
            });
        }
        let train_loss = mean_loss(&model, dataset, &part.train, spec, &mut state);
        let val_loss = mean_loss(&model, dataset, &part.val, spec, &mut state);
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Divergence { epoch, batch: None });
        }
        trace.train_loss.push(train_loss);
        trace.val_loss.push(val_loss);
        match stopper.observe(val_loss) {
            Verdict::Improved => {
                best.clone_from(&model);
                trace.best_epoch = epoch;
            }
            Verdict::Continue => {}
            Verdict::ImprovedAndStop(reason) => {
                best.clone_from(&model);
                trace.best_epoch = epoch;
                trace.stop_reason = reason;
                break;
            }
            Verdict::Stop(reason) => {
                trace.stop_reason = reason;
                break;
            }
        }
        if epoch == config.max_epochs {
            trace.stop_reason = StopReason::MaxEpochs;
        }
    }
    trace.fit_seconds = start.elapsed().as_secs_f64();
    Ok((best, trace))
}

/// Runs `k_passes` epochs of constant-rate SGD over all rows in a fixed order,
/// without validation or early stopping.
pub fn sgd_passes(
    dataset: &Dataset,
    spec: &LossSpec,
    arch: &[usize],
    config: &TrainConfig,
    order: &[usize],
    k_passes: usize,
) -> Result<MlpModel> {
    check_arch(arch)?;
    let mut model = MlpModel::init(arch, config.seed)?;
    let mut state = model.new_state();
    let mut grads = Gradients::zeros_like(&model);
    let mut adam = None;
    for epoch in 1..=k_passes {
        if let Some(batch) = run_epoch(
            &mut model,
            dataset,
            order,
            config.batch_size,
            spec,
            config.eta,
            &Optimizer::Sgd,
            &mut adam,
            &mut state,
            &mut grads,
        ) {
            return Err(Error::Divergence {
                epoch,
                batch: Some(batch),
            });
        }
    }
    Ok(model)
}

/// Euclidean parameter distance between networks trained on `S` and on `S'`,
/// where `S'` has row `swap_index` replaced by `replacement` (or is identical
/// when `replacement` is `None`). Both runs share the initialisation, the fixed
/// permutation and the constant learning rate.
pub fn uas_probe(
    dataset: &Dataset,
    spec: &LossSpec,
    arch: &[usize],
    config: &TrainConfig,
    swap_index: usize,
    replacement: Option<&Row>,
    k_passes: usize,
) -> Result<f64> {
    if swap_index >= dataset.len() {
        return Err(Error::Input(format!(
            "swap index {swap_index} out of range for {} rows",
            dataset.len()
        )));
    }
    spec.validate()?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = rng_for(config.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);

    let original = sgd_passes(dataset, spec, arch, config, &order, k_passes)?;
    let mut swapped = dataset.clone();
    if let Some(row) = replacement {
        if row.features.len() != dataset.dim()? {
            return Err(Error::Dimension {
                expected: dataset.dim()?,
                got: row.features.len(),
            });
        }
        swapped.rows[swap_index] = row.clone();
    }
    let other = sgd_passes(&swapped, spec, arch, config, &order, k_passes)?;
    Ok(original
        .flatten()
        .iter()
        .zip(other.flatten())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// Right-hand side `2 max(a, 1-a) (eta sqrt(nK) + 2 eta K)` of the UAS bound.
pub fn uas_bound(alpha: f64, eta: f64, n: usize, k_passes: usize) -> f64 {
    let lip = alpha.max(1.0 - alpha);
    let nk = (n * k_passes) as f64;
    2.0 * lip * (eta * nk.sqrt() + 2.0 * eta * k_passes as f64)
}
