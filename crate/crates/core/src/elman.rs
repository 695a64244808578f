//! Stacked Elman recurrent network.
//!
//! Every hidden layer has its own context units holding that layer's
//! previous activation:
//!
//! ```text
//! h1 = tanh(W_in[1]·x      + W_ctx[1]·c1 + b1)
//! hl = tanh(W_in[l]·h(l-1) + W_ctx[l]·cl + bl)
//! y  = w_out·h_last + b_out
//! ```
//!
//! Training is online SGD over the sequence in temporal order with
//! backpropagation through time truncated to `bptt_depth` steps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ElmanError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("series of length {len} is too short for {lags} lags")]
    TooShort { len: usize, lags: usize },
    #[error("loss became non-finite in epoch {epoch} (learning rate {learning_rate})")]
    NumericalDivergence { epoch: usize, learning_rate: f64 },
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("training data is empty")]
    EmptyData,
    #[error("non-finite value in supervised data at sample {0}")]
    NonFinite(usize),
    #[error("model file: {0}")]
    Serialization(String),
}

type Result<T> = std::result::Result<T, ElmanError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElmanConfig {
    pub num_hidden_layers: usize,
    pub hidden_nodes_per_layer: usize,
    pub input_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub bptt_depth: usize,
    pub seed: u64,
    /// Per-update L2 clipping threshold for the gradient.
    pub grad_clip: f64,
}

impl Default for ElmanConfig {
    fn default() -> Self {
        Self {
            num_hidden_layers: 1,
            hidden_nodes_per_layer: 15,
            input_dim: 7,
            learning_rate: 0.01,
            epochs: 200,
            bptt_depth: 1,
            seed: 0,
            grad_clip: 5.0,
        }
    }
}

impl ElmanConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ElmanError::InvalidConfig(m.to_string()));
        if self.num_hidden_layers == 0 || self.hidden_nodes_per_layer == 0 || self.input_dim == 0 {
            return bad("layer, node and input counts must be >= 1");
        }
        if self.epochs == 0 || self.bptt_depth == 0 {
            return bad("epochs and bptt_depth must be >= 1");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning rate must be positive");
        }
        if !(self.grad_clip > 0.0) {
            return bad("gradient clip must be positive");
        }
        Ok(())
    }
}

/// Offsets of each parameter block inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    layers: Vec<LayerSlots>,
    w_out: usize,
    b_out: usize,
    len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerSlots {
    inputs: usize,
    w_in: usize,
    w_ctx: usize,
    bias: usize,
}

impl Layout {
    fn new(c: &ElmanConfig) -> Self {
        let h = c.hidden_nodes_per_layer;
        let mut off = 0;
        let mut layers = Vec::with_capacity(c.num_hidden_layers);
        for l in 0..c.num_hidden_layers {
            let inputs = if l == 0 { c.input_dim } else { h };
            let w_in = off;
            off += h * inputs;
            let w_ctx = off;
            off += h * h;
            let bias = off;
            off += h;
            layers.push(LayerSlots {
                inputs,
                w_in,
                w_ctx,
                bias,
            });
        }
        let w_out = off;
        off += h;
        let b_out = off;
        off += 1;
        Self {
            layers,
            w_out,
            b_out,
            len: off,
        }
    }
}

/// Context units of every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextState {
    pub layers: Vec<Vec<f64>>,
}

impl ContextState {
    pub fn zeros(config: &ElmanConfig) -> Self {
        Self {
            layers: vec![vec![0.0; config.hidden_nodes_per_layer]; config.num_hidden_layers],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElmanNetwork {
    config: ElmanConfig,
    layout: Layout,
    params: Vec<f64>,
}

impl ElmanNetwork {
    /// Weights uniform in `±1/√fan_in` from the config seed; biases zero.
    pub fn new(config: ElmanConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.len];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let h = config.hidden_nodes_per_layer;
        for l in &layout.layers {
            let bound = 1.0 / ((l.inputs + h) as f64).sqrt();
            for p in &mut params[l.w_in..l.bias] {
                *p = rng.random_range(-bound..=bound);
            }
        }
        let bound = 1.0 / (h as f64).sqrt();
        for p in &mut params[layout.w_out..layout.b_out] {
            *p = rng.random_range(-bound..=bound);
        }
        Ok(Self { config, layout, params })
    }

    /// All parameters zero.
    pub fn zeros(config: ElmanConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let params = vec![0.0; layout.len];
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &ElmanConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Flat parameter vector: per layer `W_in` (row-major, hidden × inputs),
    /// `W_ctx` (hidden × hidden), bias; then `w_out`, `b_out`.
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(ElmanError::DimensionMismatch {
                expected: self.params.len(),
                found: params.len(),
            });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// Mutable views used by tests and hand-built networks.
    pub fn w_in_mut(&mut self, layer: usize) -> &mut [f64] {
        let l = self.layout.layers[layer];
        &mut self.params[l.w_in..l.w_ctx]
    }

    pub fn w_ctx_mut(&mut self, layer: usize) -> &mut [f64] {
        let l = self.layout.layers[layer];
        &mut self.params[l.w_ctx..l.bias]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let l = self.layout.layers[layer];
        let h = self.config.hidden_nodes_per_layer;
        &mut self.params[l.bias..l.bias + h]
    }

    pub fn w_out_mut(&mut self) -> &mut [f64] {
        &mut self.params[self.layout.w_out..self.layout.b_out]
    }

    pub fn set_b_out(&mut self, v: f64) {
        self.params[self.layout.b_out] = v;
    }

    pub fn b_out(&self) -> f64 {
        self.params[self.layout.b_out]
    }

    /// One time step from `state`; returns the output and the next context.
    pub fn forward(&self, input: &[f64], state: &ContextState) -> Result<(f64, ContextState)> {
        self.check_input(input)?;
        let h = self.config.hidden_nodes_per_layer;
        let mut next = Vec::with_capacity(self.layout.layers.len());
        let mut below: Vec<f64> = input.to_vec();
        for (l, ctx) in self.layout.layers.iter().zip(&state.layers) {
            if ctx.len() != h {
                return Err(ElmanError::DimensionMismatch {
                    expected: h,
                    found: ctx.len(),
                });
            }
            let mut out = vec![0.0; h];
            self.layer_forward(l, &below, ctx, &mut out);
            below = out.clone();
            next.push(out);
        }
        let y = self.output(&below);
        Ok((y, ContextState { layers: next }))
    }

    /// Resets the context and runs the inputs in order.
    pub fn predict_sequence(&self, inputs: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut stepper = self.stepper();
        inputs.iter().map(|x| stepper.step(x)).collect()
    }

    /// Stateful single-step runner starting from zero context.
    pub fn stepper(&self) -> Stepper<'_> {
        Stepper {
            net: self,
            state: ContextState::zeros(&self.config),
        }
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.config.input_dim {
            return Err(ElmanError::DimensionMismatch {
                expected: self.config.input_dim,
                found: input.len(),
            });
        }
        Ok(())
    }

    #[inline]
    fn layer_forward(&self, l: &LayerSlots, below: &[f64], ctx: &[f64], out: &mut [f64]) {
        let h = self.config.hidden_nodes_per_layer;
        let w_in = &self.params[l.w_in..l.w_ctx];
        let w_ctx = &self.params[l.w_ctx..l.bias];
        let bias = &self.params[l.bias..l.bias + h];
        for (k, o) in out.iter_mut().enumerate() {
            let a = dot(&w_in[k * l.inputs..(k + 1) * l.inputs], below);
            let b = dot(&w_ctx[k * h..(k + 1) * h], ctx);
            *o = (a + b + bias[k]).tanh();
        }
    }

    #[inline]
    fn output(&self, top: &[f64]) -> f64 {
        let w = &self.params[self.layout.w_out..self.layout.b_out];
        dot(w, top) + self.params[self.layout.b_out]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&SavedNetwork::from(self)).expect("network is serialisable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let saved: SavedNetwork = serde_json::from_str(text).map_err(|e| ElmanError::Serialization(e.to_string()))?;
        saved.into_network()
    }
}

/// Dot product with four independent accumulators, so the reduction is not
/// bound by floating-point add latency.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += a * x`
#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    let n = y.len();
    let x = &x[..n];
    for i in 0..n {
        y[i] += a * x[i];
    }
}

/// `params -= step * grad`, leaving `grad` zeroed for the next step.
#[inline(never)]
fn apply_and_clear(params: &mut [f64], grad: &mut [f64], step: f64) {
    let n = params.len();
    let grad = &mut grad[..n];
    for i in 0..n {
        params[i] -= step * grad[i];
        grad[i] = 0.0;
    }
}

/// Runs a network one step at a time, carrying context between calls.
#[derive(Debug, Clone)]
pub struct Stepper<'a> {
    net: &'a ElmanNetwork,
    state: ContextState,
}

impl Stepper<'_> {
    pub fn step(&mut self, input: &[f64]) -> Result<f64> {
        let (y, next) = self.net.forward(input, &self.state)?;
        self.state = next;
        Ok(y)
    }

    pub fn state(&self) -> &ContextState {
        &self.state
    }
}

// ---------------------------------------------------------------------------
// Supervised samples
// ---------------------------------------------------------------------------

/// Aligned network inputs and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedSequence {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

impl SupervisedSequence {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(ElmanError::DimensionMismatch {
                expected: inputs.len(),
                found: targets.len(),
            });
        }
        if inputs.is_empty() {
            return Err(ElmanError::EmptyData);
        }
        let dim = inputs[0].len();
        for (i, (x, y)) in inputs.iter().zip(&targets).enumerate() {
            if x.len() != dim {
                return Err(ElmanError::DimensionMismatch {
                    expected: dim,
                    found: x.len(),
                });
            }
            if !y.is_finite() || !x.iter().all(|v| v.is_finite()) {
                return Err(ElmanError::NonFinite(i));
            }
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Network input at time `t`: `[lag_1, …, lag_lags, exogenous…]`, where
/// `lag_k` is `history[t - k]`.
pub fn lagged_input(history: &[f64], t: usize, lags: usize, exogenous: &[f64; 3]) -> Vec<f64> {
    let mut x = Vec::with_capacity(lags + 3);
    x.extend((1..=lags).map(|k| history[t - k]));
    x.extend_from_slice(exogenous);
    x
}

/// Samples `t = lags..n` with the component's own lags as inputs.
pub fn build_supervised(component: &[f64], exogenous: &[[f64; 3]], lags: usize) -> Result<SupervisedSequence> {
    build_supervised_from(component, component, exogenous, lags)
}

/// Like [`build_supervised`] but with lags taken from `lag_source`.
pub fn build_supervised_from(
    lag_source: &[f64],
    target: &[f64],
    exogenous: &[[f64; 3]],
    lags: usize,
) -> Result<SupervisedSequence> {
    let n = target.len();
    if lag_source.len() != n || exogenous.len() != n {
        return Err(ElmanError::DimensionMismatch {
            expected: n,
            found: if lag_source.len() != n { lag_source.len() } else { exogenous.len() },
        });
    }
    if lags == 0 || n <= lags {
        return Err(ElmanError::TooShort { len: n, lags });
    }
    let inputs = (lags..n).map(|t| lagged_input(lag_source, t, lags, &exogenous[t])).collect();
    SupervisedSequence::new(inputs, target[lags..].to_vec())
}

// ---------------------------------------------------------------------------
// Truncated BPTT
// ---------------------------------------------------------------------------

/// Activations of the last `depth` steps, stored flat.
struct Trace {
    depth: usize,
    layers: usize,
    hidden: usize,
    input_dim: usize,
    inputs: Vec<f64>,
    contexts: Vec<f64>,
    activations: Vec<f64>,
    head: usize,
    available: usize,
}

impl Trace {
    fn new(config: &ElmanConfig) -> Self {
        let d = config.bptt_depth;
        let lh = config.num_hidden_layers * config.hidden_nodes_per_layer;
        Self {
            depth: d,
            layers: config.num_hidden_layers,
            hidden: config.hidden_nodes_per_layer,
            input_dim: config.input_dim,
            inputs: vec![0.0; d * config.input_dim],
            contexts: vec![0.0; d * lh],
            activations: vec![0.0; d * lh],
            head: 0,
            available: 0,
        }
    }

    fn reset(&mut self) {
        self.available = 0;
    }

    fn slot_input(&self, slot: usize) -> &[f64] {
        &self.inputs[slot * self.input_dim..(slot + 1) * self.input_dim]
    }

    fn block(&self, slot: usize, layer: usize) -> std::ops::Range<usize> {
        let base = (slot * self.layers + layer) * self.hidden;
        base..base + self.hidden
    }

    /// Slot holding the step `back` steps before the newest.
    fn slot_back(&self, back: usize) -> usize {
        (self.head + self.depth - back) % self.depth
    }
}

/// Scratch space for one forward/backward step.
struct Workspace {
    dh: Vec<f64>,
    dh_prev: Vec<f64>,
    dpre: Vec<f64>,
}

impl ElmanNetwork {
    /// Forward step that records activations into `trace`. The context is
    /// the previous step's activations (zero right after a reset).
    fn traced_forward(&self, input: &[f64], trace: &mut Trace, scratch: &mut [f64]) -> f64 {
        let prev = (trace.available > 0).then_some(trace.head);
        let slot = if trace.available > 0 { (trace.head + 1) % trace.depth } else { 0 };
        let d = trace.input_dim;
        trace.inputs[slot * d..(slot + 1) * d].copy_from_slice(input);
        for (li, l) in self.layout.layers.iter().enumerate() {
            let r = trace.block(slot, li);
            match prev {
                Some(p) => {
                    let pr = trace.block(p, li);
                    for k in 0..trace.hidden {
                        trace.contexts[r.start + k] = trace.activations[pr.start + k];
                    }
                }
                None => trace.contexts[r.clone()].fill(0.0),
            }
            let below: &[f64] = if li == 0 {
                &trace.inputs[slot * d..(slot + 1) * d]
            } else {
                &trace.activations[trace.block(slot, li - 1)]
            };
            self.layer_forward(l, below, &trace.contexts[r.clone()], scratch);
            trace.activations[r].copy_from_slice(scratch);
        }
        trace.head = slot;
        trace.available = (trace.available + 1).min(trace.depth);
        let top = trace.block(slot, trace.layers - 1);
        self.output(&trace.activations[top])
    }

    /// Adds the truncated-BPTT gradient of `d_out · output` at the newest
    /// step to `grad`.
    fn accumulate_step_gradient(&self, trace: &Trace, d_out: f64, grad: &mut [f64], ws: &mut Workspace) {
        let h = trace.hidden;
        let nl = trace.layers;
        ws.dh.fill(0.0);
        let top = trace.block(trace.head, nl - 1);
        let w_out = &self.params[self.layout.w_out..self.layout.b_out];
        for k in 0..h {
            grad[self.layout.w_out + k] += d_out * trace.activations[top.start + k];
            ws.dh[(nl - 1) * h + k] = d_out * w_out[k];
        }
        grad[self.layout.b_out] += d_out;

        for back in 0..trace.available {
            let slot = trace.slot_back(back);
            let more = back + 1 < trace.available;
            ws.dh_prev.fill(0.0);
            for li in (0..nl).rev() {
                let l = self.layout.layers[li];
                let act = &trace.activations[trace.block(slot, li)];
                for k in 0..h {
                    ws.dpre[k] = ws.dh[li * h + k] * (1.0 - act[k] * act[k]);
                }
                let below: &[f64] = if li == 0 {
                    trace.slot_input(slot)
                } else {
                    &trace.activations[trace.block(slot, li - 1)]
                };
                let ctx = &trace.contexts[trace.block(slot, li)];
                for k in 0..h {
                    let d = ws.dpre[k];
                    if d == 0.0 {
                        continue;
                    }
                    grad[l.bias + k] += d;
                    let row = l.w_in + k * l.inputs;
                    axpy(&mut grad[row..row + l.inputs], d, below);
                    let row = l.w_ctx + k * h;
                    axpy(&mut grad[row..row + h], d, ctx);
                }
                if li > 0 {
                    let w_in = &self.params[l.w_in..l.w_ctx];
                    for k in 0..h {
                        let row = &w_in[k * l.inputs..(k + 1) * l.inputs];
                        axpy(&mut ws.dh[(li - 1) * h..li * h], ws.dpre[k], row);
                    }
                }
                if more {
                    let w_ctx = &self.params[l.w_ctx..l.bias];
                    for k in 0..h {
                        let row = &w_ctx[k * h..(k + 1) * h];
                        axpy(&mut ws.dh_prev[li * h..(li + 1) * h], ws.dpre[k], row);
                    }
                }
            }
            std::mem::swap(&mut ws.dh, &mut ws.dh_prev);
        }
    }

    fn workspace(&self) -> Workspace {
        let lh = self.config.num_hidden_layers * self.config.hidden_nodes_per_layer;
        Workspace {
            dh: vec![0.0; lh],
            dh_prev: vec![0.0; lh],
            dpre: vec![0.0; self.config.hidden_nodes_per_layer],
        }
    }

    /// Total squared error over `data` and its truncated-BPTT gradient at
    /// the current (fixed) parameters.
    pub fn loss_and_gradient(&self, data: &SupervisedSequence) -> Result<(f64, Vec<f64>)> {
        self.check_data(data)?;
        let mut trace = Trace::new(&self.config);
        let mut ws = self.workspace();
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for (x, y) in data.inputs.iter().zip(&data.targets) {
            let out = self.traced_forward(x, &mut trace, &mut ws.dpre);
            let e = out - y;
            loss += e * e;
            self.accumulate_step_gradient(&trace, 2.0 * e, &mut grad, &mut ws);
        }
        Ok((loss, grad))
    }

    fn check_data(&self, data: &SupervisedSequence) -> Result<()> {
        if data.is_empty() {
            return Err(ElmanError::EmptyData);
        }
        self.check_input(&data.inputs[0])
    }

    /// Online SGD with truncated BPTT; returns the per-epoch MSE.
    pub fn fit(&mut self, data: &SupervisedSequence) -> Result<Vec<f64>> {
        self.check_data(data)?;
        let cfg = self.config.clone();
        let mut trace = Trace::new(&cfg);
        let mut ws = self.workspace();
        let mut grad = vec![0.0; self.params.len()];
        let mut history = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            trace.reset();
            let mut sse = 0.0;
            for (x, y) in data.inputs.iter().zip(&data.targets) {
                let out = self.traced_forward(x, &mut trace, &mut ws.dpre);
                let e = out - y;
                sse += e * e;
                if !e.is_finite() {
                    return Err(ElmanError::NumericalDivergence {
                        epoch,
                        learning_rate: cfg.learning_rate,
                    });
                }
                self.accumulate_step_gradient(&trace, 2.0 * e, &mut grad, &mut ws);
                let norm = dot(&grad, &grad).sqrt();
                let scale = if norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
                let step = cfg.learning_rate * scale;
                apply_and_clear(&mut self.params, &mut grad, step);
            }
            let mse = sse / data.len() as f64;
            if !mse.is_finite() || !self.params.iter().all(|p| p.is_finite()) {
                return Err(ElmanError::NumericalDivergence {
                    epoch,
                    learning_rate: cfg.learning_rate,
                });
            }
            history.push(mse);
        }
        Ok(history)
    }
}

/// Trains a copy of `network` and returns it with the per-epoch MSE.
pub fn train(network: &ElmanNetwork, data: &SupervisedSequence) -> Result<(ElmanNetwork, Vec<f64>)> {
    let mut net = network.clone();
    let history = net.fit(data)?;
    Ok((net, history))
}

/// Truncated total loss used by the finite-difference oracle: the loss at
/// step `t` only sees parameter changes within the last `depth` steps;
/// older context comes from a run with the reference parameters.
fn truncated_loss(net: &ElmanNetwork, data: &SupervisedSequence, frozen: &[ContextState]) -> f64 {
    let depth = net.config.bptt_depth;
    let mut total = 0.0;
    for t in 0..data.len() {
        let first = (t + 1).saturating_sub(depth);
        let mut state = frozen[first].clone();
        let mut out = 0.0;
        for s in first..=t {
            let (y, next) = net.forward(&data.inputs[s], &state).expect("checked dimensions");
            out = y;
            state = next;
        }
        let e = out - data.targets[t];
        total += e * e;
    }
    total
}

/// Compares the BPTT gradient with central finite differences over every
/// parameter and returns the largest `|g - f| / max(1e-8, |g| + |f|)`.
pub fn numerical_gradient_check(network: &ElmanNetwork, data: &SupervisedSequence, epsilon: f64) -> Result<f64> {
    let (_, analytic) = network.loss_and_gradient(data)?;
    let mut frozen = Vec::with_capacity(data.len() + 1);
    let mut state = ContextState::zeros(&network.config);
    frozen.push(state.clone());
    for x in &data.inputs {
        state = network.forward(x, &state)?.1;
        frozen.push(state.clone());
    }
    let mut probe = network.clone();
    let mut worst = 0.0f64;
    for i in 0..network.params.len() {
        let orig = network.params[i];
        probe.params[i] = orig + epsilon;
        let up = truncated_loss(&probe, data, &frozen);
        probe.params[i] = orig - epsilon;
        let down = truncated_loss(&probe, data, &frozen);
        probe.params[i] = orig;
        let fd = (up - down) / (2.0 * epsilon);
        let g = analytic[i];
        let rel = (g - fd).abs() / (g.abs() + fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SavedMatrix {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SavedNetwork {
    format: String,
    config: ElmanConfig,
    matrices: Vec<SavedMatrix>,
}

const NETWORK_FORMAT: &str = "sea-elman/1";

impl SavedNetwork {
    fn shapes(config: &ElmanConfig) -> Vec<(String, usize, usize)> {
        let h = config.hidden_nodes_per_layer;
        let mut v = Vec::new();
        for l in 0..config.num_hidden_layers {
            let inputs = if l == 0 { config.input_dim } else { h };
            v.push((format!("layer{l}.w_in"), h, inputs));
            v.push((format!("layer{l}.w_ctx"), h, h));
            v.push((format!("layer{l}.bias"), h, 1));
        }
        v.push(("output.w".into(), 1, h));
        v.push(("output.b".into(), 1, 1));
        v
    }

    fn into_network(self) -> Result<ElmanNetwork> {
        if self.format != NETWORK_FORMAT {
            return Err(ElmanError::Serialization(format!("unknown format {:?}", self.format)));
        }
        let mut net = ElmanNetwork::zeros(self.config)?;
        let shapes = Self::shapes(&net.config);
        if shapes.len() != self.matrices.len() {
            return Err(ElmanError::Serialization(format!(
                "expected {} matrices, found {}",
                shapes.len(),
                self.matrices.len()
            )));
        }
        let mut params = Vec::with_capacity(net.params.len());
        for ((name, rows, cols), m) in shapes.into_iter().zip(self.matrices) {
            if m.name != name || m.rows != rows || m.cols != cols || m.data.len() != rows * cols {
                return Err(ElmanError::Serialization(format!(
                    "matrix {:?} ({}x{}, {} values) does not match expected {name} ({rows}x{cols})",
                    m.name,
                    m.rows,
                    m.cols,
                    m.data.len()
                )));
            }
            params.extend(m.data);
        }
        if !params.iter().all(|p| p.is_finite()) {
            return Err(ElmanError::Serialization("non-finite parameter".into()));
        }
        net.set_params(&params)?;
        Ok(net)
    }
}

impl From<&ElmanNetwork> for SavedNetwork {
    fn from(net: &ElmanNetwork) -> Self {
        let mut off = 0;
        let matrices = Self::shapes(&net.config)
            .into_iter()
            .map(|(name, rows, cols)| {
                let data = net.params[off..off + rows * cols].to_vec();
                off += rows * cols;
                SavedMatrix { name, rows, cols, data }
            })
            .collect();
        Self {
            format: NETWORK_FORMAT.into(),
            config: net.config.clone(),
            matrices,
        }
    }
}
