//! Forward pass, dropout, loss, and the reverse-mode training step.
//!
//! The network runs in two equivalent forms. [`lstm_forward`] and [`forward`]
//! are plain matrix arithmetic for inference and cross-checking;
//! [`forward_on_tape`] records the same computation on a [`Tape`] so one
//! backward sweep yields exact gradients for every parameter.
//!
//! Layout conventions: a batch of inputs is `batch x (steps * input_dim)`
//! with time-step blocks side by side; hidden states are `batch x units`
//! (or `1 x units` for the single-sequence form). Dropout uses inverted
//! scaling — surviving activations are divided by the keep probability — and
//! applies to what a layer emits downstream, never to its own recurrence.
//! When the spec asks for a rectified final LSTM layer, the ReLU likewise
//! applies to the emitted output only; the cell's internal recurrence keeps
//! the raw hidden state.

use super::model::{Activation, LstmLayerParams, NetworkParams, NetworkSpec, GATE_COUNT};
use super::optimizer::{clip_global_norm, Optimizer};
use super::NnError;
use crate::linalg::{Matrix, NodeId, Tape};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Whether stochastic layers (dropout) are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Recurrent state of one LSTM layer for a single sequence, each `1 x units`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Matrix,
    pub c: Matrix,
}

impl LstmState {
    pub fn zeros(units: usize) -> Self {
        LstmState {
            h: Matrix::zeros(1, units),
            c: Matrix::zeros(1, units),
        }
    }
}

/// Runs one LSTM layer over a single sequence (`steps x input_dim`),
/// returning the hidden outputs (`steps x units`) and the final state.
///
/// Gate order is input, forget, cell candidate, output; the cell update is
/// `c = f*c + i*g`, `h = o * tanh(c)` with sigmoid gates and tanh candidate.
pub fn lstm_forward(
    params: &LstmLayerParams,
    sequence: &Matrix,
    initial: Option<&LstmState>,
) -> (Matrix, LstmState) {
    let units = params.u[0].rows();
    let steps = sequence.rows();
    let mut state = initial.cloned().unwrap_or_else(|| LstmState::zeros(units));
    assert_eq!(state.h.shape(), (1, units));
    assert_eq!(state.c.shape(), (1, units));

    let mut outputs = Matrix::zeros(steps, units);
    for t in 0..steps {
        let x_t = sequence.row_slice(t, 1);
        let mut pre: Vec<Matrix> = Vec::with_capacity(GATE_COUNT);
        for g in 0..GATE_COUNT {
            let mut p = x_t.matmul(&params.w[g]);
            p.add_assign(&state.h.matmul(&params.u[g]));
            p.add_assign(&params.b[g]);
            pre.push(p);
        }
        let i = pre[0].map(sigmoid);
        let f = pre[1].map(sigmoid);
        let g = pre[2].map(f64::tanh);
        let o = pre[3].map(sigmoid);
        state.c = f.hadamard(&state.c).add(&i.hadamard(&g));
        state.h = o.hadamard(&state.c.map(f64::tanh));
        outputs.row_mut(t).copy_from_slice(state.h.row(0));
    }
    (outputs, state)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// An inverted-dropout mask: each entry is `0` with probability `rate`,
/// otherwise `1 / (1 - rate)`. Entries are drawn row-major.
pub fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut ChaCha8Rng) -> Matrix {
    assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
    let scale = 1.0 / (1.0 - rate);
    Matrix::from_fn(
        rows,
        cols,
        |_, _| if rng.random::<f64>() < rate { 0.0 } else { scale },
    )
}

/// Applies inverted dropout to a batch of activations. In evaluation mode or
/// at rate zero this is the identity and consumes no random draws.
pub fn dropout(
    activations: &Matrix,
    rate: f64,
    mode: Mode,
    rng: Option<&mut ChaCha8Rng>,
) -> Matrix {
    if mode == Mode::Eval || rate == 0.0 {
        return activations.clone();
    }
    let rng = rng.expect("dropout in training mode requires a random stream");
    let mask = dropout_mask(activations.rows(), activations.cols(), rate, rng);
    activations.hadamard(&mask)
}

/// Node ids of one LSTM layer's parameters on a tape.
#[derive(Debug, Clone, Copy)]
pub struct TapeLstmNodes {
    pub w: [NodeId; GATE_COUNT],
    pub u: [NodeId; GATE_COUNT],
    pub b: [NodeId; GATE_COUNT],
}

/// Node ids of one dense layer's parameters on a tape.
#[derive(Debug, Clone, Copy)]
pub struct TapeDenseNodes {
    pub w: NodeId,
    pub b: NodeId,
}

/// All network parameters registered as trainable leaves on a tape, in the
/// same canonical order as [`NetworkParams::flat`].
#[derive(Debug, Clone)]
pub struct TapeParams {
    pub lstm: Vec<TapeLstmNodes>,
    pub dense: Vec<TapeDenseNodes>,
}

impl TapeParams {
    pub fn push(tape: &mut Tape, params: &NetworkParams) -> Self {
        let lstm = params
            .lstm
            .iter()
            .map(|layer| TapeLstmNodes {
                w: std::array::from_fn(|g| tape.leaf(layer.w[g].clone())),
                u: std::array::from_fn(|g| tape.leaf(layer.u[g].clone())),
                b: std::array::from_fn(|g| tape.leaf(layer.b[g].clone())),
            })
            .collect();
        let dense = params
            .dense
            .iter()
            .map(|layer| TapeDenseNodes {
                w: tape.leaf(layer.w.clone()),
                b: tape.leaf(layer.b.clone()),
            })
            .collect();
        TapeParams { lstm, dense }
    }

    /// Node ids in canonical flattening order.
    pub fn flat(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for layer in &self.lstm {
            out.extend(layer.w);
            out.extend(layer.u);
            out.extend(layer.b);
        }
        for layer in &self.dense {
            out.push(layer.w);
            out.push(layer.b);
        }
        out
    }
}

/// Result of a recorded forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `batch x output_dim` predictions.
    pub prediction: NodeId,
    /// Hidden outputs of each kernel-attached LSTM layer, in layer order,
    /// taken after any final-layer ReLU but before dropout. Each inner list
    /// holds one entry (the last step) unless the spec taps every step, in
    /// which case it holds one entry per step in time order.
    pub taps: Vec<Vec<NodeId>>,
}

/// Records the full network on the tape: the LSTM stack over all time steps,
/// dropout after each LSTM layer (training mode only), and the dense head on
/// the final layer's last-step output.
///
/// Dropout masks are drawn from `rng` layer-major then step-major, each mask
/// row-major; evaluation mode and zero-rate layers draw nothing, so an
/// evaluation pass never consumes randomness.
pub fn forward_on_tape(
    tape: &mut Tape,
    spec: &NetworkSpec,
    nodes: &TapeParams,
    inputs: &Matrix,
    mode: Mode,
    mut rng: Option<&mut ChaCha8Rng>,
) -> ForwardPass {
    let batch = inputs.rows();
    let d = spec.input_dim;
    assert!(
        d > 0 && inputs.cols() % d == 0 && inputs.cols() > 0,
        "input width {} is not a positive multiple of input_dim {}",
        inputs.cols(),
        d
    );
    let steps = inputs.cols() / d;

    // Per-step slices of the batch as untracked constants.
    let mut seq: Vec<NodeId> = (0..steps)
        .map(|t| {
            let x = Matrix::from_fn(batch, d, |r, c| inputs.get(r, t * d + c));
            tape.constant(x)
        })
        .collect();

    let mut taps = Vec::new();
    let last = spec.lstm_layers.len() - 1;
    for (li, layer) in spec.lstm_layers.iter().enumerate() {
        let ln = nodes.lstm[li];
        let mut h = tape.constant(Matrix::zeros(batch, layer.units));
        let mut c = tape.constant(Matrix::zeros(batch, layer.units));
        let mut emitted: Vec<NodeId> = Vec::with_capacity(steps);
        let mut layer_taps: Vec<NodeId> = Vec::new();
        for (t, &x) in seq.iter().enumerate() {
            let mut pre = Vec::with_capacity(GATE_COUNT);
            for g in 0..GATE_COUNT {
                let xw = tape.matmul(x, ln.w[g]);
                let hu = tape.matmul(h, ln.u[g]);
                let s = tape.add(xw, hu);
                pre.push(tape.add_row_broadcast(s, ln.b[g]));
            }
            let i = tape.sigmoid(pre[0]);
            let f = tape.sigmoid(pre[1]);
            let g = tape.tanh(pre[2]);
            let o = tape.sigmoid(pre[3]);
            let fc = tape.mul_elem(f, c);
            let ig = tape.mul_elem(i, g);
            c = tape.add(fc, ig);
            let tc = tape.tanh(c);
            h = tape.mul_elem(o, tc);

            let mut emit = h;
            if li == last && spec.relu_last_lstm {
                emit = tape.relu(emit);
            }
            if layer.kf_attached && (spec.kf_all_steps || t == steps - 1) {
                layer_taps.push(emit);
            }
            let out = if mode == Mode::Train && layer.dropout_rate > 0.0 {
                let r = rng
                    .as_deref_mut()
                    .expect("dropout in training mode requires a random stream");
                let mask = dropout_mask(batch, layer.units, layer.dropout_rate, r);
                let mask = tape.constant(mask);
                tape.mul_elem(emit, mask)
            } else {
                emit
            };
            emitted.push(out);
        }
        if layer.kf_attached {
            taps.push(layer_taps);
        }
        seq = emitted;
    }

    let mut z = *seq.last().unwrap();
    for (di, layer) in spec.dense_layers.iter().enumerate() {
        let dn = nodes.dense[di];
        let zw = tape.matmul(z, dn.w);
        let zb = tape.add_row_broadcast(zw, dn.b);
        z = match layer.activation {
            Activation::Relu => tape.relu(zb),
            Activation::Linear => zb,
        };
    }
    ForwardPass {
        prediction: z,
        taps,
    }
}

/// Convenience wrapper: runs [`forward_on_tape`] on a scratch tape and
/// returns the prediction and tap values as plain matrices.
pub fn forward(
    spec: &NetworkSpec,
    params: &NetworkParams,
    inputs: &Matrix,
    mode: Mode,
    rng: Option<&mut ChaCha8Rng>,
) -> (Matrix, Vec<Vec<Matrix>>) {
    let mut tape = Tape::new();
    let nodes = TapeParams::push(&mut tape, params);
    let pass = forward_on_tape(&mut tape, spec, &nodes, inputs, mode, rng);
    let prediction = tape.value(pass.prediction).clone();
    let taps = pass
        .taps
        .iter()
        .map(|layer| layer.iter().map(|t| tape.value(*t).clone()).collect())
        .collect();
    (prediction, taps)
}

/// Mean squared error over every entry of the prediction, as a scalar node.
pub fn mse_loss(tape: &mut Tape, prediction: NodeId, targets: &Matrix) -> NodeId {
    assert_eq!(tape.value(prediction).shape(), targets.shape());
    let t = tape.constant(targets.clone());
    let diff = tape.sub(prediction, t);
    let sq = tape.square(diff);
    tape.mean(sq)
}

/// Named (node, parameter) pairs a training step updates together.
#[derive(Default)]
pub struct ParamBindings<'a> {
    names: Vec<String>,
    nodes: Vec<NodeId>,
    params: Vec<&'a mut Matrix>,
}

impl<'a> ParamBindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: impl Into<String>, node: NodeId, param: &'a mut Matrix) {
        self.names.push(name.into());
        self.nodes.push(node);
        self.params.push(param);
    }

    /// Binds every network parameter in canonical order under its block name.
    pub fn bind_network(&mut self, nodes: &TapeParams, params: &'a mut NetworkParams) {
        let names = params.block_names();
        let node_list = nodes.flat();
        let mats = params.flat_mut();
        assert_eq!(names.len(), node_list.len());
        assert_eq!(names.len(), mats.len());
        for ((name, node), mat) in names.into_iter().zip(node_list).zip(mats) {
            self.names.push(name);
            self.nodes.push(node);
            self.params.push(mat);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// What one training step did to the gradients.
#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    /// Joint Euclidean norm before any clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// One training step: backward sweep, finiteness check, optional global-norm
/// clip, optimizer update. Parameters a loss does not reach get zero
/// gradients (and therefore still advance optimizer moments).
pub fn backward_and_step(
    tape: &Tape,
    loss: NodeId,
    mut bindings: ParamBindings<'_>,
    optimizer: &mut Optimizer,
    clip_norm: Option<f64>,
) -> Result<StepReport, NnError> {
    let mut all = tape.backward(loss)?;
    let mut grads = Vec::with_capacity(bindings.len());
    for ((node, name), param) in bindings
        .nodes
        .iter()
        .zip(&bindings.names)
        .zip(&bindings.params)
    {
        let g = all
            .take(*node)
            .unwrap_or_else(|| Matrix::zeros(param.rows(), param.cols()));
        assert_eq!(g.shape(), param.shape(), "gradient shape for {name}");
        if !g.all_finite() {
            return Err(NnError::NonFiniteGradient {
                block: name.clone(),
            });
        }
        grads.push(g);
    }

    let mut clipped = false;
    let grad_norm = match clip_norm {
        Some(c) => {
            let norm = clip_global_norm(&mut grads, c);
            clipped = norm > c;
            norm
        }
        None => grads
            .iter()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt(),
    };
    optimizer.step(bindings.params.as_mut_slice(), &grads);
    Ok(StepReport { grad_norm, clipped })
}
