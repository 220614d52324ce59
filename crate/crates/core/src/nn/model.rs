//! Network shape description, parameter containers, and initialization.
//!
//! A [`NetworkSpec`] is pure description: stacked LSTM layers, a dense head
//! whose last layer is the linear output, optional per-layer dropout, and the
//! kernel-penalty attachment points with their weights. [`NetworkParams`]
//! holds the matching matrices in a fixed flattening order that optimizers,
//! checkpoints, and gradient reports all share.

use super::NnError;
use crate::linalg::Matrix;
use crate::rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Gates per LSTM cell.
pub const GATE_COUNT: usize = 4;

/// Gate order used everywhere in this crate: input, forget, cell candidate,
/// output.
pub const GATE_NAMES: [&str; GATE_COUNT] = ["i", "f", "g", "o"];

/// One recurrent layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmLayerSpec {
    pub units: usize,
    /// Probability of zeroing each hidden activation during training;
    /// must lie in `[0, 1)`.
    #[serde(default)]
    pub dropout_rate: f64,
    /// Whether a kernel regularization layer taps this layer's output.
    #[serde(default)]
    pub kf_attached: bool,
}

/// Dense-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Linear,
}

/// One feed-forward layer; the last one in a spec is the output layer and
/// must be linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayerSpec {
    pub units: usize,
    pub activation: Activation,
}

/// Complete description of a recurrent regressor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Features per time step.
    pub input_dim: usize,
    pub lstm_layers: Vec<LstmLayerSpec>,
    /// Head applied to the final LSTM layer's last-step output; the last
    /// entry is the prediction layer, sized horizon x targets.
    pub dense_layers: Vec<DenseLayerSpec>,
    /// Kernel penalty weights, one per layer with `kf_attached`, in layer
    /// order. Empty means unregularized.
    #[serde(default)]
    pub kf_weights: Vec<f64>,
    /// Pass the final LSTM layer's hidden outputs through ReLU, making its
    /// activations sparse and non-negative.
    #[serde(default)]
    pub relu_last_lstm: bool,
    /// Tap attached layers at every time step instead of only the last one,
    /// so the kernel penalty covers the whole unrolled sequence. Off by
    /// default.
    #[serde(default)]
    pub kf_all_steps: bool,
}

impl NetworkSpec {
    /// Checks internal consistency; every constructor of a trainer calls this.
    pub fn validate(&self) -> Result<(), NnError> {
        let fail = |reason: String| Err(NnError::InvalidSpec { reason });
        if self.input_dim == 0 {
            return fail("input_dim must be positive".into());
        }
        if self.lstm_layers.is_empty() {
            return fail("at least one LSTM layer is required".into());
        }
        for (i, layer) in self.lstm_layers.iter().enumerate() {
            if layer.units == 0 {
                return fail(format!("lstm layer {i} has zero units"));
            }
            if !(0.0..1.0).contains(&layer.dropout_rate) {
                return fail(format!(
                    "lstm layer {i} dropout_rate {} outside [0, 1)",
                    layer.dropout_rate
                ));
            }
        }
        if self.dense_layers.is_empty() {
            return fail("a dense output layer is required".into());
        }
        for (i, layer) in self.dense_layers.iter().enumerate() {
            if layer.units == 0 {
                return fail(format!("dense layer {i} has zero units"));
            }
        }
        if self.dense_layers.last().unwrap().activation != Activation::Linear {
            return fail("the last dense layer must be linear".into());
        }
        let attached = self.attached_layers().len();
        if attached != self.kf_weights.len() {
            return fail(format!(
                "{} kernel weights given for {} attached layers",
                self.kf_weights.len(),
                attached
            ));
        }
        if let Some(w) = self.kf_weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return fail(format!("kernel weight {w} must be finite and >= 0"));
        }
        Ok(())
    }

    /// Indices of LSTM layers with a kernel layer attached, in order.
    pub fn attached_layers(&self) -> Vec<usize> {
        self.lstm_layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kf_attached)
            .map(|(i, _)| i)
            .collect()
    }

    /// Input width of each LSTM layer.
    pub fn lstm_input_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.lstm_layers.len());
        let mut d = self.input_dim;
        for layer in &self.lstm_layers {
            dims.push(d);
            d = layer.units;
        }
        dims
    }

    /// Input width of each dense layer.
    pub fn dense_input_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.dense_layers.len());
        let mut d = self.lstm_layers.last().map(|l| l.units).unwrap_or(0);
        for layer in &self.dense_layers {
            dims.push(d);
            d = layer.units;
        }
        dims
    }

    /// Width of the prediction the network emits.
    pub fn output_dim(&self) -> usize {
        self.dense_layers.last().map(|l| l.units).unwrap_or(0)
    }
}

/// Parameters of one LSTM layer, indexed by [`GATE_NAMES`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmLayerParams {
    /// Input weights per gate, each `input_dim x units`.
    pub w: [Matrix; GATE_COUNT],
    /// Recurrent weights per gate, each `units x units`.
    pub u: [Matrix; GATE_COUNT],
    /// Biases per gate, each `1 x units`.
    pub b: [Matrix; GATE_COUNT],
}

/// Parameters of one dense layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayerParams {
    /// `input_dim x units`.
    pub w: Matrix,
    /// `1 x units`.
    pub b: Matrix,
}

/// All trainable matrices of a network.
///
/// The canonical flattening order — relied on by optimizers and gradient
/// diagnostics — is: for each LSTM layer, the four input weights, then the
/// four recurrent weights, then the four biases, gates in [`GATE_NAMES`]
/// order; then for each dense layer its weight and bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub lstm: Vec<LstmLayerParams>,
    pub dense: Vec<DenseLayerParams>,
}

impl NetworkParams {
    /// Borrows every parameter matrix in canonical order.
    pub fn flat(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for layer in &self.lstm {
            out.extend(layer.w.iter());
            out.extend(layer.u.iter());
            out.extend(layer.b.iter());
        }
        for layer in &self.dense {
            out.push(&layer.w);
            out.push(&layer.b);
        }
        out
    }

    /// Mutably borrows every parameter matrix in canonical order.
    pub fn flat_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for layer in &mut self.lstm {
            out.extend(layer.w.iter_mut());
            out.extend(layer.u.iter_mut());
            out.extend(layer.b.iter_mut());
        }
        for layer in &mut self.dense {
            out.push(&mut layer.w);
            out.push(&mut layer.b);
        }
        out
    }

    /// Human-readable name of each block, aligned with [`NetworkParams::flat`].
    pub fn block_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, _) in self.lstm.iter().enumerate() {
            for kind in ["w", "u", "b"] {
                for gate in GATE_NAMES {
                    out.push(format!("lstm{i}.{kind}_{gate}"));
                }
            }
        }
        for (i, _) in self.dense.iter().enumerate() {
            out.push(format!("dense{i}.w"));
            out.push(format!("dense{i}.b"));
        }
        out
    }

    /// Total scalar parameter count.
    pub fn scalar_count(&self) -> usize {
        self.flat().iter().map(|m| m.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.flat().iter().all(|m| m.all_finite())
    }
}

/// He-normal initialization: every weight entry is drawn from
/// `Normal(0, sqrt(2 / fan_in))` where fan_in is the matrix's input width
/// (the layer input for `w`, the unit count for `u`), and all biases start
/// at zero.
///
/// Draws consume a dedicated stream derived from `seed`, in canonical
/// flattening order with row-major entries, so a fixed seed yields
/// bit-identical parameters across runs and platforms.
pub fn he_normal_init(spec: &NetworkSpec, seed: u64) -> Result<NetworkParams, NnError> {
    spec.validate()?;
    let mut stream = rng::stream(seed, "net-init", 0);
    let mut draw = |rows: usize, cols: usize, fan_in: usize| {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive deviation");
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| normal.sample(&mut stream)).collect(),
        )
    };

    let lstm_dims = spec.lstm_input_dims();
    let lstm = spec
        .lstm_layers
        .iter()
        .zip(&lstm_dims)
        .map(|(layer, &d_in)| {
            let units = layer.units;
            LstmLayerParams {
                w: std::array::from_fn(|_| draw(d_in, units, d_in)),
                u: std::array::from_fn(|_| draw(units, units, units)),
                b: std::array::from_fn(|_| Matrix::zeros(1, units)),
            }
        })
        .collect();

    let dense_dims = spec.dense_input_dims();
    let dense = spec
        .dense_layers
        .iter()
        .zip(&dense_dims)
        .map(|(layer, &d_in)| DenseLayerParams {
            w: draw(d_in, layer.units, d_in),
            b: Matrix::zeros(1, layer.units),
        })
        .collect();

    Ok(NetworkParams { lstm, dense })
}
