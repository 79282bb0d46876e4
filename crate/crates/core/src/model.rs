//! Fully-connected network: weights, forward pass, cross-entropy loss,
//! backpropagation and the SGD update.
//!
//! Batches are laid out one example per row. Layer `l` holds a weight matrix
//! of shape `(d_{l+1}, d_l)` and there are no bias terms; hidden layers use
//! the sigmoid and the output layer a softmax.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::linalg::{
    gemm, hadamard_in_place, sigmoid_deriv_from_output, sigmoid_in_place, softmax_rows,
    AtomicMatrix, LinalgError, Matrix, MatrixSource, MatrixView,
};

/// Probabilities are clamped to this floor before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Shape(#[from] LinalgError),
    #[error("architecture needs at least two layer sizes, all >= 1 (got {0:?})")]
    InvalidArchitecture(Vec<usize>),
    #[error("cannot parse architecture {0:?}")]
    ArchitectureSyntax(String),
    #[error("expected {expected} labels, got {got}")]
    LabelCount { expected: usize, got: usize },
    #[error("label {label} at row {row} is out of range for {classes} classes")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("model has {model} layers but {what} has {other}")]
    LayerCount {
        what: &'static str,
        model: usize,
        other: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    layer_sizes: Vec<usize>,
}

impl Architecture {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self, ModelError> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(ModelError::InvalidArchitecture(layer_sizes));
        }
        Ok(Architecture { layer_sizes })
    }

    /// Parses the dash-separated form used in configs, e.g. `54-64-64-2`.
    pub fn parse(s: &str) -> Result<Self, ModelError> {
        let sizes = s
            .split('-')
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| ModelError::ArchitectureSyntax(s.to_string()))?;
        Architecture::new(sizes)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Number of weight matrices.
    pub fn depth(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1]).sum()
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.layer_sizes.iter().map(|s| s.to_string()).collect();
        f.write_str(&parts.join("-"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitScheme {
    /// Standard deviation equal to the fan-in, taken at face value.
    FanInStd,
    /// Standard deviation `1 / sqrt(fan_in)`.
    #[default]
    ScaledGaussian,
    /// Standard deviation `4 / sqrt(fan_in)`, which keeps the signal alive
    /// through deep stacks of sigmoid layers.
    SigmoidGain,
}

/// Network weights. Storage is word-atomic so one `Model` can be shared by
/// reference between Hogwild threads.
#[derive(Debug, Clone)]
pub struct Model {
    arch: Architecture,
    weights: Vec<AtomicMatrix>,
}

impl Model {
    pub fn init(arch: &Architecture, seed: u64, scheme: InitScheme) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = arch
            .layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = match scheme {
                    InitScheme::FanInStd => fan_in as f64,
                    InitScheme::ScaledGaussian => 1.0 / (fan_in as f64).sqrt(),
                    InitScheme::SigmoidGain => 4.0 / (fan_in as f64).sqrt(),
                };
                let normal = Normal::new(0.0, std).expect("finite positive std");
                let m = Matrix::from_fn(fan_out, fan_in, |_, _| normal.sample(&mut rng));
                AtomicMatrix::from_matrix(&m)
            })
            .collect();
        Model {
            arch: arch.clone(),
            weights,
        }
    }

    pub fn from_weights(arch: &Architecture, weights: Vec<Matrix>) -> Result<Model, ModelError> {
        if weights.len() != arch.depth() {
            return Err(ModelError::LayerCount {
                what: "weight list",
                model: arch.depth(),
                other: weights.len(),
            });
        }
        for (l, w) in weights.iter().enumerate() {
            let expected = (arch.layer_sizes[l + 1], arch.layer_sizes[l]);
            if w.shape() != expected {
                return Err(LinalgError::ShapeMismatch {
                    op: "from_weights",
                    left: expected,
                    right: w.shape(),
                }
                .into());
            }
        }
        Ok(Model {
            arch: arch.clone(),
            weights: weights.iter().map(AtomicMatrix::from_matrix).collect(),
        })
    }

    pub fn zeros(arch: &Architecture) -> Model {
        let weights = arch
            .layer_sizes
            .windows(2)
            .map(|w| AtomicMatrix::zeros(w[1], w[0]))
            .collect();
        Model {
            arch: arch.clone(),
            weights,
        }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn weights(&self) -> &[AtomicMatrix] {
        &self.weights
    }

    /// Independent copy of the current weights.
    pub fn deep_copy(&self) -> Model {
        self.clone()
    }

    /// Overwrites this model's weights with `other`'s, element by element.
    pub fn copy_from(&self, other: &Model) {
        assert_eq!(self.arch, other.arch, "copy between different architectures");
        for (dst, src) in self.weights.iter().zip(&other.weights) {
            for i in 0..dst.len() {
                dst.store(i, src.load(i));
            }
        }
    }

    pub fn snapshot(&self) -> Vec<Matrix> {
        self.weights.iter().map(AtomicMatrix::to_matrix).collect()
    }

    /// True when every weight has the same bit pattern in both models.
    pub fn bitwise_eq(&self, other: &Model) -> bool {
        self.arch == other.arch
            && self.weights.iter().zip(&other.weights).all(|(a, b)| {
                (0..a.len()).all(|i| a.load(i).to_bits() == b.load(i).to_bits())
            })
    }
}

/// Every layer's output for one batch, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ActivationTape<'a> {
    input: MatrixView<'a>,
    activations: Vec<Matrix>,
}

impl<'a> ActivationTape<'a> {
    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }

    pub fn input(&self) -> MatrixView<'a> {
        self.input
    }

    /// Post-activation outputs, hidden layers first, softmax last.
    pub fn activations(&self) -> &[Matrix] {
        &self.activations
    }

    pub fn output(&self) -> &Matrix {
        self.activations.last().expect("tape has at least one layer")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    layers: Vec<Matrix>,
}

impl Gradient {
    pub fn zeros_like(model: &Model) -> Gradient {
        Gradient {
            layers: model
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
        }
    }

    pub fn from_layers(layers: Vec<Matrix>) -> Gradient {
        Gradient { layers }
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Matrix] {
        &mut self.layers
    }

    /// `self += scale * other`, layer by layer.
    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) -> Result<(), ModelError> {
        if self.layers.len() != other.layers.len() {
            return Err(ModelError::LayerCount {
                what: "gradient",
                model: self.layers.len(),
                other: other.layers.len(),
            });
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            crate::linalg::axpy_in_place(a, b, scale)?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Matrix::is_finite)
    }
}

pub fn forward<'a>(model: &Model, batch: MatrixView<'a>) -> Result<ActivationTape<'a>, ModelError> {
    if batch.cols() != model.arch.input_dim() {
        return Err(LinalgError::ShapeMismatch {
            op: "forward",
            left: batch.shape(),
            right: (model.arch.input_dim(), 0),
        }
        .into());
    }
    let depth = model.weights.len();
    let mut activations: Vec<Matrix> = Vec::with_capacity(depth);
    for (l, w) in model.weights.iter().enumerate() {
        let z = match activations.last() {
            None => gemm(&batch, w, false, true)?,
            Some(prev) => gemm(prev, w, false, true)?,
        };
        let out = if l + 1 == depth {
            softmax_rows(&z)
        } else {
            let mut z = z;
            sigmoid_in_place(&mut z);
            z
        };
        activations.push(out);
    }
    Ok(ActivationTape {
        input: batch,
        activations,
    })
}

fn check_labels(tape: &ActivationTape<'_>, labels: &[usize]) -> Result<(), ModelError> {
    let out = tape.output();
    if labels.len() != out.rows() {
        return Err(ModelError::LabelCount {
            expected: out.rows(),
            got: labels.len(),
        });
    }
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= out.cols()) {
        return Err(ModelError::LabelOutOfRange {
            row,
            label,
            classes: out.cols(),
        });
    }
    Ok(())
}

/// Sum over the batch of `-ln p[label]`, summed in row order.
pub fn loss_sum(tape: &ActivationTape<'_>, labels: &[usize]) -> Result<f64, ModelError> {
    check_labels(tape, labels)?;
    let out = tape.output();
    let mut sum = 0.0;
    for (row, &label) in labels.iter().enumerate() {
        sum += -out.get(row, label).max(PROB_FLOOR).ln();
    }
    Ok(sum)
}

/// Mean cross-entropy over the batch.
pub fn cross_entropy_loss(tape: &ActivationTape<'_>, labels: &[usize]) -> Result<f64, ModelError> {
    Ok(loss_sum(tape, labels)? / labels.len() as f64)
}

/// Gradient of the mean cross-entropy with respect to every weight matrix.
///
/// Weights are read from `model` while propagating the error, so under
/// Hogwild sharing the backward pass may see weights newer than the forward
/// pass did.
pub fn backward(model: &Model, tape: &ActivationTape<'_>, labels: &[usize]) -> Result<Gradient, ModelError> {
    check_labels(tape, labels)?;
    let depth = model.weights.len();
    if tape.activations.len() != depth {
        return Err(ModelError::LayerCount {
            what: "activation tape",
            model: depth,
            other: tape.activations.len(),
        });
    }
    let n = tape.batch_size() as f64;

    // softmax + cross-entropy: dL/dz = (p - onehot) / n
    let mut delta = tape.output().clone();
    for (row, &label) in labels.iter().enumerate() {
        let p = delta.get(row, label);
        delta.set(row, label, p - 1.0);
    }
    for v in delta.as_mut_slice() {
        *v /= n;
    }

    let mut layers = vec![Matrix::zeros(0, 0); depth];
    for l in (0..depth).rev() {
        let grad = if l == 0 {
            gemm(&delta, &tape.input, true, false)?
        } else {
            gemm(&delta, &tape.activations[l - 1], true, false)?
        };
        let w = &model.weights[l];
        if grad.shape() != w.shape() {
            return Err(LinalgError::ShapeMismatch {
                op: "backward",
                left: w.shape(),
                right: grad.shape(),
            }
            .into());
        }
        layers[l] = grad;
        if l > 0 {
            let mut next = gemm(&delta, w, false, false)?;
            hadamard_in_place(&mut next, &sigmoid_deriv_from_output(&tape.activations[l - 1]))?;
            delta = next;
        }
    }
    Ok(Gradient { layers })
}

/// `W <- W - eta * g` for every layer.
pub fn apply_update(model: &Model, grad: &Gradient, eta: f64) -> Result<(), ModelError> {
    if grad.layers.len() != model.weights.len() {
        return Err(ModelError::LayerCount {
            what: "gradient",
            model: model.weights.len(),
            other: grad.layers.len(),
        });
    }
    for (w, g) in model.weights.iter().zip(&grad.layers) {
        w.axpy(g, -eta)?;
    }
    Ok(())
}

/// Forward, loss, backward on one batch. Returns the gradient and the
/// batch loss (before the update).
pub fn gradient_on_batch(
    model: &Model,
    batch: MatrixView<'_>,
    labels: &[usize],
) -> Result<(Gradient, f64), ModelError> {
    let tape = forward(model, batch)?;
    let loss = cross_entropy_loss(&tape, labels)?;
    let grad = backward(model, &tape, labels)?;
    Ok((grad, loss))
}
