use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{AutodiffError, Result};
use crate::kernels::{activate, linear};
use crate::params::ParameterStore;
use crate::tape::{ParamMode, Tape, Var};
use crate::tensor::Tensor;

/// Pointwise nonlinearity applied after every hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    /// `x * sigmoid(x)`
    Silu,
    Sigmoid,
    Tanh,
}

/// Multilayer perceptron description: layer widths `[in, hidden.., out]` and
/// the hidden activation. The output layer is affine.
///
/// Layer `i` owns parameters `layer{i}.weight` (shape `in x out`) and
/// `layer{i}.bias` (length `out`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(AutodiffError::dim(
                "mlp",
                format!("layer sizes {sizes:?} need at least two positive entries"),
            ));
        }
        Ok(Mlp { sizes, activation })
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn weight_name(layer: usize) -> String {
        format!("layer{layer}.weight")
    }

    pub fn bias_name(layer: usize) -> String {
        format!("layer{layer}.bias")
    }

    /// Fresh parameters: weights `N(0, 1/fan_in)`, zero biases.
    pub fn init(&self, seed: u64) -> ParameterStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        for (l, pair) in self.sizes.windows(2).enumerate() {
            let (inp, out) = (pair[0], pair[1]);
            let normal = Normal::new(0.0, (1.0 / inp as f64).sqrt()).expect("positive std");
            let w: Vec<f64> = (0..inp * out).map(|_| normal.sample(&mut rng)).collect();
            store
                .insert(Self::weight_name(l), Tensor::from_raw(vec![inp, out], w))
                .expect("fresh store");
            store
                .insert(Self::bias_name(l), Tensor::zeros(&[out]))
                .expect("fresh store");
        }
        store
    }

    fn layer_params<'a>(&self, params: &'a ParameterStore, l: usize) -> Result<(&'a Tensor, &'a Tensor)> {
        let w = params.get(&Self::weight_name(l))?;
        let b = params.get(&Self::bias_name(l))?;
        let (inp, out) = (self.sizes[l], self.sizes[l + 1]);
        if w.shape() != [inp, out] || b.len() != out {
            return Err(AutodiffError::dim(
                format!("layer{l}"),
                format!(
                    "expected weight {inp}x{out} and bias {out}, found {:?} and {:?}",
                    w.shape(),
                    b.shape()
                ),
            ));
        }
        Ok((w, b))
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.sizes[0] {
            return Err(AutodiffError::dim(
                "layer0",
                format!("input width {cols} does not match expected {}", self.sizes[0]),
            ));
        }
        Ok(())
    }

    /// Tape-free evaluation on a `rows x in` batch.
    pub fn forward(&self, params: &ParameterStore, input: &Tensor) -> Result<Tensor> {
        self.check_input(input.cols())?;
        let rows = input.rows();
        let mut h = input.data().to_vec();
        for l in 0..self.num_layers() {
            let (w, b) = self.layer_params(params, l)?;
            let z = linear(&h, rows, self.sizes[l], w.data(), b.data());
            h = if l + 1 < self.num_layers() {
                activate(self.activation, &z)
            } else {
                z
            };
        }
        Ok(Tensor::from_raw(vec![rows, self.output_width()], h))
    }

    /// Records the evaluation on `tape`, reading parameters in `mode`.
    pub fn record(&self, tape: &mut Tape, params: &ParameterStore, input: Var, mode: ParamMode) -> Result<Var> {
        self.check_input(tape.value(input).cols())?;
        let mut h = input;
        for l in 0..self.num_layers() {
            self.layer_params(params, l)?;
            let w = tape.param(params, params.index_of(&Self::weight_name(l))?, mode)?;
            let b = tape.param(params, params.index_of(&Self::bias_name(l))?, mode)?;
            h = tape.linear(h, w, b)?;
            if l + 1 < self.num_layers() {
                h = tape.activation(h, self.activation);
            }
        }
        Ok(h)
    }
}

/// Evaluates `arch` on `input`, recording onto `record` with trainable
/// parameters when one is supplied. Returns the output and, when recording,
/// its tape handle.
pub fn apply_network(
    params: &ParameterStore,
    arch: &Mlp,
    input: &Tensor,
    record: Option<&mut Tape>,
) -> Result<(Tensor, Option<Var>)> {
    match record {
        None => Ok((arch.forward(params, input)?, None)),
        Some(tape) => {
            arch.check_input(input.cols())?;
            let x = tape.constant(input.clone());
            let y = arch.record(tape, params, x, ParamMode::Trainable)?;
            Ok((tape.value(y).clone(), Some(y)))
        }
    }
}
