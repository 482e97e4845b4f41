//! Dense layers, activations, and the forward/backward sweep shared by the
//! selection decoder and the intent router.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

/// Negative-side slope of every LeakyReLU in the crate.
pub const LEAKY_SLOPE: f64 = 0.01;

pub fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

pub fn leaky_relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `y = x W + b`, with `weight` shaped `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }
}

/// Uniform(-a, a) with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-a..a))
}

/// Intermediate values of an MLP pass; `preacts[k]` is layer `k`'s output
/// before activation, `acts[k]` after (hidden layers only).
#[derive(Debug, Clone)]
pub(crate) struct MlpTrace {
    pub preacts: Vec<Array2<f64>>,
    pub acts: Vec<Array2<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &Array2<f64> {
        self.preacts.last().expect("an MLP has at least one layer")
    }
}

/// Runs the MLP given the first layer's pre-activation. Hidden layers use
/// LeakyReLU; the last layer is linear.
pub(crate) fn forward_from(layers: &[DenseLayer], z0: Array2<f64>) -> MlpTrace {
    let mut trace = MlpTrace {
        preacts: vec![z0],
        acts: Vec::with_capacity(layers.len().saturating_sub(1)),
    };
    for layer in &layers[1..] {
        let a = trace.preacts.last().unwrap().mapv(leaky_relu);
        let z = layer.apply(&a);
        trace.acts.push(a);
        trace.preacts.push(z);
    }
    trace
}

/// Backpropagates `d_out` (gradient at the final pre-activation). Returns
/// gradients for layers `1..` and the gradient at layer 0's pre-activation.
pub(crate) fn backward_from(
    layers: &[DenseLayer],
    trace: &MlpTrace,
    d_out: Array2<f64>,
) -> (Vec<DenseLayer>, Array2<f64>) {
    let mut grads = Vec::with_capacity(layers.len() - 1);
    let mut dz = d_out;
    for k in (1..layers.len()).rev() {
        let a_prev = &trace.acts[k - 1];
        grads.push(DenseLayer {
            weight: a_prev.t().dot(&dz).as_standard_layout().into_owned(),
            bias: dz.sum_axis(Axis(0)),
        });
        let da = dz.dot(&layers[k].weight.t());
        let mut dz_prev = da;
        dz_prev.zip_mut_with(&trace.preacts[k - 1], |d, &z| *d *= leaky_relu_grad(z));
        dz = dz_prev;
    }
    grads.reverse();
    (grads, dz)
}
