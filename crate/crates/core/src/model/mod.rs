//! Desk-scale regression models trained with vanilla SGD on mean squared error.
//!
//! A model is a stack of affine layers `input_dim -> hidden_dims... -> 1`
//! with ReLU between hidden layers and an identity output. `linear` is the
//! degenerate stack with no hidden layers. Layer `i` owns two segments,
//! `layer{i}.weight` with shape `[out, in]` (row-major) followed by
//! `layer{i}.bias` with shape `[out]`.

mod dataset;
mod metrics;
mod params;

use rand::distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub use dataset::{Dataset, Matrix};
pub use metrics::Metrics;
pub use params::{ParameterVector, Segment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelSpec {
    pub fn linear(input_dim: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Linear,
            input_dim,
            hidden_dims: Vec::new(),
            activation: Activation::Relu,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dims: Vec<usize>) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            input_dim,
            hidden_dims,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("input_dim must be positive"));
        }
        match self.kind {
            ModelKind::Linear if !self.hidden_dims.is_empty() => {
                Err(Error::invalid("linear model takes no hidden layers"))
            }
            ModelKind::Mlp if self.hidden_dims.is_empty() => {
                Err(Error::invalid("mlp needs at least one hidden layer"))
            }
            _ if self.hidden_dims.contains(&0) => {
                Err(Error::invalid("hidden layer widths must be positive"))
            }
            _ => Ok(()),
        }
    }

    /// Layer widths from input to the scalar output.
    fn dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(1);
        dims
    }

    pub fn layout(&self) -> Vec<Segment> {
        let dims = self.dims();
        dims.windows(2)
            .enumerate()
            .flat_map(|(i, w)| {
                [
                    Segment::new(format!("layer{i}.weight"), vec![w[1], w[0]]),
                    Segment::new(format!("layer{i}.bias"), vec![w[1]]),
                ]
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.dims().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn check_params(&self, params: &ParameterVector) -> Result<()> {
        if params.layout() != self.layout().as_slice() {
            return Err(Error::invalid(format!(
                "parameter vector of length {} does not match model with {} parameters",
                params.len(),
                self.num_params()
            )));
        }
        Ok(())
    }

    fn check_features(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim {
            return Err(Error::invalid(format!(
                "feature width {cols} does not match input_dim {}",
                self.input_dim
            )));
        }
        Ok(())
    }
}

/// Deterministic initialization: weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))
/// drawn layer by layer in row-major order, biases zero.
pub fn init_model(spec: &ModelSpec, seed: u64) -> ParameterVector {
    let mut rng = rng::seeded(seed);
    let mut values = Vec::with_capacity(spec.num_params());
    for w in spec.dims().windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite positive bound");
        values.extend((0..fan_in * fan_out).map(|_| dist.sample(&mut rng)));
        values.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ParameterVector::new(spec.layout(), values).expect("layout matches generated values")
}

/// Borrowed view of one affine layer inside a flat parameter slice.
struct Layer<'a> {
    inputs: usize,
    outputs: usize,
    weight: &'a [f64],
    bias: &'a [f64],
}

fn layers<'a>(dims: &[usize], values: &'a [f64]) -> Vec<Layer<'a>> {
    let mut offset = 0;
    dims.windows(2)
        .map(|w| {
            let (inputs, outputs) = (w[0], w[1]);
            let weight = &values[offset..offset + inputs * outputs];
            offset += inputs * outputs;
            let bias = &values[offset..offset + outputs];
            offset += outputs;
            Layer {
                inputs,
                outputs,
                weight,
                bias,
            }
        })
        .collect()
}

impl Layer<'_> {
    fn apply(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend((0..self.outputs).map(|o| {
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            self.bias[o] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>()
        }));
    }
}

fn relu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Forward pass for one row, keeping every layer's activations.
/// `acts[0]` is the input, `acts[i + 1]` the output of layer `i`.
fn forward_row(layers: &[Layer<'_>], x: &[f64], acts: &mut Vec<Vec<f64>>) {
    acts.resize_with(layers.len() + 1, Vec::new);
    acts[0].clear();
    acts[0].extend_from_slice(x);
    let last = layers.len() - 1;
    for (i, layer) in layers.iter().enumerate() {
        let (prev, next) = acts.split_at_mut(i + 1);
        layer.apply(&prev[i], &mut next[0]);
        if i != last {
            relu(&mut next[0]);
        }
    }
}

pub fn forward(spec: &ModelSpec, params: &ParameterVector, features: &Matrix) -> Result<Vec<f64>> {
    spec.check_params(params)?;
    spec.check_features(features.cols())?;
    let dims = spec.dims();
    let layers = layers(&dims, params.values());
    let mut acts = Vec::new();
    Ok((0..features.rows())
        .map(|r| {
            forward_row(&layers, features.row(r), &mut acts);
            acts[layers.len()][0]
        })
        .collect())
}

/// Gradient of `(1/m) Σ (ŷ - y)²` over the selected rows, accumulated into `grad`.
pub(crate) fn grad_rows(
    dims: &[usize],
    params: &[f64],
    data: &Dataset,
    rows: &[usize],
    grad: &mut [f64],
) {
    grad.fill(0.0);
    let layers = layers(dims, params);
    let mut acts = Vec::new();
    let mut delta = Vec::new();
    let mut delta_prev = Vec::new();
    let scale = 2.0 / rows.len() as f64;

    // Offsets of each layer's weight block inside `grad`.
    let mut offsets = Vec::with_capacity(layers.len());
    let mut off = 0;
    for l in &layers {
        offsets.push(off);
        off += l.inputs * l.outputs + l.outputs;
    }

    for &r in rows {
        let (x, y) = data.row(r);
        forward_row(&layers, x, &mut acts);
        let yhat = acts[layers.len()][0];
        delta.clear();
        delta.push(scale * (yhat - y));

        for (i, layer) in layers.iter().enumerate().rev() {
            let input = &acts[i];
            let base = offsets[i];
            let (gw, rest) = grad[base..].split_at_mut(layer.inputs * layer.outputs);
            let gb = &mut rest[..layer.outputs];
            for (o, &d) in delta.iter().enumerate() {
                gb[o] += d;
                for (g, a) in gw[o * layer.inputs..(o + 1) * layer.inputs]
                    .iter_mut()
                    .zip(input)
                {
                    *g += d * a;
                }
            }
            if i == 0 {
                break;
            }
            // Back through the weights, then through the ReLU that produced `input`.
            delta_prev.clear();
            delta_prev.resize(layer.inputs, 0.0);
            for (o, &d) in delta.iter().enumerate() {
                let row = &layer.weight[o * layer.inputs..(o + 1) * layer.inputs];
                for (dp, w) in delta_prev.iter_mut().zip(row) {
                    *dp += d * w;
                }
            }
            for (dp, a) in delta_prev.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *dp = 0.0;
                }
            }
            std::mem::swap(&mut delta, &mut delta_prev);
        }
    }
}

/// Exact gradient of the batch mean squared error.
pub fn grad_mse(
    spec: &ModelSpec,
    params: &ParameterVector,
    batch: &Dataset,
) -> Result<ParameterVector> {
    spec.check_params(params)?;
    spec.check_features(batch.dim())?;
    let rows: Vec<usize> = (0..batch.len()).collect();
    let mut grad = ParameterVector::zeros(params.layout().to_vec());
    grad_rows(
        &spec.dims(),
        params.values(),
        batch,
        &rows,
        grad.values_mut(),
    );
    Ok(grad)
}

/// `params - lr * grad`, element-wise.
pub fn sgd_step(
    params: &ParameterVector,
    grad: &ParameterVector,
    lr: f64,
) -> Result<ParameterVector> {
    if !params.same_layout(grad) {
        return Err(Error::invalid(
            "gradient layout differs from parameter layout",
        ));
    }
    let mut out = params.clone();
    apply_step(out.values_mut(), grad.values(), lr);
    Ok(out)
}

pub(crate) fn apply_step(params: &mut [f64], grad: &[f64], lr: f64) {
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= lr * g;
    }
}

/// Mean squared error of the model over `data`.
pub fn loss(spec: &ModelSpec, params: &ParameterVector, data: &Dataset) -> Result<f64> {
    Ok(evaluate(spec, params, data)?.mse)
}

pub fn evaluate(spec: &ModelSpec, params: &ParameterVector, test: &Dataset) -> Result<Metrics> {
    let predictions = forward(spec, params, test.features())?;
    Metrics::compute(&predictions, test.targets())
}

/// Reusable SGD state for the training hot path: one model, one dataset,
/// gradient buffer allocated once.
pub(crate) struct Trainer<'a> {
    dims: Vec<usize>,
    data: &'a Dataset,
    grad: Vec<f64>,
    lr: f64,
}

impl<'a> Trainer<'a> {
    pub fn new(spec: &ModelSpec, data: &'a Dataset, lr: f64) -> Result<Self> {
        spec.validate()?;
        spec.check_features(data.dim())?;
        Ok(Trainer {
            dims: spec.dims(),
            data,
            grad: vec![0.0; spec.num_params()],
            lr,
        })
    }

    /// One SGD update on the given rows.
    pub fn step(&mut self, params: &mut [f64], rows: &[usize]) {
        grad_rows(&self.dims, params, self.data, rows, &mut self.grad);
        apply_step(params, &self.grad, self.lr);
    }
}
