//! Fixed-architecture multilayer perceptron with a hand-derived backward pass.
//!
//! Rows of a batch are samples. Each layer computes `act(x · W + b)` with `W`
//! stored row-major as `in × out`. The flat parameter layout, used by
//! [`GradBundle`] and the optimizer, is layer by layer: all of `W`, then `b`.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::matrix::{dot, Matrix};
use super::ops::softmax_rows;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `max(0, x)`; the subgradient at 0 is 0.
    Relu,
    Identity,
    Sigmoid,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    #[inline]
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
    softmax_output: bool,
}

/// Flat gradient aligned with an [`Mlp`]'s parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub grad: Vec<f64>,
    pub loss: f64,
}

impl GradBundle {
    pub fn zeros(len: usize) -> Self {
        Self {
            grad: vec![0.0; len],
            loss: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.grad.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grad.is_empty()
    }

    pub fn accumulate(&mut self, other: &GradBundle) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::shape("GradBundle::accumulate", self.len(), other.len()));
        }
        for (a, b) in self.grad.iter_mut().zip(&other.grad) {
            *a += b;
        }
        self.loss += other.loss;
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        dot(&self.grad, &self.grad).sqrt()
    }
}

/// Analytic gradients of one backward pass.
#[derive(Debug, Clone)]
pub struct Backward {
    pub params: GradBundle,
    pub input: Matrix,
}

/// Per-layer values kept from the forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `inputs[l]` is the input of layer `l`; the last entry is the network output.
    pub inputs: Vec<Matrix>,
    pub pre_activations: Vec<Matrix>,
}

impl Trace {
    pub fn output(&self) -> &Matrix {
        self.inputs.last().expect("trace holds at least the input")
    }
}

impl Mlp {
    /// Network with `widths.len() - 1` layers. `activations[l]` applies to
    /// layer `l`. Weights are drawn from `U(-1/√fan_in, 1/√fan_in)`, biases are 0.
    pub fn new<R: Rng + ?Sized>(
        widths: &[usize],
        activations: &[Activation],
        softmax_output: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut mlp = Self::zeros(widths, activations, softmax_output)?;
        for layer in &mut mlp.layers {
            let limit = 1.0 / (layer.weight.rows() as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit)
                .map_err(|e| Error::Config(format!("weight init: {e}")))?;
            for w in layer.weight.values_mut() {
                *w = dist.sample(rng);
            }
        }
        Ok(mlp)
    }

    pub fn zeros(widths: &[usize], activations: &[Activation], softmax_output: bool) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config("an mlp needs at least two widths".into()));
        }
        if activations.len() != widths.len() - 1 {
            return Err(Error::Config(format!(
                "{} layers need {} activations, got {}",
                widths.len() - 1,
                widths.len() - 1,
                activations.len()
            )));
        }
        if widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        let layers = widths
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| Dense {
                weight: Matrix::zeros(w[0], w[1]),
                bias: vec![0.0; w[1]],
                activation,
            })
            .collect();
        Ok(Self {
            layers,
            softmax_output,
        })
    }

    pub fn from_layers(layers: Vec<Dense>, softmax_output: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("an mlp needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].weight.cols() != pair[1].weight.rows() {
                return Err(Error::Config(format!(
                    "layer {i} emits {} values but layer {} expects {}",
                    pair[0].weight.cols(),
                    i + 1,
                    pair[1].weight.rows()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.cols() {
                return Err(Error::Config(format!("layer {i} bias length mismatch")));
            }
        }
        Ok(Self {
            layers,
            softmax_output,
        })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn softmax_output(&self) -> bool {
        self.softmax_output
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].weight.rows()];
        w.extend(self.layers.iter().map(|l| l.weight.cols()));
        w
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.cols()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.rows() * l.weight.cols() + l.bias.len())
            .sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.values());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::shape("Mlp::set_params", self.param_count(), params.len()));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let n = l.weight.values().len();
            l.weight.values_mut().copy_from_slice(&params[offset..offset + n]);
            offset += n;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    pub fn forward(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(self.trace(batch)?.inputs.pop().expect("non-empty trace"))
    }

    pub fn trace(&self, batch: &Matrix) -> Result<Trace> {
        if batch.cols() != self.input_width() {
            return Err(Error::shape("Mlp::forward", self.input_width(), batch.cols()));
        }
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        inputs.push(batch.clone());
        for l in &self.layers {
            let mut z = inputs.last().expect("input present").matmul(&l.weight)?;
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(&l.bias) {
                    *v += b;
                }
            }
            let mut y = z.clone();
            for v in y.values_mut() {
                *v = l.activation.apply(*v);
            }
            pre_activations.push(z);
            inputs.push(y);
        }
        if self.softmax_output {
            let last = inputs.pop().expect("non-empty");
            inputs.push(softmax_rows(&last));
        }
        Ok(Trace {
            inputs,
            pre_activations,
        })
    }

    /// Gradients of `Σ upstream ⊙ forward(batch)` with respect to every
    /// parameter and to the batch.
    pub fn backward(&self, batch: &Matrix, upstream: &Matrix) -> Result<Backward> {
        let trace = self.trace(batch)?;
        self.backward_from_trace(&trace, upstream)
    }

    pub fn backward_from_trace(&self, trace: &Trace, upstream: &Matrix) -> Result<Backward> {
        let out = trace.output();
        if upstream.shape() != out.shape() {
            return Err(Error::shape(
                "Mlp::backward",
                format!("{:?}", out.shape()),
                format!("{:?}", upstream.shape()),
            ));
        }
        let mut delta = if self.softmax_output {
            // dL/dz_j = s_j (u_j - Σ_k u_k s_k)
            let mut d = upstream.clone();
            for r in 0..d.rows() {
                let s = out.row(r);
                let inner = dot(s, upstream.row(r));
                for (dj, &sj) in d.row_mut(r).iter_mut().zip(s) {
                    *dj = sj * (*dj - inner);
                }
            }
            d
        } else {
            upstream.clone()
        };

        let mut grads: Vec<(Matrix, Vec<f64>)> = Vec::with_capacity(self.layers.len());
        for (li, l) in self.layers.iter().enumerate().rev() {
            let z = &trace.pre_activations[li];
            // With softmax the stored output is post-softmax; recompute the
            // activation output for the derivative instead.
            for r in 0..delta.rows() {
                let zr = z.row(r);
                for (d, &zv) in delta.row_mut(r).iter_mut().zip(zr) {
                    *d *= l.activation.derivative(zv, l.activation.apply(zv));
                }
            }
            let x = &trace.inputs[li];
            let dw = x.t_matmul(&delta)?;
            let mut db = vec![0.0; l.bias.len()];
            for r in 0..delta.rows() {
                for (b, d) in db.iter_mut().zip(delta.row(r)) {
                    *b += d;
                }
            }
            let dx = delta.matmul_t(&l.weight)?;
            grads.push((dw, db));
            delta = dx;
        }
        grads.reverse();
        let mut flat = Vec::with_capacity(self.param_count());
        for (dw, db) in grads {
            flat.extend(dw.into_values());
            flat.extend(db);
        }
        Ok(Backward {
            params: GradBundle {
                grad: flat,
                loss: 0.0,
            },
            input: delta,
        })
    }
}

/// `θ ← θ − lr·g`.
pub fn sgd_step(model: &mut Mlp, grads: &GradBundle, lr: f64) -> Result<()> {
    if grads.len() != model.param_count() {
        return Err(Error::shape("sgd_step", model.param_count(), grads.len()));
    }
    let mut offset = 0;
    for l in &mut model.layers {
        for w in l.weight.values_mut() {
            *w -= lr * grads.grad[offset];
            offset += 1;
        }
        for b in &mut l.bias {
            *b -= lr * grads.grad[offset];
            offset += 1;
        }
    }
    Ok(())
}
