//! Multilayer perceptron with hand-written backpropagation.
//!
//! Parameters live in one flat [`ParamVector`]. Layer `l` occupies
//! `in_l * out_l` weights (row-major, `in x out`) followed by `out_l` biases.
//! Hidden layers use ReLU; the output layer is linear.

use ndarray::{s, Array1, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::math::{Matrix, ParamVector};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// `0.5 * |y_hat - y|^2` per sample.
    SquaredError,
    /// Softmax followed by negative log-likelihood of the class index.
    SoftmaxCrossEntropy,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Real-valued targets, `B x k`.
    Values(Matrix),
    /// Class indices in `0..k`.
    Classes(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Values(m) => m.nrows(),
            Targets::Classes(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Samples from a single domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainBatch {
    pub inputs: Matrix,
    pub targets: Targets,
    pub domain_id: usize,
}

impl DomainBatch {
    pub fn new(inputs: Matrix, targets: Targets, domain_id: usize) -> Result<Self> {
        check_len(inputs.nrows(), targets.len())?;
        if inputs.nrows() == 0 {
            return Err(Error::InsufficientSamples { needed: 1, got: 0 });
        }
        Ok(Self {
            inputs,
            targets,
            domain_id,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Activations recorded by [`MlpModel::forward_pass`] for a later backward.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `activations[0]` is the input, `activations[l]` the output of layer `l`
    /// (post-ReLU for hidden layers, raw for the output layer).
    activations: Vec<Matrix>,
    /// Pre-activation of each layer.
    preacts: Vec<Matrix>,
}

impl ForwardPass {
    pub fn outputs(&self) -> &Matrix {
        self.activations.last().expect("at least the input is cached")
    }

    /// Penultimate activations: the input to the output layer.
    pub fn features(&self) -> &Matrix {
        &self.activations[self.activations.len() - 2]
    }

    /// Pre-activations of every layer, the output layer last.
    pub fn preactivations(&self) -> &[Matrix] {
        &self.preacts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    loss: Loss,
    params: ParamVector,
}

impl MlpModel {
    /// Number of parameters for `layer_dims`.
    pub fn param_count_for(layer_dims: &[usize]) -> usize {
        layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Zero-initialized model.
    pub fn zeros(layer_dims: &[usize], loss: Loss) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::param(
                "layer_dims",
                format!("need >= 2 positive widths, got {layer_dims:?}"),
            ));
        }
        Ok(Self {
            params: ParamVector::zeros(Self::param_count_for(layer_dims)),
            layer_dims: layer_dims.to_vec(),
            loss,
        })
    }

    /// Weights and biases uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init(layer_dims: &[usize], loss: Loss, rng: &mut Rng) -> Result<Self> {
        let mut model = Self::zeros(layer_dims, loss)?;
        let mut offset = 0;
        for w in layer_dims.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let n = w[0] * w[1] + w[1];
            for v in &mut model.params[offset..offset + n] {
                *v = rng.uniform_range(-bound, bound);
            }
            offset += n;
        }
        Ok(model)
    }

    pub fn from_params(layer_dims: &[usize], loss: Loss, params: ParamVector) -> Result<Self> {
        let mut model = Self::zeros(layer_dims, loss)?;
        model.set_params(params)?;
        Ok(model)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn loss_kind(&self) -> Loss {
        self.loss
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    /// Width of the penultimate activations.
    pub fn feature_dim(&self) -> usize {
        self.layer_dims[self.layer_dims.len() - 2]
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn set_params(&mut self, params: ParamVector) -> Result<()> {
        check_len(self.params.len(), params.len())?;
        params.ensure_finite("model parameters")?;
        self.params = params;
        Ok(())
    }

    /// `theta <- theta - lr * update`.
    pub fn apply_update(&mut self, lr: f64, update: &ParamVector) -> Result<()> {
        check_len(self.params.len(), update.len())?;
        let mut next = self.params.clone();
        next.axpy_in_place(-lr, update)?;
        self.set_params(next)
    }

    fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    fn layer_offset(&self, layer: usize) -> usize {
        Self::param_count_for(&self.layer_dims[..=layer])
    }

    fn weights(&self, layer: usize) -> ArrayView2<'_, f64> {
        let (fan_in, fan_out) = (self.layer_dims[layer], self.layer_dims[layer + 1]);
        let start = self.layer_offset(layer);
        ArrayView2::from_shape((fan_in, fan_out), &self.params[start..start + fan_in * fan_out])
            .expect("layout is consistent with layer_dims")
    }

    fn biases(&self, layer: usize) -> ArrayView1<'_, f64> {
        let (fan_in, fan_out) = (self.layer_dims[layer], self.layer_dims[layer + 1]);
        let start = self.layer_offset(layer) + fan_in * fan_out;
        ArrayView1::from(&self.params[start..start + fan_out])
    }

    /// Runs the network and keeps every activation for [`Self::backward`].
    pub fn forward_pass(&self, inputs: &Matrix) -> Result<ForwardPass> {
        check_len(self.input_dim(), inputs.ncols())?;
        let layers = self.num_layers();
        let mut activations = Vec::with_capacity(layers + 1);
        let mut preacts = Vec::with_capacity(layers);
        activations.push(inputs.clone());
        for l in 0..layers {
            let z = activations[l].dot(&self.weights(l)) + &self.biases(l);
            let a = if l + 1 < layers {
                z.mapv(|v| v.max(0.0))
            } else {
                z.clone()
            };
            preacts.push(z);
            activations.push(a);
        }
        Ok(ForwardPass {
            activations,
            preacts,
        })
    }

    /// Network outputs and penultimate features for a batch of inputs.
    pub fn forward(&self, inputs: &Matrix) -> Result<(Matrix, Matrix)> {
        let pass = self.forward_pass(inputs)?;
        Ok((pass.outputs().clone(), pass.features().clone()))
    }

    /// Backpropagates upstream gradients into a parameter gradient.
    ///
    /// `d_outputs` is the gradient of a scalar with respect to the outputs,
    /// `d_features` with respect to the penultimate activations. Either may be
    /// absent. A feature gradient on a model without hidden layers is a
    /// gradient on the raw inputs and contributes nothing.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        d_outputs: Option<&Matrix>,
        d_features: Option<&Matrix>,
    ) -> ParamVector {
        let layers = self.num_layers();
        let batch = pass.activations[0].nrows();
        let mut grad = ParamVector::zeros(self.params.len());
        let mut delta = match d_outputs {
            Some(d) => d.clone(),
            None => Matrix::zeros((batch, self.output_dim())),
        };
        for l in (0..layers).rev() {
            let (fan_in, fan_out) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let start = self.layer_offset(l);
            let gw = pass.activations[l].t().dot(&delta);
            let gb: Array1<f64> = delta.sum_axis(Axis(0));
            grad[start..start + fan_in * fan_out]
                .iter_mut()
                .zip(gw.iter())
                .for_each(|(g, v)| *g = *v);
            grad[start + fan_in * fan_out..start + fan_in * fan_out + fan_out]
                .iter_mut()
                .zip(gb.iter())
                .for_each(|(g, v)| *g = *v);
            if l == 0 {
                break;
            }
            let mut d_act = delta.dot(&self.weights(l).t());
            if l == layers - 1 {
                if let Some(df) = d_features {
                    d_act += df;
                }
            }
            let z = &pass.preacts[l - 1];
            d_act.zip_mut_with(z, |d, &zv| {
                if zv <= 0.0 {
                    *d = 0.0;
                }
            });
            delta = d_act;
        }
        grad
    }

    /// Mean loss over the batch and the gradient of that mean with respect
    /// to the outputs.
    fn loss_terms(&self, outputs: &Matrix, targets: &Targets) -> Result<(f64, Matrix)> {
        let b = outputs.nrows();
        check_len(b, targets.len())?;
        let inv_b = 1.0 / b as f64;
        match (self.loss, targets) {
            (Loss::SquaredError, Targets::Values(y)) => {
                check_len(outputs.ncols(), y.ncols())?;
                let resid = outputs - y;
                let per_sample: Vec<f64> = resid
                    .rows()
                    .into_iter()
                    .map(|r| 0.5 * r.iter().map(|v| v * v).sum::<f64>())
                    .collect();
                Ok((order_free_sum(per_sample) * inv_b, resid * inv_b))
            }
            (Loss::SoftmaxCrossEntropy, Targets::Classes(classes)) => {
                let k = outputs.ncols();
                let mut d = Matrix::zeros((b, k));
                let mut per_sample = Vec::with_capacity(b);
                for (i, &c) in classes.iter().enumerate() {
                    if c >= k {
                        return Err(Error::param("targets", format!("class {c} >= {k}")));
                    }
                    let row = outputs.row(i);
                    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    per_sample.push(lse - row[c]);
                    for j in 0..k {
                        d[[i, j]] = (row[j] - lse).exp() * inv_b;
                    }
                    d[[i, c]] -= inv_b;
                }
                Ok((order_free_sum(per_sample) * inv_b, d))
            }
            (loss, _) => Err(Error::param(
                "targets",
                format!("target kind does not match loss {loss:?}"),
            )),
        }
    }

    /// Mean per-sample loss on one domain batch.
    pub fn domain_loss(&self, batch: &DomainBatch) -> Result<f64> {
        let pass = self.forward_pass(&batch.inputs)?;
        Ok(self.loss_terms(pass.outputs(), &batch.targets)?.0)
    }

    /// Gradient of [`Self::domain_loss`] with respect to the parameters.
    pub fn domain_grad(&self, batch: &DomainBatch) -> Result<ParamVector> {
        Ok(self.loss_and_grad(batch)?.1)
    }

    pub fn loss_and_grad(&self, batch: &DomainBatch) -> Result<(f64, ParamVector)> {
        let pass = self.forward_pass(&batch.inputs)?;
        let (loss, d_out) = self.loss_terms(pass.outputs(), &batch.targets)?;
        Ok((loss, self.backward(&pass, Some(&d_out), None)))
    }

    /// Fraction of samples whose arg-max output matches the class index.
    /// Squared-error batches count a sample correct when every output is
    /// within 0.5 of its target.
    pub fn accuracy(&self, batch: &DomainBatch) -> Result<f64> {
        let (out, _) = self.forward(&batch.inputs)?;
        let correct = match &batch.targets {
            Targets::Classes(classes) => classes
                .iter()
                .enumerate()
                .filter(|(i, &c)| argmax(out.row(*i)) == c)
                .count(),
            Targets::Values(y) => (0..out.nrows())
                .filter(|&i| {
                    out.row(i)
                        .iter()
                        .zip(y.row(i))
                        .all(|(a, b)| (a - b).abs() < 0.5)
                })
                .count(),
        };
        Ok(correct as f64 / batch.len() as f64)
    }

    /// Copy of the weight block of `layer` (`in x out`), for inspection.
    pub fn layer_weights(&self, layer: usize) -> Matrix {
        self.weights(layer).to_owned()
    }

    /// Row range of `inputs` as its own matrix.
    pub fn rows(inputs: &Matrix, start: usize, end: usize) -> Matrix {
        inputs.slice(s![start..end, ..]).to_owned()
    }
}

/// Sum that does not depend on the order of the terms: they are added in
/// ascending order, so permuting a batch leaves its mean loss bit-identical.
pub(crate) fn order_free_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}
