use super::data::{Batch, Dataset};
use super::model::{Activation, ParamSet};
use crate::tensor::Tensor;

/// Rows evaluated together when sweeping a whole dataset.
const SWEEP_CHUNK: usize = 512;

/// Per-layer values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input of each layer; `inputs[0]` is the batch itself.
    pub inputs: Vec<Tensor>,
    /// Pre-activation output of each layer.
    pub pre: Vec<Tensor>,
    /// Post-activation output of the final layer.
    pub output: Tensor,
}

fn activate(act: Activation, z: &Tensor) -> Tensor {
    match act {
        Activation::Relu => z.map(|v| v.max(0.0)),
        Activation::Identity => z.clone(),
    }
}

/// Panics if `x` is not `[n × input_dim]`.
pub fn forward(params: &ParamSet, x: &Tensor) -> ForwardCache {
    let spec = params.spec();
    assert_eq!(x.cols(), spec.input_dim(), "input width {} does not match model input {}", x.cols(), spec.input_dim());
    let mut inputs = Vec::with_capacity(spec.layers.len());
    let mut pre = Vec::with_capacity(spec.layers.len());
    let mut a = x.clone();
    for (l, layer) in spec.layers.iter().enumerate() {
        let mut z = a.matmul(params.weight(l)).expect("layer shapes chain");
        let b = params.bias(l).data();
        let width = z.cols();
        for row in z.data_mut().chunks_mut(width) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let next = activate(layer.activation, &z);
        inputs.push(a);
        pre.push(z);
        a = next;
    }
    ForwardCache { inputs, pre, output: a }
}

pub fn logits(params: &ParamSet, x: &Tensor) -> Tensor {
    forward(params, x).output
}

/// Back-propagate `d_output` (gradient w.r.t. the final layer output).
///
/// Returns the parameter gradient and, if requested, the gradient w.r.t. the
/// network input.
pub fn backward(
    params: &ParamSet,
    cache: &ForwardCache,
    d_output: &Tensor,
    want_input_grad: bool,
) -> (ParamSet, Option<Tensor>) {
    let spec = params.spec();
    let mut grad = params.zeros_like();
    let mut delta = d_output.clone();
    for l in (0..spec.layers.len()).rev() {
        if spec.layers[l].activation == Activation::Relu {
            for (d, &z) in delta.data_mut().iter_mut().zip(cache.pre[l].data()) {
                if z <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        *grad.weight_mut(l) = cache.inputs[l].matmul_tn(&delta).expect("shapes chain");
        *grad.bias_mut(l) = delta.sum_rows();
        if l > 0 || want_input_grad {
            delta = delta.matmul_nt(params.weight(l)).expect("shapes chain");
        }
    }
    (grad, want_input_grad.then_some(delta))
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax(logits: &Tensor) -> Tensor {
    let c = logits.cols();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().fold(0.0, |s, &v| s + (v - max).exp()).ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// Per-example cross-entropy and the gradient of the *summed* loss w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> (Vec<f64>, Tensor) {
    let c = logits.cols();
    let logp = log_softmax(logits);
    let mut losses = Vec::with_capacity(labels.len());
    let mut d = logp.map(f64::exp);
    for (i, &y) in labels.iter().enumerate() {
        losses.push(-logp.data()[i * c + y]);
        d.data_mut()[i * c + y] -= 1.0;
    }
    (losses, d)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |s, &v| s + v) / values.len() as f64
}

pub fn per_example_losses(params: &ParamSet, batch: &Batch) -> Tensor {
    let z = logits(params, &batch.inputs);
    Tensor::vector(softmax_cross_entropy(&z, &batch.labels).0)
}

/// Mean cross-entropy over the batch and its exact gradient.
pub fn loss_and_grad(params: &ParamSet, batch: &Batch) -> (f64, ParamSet) {
    let cache = forward(params, &batch.inputs);
    let (losses, d) = softmax_cross_entropy(&cache.output, &batch.labels);
    let n = batch.len() as f64;
    let (grad, _) = backward(params, &cache, &d.scale(1.0 / n), false);
    (mean(&losses), grad)
}

fn sweep<T>(dataset: &Dataset, mut f: impl FnMut(&Batch) -> T) -> Vec<T> {
    let ids: Vec<usize> = (0..dataset.len()).collect();
    ids.chunks(SWEEP_CHUNK).map(|c| f(&dataset.batch(c))).collect()
}

/// Exact mean gradient over every example of `dataset`.
pub fn full_gradient(params: &ParamSet, dataset: &Dataset) -> ParamSet {
    assert!(!dataset.is_empty(), "full gradient of an empty dataset");
    let mut total = params.zeros_like();
    for g in sweep(dataset, |b| {
        let cache = forward(params, &b.inputs);
        let (_, d) = softmax_cross_entropy(&cache.output, &b.labels);
        backward(params, &cache, &d, false).0
    }) {
        total.axpy(1.0, &g);
    }
    total.scale(1.0 / dataset.len() as f64)
}

/// Argmax class per row, ties toward the lowest class index.
pub fn predictions(params: &ParamSet, x: &Tensor) -> Vec<usize> {
    let z = logits(params, x);
    let c = z.cols();
    z.data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

pub fn accuracy(params: &ParamSet, dataset: &Dataset) -> f64 {
    assert!(!dataset.is_empty(), "accuracy of an empty dataset");
    let correct: usize =
        sweep(dataset, |b| predictions(params, &b.inputs).iter().zip(&b.labels).filter(|(p, y)| p == y).count())
            .into_iter()
            .sum();
    correct as f64 / dataset.len() as f64
}
