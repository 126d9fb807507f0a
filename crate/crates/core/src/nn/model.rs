use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

/// Layer stack whose final layer feeds softmax cross-entropy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// ReLU hidden layers of the given widths followed by a linear output layer.
    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(classes);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| LayerSpec {
                in_dim: w[0],
                out_dim: w[1],
                activation: if i + 2 == dims.len() { Activation::Identity } else { Activation::Relu },
            })
            .collect();
        let spec = ModelSpec { layers };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Argument("model has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(Error::Argument(format!("layer {i} has a zero dimension")));
            }
        }
        for (i, w) in self.layers.windows(2).enumerate() {
            if w[0].out_dim != w[1].in_dim {
                return Err(Error::Argument(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    w[0].out_dim,
                    i + 1,
                    w[1].in_dim
                )));
            }
        }
        if self.classes() < 2 {
            return Err(Error::Argument("need at least two classes".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.in_dim * l.out_dim + l.out_dim).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Named parameter tensors of a [`ModelSpec`], ordered `w0, b0, w1, b1, ...`.
///
/// Gradients, masks and optimizer buffers reuse this type so that every
/// per-parameter quantity shares one layout. Weight `wℓ` has shape
/// `[in_dim, out_dim]`, bias `bℓ` has shape `[out_dim]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    spec: ModelSpec,
    params: Vec<Param>,
}

impl ParamSet {
    pub fn zeros(spec: &ModelSpec) -> Self {
        Self::filled(spec, 0.0)
    }

    pub fn filled(spec: &ModelSpec, value: f64) -> Self {
        let params = spec
            .layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    Param {
                        name: format!("w{i}"),
                        kind: ParamKind::Weight,
                        value: Tensor::filled(&[l.in_dim, l.out_dim], value),
                    },
                    Param { name: format!("b{i}"), kind: ParamKind::Bias, value: Tensor::filled(&[l.out_dim], value) },
                ]
            })
            .collect();
        ParamSet { spec: spec.clone(), params }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.spec)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn weight(&self, layer: usize) -> &Tensor {
        &self.params[2 * layer].value
    }

    pub fn bias(&self, layer: usize) -> &Tensor {
        &self.params[2 * layer + 1].value
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.params[2 * layer].value
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.params[2 * layer + 1].value
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.params[index].value
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.params[index].value
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| a.name == b.name && a.value.same_shape(&b.value))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    /// Inverse of [`ParamSet::flatten`] using `self` as the layout template.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Dimension(format!(
                "flat vector has {} entries, layout needs {}",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut out = self.clone();
        let mut offset = 0;
        for p in &mut out.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(out)
    }

    pub fn set_tensor(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Argument(format!("no parameter named {name}")))?;
        if !p.value.same_shape(&value) {
            return Err(Error::Dimension(format!("{name}: expected {:?}, got {:?}", p.value.shape(), value.shape())));
        }
        p.value = value;
        Ok(())
    }

    fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Dimension("parameter layouts differ".into()))
        }
    }

    pub fn zip_with(&self, other: &ParamSet, f: impl Fn(f64, f64) -> f64) -> Result<ParamSet> {
        self.check_layout(other)?;
        let mut out = self.clone();
        for (p, q) in out.params.iter_mut().zip(&other.params) {
            for (a, &b) in p.value.data_mut().iter_mut().zip(q.value.data()) {
                *a = f(*a, b);
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &ParamSet) -> Result<ParamSet> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ParamSet) -> Result<ParamSet> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &ParamSet) -> Result<ParamSet> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, alpha: f64) -> ParamSet {
        self.map(|x| alpha * x)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ParamSet {
        let mut out = self.clone();
        for p in &mut out.params {
            p.value.data_mut().iter_mut().for_each(|x| *x = f(*x));
        }
        out
    }

    /// `self += alpha * other`. Panics on layout mismatch.
    pub fn axpy(&mut self, alpha: f64, other: &ParamSet) {
        assert!(self.same_layout(other), "axpy layout mismatch");
        for (p, q) in self.params.iter_mut().zip(&other.params) {
            p.value.axpy(alpha, &q.value);
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.params.iter().fold(0.0, |acc, p| acc + p.value.norm_sq())
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }
}

/// Kaiming (fan-in) normal initialisation: weights `N(0, 2 / in_dim)`, biases zero.
pub fn init_params(spec: &ModelSpec, rng: &mut RngStream) -> ParamSet {
    let mut params = ParamSet::zeros(spec);
    for (i, layer) in spec.layers.iter().enumerate() {
        let std = (2.0 / layer.in_dim as f64).sqrt();
        for w in params.weight_mut(i).data_mut() {
            *w = std * rng.next_gaussian();
        }
    }
    params
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mlp_spec_chains_dims() {
        let spec = ModelSpec::mlp(4, &[8, 6], 3).unwrap();
        assert_eq!(spec.layers.len(), 3);
        assert_eq!(spec.layers[2].activation, Activation::Identity);
        assert_eq!(spec.layers[0].activation, Activation::Relu);
        assert_eq!(spec.num_params(), 4 * 8 + 8 + 8 * 6 + 6 + 6 * 3 + 3);
        let bad = ModelSpec {
            layers: vec![
                LayerSpec { in_dim: 2, out_dim: 3, activation: Activation::Relu },
                LayerSpec { in_dim: 4, out_dim: 2, activation: Activation::Identity },
            ],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn kaiming_variance_matches_fan_in() {
        let spec = ModelSpec::mlp(2, &[], 50_000).unwrap();
        let params = init_params(&spec, &mut RngStream::new(17));
        let w = params.weight(0);
        assert_eq!(w.len(), 100_000);
        let mean = w.sum() / w.len() as f64;
        let var = w.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64;
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
        assert!(params.bias(0).data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn init_is_deterministic() {
        let spec = ModelSpec::mlp(3, &[5], 2).unwrap();
        assert_eq!(init_params(&spec, &mut RngStream::new(1)), init_params(&spec, &mut RngStream::new(1)));
    }

    proptest! {
        #[test]
        fn flatten_unflatten_roundtrip(seed in any::<u64>()) {
            let spec = ModelSpec::mlp(3, &[4], 2).unwrap();
            let template = ParamSet::zeros(&spec);
            let mut rng = RngStream::new(seed);
            let v: Vec<f64> = (0..template.num_scalars()).map(|_| rng.next_gaussian()).collect();
            let p = template.unflatten(&v).unwrap();
            prop_assert_eq!(p.flatten(), v);
        }
    }
}
