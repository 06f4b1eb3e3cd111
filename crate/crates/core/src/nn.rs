//! Parameter storage and the handful of layer types the networks use.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sdacd_grad::{Gradients, Tensor, Var};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Ordered, named parameter tensors of one network.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.tensors[index]
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Enters the parameters into a fresh graph, as leaves or constants.
    pub fn bind(&self, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    Var::leaf(t.clone())
                } else {
                    Var::constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Replaces every tensor by name, checking shapes.
    pub fn load_named(&mut self, mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<()> {
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let t = lookup(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn feed_digest(&self, hasher: &mut Sha256) {
        for (name, t) in self.names.iter().zip(&self.tensors) {
            hasher.update(name.as_bytes());
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
    }
}

/// Parameters of one network entered into a graph.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, index: usize) -> &Var {
        &self.vars[index]
    }

    /// Gradients in parameter order; `None` for parameters that did not
    /// influence the loss or were bound as constants.
    pub fn grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|v| grads.get(v).cloned()).collect()
    }
}

/// He/Kaiming normal initialisation, `std = sqrt(2 / fan_in)`.
pub fn kaiming_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng) as f32).collect();
    Tensor::new(shape, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub weight: usize,
    pub bias: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    /// Registers a `kernel×kernel` convolution with "same"-style padding.
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = params.push(
            format!("{name}.weight"),
            kaiming_normal(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
        );
        let bias = params.push(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn forward(&self, bound: &Bound, x: &Var) -> Var {
        x.conv2d(bound.var(self.weight), Some(bound.var(self.bias)), self.stride, self.padding)
    }

    /// Multiplies the weights (not the bias) by `factor`.
    pub fn scale_weights(&self, params: &mut ParamSet, factor: f32) {
        params.tensor_mut(self.weight).scale_in_place(factor);
    }

    pub fn zero(&self, params: &mut ParamSet) {
        params.tensor_mut(self.weight).scale_in_place(0.0);
        params.tensor_mut(self.bias).scale_in_place(0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
}

impl Linear {
    pub fn new(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let weight = params.push(
            format!("{name}.weight"),
            kaiming_normal(&[fan_out, fan_in], fan_in, rng),
        );
        let bias = params.push(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self { weight, bias }
    }

    pub fn forward(&self, bound: &Bound, x: &Var) -> Var {
        x.linear(bound.var(self.weight), bound.var(self.bias))
    }

    pub fn zero(&self, params: &mut ParamSet) {
        params.tensor_mut(self.weight).scale_in_place(0.0);
        params.tensor_mut(self.bias).scale_in_place(0.0);
    }
}

/// Anything that owns a [`ParamSet`].
pub trait Network {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kaiming_std_matches_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = kaiming_normal(&[64, 32, 3, 3], 32 * 9, &mut rng);
        let n = t.numel() as f64;
        let mean = t.sum() / n;
        let var = t.sum_sq() / n - mean * mean;
        let expected = 2.0 / (32.0 * 9.0);
        assert!(mean.abs() < 0.01);
        assert!((var / expected - 1.0).abs() < 0.05, "variance {var} vs {expected}");
    }

    #[test]
    fn frozen_binding_yields_no_parameter_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let conv = Conv::new(&mut ps, "c", 2, 3, 3, 1, &mut rng);
        let x = Var::leaf(Tensor::full(&[1, 2, 4, 4], 0.5));
        let frozen = ps.bind(false);
        let g = conv.forward(&frozen, &x).sum_all().backward();
        assert!(frozen.grads(&g).iter().all(Option::is_none));
        assert!(g.get(&x).is_some());
        let live = ps.bind(true);
        let g = conv.forward(&live, &x).sum_all().backward();
        assert!(live.grads(&g).iter().all(Option::is_some));
    }

    #[test]
    fn load_named_checks_shapes() {
        let mut ps = ParamSet::new();
        ps.push("a", Tensor::zeros(&[2]));
        assert!(ps.load_named(|_| Some(Tensor::zeros(&[3]))).is_err());
        assert!(ps.load_named(|_| None).is_err());
        ps.load_named(|_| Some(Tensor::full(&[2], 1.0))).unwrap();
        assert_eq!(ps.tensors()[0].data(), &[1.0, 1.0]);
    }
}
