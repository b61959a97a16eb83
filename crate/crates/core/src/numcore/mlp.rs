use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId};
use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{bail, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => bail!(Config, "unknown activation `{other}`"),
        }
    }
}

/// Layer widths of a fully connected network. The activation is applied to
/// hidden layers only; the output layer is affine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        activation: Activation,
    ) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden: hidden.to_vec(),
            output_dim,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            bail!(Config, "all MLP dims must be >= 1: {self:?}");
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` per layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden.len() + 2);
        widths.push(self.input_dim);
        widths.extend_from_slice(&self.hidden);
        widths.push(self.output_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// An MLP whose weights live in a [`ParamSet`] under `{prefix}.w{l}` /
/// `{prefix}.b{l}`. Weights are stored `fan_in × fan_out`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    pub prefix: String,
    pub spec: MlpSpec,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, spec: MlpSpec) -> Self {
        Self {
            prefix: prefix.into(),
            spec,
        }
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.w{layer}", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.b{layer}", self.prefix)
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(&self, params: &mut ParamSet, rng: &mut Rng) -> Result<()> {
        self.spec.validate()?;
        for (l, (fan_in, fan_out)) in self.spec.layer_dims().into_iter().enumerate() {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..=limit))
                .collect();
            params.insert(self.weight_name(l), Tensor::matrix(fan_in, fan_out, w)?)?;
            params.insert(
                self.bias_name(l),
                Tensor::new(vec![fan_out], vec![0.0; fan_out])?,
            )?;
        }
        Ok(())
    }

    fn check_params(&self, params: &ParamSet) -> Result<()> {
        for (l, (fan_in, fan_out)) in self.spec.layer_dims().into_iter().enumerate() {
            let w = params.get(&self.weight_name(l))?;
            let b = params.get(&self.bias_name(l))?;
            if w.rows() != fan_in || w.cols() != fan_out || b.len() != fan_out {
                bail!(
                    Shape,
                    "layer {l} of `{}` does not match spec {fan_in}→{fan_out}",
                    self.prefix
                );
            }
        }
        Ok(())
    }

    /// Recorded forward pass over a batch (`batch × input_dim`).
    pub fn forward(&self, g: &mut Graph, params: &ParamSet, input: NodeId) -> Result<NodeId> {
        self.forward_in(g, 0, params, input)
    }

    /// As [`Mlp::forward`], routing parameter gradients to `slot`.
    pub fn forward_in(
        &self,
        g: &mut Graph,
        slot: usize,
        params: &ParamSet,
        input: NodeId,
    ) -> Result<NodeId> {
        if g.value(input).cols() != self.spec.input_dim {
            bail!(
                Shape,
                "`{}` expects input dim {}, got {}",
                self.prefix,
                self.spec.input_dim,
                g.value(input).cols()
            );
        }
        self.check_params(params)?;
        let layers = self.spec.layer_dims().len();
        let mut h = input;
        for l in 0..layers {
            let w = g.param_in(slot, params, &self.weight_name(l))?;
            let b = g.param_in(slot, params, &self.bias_name(l))?;
            let z = g.matmul(h, w)?;
            h = g.add_row(z, b)?;
            if l + 1 < layers {
                h = match self.spec.activation {
                    Activation::Tanh => g.tanh(h)?,
                    Activation::Relu => g.relu(h)?,
                };
            }
        }
        Ok(h)
    }

    /// Unrecorded forward pass of a single input row. Uses the same
    /// accumulation order as [`Mlp::forward`], so results are bit-identical.
    pub fn infer(&self, params: &ParamSet, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.spec.input_dim {
            bail!(
                Shape,
                "`{}` expects input dim {}, got {}",
                self.prefix,
                self.spec.input_dim,
                input.len()
            );
        }
        let layers = self.spec.layer_dims();
        let mut h = input.to_vec();
        for (l, &(fan_in, fan_out)) in layers.iter().enumerate() {
            let w = params.get(&self.weight_name(l))?;
            let b = params.get(&self.bias_name(l))?;
            if w.len() != fan_in * fan_out || b.len() != fan_out {
                bail!(Shape, "layer {l} of `{}` does not match spec", self.prefix);
            }
            let wd = w.data();
            let mut out = vec![0.0; fan_out];
            for (p, &x) in h.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                for (o, &wv) in out.iter_mut().zip(&wd[p * fan_out..(p + 1) * fan_out]) {
                    *o += x * wv;
                }
            }
            for (o, &bv) in out.iter_mut().zip(b.data()) {
                *o += bv;
            }
            if l + 1 < layers.len() {
                let act = self.spec.activation;
                out.iter_mut().for_each(|v| *v = act.apply(*v));
            }
            h = out;
        }
        if h.iter().any(|v| !v.is_finite()) {
            bail!(Numeric, "non-finite output from `{}`", self.prefix);
        }
        Ok(h)
    }
}

/// Convenience wrapper: recorded forward pass of `input` through `mlp`.
pub fn mlp_forward(g: &mut Graph, params: &ParamSet, mlp: &Mlp, input: &Tensor) -> Result<NodeId> {
    let x = g.constant(input.clone())?;
    mlp.forward(g, params, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn build(spec: MlpSpec, seed: u64) -> (Mlp, ParamSet) {
        let mlp = Mlp::new("net", spec);
        let mut ps = ParamSet::new();
        mlp.init(&mut ps, &mut seeded(seed)).unwrap();
        (mlp, ps)
    }

    #[test]
    fn zero_weights_output_bias() {
        let (mlp, mut ps) = build(MlpSpec::new(3, &[4], 2, Activation::Tanh).unwrap(), 1);
        for l in 0..2 {
            ps.get_mut(&mlp.weight_name(l)).unwrap().fill(0.0);
        }
        ps.get_mut("net.b1")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[0.25, -1.5]);
        let input = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -4.0, 5.0, 6.0]).unwrap();
        let mut g = Graph::new();
        let out = mlp_forward(&mut g, &ps, &mlp, &input).unwrap();
        assert_eq!(g.value(out).data(), &[0.25, -1.5, 0.25, -1.5]);
    }

    #[test]
    fn identity_linear_layer() {
        let (mlp, mut ps) = build(MlpSpec::new(3, &[], 3, Activation::Tanh).unwrap(), 1);
        let w = ps.get_mut("net.w0").unwrap();
        w.fill(0.0);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let input = Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 4.0, 5.0, -6.0]).unwrap();
        let mut g = Graph::new();
        let out = mlp_forward(&mut g, &ps, &mlp, &input).unwrap();
        assert_eq!(g.value(out).data(), input.data());
    }

    #[test]
    fn hand_computed_two_three_one() {
        // 2→3→1, tanh hidden. Expected value computed by hand:
        // z = x·W0 + b0 with x = (0.5, -1.0)
        //   z0 = 0.5·0.1 + (-1)·0.4 + 0.01 = -0.34
        //   z1 = 0.5·(-0.2) + (-1)·0.5 + 0.02 = -0.58
        //   z2 = 0.5·0.3 + (-1)·(-0.6) + 0.0 = 0.75
        // y = 0.7·tanh(z0) - 0.8·tanh(z1) + 0.9·tanh(z2) + 0.05
        let (mlp, mut ps) = build(MlpSpec::new(2, &[3], 1, Activation::Tanh).unwrap(), 1);
        ps.get_mut("net.w0")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[0.1, -0.2, 0.3, 0.4, 0.5, -0.6]);
        ps.get_mut("net.b0")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[0.01, 0.02, 0.0]);
        ps.get_mut("net.w1")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[0.7, -0.8, 0.9]);
        ps.get_mut("net.b1")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[0.05]);
        let expected =
            0.7 * (-0.34f64).tanh() - 0.8 * (-0.58f64).tanh() + 0.9 * 0.75f64.tanh() + 0.05;
        // frozen: 0.7·tanh(-0.34) - 0.8·tanh(-0.58) + 0.9·tanh(0.75) + 0.05
        assert!((expected - 0.8105322245311217).abs() < 1e-12, "{expected}");
        let out = mlp.infer(&ps, &[0.5, -1.0]).unwrap();
        assert!((out[0] - 0.8105322245311217).abs() < 1e-12);
        let mut g = Graph::new();
        let node = mlp_forward(&mut g, &ps, &mlp, &Tensor::row(&[0.5, -1.0])).unwrap();
        assert!((g.value(node).data()[0] - 0.8105322245311217).abs() < 1e-12);
    }

    #[test]
    fn infer_matches_recorded_forward_bitwise() {
        let (mlp, ps) = build(MlpSpec::new(5, &[7, 6], 3, Activation::Relu).unwrap(), 9);
        let x = [0.3, -0.1, 0.0, 2.0, -1.2];
        let mut g = Graph::new();
        let node = mlp_forward(&mut g, &ps, &mlp, &Tensor::row(&x)).unwrap();
        assert_eq!(g.value(node).data(), mlp.infer(&ps, &x).unwrap().as_slice());
    }

    #[test]
    fn dimension_mismatch_is_a_shape_error() {
        let (mlp, ps) = build(MlpSpec::new(3, &[2], 1, Activation::Tanh).unwrap(), 1);
        assert!(matches!(
            mlp.infer(&ps, &[1.0, 2.0]),
            Err(crate::Error::Shape(_))
        ));
        let mut g = Graph::new();
        assert!(matches!(
            mlp_forward(&mut g, &ps, &mlp, &Tensor::row(&[1.0])),
            Err(crate::Error::Shape(_))
        ));
    }

    #[test]
    fn init_respects_glorot_bound_and_zero_bias() {
        let (mlp, ps) = build(MlpSpec::new(10, &[20], 5, Activation::Tanh).unwrap(), 3);
        let lim = (6.0f64 / 30.0).sqrt();
        assert!(ps
            .get("net.w0")
            .unwrap()
            .data()
            .iter()
            .all(|v| v.abs() <= lim));
        assert!(ps.get("net.b0").unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(ps.scalar_count(), mlp.spec.param_count());
    }
}
