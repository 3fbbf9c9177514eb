//! Fully connected embedding network with explicit backpropagation.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `in × out`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Cache {
    /// Input to each layer, then the final output.
    activations: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetGrad {
    pub layers: Vec<LayerGrad>,
    /// Gradient with respect to the network input.
    pub input: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedNet {
    layers: Vec<Layer>,
    #[serde(skip)]
    cache: Option<Cache>,
}

impl EmbedNet {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("network layers"));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(Error::shape("layer bias", l.output_dim(), l.bias.len()));
            }
            if k > 0 && layers[k - 1].output_dim() != l.input_dim() {
                return Err(Error::shape("layer chain", layers[k - 1].output_dim(), l.input_dim()));
            }
            if l.weights.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("network parameters"));
            }
        }
        Ok(Self { layers, cache: None })
    }

    /// Tanh hidden layers and a linear output layer, LeCun-normal weights and
    /// zero biases.
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: &[usize], output_dim: usize, rng: &mut R) -> Result<Self> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(output_dim);
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let normal = Normal::new(0.0, (1.0 / w[0] as f64).sqrt()).expect("positive std");
                Layer {
                    weights: Array2::from_shape_simple_fn((w[0], w[1]), || normal.sample(rng)),
                    bias: Array1::zeros(w[1]),
                    activation: if k + 2 == dims.len() {
                        Activation::Identity
                    } else {
                        Activation::Tanh
                    },
                }
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    /// Mutable access to the parameters; drops the forward cache.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.cache = None;
        &mut self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    fn run(&self, inputs: ArrayView2<'_, f64>, keep: bool) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::shape("network input", self.input_dim(), inputs.ncols()));
        }
        let mut kept = Vec::new();
        let mut x = inputs.to_owned();
        for layer in &self.layers {
            let mut y = x.dot(&layer.weights);
            y += &layer.bias;
            let act = layer.activation;
            if act != Activation::Identity {
                y.mapv_inplace(|v| act.apply(v));
            }
            if keep {
                kept.push(x);
            }
            x = y;
        }
        Ok((x, kept))
    }

    /// Forward pass that records the caches needed by [`EmbedNet::backward`].
    pub fn forward(&mut self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.cache = None;
        let (out, mut activations) = self.run(inputs, true)?;
        activations.push(out.clone());
        self.cache = Some(Cache { activations });
        Ok(out)
    }

    /// Cache-free forward pass.
    pub fn infer(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.run(inputs, false)?.0)
    }

    /// Parameter gradients given `dL/d(output)` for the cached batch.
    pub fn backward(&self, d_output: ArrayView2<'_, f64>) -> Result<NetGrad> {
        let cache = self.cache.as_ref().ok_or(Error::StaleForward)?;
        let out = &cache.activations[self.layers.len()];
        if d_output.dim() != out.dim() {
            return Err(Error::shape(
                "output gradient",
                format!("{:?}", out.dim()),
                format!("{:?}", d_output.dim()),
            ));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = d_output.to_owned();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let y = &cache.activations[k + 1];
            let act = layer.activation;
            if act != Activation::Identity {
                delta.zip_mut_with(y, |d, &yv| *d *= act.derivative_from_output(yv));
            }
            let x = &cache.activations[k];
            grads.push(LayerGrad {
                weights: x.t().dot(&delta),
                bias: delta.sum_axis(Axis(0)),
            });
            delta = delta.dot(&layer.weights.t());
        }
        grads.reverse();
        Ok(NetGrad {
            layers: grads,
            input: delta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn identity_linear_layer() {
        let mut net = EmbedNet::from_layers(vec![Layer {
            weights: Array2::eye(3),
            bias: Array1::zeros(3),
            activation: Activation::Identity,
        }])
        .unwrap();
        let x = array![[1.0, -2.0, 0.5], [0.0, 3.0, 4.0]];
        assert_eq!(net.forward(x.view()).unwrap(), x);
    }

    #[test]
    fn zero_input_bias_free_is_zero() {
        let net = EmbedNet::new(5, &[7, 6], 4, &mut rng()).unwrap();
        let out = net.infer(Array2::zeros((2, 5)).view()).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_needs_forward() {
        let mut net = EmbedNet::new(3, &[4], 2, &mut rng()).unwrap();
        assert!(matches!(net.backward(Array2::zeros((1, 2)).view()), Err(Error::StaleForward)));
        net.forward(Array2::ones((1, 3)).view()).unwrap();
        assert!(net.has_cache());
        net.layers_mut()[0].bias[0] = 0.1;
        assert!(!net.has_cache());
        assert!(matches!(net.backward(Array2::zeros((1, 2)).view()), Err(Error::StaleForward)));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut net = EmbedNet::new(3, &[4, 4], 2, &mut rng()).unwrap();
        net.forward(array![[0.3, -0.2, 0.9]].view()).unwrap();
        let g = net.backward(Array2::zeros((1, 2)).view()).unwrap();
        assert!(g.layers.iter().all(|l| l.weights.iter().chain(l.bias.iter()).all(|&v| v == 0.0)));
    }

    #[test]
    fn linear_layer_outer_product() {
        let mut net = EmbedNet::new(4, &[], 3, &mut rng()).unwrap();
        let x = array![[0.5, -1.0, 2.0, 0.1], [1.5, 0.2, -0.3, 0.7]];
        let up = array![[1.0, -2.0, 0.5], [0.25, 0.0, -1.0]];
        net.forward(x.view()).unwrap();
        let g = net.backward(up.view()).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let oracle: f64 = (0..2).map(|b| x[[b, i]] * up[[b, j]]).sum();
                assert!((g.layers[0].weights[[i, j]] - oracle).abs() < 1e-14);
            }
        }
        for j in 0..3 {
            assert_eq!(g.layers[0].bias[j], up[[0, j]] + up[[1, j]]);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let net = EmbedNet::new(3, &[4], 2, &mut rng()).unwrap();
        assert!(net.infer(Array2::zeros((1, 4)).view()).is_err());
        assert!(EmbedNet::from_layers(vec![]).is_err());
    }
}
