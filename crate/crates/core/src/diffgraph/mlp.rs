use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{matmul_into, tanh};
use super::{Graph, GraphError, Tensor, Var};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Elu,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => tanh(v),
            Activation::Elu => {
                if v > 0.0 {
                    v
                } else {
                    v.exp_m1()
                }
            }
        }
    }
}

/// Affine map `x · W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Learnable gain and bias of the optional first-layer normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

/// Fully connected network. Hidden layers use `activation`; the last layer is
/// linear. With `layer_norm`, the first layer output is normalized and passed
/// through `tanh` instead of the activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    pub layer_norm: Option<LayerNorm>,
}

/// Graph handles for the parameters of an [`Mlp`], in [`Mlp::params`] order.
#[derive(Clone, Debug)]
pub struct MlpVars {
    layers: Vec<(Var, Var)>,
    layer_norm: Option<(Var, Var)>,
    activation: Activation,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases. `sizes` lists every layer width,
    /// input first.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        activation: Activation,
        layer_norm: bool,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "an mlp needs input and output sizes");
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let values = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect();
                Linear {
                    weight: Tensor::new(vec![fan_in, fan_out], values).expect("weight shape"),
                    bias: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        let layer_norm = layer_norm.then(|| LayerNorm {
            gain: Tensor::filled(&[sizes[1]], 1.0),
            bias: Tensor::zeros(&[sizes[1]]),
        });
        Self {
            layers,
            activation,
            layer_norm,
        }
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Linear {
                weight: Tensor::zeros(&[w[0], w[1]]),
                bias: Tensor::zeros(&[w[1]]),
            })
            .collect();
        Self {
            layers,
            activation,
            layer_norm: None,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.shape()[1]
    }

    pub fn last_layer_mut(&mut self) -> &mut Linear {
        self.layers.last_mut().expect("non-empty")
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self
            .layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect();
        if let Some(ln) = &self.layer_norm {
            out.extend([&ln.gain, &ln.bias]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self
            .layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect();
        if let Some(ln) = &mut self.layer_norm {
            out.extend([&mut ln.gain, &mut ln.bias]);
        }
        out
    }

    /// Copies the parameters into `g` as leaves (trainable or constant).
    pub fn register(&self, g: &mut Graph, trainable: bool) -> MlpVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let layers = self
            .layers
            .iter()
            .map(|l| (leaf(&l.weight), leaf(&l.bias)))
            .collect();
        let layer_norm = self
            .layer_norm
            .as_ref()
            .map(|ln| (leaf(&ln.gain), leaf(&ln.bias)));
        MlpVars {
            layers,
            layer_norm,
            activation: self.activation,
        }
    }

    /// Graph-free forward pass on a `[rows, in]` batch.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, GraphError> {
        let rows = x.rows();
        if x.last_dim() != self.input_dim() {
            return Err(GraphError::ShapeMismatch {
                op: "mlp_forward",
                left: x.shape().to_vec(),
                right: self.layers[0].weight.shape().to_vec(),
            });
        }
        let mut h = x.values().to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (k, n) = (layer.weight.shape()[0], layer.weight.shape()[1]);
            let mut out = vec![0.0; rows * n];
            matmul_into(&h, layer.weight.values(), &mut out, rows, k, n);
            for row in out.chunks_mut(n) {
                for (v, b) in row.iter_mut().zip(layer.bias.values()) {
                    *v += b;
                }
            }
            if let (0, Some(ln)) = (i, self.layer_norm.as_ref()) {
                for row in out.chunks_mut(n) {
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let sd = (var + LAYER_NORM_EPS).sqrt();
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = tanh((*v - mean) / sd * ln.gain.values()[j] + ln.bias.values()[j]);
                    }
                }
            } else if i < last {
                out.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            h = out;
        }
        Tensor::new(vec![rows, self.output_dim()], h)
    }
}

impl MlpVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.layers.iter().flat_map(|&(w, b)| [w, b]).collect();
        if let Some((g, b)) = self.layer_norm {
            out.extend([g, b]);
        }
        out
    }

    /// Applies the network to a `[rows, in]` node.
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var, GraphError> {
        let rows = g.value(x).rows();
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = g.matmul(h, w)?;
            let bias = g.broadcast_rows(b, rows);
            let z = g.add(z, bias)?;
            h = if let (0, Some((gain, beta))) = (i, self.layer_norm) {
                let n = g.value(z).last_dim();
                let sum = g.sum_last(z);
                let mean = g.scale(sum, 1.0 / n as f64);
                let mean = g.broadcast_cols(mean, n);
                let centered = g.sub(z, mean)?;
                let sq = g.square(centered);
                let var = g.sum_last(sq);
                let var = g.scale(var, 1.0 / n as f64);
                let var = g.offset(var, LAYER_NORM_EPS);
                let sd = g.sqrt(var);
                let sd = g.broadcast_cols(sd, n);
                let normed = g.div(centered, sd)?;
                let gain = g.broadcast_rows(gain, rows);
                let beta = g.broadcast_rows(beta, rows);
                let scaled = g.mul(normed, gain)?;
                let shifted = g.add(scaled, beta)?;
                g.tanh(shifted)
            } else if i < last {
                match self.activation {
                    Activation::Tanh => g.tanh(z),
                    Activation::Elu => g.elu(z),
                }
            } else {
                z
            };
        }
        Ok(h)
    }
}
