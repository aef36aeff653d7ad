//! Fully connected networks with Tanh hidden layers and a linear head.
//!
//! Weights are stored `in x out` so a batch of inputs laid out one sample per
//! row goes through a layer as a single `X W + 1 b` product.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DfpsError, Result};
use crate::linalg::{gemm, Mat};
use crate::tape::{Gradients, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `in x out`.
    pub weight: Mat,
    /// `1 x out`.
    pub bias: Mat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    /// Factor applied to the final layer's weights at construction.
    pub output_gain: f64,
}

/// Parameters of an [`Mlp`] recorded as leaves on a tape.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    vars: Vec<(Var, Var)>,
}

impl Mlp {
    /// `sizes` lists every width from input to output, so `sizes.len() - 2`
    /// hidden layers. Weights are uniform in `±1/sqrt(fan_in)`, the final
    /// layer is scaled by `output_gain` and its bias starts at zero.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], output_gain: f64, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output widths");
        let depth = sizes.len() - 1;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let last = l + 1 == depth;
                let scale = if last { output_gain } else { 1.0 };
                let weight = Mat::from_vec(fan_in, fan_out, (0..fan_in * fan_out).map(|_| scale * rng.gen_range(-bound..=bound)).collect());
                let bias = if last {
                    Mat::zeros(1, fan_out)
                } else {
                    Mat::from_vec(1, fan_out, (0..fan_out).map(|_| rng.gen_range(-bound..=bound)).collect())
                };
                Layer { weight, bias }
            })
            .collect();
        Mlp { layers, output_gain }
    }

    /// Build from explicit layers, checking that widths chain.
    pub fn from_layers(layers: Vec<Layer>, output_gain: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(DfpsError::contract("MLP with no layers"));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.bias.rows != 1 || layer.bias.cols != layer.weight.cols {
                return Err(DfpsError::contract(format!("layer {l}: bias shape does not match weight")));
            }
            if l > 0 && layers[l - 1].weight.cols != layer.weight.rows {
                return Err(DfpsError::contract(format!("layer {l}: input width does not chain")));
            }
        }
        Ok(Mlp { layers, output_gain })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.cols
    }

    pub fn hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.data.len() + l.bias.data.len()).sum()
    }

    /// Parameter tensors in a fixed order: `w0, b0, w1, b1, ...`.
    pub fn tensors(&self) -> Vec<&Mat> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    /// Forward pass over a batch (one sample per row), off the tape.
    pub fn forward(&self, input: &Mat) -> Result<Mat> {
        if input.cols != self.input_dim() {
            return Err(DfpsError::contract(format!("MLP expects {} inputs, got {}", self.input_dim(), input.cols)));
        }
        let mut h = input.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = Mat::zeros(h.rows, layer.weight.cols);
            for r in 0..out.rows {
                out.row_mut(r).copy_from_slice(&layer.bias.data);
            }
            gemm(&h, false, &layer.weight, false, &mut out, 1.0);
            if l < last {
                for v in &mut out.data {
                    *v = crate::linalg::tanh(*v);
                }
            }
            h = out;
        }
        Ok(h)
    }

    /// Single-sample convenience wrapper around [`Mlp::forward`].
    pub fn forward_one(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(&Mat::row_vec(input))?.data)
    }

    /// Record the parameters on `tape`. Trainable parameters receive adjoints;
    /// frozen ones are recorded as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        let vars = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (tape.var(l.weight.clone()), tape.var(l.bias.clone()))
                } else {
                    (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()))
                }
            })
            .collect();
        BoundMlp { vars }
    }

    /// Zero-initialized tensors shaped like the parameters.
    pub fn zeros_like(&self) -> Vec<Mat> {
        self.tensors().iter().map(|t| Mat::zeros(t.rows, t.cols)).collect()
    }
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Var {
        let mut h = input;
        let last = self.vars.len() - 1;
        for (l, &(w, b)) in self.vars.iter().enumerate() {
            let z = tape.matmul(h, w);
            let z = tape.add_bias(z, b);
            h = if l < last { tape.tanh(z) } else { z };
        }
        h
    }

    /// Parameter adjoints in [`Mlp::tensors`] order; missing adjoints are zero.
    pub fn grads(&self, tape: &Tape, grads: &Gradients) -> Vec<Mat> {
        self.vars
            .iter()
            .flat_map(|&(w, b)| [w, b])
            .map(|v| {
                let (r, c) = tape.shape(v);
                grads.get_or_zeros(v, r, c)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_parameters_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Mlp::new(&[3, 8, 8, 2], 1.0, &mut rng);
        for t in net.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        assert_eq!(net.forward_one(&[0.3, -1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_affine_layer() {
        let net = Mlp::from_layers(
            vec![Layer {
                weight: Mat::scalar(2.0),
                bias: Mat::scalar(1.0),
            }],
            1.0,
        )
        .unwrap();
        assert_eq!(net.forward_one(&[3.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn hand_evaluated_one_two_one() {
        let net = Mlp::from_layers(
            vec![
                Layer {
                    weight: Mat::row_vec(&[1.0, -2.0]),
                    bias: Mat::row_vec(&[0.1, 0.2]),
                },
                Layer {
                    weight: Mat::col(&[0.5, 3.0]),
                    bias: Mat::scalar(-0.25),
                },
            ],
            1.0,
        )
        .unwrap();
        let x: f64 = 0.5;
        let expected = 0.5 * (x + 0.1).tanh() + 3.0 * (-2.0 * x + 0.2).tanh() - 0.25;
        let got = net.forward_one(&[x]).unwrap()[0];
        assert!((got - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gain_is_zero_function_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Mlp::new(&[4, 16, 16, 3], 0.0, &mut rng);
        let out = net.forward(&Mat::filled(5, 4, 0.7)).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::new(&[3, 4, 1], 1.0, &mut rng);
        assert!(matches!(net.forward_one(&[1.0]), Err(DfpsError::Contract(_))));
    }

    #[test]
    fn broken_chain_rejected() {
        let layers = vec![
            Layer {
                weight: Mat::zeros(2, 3),
                bias: Mat::zeros(1, 3),
            },
            Layer {
                weight: Mat::zeros(4, 1),
                bias: Mat::zeros(1, 1),
            },
        ];
        assert!(Mlp::from_layers(layers, 1.0).is_err());
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[3, 5, 5, 2], 0.5, &mut rng);
        let x = Mat::from_rows(&[vec![0.1, 0.2, 0.3], vec![-1.0, 0.5, 2.0]]);
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        let y = bound.forward(&mut tape, xv);
        assert_eq!(tape.value(y), &net.forward(&x).unwrap());
    }

    #[test]
    fn layer_count_and_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Mlp::new(&[7, 128, 128, 128, 128, 4], 0.05, &mut rng);
        assert_eq!(net.hidden_layers(), 4);
        assert_eq!(net.input_dim(), 7);
        assert_eq!(net.output_dim(), 4);
        assert_eq!(net.num_params(), 7 * 128 + 128 + 3 * (128 * 128 + 128) + 128 * 4 + 4);
    }
}
