use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

/// Fully-connected layer `act(W x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out x in`
    pub weights: DMatrix<f64>,
    /// `out x 1`
    pub biases: DMatrix<f64>,
    pub activation: Activation,
}

/// He-normal weights `N(0, 2 / fan_in)`.
pub fn init_weights<R: Rng + ?Sized>(out_dim: usize, in_dim: usize, rng: &mut R) -> DMatrix<f64> {
    let std = (2.0 / in_dim.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    DMatrix::from_fn(out_dim, in_dim, |_, _| normal.sample(rng))
}

impl DenseLayer {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut R) -> Self {
        Self {
            weights: init_weights(out_dim, in_dim, rng),
            biases: DMatrix::zeros(out_dim, 1),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }
}

/// Variables a network registered on a tape, one `(W, b)` pair per layer.
#[derive(Debug, Clone)]
pub struct NetworkVars {
    pub params: Vec<(Var, Var)>,
}

impl NetworkVars {
    pub fn gradients(&self, grads: &Gradients) -> Result<GradientSet> {
        let mut out = Vec::with_capacity(self.params.len() * 2);
        for (w, b) in &self.params {
            out.push(grads.get(*w)?);
            out.push(grads.get(*b)?);
        }
        Ok(GradientSet(out))
    }
}

/// Ordered stack of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<DenseLayer>,
}

impl Network {
    /// Hidden layers use ReLU; the output layer is linear.
    pub fn mlp<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { Activation::Linear } else { Activation::Relu };
                DenseLayer::new(widths[i], widths[i + 1], act, rng)
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        let net = Self { layers };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        for pair in self.layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Dimension {
                    expected: pair[0].out_dim(),
                    got: pair[1].in_dim(),
                    context: "layer chaining",
                });
            }
        }
        for l in &self.layers {
            if l.biases.shape() != (l.out_dim(), 1) {
                return Err(Error::Dimension {
                    expected: l.out_dim(),
                    got: l.biases.nrows(),
                    context: "bias length",
                });
            }
            if l.weights.iter().chain(l.biases.iter()).any(|x| !x.is_finite()) {
                return Err(Error::InvalidState("non-finite network parameter".into()));
            }
        }
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Evaluate on a batch laid out one sample per column.
    pub fn forward(&self, input: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if input.nrows() != self.in_dim() {
            return Err(Error::Dimension {
                expected: self.in_dim(),
                got: input.nrows(),
                context: "network input",
            });
        }
        let mut x = input.clone();
        for layer in &self.layers {
            let mut z = &layer.weights * &x;
            for mut col in z.column_iter_mut() {
                col += layer.biases.column(0);
            }
            if layer.activation == Activation::Relu {
                z.apply(|v| *v = v.max(0.0));
            }
            x = z;
        }
        Ok(x)
    }

    pub fn forward_vec(&self, input: &DVector<f64>) -> Result<DVector<f64>> {
        let out = self.forward(&DMatrix::from_column_slice(input.len(), 1, input.as_slice()))?;
        Ok(out.column(0).clone_owned())
    }

    /// Record the forward pass on `tape`; the tape holds the activations
    /// needed for the backward pass.
    pub fn forward_tape(&self, tape: &mut Tape, input: Var) -> Result<(Var, NetworkVars)> {
        let (rows, _) = tape.shape(input);
        if rows != self.in_dim() {
            return Err(Error::Dimension {
                expected: self.in_dim(),
                got: rows,
                context: "network input",
            });
        }
        let mut x = input;
        let mut params = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let w = tape.leaf(layer.weights.clone());
            let b = tape.leaf(layer.biases.clone());
            let z = tape.matmul(w, x)?;
            let z = tape.add_column(z, b)?;
            x = match layer.activation {
                Activation::Relu => tape.relu(z),
                Activation::Linear => z,
            };
            params.push((w, b));
        }
        Ok((x, NetworkVars { params }))
    }

    /// Parameters in declared order: `W_0, b_0, W_1, b_1, ...`.
    pub fn params(&self) -> Vec<&DMatrix<f64>> {
        self.layers.iter().flat_map(|l| [&l.weights, &l.biases]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.biases])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Per-parameter gradients, congruent with some ordered parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet(pub Vec<DMatrix<f64>>);

impl GradientSet {
    pub fn zeros_like(params: &[&DMatrix<f64>]) -> Self {
        Self(params.iter().map(|p| DMatrix::zeros(p.nrows(), p.ncols())).collect())
    }

    /// Shape audit against a parameter list.
    pub fn check_congruent(&self, params: &[&DMatrix<f64>]) -> Result<()> {
        if self.0.len() != params.len() {
            return Err(Error::Dimension {
                expected: params.len(),
                got: self.0.len(),
                context: "gradient set length",
            });
        }
        for (g, p) in self.0.iter().zip(params) {
            if g.shape() != p.shape() {
                return Err(Error::Dimension {
                    expected: p.len(),
                    got: g.len(),
                    context: "gradient shape",
                });
            }
        }
        Ok(())
    }

    pub fn extend(&mut self, other: GradientSet) {
        self.0.extend(other.0);
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().map(|g| g.amax()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.iter().all(|x| x.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_is_seeded() {
        let a = init_weights(8, 3, &mut ChaCha8Rng::seed_from_u64(4));
        let b = init_weights(8, 3, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
    }

    #[test]
    fn init_variance_matches_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let w = init_weights(n, 2, &mut rng);
        let samples: Vec<f64> = w.iter().copied().collect();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (samples.len() - 1) as f64;
        // standard error of the sample variance of a normal: sigma^2 sqrt(2/(N-1))
        let se = (2.0 / (samples.len() - 1) as f64).sqrt();
        assert!((var - 1.0).abs() < 3.0 * se, "var {var}");
    }

    #[test]
    fn biases_start_at_zero() {
        let net = Network::mlp(&[4, 8, 3], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(net.layers.iter().all(|l| l.biases.iter().all(|b| *b == 0.0)));
    }

    #[test]
    fn relu_kills_negative_inputs() {
        let layer = DenseLayer {
            weights: DMatrix::identity(3, 3),
            biases: DMatrix::zeros(3, 1),
            activation: Activation::Relu,
        };
        let net = Network::from_layers(vec![layer]).unwrap();
        let out = net.forward(&DMatrix::from_column_slice(3, 1, &[-1.0, -2.0, -0.5])).unwrap();
        assert!(out.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn identity_linear_layer_passes_through() {
        let layer = DenseLayer {
            weights: DMatrix::identity(3, 3),
            biases: DMatrix::zeros(3, 1),
            activation: Activation::Linear,
        };
        let net = Network::from_layers(vec![layer]).unwrap();
        let x = DMatrix::from_column_slice(3, 1, &[-1.0, 2.0, 0.5]);
        assert_eq!(net.forward(&x).unwrap(), x);
    }

    #[test]
    fn input_dimension_checked() {
        let net = Network::mlp(&[4, 8, 3], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(net.forward(&DMatrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn mismatched_layers_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = DenseLayer::new(2, 3, Activation::Relu, &mut rng);
        let b = DenseLayer::new(4, 1, Activation::Linear, &mut rng);
        assert!(Network::from_layers(vec![a, b]).is_err());
    }
}
