//! Fully connected autoencoder: forward pass, backpropagation, and flat
//! parameter access for optimizers and finite-difference checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Activation;

/// Symmetric fully connected network. Layer `l` maps `widths[l]` values to
/// `widths[l + 1]`; every layer but the last applies the activation, the
/// output layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    widths: Vec<usize>,
    /// Row-major `widths[l + 1] x widths[l]` per layer.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    activation: Activation,
}

/// Per-layer gradients, same shapes as the network parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros_like(net: &Autoencoder) -> Self {
        Self {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }
}

impl Autoencoder {
    /// Uniform fan-in-scaled initialization, biases zero. Draw order is
    /// fixed (layer by layer, row-major), so a seed pins every parameter.
    pub fn init(widths: &[usize], activation: Activation, seed: u64) -> Self {
        assert!(widths.len() >= 2, "need at least one layer");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(widths.len() - 1);
        let mut biases = Vec::with_capacity(widths.len() - 1);
        for l in 0..widths.len() - 1 {
            let fan_in = widths[l];
            let bound = 1.0 / (fan_in as f64).sqrt();
            let layer: Vec<f64> = (0..widths[l + 1] * fan_in)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            weights.push(layer);
            biases.push(vec![0.0; widths[l + 1]]);
        }
        Self {
            widths: widths.to_vec(),
            weights,
            biases,
            activation,
        }
    }

    pub fn from_parts(
        widths: Vec<usize>,
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
        activation: Activation,
    ) -> Self {
        assert_eq!(weights.len(), widths.len() - 1);
        assert_eq!(biases.len(), widths.len() - 1);
        for l in 0..weights.len() {
            assert_eq!(weights[l].len(), widths[l + 1] * widths[l]);
            assert_eq!(biases[l].len(), widths[l + 1]);
        }
        Self {
            widths,
            weights,
            biases,
            activation,
        }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Reconstruct one input vector.
    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        debug_assert_eq!(input.len(), self.input_dim());
        let mut activations = self.forward_trace(input);
        activations.pop().expect("at least the output activation")
    }

    /// Forward pass keeping every layer's activation (input included).
    fn forward_trace(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let n = self.n_layers();
        let mut activations = Vec::with_capacity(n + 1);
        activations.push(input.to_vec());
        for l in 0..n {
            let prev = &activations[l];
            let rows = self.widths[l + 1];
            let cols = self.widths[l];
            let mut out = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = &self.weights[l][r * cols..(r + 1) * cols];
                let mut z = self.biases[l][r];
                for (w, a) in row.iter().zip(prev) {
                    z += w * a;
                }
                out.push(if l + 1 == n { z } else { self.activation.apply(z) });
            }
            activations.push(out);
        }
        activations
    }

    /// Mean squared reconstruction error of one window.
    pub fn reconstruction_mse(&self, input: &[f64]) -> f64 {
        let out = self.forward(input);
        let d = input.len() as f64;
        out.iter()
            .zip(input)
            .map(|(o, x)| (o - x) * (o - x))
            .sum::<f64>()
            / d
    }

    /// Mean loss over a batch of windows.
    pub fn batch_loss(&self, batch: &[&[f64]]) -> f64 {
        let n = batch.len().max(1) as f64;
        batch.iter().map(|x| self.reconstruction_mse(x)).sum::<f64>() / n
    }

    /// Loss and gradients of the batch-mean MSE.
    pub fn batch_gradients(&self, batch: &[&[f64]]) -> (f64, Gradients) {
        let mut grads = Gradients::zeros_like(self);
        let n_layers = self.n_layers();
        let batch_size = batch.len() as f64;
        let d0 = self.input_dim() as f64;
        let mut total_loss = 0.0;

        for &input in batch {
            let activations = self.forward_trace(input);
            let output = &activations[n_layers];
            total_loss += output
                .iter()
                .zip(input)
                .map(|(o, x)| (o - x) * (o - x))
                .sum::<f64>()
                / d0;

            // Output layer is linear: delta = dL/dz directly.
            let mut delta: Vec<f64> = output
                .iter()
                .zip(input)
                .map(|(o, x)| 2.0 * (o - x) / (d0 * batch_size))
                .collect();

            for l in (0..n_layers).rev() {
                let prev = &activations[l];
                let cols = self.widths[l];
                for (r, &dr) in delta.iter().enumerate() {
                    grads.biases[l][r] += dr;
                    let row = &mut grads.weights[l][r * cols..(r + 1) * cols];
                    for (g, a) in row.iter_mut().zip(prev) {
                        *g += dr * a;
                    }
                }
                if l == 0 {
                    break;
                }
                // delta for layer l-1: W^T delta, gated by the activation
                // derivative at the stored output.
                let mut next = vec![0.0; cols];
                for (r, &dr) in delta.iter().enumerate() {
                    let row = &self.weights[l][r * cols..(r + 1) * cols];
                    for (nd, w) in next.iter_mut().zip(row) {
                        *nd += w * dr;
                    }
                }
                for (nd, a) in next.iter_mut().zip(prev) {
                    *nd *= self.activation.derivative_from_output(*a);
                }
                delta = next;
            }
        }
        (total_loss / batch.len().max(1) as f64, grads)
    }

    /// Apply an in-place update `param += f(layer, is_bias, index, grad)`.
    pub fn update_params(&mut self, mut f: impl FnMut(usize, bool, usize, &mut f64)) {
        for l in 0..self.weights.len() {
            for (i, w) in self.weights[l].iter_mut().enumerate() {
                f(l, false, i, w);
            }
            for (i, b) in self.biases[l].iter_mut().enumerate() {
                f(l, true, i, b);
            }
        }
    }

    /// Flat parameter access in canonical order (per layer: weights
    /// row-major, then biases). Used by the finite-difference check.
    pub fn get_param(&self, mut idx: usize) -> f64 {
        for l in 0..self.weights.len() {
            if idx < self.weights[l].len() {
                return self.weights[l][idx];
            }
            idx -= self.weights[l].len();
            if idx < self.biases[l].len() {
                return self.biases[l][idx];
            }
            idx -= self.biases[l].len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_param(&mut self, mut idx: usize, value: f64) {
        for l in 0..self.weights.len() {
            if idx < self.weights[l].len() {
                self.weights[l][idx] = value;
                return;
            }
            idx -= self.weights[l].len();
            if idx < self.biases[l].len() {
                self.biases[l][idx] = value;
                return;
            }
            idx -= self.biases[l].len();
        }
        panic!("parameter index out of range");
    }

    /// Gradients flattened in the same canonical order.
    pub fn flatten_gradients(grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in grads.weights.iter().zip(&grads.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    /// Canonical little-endian parameter bytes.
    pub fn param_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.n_params() * 8);
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for v in w.iter().chain(b) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_net(seed: u64) -> Autoencoder {
        Autoencoder::init(&[4, 2, 4], Activation::Tanh, seed)
    }

    #[test]
    fn forward_shape_and_determinism() {
        let net = tiny_net(3);
        let x = [0.1, -0.4, 0.7, 0.2];
        let y1 = net.forward(&x);
        let y2 = net.forward(&x);
        assert_eq!(y1.len(), 4);
        assert_eq!(y1, y2);
    }

    #[test]
    fn zero_net_reconstructs_zero() {
        let net = Autoencoder::from_parts(
            vec![3, 2, 3],
            vec![vec![0.0; 6], vec![0.0; 6]],
            vec![vec![0.0; 2], vec![0.0; 3]],
            Activation::Tanh,
        );
        assert_eq!(net.forward(&[0.0, 0.0, 0.0]), vec![0.0, 0.0, 0.0]);
        assert_eq!(net.reconstruction_mse(&[0.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn output_bias_gradient_closed_form() {
        // Zero weights, zero input, output bias b: the output is b, so
        // dL/db_i = 2 b_i / d0 and every other gradient vanishes.
        let d0 = 3;
        let bias = vec![0.3, -0.2, 0.5];
        let net = Autoencoder::from_parts(
            vec![d0, 2, d0],
            vec![vec![0.0; 6], vec![0.0; 6]],
            vec![vec![0.0; 2], bias.clone()],
            Activation::Tanh,
        );
        let x = vec![0.0; d0];
        let (_, grads) = net.batch_gradients(&[&x]);
        for (g, b) in grads.biases[1].iter().zip(&bias) {
            assert!((g - 2.0 * b / d0 as f64).abs() < 1e-15);
        }
        assert!(grads.weights[0].iter().all(|&g| g == 0.0));
        assert!(grads.weights[1].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn duplicate_window_batch_matches_single() {
        let net = tiny_net(7);
        let x = [0.3, 0.1, -0.2, 0.8];
        let (l1, g1) = net.batch_gradients(&[&x]);
        let (l2, g2) = net.batch_gradients(&[&x, &x]);
        assert!((l1 - l2).abs() < 1e-15);
        let f1 = Autoencoder::flatten_gradients(&g1);
        let f2 = Autoencoder::flatten_gradients(&g2);
        for (a, b) in f1.iter().zip(&f2) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn flat_param_roundtrip() {
        let mut net = tiny_net(5);
        let n = net.n_params();
        assert_eq!(n, 4 * 2 + 2 + 2 * 4 + 4);
        for i in 0..n {
            let v = net.get_param(i);
            net.set_param(i, v + 1.0);
            assert_eq!(net.get_param(i), v + 1.0);
            net.set_param(i, v);
        }
    }
}
