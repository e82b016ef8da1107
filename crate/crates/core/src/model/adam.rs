//! Adam optimizer with the standard defaults (beta1 = 0.9, beta2 = 0.999,
//! epsilon = 1e-8) and bias-corrected moment estimates.

use super::net::{Autoencoder, Gradients};

#[derive(Debug, Clone)]
pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    m_weights: Vec<Vec<f64>>,
    v_weights: Vec<Vec<f64>>,
    m_biases: Vec<Vec<f64>>,
    v_biases: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(net: &Autoencoder, learning_rate: f64) -> Self {
        let zeros = |shapes: &[Vec<f64>]| -> Vec<Vec<f64>> {
            shapes.iter().map(|s| vec![0.0; s.len()]).collect()
        };
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m_weights: zeros(net.weights()),
            v_weights: zeros(net.weights()),
            m_biases: zeros(net.biases()),
            v_biases: zeros(net.biases()),
            step: 0,
        }
    }

    /// One update from a batch gradient.
    pub fn step(&mut self, net: &mut Autoencoder, grads: &Gradients) {
        self.step += 1;
        let t = self.step as f64;
        let bias1 = 1.0 - self.beta1.powf(t);
        let bias2 = 1.0 - self.beta2.powf(t);
        let lr = self.learning_rate;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);

        let m_w = &mut self.m_weights;
        let v_w = &mut self.v_weights;
        let m_b = &mut self.m_biases;
        let v_b = &mut self.v_biases;

        net.update_params(|layer, is_bias, idx, param| {
            let (m, v, g) = if is_bias {
                (
                    &mut m_b[layer][idx],
                    &mut v_b[layer][idx],
                    grads.biases[layer][idx],
                )
            } else {
                (
                    &mut m_w[layer][idx],
                    &mut v_w[layer][idx],
                    grads.weights[layer][idx],
                )
            };
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *param -= lr * m_hat / (v_hat.sqrt() + eps);
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Activation;

    #[test]
    fn descends_on_a_fixed_batch() {
        let mut net = Autoencoder::init(&[4, 2, 4], Activation::Tanh, 11);
        let mut adam = Adam::new(&net, 0.01);
        let x = [0.5, -0.3, 0.2, 0.9];
        let batch: Vec<&[f64]> = vec![&x];
        let initial = net.batch_loss(&batch);
        for _ in 0..200 {
            let (_, grads) = net.batch_gradients(&batch);
            adam.step(&mut net, &grads);
        }
        let final_loss = net.batch_loss(&batch);
        assert!(
            final_loss < initial * 0.1,
            "expected clear descent: {initial} -> {final_loss}"
        );
    }

    #[test]
    fn zero_gradient_leaves_params_alone() {
        let mut net = Autoencoder::init(&[3, 2, 3], Activation::Tanh, 4);
        let before = net.param_bytes();
        let mut adam = Adam::new(&net, 0.01);
        let zero = Gradients {
            weights: net.weights().iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases().iter().map(|b| vec![0.0; b.len()]).collect(),
        };
        adam.step(&mut net, &zero);
        assert_eq!(net.param_bytes(), before);
    }
}
