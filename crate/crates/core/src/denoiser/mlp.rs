//! Small dense tanh networks with hand-written backpropagation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs × inputs`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            out.push(self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>());
        }
    }
}

/// Tanh between layers, linear output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Activations of every layer from one forward pass, input first.
pub struct MlpTrace {
    activations: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace is never empty")
    }
}

impl Mlp {
    /// Xavier-uniform hidden layers. The output layer is scaled by
    /// `output_scale` and starts from `output_bias`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], output_scale: f64, output_bias: &[f64], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::BadParameter(format!("bad layer sizes {sizes:?}")));
        }
        if output_bias.len() != *sizes.last().unwrap() {
            return Err(Error::BadParameter("output bias length does not match output size".into()));
        }
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let mut d = Dense::zeros(w[0], w[1]);
                let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
                let scale = if l == last { output_scale } else { 1.0 };
                for v in d.weight.iter_mut() {
                    *v = scale * rng.random_range(-limit..limit);
                }
                if l == last {
                    d.bias.copy_from_slice(output_bias);
                }
                d
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::BadParameter("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::BadParameter(format!("layer {i} has inconsistent shapes")));
            }
            if i > 0 && layers[i - 1].outputs != l.inputs {
                return Err(Error::BadParameter(format!("layer {i} input does not match previous output")));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].inputs];
        s.extend(self.layers.iter().map(|l| l.outputs));
        s
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.trace(x).activations.pop().unwrap()
    }

    pub fn trace(&self, x: &[f64]) -> MlpTrace {
        debug_assert_eq!(x.len(), self.input_len());
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.forward(activations.last().unwrap(), &mut out);
            if l < last {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            activations.push(out);
        }
        MlpTrace { activations }
    }

    /// Accumulates parameter gradients for `∂L/∂output = grad_out` into `grads`.
    pub fn backward(&self, trace: &MlpTrace, grad_out: &[f64], grads: &mut Mlp) {
        let mut delta = grad_out.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &trace.activations[l];
            let g = &mut grads.layers[l];
            for o in 0..layer.outputs {
                g.bias[o] += delta[o];
                let row = &mut g.weight[o * layer.inputs..(o + 1) * layer.inputs];
                for (w, x) in row.iter_mut().zip(input) {
                    *w += delta[o] * x;
                }
            }
            if l == 0 {
                break;
            }
            let mut prev = vec![0.0; layer.inputs];
            for o in 0..layer.outputs {
                let row = &layer.weight[o * layer.inputs..(o + 1) * layer.inputs];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += delta[o] * w;
                }
            }
            // input to this layer is tanh output h; dh/dz = 1 − h²
            for (p, h) in prev.iter_mut().zip(input) {
                *p *= 1.0 - h * h;
            }
            delta = prev;
        }
    }

    /// `self += scale · other`, parameter-wise.
    pub fn add_scaled(&mut self, other: &Mlp, scale: f64) {
        for (a, b) in self.params_mut().zip(other.params()) {
            *a += scale * b;
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(learning_rate: f64, num_params: usize) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    /// Applies one update; `params` and `grads` must enumerate the same parameters in the same order.
    pub fn update<'a>(&mut self, params: impl Iterator<Item = &'a mut f64>, grads: impl Iterator<Item = &'a f64>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.zip(grads).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + self.epsilon);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss(net: &Mlp, x: &[f64]) -> f64 {
        net.forward(x).iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(&[5, 7, 6, 3], 1.0, &[0.1, -0.2, 0.3], &mut rng).unwrap();
        let x = [0.3, -0.5, 0.8, 0.1, -0.2];
        let trace = net.trace(&x);
        let grad_out: Vec<f64> = trace.output().iter().enumerate().map(|(i, v)| 2.0 * (i as f64 + 1.0) * v).collect();
        let mut grads = net.zeros_like();
        net.backward(&trace, &grad_out, &mut grads);
        let analytic: Vec<f64> = grads.params().copied().collect();
        let h = 1e-6;
        for idx in (0..net.num_params()).step_by(7) {
            let mut plus = net.clone();
            *plus.params_mut().nth(idx).unwrap() += h;
            let mut minus = net.clone();
            *minus.params_mut().nth(idx).unwrap() -= h;
            let fd = (loss(&plus, &x) - loss(&minus, &x)) / (2.0 * h);
            assert!((fd - analytic[idx]).abs() < 1e-7 * fd.abs().max(1.0), "param {idx}");
        }
    }

    #[test]
    fn output_bias_is_initial_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::new(&[4, 8, 2], 0.0, &[1.5, -2.0], &mut rng).unwrap();
        assert_eq!(net.forward(&[0.1, 0.2, 0.3, 0.4]), vec![1.5, -2.0]);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut p = [3.0, -2.0];
        let mut opt = Adam::new(0.1, 2);
        for _ in 0..500 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            opt.update(p.iter_mut(), g.iter());
        }
        assert!(p.iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Mlp::new(&[3], 1.0, &[], &mut rng).is_err());
        assert!(Mlp::new(&[3, 2], 1.0, &[0.0], &mut rng).is_err());
    }
}
