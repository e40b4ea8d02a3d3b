//! Small fully connected networks with hand-written reverse mode.
//!
//! Parameters live in one flat vector so optimizers, checkpoints and
//! finite-difference checks can treat a network as a plain `&mut [f64]`.

use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Softplus,
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::Softplus => softplus(z),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Softplus => sigmoid(z),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layer {
    inputs: usize,
    outputs: usize,
    weights: usize,
    biases: usize,
    activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    pub params: Vec<f64>,
}

/// Per-sample forward cache, reusable across samples.
#[derive(Debug, Clone)]
pub struct Workspace {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_next: Vec<f64>,
}

impl Mlp {
    /// `widths[0]` is the input size; one layer per following width.
    pub fn new(widths: &[usize], activations: &[Activation]) -> Self {
        assert_eq!(widths.len(), activations.len() + 1);
        let mut layers = Vec::new();
        let mut offset = 0;
        for (i, act) in activations.iter().enumerate() {
            let (inputs, outputs) = (widths[i], widths[i + 1]);
            layers.push(Layer {
                inputs,
                outputs,
                weights: offset,
                biases: offset + inputs * outputs,
                activation: *act,
            });
            offset += inputs * outputs + outputs;
        }
        Self {
            layers,
            params: vec![0.0; offset],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn set_output_activation(&mut self, activation: Activation) {
        if let Some(last) = self.layers.last_mut() {
            last.activation = activation;
        }
    }

    pub fn output_activation(&self) -> Activation {
        self.layers.last().map_or(Activation::Identity, |l| l.activation)
    }

    /// Xavier-uniform weights with gain 1, zero biases.
    pub fn xavier_init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for layer in &self.layers {
            let bound = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            for w in &mut self.params[layer.weights..layer.biases] {
                *w = rng.random_range(-bound..bound);
            }
            for b in &mut self.params[layer.biases..layer.biases + layer.outputs] {
                *b = 0.0;
            }
        }
    }

    /// Mutable view of layer `i`'s `(weights, biases)`; weights row-major
    /// `outputs x inputs`.
    pub fn layer_mut(&mut self, i: usize) -> (&mut [f64], &mut [f64]) {
        let l = self.layers[i];
        let (w, rest) = self.params[l.weights..].split_at_mut(l.inputs * l.outputs);
        (w, &mut rest[..l.outputs])
    }

    pub fn workspace(&self) -> Workspace {
        Workspace {
            input: vec![0.0; self.input_dim()],
            pre: self.layers.iter().map(|l| vec![0.0; l.outputs]).collect(),
            post: self.layers.iter().map(|l| vec![0.0; l.outputs]).collect(),
            delta: Vec::with_capacity(16),
            delta_next: Vec::with_capacity(16),
        }
    }

    /// Forward pass; the output is left in the workspace and returned.
    pub fn forward<'w>(&self, input: &[f64], ws: &'w mut Workspace) -> &'w [f64] {
        debug_assert_eq!(input.len(), self.input_dim());
        ws.input.copy_from_slice(input);
        for (i, layer) in self.layers.iter().enumerate() {
            let (done, rest) = ws.post.split_at_mut(i);
            let x: &[f64] = if i == 0 { &ws.input } else { &done[i - 1] };
            let w = &self.params[layer.weights..layer.biases];
            let b = &self.params[layer.biases..layer.biases + layer.outputs];
            let pre = &mut ws.pre[i];
            let post = &mut rest[0];
            for o in 0..layer.outputs {
                let row = &w[o * layer.inputs..(o + 1) * layer.inputs];
                let mut z = b[o];
                for (wi, xi) in row.iter().zip(x) {
                    z += wi * xi;
                }
                pre[o] = z;
                post[o] = layer.activation.apply(z);
            }
        }
        ws.post.last().expect("at least one layer")
    }

    /// Back-propagates `d_output` through the cached forward pass, adding
    /// parameter gradients into `grad` and input gradients into `d_input`.
    pub fn backward(
        &self,
        ws: &mut Workspace,
        d_output: &[f64],
        mut grad: Option<&mut [f64]>,
        d_input: Option<&mut [f64]>,
    ) {
        let Workspace {
            input,
            pre,
            post,
            delta,
            delta_next,
        } = ws;
        delta.clear();
        delta.extend_from_slice(d_output);
        for (i, layer) in self.layers.iter().enumerate().rev() {
            for o in 0..layer.outputs {
                delta[o] *= layer.activation.derivative(pre[i][o], post[i][o]);
            }
            let x: &[f64] = if i == 0 { input } else { &post[i - 1] };
            if let Some(g) = grad.as_deref_mut() {
                for o in 0..layer.outputs {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    let row = &mut g[layer.weights + o * layer.inputs..layer.weights + (o + 1) * layer.inputs];
                    for (gi, xi) in row.iter_mut().zip(x) {
                        *gi += d * xi;
                    }
                    g[layer.biases + o] += d;
                }
            }
            if i == 0 && d_input.is_none() {
                break;
            }
            delta_next.clear();
            delta_next.resize(layer.inputs, 0.0);
            let w = &self.params[layer.weights..layer.biases];
            for o in 0..layer.outputs {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &w[o * layer.inputs..(o + 1) * layer.inputs];
                for (dn, wi) in delta_next.iter_mut().zip(row) {
                    *dn += d * wi;
                }
            }
            std::mem::swap(delta, delta_next);
        }
        if let Some(d_in) = d_input {
            for (a, b) in d_in.iter_mut().zip(delta.iter()) {
                *a += b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softplus_inverse_round_trip() {
        for y in [1e-4, 0.01, 0.5, 1.0, 7.0, 40.0] {
            assert!((softplus(inverse_softplus(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
        assert_eq!(softplus(-1e3), 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = Mlp::new(
            &[3, 5, 4, 1],
            &[Activation::Relu, Activation::Softplus, Activation::Sigmoid],
        );
        net.xavier_init(&mut rng);
        for p in net.params.iter_mut() {
            *p += rng.random_range(-0.1..0.1);
        }
        let x = [0.3, -0.7, 1.1];
        let mut ws = net.workspace();
        net.forward(&x, &mut ws);
        let mut grad = vec![0.0; net.num_params()];
        let mut d_in = vec![0.0; 3];
        net.backward(&mut ws, &[1.0], Some(&mut grad), Some(&mut d_in));

        let h = 1e-6;
        for i in 0..net.num_params() {
            let mut plus = net.clone();
            plus.params[i] += h;
            let mut minus = net.clone();
            minus.params[i] -= h;
            let fd = (plus.forward(&x, &mut ws)[0] - minus.forward(&x, &mut ws)[0]) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-8, "param {i}: {fd} vs {}", grad[i]);
        }
        for j in 0..3 {
            let mut xp = x;
            xp[j] += h;
            let mut xm = x;
            xm[j] -= h;
            let fd = (net.forward(&xp, &mut ws)[0] - net.forward(&xm, &mut ws)[0]) / (2.0 * h);
            assert!((fd - d_in[j]).abs() < 1e-8);
        }
    }
}
