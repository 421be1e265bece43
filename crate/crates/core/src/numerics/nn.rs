use rand::Rng;

use super::{Graph, NumericsError, Tensor, Var};

/// Anything that owns trainable tensors in a stable order.
pub trait Parameterized {
    fn parameters(&self) -> Vec<&Tensor>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Silu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
            Activation::Silu => g.silu(x),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Silu => x * super::sigmoid(x),
            Activation::Sigmoid => super::sigmoid(x),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "identity" => Ok(Self::Identity),
            "tanh" => Ok(Self::Tanh),
            "relu" => Ok(Self::Relu),
            "silu" => Ok(Self::Silu),
            "sigmoid" => Ok(Self::Sigmoid),
            other => Err(format!(
                "unknown activation `{other}` (expected identity, tanh, relu, silu or sigmoid)"
            )),
        }
    }
}

/// Affine map `x W + b` with `W: in × out` and `b: 1 × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform fan-in initialization in `±1/√fan_in`; bias starts at zero.
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let weight = Tensor::from_shape_fn((input, output), |_| rng.gen_range(-bound..=bound));
        Self {
            weight,
            bias: Tensor::zeros((1, output)),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros((input, output)),
            bias: Tensor::zeros((1, output)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }
}

/// Layer layout of an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    /// Zero the final layer so the initial network outputs exactly zero.
    pub zero_final: bool,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize, activation: Activation) -> Self {
        Self {
            input,
            hidden: hidden.to_vec(),
            output,
            hidden_activation: activation,
            output_activation: Activation::Identity,
            zero_final: false,
        }
    }

    pub fn zero_final(mut self) -> Self {
        self.zero_final = true;
        self
    }
}

/// Feed-forward network.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activations: Vec<Activation>,
}

/// Graph handles for one binding of an [`Mlp`]'s parameters.
#[derive(Debug, Clone)]
pub struct MlpVars {
    pub vars: Vec<Var>,
}

impl Mlp {
    pub fn new(spec: &MlpSpec, rng: &mut impl Rng) -> Self {
        let mut widths = vec![spec.input];
        widths.extend(&spec.hidden);
        widths.push(spec.output);
        let n = widths.len() - 1;
        let mut layers = Vec::with_capacity(n);
        let mut activations = Vec::with_capacity(n);
        for k in 0..n {
            let last = k + 1 == n;
            layers.push(if last && spec.zero_final {
                Linear::zeros(widths[k], widths[k + 1])
            } else {
                Linear::new(widths[k], widths[k + 1], rng)
            });
            activations.push(if last {
                spec.output_activation
            } else {
                spec.hidden_activation
            });
        }
        Self {
            layers,
            activations,
        }
    }

    /// Builds a network from explicit layers.
    pub fn from_layers(layers: Vec<Linear>, activations: Vec<Activation>) -> Result<Self, NumericsError> {
        if layers.is_empty() || layers.len() != activations.len() {
            return Err(NumericsError::Shape(format!(
                "{} layers but {} activations",
                layers.len(),
                activations.len()
            )));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(NumericsError::Shape(format!(
                    "layer widths {} -> {} do not chain",
                    pair[0].output_dim(),
                    pair[1].input_dim()
                )));
            }
        }
        Ok(Self {
            layers,
            activations,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Places the parameters on `g` as differentiable leaves.
    pub fn bind(&self, g: &mut Graph) -> MlpVars {
        let mut vars = Vec::with_capacity(self.layers.len() * 2);
        for layer in &self.layers {
            vars.push(g.param(layer.weight.clone()));
            vars.push(g.param(layer.bias.clone()));
        }
        MlpVars { vars }
    }

    /// Places the parameters on `g` as constants (input gradients only).
    pub fn bind_frozen(&self, g: &mut Graph) -> MlpVars {
        let mut vars = Vec::with_capacity(self.layers.len() * 2);
        for layer in &self.layers {
            vars.push(g.constant(layer.weight.clone()));
            vars.push(g.constant(layer.bias.clone()));
        }
        MlpVars { vars }
    }

    /// Recorded forward pass.
    pub fn forward(&self, g: &mut Graph, vars: &MlpVars, x: Var) -> Result<Var, NumericsError> {
        let (_, width) = g.shape(x);
        if width != self.input_dim() {
            return Err(NumericsError::Shape(format!(
                "network expects input width {}, got {width}",
                self.input_dim()
            )));
        }
        let mut h = x;
        for (k, act) in self.activations.iter().enumerate() {
            let z = g.matmul(h, vars.vars[2 * k])?;
            let z = g.add_bias(z, vars.vars[2 * k + 1])?;
            h = act.apply(g, z);
        }
        Ok(h)
    }

    /// Unrecorded forward pass.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor, NumericsError> {
        if x.ncols() != self.input_dim() {
            return Err(NumericsError::Shape(format!(
                "network expects input width {}, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        let mut h = x.dot(&self.layers[0].weight) + &self.layers[0].bias;
        h.mapv_inplace(|v| self.activations[0].eval(v));
        for (layer, act) in self.layers.iter().zip(&self.activations).skip(1) {
            h = h.dot(&layer.weight) + &layer.bias;
            h.mapv_inplace(|v| act.eval(v));
        }
        Ok(h)
    }

    /// Parameter gradients in [`Parameterized::parameters`] order.
    pub fn collect_grads(&self, grads: &super::Gradients, vars: &MlpVars) -> Vec<Tensor> {
        self.parameters()
            .iter()
            .zip(&vars.vars)
            .map(|(p, v)| grads.get_or_zeros(*v, p.dim()))
            .collect()
    }
}

impl Parameterized for Mlp {
    fn parameters(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// Fixed sinusoidal features of integer steps, one row per step.
pub fn sinusoidal_features(steps: &[usize], dim: usize) -> Tensor {
    let half = (dim / 2).max(1);
    Tensor::from_shape_fn((steps.len(), dim), |(r, c)| {
        let k = (c % half) as f64;
        let freq = (-(10_000f64).ln() * k / half as f64).exp();
        let angle = steps[r] as f64 * freq;
        if c < half {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Sinusoidal step features followed by a learned projection and SiLU.
#[derive(Debug, Clone, PartialEq)]
pub struct StepEmbedding {
    pub dim: usize,
    pub proj: Linear,
}

impl StepEmbedding {
    pub fn new(dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            dim,
            proj: Linear::new(dim, dim, rng),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> MlpVars {
        MlpVars {
            vars: vec![g.param(self.proj.weight.clone()), g.param(self.proj.bias.clone())],
        }
    }

    pub fn forward(&self, g: &mut Graph, vars: &MlpVars, steps: &[usize]) -> Result<Var, NumericsError> {
        let feats = g.constant(sinusoidal_features(steps, self.dim));
        let z = g.matmul(feats, vars.vars[0])?;
        let z = g.add_bias(z, vars.vars[1])?;
        Ok(g.silu(z))
    }

    pub fn predict(&self, steps: &[usize]) -> Tensor {
        let mut z = sinusoidal_features(steps, self.dim).dot(&self.proj.weight) + &self.proj.bias;
        z.mapv_inplace(|v| Activation::Silu.eval(v));
        z
    }
}

impl Parameterized for StepEmbedding {
    fn parameters(&self) -> Vec<&Tensor> {
        vec![&self.proj.weight, &self.proj.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.proj.weight, &mut self.proj.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_bias_only() {
        let layer = Linear {
            weight: Tensor::zeros((3, 2)),
            bias: array![[0.5, -1.0]],
        };
        let net = Mlp::from_layers(vec![layer], vec![Activation::Identity]).unwrap();
        let out = net.predict(&array![[1.0, 2.0, 3.0], [-4.0, 0.0, 9.0]]).unwrap();
        assert_eq!(out, array![[0.5, -1.0], [0.5, -1.0]]);
    }

    #[test]
    fn identity_layer_is_identity() {
        let layer = Linear {
            weight: Tensor::eye(3),
            bias: Tensor::zeros((1, 3)),
        };
        let net = Mlp::from_layers(vec![layer], vec![Activation::Identity]).unwrap();
        let x = array![[1.5, -2.0, 0.25]];
        assert_eq!(net.predict(&x).unwrap(), x);
    }

    #[test]
    fn hand_computed_two_layer_net() {
        // h = tanh([1,2] W1 + b1), W1 = [[1,0],[0.5,-1]], b1 = [0, 1]
        //   = tanh([2, -1])
        // y = h · [2, 3]^T + 0.5
        let l1 = Linear {
            weight: array![[1.0, 0.0], [0.5, -1.0]],
            bias: array![[0.0, 1.0]],
        };
        let l2 = Linear {
            weight: array![[2.0], [3.0]],
            bias: array![[0.5]],
        };
        let net = Mlp::from_layers(vec![l1, l2], vec![Activation::Tanh, Activation::Identity]).unwrap();
        let expected = 2.0 * 2f64.tanh() + 3.0 * (-1f64).tanh() + 0.5;
        let out = net.predict(&array![[1.0, 2.0]]).unwrap();
        assert!((out[[0, 0]] - expected).abs() < 1e-15);

        let mut g = Graph::new();
        let vars = net.bind(&mut g);
        let x = g.constant(array![[1.0, 2.0]]);
        let y = net.forward(&mut g, &vars, x).unwrap();
        assert_eq!(g.value(y), &out);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(&MlpSpec::new(3, &[4], 1, Activation::Tanh), &mut rng);
        let err = net.predict(&Tensor::zeros((1, 2))).unwrap_err();
        assert!(err.to_string().contains("expects input width 3"));
    }

    #[test]
    fn zero_final_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(&MlpSpec::new(4, &[8, 8], 3, Activation::Silu).zero_final(), &mut rng);
        let out = net.predict(&Tensor::from_elem((5, 4), 0.7)).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        assert_eq!(out.dim(), (5, 3));
    }

    #[test]
    fn recorded_and_unrecorded_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::new(&MlpSpec::new(3, &[5, 4], 2, Activation::Silu), &mut rng);
        let x = Tensor::from_shape_fn((4, 3), |(r, c)| (r as f64 - c as f64) * 0.3);
        let mut g = Graph::new();
        let vars = net.bind(&mut g);
        let xv = g.constant(x.clone());
        let y = net.forward(&mut g, &vars, xv).unwrap();
        assert_eq!(g.value(y), &net.predict(&x).unwrap());
    }

    #[test]
    fn sinusoid_has_unit_rows() {
        let f = sinusoidal_features(&[0, 3, 17], 16);
        for row in f.rows() {
            let norm2: f64 = row.iter().map(|v| v * v).sum();
            assert!((norm2 - 8.0).abs() < 1e-12);
        }
    }
}
