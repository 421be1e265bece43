use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use super::AgentError;
use crate::envs::ActionSpace;
use crate::numerics::{Activation, Gradients, Graph, Mlp, MlpSpec, MlpVars, Parameterized, Tensor, Var};

/// Bounds applied to the learned Gaussian log-std after every update.
pub const LOG_STD_RANGE: (f64, f64) = (-3.0, 1.0);

/// State → action logits.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalPolicy {
    pub net: Mlp,
}

/// Diagonal Gaussian with mean `mid + half · tanh(net(s))` and a learned,
/// state-independent log-std. Samples are clipped to the action box.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub net: Mlp,
    /// `1 × d_a`.
    pub log_std: Tensor,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Categorical(CategoricalPolicy),
    Gaussian(GaussianPolicy),
}

/// Graph handles for one binding of a [`Policy`].
#[derive(Debug, Clone)]
pub struct PolicyVars {
    pub net: MlpVars,
    pub log_std: Option<Var>,
}

impl GaussianPolicy {
    fn mid_half(&self) -> (Tensor, Tensor) {
        let d = self.low.len();
        let mid = Tensor::from_shape_fn((1, d), |(_, j)| 0.5 * (self.high[j] + self.low[j]));
        let half = Tensor::from_shape_fn((1, d), |(_, j)| 0.5 * (self.high[j] - self.low[j]));
        (mid, half)
    }

    pub fn means(&self, states: &Tensor) -> Result<Tensor, AgentError> {
        let (mid, half) = self.mid_half();
        let mut out = self.net.predict(states)?;
        out.mapv_inplace(f64::tanh);
        Ok(out * &half + &mid)
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }

    pub fn clip(&self, action: &mut [f64]) {
        for (j, a) in action.iter_mut().enumerate() {
            *a = a.clamp(self.low[j], self.high[j]);
        }
    }
}

impl Policy {
    pub fn new_categorical(state_dim: usize, n_actions: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let spec = MlpSpec::new(state_dim, hidden, n_actions, Activation::Tanh);
        Self::Categorical(CategoricalPolicy {
            net: Mlp::new(&spec, rng),
        })
    }

    pub fn new_gaussian(
        state_dim: usize,
        low: Vec<f64>,
        high: Vec<f64>,
        hidden: &[usize],
        init_log_std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let d = low.len();
        let spec = MlpSpec::new(state_dim, hidden, d, Activation::Tanh);
        Self::Gaussian(GaussianPolicy {
            net: Mlp::new(&spec, rng),
            log_std: Tensor::from_elem((1, d), init_log_std),
            low,
            high,
        })
    }

    pub fn for_space(
        state_dim: usize,
        space: &ActionSpace,
        hidden: &[usize],
        init_log_std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        match space {
            ActionSpace::Discrete(n) => Self::new_categorical(state_dim, *n, hidden, rng),
            ActionSpace::Box { low, high } => {
                Self::new_gaussian(state_dim, low.clone(), high.clone(), hidden, init_log_std, rng)
            }
        }
    }

    fn net(&self) -> &Mlp {
        match self {
            Self::Categorical(p) => &p.net,
            Self::Gaussian(p) => &p.net,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.net().input_dim()
    }

    /// Width of a stored action: 1 for a categorical index.
    pub fn action_dim(&self) -> usize {
        match self {
            Self::Categorical(_) => 1,
            Self::Gaussian(p) => p.low.len(),
        }
    }

    /// Width of the action encoding fed to state-action networks.
    pub fn action_input_dim(&self) -> usize {
        self.net().output_dim()
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self, Self::Gaussian(_))
    }

    pub fn gaussian(&self) -> Option<&GaussianPolicy> {
        match self {
            Self::Gaussian(p) => Some(p),
            Self::Categorical(_) => None,
        }
    }

    /// Action probabilities per row (categorical only).
    pub fn probabilities(&self, states: &Tensor) -> Result<Tensor, AgentError> {
        let Self::Categorical(p) = self else {
            return Err(AgentError::Unsupported("probabilities of a continuous policy".into()));
        };
        let mut logits = p.net.predict(states)?;
        for mut row in logits.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|x| (x - m).exp());
            let total = row.sum();
            row.mapv_inplace(|x| x / total);
        }
        Ok(logits)
    }

    /// Reparameterized Gaussian sample `mean + std · noise`, clipped.
    pub fn sample_with_noise(&self, states: &Tensor, noise: &Tensor) -> Result<Tensor, AgentError> {
        let Self::Gaussian(p) = self else {
            return Err(AgentError::Unsupported("reparameterized sample of a categorical policy".into()));
        };
        if noise.dim() != (states.nrows(), p.low.len()) {
            return Err(AgentError::Shape(format!(
                "noise shape {:?} does not match {} states of action width {}",
                noise.dim(),
                states.nrows(),
                p.low.len()
            )));
        }
        let std = Tensor::from_shape_vec((1, p.low.len()), p.std()).expect("row");
        let mut out = p.means(states)? + &(noise * &std);
        for mut row in out.rows_mut() {
            p.clip(row.as_slice_mut().expect("contiguous row"));
        }
        Ok(out)
    }

    /// One action per row of `states`.
    pub fn sample_batch(&self, states: &Tensor, rng: &mut impl Rng) -> Result<Tensor, AgentError> {
        match self {
            Self::Categorical(_) => {
                let probs = self.probabilities(states)?;
                Ok(Tensor::from_shape_fn((states.nrows(), 1), |(r, _)| {
                    let u: f64 = rng.gen();
                    let mut acc = 0.0;
                    let row = probs.row(r);
                    for (k, p) in row.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            return k as f64;
                        }
                    }
                    (row.len() - 1) as f64
                }))
            }
            Self::Gaussian(p) => {
                let noise = Tensor::from_shape_fn((states.nrows(), p.low.len()), |_| rng.sample(StandardNormal));
                self.sample_with_noise(states, &noise)
            }
        }
    }

    pub fn sample(&self, state: &[f64], rng: &mut impl Rng) -> Result<Vec<f64>, AgentError> {
        Ok(self.sample_batch(&row(state), rng)?.into_raw_vec_and_offset().0)
    }

    /// Greedy action: the mean for a Gaussian, the arg-max for a categorical.
    pub fn mode(&self, state: &[f64]) -> Result<Vec<f64>, AgentError> {
        match self {
            Self::Categorical(_) => {
                let probs = self.probabilities(&row(state))?;
                let best = probs
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (k, &p)| if p > acc.1 { (k, p) } else { acc });
                Ok(vec![best.0 as f64])
            }
            Self::Gaussian(p) => Ok(p.means(&row(state))?.into_raw_vec_and_offset().0),
        }
    }

    /// One-hot rows for categorical indices; continuous actions pass through.
    pub fn encode_actions(&self, actions: &Tensor) -> Result<Tensor, AgentError> {
        match self {
            Self::Gaussian(_) => Ok(actions.clone()),
            Self::Categorical(_) => {
                let idx = action_indices(actions, self.action_input_dim())?;
                let mut out = Tensor::zeros((actions.nrows(), self.action_input_dim()));
                for (r, k) in idx.into_iter().enumerate() {
                    out[[r, k]] = 1.0;
                }
                Ok(out)
            }
        }
    }

    pub fn bind(&self, g: &mut Graph) -> PolicyVars {
        match self {
            Self::Categorical(p) => PolicyVars {
                net: p.net.bind(g),
                log_std: None,
            },
            Self::Gaussian(p) => PolicyVars {
                net: p.net.bind(g),
                log_std: Some(g.param(p.log_std.clone())),
            },
        }
    }

    pub fn bind_frozen(&self, g: &mut Graph) -> PolicyVars {
        match self {
            Self::Categorical(p) => PolicyVars {
                net: p.net.bind_frozen(g),
                log_std: None,
            },
            Self::Gaussian(p) => PolicyVars {
                net: p.net.bind_frozen(g),
                log_std: Some(g.constant(p.log_std.clone())),
            },
        }
    }

    /// Recorded `log π(a|s)` and entropy, each `rows × 1`.
    pub fn log_prob_and_entropy(
        &self,
        g: &mut Graph,
        vars: &PolicyVars,
        states: Var,
        actions: &Tensor,
    ) -> Result<(Var, Var), AgentError> {
        let n = g.shape(states).0;
        if actions.nrows() != n {
            return Err(AgentError::Shape(format!("{} actions for {n} states", actions.nrows())));
        }
        match self {
            Self::Categorical(p) => {
                let idx = action_indices(actions, p.net.output_dim())?;
                let logits = p.net.forward(g, &vars.net, states)?;
                let lsm = g.log_softmax(logits);
                let logp = g.gather(lsm, &idx)?;
                let probs = g.exp(lsm);
                let plogp = g.mul(probs, lsm)?;
                let neg = g.sum_cols(plogp);
                let entropy = g.scale(neg, -1.0);
                Ok((logp, entropy))
            }
            Self::Gaussian(p) => {
                let d = p.low.len();
                if actions.ncols() != d {
                    return Err(AgentError::Shape(format!(
                        "continuous actions have width {}, policy expects {d}",
                        actions.ncols()
                    )));
                }
                let log_std = vars.log_std.expect("gaussian binding carries log-std");
                let mean = gaussian_mean(g, p, &vars.net, states, n)?;
                let a = g.constant(actions.clone());
                let diff = g.sub(a, mean)?;
                let neg_log_std = g.scale(log_std, -1.0);
                let inv_std = g.exp(neg_log_std);
                let inv_std = g.broadcast_rows(inv_std, n)?;
                let z = g.mul(diff, inv_std)?;
                let z2 = g.square(z);
                let quad = g.sum_cols(z2);
                let quad = g.scale(quad, -0.5);
                let ls = g.broadcast_rows(log_std, n)?;
                let ls_sum = g.sum_cols(ls);
                let logp = g.sub(quad, ls_sum)?;
                let logp = g.add_scalar(logp, -0.5 * d as f64 * (2.0 * PI).ln());
                let entropy = g.add_scalar(ls_sum, 0.5 * d as f64 * (1.0 + (2.0 * PI).ln()));
                Ok((logp, entropy))
            }
        }
    }

    pub fn log_prob(&self, states: &Tensor, actions: &Tensor) -> Result<Vec<f64>, AgentError> {
        let mut g = Graph::new();
        let vars = self.bind_frozen(&mut g);
        let s = g.constant(states.clone());
        let (logp, _) = self.log_prob_and_entropy(&mut g, &vars, s, actions)?;
        Ok(g.value(logp).iter().copied().collect())
    }

    pub fn mean_entropy(&self, states: &Tensor) -> Result<f64, AgentError> {
        let mut g = Graph::new();
        let vars = self.bind_frozen(&mut g);
        let s = g.constant(states.clone());
        let actions = match self {
            Self::Categorical(_) => Tensor::zeros((states.nrows(), 1)),
            Self::Gaussian(p) => p.means(states)?,
        };
        let (_, ent) = self.log_prob_and_entropy(&mut g, &vars, s, &actions)?;
        Ok(g.value(ent).mean().unwrap_or(0.0))
    }

    /// `∇_a log π(a|s)` per row, analytic for the Gaussian: `-(a - μ(s)) / σ²`.
    pub fn action_score(&self, states: &Tensor, actions: &Tensor) -> Result<Tensor, AgentError> {
        let Self::Gaussian(p) = self else {
            return Err(AgentError::Unsupported("action score of a categorical policy".into()));
        };
        let means = p.means(states)?;
        if actions.dim() != means.dim() {
            return Err(AgentError::Shape(format!(
                "actions {:?} vs means {:?}",
                actions.dim(),
                means.dim()
            )));
        }
        let var = Tensor::from_shape_fn((1, p.low.len()), |(_, j)| (2.0 * p.log_std[[0, j]]).exp());
        Ok((&means - actions) / &var)
    }

    /// `log π(a|s)` and `∇_s log π(a|s)` per row.
    pub fn state_score(&self, states: &Tensor, actions: &Tensor) -> Result<(Vec<f64>, Tensor), AgentError> {
        let mut g = Graph::new();
        let vars = self.bind_frozen(&mut g);
        let s = g.param(states.clone());
        let (logp, _) = self.log_prob_and_entropy(&mut g, &vars, s, actions)?;
        let total = g.sum_all(logp);
        let grads = g.backward(total)?;
        let values = g.value(logp).iter().copied().collect();
        Ok((values, grads.get_or_zeros(s, states.dim())))
    }

    pub fn collect_grads(&self, grads: &Gradients, vars: &PolicyVars) -> Vec<Tensor> {
        let mut out = self.net().collect_grads(grads, &vars.net);
        if let (Self::Gaussian(p), Some(v)) = (self, vars.log_std) {
            out.push(grads.get_or_zeros(v, p.log_std.dim()));
        }
        out
    }

    pub fn clamp_log_std(&mut self) {
        if let Self::Gaussian(p) = self {
            p.log_std.mapv_inplace(|l| l.clamp(LOG_STD_RANGE.0, LOG_STD_RANGE.1));
        }
    }
}

fn gaussian_mean(g: &mut Graph, p: &GaussianPolicy, vars: &MlpVars, states: Var, n: usize) -> Result<Var, AgentError> {
    let (mid, half) = p.mid_half();
    let out = p.net.forward(g, vars, states)?;
    let t = g.tanh(out);
    let half = g.constant(half.broadcast((n, p.low.len())).expect("row").to_owned());
    let scaled = g.mul(t, half)?;
    let mid = g.constant(mid);
    Ok(g.add_bias(scaled, mid)?)
}

fn row(v: &[f64]) -> Tensor {
    Tensor::from_shape_vec((1, v.len()), v.to_vec()).expect("row vector")
}

fn action_indices(actions: &Tensor, n: usize) -> Result<Vec<usize>, AgentError> {
    if actions.ncols() != 1 {
        return Err(AgentError::Shape(format!(
            "categorical actions are single indices, got width {}",
            actions.ncols()
        )));
    }
    actions
        .iter()
        .map(|&a| {
            if a >= 0.0 && a.fract() == 0.0 && (a as usize) < n {
                Ok(a as usize)
            } else {
                Err(AgentError::Shape(format!("action {a} is not an index below {n}")))
            }
        })
        .collect()
}

impl Parameterized for Policy {
    fn parameters(&self) -> Vec<&Tensor> {
        match self {
            Self::Categorical(p) => p.net.parameters(),
            Self::Gaussian(p) => {
                let mut out = p.net.parameters();
                out.push(&p.log_std);
                out
            }
        }
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Self::Categorical(p) => p.net.parameters_mut(),
            Self::Gaussian(p) => {
                let mut out = p.net.parameters_mut();
                out.push(&mut p.log_std);
                out
            }
        }
    }
}
