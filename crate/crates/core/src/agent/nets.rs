use rand::Rng;

use super::{AgentError, Policy};
use crate::numerics::{
    clip_global_norm, Activation, Adam, Graph, Mlp, MlpSpec, Parameterized, StepOutcome, Tensor,
};

/// A scalar function of `(state, action)` whose input gradients are
/// available. Rows are independent queries.
pub trait StateActionFn {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn values(&self, states: &Tensor, actions: &Tensor) -> Result<Vec<f64>, AgentError>;
    /// Values plus `∂f/∂s` and `∂f/∂a` per row.
    fn values_and_input_grads(
        &self,
        states: &Tensor,
        actions: &Tensor,
    ) -> Result<(Vec<f64>, Tensor, Tensor), AgentError>;
}

fn check_rows(states: &Tensor, actions: &Tensor, ds: usize, da: usize) -> Result<(), AgentError> {
    if states.nrows() != actions.nrows() || states.ncols() != ds || actions.ncols() != da {
        return Err(AgentError::Shape(format!(
            "expected states n×{ds} and actions n×{da}, got {:?} and {:?}",
            states.dim(),
            actions.dim()
        )));
    }
    Ok(())
}

/// One regression step of `net` toward `targets` under squared error.
/// Returns the loss before the step.
pub(crate) fn mse_step(
    net: &mut Mlp,
    opt: &mut Adam,
    inputs: &Tensor,
    targets: &[f64],
    coef: f64,
    max_norm: f64,
) -> Result<(f64, StepOutcome), AgentError> {
    if inputs.nrows() != targets.len() || targets.is_empty() {
        return Err(AgentError::Shape(format!(
            "{} regression inputs for {} targets",
            inputs.nrows(),
            targets.len()
        )));
    }
    let mut g = Graph::new();
    let vars = net.bind(&mut g);
    let x = g.constant(inputs.clone());
    let y = net.forward(&mut g, &vars, x)?;
    let t = g.constant(Tensor::from_shape_vec((targets.len(), 1), targets.to_vec()).expect("column"));
    let err = g.sub(y, t)?;
    let sq = g.square(err);
    let mse = g.mean_all(sq);
    let loss = g.scale(mse, coef);
    let value = g.scalar(mse);
    if !value.is_finite() || g.nonfinite().is_some() {
        log::warn!("regression loss is not finite; step skipped");
        return Ok((value, StepOutcome::Skipped));
    }
    let grads = g.backward(loss)?;
    let mut grads = net.collect_grads(&grads, &vars);
    clip_global_norm(&mut grads, max_norm);
    let outcome = opt.step(net.parameters_mut(), &grads)?;
    Ok((value, outcome))
}

/// MLP over `[state, encoded action]` with a scalar output.
#[derive(Debug, Clone, PartialEq)]
pub struct StateActionNet {
    pub net: Mlp,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Actions are category indices expanded to this many one-hot columns.
    pub one_hot: Option<usize>,
}

impl StateActionNet {
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let spec = MlpSpec::new(state_dim + action_dim, hidden, 1, Activation::Tanh);
        Self {
            net: Mlp::new(&spec, rng),
            state_dim,
            action_dim,
            one_hot: None,
        }
    }

    /// Network that reads category indices, one-hot encoded internally.
    pub fn new_discrete(state_dim: usize, n_actions: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let spec = MlpSpec::new(state_dim + n_actions, hidden, 1, Activation::Tanh);
        Self {
            net: Mlp::new(&spec, rng),
            state_dim,
            action_dim: 1,
            one_hot: Some(n_actions),
        }
    }

    pub fn for_policy(policy: &Policy, hidden: &[usize], rng: &mut impl Rng) -> Self {
        if policy.is_gaussian() {
            Self::new(policy.state_dim(), policy.action_dim(), hidden, rng)
        } else {
            Self::new_discrete(policy.state_dim(), policy.action_input_dim(), hidden, rng)
        }
    }

    fn inputs(&self, states: &Tensor, actions: &Tensor) -> Result<Tensor, AgentError> {
        check_rows(states, actions, self.state_dim, self.action_dim)?;
        let enc = match self.one_hot {
            None => actions.clone(),
            Some(n) => {
                let mut out = Tensor::zeros((actions.nrows(), n));
                for (r, &a) in actions.iter().enumerate() {
                    if !(a >= 0.0 && a.fract() == 0.0 && (a as usize) < n) {
                        return Err(AgentError::Shape(format!("action {a} is not an index below {n}")));
                    }
                    out[[r, a as usize]] = 1.0;
                }
                out
            }
        };
        Ok(ndarray::concatenate![ndarray::Axis(1), *states, enc])
    }

    pub fn predict(&self, states: &Tensor, actions: &Tensor) -> Result<Vec<f64>, AgentError> {
        Ok(self.net.predict(&self.inputs(states, actions)?)?.iter().copied().collect())
    }

    pub fn regress(
        &mut self,
        opt: &mut Adam,
        states: &Tensor,
        actions: &Tensor,
        targets: &[f64],
        max_norm: f64,
    ) -> Result<(f64, StepOutcome), AgentError> {
        let x = self.inputs(states, actions)?;
        mse_step(&mut self.net, opt, &x, targets, 1.0, max_norm)
    }
}

impl StateActionFn for StateActionNet {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn values(&self, states: &Tensor, actions: &Tensor) -> Result<Vec<f64>, AgentError> {
        self.predict(states, actions)
    }

    /// Category indices have no gradient; the action block is zero for them.
    fn values_and_input_grads(
        &self,
        states: &Tensor,
        actions: &Tensor,
    ) -> Result<(Vec<f64>, Tensor, Tensor), AgentError> {
        let x = self.inputs(states, actions)?;
        let mut g = Graph::new();
        let vars = self.net.bind_frozen(&mut g);
        let xv = g.param(x);
        let y = self.net.forward(&mut g, &vars, xv)?;
        let total = g.sum_all(y);
        let grads = g.backward(total)?;
        let gx = grads.get_or_zeros(xv, (states.nrows(), self.net.input_dim()));
        let gs = gx.slice(ndarray::s![.., ..self.state_dim]).to_owned();
        let ga = match self.one_hot {
            None => gx.slice(ndarray::s![.., self.state_dim..]).to_owned(),
            Some(_) => Tensor::zeros(actions.dim()),
        };
        Ok((g.value(y).iter().copied().collect(), gs, ga))
    }
}

impl Parameterized for StateActionNet {
    fn parameters(&self) -> Vec<&Tensor> {
        self.net.parameters()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.parameters_mut()
    }
}

macro_rules! state_action_wrapper {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name(pub StateActionNet);

        impl std::ops::Deref for $name {
            type Target = StateActionNet;
            fn deref(&self) -> &StateActionNet {
                &self.0
            }
        }

        impl std::ops::DerefMut for $name {
            fn deref_mut(&mut self) -> &mut StateActionNet {
                &mut self.0
            }
        }

        impl StateActionFn for $name {
            fn state_dim(&self) -> usize {
                self.0.state_dim
            }
            fn action_dim(&self) -> usize {
                self.0.action_dim
            }
            fn values(&self, states: &Tensor, actions: &Tensor) -> Result<Vec<f64>, AgentError> {
                self.0.values(states, actions)
            }
            fn values_and_input_grads(
                &self,
                states: &Tensor,
                actions: &Tensor,
            ) -> Result<(Vec<f64>, Tensor, Tensor), AgentError> {
                self.0.values_and_input_grads(states, actions)
            }
        }

        impl Parameterized for $name {
            fn parameters(&self) -> Vec<&Tensor> {
                self.0.parameters()
            }
            fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
                self.0.parameters_mut()
            }
        }
    };
}

state_action_wrapper!(
    /// Learned advantage `A_ω(s, a)`, regressed onto GAE targets.
    AdvantageNet
);
state_action_wrapper!(
    /// Learned reward `r_ψ(s, a)`, fit on real transitions only.
    RewardModel
);

/// `A_ω(s, a)` and its exact input gradients at one point.
pub fn advantage_and_input_grad(
    net: &AdvantageNet,
    state: &[f64],
    action: &[f64],
) -> Result<(f64, Vec<f64>, Vec<f64>), AgentError> {
    let s = Tensor::from_shape_vec((1, state.len()), state.to_vec()).expect("row");
    let a = Tensor::from_shape_vec((1, action.len()), action.to_vec()).expect("row");
    let (v, gs, ga) = net.values_and_input_grads(&s, &a)?;
    Ok((v[0], gs.into_raw_vec_and_offset().0, ga.into_raw_vec_and_offset().0))
}

/// State value `V(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueCritic {
    pub net: Mlp,
}

impl ValueCritic {
    pub fn new(state_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let spec = MlpSpec::new(state_dim, hidden, 1, Activation::Tanh);
        Self {
            net: Mlp::new(&spec, rng),
        }
    }

    pub fn values(&self, states: &Tensor) -> Result<Vec<f64>, AgentError> {
        Ok(self.net.predict(states)?.iter().copied().collect())
    }

    pub fn regress(
        &mut self,
        opt: &mut Adam,
        states: &Tensor,
        targets: &[f64],
        coef: f64,
        max_norm: f64,
    ) -> Result<(f64, StepOutcome), AgentError> {
        mse_step(&mut self.net, opt, states, targets, coef, max_norm)
    }
}

impl Parameterized for ValueCritic {
    fn parameters(&self) -> Vec<&Tensor> {
        self.net.parameters()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.parameters_mut()
    }
}

/// `f(s, a) = w·s + v·a + c`; handy as an exact stand-in for a learned net.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFn {
    pub state_weights: Vec<f64>,
    pub action_weights: Vec<f64>,
    pub bias: f64,
}

impl StateActionFn for LinearFn {
    fn state_dim(&self) -> usize {
        self.state_weights.len()
    }

    fn action_dim(&self) -> usize {
        self.action_weights.len()
    }

    fn values(&self, states: &Tensor, actions: &Tensor) -> Result<Vec<f64>, AgentError> {
        check_rows(states, actions, self.state_dim(), self.action_dim())?;
        Ok(states
            .rows()
            .into_iter()
            .zip(actions.rows())
            .map(|(s, a)| {
                let ws: f64 = s.iter().zip(&self.state_weights).map(|(x, w)| x * w).sum();
                let wa: f64 = a.iter().zip(&self.action_weights).map(|(x, w)| x * w).sum();
                ws + wa + self.bias
            })
            .collect())
    }

    fn values_and_input_grads(
        &self,
        states: &Tensor,
        actions: &Tensor,
    ) -> Result<(Vec<f64>, Tensor, Tensor), AgentError> {
        let values = self.values(states, actions)?;
        let n = states.nrows();
        let gs = Tensor::from_shape_fn((n, self.state_dim()), |(_, j)| self.state_weights[j]);
        let ga = Tensor::from_shape_fn((n, self.action_dim()), |(_, j)| self.action_weights[j]);
        Ok((values, gs, ga))
    }
}

/// Lookup table `f(s, a)` over one-hot states and index actions. Not
/// differentiable; gradients are reported as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularFn {
    pub n_states: usize,
    pub n_actions: usize,
    pub table: Vec<f64>,
}

impl StateActionFn for TabularFn {
    fn state_dim(&self) -> usize {
        self.n_states
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn values(&self, states: &Tensor, actions: &Tensor) -> Result<Vec<f64>, AgentError> {
        check_rows(states, actions, self.n_states, 1)?;
        states
            .rows()
            .into_iter()
            .zip(actions.iter())
            .map(|(s, &a)| {
                let idx = s.iter().position(|&v| v == 1.0);
                match idx {
                    Some(k) if (a as usize) < self.n_actions && a >= 0.0 => {
                        Ok(self.table[k * self.n_actions + a as usize])
                    }
                    _ => Err(AgentError::Shape(format!("no table entry for state {s} action {a}"))),
                }
            })
            .collect()
    }

    fn values_and_input_grads(
        &self,
        states: &Tensor,
        actions: &Tensor,
    ) -> Result<(Vec<f64>, Tensor, Tensor), AgentError> {
        Ok((self.values(states, actions)?, Tensor::zeros(states.dim()), Tensor::zeros(actions.dim())))
    }
}

/// `Ā(s_k, a) = f(s_k, a) - mean_j f(s_k, a_j)` with `a_j ~ π(·|s_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteredAdvantage {
    pub states: Tensor,
    /// Monte-Carlo baseline per state.
    pub offsets: Vec<f64>,
    /// The policy samples behind each offset, `n_mc × d_a` per state.
    pub samples: Vec<Tensor>,
}

impl CenteredAdvantage {
    /// Centered values at state `k` for a batch of actions.
    pub fn values(&self, f: &dyn StateActionFn, k: usize, actions: &Tensor) -> Result<Vec<f64>, AgentError> {
        let s = self.states.row(k).to_owned().insert_axis(ndarray::Axis(0));
        let s = s.broadcast((actions.nrows(), s.ncols())).expect("row").to_owned();
        Ok(f.values(&s, actions)?.into_iter().map(|v| v - self.offsets[k]).collect())
    }
}

pub fn center_advantage(
    f: &dyn StateActionFn,
    states: &Tensor,
    policy: &Policy,
    n_mc: usize,
    rng: &mut impl Rng,
) -> Result<CenteredAdvantage, AgentError> {
    if n_mc == 0 {
        return Err(AgentError::Shape("centering needs at least one policy sample".into()));
    }
    let mut offsets = Vec::with_capacity(states.nrows());
    let mut samples = Vec::with_capacity(states.nrows());
    for s in states.rows() {
        let rep = s.broadcast((n_mc, s.len())).expect("row").to_owned();
        let actions = policy.sample_batch(&rep, rng)?;
        let values = f.values(&rep, &actions)?;
        offsets.push(values.iter().sum::<f64>() / n_mc as f64);
        samples.push(actions);
    }
    Ok(CenteredAdvantage {
        states: states.clone(),
        offsets,
        samples,
    })
}
