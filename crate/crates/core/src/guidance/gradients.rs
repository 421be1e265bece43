use crate::agent::{AgentError, Policy, StateActionFn};
use crate::numerics::{sigmoid, Tensor};

/// Guide gradient over `n` (state, action) steps in raw units, one row per
/// step, after per-step clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct GuideGradient {
    pub states: Tensor,
    pub actions: Tensor,
    /// The guided quantity per step (advantage, reward or log-likelihood).
    pub values: Vec<f64>,
    /// Per-step multipliers; all ones except under the sigmoid guide.
    pub weights: Vec<f64>,
    /// Steps whose gradient was non-finite and got zeroed.
    pub zeroed: usize,
}

impl GuideGradient {
    fn from_parts(values: Vec<f64>, weights: Vec<f64>, mut states: Tensor, mut actions: Tensor, clip: f64) -> Self {
        let mut zeroed = 0;
        for r in 0..states.nrows() {
            let (mut s, mut a) = (states.row_mut(r), actions.row_mut(r));
            let sq: f64 = s.iter().chain(a.iter()).map(|v| v * v).sum();
            let norm = sq.sqrt();
            if !norm.is_finite() {
                zeroed += 1;
                s.fill(0.0);
                a.fill(0.0);
            } else if norm > clip {
                let k = clip / norm;
                s.mapv_inplace(|v| v * k);
                a.mapv_inplace(|v| v * k);
            }
        }
        if zeroed > 0 {
            log::warn!("{zeroed} guide steps had non-finite gradients and were zeroed");
        }
        Self {
            states,
            actions,
            values,
            weights,
            zeroed,
        }
    }

    /// L2 norm of step `t`'s gradient.
    pub fn step_norm(&self, t: usize) -> f64 {
        self.states
            .row(t)
            .iter()
            .chain(self.actions.row(t).iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn total_norm(&self) -> f64 {
        self.states.iter().chain(self.actions.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn weighted(f: &dyn StateActionFn, states: &Tensor, actions: &Tensor, clip: f64, sig: bool) -> Result<GuideGradient, AgentError> {
    let (values, mut gs, mut ga) = f.values_and_input_grads(states, actions)?;
    let weights: Vec<f64> = values
        .iter()
        .map(|v| if sig { sigmoid(-v) } else { 1.0 })
        .collect();
    for (r, w) in weights.iter().enumerate() {
        gs.row_mut(r).mapv_inplace(|v| v * w);
        ga.row_mut(r).mapv_inplace(|v| v * w);
    }
    Ok(GuideGradient::from_parts(values, weights, gs, ga, clip))
}

/// `σ(-A_t) ∇A_t` per step: the gradient of `Σ_t ln σ(A_t)`.
pub fn sag_gradient(
    advantage: &dyn StateActionFn,
    states: &Tensor,
    actions: &Tensor,
    clip: f64,
) -> Result<GuideGradient, AgentError> {
    weighted(advantage, states, actions, clip, true)
}

/// `∇A_t` per step: the gradient of `Σ_t A_t`.
pub fn eag_gradient(
    advantage: &dyn StateActionFn,
    states: &Tensor,
    actions: &Tensor,
    clip: f64,
) -> Result<GuideGradient, AgentError> {
    weighted(advantage, states, actions, clip, false)
}

/// `∇r_t` per step: the gradient of `Σ_t r(s_t, a_t)`.
pub fn reward_gradient(
    reward: &dyn StateActionFn,
    states: &Tensor,
    actions: &Tensor,
    clip: f64,
) -> Result<GuideGradient, AgentError> {
    weighted(reward, states, actions, clip, false)
}

/// `∇_s log π(a_t|s_t)` per step, with `∇_a log π` in the action block.
pub fn policy_gradient(policy: &Policy, states: &Tensor, actions: &Tensor, clip: f64) -> Result<GuideGradient, AgentError> {
    let (values, gs) = policy.state_score(states, actions)?;
    let ga = if policy.is_gaussian() {
        policy.action_score(states, actions)?
    } else {
        Tensor::zeros((states.nrows(), policy.action_dim()))
    };
    let n = values.len();
    Ok(GuideGradient::from_parts(values, vec![1.0; n], gs, ga, clip))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{LinearFn, StateActionNet};
    use crate::numerics::{central_difference, gradient_mismatch, log_sigmoid};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_shape_fn(shape, |_| StandardNormal.sample(rng))
    }

    fn linear(ws: Vec<f64>, wa: Vec<f64>) -> LinearFn {
        LinearFn {
            state_weights: ws,
            action_weights: wa,
            bias: 0.0,
        }
    }

    const NO_CLIP: f64 = 1e12;

    #[test]
    fn zero_advantage_gives_half_weights() {
        // A(s, a) = w·s is zero at s = 0
        let f = linear(vec![2.0, -1.0], vec![0.0]);
        let h = 4;
        let s = Tensor::zeros((h, 2));
        let a = Tensor::ones((h, 1));
        let g = sag_gradient(&f, &s, &a, NO_CLIP).unwrap();
        assert!(g.weights.iter().all(|w| *w == 0.5));
        let total: Vec<f64> = (0..2).map(|k| g.states.column(k).sum()).collect();
        assert_eq!(total, vec![0.5 * h as f64 * 2.0, 0.5 * h as f64 * -1.0]);
    }

    #[test]
    fn saturated_advantage_is_damped() {
        let f = linear(vec![1.0], vec![]);
        let s = Tensor::from_elem((1, 1), 60.0);
        let a = Tensor::zeros((1, 0));
        let g = sag_gradient(&f, &s, &a, NO_CLIP).unwrap();
        assert!(g.weights[0] < 1e-25);
        assert!(g.states[[0, 0]] < 1e-25);
    }

    #[test]
    fn zero_functions_give_zero_gradient() {
        let f = linear(vec![0.0; 3], vec![0.0; 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (s, a) = (randn((5, 3), &mut rng), randn((5, 2), &mut rng));
        for g in [eag_gradient(&f, &s, &a, 10.0).unwrap(), reward_gradient(&f, &s, &a, 10.0).unwrap()] {
            assert_eq!(g.total_norm(), 0.0);
        }
    }

    #[test]
    fn linear_reward_gradient_is_its_weights() {
        let f = linear(vec![0.5, -3.0], vec![1.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (s, a) = (randn((3, 2), &mut rng), randn((3, 1), &mut rng));
        let g = reward_gradient(&f, &s, &a, NO_CLIP).unwrap();
        for t in 0..3 {
            assert_eq!(g.states.row(t).to_vec(), vec![0.5, -3.0]);
            assert_eq!(g.actions[[t, 0]], 1.5);
        }
    }

    #[test]
    fn clipping_bounds_each_step() {
        let f = linear(vec![30.0, 40.0], vec![]);
        let s = Tensor::zeros((2, 2));
        let a = Tensor::zeros((2, 0));
        let g = eag_gradient(&f, &s, &a, 10.0).unwrap();
        for t in 0..2 {
            assert!((g.step_norm(t) - 10.0).abs() < 1e-12);
            assert!((g.states[[t, 0]] - 6.0).abs() < 1e-12);
        }
    }

    fn random_net(seed: u64) -> StateActionNet {
        StateActionNet::new(3, 2, &[16, 16], &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn check_fd(seed: u64, objective: impl Fn(&StateActionNet, &Tensor, &Tensor) -> f64, grad: impl Fn(&StateActionNet, &Tensor, &Tensor) -> GuideGradient) {
        let net = random_net(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let (s, a) = (randn((4, 3), &mut rng), randn((4, 2), &mut rng));
        let g = grad(&net, &s, &a);
        let fs = central_difference(|x| objective(&net, x, &a), &s, 1e-5);
        let fa = central_difference(|x| objective(&net, &s, x), &a, 1e-5);
        assert!(gradient_mismatch(&g.states, &fs, 1e-4, 1e-6) <= 1.0, "state block, seed {seed}");
        assert!(gradient_mismatch(&g.actions, &fa, 1e-4, 1e-6) <= 1.0, "action block, seed {seed}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn sag_matches_finite_differences(seed in 0u64..1_000_000) {
            check_fd(
                seed,
                |n, s, a| n.values(s, a).unwrap().iter().map(|v| log_sigmoid(*v)).sum(),
                |n, s, a| sag_gradient(n, s, a, NO_CLIP).unwrap(),
            );
        }

        #[test]
        fn eag_matches_finite_differences(seed in 0u64..1_000_000) {
            check_fd(
                seed,
                |n, s, a| n.values(s, a).unwrap().iter().sum(),
                |n, s, a| eag_gradient(n, s, a, NO_CLIP).unwrap(),
            );
        }

        #[test]
        fn reward_matches_finite_differences(seed in 0u64..1_000_000) {
            check_fd(
                seed,
                |n, s, a| n.values(s, a).unwrap().iter().sum(),
                |n, s, a| reward_gradient(n, s, a, NO_CLIP).unwrap(),
            );
        }

        #[test]
        fn sag_is_weighted_eag(seed in 0u64..1_000_000) {
            let net = random_net(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (s, a) = (randn((6, 3), &mut rng), randn((6, 2), &mut rng));
            let sag = sag_gradient(&net, &s, &a, NO_CLIP).unwrap();
            let eag = eag_gradient(&net, &s, &a, NO_CLIP).unwrap();
            for t in 0..6 {
                let w = sag.weights[t];
                prop_assert!(w > 0.0 && w < 1.0);
                prop_assert!(sag.step_norm(t) <= eag.step_norm(t));
                for k in 0..3 {
                    prop_assert!((sag.states[[t, k]] - w * eag.states[[t, k]]).abs() <= 1e-15 * eag.states[[t, k]].abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn policy_gradient_matches_finite_differences() {
        let policy = Policy::new_gaussian(3, vec![-2.0; 2], vec![2.0; 2], &[16], -0.3, &mut ChaCha8Rng::seed_from_u64(4));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (s, a) = (randn((4, 3), &mut rng), randn((4, 2), &mut rng));
        let g = policy_gradient(&policy, &s, &a, NO_CLIP).unwrap();
        let total = |x: &Tensor| policy.log_prob(x, &a).unwrap().iter().sum::<f64>();
        let fd = central_difference(total, &s, 1e-5);
        assert!(gradient_mismatch(&g.states, &fd, 1e-4, 1e-6) <= 1.0);
    }
}
