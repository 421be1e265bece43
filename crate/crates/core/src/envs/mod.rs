//! Environments behind one reset/step interface: finite tabular MDPs and two
//! toy continuous-control tasks.

mod continuous;
mod tabular;

pub use continuous::{make_continuous_env, ContinuousEnv, ContinuousKind};
pub use tabular::{build_motivating_mdp, motivating, random_tabular_mdp, TabularEnv, TabularMdp};

use rand::RngCore;

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("unknown environment {0}")]
    UnknownEnv(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ActionSpace {
    Discrete(usize),
    Box { low: Vec<f64>, high: Vec<f64> },
}

impl ActionSpace {
    /// Width of the action vector fed to networks.
    pub fn dim(&self) -> usize {
        match self {
            Self::Discrete(_) => 1,
            Self::Box { low, .. } => low.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// Episode ended here, by a terminal state or by the length limit.
    pub done: bool,
    pub episode: u64,
    pub t: usize,
}

impl Transition {
    pub fn is_finite(&self) -> bool {
        self.reward.is_finite()
            && self
                .state
                .iter()
                .chain(&self.action)
                .chain(&self.next_state)
                .all(|v| v.is_finite())
    }
}

/// Episode id and within-episode time index.
#[derive(Debug, Clone, Default)]
pub(crate) struct EpisodeClock {
    pub episode: u64,
    next_t: usize,
    started: bool,
}

impl EpisodeClock {
    pub fn start_episode(&mut self) {
        if self.started {
            self.episode += 1;
        }
        self.started = true;
        self.next_t = 0;
    }

    pub fn tick(&mut self) -> usize {
        let t = self.next_t;
        self.next_t += 1;
        t
    }
}

pub trait Environment {
    fn observation_dim(&self) -> usize;
    fn action_space(&self) -> ActionSpace;
    fn max_episode_steps(&self) -> usize;
    /// Starts a new episode and returns its first observation.
    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64>;
    fn step(&mut self, action: &[f64], rng: &mut dyn RngCore) -> Result<Transition, EnvError>;
}

#[cfg(test)]
mod tests {
    use super::motivating::*;
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn motivating_step_from_s1_a2() {
        let mdp = build_motivating_mdp();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tr = mdp.step(S1, A2, &mut rng).unwrap();
        assert_eq!(tr.next_state, mdp.one_hot(S6));
        assert_eq!(tr.reward, -5.0);
        assert!(!tr.done);
    }

    #[test]
    fn motivating_constants() {
        let mdp = build_motivating_mdp();
        assert_eq!(mdp.reward(S8, A1), 10.0);
        assert_eq!(mdp.reward(S2, A1), R_BAR);
        assert_eq!(mdp.gamma, 1.0);
        // every reward along both branches is non-positive apart from the hidden r*
        for s in BRANCH_1.iter().chain(&BRANCH_2[..3]) {
            for a in [A1, A2] {
                assert!(mdp.reward(*s, a) <= 0.0);
            }
        }
    }

    #[test]
    fn terminal_is_absorbing() {
        let mdp = build_motivating_mdp();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in [S5, S9] {
            for a in [A1, A2] {
                let tr = mdp.step(s, a, &mut rng).unwrap();
                assert_eq!(tr.next_state, mdp.one_hot(s));
                assert_eq!(tr.reward, 0.0);
                assert!(tr.done);
            }
        }
    }

    #[test]
    fn deterministic_steps_repeat() {
        let mdp = build_motivating_mdp();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let first = mdp.sample_next(S3, A1, &mut rng).unwrap();
        for _ in 0..100 {
            assert_eq!(mdp.sample_next(S3, A1, &mut rng).unwrap(), first);
        }
    }

    #[test]
    fn invalid_indices_rejected() {
        let mdp = build_motivating_mdp();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(mdp.step(9, 0, &mut rng), Err(EnvError::InvalidState(_))));
        assert!(matches!(mdp.step(0, 2, &mut rng), Err(EnvError::InvalidAction(_))));
    }

    #[test]
    fn broken_mdp_rejected() {
        let mut mdp = build_motivating_mdp();
        mdp.transitions[0] += 1e-6;
        assert!(mdp.validate().is_err());
        let mut mdp = build_motivating_mdp();
        mdp.rewards[S5 * 2] = 1.0;
        assert!(mdp.validate().is_err());
        assert!(random_tabular_mdp(0, 1, 2).is_err());
    }

    #[test]
    fn json_round_trip() {
        let mdp = random_tabular_mdp(11, 4, 3).unwrap();
        assert_eq!(TabularMdp::from_json(&mdp.to_json()).unwrap(), mdp);
    }

    #[test]
    fn random_mdp_sweep_has_no_violations() {
        for seed in 0..1000 {
            let mdp = random_tabular_mdp(seed, 2 + (seed % 5) as usize, 2 + (seed % 3) as usize).unwrap();
            mdp.validate().unwrap();
            assert!((0.8..=0.99).contains(&mdp.gamma));
            assert!(mdp.rewards.iter().all(|r| (-1.0..=1.0).contains(r)));
        }
    }

    #[test]
    fn tabular_env_accounting() {
        let mut env = TabularEnv::new(build_motivating_mdp(), 10);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let obs = env.reset(&mut rng);
        assert_eq!(obs, env.mdp.one_hot(S1));
        let mut rewards = Vec::new();
        loop {
            let tr = env.step(&[A2 as f64], &mut rng).unwrap();
            rewards.push(tr.reward);
            if tr.done {
                break;
            }
        }
        assert_eq!(rewards, vec![-5.0, -5.0, -5.0, 10.0]);
        assert_eq!(env.state_index(), S9);
        assert!(env.step(&[0.5], &mut rng).is_err());
    }

    #[test]
    fn point_mass_at_goal_is_free() {
        let mut env = make_continuous_env("point-mass").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        env.reset_to(&[0.0, 0.0, 0.0, 0.0]).unwrap();
        let tr = env.step(&[0.0, 0.0], &mut rng).unwrap();
        assert_eq!(tr.reward, 0.0);
        assert_eq!(tr.next_state, vec![0.0; 4]);
    }

    #[test]
    fn point_mass_rest_is_fixed_point() {
        let mut env = make_continuous_env("point-mass").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        env.reset_to(&[0.3, -0.7, 0.0, 0.0]).unwrap();
        let tr = env.step(&[0.0, 0.0], &mut rng).unwrap();
        assert_eq!(tr.next_state, vec![0.3, -0.7, 0.0, 0.0]);
    }

    #[test]
    fn point_mass_unit_force_euler_step() {
        let mut env = make_continuous_env("point-mass").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        env.reset_to(&[0.0; 4]).unwrap();
        let tr = env.step(&[1.0, 0.0], &mut rng).unwrap();
        assert_eq!(&tr.next_state[2..], &[0.05, 0.0]);
        assert_eq!(&tr.next_state[..2], &[0.0, 0.0]);
        // clipped to the force bound
        let tr = env.step(&[5.0, -5.0], &mut rng).unwrap();
        assert_eq!(tr.action, vec![1.0, -1.0]);
    }

    #[test]
    fn pendulum_upright_rest_is_free() {
        let mut env = make_continuous_env("pendulum-like").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        env.reset_to(&[1.0, 0.0, 0.0]).unwrap();
        let tr = env.step(&[0.0], &mut rng).unwrap();
        assert_eq!(tr.reward, 0.0);
        assert_eq!(tr.next_state, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn pendulum_hanging_cost() {
        let mut env = make_continuous_env("pendulum-like").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        env.reset_to(&[-1.0, 0.0, 2.0]).unwrap();
        let tr = env.step(&[1.0], &mut rng).unwrap();
        let pi = std::f64::consts::PI;
        let expected = -(pi * pi + 0.1 * 4.0 + 0.001);
        assert!((tr.reward - expected).abs() < 1e-12);
    }

    #[test]
    fn unknown_env_rejected() {
        let err = make_continuous_env("cartpole").unwrap_err();
        assert!(err.to_string().contains("point-mass"));
    }

    #[test]
    fn episodes_end_within_limit() {
        for name in ContinuousKind::NAMES {
            let mut env = make_continuous_env(name).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let dim = env.action_space().dim();
            for ep in 0..2u64 {
                env.reset(&mut rng);
                let mut steps = 0;
                loop {
                    let tr = env.step(&vec![0.7; dim], &mut rng).unwrap();
                    assert!(tr.is_finite());
                    assert_eq!((tr.episode, tr.t), (ep, steps));
                    steps += 1;
                    if tr.done {
                        break;
                    }
                }
                assert_eq!(steps, env.max_episode_steps());
            }
        }
    }

    proptest! {
        #[test]
        fn continuous_steps_stay_finite(
            seed in any::<u64>(),
            actions in proptest::collection::vec(-1e3f64..1e3, 1..60),
            pendulum in any::<bool>(),
        ) {
            let kind = if pendulum { ContinuousKind::Pendulum } else { ContinuousKind::PointMass };
            let mut env = ContinuousEnv::new(kind);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            env.reset(&mut rng);
            let b = env.action_bound();
            for a in actions {
                let tr = env.step(&vec![a; env.action_dim()], &mut rng).unwrap();
                prop_assert!(tr.is_finite());
                prop_assert!(tr.action.iter().all(|u| u.abs() <= b));
            }
        }

        #[test]
        fn random_rows_on_simplex(seed in any::<u64>(), ns in 2usize..8, na in 2usize..5) {
            let a = random_tabular_mdp(seed, ns, na).unwrap();
            prop_assert_eq!(&a, &random_tabular_mdp(seed, ns, na).unwrap());
            for s in 0..ns {
                for u in 0..na {
                    prop_assert!((a.row(s, u).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                }
            }
        }
    }
}
