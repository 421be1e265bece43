use super::*;
use crate::envs::build_motivating_mdp;
use crate::numerics::{central_difference, gradient_mismatch, Activation, Linear, Mlp};
use crate::oracle::{motivating_policy, value_iteration};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_shape_fn(shape, |_| StandardNormal.sample(rng))
}

fn bandit_agent(entropy_coef: f64) -> Agent {
    bandit_agent_with_lr(entropy_coef, 0.01)
}

fn bandit_agent_with_lr(entropy_coef: f64, policy_lr: f64) -> Agent {
    let config = AgentConfig {
        entropy_coef,
        policy_lr,
        hidden: vec![8],
        ..AgentConfig::default()
    };
    Agent::new(1, &ActionSpace::Discrete(2), config, &mut rng(0))
}

#[test]
fn positive_advantage_raises_probability() {
    let mut agent = bandit_agent(0.01);
    let s = Tensor::ones((1, 1));
    let before = agent.policy.probabilities(&s).unwrap()[[0, 1]];
    agent
        .update_policy(&s, &Tensor::from_elem((1, 1), 1.0), &[2.0])
        .unwrap();
    let after = agent.policy.probabilities(&s).unwrap()[[0, 1]];
    assert!(after > before, "{before} -> {after}");
}

#[test]
fn zero_advantage_is_entropy_only() {
    let mut agent = bandit_agent(0.0);
    let s = Tensor::ones((4, 1));
    let a = Tensor::from_shape_vec((4, 1), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let before = agent.policy.clone();
    agent.update_policy(&s, &a, &[0.0; 4]).unwrap();
    assert_eq!(agent.policy, before);

    let mut agent = bandit_agent(0.5);
    let h0 = agent.policy.mean_entropy(&s).unwrap();
    for _ in 0..20 {
        agent.update_policy(&s, &a, &[0.0; 4]).unwrap();
    }
    assert!(agent.policy.mean_entropy(&s).unwrap() >= h0);
}

#[test]
fn bandit_keeps_entropy_early() {
    let defaults = AgentConfig::default();
    let mut agent = bandit_agent_with_lr(defaults.entropy_coef, defaults.policy_lr);
    let s = Tensor::ones((1, 1));
    let a = Tensor::from_elem((1, 1), 1.0);
    let mut last = 0.0;
    for _ in 0..100 {
        let before = agent.policy.log_prob(&s, &a).unwrap()[0];
        let (_, entropy, _) = agent.update_policy(&s, &a, &[1.0]).unwrap();
        assert!(entropy > 0.05, "entropy collapsed to {entropy}");
        last = agent.policy.log_prob(&s, &a).unwrap()[0];
        assert!(last >= before);
    }
    assert!(last > (0.5f64).ln());
}

#[test]
fn advantage_net_fits_frozen_batch() {
    let config = AgentConfig {
        advantage_lr: 3e-3,
        hidden: vec![32, 32],
        ..AgentConfig::default()
    };
    let space = ActionSpace::Box {
        low: vec![-1.0],
        high: vec![1.0],
    };
    let mut r = rng(3);
    let mut agent = Agent::new(2, &space, config, &mut r);
    let s = randn((16, 2), &mut r);
    let a = randn((16, 1), &mut r);
    let targets: Vec<f64> = (0..16).map(|k| 0.5 * (s[[k, 0]] - a[[k, 0]]).sin()).collect();
    for _ in 0..500 {
        agent.update_advantage(&s, &a, &targets).unwrap();
    }
    let pred = agent.advantage.predict(&s, &a).unwrap();
    let loss = pred.iter().zip(&targets).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / 16.0;
    assert!(loss < 1e-3, "training MSE {loss}");
}

#[test]
fn zero_weight_advantage_net() {
    let net = StateActionNet {
        net: Mlp::from_layers(
            vec![Linear::zeros(5, 4), Linear::zeros(4, 1)],
            vec![Activation::Tanh, Activation::Identity],
        )
        .unwrap(),
        state_dim: 3,
        action_dim: 2,
        one_hot: None,
    };
    let (v, gs, ga) = advantage_and_input_grad(&AdvantageNet(net), &[1.0, 2.0, 3.0], &[0.5, -0.5]).unwrap();
    assert_eq!(v, 0.0);
    assert!(gs.iter().chain(&ga).all(|g| *g == 0.0));
}

#[test]
fn linear_advantage_net_gradient_is_exact() {
    let mut layer = Linear::zeros(3, 1);
    layer.weight = Tensor::from_shape_vec((3, 1), vec![0.5, -2.0, 1.5]).unwrap();
    layer.bias[[0, 0]] = 0.25;
    let net = StateActionNet {
        net: Mlp::from_layers(vec![layer], vec![Activation::Identity]).unwrap(),
        state_dim: 2,
        action_dim: 1,
        one_hot: None,
    };
    let (v, gs, ga) = advantage_and_input_grad(&AdvantageNet(net), &[1.0, 1.0], &[2.0]).unwrap();
    assert_eq!(v, 0.5 - 2.0 + 3.0 + 0.25);
    assert_eq!(gs, vec![0.5, -2.0]);
    assert_eq!(ga, vec![1.5]);
}

#[test]
fn advantage_input_grads_match_finite_differences() {
    for seed in 0..100 {
        let mut r = rng(seed);
        let net = StateActionNet::new(3, 2, &[16, 16], &mut r);
        let s = randn((1, 3), &mut r);
        let a = randn((1, 2), &mut r);
        let (_, gs, ga) = net.values_and_input_grads(&s, &a).unwrap();
        let fs = central_difference(|x| net.predict(x, &a).unwrap()[0], &s, 1e-5);
        let fa = central_difference(|x| net.predict(&s, x).unwrap()[0], &a, 1e-5);
        assert!(gradient_mismatch(&gs, &fs, 1e-4, 1e-6) <= 1.0, "seed {seed}");
        assert!(gradient_mismatch(&ga, &fa, 1e-4, 1e-6) <= 1.0, "seed {seed}");
    }
}

fn gaussian(seed: u64) -> Policy {
    Policy::new_gaussian(3, vec![-2.0, -1.0], vec![2.0, 1.0], &[8], -0.3, &mut rng(seed))
}

#[test]
fn gaussian_log_prob_closed_form() {
    let p = gaussian(1);
    let s = randn((4, 3), &mut rng(2));
    let a = randn((4, 2), &mut rng(3));
    let lp = p.log_prob(&s, &a).unwrap();
    let g = p.gaussian().unwrap();
    let means = g.means(&s).unwrap();
    let std = g.std();
    for r in 0..4 {
        let expected: f64 = (0..2)
            .map(|j| {
                let z = (a[[r, j]] - means[[r, j]]) / std[j];
                -0.5 * z * z - std[j].ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
            })
            .sum();
        assert!((lp[r] - expected).abs() < 1e-12);
    }
}

#[test]
fn gaussian_scores_match_finite_differences() {
    let p = gaussian(4);
    let mut r = rng(5);
    let s = randn((1, 3), &mut r);
    let a = randn((1, 2), &mut r);
    let score = p.action_score(&s, &a).unwrap();
    let fd = central_difference(|x| p.log_prob(&s, x).unwrap()[0], &a, 1e-5);
    assert!(gradient_mismatch(&score, &fd, 1e-4, 1e-6) <= 1.0);
    let (_, ds) = p.state_score(&s, &a).unwrap();
    let fd = central_difference(|x| p.log_prob(x, &a).unwrap()[0], &s, 1e-5);
    assert!(gradient_mismatch(&ds, &fd, 1e-4, 1e-6) <= 1.0);
}

#[test]
fn gaussian_samples_respect_bounds() {
    let p = gaussian(6);
    let mut r = rng(7);
    let s = randn((500, 3), &mut r) * 10.0;
    let a = p.sample_batch(&s, &mut r).unwrap();
    for row in a.rows() {
        assert!(row[0].abs() <= 2.0 && row[1].abs() <= 1.0);
    }
}

#[test]
fn score_vanishes_at_mean() {
    let p = gaussian(8);
    let s = randn((3, 3), &mut rng(9));
    let means = p.gaussian().unwrap().means(&s).unwrap();
    assert!(p.action_score(&s, &means).unwrap().iter().all(|v| *v == 0.0));
}

#[test]
fn centering_identity_on_its_own_samples() {
    let mut r = rng(10);
    let net = StateActionNet::new(3, 2, &[8], &mut r);
    let p = gaussian(11);
    let states = randn((5, 3), &mut r);
    let centered = center_advantage(&net, &states, &p, 64, &mut r).unwrap();
    for k in 0..5 {
        let v = centered.values(&net, k, &centered.samples[k]).unwrap();
        assert!((v.iter().sum::<f64>() / 64.0).abs() < 1e-12);
    }
}

fn table_policy(probs: &[f64], n_states: usize, n_actions: usize) -> Policy {
    let mut layer = Linear::zeros(n_states, n_actions);
    for s in 0..n_states {
        for a in 0..n_actions {
            let p = probs[s * n_actions + a];
            layer.weight[[s, a]] = if p > 0.0 { p.ln() } else { -1e3 };
        }
    }
    Policy::Categorical(CategoricalPolicy {
        net: Mlp::from_layers(vec![layer], vec![Activation::Identity]).unwrap(),
    })
}

#[test]
fn single_sample_centering_under_deterministic_policy() {
    let mdp = build_motivating_mdp();
    let pi = motivating_policy();
    let q = TabularFn {
        n_states: 9,
        n_actions: 2,
        table: value_iteration(&mdp, &pi, 4).unwrap().q,
    };
    let policy = table_policy(&pi.probs, 9, 2);
    let states = Tensor::from_shape_fn((8, 9), |(r, c)| if c == r + 1 { 1.0 } else { 0.0 });
    let centered = center_advantage(&q, &states, &policy, 1, &mut rng(12)).unwrap();
    for k in 0..8 {
        assert_eq!(centered.samples[k][[0, 0]], 0.0);
        assert_eq!(centered.values(&q, k, &centered.samples[k]).unwrap(), vec![0.0]);
    }
}

#[test]
fn centered_q_table_recovers_exact_advantage() {
    let mdp = build_motivating_mdp();
    let pi = motivating_policy();
    let vt = value_iteration(&mdp, &pi, 4).unwrap();
    let q = TabularFn {
        n_states: 9,
        n_actions: 2,
        table: vt.q.clone(),
    };
    let policy = table_policy(&pi.probs, 9, 2);
    let states = Tensor::from_shape_fn((1, 9), |(_, c)| if c == 0 { 1.0 } else { 0.0 });
    let centered = center_advantage(&q, &states, &policy, 200_000, &mut rng(13)).unwrap();
    let both = Tensor::from_shape_vec((2, 1), vec![0.0, 1.0]).unwrap();
    let v = centered.values(&q, 0, &both).unwrap();
    // the Monte-Carlo baseline has standard error 7/sqrt(2e5) ≈ 0.016
    assert!((v[0] + 7.0).abs() < 0.1 && (v[1] - 7.0).abs() < 0.1, "{v:?}");
}

#[test]
fn a2c_update_runs_on_segments() {
    let space = ActionSpace::Box {
        low: vec![-1.0],
        high: vec![1.0],
    };
    let mut r = rng(14);
    let mut agent = Agent::new(2, &space, AgentConfig::default(), &mut r);
    let segs: Vec<_> = (0..4)
        .map(|_| {
            TrajectorySegment::new(randn((4, 2), &mut r), randn((3, 1), &mut r), vec![1.0, 0.0, -1.0], false)
                .unwrap()
        })
        .collect();
    let stats = agent.a2c_update(&segs).unwrap();
    assert!(stats.policy_loss.is_finite() && stats.critic_loss.is_finite());
    assert_eq!(stats.skipped, 0);
    assert!(matches!(agent.a2c_update(&[]), Err(AgentError::EmptyBatch)));
}

#[test]
fn checkpoint_round_trip() {
    let space = ActionSpace::Box {
        low: vec![-1.0],
        high: vec![1.0],
    };
    let a = Agent::new(2, &space, AgentConfig::default(), &mut rng(15));
    let mut b = Agent::new(2, &space, AgentConfig::default(), &mut rng(16));
    let mut ck = Checkpoint::new();
    a.save_into(&mut ck);
    b.load_from(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
    assert_eq!(a.policy, b.policy);
    assert_eq!(a.advantage, b.advantage);
}
