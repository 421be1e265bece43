use super::*;
use crate::agent::LinearFn;
use crate::worldmodel::{DiffusionSchedule, MixtureNoise, Normalizer, SegmentLayout, WorldModel, WorldModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: (usize, usize), r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_shape_fn(shape, |_| StandardNormal.sample(r))
}

fn gaussian_policy(ds: usize, da: usize, seed: u64) -> Policy {
    Policy::new_gaussian(ds, vec![-3.0; da], vec![3.0; da], &[16], -0.7, &mut rng(seed))
}

#[test]
fn coupling_leaves_the_mean_in_place() {
    let p = gaussian_policy(2, 2, 1);
    let s = randn((5, 2), &mut rng(2));
    let mean = p.gaussian().unwrap().means(&s).unwrap();
    let noise = Tensor::zeros((5, 2));
    let (out, _) = couple_actions(&p, &s, &mean, 7, 0.1, 0.5, &noise).unwrap();
    assert_eq!(out, mean);
}

#[test]
fn coupling_step_follows_gaussian_score() {
    let p = gaussian_policy(2, 1, 3);
    let s = randn((4, 2), &mut rng(4));
    let mean = p.gaussian().unwrap().means(&s).unwrap();
    let var = p.gaussian().unwrap().std()[0].powi(2);
    let delta = 0.3;
    let a = mean.mapv(|m| m + delta);
    let (strength, beta) = (0.4, 0.05);
    let (out, _) = couple_actions(&p, &s, &a, 5, beta, strength, &Tensor::zeros((4, 1))).unwrap();
    for r in 0..4 {
        let moved = a[[r, 0]] - out[[r, 0]];
        assert!((moved - strength * beta * delta / var).abs() < 1e-12);
    }
}

#[test]
fn final_coupling_step_is_a_fresh_policy_sample() {
    let p = gaussian_policy(2, 2, 5);
    let mut r = rng(6);
    let s = randn((3, 2), &mut r);
    let noise = randn((3, 2), &mut r);
    let stale = Tensor::from_elem((3, 2), 2.5);
    let (out, _) = couple_actions(&p, &s, &stale, 1, 0.001, 0.5, &noise).unwrap();
    assert_eq!(out, p.sample_with_noise(&s, &noise).unwrap());
}

fn trained_model() -> WorldModel {
    let cfg = WorldModelConfig {
        horizon: 3,
        diffusion_steps: 20,
        hidden: vec![32, 32],
        ..Default::default()
    };
    let mut r = rng(9);
    let mut m = WorldModel::new(cfg, 2, 1, &mut r).unwrap();
    let segs: Vec<TrajectorySegment> = (0..16)
        .map(|_| {
            TrajectorySegment::new(
                randn((4, 2), &mut r),
                randn((3, 1), &mut r).mapv(f64::tanh),
                randn((3, 1), &mut r).column(0).to_vec(),
                false,
            )
            .unwrap()
        })
        .collect();
    segs.iter().for_each(|s| m.observe_segment(s));
    m.fit(&segs, 20, 8, &mut r).unwrap();
    m
}

#[test]
fn zero_guides_reproduce_the_unguided_sampler_bitwise() {
    let m = trained_model();
    let policy = gaussian_policy(2, 1, 10);
    let adv = LinearFn {
        state_weights: vec![1.0, -2.0],
        action_weights: vec![0.5],
        bias: 0.3,
    };
    let nets = GuideNets {
        advantage: Some(&adv),
        reward: Some(&adv),
        policy: Some(&policy),
    };
    let starts = randn((6, 2), &mut rng(11));
    let run = |cfg: GuidanceConfig| {
        guided_sample(m.sampler(), &cfg, nets, ActionSource::Policy(&policy), &starts, 42)
            .unwrap()
            .segments
    };
    let base = run(GuidanceConfig::for_kind(GuideKind::None).with_alpha(3.0));
    for kind in [GuideKind::Eag, GuideKind::Sag, GuideKind::Reward, GuideKind::PolicyOnly] {
        assert_eq!(run(GuidanceConfig::for_kind(kind).with_alpha(0.0)), base, "{kind}");
    }
    assert_ne!(run(GuidanceConfig::for_kind(GuideKind::Eag).with_alpha(5.0)), base);

    // with actions held fixed the guided path is the inpainted ancestral sampler
    let acts = randn((6, 3), &mut rng(12));
    let fixed = guided_sample(
        m.sampler(),
        &GuidanceConfig::default(),
        nets,
        ActionSource::Fixed(acts.clone()),
        &starts,
        42,
    )
    .unwrap()
    .segments;
    assert_eq!(fixed, m.ancestral_sample(&acts, Some(&starts), 42).unwrap());
}

#[test]
fn guided_samples_start_exactly_at_the_start_state() {
    let m = trained_model();
    let policy = gaussian_policy(2, 1, 13);
    let adv = LinearFn {
        state_weights: vec![50.0, -20.0],
        action_weights: vec![5.0],
        bias: 0.0,
    };
    let nets = GuideNets {
        advantage: Some(&adv),
        ..Default::default()
    };
    let starts = randn((8, 2), &mut rng(14)).mapv(|v| v * 3.7 + 0.1);
    let mut cfg = GuidanceConfig::for_kind(GuideKind::Eag).with_alpha(50.0);
    cfg.apply_to_actions = true;
    let batch = guided_sample(m.sampler(), &cfg, nets, ActionSource::Policy(&policy), &starts, 1).unwrap();
    for (seg, st) in batch.segments.iter().zip(starts.rows()) {
        assert_eq!(seg.states.row(0), st);
        // final actions are policy samples, so they respect the bounds
        assert!(seg.actions.iter().all(|a| a.abs() <= 3.0));
    }
    assert!(batch.diagnostics.final_advantage.is_some());
}

#[test]
fn missing_guide_network_is_reported() {
    let m = trained_model();
    let policy = gaussian_policy(2, 1, 15);
    let starts = Tensor::zeros((2, 2));
    let err = guided_sample(
        m.sampler(),
        &GuidanceConfig::for_kind(GuideKind::Sag),
        GuideNets::default(),
        ActionSource::Policy(&policy),
        &starts,
        0,
    )
    .unwrap_err();
    assert!(err.to_string().contains("advantage"), "{err}");
}

/// The motivating MDP over three steps from `s1`, one coordinate per state:
/// 0 at `s1`, then -1 along the `a1` branch and +1 along the `a2` branch.
/// Rewards ride in the diffused block as in the real layout.
fn motivating_embedding(steps: usize) -> (MixtureNoise, SegmentLayout, Normalizer) {
    let layout = SegmentLayout {
        horizon: 3,
        state_dim: 1,
        action_dim: 0,
    };
    let means = Tensor::from_shape_vec(
        (2, 7),
        vec![
            0.0, -1.0, -1.0, -1.0, -5.0, -4.0, -5.0, //
            0.0, 1.0, 1.0, 1.0, -5.0, -5.0, -5.0,
        ],
    )
    .unwrap();
    let schedule = DiffusionSchedule::with_default_bounds(steps).unwrap();
    let noise = MixtureNoise::new(means, vec![0.5, 0.5], 0.05, schedule).unwrap();
    (noise, layout, Normalizer::new(1, 0))
}

fn branch_two_frequency(kind: GuideKind, alpha: f64, f: &dyn StateActionFn, n: usize) -> f64 {
    let (noise, layout, norm) = motivating_embedding(100);
    let sampler = Sampler {
        x0_clip: None,
        noise: &noise,
        schedule: &noise.schedule,
        layout,
        normalizer: &norm,
    };
    let nets = GuideNets {
        advantage: Some(f),
        reward: Some(f),
        policy: None,
    };
    let cfg = GuidanceConfig::for_kind(kind).with_alpha(alpha);
    let batch = guided_sample(
        sampler,
        &cfg,
        nets,
        ActionSource::Fixed(Tensor::zeros((n, 0))),
        &Tensor::zeros((n, 1)),
        2024,
    )
    .unwrap();
    batch.segments.iter().filter(|s| s.states[[1, 0]] > 0.0).count() as f64 / n as f64
}

#[test]
fn advantage_and_reward_guides_steer_opposite_ways() {
    // summed over the acting states this is A = ±7 per branch
    let advantage = LinearFn {
        state_weights: vec![3.5],
        action_weights: vec![],
        bias: 0.0,
    };
    // summed over the acting states this is -14 on branch one, -15 on two
    let reward = LinearFn {
        state_weights: vec![-0.25],
        action_weights: vec![],
        bias: -29.0 / 6.0,
    };
    let n = 4000;
    let alphas = [0.0, 0.05, 0.1, 0.2, 0.4];
    let eag: Vec<f64> = alphas
        .iter()
        .map(|&a| branch_two_frequency(GuideKind::Eag, a, &advantage, n))
        .collect();
    let rew: Vec<f64> = alphas
        .iter()
        .map(|&a| branch_two_frequency(GuideKind::Reward, a * 10.0, &reward, n))
        .collect();
    assert!((eag[0] - 0.5).abs() < 0.03, "{eag:?}");
    for w in eag.windows(2) {
        assert!(w[1] >= w[0], "advantage guide not monotone: {eag:?}");
    }
    for w in rew.windows(2) {
        assert!(w[1] <= w[0], "reward guide not monotone: {rew:?}");
    }
    assert!(eag[4] > 0.6 && rew[4] < 0.4, "{eag:?} {rew:?}");
}
