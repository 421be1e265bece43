use serde::Serialize;

use super::{tilt_policy, ExactPolicy, OracleError, TiltKind};
use crate::envs::TabularMdp;

/// Upper bound on `(|S| |A|)^H` for exhaustive enumeration.
pub const ATOM_BUDGET: f64 = 1e6;

/// One explicit length-`H` trajectory `(s_1, a_1, …, s_H, a_H)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryAtom {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    /// `Π_t π(a_t|s_t) Π_{t<H} P(s_{t+1}|s_t,a_t)` from the fixed start.
    pub probability: f64,
    pub cumulative_reward: f64,
    pub cumulative_advantage: f64,
}

/// Both sides of the reweighting identity over every positive-probability
/// trajectory.
#[derive(Debug, Clone, Serialize)]
pub struct TiltedEnumeration {
    pub kind: TiltKind,
    pub atoms: Vec<TrajectoryAtom>,
    /// `p(τ) Π_t w(A_t)`, normalized.
    pub reweighted: Vec<f64>,
    /// `p̃(τ) Π_t Z(s_t)` under the tilted policy, normalized.
    pub tilted: Vec<f64>,
    pub max_abs_diff: f64,
}

impl TiltedEnumeration {
    pub fn total_probability(&self) -> f64 {
        self.atoms.iter().map(|a| a.probability).sum()
    }
}

fn normalize_logs(logs: &[f64]) -> Vec<f64> {
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logs.iter().map(|l| (l - m).exp()).sum();
    logs.iter().map(|l| (l - m).exp() / total).collect()
}

struct Walk<'a> {
    mdp: &'a TabularMdp,
    policy: &'a ExactPolicy,
    tilted: &'a ExactPolicy,
    advantages: &'a [f64],
    z: &'a [f64],
    kind: TiltKind,
    horizon: usize,
    atoms: Vec<TrajectoryAtom>,
    left: Vec<f64>,
    right: Vec<f64>,
}

struct Partial {
    states: Vec<usize>,
    actions: Vec<usize>,
    log_p: f64,
    log_left: f64,
    log_right: f64,
    reward: f64,
    advantage: f64,
}

impl Walk<'_> {
    fn visit(&mut self, s: usize, mut path: Partial) {
        let na = self.mdp.n_actions;
        path.states.push(s);
        for a in 0..na {
            let pa = self.policy.prob(s, a);
            if pa == 0.0 {
                continue;
            }
            let adv = self.advantages[s * na + a];
            let mut next = Partial {
                states: path.states.clone(),
                actions: path.actions.clone(),
                log_p: path.log_p + pa.ln(),
                log_left: path.log_left + pa.ln() + self.kind.log_weight(adv),
                log_right: path.log_right + self.tilted.prob(s, a).ln() + self.z[s].ln(),
                reward: path.reward + self.mdp.reward(s, a),
                advantage: path.advantage + adv,
            };
            next.actions.push(a);
            if next.actions.len() == self.horizon {
                self.atoms.push(TrajectoryAtom {
                    states: next.states,
                    actions: next.actions,
                    probability: next.log_p.exp(),
                    cumulative_reward: next.reward,
                    cumulative_advantage: next.advantage,
                });
                self.left.push(next.log_left);
                self.right.push(next.log_right);
                continue;
            }
            for (s_next, &p) in self.mdp.row(s, a).iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let branch = Partial {
                    states: next.states.clone(),
                    actions: next.actions.clone(),
                    log_p: next.log_p + p.ln(),
                    log_left: next.log_left + p.ln(),
                    log_right: next.log_right + p.ln(),
                    reward: next.reward,
                    advantage: next.advantage,
                };
                self.visit(s_next, branch);
            }
        }
    }
}

/// Enumerates every length-`horizon` trajectory from `start` and evaluates
/// the reweighted distribution two ways: directly as `p(τ) Π_t w(A_t)`, and
/// as the tilted-policy trajectory law times `Π_t Z(s_t)`. Accumulation runs
/// in log space.
pub fn enumerate_tilted_distribution(
    mdp: &TabularMdp,
    policy: &ExactPolicy,
    advantages: &[f64],
    horizon: usize,
    kind: TiltKind,
    start: usize,
) -> Result<TiltedEnumeration, OracleError> {
    policy.check_against(mdp)?;
    if horizon == 0 {
        return Err(OracleError::Invalid("horizon must be at least 1".into()));
    }
    if start >= mdp.n_states {
        return Err(OracleError::Invalid(format!("start state {start} out of range")));
    }
    let size = ((mdp.n_states * mdp.n_actions) as f64).powi(horizon as i32);
    if size > ATOM_BUDGET {
        return Err(OracleError::Budget(format!(
            "(|S||A|)^H = {size:.3e} exceeds the budget of {ATOM_BUDGET:.0e} atoms"
        )));
    }
    let (tilted, z) = tilt_policy(policy, advantages, kind)?;
    let mut walk = Walk {
        mdp,
        policy,
        tilted: &tilted,
        advantages,
        z: &z,
        kind,
        horizon,
        atoms: Vec::new(),
        left: Vec::new(),
        right: Vec::new(),
    };
    let root = Partial {
        states: Vec::with_capacity(horizon),
        actions: Vec::with_capacity(horizon),
        log_p: 0.0,
        log_left: 0.0,
        log_right: 0.0,
        reward: 0.0,
        advantage: 0.0,
    };
    walk.visit(start, root);
    let reweighted = normalize_logs(&walk.left);
    let tilted_side = normalize_logs(&walk.right);
    let max_abs_diff = reweighted
        .iter()
        .zip(&tilted_side)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(TiltedEnumeration {
        kind,
        atoms: walk.atoms,
        reweighted,
        tilted: tilted_side,
        max_abs_diff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{build_motivating_mdp, motivating::*, random_tabular_mdp};
    use crate::oracle::{exact_advantage, motivating_policy, value_iteration};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn motivating_branches_ratio() {
        let mdp = build_motivating_mdp();
        let adv = value_iteration(&mdp, &motivating_policy(), 4).unwrap().advantages();
        let en = enumerate_tilted_distribution(&mdp, &motivating_policy(), &adv, 3, TiltKind::Exp, S1).unwrap();
        assert_eq!(en.atoms.len(), 2);
        let (i1, i2) = if en.atoms[0].actions[0] == A1 { (0, 1) } else { (1, 0) };
        assert_eq!(en.atoms[i1].states, vec![S1, S2, S3]);
        assert_eq!(en.atoms[i2].states, vec![S1, S6, S7]);
        assert_eq!(en.atoms[i1].cumulative_reward, -14.0);
        assert_eq!(en.atoms[i2].cumulative_reward, -15.0);
        let p_ratio = en.atoms[i2].probability / en.atoms[i1].probability;
        let ratio = en.reweighted[i2] / en.reweighted[i1];
        assert!((ratio / (14f64.exp() * p_ratio) - 1.0).abs() < 1e-12);
        assert!(en.max_abs_diff < 1e-9);
    }

    #[test]
    fn zero_advantage_sigmoid_is_untilted() {
        let mdp = random_tabular_mdp(5, 3, 2).unwrap();
        let policy = ExactPolicy::random(3, 2, &mut ChaCha8Rng::seed_from_u64(5));
        let en = enumerate_tilted_distribution(&mdp, &policy, &[0.0; 6], 3, TiltKind::Sigmoid, 0).unwrap();
        for (atom, w) in en.atoms.iter().zip(&en.reweighted) {
            assert!((atom.probability - w).abs() < 1e-14);
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        for seed in 0..20 {
            let mdp = random_tabular_mdp(seed, 3, 2).unwrap();
            let policy = ExactPolicy::random(3, 2, &mut ChaCha8Rng::seed_from_u64(seed));
            let adv = exact_advantage(&mdp, &policy).unwrap().advantages();
            for start in 0..3 {
                let en = enumerate_tilted_distribution(&mdp, &policy, &adv, 4, TiltKind::Exp, start).unwrap();
                assert!((en.total_probability() - 1.0).abs() < 1e-10);
                assert!(en.max_abs_diff < 1e-9);
            }
        }
    }

    #[test]
    fn over_budget_rejected() {
        let mdp = random_tabular_mdp(1, 10, 10).unwrap();
        let policy = ExactPolicy::uniform(10, 10);
        let err = enumerate_tilted_distribution(&mdp, &policy, &[0.0; 100], 4, TiltKind::Exp, 0).unwrap_err();
        assert!(matches!(err, OracleError::Budget(_)));
    }
}
