use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{
    enumerate_tilted_distribution, exact_advantage, exact_policy_value, motivating_policy, tilt_policy,
    value_iteration, ExactPolicy, OracleError, TiltKind,
};
use crate::envs::{build_motivating_mdp, motivating, random_tabular_mdp, TabularMdp};

/// Slack allowed on `J(tilted) - J(original)`.
pub const IMPROVEMENT_TOL: f64 = -1e-10;
const IDENTITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Serialize)]
pub struct ImprovementCheck {
    pub j_original: f64,
    pub j_tilted: f64,
    pub margin: f64,
    /// Smallest `E_{a~π̃}[A(s,a)]` over states.
    pub min_tilted_advantage: f64,
}

/// Tilts `policy` by its exact advantage and compares exact returns.
pub fn improvement_check(
    mdp: &TabularMdp,
    policy: &ExactPolicy,
    kind: TiltKind,
) -> Result<ImprovementCheck, OracleError> {
    let adv = exact_advantage(mdp, policy)?.advantages();
    let (tilted, _) = tilt_policy(policy, &adv, kind)?;
    let j_original = exact_policy_value(mdp, policy)?;
    let j_tilted = exact_policy_value(mdp, &tilted)?;
    let na = mdp.n_actions;
    let min_tilted_advantage = (0..mdp.n_states)
        .map(|s| (0..na).map(|a| tilted.prob(s, a) * adv[s * na + a]).sum::<f64>())
        .fold(f64::INFINITY, f64::min);
    Ok(ImprovementCheck {
        j_original,
        j_tilted,
        margin: j_tilted - j_original,
        min_tilted_advantage,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ImprovementReport {
    pub kind: TiltKind,
    pub trials: usize,
    pub violations: usize,
    pub min_margin: f64,
    pub min_tilted_advantage: f64,
    /// Trial indices whose margin or tilted advantage fell below tolerance.
    pub failures: Vec<usize>,
}

impl ImprovementReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

fn random_instance(seed: u64, trial: usize, max_states: usize, max_actions: usize) -> (TabularMdp, ExactPolicy) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(trial as u64));
    let ns = rng.gen_range(2..=max_states);
    let na = rng.gen_range(2..=max_actions);
    let mdp = random_tabular_mdp(rng.gen(), ns, na).expect("sizes are at least 2");
    let policy = ExactPolicy::random(ns, na, &mut rng);
    (mdp, policy)
}

/// Runs [`improvement_check`] on `n_trials` random MDP/policy pairs.
pub fn verify_improvement(seed: u64, n_trials: usize, kind: TiltKind) -> Result<ImprovementReport, OracleError> {
    let mut report = ImprovementReport {
        kind,
        trials: n_trials,
        violations: 0,
        min_margin: f64::INFINITY,
        min_tilted_advantage: f64::INFINITY,
        failures: Vec::new(),
    };
    for trial in 0..n_trials {
        let (mdp, policy) = random_instance(seed, trial, 8, 4);
        let check = improvement_check(&mdp, &policy, kind)?;
        report.min_margin = report.min_margin.min(check.margin);
        report.min_tilted_advantage = report.min_tilted_advantage.min(check.min_tilted_advantage);
        if check.margin < IMPROVEMENT_TOL || check.min_tilted_advantage < IMPROVEMENT_TOL {
            report.violations += 1;
            report.failures.push(trial);
        }
    }
    Ok(report)
}

/// Short-horizon view of a two-action start state: what each guide prefers
/// inside the window and which branch is actually optimal.
#[derive(Debug, Clone, Serialize)]
pub struct MyopiaReport {
    pub start: usize,
    pub horizon: usize,
    pub backups: usize,
    /// `A(start, a)` for the two start actions.
    pub start_advantages: [f64; 2],
    /// Largest `|A(s,a)|` away from the start state.
    pub max_abs_advantage_elsewhere: f64,
    /// Expected `H`-step reward sum given the first action.
    pub branch_rewards: [f64; 2],
    /// Expected `H`-step advantage sum given the first action.
    pub branch_advantages: [f64; 2],
    /// Exact `J` when the first action is forced.
    pub branch_values: [f64; 2],
    pub j_policy: f64,
    pub j_exp_tilted: f64,
    pub reward_prefers: usize,
    pub advantage_prefers: usize,
    pub optimal_branch: usize,
}

fn argmax2(x: [f64; 2]) -> usize {
    usize::from(x[1] > x[0])
}

fn force_action(policy: &ExactPolicy, s: usize, a: usize) -> ExactPolicy {
    let mut forced = policy.clone();
    for b in 0..policy.n_actions {
        forced.probs[s * policy.n_actions + b] = if b == a { 1.0 } else { 0.0 };
    }
    forced
}

/// Builds the report from `backups` steps of value iteration. Needs a
/// deterministic start state with two actions.
pub fn myopia_report(
    mdp: &TabularMdp,
    policy: &ExactPolicy,
    horizon: usize,
    backups: usize,
) -> Result<MyopiaReport, OracleError> {
    if mdp.n_actions != 2 {
        return Err(OracleError::Invalid("myopia report needs exactly two actions".into()));
    }
    let start = mdp
        .initial
        .iter()
        .position(|&p| p == 1.0)
        .ok_or_else(|| OracleError::Invalid("myopia report needs a deterministic start state".into()))?;
    let vt = value_iteration(mdp, policy, backups)?;
    let adv = vt.advantages();
    let max_abs_advantage_elsewhere = (0..mdp.n_states)
        .filter(|&s| s != start)
        .flat_map(|s| (0..2).map(move |a| (s, a)))
        .map(|(s, a)| adv[s * 2 + a].abs())
        .fold(0.0, f64::max);

    let en = enumerate_tilted_distribution(mdp, policy, &adv, horizon, TiltKind::Exp, start)?;
    let mut mass = [0.0; 2];
    let mut branch_rewards = [0.0; 2];
    let mut branch_advantages = [0.0; 2];
    for atom in &en.atoms {
        let b = atom.actions[0];
        mass[b] += atom.probability;
        branch_rewards[b] += atom.probability * atom.cumulative_reward;
        branch_advantages[b] += atom.probability * atom.cumulative_advantage;
    }
    for b in 0..2 {
        if mass[b] == 0.0 {
            return Err(OracleError::Invalid(format!("policy never takes action {b} at the start")));
        }
        branch_rewards[b] /= mass[b];
        branch_advantages[b] /= mass[b];
    }
    let branch_values = [
        exact_policy_value(mdp, &force_action(policy, start, 0))?,
        exact_policy_value(mdp, &force_action(policy, start, 1))?,
    ];
    let (tilted, _) = tilt_policy(policy, &adv, TiltKind::Exp)?;
    Ok(MyopiaReport {
        start,
        horizon,
        backups,
        start_advantages: [vt.advantage(start, 0), vt.advantage(start, 1)],
        max_abs_advantage_elsewhere,
        branch_rewards,
        branch_advantages,
        branch_values,
        j_policy: exact_policy_value(mdp, policy)?,
        j_exp_tilted: exact_policy_value(mdp, &tilted)?,
        reward_prefers: argmax2(branch_rewards),
        advantage_prefers: argmax2(branch_advantages),
        optimal_branch: argmax2(branch_values),
    })
}

impl MyopiaReport {
    /// The checks the motivating chain is built to satisfy.
    pub fn motivating_checks_hold(&self) -> bool {
        self.start_advantages == [-7.0, 7.0]
            && self.max_abs_advantage_elsewhere == 0.0
            && self.branch_rewards == [-14.0, -15.0]
            && self.branch_advantages == [-7.0, 7.0]
            && self.reward_prefers == 0
            && self.advantage_prefers == 1
            && self.optimal_branch == 1
            && self.j_exp_tilted > self.j_policy
    }
}

impl fmt::Display for MyopiaReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.start + 1;
        let a = |b: usize| format!("a{}", b + 1);
        writeln!(f, "start state s{s}, {} value-iteration backups", self.backups)?;
        writeln!(f, "A(s{s},a1) = {}", self.start_advantages[0])?;
        writeln!(
            f,
            "A(s{s},a2) = {:+} (nonzero: advantages vanish only away from s{s})",
            self.start_advantages[1]
        )?;
        writeln!(f, "max |A(s,a)| over s != s{s}: {}", self.max_abs_advantage_elsewhere)?;
        writeln!(
            f,
            "H={} cumulative reward:    a1 branch {}, a2 branch {} -> reward guide prefers {}",
            self.horizon,
            self.branch_rewards[0],
            self.branch_rewards[1],
            a(self.reward_prefers)
        )?;
        writeln!(
            f,
            "H={} cumulative advantage: a1 branch {}, a2 branch {} -> advantage guide prefers {}",
            self.horizon,
            self.branch_advantages[0],
            self.branch_advantages[1],
            a(self.advantage_prefers)
        )?;
        writeln!(
            f,
            "exact return:              a1 branch {}, a2 branch {} -> optimal branch {}",
            self.branch_values[0],
            self.branch_values[1],
            a(self.optimal_branch)
        )?;
        write!(
            f,
            "J(policy) = {}, J(exp-tilted policy) = {:.6}",
            self.j_policy, self.j_exp_tilted
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentityReport {
    pub instances: usize,
    pub max_abs_diff: f64,
    pub max_probability_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    pub example: MyopiaReport,
    pub example_passed: bool,
    pub improvement: Vec<ImprovementReport>,
    pub identity: IdentityReport,
    pub violations: usize,
    pub passed: bool,
}

/// Checks the reweighting identity on `instances` random MDPs with `H <= 4`
/// plus the motivating chain, for both tilt kinds.
pub fn identity_sweep(seed: u64, instances: usize) -> Result<IdentityReport, OracleError> {
    let mut max_abs_diff: f64 = 0.0;
    let mut max_probability_error: f64 = 0.0;
    let mut record = |mdp: &TabularMdp, policy: &ExactPolicy, adv: &[f64], h: usize, start: usize| {
        for kind in TiltKind::ALL {
            let en = enumerate_tilted_distribution(mdp, policy, adv, h, kind, start)?;
            max_abs_diff = max_abs_diff.max(en.max_abs_diff);
            max_probability_error = max_probability_error.max((en.total_probability() - 1.0).abs());
        }
        Ok::<_, OracleError>(())
    };
    for k in 0..instances {
        let (mdp, policy) = random_instance(seed ^ 0x5eed, k, 4, 3);
        let adv = exact_advantage(&mdp, &policy)?.advantages();
        record(&mdp, &policy, &adv, 1 + k % 4, k % mdp.n_states)?;
    }
    let chain = build_motivating_mdp();
    let adv = value_iteration(&chain, &motivating_policy(), 4)?.advantages();
    for h in 1..=4 {
        record(&chain, &motivating_policy(), &adv, h, motivating::S1)?;
    }
    Ok(IdentityReport {
        instances: instances + 1,
        max_abs_diff,
        max_probability_error,
        passed: max_abs_diff <= IDENTITY_TOL && max_probability_error <= 1e-10,
    })
}

/// Everything the `verify` command reports.
pub fn run_verification_suite(seed: u64, trials: usize) -> Result<VerificationReport, OracleError> {
    let example = myopia_report(&build_motivating_mdp(), &motivating_policy(), 3, 4)?;
    let example_passed = example.motivating_checks_hold();
    let improvement = TiltKind::ALL
        .iter()
        .map(|&kind| verify_improvement(seed, trials, kind))
        .collect::<Result<Vec<_>, _>>()?;
    let identity = identity_sweep(seed, 100)?;
    let violations = improvement.iter().map(|r| r.violations).sum();
    let passed = example_passed && violations == 0 && identity.passed;
    Ok(VerificationReport {
        example,
        example_passed,
        improvement,
        identity,
        violations,
        passed,
    })
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mark = |ok: bool| if ok { "pass" } else { "FAIL" };
        writeln!(f, "[{}] motivating example", mark(self.example_passed))?;
        for line in self.example.to_string().lines() {
            writeln!(f, "       {line}")?;
        }
        for r in &self.improvement {
            writeln!(
                f,
                "[{}] {} tilt improvement: {} trials, {} violations, min margin {:.3e}, min tilted advantage {:.3e}",
                mark(r.passed()),
                r.kind.name(),
                r.trials,
                r.violations,
                r.min_margin,
                r.min_tilted_advantage
            )?;
        }
        write!(
            f,
            "[{}] reweighting identity: {} instances, max abs diff {:.3e}",
            mark(self.identity.passed),
            self.identity.instances,
            self.identity.max_abs_diff
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn motivating_report_matches_hand_values() {
        let r = myopia_report(&build_motivating_mdp(), &motivating_policy(), 3, 4).unwrap();
        assert_eq!(r.branch_rewards, [-14.0, -15.0]);
        assert_eq!(r.branch_advantages, [-7.0, 7.0]);
        assert_eq!(r.branch_values, [-19.0, -5.0]);
        assert_eq!((r.reward_prefers, r.advantage_prefers, r.optimal_branch), (0, 1, 1));
        assert!(r.motivating_checks_hold());
        assert!(r.to_string().contains("A(s1,a1) = -7"));
    }

    #[test]
    fn exp_tilt_strictly_improves_motivating_chain() {
        let mdp = build_motivating_mdp();
        let check = improvement_check(&mdp, &motivating_policy(), TiltKind::Exp).unwrap();
        assert!((check.j_original + 12.0).abs() < 1e-12);
        assert!(check.margin > 6.9);
    }

    #[test]
    fn uniform_rewards_give_zero_margin() {
        let mut mdp = random_tabular_mdp(9, 5, 3).unwrap();
        mdp.rewards.iter_mut().for_each(|r| *r = 0.25);
        let policy = ExactPolicy::random(5, 3, &mut ChaCha8Rng::seed_from_u64(9));
        for kind in TiltKind::ALL {
            let check = improvement_check(&mdp, &policy, kind).unwrap();
            assert!(check.margin.abs() < 1e-10, "{kind:?}: {}", check.margin);
        }
    }

    #[test]
    fn small_suite_passes() {
        let report = run_verification_suite(3, 20).unwrap();
        assert!(report.passed, "{report}");
        assert_eq!(report.violations, 0);
    }
}
