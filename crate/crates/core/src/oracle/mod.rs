//! Exact tabular computations: policy evaluation, advantages, tilted
//! policies, trajectory enumeration and the improvement checks built on them.

mod enumerate;
mod verify;

pub use enumerate::{enumerate_tilted_distribution, TiltedEnumeration, TrajectoryAtom, ATOM_BUDGET};
pub use verify::{
    identity_sweep, improvement_check, myopia_report, run_verification_suite, verify_improvement,
    IdentityReport, ImprovementCheck, ImprovementReport, MyopiaReport, VerificationReport, IMPROVEMENT_TOL,
};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Dirichlet, Distribution};
use serde::{Deserialize, Serialize};

use crate::envs::{motivating, EnvError, TabularMdp};
use crate::numerics::{log_sigmoid, sigmoid};

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("linear system is singular: {0}")]
    Singular(String),
    #[error("enumeration too large: {0}")]
    Budget(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Env(#[from] EnvError),
}

const ROW_TOL: f64 = 1e-12;

/// Table `π(a|s)` stored at `s * n_actions + a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactPolicy {
    pub n_states: usize,
    pub n_actions: usize,
    pub probs: Vec<f64>,
}

impl ExactPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self, OracleError> {
        if probs.len() != n_states * n_actions {
            return Err(OracleError::Invalid(format!(
                "policy table has {} entries, expected {}",
                probs.len(),
                n_states * n_actions
            )));
        }
        let policy = Self {
            n_states,
            n_actions,
            probs,
        };
        for s in 0..n_states {
            let row = policy.row(s);
            let total: f64 = row.iter().sum();
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (total - 1.0).abs() > ROW_TOL {
                return Err(OracleError::Invalid(format!("policy row {s} sums to {total}")));
            }
        }
        Ok(policy)
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    /// Rows drawn from a flat Dirichlet.
    pub fn random(n_states: usize, n_actions: usize, rng: &mut impl Rng) -> Self {
        let dist = Dirichlet::new_with_size(1.0, n_actions).expect("at least two actions");
        let mut probs = Vec::with_capacity(n_states * n_actions);
        for _ in 0..n_states {
            let mut row = dist.sample(rng);
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= total);
            probs.extend(row);
        }
        Self {
            n_states,
            n_actions,
            probs,
        }
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    fn check_against(&self, mdp: &TabularMdp) -> Result<(), OracleError> {
        if self.n_states != mdp.n_states || self.n_actions != mdp.n_actions {
            return Err(OracleError::Invalid(format!(
                "policy is {}x{}, MDP is {}x{}",
                self.n_states, self.n_actions, mdp.n_states, mdp.n_actions
            )));
        }
        Ok(())
    }
}

/// The 50/50 policy at `s1` of the motivating chain; elsewhere `a1` always,
/// since the second action index duplicates the first there.
pub fn motivating_policy() -> ExactPolicy {
    let mut probs = vec![0.0; 9 * 2];
    for s in 0..9 {
        probs[s * 2 + motivating::A1] = 1.0;
    }
    probs[motivating::S1 * 2 + motivating::A1] = 0.5;
    probs[motivating::S1 * 2 + motivating::A2] = 0.5;
    ExactPolicy::new(9, 2, probs).expect("rows on simplex")
}

/// State values, action values and advantages under a fixed policy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueTables {
    pub n_actions: usize,
    pub v: Vec<f64>,
    pub q: Vec<f64>,
}

impl ValueTables {
    pub fn q(&self, s: usize, a: usize) -> f64 {
        self.q[s * self.n_actions + a]
    }

    pub fn advantage(&self, s: usize, a: usize) -> f64 {
        self.q(s, a) - self.v[s]
    }

    /// `A(s,a)` for every pair, laid out like the policy table.
    pub fn advantages(&self) -> Vec<f64> {
        self.q
            .iter()
            .enumerate()
            .map(|(k, q)| q - self.v[k / self.n_actions])
            .collect()
    }

    fn from_v(mdp: &TabularMdp, policy: &ExactPolicy, v_next: &[f64]) -> Self {
        let (ns, na) = (mdp.n_states, mdp.n_actions);
        let mut q = vec![0.0; ns * na];
        for s in 0..ns {
            for a in 0..na {
                let cont: f64 = mdp.row(s, a).iter().zip(v_next).map(|(p, v)| p * v).sum();
                q[s * na + a] = mdp.reward(s, a) + mdp.gamma * cont;
            }
        }
        let v = (0..ns)
            .map(|s| (0..na).map(|a| policy.prob(s, a) * q[s * na + a]).sum())
            .collect();
        Self { n_actions: na, v, q }
    }
}

/// `k` synchronous Bellman backups under `policy`, starting from `V ≡ 0`.
pub fn value_iteration(mdp: &TabularMdp, policy: &ExactPolicy, k: usize) -> Result<ValueTables, OracleError> {
    policy.check_against(mdp)?;
    if k == 0 {
        return Err(OracleError::Invalid("value iteration needs at least one backup".into()));
    }
    let mut tables = ValueTables::from_v(mdp, policy, &vec![0.0; mdp.n_states]);
    for _ in 1..k {
        tables = ValueTables::from_v(mdp, policy, &tables.v.clone());
    }
    Ok(tables)
}

fn policy_matrices(mdp: &TabularMdp, policy: &ExactPolicy) -> (DMatrix<f64>, DVector<f64>) {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut p = DMatrix::zeros(ns, ns);
    let mut r = DVector::zeros(ns);
    for s in 0..ns {
        for a in 0..na {
            let w = policy.prob(s, a);
            r[s] += w * mdp.reward(s, a);
            for (next, prob) in mdp.row(s, a).iter().enumerate() {
                p[(s, next)] += w * prob;
            }
        }
    }
    (p, r)
}

/// States that cannot reach a terminal state under `policy`.
fn non_absorbing_states(mdp: &TabularMdp, p: &DMatrix<f64>) -> Vec<usize> {
    let ns = mdp.n_states;
    let mut reaches = mdp.terminal.clone();
    let mut changed = true;
    while changed {
        changed = false;
        for s in 0..ns {
            if !reaches[s] && (0..ns).any(|next| p[(s, next)] > 0.0 && reaches[next]) {
                reaches[s] = true;
                changed = true;
            }
        }
    }
    (0..ns).filter(|&s| !reaches[s]).collect()
}

/// Solves `(I - γ P_π) V = r_π`, pinning terminal states to zero.
pub fn policy_state_values(mdp: &TabularMdp, policy: &ExactPolicy) -> Result<Vec<f64>, OracleError> {
    policy.check_against(mdp)?;
    let ns = mdp.n_states;
    let (p, r) = policy_matrices(mdp, policy);
    if mdp.gamma >= 1.0 {
        let stuck = non_absorbing_states(mdp, &p);
        if !stuck.is_empty() {
            return Err(OracleError::Singular(format!(
                "with discount 1 states {stuck:?} never reach a terminal state, so their values diverge"
            )));
        }
    }
    let mut lhs = DMatrix::identity(ns, ns) - p * mdp.gamma;
    let mut rhs = r;
    for s in (0..ns).filter(|&s| mdp.terminal[s]) {
        lhs.row_mut(s).fill(0.0);
        lhs[(s, s)] = 1.0;
        rhs[s] = 0.0;
    }
    let v = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| OracleError::Singular("LU factorization found a zero pivot".into()))?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(OracleError::Singular("solution is not finite".into()));
    }
    Ok(v.iter().copied().collect())
}

/// `J(π) = Σ_s ρ(s) V_π(s)`.
pub fn exact_policy_value(mdp: &TabularMdp, policy: &ExactPolicy) -> Result<f64, OracleError> {
    let v = policy_state_values(mdp, policy)?;
    Ok(v.iter().zip(&mdp.initial).map(|(v, rho)| v * rho).sum())
}

/// Fixed-point `Q_π`, `V_π` and `A_π` from the exact linear solve.
pub fn exact_advantage(mdp: &TabularMdp, policy: &ExactPolicy) -> Result<ValueTables, OracleError> {
    let v = policy_state_values(mdp, policy)?;
    Ok(ValueTables::from_v(mdp, policy, &v))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TiltKind {
    /// Weight `σ(A)`.
    Sigmoid,
    /// Weight `exp(A)`.
    Exp,
}

impl TiltKind {
    pub const ALL: [TiltKind; 2] = [TiltKind::Sigmoid, TiltKind::Exp];

    pub fn weight(self, adv: f64) -> f64 {
        match self {
            Self::Sigmoid => sigmoid(adv),
            Self::Exp => adv.exp(),
        }
    }

    pub fn log_weight(self, adv: f64) -> f64 {
        match self {
            Self::Sigmoid => log_sigmoid(adv),
            Self::Exp => adv,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Sigmoid => "sigmoid",
            Self::Exp => "exp",
        }
    }
}

/// `π̃(a|s) = π(a|s) w(A(s,a)) / Z(s)` with `Z(s) = Σ_a π(a|s) w(A(s,a))`.
/// Returns the tilted policy and the per-state normalizers.
pub fn tilt_policy(
    policy: &ExactPolicy,
    advantages: &[f64],
    kind: TiltKind,
) -> Result<(ExactPolicy, Vec<f64>), OracleError> {
    let (ns, na) = (policy.n_states, policy.n_actions);
    if advantages.len() != ns * na {
        return Err(OracleError::Invalid(format!(
            "advantage table has {} entries, expected {}",
            advantages.len(),
            ns * na
        )));
    }
    let mut probs = vec![0.0; ns * na];
    let mut z = vec![0.0; ns];
    for s in 0..ns {
        // normalize in log space so large advantages cannot overflow the ratio
        let logs: Vec<f64> = (0..na)
            .map(|a| policy.prob(s, a).ln() + kind.log_weight(advantages[s * na + a]))
            .collect();
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = logs.iter().map(|l| (l - m).exp()).sum();
        for a in 0..na {
            probs[s * na + a] = (logs[a] - m).exp() / total;
        }
        z[s] = (0..na)
            .map(|a| policy.prob(s, a) * kind.weight(advantages[s * na + a]))
            .sum();
    }
    Ok((ExactPolicy::new(ns, na, probs)?, z))
}
