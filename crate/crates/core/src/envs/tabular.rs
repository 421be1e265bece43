use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution};
use serde::{Deserialize, Serialize};

use super::{ActionSpace, EnvError, Environment, EpisodeClock, Transition};

/// Finite MDP with dense transition and reward tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `P(s'|s,a)` stored at `(s * n_actions + a) * n_states + s'`.
    pub transitions: Vec<f64>,
    /// `r(s,a)` stored at `s * n_actions + a`.
    pub rewards: Vec<f64>,
    pub gamma: f64,
    pub initial: Vec<f64>,
    pub terminal: Vec<bool>,
}

const SIMPLEX_TOL: f64 = 1e-12;

/// Indices and reward constants of the two-branch motivating chain.
pub mod motivating {
    pub const S1: usize = 0;
    pub const S2: usize = 1;
    pub const S3: usize = 2;
    pub const S4: usize = 3;
    pub const S5: usize = 4;
    pub const S6: usize = 5;
    pub const S7: usize = 6;
    pub const S8: usize = 7;
    pub const S9: usize = 8;
    pub const A1: usize = 0;
    pub const A2: usize = 1;
    /// Per-step reward on ordinary transitions.
    pub const R: f64 = -5.0;
    /// Reward for leaving `s2`, slightly better than `R`.
    pub const R_BAR: f64 = -4.0;
    /// Reward for leaving `s8`, beyond a three-step window from `s1`.
    pub const R_STAR: f64 = 10.0;
    pub const BRANCH_1: [usize; 4] = [S1, S2, S3, S4];
    pub const BRANCH_2: [usize; 4] = [S1, S6, S7, S8];
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        gamma: f64,
        initial: Vec<f64>,
        terminal: Vec<bool>,
    ) -> Result<Self, EnvError> {
        let mdp = Self {
            n_states,
            n_actions,
            transitions,
            rewards,
            gamma,
            initial,
            terminal,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let (ns, na) = (self.n_states, self.n_actions);
        let invalid = |m: String| Err(EnvError::InvalidMdp(m));
        if ns == 0 || na == 0 {
            return invalid("empty state or action set".into());
        }
        if self.transitions.len() != ns * na * ns
            || self.rewards.len() != ns * na
            || self.initial.len() != ns
            || self.terminal.len() != ns
        {
            return invalid("table sizes do not match |S| and |A|".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return invalid(format!("discount {} outside (0, 1]", self.gamma));
        }
        for s in 0..ns {
            for a in 0..na {
                let row = self.row(s, a);
                if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                    return invalid(format!("P(.|{s},{a}) has an entry outside [0, 1]"));
                }
                let total: f64 = row.iter().sum();
                if (total - 1.0).abs() > SIMPLEX_TOL {
                    return invalid(format!("P(.|{s},{a}) sums to {total}"));
                }
                if !self.reward(s, a).is_finite() {
                    return invalid(format!("r({s},{a}) is not finite"));
                }
                if self.terminal[s] && (row[s] != 1.0 || self.reward(s, a) != 0.0) {
                    return invalid(format!("terminal state {s} must self-loop with zero reward"));
                }
            }
        }
        let total: f64 = self.initial.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL || self.initial.iter().any(|&p| p < 0.0) {
            return invalid(format!("initial distribution sums to {total}"));
        }
        Ok(())
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transitions[start..start + self.n_states]
    }

    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.row(s, a)[next]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.n_actions + a]
    }

    fn check_indices(&self, s: usize, a: usize) -> Result<(), EnvError> {
        if s >= self.n_states {
            return Err(EnvError::InvalidState(format!(
                "state {s} out of {} states",
                self.n_states
            )));
        }
        if a >= self.n_actions {
            return Err(EnvError::InvalidAction(format!(
                "action {a} out of {} actions",
                self.n_actions
            )));
        }
        Ok(())
    }

    /// Draws `s' ~ P(.|s,a)`.
    pub fn sample_next(&self, s: usize, a: usize, rng: &mut dyn RngCore) -> Result<usize, EnvError> {
        self.check_indices(s, a)?;
        Ok(sample_categorical(self.row(s, a), rng))
    }

    pub fn sample_initial(&self, rng: &mut dyn RngCore) -> usize {
        sample_categorical(&self.initial, rng)
    }

    /// One interaction step from index state `s`. The returned transition
    /// carries one-hot state encodings and the action index as a scalar.
    pub fn step(&self, s: usize, a: usize, rng: &mut dyn RngCore) -> Result<Transition, EnvError> {
        let next = self.sample_next(s, a, rng)?;
        Ok(Transition {
            state: self.one_hot(s),
            action: vec![a as f64],
            reward: self.reward(s, a),
            next_state: self.one_hot(next),
            done: self.terminal[s] || self.terminal[next],
            episode: 0,
            t: 0,
        })
    }

    pub fn one_hot(&self, s: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_states];
        v[s] = 1.0;
        v
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EnvError> {
        let mdp: Self = serde_json::from_str(text).map_err(|e| EnvError::InvalidMdp(e.to_string()))?;
        mdp.validate()?;
        Ok(mdp)
    }
}

pub(crate) fn sample_categorical(probs: &[f64], rng: &mut dyn RngCore) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Round-off: fall back to the last index with positive mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// The two-branch chain used to illustrate reward-guide myopia.
///
/// `s1 -a1-> s2 -> s3 -> s4 -> s5` and `s1 -a2-> s6 -> s7 -> s8 -> s9`, with
/// `s5` and `s9` absorbing. Every non-terminal step pays [`motivating::R`]
/// except `r(s2, ·) = R_BAR` and `r(s8, ·) = R_STAR`. States other than `s1`
/// have one effective action: both action indices behave identically there.
/// Deterministic transitions, `γ = 1`, start in `s1`.
pub fn build_motivating_mdp() -> TabularMdp {
    use motivating::*;
    let (ns, na) = (9, 2);
    let mut transitions = vec![0.0; ns * na * ns];
    let mut rewards = vec![0.0; ns * na];
    let mut link = |s: usize, a: usize, next: usize, r: f64| {
        transitions[(s * na + a) * ns + next] = 1.0;
        rewards[s * na + a] = r;
    };
    link(S1, A1, S2, R);
    link(S1, A2, S6, R);
    for a in [A1, A2] {
        link(S2, a, S3, R_BAR);
        link(S3, a, S4, R);
        link(S4, a, S5, R);
        link(S6, a, S7, R);
        link(S7, a, S8, R);
        link(S8, a, S9, R_STAR);
        link(S5, a, S5, 0.0);
        link(S9, a, S9, 0.0);
    }
    let mut initial = vec![0.0; ns];
    initial[S1] = 1.0;
    let mut terminal = vec![false; ns];
    terminal[S5] = true;
    terminal[S9] = true;
    TabularMdp::new(ns, na, transitions, rewards, 1.0, initial, terminal)
        .expect("motivating MDP is well formed")
}

fn dirichlet_row(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let dist = Dirichlet::new_with_size(1.0, n).expect("n >= 2");
    let mut row = dist.sample(rng);
    let total: f64 = row.iter().sum();
    row.iter_mut().for_each(|p| *p /= total);
    row
}

/// Random MDP: Dirichlet(1) transition rows and initial distribution,
/// rewards uniform in `[-1, 1]`, discount uniform in `[0.8, 0.99]`.
pub fn random_tabular_mdp(seed: u64, n_states: usize, n_actions: usize) -> Result<TabularMdp, EnvError> {
    if n_states < 2 || n_actions < 2 {
        return Err(EnvError::InvalidMdp(format!(
            "random MDPs need |S| >= 2 and |A| >= 2, got {n_states} and {n_actions}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transitions = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        transitions.extend(dirichlet_row(n_states, &mut rng));
    }
    let rewards = (0..n_states * n_actions)
        .map(|_| rng.gen_range(-1.0..=1.0))
        .collect();
    let gamma = rng.gen_range(0.8..=0.99);
    let initial = dirichlet_row(n_states, &mut rng);
    TabularMdp::new(
        n_states,
        n_actions,
        transitions,
        rewards,
        gamma,
        initial,
        vec![false; n_states],
    )
}

/// [`TabularMdp`] behind the [`Environment`] interface with one-hot
/// observations and a single-entry action holding the action index.
#[derive(Debug, Clone)]
pub struct TabularEnv {
    pub mdp: TabularMdp,
    pub max_steps: usize,
    state: usize,
    clock: EpisodeClock,
}

impl TabularEnv {
    pub fn new(mdp: TabularMdp, max_steps: usize) -> Self {
        Self {
            mdp,
            max_steps,
            state: 0,
            clock: EpisodeClock::default(),
        }
    }

    pub fn state_index(&self) -> usize {
        self.state
    }
}

impl Environment for TabularEnv {
    fn observation_dim(&self) -> usize {
        self.mdp.n_states
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(self.mdp.n_actions)
    }

    fn max_episode_steps(&self) -> usize {
        self.max_steps
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.state = self.mdp.sample_initial(rng);
        self.clock.start_episode();
        self.mdp.one_hot(self.state)
    }

    fn step(&mut self, action: &[f64], rng: &mut dyn RngCore) -> Result<Transition, EnvError> {
        let a = match action {
            [a] if *a >= 0.0 && a.fract() == 0.0 => *a as usize,
            _ => {
                return Err(EnvError::InvalidAction(format!(
                    "expected a single action index, got {action:?}"
                )))
            }
        };
        let mut tr = self.mdp.step(self.state, a, rng)?;
        let t = self.clock.tick();
        tr.episode = self.clock.episode;
        tr.t = t;
        tr.done |= t + 1 >= self.max_steps;
        self.state = tr.next_state.iter().position(|&v| v == 1.0).unwrap_or(self.state);
        Ok(tr)
    }
}
