use rand::RngCore;

use super::{HarnessError, ReplayBuffer};
use crate::envs::Environment;

/// Steps an environment with a behaviour policy and keeps the current
/// episode open between calls, so a budget split over many calls adds up to
/// exactly the same transitions as one call with the total.
pub struct Collector<E: Environment> {
    pub env: E,
    obs: Option<Vec<f64>>,
    episodes_finished: usize,
}

impl<E: Environment> Collector<E> {
    pub fn new(env: E) -> Self {
        Self {
            env,
            obs: None,
            episodes_finished: 0,
        }
    }

    pub fn episodes_finished(&self) -> usize {
        self.episodes_finished
    }

    /// Exactly `n_steps` transitions into `buffer`, resetting on `done`.
    pub fn collect(
        &mut self,
        n_steps: usize,
        buffer: &mut ReplayBuffer,
        rng: &mut dyn RngCore,
        mut act: impl FnMut(&[f64], &mut dyn RngCore) -> Result<Vec<f64>, HarnessError>,
    ) -> Result<(), HarnessError> {
        for _ in 0..n_steps {
            let obs = match self.obs.take() {
                Some(o) => o,
                None => self.env.reset(rng),
            };
            let action = act(&obs, rng)?;
            let tr = self.env.step(&action, rng)?;
            if !tr.is_finite() {
                return Err(HarnessError::NonFinite(format!(
                    "environment emitted a non-finite transition at episode {} step {}",
                    tr.episode, tr.t
                )));
            }
            if tr.done {
                self.episodes_finished += 1;
            } else {
                self.obs = Some(tr.next_state.clone());
            }
            buffer.push(tr);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub mean: f64,
    /// Zero when only one episode ran; see `single_episode`.
    pub std_err: f64,
    pub episodes: usize,
    pub single_episode: bool,
}

/// Undiscounted return of `n_episodes` full episodes under `act`.
pub fn evaluate_policy(
    env: &mut dyn Environment,
    n_episodes: usize,
    rng: &mut dyn RngCore,
    mut act: impl FnMut(&[f64], &mut dyn RngCore) -> Result<Vec<f64>, HarnessError>,
) -> Result<EvalStats, HarnessError> {
    if n_episodes == 0 {
        return Err(HarnessError::Config("eval.episodes: must be positive".into()));
    }
    let mut returns = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let mut obs = env.reset(rng);
        let mut total = 0.0;
        for _ in 0..env.max_episode_steps() {
            let action = act(&obs, rng)?;
            let tr = env.step(&action, rng)?;
            total += tr.reward;
            if tr.done {
                break;
            }
            obs = tr.next_state;
        }
        returns.push(total);
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std_err = if returns.len() > 1 {
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(EvalStats {
        mean,
        std_err,
        episodes: returns.len(),
        single_episode: returns.len() == 1,
    })
}
