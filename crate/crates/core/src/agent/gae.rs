use super::{AgentError, ValueCritic};
use crate::worldmodel::TrajectorySegment;

/// GAE(λ) from rewards `r_1..r_H` and values `V(s_1)..V(s_{H+1})`.
///
/// Returns per-step advantages and value targets `Â_t + V(s_t)`. With
/// `terminal` set the bootstrap value is taken as zero.
pub fn gae_from_values(
    rewards: &[f64],
    values: &[f64],
    terminal: bool,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), AgentError> {
    let h = rewards.len();
    if values.len() != h + 1 {
        return Err(AgentError::MissingBootstrap(format!(
            "{h} rewards need {} values including the bootstrap state, got {}",
            h + 1,
            values.len()
        )));
    }
    let mut adv = vec![0.0; h];
    let mut acc = 0.0;
    for t in (0..h).rev() {
        let next = if t + 1 == h && terminal { 0.0 } else { values[t + 1] };
        let delta = rewards[t] + gamma * next - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, targets))
}

pub fn gae_advantages(
    segment: &TrajectorySegment,
    critic: &ValueCritic,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), AgentError> {
    let values = critic.values(&segment.states)?;
    gae_from_values(&segment.rewards, &values, segment.terminal, gamma, lambda)
}
