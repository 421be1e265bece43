use crate::numerics::Tensor;

use super::WorldModelError;

/// `H` steps of states, actions and rewards plus the bootstrap state, in raw
/// environment units.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySegment {
    /// `(H + 1) × d_s`.
    pub states: Tensor,
    /// `H × d_a`.
    pub actions: Tensor,
    pub rewards: Vec<f64>,
    /// The last state is absorbing, so its value is not bootstrapped.
    pub terminal: bool,
}

impl TrajectorySegment {
    pub fn new(states: Tensor, actions: Tensor, rewards: Vec<f64>, terminal: bool) -> Result<Self, WorldModelError> {
        let h = rewards.len();
        if h == 0 {
            return Err(WorldModelError::Segment("horizon must be at least 1".into()));
        }
        if states.nrows() != h + 1 || actions.nrows() != h {
            return Err(WorldModelError::Segment(format!(
                "horizon {h} needs {} states and {h} actions, got {} and {}",
                h + 1,
                states.nrows(),
                actions.nrows()
            )));
        }
        let seg = Self {
            states,
            actions,
            rewards,
            terminal,
        };
        if !seg.is_finite() {
            return Err(WorldModelError::Segment("segment holds a non-finite entry".into()));
        }
        Ok(seg)
    }

    pub fn horizon(&self) -> usize {
        self.rewards.len()
    }

    pub fn state_dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn action_dim(&self) -> usize {
        self.actions.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.states
            .iter()
            .chain(self.actions.iter())
            .chain(&self.rewards)
            .all(|v| v.is_finite())
    }

    /// The `H` states paired with actions, without the bootstrap state.
    pub fn acting_states(&self) -> Tensor {
        self.states.slice(ndarray::s![..self.horizon(), ..]).to_owned()
    }
}
