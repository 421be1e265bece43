use crate::numerics::Tensor;

pub const STD_FLOOR: f64 = 1e-6;

/// Per-feature running mean and variance (Welford).
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub count: u64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl RunningStats {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn push(&mut self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.dim());
        self.count += 1;
        let n = self.count as f64;
        for (k, &v) in x.iter().enumerate() {
            let delta = v - self.mean[k];
            self.mean[k] += delta / n;
            self.m2[k] += delta * (v - self.mean[k]);
        }
    }

    /// Population standard deviation, floored. Unit scale before any data.
    pub fn std(&self) -> Vec<f64> {
        if self.count == 0 {
            return vec![1.0; self.dim()];
        }
        self.m2
            .iter()
            .map(|m| (m / self.count as f64).sqrt().max(STD_FLOOR))
            .collect()
    }
}

/// Feature scaling for states, actions and rewards, fit on real data.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub state: RunningStats,
    pub action: RunningStats,
    pub reward: RunningStats,
}

fn apply(x: &Tensor, mean: &[f64], std: &[f64], forward: bool) -> Tensor {
    Tensor::from_shape_fn(x.dim(), |(r, c)| {
        if forward {
            (x[[r, c]] - mean[c]) / std[c]
        } else {
            x[[r, c]] * std[c] + mean[c]
        }
    })
}

impl Normalizer {
    pub fn new(state_dim: usize, action_dim: usize) -> Self {
        Self {
            state: RunningStats::new(state_dim),
            action: RunningStats::new(action_dim),
            reward: RunningStats::new(1),
        }
    }

    pub fn observe(&mut self, state: &[f64], action: &[f64], reward: f64) {
        self.state.push(state);
        self.action.push(action);
        self.reward.push(&[reward]);
    }

    pub fn normalize_states(&self, x: &Tensor) -> Tensor {
        apply(x, &self.state.mean, &self.state.std(), true)
    }

    pub fn denormalize_states(&self, x: &Tensor) -> Tensor {
        apply(x, &self.state.mean, &self.state.std(), false)
    }

    pub fn normalize_actions(&self, x: &Tensor) -> Tensor {
        apply(x, &self.action.mean, &self.action.std(), true)
    }

    pub fn denormalize_actions(&self, x: &Tensor) -> Tensor {
        apply(x, &self.action.mean, &self.action.std(), false)
    }

    pub fn normalize_reward(&self, r: f64) -> f64 {
        (r - self.reward.mean[0]) / self.reward.std()[0]
    }

    pub fn denormalize_reward(&self, r: f64) -> f64 {
        r * self.reward.std()[0] + self.reward.mean[0]
    }

    pub(crate) fn to_tensors(&self) -> Vec<(&'static str, Tensor)> {
        let row = |v: &[f64]| Tensor::from_shape_vec((1, v.len()), v.to_vec()).expect("row");
        vec![
            ("norm.state.mean", row(&self.state.mean)),
            ("norm.state.m2", row(&self.state.m2)),
            ("norm.action.mean", row(&self.action.mean)),
            ("norm.action.m2", row(&self.action.m2)),
            ("norm.reward.mean", row(&self.reward.mean)),
            ("norm.reward.m2", row(&self.reward.m2)),
        ]
    }
}
