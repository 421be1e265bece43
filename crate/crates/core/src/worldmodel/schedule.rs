use super::WorldModelError;

/// Linear variance schedule with the usual derived coefficients.
/// Steps are 1-based; index 0 of `alpha_bars` is the clean-data convention
/// `ᾱ_0 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    /// `ᾱ_0 ..= ᾱ_N`, length `N + 1`.
    pub alpha_bars: Vec<f64>,
    /// `β̃_i = β_i (1 - ᾱ_{i-1}) / (1 - ᾱ_i)`, so `β̃_1 = 0`.
    pub posterior_variances: Vec<f64>,
}

/// Endpoints of the default linear schedule for `n` steps. The familiar
/// `1e-4 .. 0.02` pair is tuned for 1000 steps; both ends scale by `1000/n`
/// so the product of `α_i` still drives the data close to pure noise.
pub fn default_beta_bounds(n: usize) -> (f64, f64) {
    let scale = 1000.0 / n as f64;
    ((1e-4 * scale).min(0.5), (0.02 * scale).min(0.999))
}

impl DiffusionSchedule {
    pub fn linear(n: usize, beta_start: f64, beta_end: f64) -> Result<Self, WorldModelError> {
        if n == 0 {
            return Err(WorldModelError::Schedule("step count must be positive".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(WorldModelError::Schedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..n)
            .map(|k| {
                if n == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * k as f64 / (n - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self, WorldModelError> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(WorldModelError::Schedule("every beta must lie in (0, 1)".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = vec![1.0];
        for a in &alphas {
            alpha_bars.push(alpha_bars.last().unwrap() * a);
        }
        let posterior_variances = (1..=betas.len())
            .map(|i| betas[i - 1] * (1.0 - alpha_bars[i - 1]) / (1.0 - alpha_bars[i]))
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            posterior_variances,
        })
    }

    pub fn with_default_bounds(n: usize) -> Result<Self, WorldModelError> {
        let (lo, hi) = default_beta_bounds(n);
        Self::linear(n, lo, hi)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, i: usize) -> f64 {
        self.betas[i - 1]
    }

    pub fn alpha(&self, i: usize) -> f64 {
        self.alphas[i - 1]
    }

    pub fn alpha_bar(&self, i: usize) -> f64 {
        self.alpha_bars[i]
    }

    pub fn posterior_variance(&self, i: usize) -> f64 {
        self.posterior_variances[i - 1]
    }

    pub fn check_step(&self, i: usize) -> Result<(), WorldModelError> {
        if i == 0 || i > self.steps() {
            return Err(WorldModelError::Schedule(format!(
                "diffusion step {i} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}
