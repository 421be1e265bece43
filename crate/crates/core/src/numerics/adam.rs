use super::{NumericsError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// The gradient held a non-finite entry; parameters and moments untouched.
    Skipped,
}

/// Adam optimizer state for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        Self {
            config,
            step: 0,
            first_moment: params.iter().map(|p| Tensor::zeros(p.dim())).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.dim())).collect(),
        }
    }

    pub fn step(&mut self, mut params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<StepOutcome, NumericsError> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(NumericsError::Shape(format!(
                "adam: {} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.dim() != g.dim() || p.dim() != self.first_moment[k].dim() {
                return Err(NumericsError::Shape(format!(
                    "adam: parameter {k} has shape {:?}, gradient {:?}",
                    p.dim(),
                    g.dim()
                )));
            }
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            log::warn!("adam: non-finite gradient, update skipped at step {}", self.step);
            return Ok(StepOutcome::Skipped);
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let m = &mut self.first_moment[k];
            let v = &mut self.second_moment[k];
            ndarray::Zip::from(&mut **p)
                .and(m)
                .and(v)
                .and(&grads[k])
                .for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(StepOutcome::Applied)
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm.is_finite() && norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = array![[1.0, -2.0]];
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), &[&p]);
        for _ in 0..10 {
            opt.step(vec![&mut p], &[Tensor::zeros((1, 2))]).unwrap();
        }
        assert_eq!(p, array![[1.0, -2.0]]);
        assert_eq!(opt.step, 10);
    }

    #[test]
    fn constant_gradient_descends() {
        let mut p = array![[0.0, 0.0]];
        let mut opt = Adam::new(AdamConfig::with_lr(0.01), &[&p]);
        for _ in 0..50 {
            opt.step(vec![&mut p], &[array![[2.0, -3.0]]]).unwrap();
        }
        assert!(p[[0, 0]] < 0.0 && p[[0, 1]] > 0.0);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so Δ = lr · g / (|g| + eps)
        let mut p = array![[0.5]];
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), &[&p]);
        opt.step(vec![&mut p], &[array![[1.0]]]).unwrap();
        let expected = 0.5 - 0.1 / (1.0 + 1e-8);
        assert!((p[[0, 0]] - expected).abs() < 1e-15);
    }

    #[test]
    fn nonfinite_gradient_is_skipped() {
        let mut p = array![[0.5]];
        let mut opt = Adam::new(AdamConfig::default(), &[&p]);
        let out = opt.step(vec![&mut p], &[array![[f64::NAN]]]).unwrap();
        assert_eq!(out, StepOutcome::Skipped);
        assert_eq!(opt.step, 0);
        assert_eq!(p[[0, 0]], 0.5);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = array![[0.5, 1.0]];
        let mut opt = Adam::new(AdamConfig::default(), &[&p]);
        assert!(opt.step(vec![&mut p], &[array![[1.0]]]).is_err());
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![array![[3.0]], array![[4.0]]];
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((g[0][[0, 0]] - 0.6).abs() < 1e-15);
        assert!((g[1][[0, 0]] - 0.8).abs() < 1e-15);
    }
}
