use super::{DiffusionSchedule, NoiseModel, WorldModelError};
use crate::numerics::Tensor;

/// The exact noise predictor for data drawn from an isotropic Gaussian
/// mixture in normalized coordinates. Stands in for a perfectly trained
/// network when a test needs the sampler's behaviour without training error.
#[derive(Debug, Clone)]
pub struct MixtureNoise {
    /// `K × D` component means.
    pub means: Tensor,
    pub weights: Vec<f64>,
    /// Per-coordinate component standard deviation.
    pub sigma: f64,
    pub schedule: DiffusionSchedule,
}

impl MixtureNoise {
    pub fn new(means: Tensor, weights: Vec<f64>, sigma: f64, schedule: DiffusionSchedule) -> Result<Self, WorldModelError> {
        let total: f64 = weights.iter().sum();
        if weights.len() != means.nrows() || weights.iter().any(|w| !(*w > 0.0)) || !(sigma >= 0.0) {
            return Err(WorldModelError::Segment("mixture needs one positive weight per mean".into()));
        }
        Ok(Self {
            means,
            weights: weights.iter().map(|w| w / total).collect(),
            sigma,
            schedule,
        })
    }

    /// `∇ log p_i(x)` of the diffused marginal at step `i`.
    pub fn score(&self, x: &[f64], i: usize) -> Vec<f64> {
        let ab = self.schedule.alpha_bar(i);
        let var = ab * self.sigma * self.sigma + 1.0 - ab;
        let centers: Vec<Vec<f64>> = self.means.rows().into_iter().map(|m| m.iter().map(|v| ab.sqrt() * v).collect()).collect();
        let logits: Vec<f64> = centers
            .iter()
            .zip(&self.weights)
            .map(|(c, w)| w.ln() - x.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (2.0 * var))
            .collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let post: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = post.iter().sum();
        (0..x.len())
            .map(|d| {
                centers
                    .iter()
                    .zip(&post)
                    .map(|(c, p)| p / z * -(x[d] - c[d]) / var)
                    .sum()
            })
            .collect()
    }
}

impl NoiseModel for MixtureNoise {
    fn predict_noise(&self, x: &Tensor, _cond: &Tensor, steps: &[usize]) -> Result<Tensor, WorldModelError> {
        if x.ncols() != self.means.ncols() {
            return Err(WorldModelError::Segment(format!(
                "mixture is {}-dimensional, input has {} columns",
                self.means.ncols(),
                x.ncols()
            )));
        }
        let mut out = Tensor::zeros(x.dim());
        for (r, &i) in steps.iter().enumerate() {
            let scale = -(1.0 - self.schedule.alpha_bar(i)).sqrt();
            let score = self.score(&x.row(r).to_vec(), i);
            out.row_mut(r).iter_mut().zip(score).for_each(|(o, s)| *o = scale * s);
        }
        Ok(out)
    }
}
